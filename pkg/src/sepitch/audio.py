"""Waveform and spectrogram containers, STFT/iSTFT and mask resynthesis.

Frames are centred: the signal is reflect-padded by ``window_size // 2`` on
both sides so that frame ``k`` is centred on sample ``k * hop``.  With a hop
of 320 samples at 16 kHz this lines frames up with 20 ms pitch labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000


class ConfigError(ValueError):
    """Invalid processing configuration."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {x.shape}")
        if x.size == 0:
            raise ValueError("waveform is empty")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 2048
    hop: int = 320
    window: str = "hann"
    center_pad: bool = True

    def __post_init__(self):
        if self.window_size <= 0 or self.hop <= 0:
            raise ConfigError("window_size and hop must be positive")
        if self.hop > self.window_size:
            raise ConfigError(
                f"hop ({self.hop}) exceeds window size ({self.window_size})")
        if self.window not in _WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}; "
                              f"choose from {sorted(_WINDOWS)}")
        env = _envelope_interior(self.window_array(), self.hop)
        if env.min() <= 1e-12:
            raise ConfigError(
                f"window {self.window!r} with hop {self.hop} cannot be inverted "
                "(zero squared-window envelope)")

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    def window_array(self) -> np.ndarray:
        return _WINDOWS[self.window](self.window_size)

    def n_frames(self, n_samples: int) -> int:
        if self.center_pad:
            return 1 + n_samples // self.hop
        if n_samples < self.window_size:
            return 0
        return 1 + (n_samples - self.window_size) // self.hop


def _hann(n):
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _hamming(n):
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOWS = {"hann": _hann, "hamming": _hamming, "boxcar": np.ones}


def _envelope_interior(win, hop):
    n = win.size
    env = np.zeros(n + hop * (n // hop + 1))
    for start in range(0, env.size - n + 1, hop):
        env[start:start + n] += win ** 2
    # a full-overlap stretch: past the first window, before the last
    return env[n:n + hop]


@dataclass(frozen=True)
class Spectrogram:
    """``T x F`` time-frequency matrix.

    ``bins`` is complex unless ``magnitude_only`` is set, in which case it
    holds nonnegative real magnitudes.
    """

    bins: np.ndarray
    frame_hop: int
    window_size: int
    magnitude_only: bool = False

    def __post_init__(self):
        b = np.asarray(self.bins)
        if b.ndim != 2:
            raise ShapeError(f"spectrogram must be T x F, got shape {b.shape}")
        if b.shape[1] != self.window_size // 2 + 1:
            raise ShapeError(
                f"F={b.shape[1]} does not match window size {self.window_size}")
        if b.shape[0] < 1:
            raise ShapeError("spectrogram has no frames")
        if self.magnitude_only:
            b = np.asarray(b, dtype=np.float64)
            if np.any(b < 0):
                raise ValueError("magnitude spectrogram has negative entries")
        else:
            b = np.asarray(b, dtype=np.complex128)
        b.setflags(write=False)
        object.__setattr__(self, "bins", b)

    @property
    def shape(self):
        return self.bins.shape

    def magnitude(self) -> "Spectrogram":
        if self.magnitude_only:
            return self
        return Spectrogram(np.abs(self.bins), self.frame_hop, self.window_size,
                           magnitude_only=True)


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Return the (optionally padded) signal cut into ``T x window_size`` frames.

    Works on the last axis, so a batch ``(B, L)`` gives ``(B, T, window_size)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = cfg.window_size
    if cfg.center_pad:
        pad = [(0, 0)] * (x.ndim - 1) + [(n // 2, n // 2)]
        x = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (x.shape[-1] - n) // cfg.hop
    if n_frames < 1:
        raise ShapeError(f"signal of {x.shape[-1]} samples is shorter than one window")
    frames = np.lib.stride_tricks.sliding_window_view(x, n, axis=-1)
    return frames[..., ::cfg.hop, :][..., :n_frames, :]


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex STFT of a 1-D signal or a ``(B, L)`` batch."""
    return np.fft.rfft(frame_signal(x, cfg) * cfg.window_array(), axis=-1)


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    return Spectrogram(stft_array(w.samples, cfg), cfg.hop, cfg.window_size)


def ola_envelope(n_frames: int, cfg: StftConfig) -> np.ndarray:
    win2 = cfg.window_array() ** 2
    env = np.zeros(cfg.window_size + cfg.hop * (n_frames - 1))
    for t in range(n_frames):
        env[t * cfg.hop:t * cfg.hop + cfg.window_size] += win2
    return env


def overlap_add(frames: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Weighted overlap-add of already-windowed time frames ``(..., T, n)``.

    Divides by the squared-window envelope, strips the centre padding and
    crops or zero-pads to ``length`` samples.
    """
    n_frames, n = frames.shape[-2], frames.shape[-1]
    out = np.zeros(frames.shape[:-2] + (n + cfg.hop * (n_frames - 1),))
    for t in range(n_frames):
        out[..., t * cfg.hop:t * cfg.hop + n] += frames[..., t, :]
    env = ola_envelope(n_frames, cfg)
    nz = env > 1e-10
    out[..., nz] /= env[nz]
    return _fit_length(out, cfg, length)


def _fit_length(out, cfg, length):
    start = cfg.window_size // 2 if cfg.center_pad else 0
    out = out[..., start:start + length]
    if out.shape[-1] < length:
        pad = [(0, 0)] * (out.ndim - 1) + [(0, length - out.shape[-1])]
        out = np.pad(out, pad)
    return out


def ola_adjoint(signal_grad: np.ndarray, n_frames: int, cfg: StftConfig) -> np.ndarray:
    """Adjoint of :func:`overlap_add`: maps a waveform gradient to frame gradients."""
    n = cfg.window_size
    total = n + cfg.hop * (n_frames - 1)
    start = n // 2 if cfg.center_pad else 0
    g = np.zeros(signal_grad.shape[:-1] + (total,))
    keep = min(signal_grad.shape[-1], total - start)
    g[..., start:start + keep] = signal_grad[..., :keep]
    env = ola_envelope(n_frames, cfg)
    nz = env > 1e-10
    g[..., nz] /= env[nz]
    g[..., ~nz] = 0.0
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(n)[None, :]
    return g[..., idx]


def istft_array(bins: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    frames = np.fft.irfft(bins, n=cfg.window_size, axis=-1) * cfg.window_array()
    return overlap_add(frames, cfg, length)


def istft(sp: Spectrogram, cfg: StftConfig = StftConfig(), length_hint: int | None = None,
          sample_rate: int = SAMPLE_RATE) -> Waveform:
    if sp.magnitude_only:
        raise ValueError("istft needs a complex spectrogram; supply a phase source "
                         "(e.g. apply_mask_resynth with the mixture)")
    if sp.window_size != cfg.window_size or sp.frame_hop != cfg.hop:
        raise ConfigError("spectrogram was not produced with this StftConfig")
    if length_hint is None:
        length_hint = (sp.shape[0] - 1) * cfg.hop
        if not cfg.center_pad:
            length_hint += cfg.window_size
    return Waveform(istft_array(sp.bins, cfg, length_hint), sample_rate)


def apply_mask_resynth(mix: Waveform, mask, cfg: StftConfig = StftConfig()) -> Waveform:
    """Resynthesise ``mask * STFT(mix)`` with the mixture phase."""
    m = mask.bins if isinstance(mask, Spectrogram) else np.asarray(mask, dtype=np.float64)
    spec = stft_array(mix.samples, cfg)
    if m.shape != spec.shape:
        raise ShapeError(f"mask shape {m.shape} != mixture STFT shape {spec.shape}")
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("mask entries must lie in [0, 1]")
    return Waveform(istft_array(m * spec, cfg, len(mix)), mix.sample_rate)


# --- WAV I/O ---------------------------------------------------------------

def read_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    path = Path(path)
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz "
                         "(resampling is not supported)")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}; "
                         "use 16-bit PCM or 32-bit float")
    return Waveform(x, rate)


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"only {SAMPLE_RATE} Hz output is supported")
    if fmt == "float32":
        data = w.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(Path(path), w.sample_rate, data)
