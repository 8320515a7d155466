"""Pitch grid: Hz/cents/bin conversions, label matrices and activation decoding."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FRAME_SECONDS = 0.02
VOICING_THRESHOLD = 0.5


class PitchRangeError(ValueError):
    """A voiced frequency falls outside the pitch grid."""


def hz_to_cents(f, f_ref):
    """``1200 * log2(f / f_ref)``; both frequencies must be positive."""
    f = np.asarray(f, dtype=np.float64)
    f_ref = np.asarray(f_ref, dtype=np.float64)
    if np.any(f <= 0) or np.any(f_ref <= 0):
        raise ValueError("frequencies must be positive to convert to cents")
    out = 1200.0 * np.log2(f / f_ref)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PitchGrid:
    n_bins: int = 360
    f_min: float = 32.7032
    cents_per_bin: float = 20.0

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("a pitch grid needs at least two bins")
        if self.f_min <= 0 or self.cents_per_bin <= 0:
            raise ValueError("f_min and cents_per_bin must be positive")

    @property
    def centers_hz(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.n_bins) * self.cents_per_bin / 1200.0)

    @property
    def f_max(self) -> float:
        return float(self.centers_hz[-1])

    def bin_position(self, f):
        """Fractional bin index of frequency ``f``."""
        return hz_to_cents(f, self.f_min) / self.cents_per_bin

    def nearest_bin(self, f) -> np.ndarray:
        """Nearest bin centre in cents; exact midpoints go to the higher bin."""
        pos = np.round(np.atleast_1d(self.bin_position(f)), 9)
        return np.floor(pos + 0.5).astype(int)

    def contains(self, f) -> np.ndarray:
        k = self.nearest_bin(f)
        return (k >= 0) & (k < self.n_bins)

    def as_dict(self):
        return {"n_bins": self.n_bins, "f_min": self.f_min,
                "cents_per_bin": self.cents_per_bin}


@dataclass(frozen=True)
class PitchTrack:
    """Frame-wise f0 in Hz on a uniform 20 ms grid; 0 marks an unvoiced frame."""

    times: np.ndarray
    f0: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        f = np.asarray(self.f0, dtype=np.float64)
        if t.shape != f.shape or t.ndim != 1:
            raise ValueError("times and f0 must be 1-D arrays of equal length")
        if np.any(f < 0) or not np.all(np.isfinite(f)):
            raise ValueError("f0 must be finite and nonnegative")
        if t.size > 1:
            dt = np.diff(t)
            if np.any(dt <= 0):
                raise ValueError("frame times must be strictly increasing")
            if np.max(np.abs(dt - FRAME_SECONDS)) > 1e-6:
                raise ValueError("frame times must be spaced 20 ms apart")
        t.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "f0", f)

    @classmethod
    def from_f0(cls, f0, start: float = 0.0) -> "PitchTrack":
        f0 = np.asarray(f0, dtype=np.float64)
        return cls(start + np.arange(f0.size) * FRAME_SECONDS, f0)

    def __len__(self):
        return self.f0.size

    @property
    def voiced(self) -> np.ndarray:
        return self.f0 > 0


@dataclass(frozen=True)
class PitchMatrix:
    values: np.ndarray
    grid: PitchGrid
    kind: str = "activation"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.grid.n_bins:
            raise ValueError(f"pitch matrix must be T x {self.grid.n_bins}, got {v.shape}")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("pitch matrix entries must lie in [0, 1]")
        if self.kind == "label":
            rows = v.sum(axis=1)
            if not np.all((rows == 0) | (rows == 1)) or not np.all((v == 0) | (v == 1)):
                raise ValueError("label rows must be one-hot or all zero")
        elif self.kind != "activation":
            raise ValueError(f"unknown pitch matrix kind {self.kind!r}")
        object.__setattr__(self, "values", v)


def track_to_matrix(track: PitchTrack, grid: PitchGrid, n_frames: int | None = None) -> PitchMatrix:
    n_frames = len(track) if n_frames is None else n_frames
    values = np.zeros((n_frames, grid.n_bins))
    f0 = track.f0[:n_frames]
    voiced = np.flatnonzero(f0 > 0)
    if voiced.size:
        k = grid.nearest_bin(f0[voiced])
        bad = (k < 0) | (k >= grid.n_bins)
        if np.any(bad):
            i = voiced[np.argmax(bad)]
            raise PitchRangeError(
                f"frame {i} (t={track.times[i]:.2f}s): f0={f0[i]:.3f} Hz lies outside "
                f"the pitch grid [{grid.f_min:.3f}, {grid.f_max:.3f}] Hz")
        values[voiced, k] = 1.0
    return PitchMatrix(values, grid, kind="label")


def decode_activation(m, grid: PitchGrid | None = None, start: float = 0.0) -> PitchTrack:
    """Argmax bin centre where the row maximum reaches 0.5, else unvoiced."""
    if isinstance(m, PitchMatrix):
        grid, values = m.grid, m.values
    else:
        values = np.asarray(m, dtype=np.float64)
        grid = grid or PitchGrid()
    peak = values.max(axis=1)
    f0 = np.where(peak >= VOICING_THRESHOLD,
                  grid.centers_hz[np.argmax(values, axis=1)], 0.0)
    return PitchTrack.from_f0(f0, start)


# --- label files: "time_sec<TAB>f0_hz" per 20 ms frame ---------------------

def write_track(path, track: PitchTrack) -> None:
    lines = [f"{t:.2f}\t{float(f)!r}\n" for t, f in zip(track.times, track.f0)]
    Path(path).write_text("".join(lines))


def read_track(path) -> PitchTrack:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected 'time<TAB>f0', got {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    if not rows:
        raise ValueError(f"{path}: no pitch frames")
    t, f = np.array(rows).T
    return PitchTrack(t, f)
