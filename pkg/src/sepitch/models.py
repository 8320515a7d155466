"""Networks of the joint cascade: separation, pitch estimation, dynamic weights.

The separation and pitch modules are deliberately small stand-ins.  Anything
exposing ``params`` and the same ``forward`` signature can replace them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_freq: int = 1025
    n_frames: int = 129
    n_pitch: int = 360
    mss_hidden: int = 64
    pe_freq_bins: int = 256
    pe_context: int = 2
    pe_hidden: int = 128
    dwm_channels: tuple = (8, 16)
    dwm_stride: int = 2
    dwm_hidden: int = 64
    w_max: float = 2.0

    def __post_init__(self):
        if not 0 < self.pe_freq_bins <= self.n_freq:
            raise ValueError("pe_freq_bins must lie in (0, n_freq]")
        if self.w_max <= 1.0:
            raise ValueError("w_max must exceed 1 so hard samples can be up-weighted")
        object.__setattr__(self, "dwm_channels", tuple(self.dwm_channels))

    def as_dict(self):
        d = asdict(self)
        d["dwm_channels"] = list(self.dwm_channels)
        return d


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _batched(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return (x[None] if isinstance(x, Tensor) else arr[None]), True
    if arr.ndim != 3:
        raise ShapeError(f"expected (T, F) or (B, T, F) input, got shape {arr.shape}")
    return x if isinstance(x, Tensor) else arr, False


class DenseMaskMss:
    """Per-frame dense mask estimator ``F -> hidden -> F`` with a sigmoid head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        F, H = cfg.n_freq, cfg.mss_hidden
        self.params = ParamStore()
        self.params.add("w1", _he(rng, F, (F, H)))
        self.params.add("b1", np.zeros(H))
        self.params.add("w2", rng.normal(0.0, np.sqrt(1.0 / H), size=(H, F)))
        self.params.add("b2", np.zeros(F))

    def forward(self, mix_mag):
        """Return ``(mask, predicted_source_mag)``, both shaped like the input."""
        x, squeeze = _batched(mix_mag)
        if x.shape[-1] != self.cfg.n_freq:
            raise ShapeError(f"MSS expects {self.cfg.n_freq} frequency bins, got {x.shape[-1]}")
        p = self.params
        h = ad.relu(ad.linear(ad.log1p(x), p["w1"], p["b1"]))
        mask = ad.sigmoid(ad.linear(h, p["w2"], p["b2"]))
        pred = ad.mul(mask, x)
        if squeeze:
            mask, pred = mask[0], pred[0]
        return mask, pred


class ContextPe:
    """Frame classifier over ``2 * context + 1`` neighbouring frames.

    Uses the lowest ``pe_freq_bins`` STFT bins, log-compressed.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d_in = (2 * cfg.pe_context + 1) * cfg.pe_freq_bins
        self.params = ParamStore()
        self.params.add("w1", _he(rng, d_in, (d_in, cfg.pe_hidden)))
        self.params.add("b1", np.zeros(cfg.pe_hidden))
        self.params.add("w2", rng.normal(0.0, np.sqrt(1.0 / cfg.pe_hidden),
                                         size=(cfg.pe_hidden, cfg.n_pitch)))
        # start near "no pitch anywhere": most label entries are zero
        self.params.add("b2", np.full(cfg.n_pitch, -4.0))

    def forward(self, source_mag) -> Tensor:
        x, squeeze = _batched(source_mag)
        if x.shape[-1] != self.cfg.n_freq:
            raise ShapeError(f"PE expects {self.cfg.n_freq} frequency bins, got {x.shape[-1]}")
        p = self.params
        feats = ad.log1p(ad.getitem(ad.as_tensor(x), (Ellipsis, slice(0, self.cfg.pe_freq_bins))))
        ctx = ad.frame_context(feats, self.cfg.pe_context)
        h = ad.relu(ad.linear(ctx, p["w1"], p["b1"]))
        act = ad.sigmoid(ad.linear(h, p["w2"], p["b2"]))
        return act[0] if squeeze else act


class DynamicWeightModule:
    """Two strided 3x3 conv layers, a dense hidden layer and a 2-unit head.

    Input channels, in order: pitch from the predicted source, the pitch
    labels, pitch from the target source.  Output ``w_max * sigmoid(logits)``
    gives ``(w_mss, w_pe)`` per sample.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c1, c2 = cfg.dwm_channels
        self.params = ParamStore()
        self.params.add("conv1.w", _he(rng, 3 * 9, (c1, 3, 3, 3)))
        self.params.add("conv1.b", np.zeros(c1))
        self.params.add("conv2.w", _he(rng, c1 * 9, (c2, c1, 3, 3)))
        self.params.add("conv2.b", np.zeros(c2))
        flat = c2 * np.prod(self.feature_shape())
        self.params.add("fc.w", _he(rng, flat, (flat, cfg.dwm_hidden)))
        self.params.add("fc.b", np.zeros(cfg.dwm_hidden))
        self.params.add("head.w", rng.normal(0.0, 0.01, size=(cfg.dwm_hidden, 2)))
        self.params.add("head.b", np.zeros(2))

    def feature_shape(self):
        s = self.cfg.dwm_stride
        h, w = self.cfg.n_frames, self.cfg.n_pitch
        for _ in range(2):
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
        return h, w

    def forward(self, pred_pitch, gt_pitch, tgt_pitch) -> Tensor:
        mats = [_plain(m) for m in (pred_pitch, gt_pitch, tgt_pitch)]
        if not mats[0].shape == mats[1].shape == mats[2].shape:
            raise ShapeError("DWM inputs must share one T x N shape: "
                             f"{[m.shape for m in mats]}")
        x = np.stack(mats, axis=-3)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.shape[-2:] != (self.cfg.n_frames, self.cfg.n_pitch):
            raise ShapeError(f"DWM configured for {self.cfg.n_frames} x {self.cfg.n_pitch}, "
                             f"got {x.shape[-2:]}")
        p, s = self.params, self.cfg.dwm_stride
        h = ad.relu(ad.conv2d(x, p["conv1.w"], p["conv1.b"], stride=s, padding=1))
        h = ad.relu(ad.conv2d(h, p["conv2.w"], p["conv2.b"], stride=s, padding=1))
        h = ad.reshape(h, (h.shape[0], -1))
        h = ad.relu(ad.linear(h, p["fc.w"], p["fc.b"]))
        omega = ad.sigmoid(ad.linear(h, p["head.w"], p["head.b"])) * self.cfg.w_max
        return omega[0] if squeeze else omega


def _plain(m):
    # DWM inputs are constants: no gradient flows back into MSS/PE through them
    if isinstance(m, Tensor):
        return m.data
    if hasattr(m, "values"):
        return np.asarray(m.values, dtype=np.float64)
    return np.asarray(m, dtype=np.float64)


class JointModel:
    """Separation module cascaded into pitch estimation, plus the weight module."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, with_dwm: bool = True):
        self.cfg = cfg
        self.mss = DenseMaskMss(cfg, rng)
        self.pe = ContextPe(cfg, rng)
        self.dwm = DynamicWeightModule(cfg, rng) if with_dwm else None
        self.params = ParamStore()
        self.params.merge(self.mss.params, "mss.")
        self.params.merge(self.pe.params, "pe.")
        if self.dwm is not None:
            self.params.merge(self.dwm.params, "dwm.")

    def n_params(self) -> dict:
        out = {"mss": self.mss.params.n_params(), "pe": self.pe.params.n_params()}
        if self.dwm is not None:
            out["dwm"] = self.dwm.params.n_params()
        return out


def mss_forward(model: DenseMaskMss, mix_mag):
    mag = mix_mag.bins if hasattr(mix_mag, "bins") else mix_mag
    return model.forward(mag)


def pe_forward(model: ContextPe, source_mag) -> Tensor:
    mag = source_mag.bins if hasattr(source_mag, "bins") else source_mag
    return model.forward(mag)


def dwm_forward(model: DynamicWeightModule, pred_pitch, gt_pitch, tgt_pitch) -> Tensor:
    return model.forward(pred_pitch, gt_pitch, tgt_pitch)
