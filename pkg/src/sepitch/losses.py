"""Task losses, hard-sample case analysis and the dynamic-weight objectives."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .metrics import CENT_TOLERANCE
from .pitch import PitchTrack

BCE_EPS = 1e-7


class Case(enum.IntEnum):
    """Outcome of comparing pitch from the predicted and the target source.

    1: both correct.  2: predicted correct, target incorrect (noisy label).
    3: predicted incorrect, target correct (hard for separation).
    4: both incorrect (hard for pitch estimation).
    """

    CASE1 = 1
    CASE2 = 2
    CASE3 = 3
    CASE4 = 4

    @classmethod
    def from_flags(cls, pred_correct: bool, tgt_correct: bool) -> "Case":
        if pred_correct:
            return cls.CASE1 if tgt_correct else cls.CASE2
        return cls.CASE3 if tgt_correct else cls.CASE4


class NoVoicedFramesError(ValueError):
    pass


# --- task losses ---------------------------------------------------------------

def _as_signal(x):
    if isinstance(x, Tensor):
        return x
    return ad.as_tensor(getattr(x, "samples", x))


def loss_mss(target, predicted, gate=None) -> Tensor:
    """Mean absolute error between target and predicted waveforms.

    1-D inputs give a scalar; ``(B, L)`` inputs give per-sample losses ``(B,)``.
    ``gate`` (same shape, 0/1) restricts the mean to kept samples; a row
    with nothing kept scores 0.
    """
    s, s_hat = _as_signal(target), _as_signal(predicted)
    if s.shape != s_hat.shape:
        raise ShapeError(f"loss_mss: target {s.shape} vs prediction {s_hat.shape}")
    err = ad.tabs(ad.sub(s_hat, s))
    if gate is None:
        return ad.mean(err, axis=-1)
    gate = np.asarray(gate, dtype=np.float64)
    count = gate.sum(axis=-1)
    return ad.mul(ad.tsum(ad.mul(err, gate), axis=-1), 1.0 / np.maximum(count, 1.0))


def loss_pe(labels, activations, frame_gate=None) -> Tensor:
    """Frame-mean of the summed binary cross-entropy over pitch bins.

    ``(T, N)`` inputs give a scalar; ``(B, T, N)`` gives ``(B,)``.
    """
    y = np.asarray(getattr(labels, "values", labels), dtype=np.float64)
    act = activations if isinstance(activations, Tensor) else \
        ad.as_tensor(getattr(activations, "values", activations))
    if y.shape != act.shape:
        raise ShapeError(f"loss_pe: labels {y.shape} vs activations {act.shape}")
    per_frame = ad.tsum(ad.bce(act, y, BCE_EPS), axis=-1)
    if frame_gate is None:
        return ad.mean(per_frame, axis=-1)
    g = np.asarray(frame_gate, dtype=np.float64)
    count = g.sum(axis=-1)
    return ad.mul(ad.tsum(ad.mul(per_frame, g), axis=-1), 1.0 / np.maximum(count, 1.0))


# --- case analysis ------------------------------------------------------------

def frame_correct(est: PitchTrack, gt: PitchTrack, tolerance: float = CENT_TOLERANCE) -> np.ndarray:
    """Voicing agrees and, on voiced frames, pitch is within ``tolerance`` cents."""
    ev, gv = est.f0 > 0, gt.f0 > 0
    ok = ev == gv
    both = ev & gv
    cents = np.zeros(len(gt))
    cents[both] = 1200.0 * np.abs(np.log2(est.f0[both] / gt.f0[both]))
    return ok & (~both | (cents <= tolerance))


def classify_case(pred_pitch: PitchTrack, tgt_pitch: PitchTrack, gt: PitchTrack,
                  tau: float = 0.5, frame_mask=None) -> Case:
    """Assign a case from the frame-correct fractions of both pitch tracks.

    A track counts as correct when at least ``tau`` of the considered frames
    are correct.  ``frame_mask`` drops frames (e.g. gated pseudo labels).
    """
    if not (len(pred_pitch) == len(tgt_pitch) == len(gt)):
        raise ShapeError("pitch tracks must be frame-aligned")
    keep = np.ones(len(gt), bool) if frame_mask is None else np.asarray(frame_mask, bool)
    if not np.any(gt.voiced & keep):
        raise NoVoicedFramesError("no voiced reference frames to classify against")
    pred_ok = frame_correct(pred_pitch, gt)[keep].mean() >= tau
    tgt_ok = frame_correct(tgt_pitch, gt)[keep].mean() >= tau
    return Case.from_flags(bool(pred_ok), bool(tgt_ok))


# --- dynamic-weight losses -------------------------------------------------------

def _bpr(x):
    # -ln sigmoid(x)
    return ad.softplus(ad.mul(x, -1.0))


def dwhs_case_loss(case: Case, w_mss, w_pe) -> Tensor:
    """Per-case objective that pulls the weight pair toward its target region."""
    w_mss, w_pe = ad.as_tensor(w_mss), ad.as_tensor(w_pe)
    case = Case(case)
    if case == Case.CASE1:
        return ad.tabs(w_mss - 1.0) + ad.tabs(w_pe - 1.0)
    if case == Case.CASE2:
        return ad.tabs(w_mss - 1.0) + _bpr(1.0 - w_pe)
    if case == Case.CASE3:
        return _bpr(w_mss - 1.0) + ad.tabs(w_pe - 1.0)
    return ad.tabs(w_mss - 1.0) + _bpr(w_pe - 1.0)


def dwhs_loss(cases, omega) -> tuple[Tensor, dict]:
    """Sum over cases of the mean per-case loss; absent cases contribute 0.

    ``cases`` holds one :class:`Case` (or ``None`` for excluded samples) per
    row of ``omega`` ``(B, 2)``.
    """
    omega = ad.as_tensor(omega)
    cases = list(cases)
    if omega.ndim != 2 or omega.shape != (len(cases), 2):
        raise ShapeError(f"omega must be ({len(cases)}, 2), got {omega.shape}")
    total = Tensor(0.0)
    parts = {}
    for c in Case:
        rows = [i for i, ci in enumerate(cases) if ci == c]
        if not rows:
            parts[int(c)] = Tensor(0.0)
            continue
        idx = np.array(rows)
        per = dwhs_case_loss(c, omega[idx, 0], omega[idx, 1])
        parts[int(c)] = ad.mean(per)
        total = total + parts[int(c)]
    return total, parts


def _weights(omega):
    if isinstance(omega, Tensor):
        return omega.data
    return np.asarray(omega, dtype=np.float64)


def total_loss_stage1(l_mss, l_pe, omega, l_dwhs=0.0) -> Tensor:
    """Weighted task losses averaged over the batch, plus the weight-module loss.

    The weights are treated as constants here; the weight module learns only
    through ``l_dwhs``.
    """
    w = np.atleast_2d(_weights(omega))
    l_mss, l_pe = ad.as_tensor(l_mss), ad.as_tensor(l_pe)
    per = ad.mul(l_mss, w[:, 0].reshape(l_mss.shape)) + ad.mul(l_pe, w[:, 1].reshape(l_pe.shape))
    return ad.mean(per) + l_dwhs


def total_loss_stage2(l_mss, l_pe, keep_mss, keep_pe, omega, l_dwhs=0.0) -> Tensor | None:
    """Stage-II objective on frame-gated task losses.

    ``l_mss``/``l_pe`` are per-sample losses already restricted to kept frames;
    ``keep_*`` is 1 where a sample retains at least one frame for that task.
    Samples with nothing kept for either task are left out of the mean;
    returns ``None`` when that leaves no sample and no weight-module loss.
    """
    w = np.atleast_2d(_weights(omega))
    km = np.asarray(keep_mss, dtype=np.float64).reshape(-1)
    kp = np.asarray(keep_pe, dtype=np.float64).reshape(-1)
    active = (km + kp) > 0
    l_mss, l_pe = ad.as_tensor(l_mss), ad.as_tensor(l_pe)
    if not np.any(active):
        if isinstance(l_dwhs, Tensor) and l_dwhs.requires_grad:
            return l_dwhs
        return None
    per = ad.mul(l_mss, (km * w[:, 0]).reshape(l_mss.shape)) + \
        ad.mul(l_pe, (kp * w[:, 1]).reshape(l_pe.shape))
    return ad.tsum(ad.mul(per, active.astype(float))) * (1.0 / active.sum()) + l_dwhs


# --- fixed-rule weighting ------------------------------------------------------

@dataclass(frozen=True)
class NaiveDwhsConfig:
    upper_bound: float = 5.0
    omega_noise: float = 0.2

    def __post_init__(self):
        if not 1.0 <= self.upper_bound <= 10.0:
            raise ValueError("upper_bound must lie in [1, 10]")
        if not 0.0 <= self.omega_noise < 1.0:
            raise ValueError("omega_noise must lie in [0, 1)")


def pitch_agreement(labels, activations) -> float:
    """Mean over voiced label frames of ``my*ma + (1-my)*(1-ma)`` (row maxima)."""
    y = np.atleast_2d(np.asarray(getattr(labels, "values", labels), dtype=np.float64))
    a = np.atleast_2d(np.asarray(getattr(activations, "values", activations), dtype=np.float64))
    my, ma = y.max(axis=-1), a.max(axis=-1)
    per = my * ma + (1.0 - my) * (1.0 - ma)
    voiced = my > 0
    return float(per[voiced].mean()) if np.any(voiced) else float(per.mean())


def naive_dwhs_weights(case: Case, labels, activations,
                       cfg: NaiveDwhsConfig = NaiveDwhsConfig()) -> tuple[float, float]:
    """Fixed-rule weights: noisy labels get ``omega_noise``; hard samples get
    ``1 / agreement`` clamped to ``[1, upper_bound]``."""
    case = Case(case)
    if case == Case.CASE1:
        return 1.0, 1.0
    if case == Case.CASE2:
        return 1.0, cfg.omega_noise
    yt = pitch_agreement(labels, activations)
    boost = cfg.upper_bound if yt <= 0 else float(np.clip(1.0 / yt, 1.0, cfg.upper_bound))
    return (boost, 1.0) if case == Case.CASE3 else (1.0, boost)


# --- reporting -----------------------------------------------------------------

@dataclass
class LossReport:
    l_mss: float
    l_pe: float
    l_dwhs_parts: dict
    l_dwhs: float
    l_total: float
    omega_mss: list = field(default_factory=list)
    omega_pe: list = field(default_factory=list)
    confi_mss: list = field(default_factory=list)
    confi_pe: list = field(default_factory=list)
    cases: list = field(default_factory=list)

    @property
    def case_histogram(self) -> dict:
        hist = {str(int(c)): 0 for c in Case}
        hist["excluded"] = 0
        for c in self.cases:
            hist["excluded" if c is None else str(int(c))] += 1
        return hist

    def to_record(self) -> dict:
        rec = {"l_mss": self.l_mss, "l_pe": self.l_pe, "l_dwhs": self.l_dwhs,
               "l_total": self.l_total,
               "omega_mss": self.omega_mss, "omega_pe": self.omega_pe,
               "confi_mss": self.confi_mss, "confi_pe": self.confi_pe,
               "cases": [None if c is None else int(c) for c in self.cases],
               "case_hist": self.case_histogram}
        for k in range(1, 5):
            rec[f"l_dwhs_{k}"] = self.l_dwhs_parts.get(k, 0.0)
        return rec
