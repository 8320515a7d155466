"""Separation (SDR, NSDR, GNSDR) and pitch (RPA, RCA) metrics.

SDR is the plain energy ratio ``10 log10(|s|^2 / |s_hat - s|^2)``; a perfect
estimate scores ``inf``, which aggregate functions drop with a warning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .audio import Waveform
from .pitch import PitchTrack

CENT_TOLERANCE = 50.0
CENTS_REF_HZ = 10.0


class UndefinedScoreError(ValueError):
    """The metric has no defined value for this input."""


@dataclass(frozen=True)
class SeparationScore:
    sdr: float
    nsdr: float
    length: int

    @property
    def degenerate(self) -> bool:
        return not (math.isfinite(self.sdr) and math.isfinite(self.nsdr))


@dataclass(frozen=True)
class PitchScore:
    rpa: float
    rca: float
    n_voiced_ref: int


def _samples(w):
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def sdr(target, estimate) -> float:
    s, s_hat = _samples(target), _samples(estimate)
    if s.shape != s_hat.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {s_hat.shape}")
    num = float(np.dot(s, s))
    if num == 0.0:
        raise UndefinedScoreError("SDR is undefined for a zero-energy target")
    err = s_hat - s
    den = float(np.dot(err, err))
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(num / den)


def nsdr(target, estimate, mixture) -> float:
    """SDR improvement of the estimate over the unprocessed mixture."""
    return sdr(target, estimate) - sdr(target, mixture)


def separation_score(target, estimate, mixture) -> SeparationScore:
    return SeparationScore(sdr(target, estimate), nsdr(target, estimate, mixture),
                           len(_samples(target)))


def finite_mean(values, weights=None, what="SDR") -> float:
    values = np.asarray(values, dtype=np.float64)
    weights = np.ones_like(values) if weights is None else np.asarray(weights, dtype=np.float64)
    ok = np.isfinite(values)
    if not np.all(ok):
        warnings.warn(f"{np.count_nonzero(~ok)} infinite {what} value(s) excluded from mean",
                      RuntimeWarning, stacklevel=2)
    if not np.any(ok):
        return math.inf if np.all(values == math.inf) else math.nan
    return float(np.sum(values[ok] * weights[ok]) / np.sum(weights[ok]))


def gnsdr(items) -> float:
    """Length-weighted mean NSDR over ``(nsdr, length)`` pairs."""
    items = list(items)
    if not items:
        raise ValueError("GNSDR needs at least one item")
    vals = np.array([float(v) for v, _ in items])
    lengths = np.array([float(n) for _, n in items])
    if np.any(lengths <= 0):
        raise ValueError("item lengths must be positive")
    return finite_mean(vals, lengths, what="NSDR")


def _to_cents(f):
    return 1200.0 * np.log2(f / CENTS_REF_HZ)


def fold_octave(diff_cents):
    """Map cent differences into (-600, 600]."""
    return 600.0 - np.mod(600.0 - np.asarray(diff_cents, dtype=np.float64), 1200.0)


def rpa_rca(ref: PitchTrack, est: PitchTrack, tolerance: float = CENT_TOLERANCE) -> PitchScore:
    """Raw pitch and raw chroma accuracy over voiced reference frames.

    An unvoiced estimate on a voiced reference frame is a miss; estimates on
    unvoiced reference frames are ignored.
    """
    if len(ref) != len(est) or not np.allclose(ref.times, est.times, atol=1e-6):
        raise ValueError("reference and estimate must share frame times")
    voiced = ref.f0 > 0
    n_ref = int(np.count_nonzero(voiced))
    if n_ref == 0:
        raise UndefinedScoreError("reference has no voiced frames")
    hit = voiced & (est.f0 > 0)
    diff = np.zeros(len(ref))
    diff[hit] = _to_cents(est.f0[hit]) - _to_cents(ref.f0[hit])
    pitch_ok = hit & (np.abs(diff) <= tolerance)
    chroma_ok = hit & (np.abs(fold_octave(diff)) <= tolerance)
    return PitchScore(np.count_nonzero(pitch_ok) / n_ref,
                      np.count_nonzero(chroma_ok) / n_ref, n_ref)


def aggregate_pitch(scores) -> dict:
    """Frame-weighted (headline) and item-weighted RPA/RCA."""
    scores = list(scores)
    if not scores:
        raise ValueError("no pitch scores to aggregate")
    n = np.array([s.n_voiced_ref for s in scores], dtype=np.float64)
    rpa = np.array([s.rpa for s in scores])
    rca = np.array([s.rca for s in scores])
    return {
        "rpa": float(np.sum(rpa * n) / n.sum()),
        "rca": float(np.sum(rca * n) / n.sum()),
        "rpa_item_mean": float(rpa.mean()),
        "rca_item_mean": float(rca.mean()),
    }
