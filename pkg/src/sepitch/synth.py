"""Synthetic corpus: harmonic "vocal" stems over overlapping accompaniment.

Each item is generated from its own seeded stream, so items can be produced
independently and a corpus is byte-reproducible from ``(spec, seed)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Waveform, read_wav, write_wav
from .pitch import FRAME_SECONDS, PitchGrid, PitchTrack, read_track, write_track

ACCOMPANIMENT_KINDS = ("chord-pad", "filtered-noise", "drum-clicks")
LABEL_KINDS = ("fully", "mss-only", "pe-only")
_KIND_CODE = {"fully": 0, "mss-only": 1, "pe-only": 2, "val": 3}


@dataclass(frozen=True)
class SynthSpec:
    n_fully: int = 200
    n_mss_only: int = 100
    n_pe_only: int = 100
    n_val: int = 20
    segment_seconds: float = 2.56
    f0_min: float = 110.0
    f0_max: float = 660.0
    n_harmonics: int = 10
    rolloff: float = 1.0
    vibrato_depth: float = 30.0      # cents
    vibrato_rate: float = 5.5        # Hz
    accompaniment: tuple = ("chord-pad",)
    snr_db: tuple = (-3.0, 3.0)
    note_seconds: tuple = (0.15, 0.6)
    gap_seconds: tuple = (0.1, 0.5)
    gap_prob: float = 0.35
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "accompaniment", tuple(self.accompaniment))
        object.__setattr__(self, "snr_db", tuple(float(v) for v in self.snr_db))
        for k in self.accompaniment:
            if k not in ACCOMPANIMENT_KINDS:
                raise ValueError(f"unknown accompaniment kind {k!r}")
        if not 0 < self.f0_min < self.f0_max:
            raise ValueError("need 0 < f0_min < f0_max")
        if not all(math.isfinite(v) or v == math.inf for v in self.snr_db) \
                or self.snr_db[0] > self.snr_db[1]:
            raise ValueError("snr_db must be an increasing (lo, hi) pair")
        if min(self.n_fully, self.n_mss_only, self.n_pe_only, self.n_val) < 0:
            raise ValueError("item counts must be nonnegative")

    @property
    def n_samples(self) -> int:
        return int(round(self.segment_seconds * SAMPLE_RATE))

    def check_grid(self, grid: PitchGrid):
        lo = self.f0_min * 2 ** (-self.vibrato_depth / 1200)
        hi = self.f0_max * 2 ** (self.vibrato_depth / 1200)
        if not (grid.contains(lo)[0] and grid.contains(hi)[0]):
            raise ValueError(f"f0 range [{lo:.1f}, {hi:.1f}] Hz exceeds the pitch grid")

    def as_dict(self):
        d = asdict(self)
        d["accompaniment"] = list(self.accompaniment)
        d["snr_db"] = list(self.snr_db)
        d["note_seconds"] = list(self.note_seconds)
        d["gap_seconds"] = list(self.gap_seconds)
        return d


def item_rng(seed: int, kind: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _KIND_CODE[kind], index])


def _schedule(spec: SynthSpec, rng, duration):
    """List of (start, end, f0) notes; everything outside a note is unvoiced."""
    notes, t = [], 0.0
    if rng.random() < spec.gap_prob:
        t = rng.uniform(*spec.gap_seconds)
    lo, hi = math.log(spec.f0_min), math.log(spec.f0_max)
    while t < duration + FRAME_SECONDS:
        d = rng.uniform(*spec.note_seconds)
        notes.append((t, t + d, math.exp(rng.uniform(lo, hi))))
        t += d
        if rng.random() < spec.gap_prob:
            t += rng.uniform(*spec.gap_seconds)
    return notes


def _f0_at(notes, times, depth, rate, phase):
    f0 = np.zeros_like(times)
    for start, end, f in notes:
        sel = (times >= start) & (times < end)
        f0[sel] = f
    if depth:
        f0 = f0 * 2.0 ** (depth * np.sin(2 * np.pi * rate * times + phase) / 1200.0)
    return f0


def _harmonic_tone(f0, amps, rng):
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    out = np.zeros_like(f0)
    for h, a in enumerate(amps, start=1):
        ok = h * f0 < 0.45 * SAMPLE_RATE
        out += np.where(ok, a * np.sin(h * phase + rng.uniform(0, 2 * np.pi)), 0.0)
    return out


def _ramp_envelope(voiced, ramp=80):
    """0/1 voicing gate with raised-cosine ramps inside each voiced run."""
    env = voiced.astype(np.float64)
    edges = np.flatnonzero(np.diff(np.r_[0, voiced.astype(int), 0]))
    w = 0.5 - 0.5 * np.cos(np.pi * np.arange(1, ramp + 1) / (ramp + 1))
    for on, off in zip(edges[::2], edges[1::2]):
        n = min(ramp, (off - on) // 2)
        if n:
            env[on:on + n] *= w[:n]
            env[off - n:off] *= w[:n][::-1]
    return env


def _chord_pad(spec, rng, n):
    out = np.zeros(n)
    seg = int(round(1.28 * SAMPLE_RATE))
    for start in range(0, n, seg):
        stop = min(n, start + seg)
        root = math.exp(rng.uniform(math.log(90.0), math.log(330.0)))
        third = 4 if rng.random() < 0.5 else 3
        m = stop - start
        for semis in (0, third, 7):
            f = np.full(m, root * 2 ** (semis / 12))
            amps = np.arange(1, 7, dtype=float) ** -1.2
            out[start:stop] += _harmonic_tone(f, amps, rng) * _ramp_envelope(np.ones(m, bool), 400)
    return out


def _filtered_noise(spec, rng, n):
    spec_ = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec_[(freqs < 150.0) | (freqs > 3000.0)] = 0.0
    return np.fft.irfft(spec_, n)


def _drum_clicks(spec, rng, n):
    out = np.zeros(n)
    t = int(rng.uniform(0, 0.25) * SAMPLE_RATE)
    decay = np.exp(-np.arange(1600) / 240.0)
    while t < n:
        m = min(1600, n - t)
        out[t:t + m] += rng.standard_normal(m) * decay[:m]
        t += int(rng.uniform(0.25, 0.5) * SAMPLE_RATE)
    return out


_ACCOMP = {"chord-pad": _chord_pad, "filtered-noise": _filtered_noise,
           "drum-clicks": _drum_clicks}


def synth_item(spec: SynthSpec, rng: np.random.Generator, grid: PitchGrid | None = None,
               max_retries: int = 20):
    """Return ``(mixture, target, pitch_track)`` for one segment."""
    grid = grid or PitchGrid()
    n = spec.n_samples
    duration = n / SAMPLE_RATE
    n_frames = 1 + n // int(round(FRAME_SECONDS * SAMPLE_RATE))
    frame_times = np.arange(n_frames) * FRAME_SECONDS
    sample_times = np.arange(n) / SAMPLE_RATE
    for _ in range(max_retries):
        notes = _schedule(spec, rng, duration)
        vib_phase = rng.uniform(0, 2 * np.pi)
        f0_frames = _f0_at(notes, frame_times, spec.vibrato_depth, spec.vibrato_rate, vib_phase)
        voiced_f = f0_frames > 0
        if voiced_f.sum() >= 5 and np.all(grid.contains(f0_frames[voiced_f])):
            break
    else:
        raise ValueError("could not draw an in-grid pitch schedule; widen the grid "
                         "or narrow the f0 range")
    f0_samples = _f0_at(notes, sample_times, spec.vibrato_depth, spec.vibrato_rate, vib_phase)
    amps = np.arange(1, spec.n_harmonics + 1, dtype=float) ** -spec.rolloff
    amps *= rng.uniform(0.6, 1.4, size=amps.size)
    voiced_s = f0_samples > 0
    tone = _harmonic_tone(np.where(voiced_s, f0_samples, 0.0), amps, rng)
    target = tone * _ramp_envelope(voiced_s)
    target *= 0.3 / max(np.max(np.abs(target)), 1e-12)

    snr = rng.uniform(*spec.snr_db) if math.isfinite(spec.snr_db[1]) else math.inf
    if math.isinf(snr) or not spec.accompaniment:
        mix = target.copy()
    else:
        acc = np.zeros(n)
        for kind in spec.accompaniment:
            part = _ACCOMP[kind](spec, rng, n)
            acc += part / max(np.sqrt(np.mean(part ** 2)), 1e-12)
        gain = math.sqrt(np.dot(target, target) / (np.dot(acc, acc) * 10 ** (snr / 10)))
        mix = target + gain * acc
        peak = np.max(np.abs(mix))
        if peak > 0.99:
            target *= 0.99 / peak
            mix = target + gain * 0.99 / peak * acc
    return (Waveform(mix), Waveform(target), PitchTrack.from_f0(f0_frames))


# --- corpus on disk -------------------------------------------------------------

MANIFEST_HEADER = "# id\tsplit\tlabel_kind\tmix\tvocal\tf0\n"


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    label_kind: str
    mix: str
    vocal: str | None
    f0: str | None


@dataclass
class Manifest:
    root: Path
    entries: list = field(default_factory=list)

    def save(self):
        lines = [MANIFEST_HEADER]
        for e in self.entries:
            lines.append("\t".join([e.id, e.split, e.label_kind, e.mix,
                                    e.vocal or "-", e.f0 or "-"]) + "\n")
        (self.root / "manifest.txt").write_text("".join(lines))

    @classmethod
    def load(cls, root) -> "Manifest":
        root = Path(root)
        path = root / "manifest.txt"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found")
        entries, seen = [], set()
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise ValueError(f"{path}:{n}: expected 6 tab-separated columns")
            cols = [None if c == "-" else c for c in cols]
            e = ManifestEntry(*cols)
            if e.id in seen:
                raise ValueError(f"{path}:{n}: duplicate id {e.id!r}")
            seen.add(e.id)
            for p in (e.mix, e.vocal, e.f0):
                if p is not None and not (root / p).exists():
                    raise FileNotFoundError(f"{path}:{n}: referenced file {root / p} missing")
            entries.append(e)
        return cls(root, entries)

    def select(self, split=None, label_kind=None):
        return [e for e in self.entries
                if (split is None or e.split == split)
                and (label_kind is None or e.label_kind == label_kind)]


def corpus_plan(spec: SynthSpec) -> list[tuple[str, int, str, str]]:
    """``(kind, index, split, id)`` for every corpus item, in write order.

    Fully-labeled items are split train/test by ``test_fraction``; single-
    labeled items are all training data.
    """
    order = np.random.default_rng([spec.seed, 99]).permutation(spec.n_fully)
    n_test = int(round(spec.n_fully * spec.test_fraction))
    test_idx = set(order[:n_test].tolist())
    plan = [("fully", i, "test" if i in test_idx else "train", f"full{i:04d}")
            for i in range(spec.n_fully)]
    plan += [("mss-only", i, "train", f"mss{i:04d}") for i in range(spec.n_mss_only)]
    plan += [("pe-only", i, "train", f"pe{i:04d}") for i in range(spec.n_pe_only)]
    plan += [("val", i, "val", f"val{i:04d}") for i in range(spec.n_val)]
    return plan


def label_kind_of(kind: str) -> str:
    return "fully" if kind == "val" else kind


def make_corpus(spec: SynthSpec, out_dir, grid: PitchGrid | None = None) -> Manifest:
    """Write WAVs, pitch files and ``manifest.txt`` under ``out_dir``.

    Single-labeled items omit the withheld label file.
    """
    grid = grid or PitchGrid()
    spec.check_grid(grid)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(root)
    for kind, i, split, item_id in corpus_plan(spec):
        mix, target, track = synth_item(spec, item_rng(spec.seed, kind, i), grid)
        d = root / split
        d.mkdir(exist_ok=True)
        label_kind = label_kind_of(kind)
        rel = lambda suffix: f"{split}/{item_id}.{suffix}"
        try:
            write_wav(root / rel("mix.wav"), mix)
            vocal = f0 = None
            if label_kind in ("fully", "mss-only"):
                vocal = rel("vocal.wav")
                write_wav(root / vocal, target)
            if label_kind in ("fully", "pe-only"):
                f0 = rel("f0.txt")
                write_track(root / f0, track)
        except OSError as exc:
            raise OSError(f"failed writing item {item_id} under {d}: {exc}") from exc
        manifest.entries.append(ManifestEntry(item_id, split, label_kind, rel("mix.wav"),
                                              vocal, f0))
    manifest.save()
    return manifest


def load_entry(manifest: Manifest, e: ManifestEntry):
    root = manifest.root
    mix = read_wav(root / e.mix)
    target = read_wav(root / e.vocal) if e.vocal else None
    track = read_track(root / e.f0) if e.f0 else None
    return mix, target, track
