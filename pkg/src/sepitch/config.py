"""Run configuration: one flat ``key=value`` namespace for every tunable."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .audio import StftConfig
from .autodiff import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, config_hash
from .losses import NaiveDwhsConfig
from .models import ModelConfig
from .pitch import PitchGrid
from .synth import ACCOMPANIMENT_KINDS, SynthSpec

WEIGHTINGS = ("dwhs", "naive", "naive_dwhs")


class ConfigValidationError(ValueError):
    pass


def _rng(lo=None, hi=None, lo_open=False):
    return {"lo": lo, "hi": hi, "lo_open": lo_open}


@dataclass
class RunConfig:
    seed: int = 0
    # corpus
    n_fully: int = dataclasses.field(default=200, metadata=_rng(1))
    n_mss_only: int = dataclasses.field(default=100, metadata=_rng(0))
    n_pe_only: int = dataclasses.field(default=100, metadata=_rng(0))
    n_val: int = dataclasses.field(default=20, metadata=_rng(0))
    segment_seconds: float = dataclasses.field(default=2.56, metadata=_rng(0.1, 60))
    f0_min: float = dataclasses.field(default=110.0, metadata=_rng(0, lo_open=True))
    f0_max: float = dataclasses.field(default=660.0, metadata=_rng(0, lo_open=True))
    n_harmonics: int = dataclasses.field(default=10, metadata=_rng(1, 40))
    vibrato_depth: float = dataclasses.field(default=30.0, metadata=_rng(0, 200))
    vibrato_rate: float = dataclasses.field(default=5.5, metadata=_rng(0, 20))
    accompaniment: str = "chord-pad"
    snr_db_min: float = -3.0
    snr_db_max: float = 3.0
    # signal processing
    window_size: int = dataclasses.field(default=2048, metadata=_rng(16))
    hop: int = dataclasses.field(default=320, metadata=_rng(1))
    # pitch grid
    n_bins: int = dataclasses.field(default=360, metadata=_rng(2))
    f_min: float = dataclasses.field(default=32.7032, metadata=_rng(0, lo_open=True))
    cents_per_bin: float = dataclasses.field(default=20.0, metadata=_rng(0, lo_open=True))
    # networks
    mss_hidden: int = dataclasses.field(default=64, metadata=_rng(1))
    pe_freq_bins: int = dataclasses.field(default=256, metadata=_rng(1))
    pe_context: int = dataclasses.field(default=2, metadata=_rng(0, 10))
    pe_hidden: int = dataclasses.field(default=128, metadata=_rng(1))
    dwm_c1: int = dataclasses.field(default=8, metadata=_rng(1))
    dwm_c2: int = dataclasses.field(default=16, metadata=_rng(1))
    dwm_stride: int = dataclasses.field(default=2, metadata=_rng(1, 4))
    dwm_hidden: int = dataclasses.field(default=64, metadata=_rng(1))
    w_max: float = dataclasses.field(default=2.0, metadata=_rng(1, 100, lo_open=True))
    # optimisation
    batch_size: int = dataclasses.field(default=16, metadata=_rng(1))
    lr: float = dataclasses.field(default=1e-3, metadata=_rng(0, 1, lo_open=True))
    lr_decay: float = dataclasses.field(default=0.98, metadata=_rng(0, 1, lo_open=True))
    lr_decay_epochs: int = dataclasses.field(default=10, metadata=_rng(1))
    epochs_stage1: int = dataclasses.field(default=20, metadata=_rng(1))
    epochs_stage2: int = dataclasses.field(default=20, metadata=_rng(1))
    patience: int = dataclasses.field(default=15, metadata=_rng(0))
    # joint learning
    weighting: str = "dwhs"
    tau_c: float = dataclasses.field(default=0.5, metadata=_rng(0, 1))
    th: float = dataclasses.field(default=0.7, metadata=_rng(0.5, 1))
    detach_cascade: bool = False
    warm_start_dwm: bool = False
    upper_bound: float = dataclasses.field(default=5.0, metadata=_rng(1, 10))
    omega_noise: float = dataclasses.field(default=0.2, metadata=_rng(0, 1))

    def validate(self) -> "RunConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            m = f.metadata
            if not m:
                continue
            lo, hi = m.get("lo"), m.get("hi")
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigValidationError(f"{f.name}={v} must be finite")
            if lo is not None and (v < lo or (m.get("lo_open") and v == lo)):
                raise ConfigValidationError(f"{f.name}={v} below allowed minimum {lo}")
            if hi is not None and v > hi:
                raise ConfigValidationError(f"{f.name}={v} above allowed maximum {hi}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigValidationError(f"weighting must be one of {WEIGHTINGS}")
        if self.omega_noise >= 1.0:
            raise ConfigValidationError("omega_noise must be below 1")
        if self.f0_min >= self.f0_max:
            raise ConfigValidationError("f0_min must be below f0_max")
        if self.snr_db_min > self.snr_db_max:
            raise ConfigValidationError("snr_db_min must not exceed snr_db_max")
        for k in self.accompaniment_kinds:
            if k not in ACCOMPANIMENT_KINDS:
                raise ConfigValidationError(f"unknown accompaniment {k!r}")
        try:
            self.stft_config()
            self.synth_spec().check_grid(self.grid())
            self.model_config()
        except ValueError as exc:
            raise ConfigValidationError(str(exc)) from exc
        if self.pe_freq_bins > self.window_size // 2 + 1:
            raise ConfigValidationError("pe_freq_bins exceeds the number of STFT bins")
        return self

    @property
    def accompaniment_kinds(self):
        return tuple(k for k in self.accompaniment.split(",") if k and k != "none")

    def n_samples(self) -> int:
        return int(round(self.segment_seconds * 16000))

    def stft_config(self) -> StftConfig:
        return StftConfig(self.window_size, self.hop)

    def grid(self) -> PitchGrid:
        return PitchGrid(self.n_bins, self.f_min, self.cents_per_bin)

    def n_frames(self) -> int:
        return self.stft_config().n_frames(self.n_samples())

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(n_fully=self.n_fully, n_mss_only=self.n_mss_only,
                         n_pe_only=self.n_pe_only, n_val=self.n_val,
                         segment_seconds=self.segment_seconds, f0_min=self.f0_min,
                         f0_max=self.f0_max, n_harmonics=self.n_harmonics,
                         vibrato_depth=self.vibrato_depth, vibrato_rate=self.vibrato_rate,
                         accompaniment=self.accompaniment_kinds,
                         snr_db=(self.snr_db_min, self.snr_db_max), seed=self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_freq=self.window_size // 2 + 1, n_frames=self.n_frames(),
                           n_pitch=self.n_bins, mss_hidden=self.mss_hidden,
                           pe_freq_bins=self.pe_freq_bins, pe_context=self.pe_context,
                           pe_hidden=self.pe_hidden, dwm_channels=(self.dwm_c1, self.dwm_c2),
                           dwm_stride=self.dwm_stride, dwm_hidden=self.dwm_hidden,
                           w_max=self.w_max)

    def naive_config(self) -> NaiveDwhsConfig:
        return NaiveDwhsConfig(self.upper_bound, self.omega_noise)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.as_dict())

    def manifest_text(self) -> str:
        lines = ["# sepitch run manifest", f"code_version={__version__}",
                 f"config_hash={self.hash()}",
                 f"adam_beta1={ADAM_BETA1!r}", f"adam_beta2={ADAM_BETA2!r}",
                 f"adam_eps={ADAM_EPS!r}", "bce_eps=1e-07"]
        lines += [f"{k}={_fmt(v)}" for k, v in self.as_dict().items()]
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(name, typ, text):
    text = text.strip()
    try:
        if typ in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigValidationError(f"{name}: cannot parse {text!r} as {typ}") from None
    return text


_DERIVED_KEYS = {"code_version", "config_hash", "adam_beta1", "adam_beta2", "adam_eps",
                 "bce_eps"}


def parse_overrides(pairs, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigValidationError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key in _DERIVED_KEYS:
            continue
        if key not in types:
            raise ConfigValidationError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, types[key], value)
    return dataclasses.replace(cfg, **updates)


def load_config(path, overrides=()) -> RunConfig:
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError(f"{path}:{n}: expected key=value")
        pairs.append(line)
    return parse_overrides(list(pairs) + list(overrides)).validate()
