"""Two-stage training: supervised initialisation, pseudo-labelling, retraining.

Stage I trains the cascade (and the weight module) on fully-labeled items.
The trained cascade then fills in the missing modality of single-labeled
items, with a per-frame confidence.  Stage II trains a freshly initialised
cascade on the union, keeping only frames whose confidence reaches ``th``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .audio import StftConfig, Waveform, apply_mask_resynth, stft_array
from .config import RunConfig
from .losses import (Case, LossReport, NoVoicedFramesError, classify_case, dwhs_loss,
                     loss_mss, loss_pe, naive_dwhs_weights, total_loss_stage1,
                     total_loss_stage2)
from .metrics import aggregate_pitch, finite_mean, gnsdr, rpa_rca, sdr
from .models import JointModel
from .pitch import FRAME_SECONDS, VOICING_THRESHOLD, PitchTrack, decode_activation, track_to_matrix
from .synth import Manifest, corpus_plan, item_rng, label_kind_of, load_entry, synth_item

log = logging.getLogger(__name__)

# Every stage draws its initial weights and batch order from the same
# seed-derived stream, so runs that differ only in objective or data are paired.
_STAGE_STREAM = {"stage1": 1, "stage2": 1, "naive": 1}


class ContractError(ValueError):
    pass


# --- confidences and gates ---------------------------------------------------

def confidence(activation):
    """Row-wise confidence: the peak activation if voiced, else one minus it."""
    a = np.asarray(activation, dtype=np.float64)
    peak = a.max(axis=-1)
    return np.where(peak >= VOICING_THRESHOLD, peak, 1.0 - peak)


def gate(confi, th: float):
    """1 where ``confi >= th``, else 0."""
    if not 0.5 <= th <= 1.0:
        raise ValueError(f"threshold {th} outside [0.5, 1]")
    return (np.asarray(confi, dtype=np.float64) >= th).astype(np.float64)


# --- dataset ----------------------------------------------------------------------

@dataclass
class DatasetItem:
    id: str
    mixture: Waveform
    target: Waveform | None
    pitch: PitchTrack | None
    label_kind: str
    confi_mss: np.ndarray | None = None
    confi_pe: np.ndarray | None = None
    pseudo: str | None = None       # "mss" or "pe": which label is model-made
    _stft_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.label_kind not in ("fully", "mss-only", "pe-only"):
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        n_frames = 1 + len(self.mixture) // int(round(FRAME_SECONDS * self.mixture.sample_rate))
        ones = np.ones(n_frames)
        if self.label_kind == "fully":
            self.confi_mss, self.confi_pe = ones, ones.copy()
        elif self.label_kind == "mss-only" and self.confi_mss is None:
            self.confi_mss = ones
        elif self.label_kind == "pe-only" and self.confi_pe is None:
            self.confi_pe = ones

    @property
    def complete(self) -> bool:
        return self.target is not None and self.pitch is not None

    def spectra(self, stft_cfg: StftConfig):
        """``(mixture STFT, |target STFT|)``, computed once per configuration."""
        key = (stft_cfg.window_size, stft_cfg.hop, stft_cfg.window, stft_cfg.center_pad)
        if key not in self._stft_cache:
            spec = stft_array(self.mixture.samples, stft_cfg)
            tgt = np.abs(stft_array(self.target.samples, stft_cfg)) \
                if self.target is not None else None
            self._stft_cache[key] = (spec, tgt)
        return self._stft_cache[key]


def _f32(w: Waveform | None) -> Waveform | None:
    # match what a float32 WAV round trip would give back
    if w is None:
        return None
    return Waveform(w.samples.astype(np.float32).astype(np.float64), w.sample_rate)


def synth_items(cfg: RunConfig) -> dict[str, list]:
    """The synthetic corpus in memory, grouped by split, labels withheld as on disk."""
    spec, grid = cfg.synth_spec(), cfg.grid()
    out = {"train": [], "test": [], "val": []}
    for kind, i, split, item_id in corpus_plan(spec):
        mix, target, track = synth_item(spec, item_rng(spec.seed, kind, i), grid)
        lk = label_kind_of(kind)
        out[split].append(DatasetItem(item_id, _f32(mix),
                                      _f32(target) if lk != "pe-only" else None,
                                      track if lk != "mss-only" else None, lk))
    return out


def manifest_items(manifest: Manifest, split: str | None = None) -> list:
    items = []
    for e in manifest.select(split=split):
        mix, target, track = load_entry(manifest, e)
        items.append(DatasetItem(e.id, mix, target, track, e.label_kind))
    return items


def generate_pseudo(model: JointModel, item: DatasetItem, stft_cfg: StftConfig) -> DatasetItem:
    """Fill the missing label of a single-labeled item from a trained cascade."""
    if not getattr(model, "trained", False):
        raise ContractError("pseudo-labelling needs a trained stage-I model")
    if item.label_kind == "fully":
        raise ContractError(f"item {item.id} is fully labeled; nothing to pseudo-label")
    grid_start = 0.0
    with ad.no_grad():
        if item.label_kind == "mss-only":
            mag = np.abs(stft_array(item.target.samples, stft_cfg))
            act = model.pe.forward(mag).data
            track = decode_activation(act, _grid(model), grid_start)
            return replace(item, pitch=track, confi_pe=confidence(act), pseudo="pe",
                           _stft_cache={})
        mag = np.abs(stft_array(item.mixture.samples, stft_cfg))
        mask, pred = model.mss.forward(mag)
        act = model.pe.forward(pred.data).data
        source = apply_mask_resynth(item.mixture, np.clip(mask.data, 0.0, 1.0), stft_cfg)
        return replace(item, target=source, confi_mss=confidence(act), pseudo="mss",
                       _stft_cache={})


def _grid(model):
    from .pitch import PitchGrid
    return getattr(model, "grid", None) or PitchGrid(n_bins=model.cfg.n_pitch)


# --- batching ---------------------------------------------------------------------

@dataclass
class Batch:
    items: list
    mix: np.ndarray
    spec: np.ndarray
    mix_mag: np.ndarray
    target: np.ndarray
    target_mag: np.ndarray
    labels: np.ndarray
    gt_tracks: list
    gate_mss: np.ndarray      # (B, T)
    gate_pe: np.ndarray       # (B, T)


def make_batch(items, cfg: RunConfig, th: float | None = None) -> Batch:
    stft_cfg, grid = cfg.stft_config(), cfg.grid()
    mix = np.stack([it.mixture.samples for it in items])
    target = np.stack([it.target.samples for it in items])
    spectra = [it.spectra(stft_cfg) for it in items]
    spec = np.stack([sp for sp, _ in spectra])
    T = spec.shape[1]
    labels = np.stack([track_to_matrix(it.pitch, grid, T).values for it in items])
    if th is None:
        g_mss = np.ones((len(items), T))
        g_pe = np.ones((len(items), T))
    else:
        g_mss = np.stack([gate(it.confi_mss[:T], th) for it in items])
        g_pe = np.stack([gate(it.confi_pe[:T], th) for it in items])
    return Batch(items, mix, spec, np.abs(spec), target,
                 np.stack([tm for _, tm in spectra]), labels,
                 [PitchTrack.from_f0(it.pitch.f0[:T]) for it in items], g_mss, g_pe)


def frame_span_gate(frame_gate: np.ndarray, n_samples: int, hop: int) -> np.ndarray:
    """Expand a per-frame gate to samples; sample ``n`` belongs to frame ``round(n / hop)``."""
    T = frame_gate.shape[-1]
    idx = np.minimum(np.floor(np.arange(n_samples) / hop + 0.5).astype(int), T - 1)
    return frame_gate[..., idx]


# --- training -------------------------------------------------------------------

def init_model(cfg: RunConfig, stream: str) -> JointModel:
    rng = np.random.default_rng([cfg.seed, _STAGE_STREAM[stream]])
    model = JointModel(cfg.model_config(), rng, with_dwm=cfg.weighting == "dwhs")
    model.grid = cfg.grid()
    model.trained = False
    return model


def _case_list(batch: Batch, pred_act, tgt_act, cfg: RunConfig, grid):
    cases = []
    for i in range(len(batch.items)):
        pred = decode_activation(pred_act[i], grid)
        tgt = decode_activation(tgt_act[i], grid)
        keep = batch.gate_pe[i] > 0
        try:
            cases.append(classify_case(pred, tgt, batch.gt_tracks[i], cfg.tau_c, keep))
        except NoVoicedFramesError:
            cases.append(None)
    return cases


def train_step(model: JointModel, batch: Batch, opt: ad.Adam, cfg: RunConfig,
               stage2: bool = False) -> LossReport:
    stft_cfg, grid = cfg.stft_config(), cfg.grid()
    model.params.zero_grad()
    mask, pred_mag = model.mss.forward(batch.mix_mag)
    s_hat = ad.masked_istft(mask, batch.spec, stft_cfg, batch.mix.shape[1])
    sample_gate = frame_span_gate(batch.gate_mss, batch.mix.shape[1], stft_cfg.hop) \
        if stage2 else None
    l_mss = loss_mss(batch.target, s_hat, sample_gate)
    pe_in = pred_mag.detach() if cfg.detach_cascade else pred_mag
    act = model.pe.forward(pe_in)
    l_pe = loss_pe(batch.labels, act, batch.gate_pe if stage2 else None)

    B = len(batch.items)
    cases = [None] * B
    l_dwhs, parts = ad.Tensor(0.0), {}
    if cfg.weighting == "naive":
        omega = np.ones((B, 2))
    else:
        with ad.no_grad():
            tgt_act = model.pe.forward(batch.target_mag).data
        cases = _case_list(batch, act.data, tgt_act, cfg, grid)
        if cfg.weighting == "dwhs":
            omega_t = model.dwm.forward(act.data, batch.labels, tgt_act)
            l_dwhs, parts = dwhs_loss(cases, omega_t)
            omega = omega_t.data
        else:
            omega = np.array([naive_dwhs_weights(c, batch.labels[i], act.data[i],
                                                 cfg.naive_config()) if c else (1.0, 1.0)
                              for i, c in enumerate(cases)])
    if stage2:
        keep_mss = (batch.gate_mss.sum(axis=1) > 0).astype(float)
        keep_pe = (batch.gate_pe.sum(axis=1) > 0).astype(float)
        total = total_loss_stage2(l_mss, l_pe, keep_mss, keep_pe, omega, l_dwhs)
        if total is None:
            log.info("batch skipped: every frame gated out for both tasks")
    else:
        total = total_loss_stage1(l_mss, l_pe, omega, l_dwhs)
    if total is not None:
        total.backward()
        opt.step()
    return LossReport(
        l_mss=float(np.mean(l_mss.data)), l_pe=float(np.mean(l_pe.data)),
        l_dwhs_parts={k: float(v.data) for k, v in parts.items()},
        l_dwhs=float(l_dwhs.data), l_total=float(total.data) if total is not None else 0.0,
        omega_mss=[float(v) for v in omega[:, 0]], omega_pe=[float(v) for v in omega[:, 1]],
        confi_mss=[float(np.mean(it.confi_mss)) for it in batch.items],
        confi_pe=[float(np.mean(it.confi_pe)) for it in batch.items],
        cases=cases)


@dataclass
class TrainResult:
    model: JointModel
    optimizer: ad.Adam
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def train(items, cfg: RunConfig, stream: str = "stage1", stage2: bool = False,
          val_items=None, epochs: int | None = None, step_log=None, model=None) -> TrainResult:
    """Train a fresh cascade on ``items``.

    ``step_log`` (a writable text file) receives one JSON record per step.
    Early stopping watches validation RPA when ``val_items`` is given.
    """
    items = list(items)
    if not items:
        raise ContractError("training set is empty")
    epochs = epochs or (cfg.epochs_stage2 if stage2 else cfg.epochs_stage1)
    model = model or init_model(cfg, stream)
    opt = ad.Adam(model.params, cfg.lr, cfg.lr_decay, cfg.lr_decay_epochs)
    order_rng = np.random.default_rng([cfg.seed, _STAGE_STREAM[stream], 7])
    th = cfg.th if stage2 else None
    result = TrainResult(model, opt)
    best, stale, step = -np.inf, 0, 0
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        order = order_rng.permutation(len(items))
        reports = []
        for start in range(0, len(items), cfg.batch_size):
            batch = make_batch([items[i] for i in order[start:start + cfg.batch_size]], cfg, th)
            rep = train_step(model, batch, opt, cfg, stage2)
            reports.append(rep)
            if step_log is not None:
                rec = {"step": step, "epoch": epoch, "lr": opt.lr, **rep.to_record()}
                step_log.write(json.dumps(rec) + "\n")
            step += 1
        row = {"epoch": epoch, "lr": opt.lr,
               "l_mss": float(np.mean([r.l_mss for r in reports])),
               "l_pe": float(np.mean([r.l_pe for r in reports])),
               "l_dwhs": float(np.mean([r.l_dwhs for r in reports])),
               "l_total": float(np.mean([r.l_total for r in reports]))}
        if val_items:
            summary = evaluate(model, val_items, cfg)["summary"]
            row.update(val_rpa=summary["rpa"], val_sdr=summary["sdr"])
            if summary["rpa"] > best + 1e-12:
                best, stale = summary["rpa"], 0
            else:
                stale += 1
        result.epochs.append(row)
        log.info("%s epoch %d: %s", stream, epoch, row)
        if val_items and cfg.patience and stale >= cfg.patience:
            log.info("early stop after %d epochs without validation RPA gain", stale)
            break
    model.trained = True
    return result


# --- evaluation --------------------------------------------------------------------

def predict(model: JointModel, mixtures, cfg: RunConfig, batch_size: int = 16):
    """Return ``(source_waveforms, pitch_tracks)`` for a list of mixtures."""
    stft_cfg, grid = cfg.stft_config(), cfg.grid()
    sources, tracks = [], []
    with ad.no_grad():
        for start in range(0, len(mixtures), batch_size):
            chunk = mixtures[start:start + batch_size]
            mix = np.stack([m.samples for m in chunk])
            spec = stft_array(mix, stft_cfg)
            mask, pred = model.mss.forward(np.abs(spec))
            est = ad.masked_istft(mask, spec, stft_cfg, mix.shape[1]).data
            act = model.pe.forward(pred.data).data
            for i in range(len(chunk)):
                sources.append(Waveform(est[i], chunk[i].sample_rate))
                tracks.append(decode_activation(act[i], grid))
    return sources, tracks


def score_items(items, sources, tracks) -> dict:
    rows = []
    for it, src, trk in zip(items, sources, tracks):
        s = sdr(it.target, src)
        ref_sdr = sdr(it.target, it.mixture)
        n = min(len(trk), len(it.pitch))
        ref = PitchTrack.from_f0(it.pitch.f0[:n])
        est = PitchTrack.from_f0(trk.f0[:n])
        ps = rpa_rca(ref, est)
        rows.append({"id": it.id, "sdr": s, "nsdr": s - ref_sdr, "length": len(it.target),
                     "rpa": ps.rpa, "rca": ps.rca, "n_voiced": ps.n_voiced_ref})
    return {"items": rows, "summary": summarize(rows)}


def summarize(rows) -> dict:
    from .metrics import PitchScore
    sdrs = [r["sdr"] for r in rows]
    pitch = aggregate_pitch(PitchScore(r["rpa"], r["rca"], r["n_voiced"]) for r in rows)
    finite = [v for v in sdrs if np.isfinite(v)]
    return {"n_items": len(rows),
            "sdr": finite_mean(sdrs) if rows else float("nan"),
            "sdr_median": float(np.median(finite)) if finite else float("inf"),
            "gnsdr": gnsdr([(r["nsdr"], r["length"]) for r in rows]),
            **pitch}


def evaluate(model: JointModel, items, cfg: RunConfig) -> dict:
    items = [it for it in items if it.complete]
    sources, tracks = predict(model, [it.mixture for it in items], cfg, cfg.batch_size)
    return score_items(items, sources, tracks)


# --- whole pipeline in memory ---------------------------------------------------

def pseudo_label(model: JointModel, items, cfg: RunConfig) -> list:
    return [generate_pseudo(model, it, cfg.stft_config()) for it in items]


def run_two_stage(train_items, cfg: RunConfig, val_items=None, test_items=None,
                  step_logs=(None, None)) -> dict:
    """Stage I on fully-labeled items, pseudo labels, Stage II from scratch."""
    fully = [it for it in train_items if it.label_kind == "fully"]
    single = [it for it in train_items if it.label_kind != "fully"]
    if not fully:
        raise ContractError("stage I needs at least one fully-labeled item")
    s1 = train(fully, cfg, "stage1", False, val_items, step_log=step_logs[0])
    pseudo = pseudo_label(s1.model, single, cfg)
    kept = [float(np.mean(gate(it.confi_pe if it.pseudo == "pe" else it.confi_mss, cfg.th)))
            for it in pseudo]
    if pseudo and max(kept) == 0.0:
        log.warning("every pseudo-labelled frame is gated out at th=%s; stage II "
                    "sees only true labels", cfg.th)
    s2_model = init_model(cfg, "stage2")
    if cfg.warm_start_dwm and cfg.weighting == "dwhs":
        for k, t in s1.model.params.items():
            if k.startswith("dwm."):
                s2_model.params[k].data[...] = t.data
    s2 = train(fully + pseudo, cfg, "stage2", True, val_items, step_log=step_logs[1],
               model=s2_model)
    out = {"stage1": s1, "stage2": s2, "pseudo": pseudo, "pseudo_kept_fraction": kept}
    if test_items is not None:
        out["eval_stage1"] = evaluate(s1.model, test_items, cfg)
        out["eval_stage2"] = evaluate(s2.model, test_items, cfg)
    return out
