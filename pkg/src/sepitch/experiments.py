"""Paired comparisons between training schemes on the synthetic corpus."""

from __future__ import annotations

import logging
import time

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .losses import Case, classify_case, dwhs_loss
from .models import DynamicWeightModule
from .pitch import PitchGrid, decode_activation
from .semisup import evaluate, gate, pseudo_label, run_two_stage, synth_items, train

log = logging.getLogger(__name__)


def naive_vs_majl(cfg: RunConfig, items: dict | None = None) -> dict:
    """Train the plain joint baseline and the full method on one seed.

    The baseline trains on fully-labeled items with unit weights; the full
    method runs both stages with the weight module.  Both are scored on the
    test split.
    """
    t0 = time.perf_counter()
    items = items or synth_items(cfg)
    fully = [it for it in items["train"] if it.label_kind == "fully"]
    t_data = time.perf_counter() - t0

    naive_cfg = cfg.replace(weighting="naive")
    naive = train(fully, naive_cfg, "naive", val_items=items["val"])
    naive_eval = evaluate(naive.model, items["test"], naive_cfg)["summary"]
    t_naive = time.perf_counter() - t0 - t_data

    majl_cfg = cfg.replace(weighting="dwhs")
    out = run_two_stage(items["train"], majl_cfg, items["val"], items["test"])
    t_total = time.perf_counter() - t0
    log.info("seed %d: naive rpa %.3f sdr %.2f | majl rpa %.3f sdr %.2f (%.0f s)", cfg.seed,
             naive_eval["rpa"], naive_eval["sdr"], out["eval_stage2"]["summary"]["rpa"],
             out["eval_stage2"]["summary"]["sdr"], t_total)
    return {"seed": cfg.seed, "naive": naive_eval,
            "majl": out["eval_stage2"]["summary"],
            "majl_stage1": out["eval_stage1"]["summary"],
            "pseudo_kept_fraction": out["pseudo_kept_fraction"],
            "seconds": {"data": t_data, "naive": t_naive, "total": t_total}}


THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def stage2_identity(cfg: RunConfig, items: dict | None = None) -> dict:
    """Stage I alone versus Stage II at ``th = 1`` on the same seed.

    Both runs see the fully-labeled training items and start from the same
    seed-derived weights, so any gap comes from the Stage-II gating path.
    The Stage-I model also pseudo-labels the single-labeled items; the kept
    frame fraction of the pseudo labels is reported for each threshold in
    :data:`THRESHOLDS` (it should be 0 at ``th = 1``).
    """
    items = items or synth_items(cfg)
    cfg1 = cfg.replace(th=1.0)
    fully = [it for it in items["train"] if it.label_kind == "fully"]
    single = [it for it in items["train"] if it.label_kind != "fully"]
    s1 = train(fully, cfg1, "stage1", val_items=items["val"])
    only = evaluate(s1.model, items["test"], cfg1)["summary"]
    pseudo = pseudo_label(s1.model, single, cfg1)
    confi = [it.confi_pe if it.pseudo == "pe" else it.confi_mss for it in pseudo]
    masks = {th: [gate(c, th) for c in confi] for th in THRESHOLDS}
    s2 = train(fully, cfg1, "stage2", stage2=True, val_items=items["val"])
    two = evaluate(s2.model, items["test"], cfg1)["summary"]
    return {"seed": cfg.seed, "stage1_only": only, "stage2_th1": two,
            "gate_masks": masks,
            "kept_fraction": {th: float(np.mean(np.concatenate(m))) if m else 0.0
                              for th, m in masks.items()}}


# --- weight-module dynamics on a frozen stream -----------------------------------

def case_stream(n: int, n_frames: int, grid, rng: np.random.Generator, tau: float = 0.5):
    """Synthetic DWM inputs whose case follows from constructed pitch channels.

    Each sample draws a voiced reference track; the predicted and target
    channels copy it (correct) or move every voiced frame 10 to 40 bins away
    (incorrect).  Channels are soft activations around the chosen bins.
    Returns ``(pred, gt, tgt, cases)``.
    """
    N = grid.n_bins
    pred, gt, tgt, cases = [], [], [], []
    for i in range(n):
        want = Case(1 + i % 4)
        pred_ok = want in (Case.CASE1, Case.CASE2)
        tgt_ok = want in (Case.CASE1, Case.CASE3)
        bins = np.full(n_frames, -1)
        start = int(rng.integers(N // 4, 3 * N // 4))
        voiced = rng.random(n_frames) < 0.8
        voiced[0] = True
        walk = np.clip(start + np.cumsum(rng.integers(-1, 2, n_frames)), 0, N - 1)
        bins[voiced] = walk[voiced]
        mats = []
        for ok in (pred_ok, True, tgt_ok):
            b = bins.copy()
            if not ok:
                shift = rng.integers(10, 41, n_frames) * rng.choice([-1, 1], n_frames)
                b[voiced] = np.clip(b[voiced] + shift[voiced], 0, N - 1)
            m = np.zeros((n_frames, N))
            m[voiced, b[voiced]] = 1.0
            mats.append(m)
        soft = lambda m: np.clip(0.9 * m + 0.05 * rng.random(m.shape), 0, 1)
        p, g, t = soft(mats[0]), mats[1], soft(mats[2])
        case = classify_case(decode_activation(p, grid), decode_activation(t, grid),
                             decode_activation(g, grid), tau)
        pred.append(p), gt.append(g), tgt.append(t), cases.append(case)
    return np.stack(pred), np.stack(gt), np.stack(tgt), cases


def train_dwm_on_cases(model_cfg, n_train: int = 1024, n_eval: int = 128, steps: int = 5000,
                       batch_size: int = 16, lr: float = 3e-4, seed: int = 0):
    """Fit a lone weight module to the case losses on a frozen stream.

    Returns per-case mean ``(omega_mss, omega_pe)`` on held-out samples and
    the per-step loss curve.
    """
    rng = np.random.default_rng([seed, 41])
    grid = PitchGrid(n_bins=model_cfg.n_pitch)
    train_set = case_stream(n_train, model_cfg.n_frames, grid, rng)
    eval_set = case_stream(n_eval, model_cfg.n_frames, grid, rng)
    dwm = DynamicWeightModule(model_cfg, rng)
    opt = ad.Adam(dwm.params, lr)
    losses = []
    for step in range(steps):
        idx = rng.choice(n_train, batch_size, replace=False)
        dwm.params.zero_grad()
        omega = dwm.forward(*(a[idx] for a in train_set[:3]))
        loss, _ = dwhs_loss([train_set[3][i] for i in idx], omega)
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    with ad.no_grad():
        omega = dwm.forward(*eval_set[:3]).data
    cases = np.array([int(c) for c in eval_set[3]])
    means = {k: tuple(float(v) for v in omega[cases == k].mean(axis=0))
             for k in range(1, 5) if np.any(cases == k)}
    return {"means": means, "losses": losses, "case_counts":
            {k: int(np.sum(cases == k)) for k in range(1, 5)}}
