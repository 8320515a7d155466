"""Finite-difference checks for every differentiable primitive and the joint objective."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .audio import StftConfig, stft_array
from .losses import Case, dwhs_loss, loss_mss, loss_pe, total_loss_stage1
from .models import JointModel, ModelConfig

TINY_STFT = StftConfig(window_size=32, hop=8)
TINY_LENGTH = 64
TINY_MODEL = ModelConfig(n_freq=17, n_frames=9, n_pitch=12, mss_hidden=4, pe_freq_bins=8,
                         pe_context=1, pe_hidden=6, dwm_channels=(2, 2), dwm_stride=2,
                         dwm_hidden=4, w_max=2.0)


def _weighted(y, rng):
    # random projection to a scalar so every output coordinate matters
    return ad.tsum(ad.mul(y, rng.normal(size=y.shape)))


def primitive_cases(seed: int = 0) -> list:
    """``(name, loss_fn, params)`` triples, one per primitive."""
    rng = np.random.default_rng(seed)
    cases = []

    def add_case(name, build, **shapes):
        ps = ad.ParamStore()
        for k, (shape, scale, offset) in shapes.items():
            ps.add(k, offset + scale * rng.normal(size=shape))
        proj = np.random.default_rng([seed, len(cases)])
        w = {}

        def loss_fn():
            y = build(ps)
            if "w" not in w:
                w["w"] = proj.normal(size=y.shape)
            return ad.tsum(ad.mul(y, w["w"]))
        cases.append((name, loss_fn, ps))

    other = rng.normal(size=(3, 4))
    labels = (rng.random((3, 4)) > 0.5).astype(float)
    spec = stft_array(rng.normal(size=(2, TINY_LENGTH)), TINY_STFT)
    add_case("add", lambda p: ad.add(p["a"], p["b"]), a=((3, 4), 1, 0), b=((4,), 1, 0))
    add_case("sub", lambda p: ad.sub(p["a"], p["b"]), a=((3, 4), 1, 0), b=((3, 1), 1, 0))
    add_case("mul", lambda p: ad.mul(p["a"], p["b"]), a=((3, 4), 1, 0), b=((3, 4), 1, 0))
    add_case("mul_const", lambda p: ad.mul(p["a"], other), a=((3, 4), 1, 0))
    add_case("relu", lambda p: ad.relu(p["a"]), a=((5, 6), 1, 0))
    add_case("abs", lambda p: ad.tabs(p["a"]), a=((5, 6), 1, 0))
    add_case("sigmoid", lambda p: ad.sigmoid(p["a"]), a=((5, 6), 2, 0))
    add_case("softplus", lambda p: ad.softplus(p["a"]), a=((5, 6), 2, 0))
    add_case("log", lambda p: ad.log(p["a"]), a=((5, 6), 0.2, 2))
    add_case("log1p", lambda p: ad.log1p(p["a"]), a=((5, 6), 0.2, 1))
    add_case("bce", lambda p: ad.bce(ad.sigmoid(p["a"]), labels), a=((3, 4), 1.5, 0))
    add_case("sum_axis", lambda p: ad.tsum(p["a"], axis=1), a=((3, 4, 2), 1, 0))
    add_case("mean_axis", lambda p: ad.mean(p["a"], axis=-1), a=((3, 4), 1, 0))
    add_case("reshape", lambda p: ad.reshape(p["a"], (4, 3)), a=((3, 4), 1, 0))
    add_case("getitem_slice", lambda p: p["a"][1:, ::2], a=((3, 4), 1, 0))
    add_case("getitem_fancy", lambda p: p["a"][np.array([0, 2, 0])], a=((3, 4), 1, 0))
    add_case("concat", lambda p: ad.concat([p["a"], p["b"]], axis=1),
             a=((3, 2), 1, 0), b=((3, 3), 1, 0))
    add_case("matmul", lambda p: ad.matmul(p["a"], p["b"]), a=((2, 3, 4), 1, 0), b=((4, 5), 1, 0))
    add_case("linear", lambda p: ad.linear(p["x"], p["w"], p["b"]),
             x=((6, 4), 1, 0), w=((4, 3), 1, 0), b=((3,), 1, 0))
    add_case("frame_context", lambda p: ad.frame_context(p["a"], 2), a=((2, 5, 3), 1, 0))
    add_case("conv2d", lambda p: ad.conv2d(p["x"], p["w"], p["b"], stride=1, padding=1),
             x=((2, 3, 5, 6), 1, 0), w=((2, 3, 3, 3), 1, 0), b=((2,), 1, 0))
    add_case("conv2d_stride2", lambda p: ad.conv2d(p["x"], p["w"], p["b"], stride=2, padding=1),
             x=((1, 2, 7, 6), 1, 0), w=((3, 2, 3, 3), 1, 0), b=((3,), 1, 0))
    add_case("masked_istft",
             lambda p: ad.masked_istft(ad.sigmoid(p["m"]), spec, TINY_STFT, TINY_LENGTH),
             m=((2,) + spec.shape[1:], 1, 0))
    return cases


def stage1_objective_case(seed: int = 0, batch: int = 3):
    """The full joint objective on a tiny cascade with the weight module.

    Quantities the graph treats as constants (weight-module inputs, the case
    labels and the weights applied to the task losses) are frozen at their
    base-point values so that finite differences see the same graph.
    """
    rng = np.random.default_rng(seed)
    model = JointModel(TINY_MODEL, rng, with_dwm=True)
    # move the heads off their flat initialisation so every path carries gradient
    model.dwm.params["head.w"].data[...] = rng.normal(0, 0.5, size=(TINY_MODEL.dwm_hidden, 2))
    model.pe.params["b2"].data[...] = rng.normal(0, 0.5, size=TINY_MODEL.n_pitch)
    mix = rng.normal(size=(batch, TINY_LENGTH))
    target = 0.5 * mix + 0.1 * rng.normal(size=mix.shape)
    spec = stft_array(mix, TINY_STFT)
    labels = np.zeros((batch, TINY_MODEL.n_frames, TINY_MODEL.n_pitch))
    labels[np.arange(batch)[:, None], np.arange(TINY_MODEL.n_frames),
           rng.integers(0, TINY_MODEL.n_pitch, size=(batch, TINY_MODEL.n_frames))] = 1.0
    tgt_act = rng.random(labels.shape)
    cases = [Case(1 + i % 4) for i in range(batch)]
    frozen = {}

    def loss_fn():
        mask, pred = model.mss.forward(np.abs(spec))
        s_hat = ad.masked_istft(mask, spec, TINY_STFT, TINY_LENGTH)
        l_mss = loss_mss(target, s_hat)
        act = model.pe.forward(pred)
        l_pe = loss_pe(labels, act)
        if "act" not in frozen:
            frozen["act"] = act.data.copy()
        omega = model.dwm.forward(frozen["act"], labels, tgt_act)
        if "omega" not in frozen:
            frozen["omega"] = omega.data.copy()
        l_dwhs, _ = dwhs_loss(cases, omega)
        return total_loss_stage1(l_mss, l_pe, frozen["omega"], l_dwhs)

    return "stage1_objective", loss_fn, model.params


def run_suite(seed: int = 0, tol: float = 1e-4, h: float = 1e-5, max_coords: int = 60):
    """Run every check; returns ``[(name, GradCheckReport), ...]``."""
    out = []
    for name, fn, ps in primitive_cases(seed) + [stage1_objective_case(seed)]:
        out.append((name, ad.grad_check(fn, ps, h=h, tol=tol, max_coords=max_coords,
                                        seed=seed)))
    return out
