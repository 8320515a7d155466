"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the separation/pitch/weighting networks and their losses
need are provided.  Each op records its parents and a vector-Jacobian
product; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .audio import StftConfig, ola_adjoint, overlap_add


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


# Non-differentiable points (ReLU/abs at 0, BCE clip edges) are logged here
# while a grad check is running so that straddling coordinates can be skipped.
_kink_log: list | None = None


def _log_kink(tag: str, side: np.ndarray):
    if _kink_log is not None:
        _kink_log.append((tag, np.ascontiguousarray(side, dtype=np.int8).tobytes()))


@contextlib.contextmanager
def _record_kinks():
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                grads[id(p)] = grads[id(p)] + pg if id(p) in grads else pg

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return mul(self, 1.0 / _arr(o))
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None): return tsum(self, axis)
    def mean(self, axis=None): return mean(self, axis)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, parents, vjp, op):
    parents = tuple(parents)
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, rg, parents if rg else (), vjp if rg else None, op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    _log_kink("relu", np.sign(x.data))
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    _log_kink("abs", np.sign(x.data))
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(x) -> Tensor:
    """``log(1 + exp(x))``; note ``-log(sigmoid(z)) == softplus(-z)``."""
    x = as_tensor(x)
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),), "softplus")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def log1p(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),), "log1p")


def bce(p, y, eps: float = 1e-7) -> Tensor:
    """Elementwise binary cross-entropy with ``p`` clipped to ``[eps, 1 - eps]``."""
    p = as_tensor(p)
    y = _arr(y)
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    _log_kink("bce_clip", np.where(p.data <= eps, -1, np.where(p.data >= 1 - eps, 1, 0)))
    pc = np.clip(p.data, eps, 1.0 - eps)
    val = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    return _make(val, (p,), lambda g: (g * inside * ((1.0 - y) / (1.0 - pc) - y / pc),), "bce")


# --- reductions and reshaping ---------------------------------------------

def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(x.data.sum(axis=axis), (x,), vjp, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def vjp(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)
    return _make(x.data[idx], (x,), vjp, "getitem")


def concat(xs, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


# --- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def linear(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


def frame_context(x, radius: int) -> Tensor:
    """Stack each frame with its ``radius`` neighbours on either side.

    ``(B, T, F) -> (B, T, (2 * radius + 1) * F)``; frames past the edges are zero.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"frame_context expects (B, T, F), got {x.shape}")
    B, T, F = x.shape
    padded = np.pad(x.data, ((0, 0), (radius, radius), (0, 0)))
    width = 2 * radius + 1
    out = np.concatenate([padded[:, j:j + T] for j in range(width)], axis=2)

    def vjp(g):
        gp = np.zeros_like(padded)
        for j in range(width):
            gp[:, j:j + T] += g[:, :, j * F:(j + 1) * F]
        return (gp[:, radius:radius + T],)
    return _make(out, (x,), vjp, "frame_context")


def conv2d(x, w, b, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation, ``x: (B, C, H, W)``, ``w: (O, C, k, k)``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T + b.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
        return gx, gw, gb
    return _make(out, (x, w, b), vjp, "conv2d")


def masked_istft(mask, spec: np.ndarray, cfg: StftConfig, length: int) -> Tensor:
    """Waveform from ``mask * spec`` (complex STFT) by weighted overlap-add.

    ``mask`` is real ``(..., T, F)``; the result has shape ``(..., length)``.
    """
    mask = as_tensor(mask)
    if mask.shape != spec.shape:
        raise ShapeError(f"masked_istft: mask {mask.shape} vs spectrum {spec.shape}")
    n = cfg.window_size
    win = cfg.window_array()
    frames = np.fft.irfft(mask.data * spec, n=n, axis=-1) * win
    out = overlap_add(frames, cfg, length)
    n_frames = spec.shape[-2]
    # irfft is real-linear in (Re Z, Im Z); its adjoint is (c_j / n) * rfft with
    # c_j = 1 at DC/Nyquist (imaginary part ignored there) and 2 elsewhere.
    c = np.full(spec.shape[-1], 2.0 / n)
    c[0] = 1.0 / n
    if n % 2 == 0:
        c[-1] = 1.0 / n

    def vjp(g):
        gframes = ola_adjoint(g, n_frames, cfg) * win
        r = np.fft.rfft(gframes, axis=-1) * c
        gi = r.imag
        gi[..., 0] = 0.0
        if n % 2 == 0:
            gi[..., -1] = 0.0
        return (r.real * spec.real + gi * spec.imag,)
    return _make(out, (mask,), vjp, "masked_istft")


# --- parameters and optimisation ----------------------------------------------

class ParamStore:
    """Named trainable tensors in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op=name)
        self._params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad)
                for k, t in self._params.items()}

    def merge(self, other: "ParamStore", prefix: str = "") -> None:
        for k, t in other.items():
            if prefix + k in self._params:
                raise KeyError(f"duplicate parameter name {prefix + k!r}")
            self._params[prefix + k] = t


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Adam:
    """Adam with a stepwise learning-rate decay applied per epoch interval."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, decay_factor: float = 0.98,
                 decay_interval: int = 10, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < decay_factor <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if decay_interval < 1:
            raise ValueError("decay interval must be at least one epoch")
        self.params = params
        self.base_lr = lr
        self.decay_factor = decay_factor
        self.decay_interval = decay_interval
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.epoch = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    @property
    def lr(self) -> float:
        return self.base_lr * self.decay_factor ** (self.epoch // self.decay_interval)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def step(self):
        for k, t in self.params.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NumericalError(f"non-finite gradient in parameter {k!r}")
        self.step_count += 1
        lr = self.lr
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for k, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"base_lr": self.base_lr, "decay_factor": self.decay_factor,
                "decay_interval": self.decay_interval, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "step_count": self.step_count,
                "epoch": self.epoch}


# --- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: float = 0.0
    mean_rel_error: float = 0.0
    n_checked: int = 0
    n_excluded: int = 0
    per_param: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel={self.max_rel_error:.3e} mean_rel={self.mean_rel_error:.3e} "
                f"checked={self.n_checked} excluded={self.n_excluded} tol={self.tol:g}")


def grad_check(loss_fn, params: ParamStore, h: float = 1e-5, tol: float = 1e-4,
               max_coords: int = 200, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must rebuild the graph from the current parameter values and
    return a scalar Tensor.  Up to ``max_coords`` coordinates per parameter
    are sampled.  A coordinate whose ``+h``/``-h`` evaluations fall on
    different sides of a ReLU/abs/clip kink is excluded and listed.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  Round-off in the
    central difference is about ``eps * |loss| / h``, so gradients smaller
    than ``floor = eps * max(1, |loss|) / (h * tol)`` cannot be resolved to
    ``tol`` and are compared against the floor instead.
    """
    rng = np.random.default_rng(seed)
    params.zero_grad()
    with _record_kinks() as base:
        loss = loss_fn()
    loss.backward()
    f0 = abs(loss.item())
    floor = np.finfo(np.float64).eps * max(1.0, f0) / (h * tol)
    analytic = params.grads()
    report = GradCheckReport(tol=tol)
    all_errs = []
    for name, t in params.items():
        size = t.data.size
        coords = np.arange(size) if size <= max_coords else \
            np.sort(rng.choice(size, max_coords, replace=False))
        errs = []
        flat = t.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with _record_kinks() as up:
                fp = loss_fn().item()
            flat[c] = orig - h
            with _record_kinks() as dn:
                fm = loss_fn().item()
            flat[c] = orig
            # any kink whose side changes between -h, 0 and +h makes the
            # central difference meaningless for this coordinate
            if up != dn or up != base:
                report.excluded.append((name, int(c)))
                continue
            num = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)[c]
            errs.append(abs(a - num) / max(abs(a), abs(num), floor))
        report.per_param[name] = max(errs) if errs else 0.0
        all_errs.extend(errs)
    report.n_checked = len(all_errs)
    report.n_excluded = len(report.excluded)
    if all_errs:
        report.max_rel_error = float(max(all_errs))
        report.mean_rel_error = float(np.mean(all_errs))
    return report


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"SEPCKPT1"


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, params: ParamStore, optimizer: Adam | None = None,
                    config: dict | None = None, extra: dict | None = None) -> None:
    """Write ``(name, shape, float64 data)`` triples plus optimizer state.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header (sorted keys), then the raw little-endian float64 payload.
    """
    arrays = [(k, t.data) for k, t in params.items()]
    opt_state = None
    if optimizer is not None:
        opt_state = optimizer.state()
        arrays += [(f"adam.m/{k}", optimizer.m[k]) for k in optimizer.m]
        arrays += [(f"adam.v/{k}", optimizer.v[k]) for k in optimizer.v]
    entries, offset = [], 0
    for name, a in arrays:
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = {"tensors": entries, "optimizer": opt_state,
              "config_hash": config_hash(config or {}), "extra": extra or {}}
    head = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    base = 16 + n
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        tensors[e["name"]] = np.frombuffer(raw[start:start + 8 * count], dtype="<f8") \
            .reshape(e["shape"]).copy()
    return tensors, header


def restore(params: ParamStore, tensors: dict, optimizer: Adam | None = None,
            header: dict | None = None) -> None:
    for k, t in params.items():
        if k not in tensors:
            raise KeyError(f"checkpoint lacks parameter {k!r}")
        if tensors[k].shape != t.shape:
            raise ShapeError(f"parameter {k!r}: checkpoint shape {tensors[k].shape} "
                             f"!= model shape {t.shape}")
        t.data[...] = tensors[k]
    if optimizer is not None and header and header.get("optimizer"):
        st = header["optimizer"]
        optimizer.step_count = st["step_count"]
        optimizer.epoch = st["epoch"]
        for k in optimizer.m:
            optimizer.m[k][...] = tensors[f"adam.m/{k}"]
            optimizer.v[k][...] = tensors[f"adam.v/{k}"]
