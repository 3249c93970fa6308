"""Dense numerics substrate: a minimal reverse-mode tape over numpy.

Covers exactly the compositions the rest of the package needs (affine
layers, gated sums, cosine similarity, softmax/cross-entropy, squared
error, Gram-matrix penalties, stop-gradient) plus an Adam optimizer, a
central-difference gradient checker, and a binary checkpoint format.

Training runs at float32; gradient checks rebuild the computation at
float64 (see ``grad_check``). Single-threaded by design: gradient
accumulation into a Parameter is not locked.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class MmqError(Exception):
    """Base class for library errors."""


class ShapeError(MmqError):
    """Operand shapes violate an operation's contract."""


class NumericError(MmqError):
    """A non-finite value appeared where the contract requires finite ones."""


class FormatError(MmqError):
    """A serialized artifact is malformed."""


# --------------------------------------------------------------------------
# Snapshot context: lets grad_check freeze stop-gradient values and discrete
# selections recorded on a base forward pass, so finite differences probe the
# smooth surrogate whose true gradient equals the analytic straight-through
# gradient.
# --------------------------------------------------------------------------

class _Snapshot:
    __slots__ = ("mode", "values", "cursor")

    def __init__(self, mode, values=None):
        self.mode = mode  # "record" | "replay"
        self.values = [] if values is None else values
        self.cursor = 0


_SNAP: _Snapshot | None = None


def freeze_value(value: np.ndarray) -> np.ndarray:
    """Record or replay a value held constant across fd perturbations.

    Outside a grad_check this is the identity.
    """
    if _SNAP is None:
        return value
    if _SNAP.mode == "record":
        _SNAP.values.append(np.array(value, copy=True))
        return value
    out = _SNAP.values[_SNAP.cursor]
    _SNAP.cursor += 1
    return out


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

class Tensor:
    """A numpy array plus the closure that routes gradients to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _bwd=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def Parameter(array, name: str) -> Tensor:
    """A trainable leaf tensor."""
    arr = np.asarray(array)
    return Tensor(arr, requires_grad=True, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable Parameter's .grad.

    Stop-gradient boundaries contribute zero to their argument.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("backward on a non-finite loss")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


def _make(data, parents, bwd, name=None) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, name=name)
    return Tensor(data, requires_grad=True, name=name, _parents=tuple(parents), _bwd=bwd)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if want == 1 and got != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# Primitive ops
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(a.data.T, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out_data = a.data * mask

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _make(out_data, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(out_data, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (0.5 / out_data))

    return _make(out_data, (a,), bwd)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(out_data, tensors, bwd)


def slice_cols(a, lo, hi) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[:, lo:hi]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            _accum(a, full)

    return _make(out_data, (a,), bwd)


def _scatter_rows_sum(n_rows, idx_flat, g_flat):
    """Sum g rows into an (n_rows, d) array grouped by idx (sorted reduceat;
    much faster than np.add.at for repeated indices)."""
    order = np.argsort(idx_flat, kind="stable")
    sorted_idx = idx_flat[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
    sums = np.add.reduceat(g_flat[order], starts, axis=0)
    out = np.zeros((n_rows, g_flat.shape[1]), dtype=g_flat.dtype)
    out[sorted_idx[starts]] = sums
    return out


def gather_rows(a, idx) -> Tensor:
    """a[idx] over rows (idx may be multi-dimensional); backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out_data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            g2 = g.reshape(-1, a.data.shape[1])
            _accum(a, _scatter_rows_sum(a.data.shape[0], idx.ravel(), g2))

    return _make(out_data, (a,), bwd)


def take_per_row(a, idx) -> Tensor:
    """Pick a[i, idx[i]] for each row i; returns shape (B,)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out_data = a.data[rows, idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            _accum(a, full)

    return _make(out_data, (a,), bwd)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), bwd)


def logsumexp(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(s), axis=axis)

    def bwd(g):
        if a.requires_grad:
            soft = e / s
            _accum(a, np.expand_dims(g, axis) * soft)

    return _make(out_data, (a,), bwd)


def square(a) -> Tensor:
    return mul(a, a)


def stop_gradient(a) -> Tensor:
    """Forward identity; no gradient flows to the argument.

    The forwarded value participates in grad_check freezing so that finite
    differences see it as a constant.
    """
    a = as_tensor(a)
    return Tensor(freeze_value(a.data))


def frozen_indices(idx: np.ndarray) -> np.ndarray:
    """Mark a discrete selection as constant for grad_check purposes."""
    return freeze_value(np.asarray(idx))


def ste_compose(smooth, hard_values) -> Tensor:
    """Straight-through composition smooth + sg(hard - smooth).

    The forward value is the hard array bit-exactly (not reconstructed through
    float arithmetic); the gradient passes to ``smooth`` unchanged. Inside
    grad_check the hard-minus-smooth offset is frozen from the base pass so
    finite differences probe the smooth path.
    """
    a = as_tensor(smooth)
    hard = np.asarray(hard_values)
    if hard.shape != a.data.shape:
        raise ShapeError(f"hard shape {hard.shape} != smooth shape {a.data.shape}")
    if _SNAP is None:
        data = hard
    else:
        data = a.data + freeze_value(hard - a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)

    return _make(data, (a,), bwd)


def l2_normalize_rows(a, eps=0.0) -> Tensor:
    """Row-wise x / ||x||; eps guards against zero rows when > 0."""
    a = as_tensor(a)
    sq = tsum(mul(a, a), axis=1, keepdims=True)
    if eps:
        sq = add(sq, eps)
    return div(a, sqrt(sq))


def cosine_logits_t(z, codewords) -> Tensor:
    """Differentiable cosine similarities between rows of z and codewords."""
    zn = l2_normalize_rows(z)
    cn = l2_normalize_rows(codewords)
    return matmul(zn, transpose(cn))


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all entries (per-dimension, per-row mean)."""
    diff = sub(pred, as_tensor(target))
    return tmean(square(diff))


# --------------------------------------------------------------------------
# MLPs
# --------------------------------------------------------------------------

_ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": lambda t: t}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths input -> hidden... -> output; activation on non-final layers."""

    layer_dims: tuple
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ShapeError("MlpSpec needs at least input and output dims")
        if any(d < 1 for d in self.layer_dims):
            raise ShapeError("MlpSpec dims must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1


def init_mlp_params(name: str, spec: MlpSpec, rng: np.random.Generator,
                    dtype=np.float32) -> list:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    params = []
    dims = spec.layer_dims
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        lim = np.sqrt(6.0 / (fi + fo))
        w = rng.uniform(-lim, lim, size=(fi, fo)).astype(dtype)
        params.append(Parameter(w, f"{name}.w{i}"))
        params.append(Parameter(np.zeros((1, fo), dtype=dtype), f"{name}.b{i}"))
    return params


def mlp_apply(spec: MlpSpec, params, x) -> Tensor:
    """Forward pass; x is (B, in) or a flat vector."""
    x = as_tensor(x)
    if x.data.ndim == 1:
        x = reshape(x, (1, x.data.shape[0]))
    if x.data.shape[1] != spec.layer_dims[0]:
        raise ShapeError(
            f"input dim {x.data.shape[1]} != layer 0 expected {spec.layer_dims[0]}")
    act = _ACTIVATIONS[spec.activation]
    h = x
    for i in range(spec.n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        if w.data.shape != (spec.layer_dims[i], spec.layer_dims[i + 1]):
            raise ShapeError(f"layer {i} weight shape {w.data.shape} mismatches spec")
        h = add(matmul(h, w), b)
        if i < spec.n_layers - 1:
            h = act(h)
    return h


class Mlp:
    """An MlpSpec bundled with its parameters."""

    def __init__(self, name: str, spec: MlpSpec, rng: np.random.Generator,
                 dtype=np.float32):
        self.name = name
        self.spec = spec
        self.params = init_mlp_params(name, spec, rng, dtype)

    def __call__(self, x) -> Tensor:
        return mlp_apply(self.spec, self.params, x)

    @property
    def in_dim(self):
        return self.spec.layer_dims[0]

    @property
    def out_dim(self):
        return self.spec.layer_dims[-1]

    def param_vector(self) -> Tensor:
        """All weights and biases flattened to one row (for Gram penalties)."""
        flats = [reshape(p, (1, p.data.size)) for p in self.params]
        return concat(flats, axis=1)

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer with bias correction; zeroes grads on step."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = []
        seen = set()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def grad_check(loss_fn, params, eps=1e-5, max_coords_per_param=64, seed=0) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn must rebuild the loss graph from the current parameter values on
    every call. Stop-gradient values and discrete selections recorded on the
    base pass are frozen during the +-eps evaluations. Run with float64
    parameters for meaningful tolerances.
    """
    global _SNAP
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    params = list(params)

    _SNAP = _Snapshot("record")
    try:
        loss = loss_fn()
        if loss.data.size != 1:
            raise ShapeError("grad_check needs a scalar loss")
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("non-finite loss in grad_check")
        zero_grads(params)
        backward(loss)
        analytic = {
            id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for p in params
        }
        base_values = _SNAP.values

        rng = np.random.default_rng(seed)
        worst = 0.0
        for p in params:
            n = p.data.size
            if n <= max_coords_per_param:
                coords = np.arange(n)
            else:
                coords = rng.choice(n, size=max_coords_per_param, replace=False)
            for i in coords:
                orig = p.data.flat[i]
                p.data.flat[i] = orig + eps
                _SNAP = _Snapshot("replay", base_values)
                lp = float(loss_fn().data)
                p.data.flat[i] = orig - eps
                _SNAP = _Snapshot("replay", base_values)
                lm = float(loss_fn().data)
                p.data.flat[i] = orig
                if not (np.isfinite(lp) and np.isfinite(lm)):
                    raise NumericError("non-finite loss during finite differences")
                cd = (lp - lm) / (2.0 * eps)
                a = float(analytic[id(p)].flat[i])
                rel = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
                worst = max(worst, rel)
    finally:
        _SNAP = None
    return worst


# --------------------------------------------------------------------------
# Checkpoint format: magic "MMQW", u32 version=1, u32 count, then per array
# u16 name length, name bytes, u32 rows, u32 cols, row-major f32 LE.
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MMQW"
CHECKPOINT_VERSION = 1


def _as_named_pairs(items):
    pairs = []
    for it in items:
        if isinstance(it, Tensor):
            pairs.append((it.name or "param", it.data))
        else:
            name, arr = it
            pairs.append((name, np.asarray(arr)))
    return pairs


def _write_checkpoint_stream(f, named_arrays) -> None:
    pairs = _as_named_pairs(named_arrays)
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<II", CHECKPOINT_VERSION, len(pairs)))
    for name, arr in pairs:
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"checkpoint arrays must be 2-D, got {arr.ndim}-D for {name!r}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite entries in {name!r}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name!r}")
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def write_checkpoint(path, named_arrays) -> None:
    """Serialize (name, 2-D float32 array) pairs; round-trips bit-exactly."""
    with open(path, "wb") as f:
        _write_checkpoint_stream(f, named_arrays)


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint reading {what} at byte offset {f.tell() - len(data)}")
    return data


def _read_checkpoint_stream(f):
    out = []
    magic = _read_exact(f, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset {f.tell() - 4}")
    version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    for k in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2, f"name length of entry {k}"))
        name = _read_exact(f, nlen, f"name of entry {k}").decode("utf-8")
        rows, cols = struct.unpack("<II", _read_exact(f, 8, f"shape of entry {k}"))
        raw = _read_exact(f, rows * cols * 4, f"data of entry {k}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite entries in {name!r}")
        out.append((name, arr))
    return out


def read_checkpoint(path):
    """Inverse of write_checkpoint; returns ordered (name, float32 array) pairs."""
    with open(path, "rb") as f:
        out = _read_checkpoint_stream(f)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"trailing bytes at byte offset {f.tell() - 1}")
    return out


# Model container: a JSON header (model kind, stage tag, config) followed by
# an embedded parameter checkpoint in the format above.

CONTAINER_MAGIC = b"MMQC"
CONTAINER_VERSION = 1


def write_model_container(path, header: dict, named_arrays) -> None:
    import json

    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<II", CONTAINER_VERSION, len(blob)))
        f.write(blob)
        _write_checkpoint_stream(f, named_arrays)


def read_model_container(path):
    """Returns (header dict, ordered (name, array) pairs)."""
    import json

    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "container magic")
        if magic != CONTAINER_MAGIC:
            raise FormatError(f"bad container magic {magic!r} at byte offset 0")
        version, blob_len = struct.unpack("<II", _read_exact(f, 8, "container header"))
        if version != CONTAINER_VERSION:
            raise FormatError(f"unsupported container version {version} at byte offset 4")
        header = json.loads(_read_exact(f, blob_len, "container json").decode("utf-8"))
        params = _read_checkpoint_stream(f)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"trailing bytes at byte offset {f.tell() - 1}")
    return header, params
