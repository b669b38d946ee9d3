"""Minimal reverse-mode differentiation over dense 2-D float64 arrays.

Define-by-run: every kernel records its parents and vector-Jacobian
closures on the output node; ``backward`` walks the recording in reverse
topological order and accumulates gradients additively across fan-out.
The tape is rebuilt on every forward pass.
"""

from __future__ import annotations

import base64
import json

import numpy as np
import scipy.sparse as sp

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Kernel applied to incompatible operand shapes."""


class GradientError(RuntimeError):
    """Backward pass or optimizer invoked on an invalid state."""


def _as_matrix(values) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A dense matrix node in the recording.

    ``grad`` stays None until a backward pass reaches the node; repeated
    backward calls accumulate into it.
    """

    __slots__ = ("values", "grad", "parents", "vjps")

    def __init__(self, values, parents=(), vjps=()):
        self.values = _as_matrix(values)
        self.grad = None
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar shape {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self):
        tag = "Parameter" if isinstance(self, Parameter) else "Tensor"
        return f"{tag}(shape={self.shape})"


class Parameter(Tensor):
    """Trainable tensor with a checkpoint name and Adam moment buffers."""

    __slots__ = ("name", "m1", "m2")

    def __init__(self, values, name: str):
        super().__init__(values)
        self.name = name
        self.m1 = np.zeros_like(self.values)
        self.m2 = np.zeros_like(self.values)


def constant(values) -> Tensor:
    return Tensor(values)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(cond: bool, kernel: str, *shapes):
    if not cond:
        raise ShapeError(f"{kernel}: incompatible shapes {shapes}")


# ---------------------------------------------------------------------------
# kernels


def matmul(a, b) -> Tensor:
    """Matrix product. ``a`` may be a scipy sparse constant."""
    if sp.issparse(a):
        bt = _wrap(b)
        _check(a.shape[1] == bt.shape[0], "matmul", a.shape, bt.shape)
        out = Tensor(np.asarray(a @ bt.values), (bt,),
                     (lambda g, a=a: np.asarray(a.T @ g),))
        return out
    at, bt = _wrap(a), _wrap(b)
    _check(at.shape[1] == bt.shape[0], "matmul", at.shape, bt.shape)
    return Tensor(
        at.values @ bt.values,
        (at, bt),
        (lambda g: g @ bt.values.T, lambda g: at.values.T @ g),
    )


def add(a, b) -> Tensor:
    at, bt = _wrap(a), _wrap(b)
    _check(at.shape == bt.shape, "add", at.shape, bt.shape)
    return Tensor(at.values + bt.values, (at, bt), (lambda g: g, lambda g: g))


def add_row(a, row) -> Tensor:
    """Broadcast-add a 1 x m row vector to every row of a."""
    at, rt = _wrap(a), _wrap(row)
    _check(rt.shape == (1, at.shape[1]), "add_row", at.shape, rt.shape)
    return Tensor(
        at.values + rt.values,
        (at, rt),
        (lambda g: g, lambda g: g.sum(axis=0, keepdims=True)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors."""
    at, bt = _wrap(a), _wrap(b)
    _check(at.shape == bt.shape, "mul", at.shape, bt.shape)
    return Tensor(
        at.values * bt.values,
        (at, bt),
        (lambda g: g * bt.values, lambda g: g * at.values),
    )


def scale_rows(a, s) -> Tensor:
    """Multiply row k of a by the scalar s[k]; s has shape (n, 1)."""
    at, st = _wrap(a), _wrap(s)
    _check(st.shape == (at.shape[0], 1), "scale_rows", at.shape, st.shape)
    return Tensor(
        at.values * st.values,
        (at, st),
        (lambda g: g * st.values,
         lambda g: (g * at.values).sum(axis=1, keepdims=True)),
    )


def smul(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    at = _wrap(a)
    c = float(c)
    return Tensor(at.values * c, (at,), (lambda g: g * c,))


def relu(a) -> Tensor:
    at = _wrap(a)
    mask = at.values > 0
    return Tensor(np.where(mask, at.values, 0.0), (at,), (lambda g: g * mask,))


def sigmoid(a) -> Tensor:
    at = _wrap(a)
    x = at.values
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Tensor(y, (at,), (lambda g: g * y * (1.0 - y),))


def log(a) -> Tensor:
    """Natural log with the argument clamped to >= 1e-12.

    The clamped region is flat, so its gradient is exactly zero there.
    """
    at = _wrap(a)
    clamped = np.maximum(at.values, LOG_CLAMP)
    inside = at.values > LOG_CLAMP
    return Tensor(np.log(clamped), (at,),
                  (lambda g: g * np.where(inside, 1.0 / clamped, 0.0),))


def exp(a) -> Tensor:
    at = _wrap(a)
    y = np.exp(at.values)
    return Tensor(y, (at,), (lambda g: g * y,))


def softmax_rows(a) -> Tensor:
    at = _wrap(a)
    shifted = at.values - at.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return Tensor(y, (at,), (vjp,))


def gather_rows(a, ids) -> Tensor:
    """Select rows by index; duplicate indices are allowed."""
    at = _wrap(a)
    idx = np.asarray(ids, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= at.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {at.shape}")

    def vjp(g):
        out = np.zeros_like(at.values)
        np.add.at(out, idx, g)
        return out

    return Tensor(at.values[idx], (at,), (vjp,))


def scatter_rows(a, ids, n: int) -> Tensor:
    """Place rows of a at positions ids of an n-row zero matrix."""
    at = _wrap(a)
    idx = np.asarray(ids, dtype=np.intp).ravel()
    _check(idx.size == at.shape[0], "scatter_rows", at.shape, (idx.size,))
    if idx.size != np.unique(idx).size:
        raise IndexError("scatter_rows: duplicate target indices")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"scatter_rows: index out of range for n={n}")
    out = np.zeros((n, at.shape[1]))
    out[idx] = at.values
    return Tensor(out, (at,), (lambda g: g[idx],))


def mean_all(a) -> Tensor:
    at = _wrap(a)
    size = at.values.size
    return Tensor(
        np.array([[at.values.mean()]]),
        (at,),
        (lambda g: np.full(at.shape, g[0, 0] / size),),
    )


def sum_all(a) -> Tensor:
    at = _wrap(a)
    return Tensor(
        np.array([[at.values.sum()]]),
        (at,),
        (lambda g: np.full(at.shape, g[0, 0]),),
    )


def concat_cols(tensors) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    rows = {t.shape[0] for t in ts}
    _check(len(rows) == 1, "concat_cols", *[t.shape for t in ts])
    splits = np.cumsum([t.shape[1] for t in ts])[:-1]
    vjps = []
    start = 0
    for t in ts:
        stop = start + t.shape[1]
        vjps.append(lambda g, a=start, b=stop: g[:, a:b])
        start = stop
    return Tensor(np.hstack([t.values for t in ts]), tuple(ts), tuple(vjps))


def reshape(a, shape) -> Tensor:
    at = _wrap(a)
    _check(int(np.prod(shape)) == at.values.size, "reshape", at.shape, shape)
    return Tensor(at.values.reshape(shape), (at,),
                  (lambda g: g.reshape(at.shape),))


KERNELS = {
    "matmul": matmul,
    "add": add,
    "add_row": add_row,
    "mul": mul,
    "scale_rows": scale_rows,
    "smul": smul,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "softmax_rows": softmax_rows,
    "gather_rows": gather_rows,
    "scatter_rows": scatter_rows,
    "mean_all": mean_all,
    "sum_all": sum_all,
    "concat_cols": concat_cols,
    "reshape": reshape,
}


# ---------------------------------------------------------------------------
# reverse pass and optimization


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every node reachable from the scalar loss."""
    if loss.shape != (1, 1):
        raise GradientError(f"backward needs a scalar loss, got {loss.shape}")
    pending = {id(loss): np.ones((1, 1))}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + contrib
            else:
                pending[key] = contrib


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int = 1) -> None:
    """Bias-corrected Adam update in place; grads are zeroed afterwards."""
    if t < 1:
        raise GradientError(f"adam_step needs t >= 1, got {t}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise GradientError(f"adam_step: parameter {p.name!r} has no grad")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        p.m1 = beta1 * p.m1 + (1.0 - beta1) * p.grad
        p.m2 = beta2 * p.m2 + (1.0 - beta2) * (p.grad * p.grad)
        p.values -= lr * (p.m1 / c1) / (np.sqrt(p.m2 / c2) + eps)
        p.grad = None


def finite_difference_check(f, params, h: float = 1e-5) -> float:
    """Worst relative error of ``backward`` against central differences.

    ``f`` rebuilds and returns the scalar loss tensor from the current
    parameter values. Relative error uses max(|analytic|, |numeric|, 1e-8)
    as the denominator.
    """
    params = list(params)
    zero_grads(params)
    backward(f())
    analytic = [np.array(p.grad, copy=True) for p in params]
    zero_grads(params)
    worst = 0.0
    for p, ref in zip(params, analytic):
        flat = p.values.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = f().item()
            flat[i] = keep - h
            lo = f().item()
            flat[i] = keep
            num = (hi - lo) / (2.0 * h)
            ana = ref.ravel()[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None) -> np.ndarray:
    """Seeded Xavier-uniform draw with bound sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, meta=None) -> None:
    """Write parameters as JSON: name -> shape + little-endian doubles."""
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "params": {},
    }
    for p in params:
        if p.name in blob["params"]:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        data = np.ascontiguousarray(p.values, dtype="<f8").tobytes()
        blob["params"][p.name] = {
            "shape": list(p.shape),
            "data": base64.b64encode(data).decode("ascii"),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_checkpoint(path):
    """Read a checkpoint; returns (name -> ndarray map, meta dict)."""
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {blob.get('format_version')!r}"
        )
    arrays = {}
    for name, entry in blob["params"].items():
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        arrays[name] = arr.reshape(entry["shape"])
    return arrays, blob.get("meta", {})


def restore_parameters(params, arrays) -> None:
    """Copy checkpoint arrays into parameters, by name, with shape checks."""
    for p in params:
        if p.name not in arrays:
            raise KeyError(f"checkpoint missing parameter {p.name!r}")
        arr = arrays[p.name]
        if tuple(arr.shape) != p.shape:
            raise ShapeError(
                f"checkpoint shape {arr.shape} != model shape {p.shape} "
                f"for {p.name!r}"
            )
        p.values[...] = arr
