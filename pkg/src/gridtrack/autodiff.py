"""Reverse-mode differentiation on float64 numpy arrays.

A small tape: every op returns a :class:`DiffTensor` that remembers its
parents and a vector-Jacobian closure. :func:`backward` walks the graph in
reverse topological order and accumulates gradients. All reductions iterate
in a fixed order, so repeated runs are bit-identical.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .geometry import GridTrackError

_MAGIC = b"GTCKPT1\n"


class AutodiffError(GridTrackError):
    pass


class DiffTensor:
    """A float64 array that participates in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"DiffTensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _row_scatter_add(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """out[idx] += rows with repeated indices, via sort + segment reduce.

    Equivalent to ``np.add.at`` but much faster; accumulation order is fixed
    by the stable sort, so results are reproducible.
    """
    if idx.shape[0] == 0:
        return
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    sums = np.add.reduceat(rows[order], starts, axis=0)
    targets = sorted_idx[starts]
    out[targets] += sums


def _make(data, parents, vjp) -> DiffTensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return DiffTensor(data)
    return DiffTensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), vjp)


def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp)


def relu(a) -> DiffTensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), vjp)


def exp(a) -> DiffTensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def absolute(a) -> DiffTensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def vjp(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), vjp)


def clip(a, lo: float, hi: float) -> DiffTensor:
    """Clamp values; gradient is zero outside the active range."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * mask,)

    return _make(np.clip(a.data, lo, hi), (a,), vjp)


def tsum(a, axis=None, keepdims=False) -> DiffTensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def reshape(a, shape) -> DiffTensor:
    a = as_tensor(a)
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), vjp)


def concat(tensors, axis=0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, vjp)


def narrow(a, start: int, stop: int, axis=0) -> DiffTensor:
    """Contiguous slice along an axis."""
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _make(a.data[index], (a,), vjp)


def gather_rows(a, idx: np.ndarray) -> DiffTensor:
    """Select rows of a 2D tensor; gradient scatter-adds back."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.data)
        _row_scatter_add(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def pad_rows(a, n: int = 1) -> DiffTensor:
    """Append ``n`` zero rows (used as a sentinel target for gathers)."""
    a = as_tensor(a)
    rows = a.data.shape[0]
    out = np.concatenate([a.data, np.zeros((n, a.data.shape[1]))], axis=0)

    def vjp(g):
        return (g[:rows],)

    return _make(out, (a,), vjp)


def scatter_add_rows(a, idx: np.ndarray, num_rows: int) -> DiffTensor:
    """Accumulate rows of ``a`` into a (num_rows, C) zero tensor at ``idx``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((num_rows, a.data.shape[1]))
    _row_scatter_add(out, idx, a.data)

    def vjp(g):
        return (g[idx],)

    return _make(out, (a,), vjp)


def im2col_affine(feats, idx: np.ndarray, weights, bias) -> DiffTensor:
    """Fused neighborhood-gather + matmul + bias for sparse convolution.

    ``feats`` is (N, Cin); ``idx`` is (n_out, kv) of row indices where the
    value N selects an implicit zero row; ``weights`` is (kv, Cin, Cout).
    """
    feats, weights, bias = as_tensor(feats), as_tensor(weights), as_tensor(bias)
    n_in, cin = feats.data.shape
    n_out, kv = idx.shape
    cout = weights.data.shape[2]
    w2 = weights.data.reshape(kv * cin, cout)
    padded = np.concatenate([feats.data, np.zeros((1, cin))], axis=0)
    cols = padded[idx.reshape(-1)].reshape(n_out, kv * cin)
    out = cols @ w2 + bias.data

    def vjp(g):
        g_w = (cols.T @ g).reshape(kv, cin, cout)
        g_b = g.sum(axis=0)
        g_cols = (g @ w2.T).reshape(n_out * kv, cin)
        g_padded = np.zeros((n_in + 1, cin))
        _row_scatter_add(g_padded, idx.reshape(-1), g_cols)
        return g_padded[:n_in], g_w, g_b

    return _make(out, (feats, weights, bias), vjp)


def segment_max(a, starts: np.ndarray) -> DiffTensor:
    """Channelwise max over contiguous row segments.

    ``starts`` holds each segment's first row; segments must be non-empty and
    cover the tensor. The gradient routes entirely to the first row (lowest
    index) attaining each segment's per-channel max.
    """
    a = as_tensor(a)
    starts = np.asarray(starts, dtype=np.int64)
    if a.data.shape[0] == 0 or starts.shape[0] == 0:
        raise AutodiffError("segment_max requires non-empty input")
    out = np.maximum.reduceat(a.data, starts, axis=0)
    n_rows = a.data.shape[0]

    def vjp(g):
        seg_of_row = np.zeros(n_rows, dtype=np.int64)
        seg_of_row[starts[1:]] = 1
        seg_of_row = np.cumsum(seg_of_row)
        is_max = a.data == out[seg_of_row]
        ranks = np.where(is_max, np.arange(n_rows)[:, None], n_rows)
        winners = np.minimum.reduceat(ranks, starts, axis=0)
        grad = np.zeros_like(a.data)
        cols = np.broadcast_to(np.arange(a.data.shape[1]), winners.shape)
        # NaN segments have no winner (sentinel n_rows); drop their gradient
        valid = winners < n_rows
        np.add.at(grad, (winners[valid], cols[valid]), g[valid])
        return (grad,)

    return _make(out, (a,), vjp)


def backward(loss: DiffTensor) -> None:
    """Populate ``grad`` on every reachable tensor; accumulates across calls."""
    if not isinstance(loss, DiffTensor) or loss.data.ndim != 0:
        raise AutodiffError("backward expects a scalar DiffTensor loss")
    if not loss.requires_grad:
        return

    topo: list[DiffTensor] = []
    visited: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    seed = np.ones(())
    if loss.grad is None:
        loss.grad = seed.copy()
    else:
        loss.grad = loss.grad + seed
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._vjp is None:
                # leaf: accumulate the persistent gradient directly
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad += pg
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


class ParamStore:
    """Named learnable tensors plus Adam first/second-moment state."""

    def __init__(self):
        self.params: dict[str, DiffTensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> DiffTensor:
        if name in self.params:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        t = DiffTensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> DiffTensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def grad(self, name: str) -> np.ndarray:
        g = self.params[name].grad
        return np.zeros_like(self.params[name].data) if g is None else g

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def scale_grads(self, factor: float) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad = p.grad * factor


def step_adam(store: ParamStore, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over all parameters (sorted order)."""
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    for name in store.names():
        p = store.params[name]
        g = store.grad(name)
        m = store._m[name] = b1 * store._m[name] + (1 - b1) * g
        v = store._v[name] = b2 * store._v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_mlp(store: ParamStore, prefix: str, sizes: list[int],
             rng: np.random.Generator) -> None:
    """Create weights/biases for an MLP with the given layer widths."""
    for i in range(len(sizes) - 1):
        store.add(f"{prefix}.{i}.w", init_uniform(rng, (sizes[i], sizes[i + 1]), sizes[i]))
        store.add(f"{prefix}.{i}.b", np.zeros(sizes[i + 1]))


def mlp_forward(x: DiffTensor, store: ParamStore, prefix: str,
                num_layers: int) -> DiffTensor:
    """Affine + relu per hidden layer, affine output. ``x`` is (rows, width)."""
    for i in range(num_layers):
        w = store[f"{prefix}.{i}.w"]
        if x.data.shape[-1] != w.data.shape[0]:
            raise AutodiffError(
                f"mlp layer {i}: input width {x.data.shape[-1]} != {w.data.shape[0]}"
            )
        x = add(matmul(x, w), store[f"{prefix}.{i}.b"])
        if i < num_layers - 1:
            x = relu(x)
    return x


def save_checkpoint(path, store: ParamStore) -> None:
    """Self-describing container: JSON header + raw little-endian float64."""
    names = store.names()
    entries = []
    blobs = []
    offset = 0
    for role, source in (("param", {n: store.params[n].data for n in names}),
                         ("adam_m", store._m), ("adam_v", store._v)):
        for name in names:
            arr = np.ascontiguousarray(source[name], dtype="<f8")
            entries.append({"name": name, "role": role,
                            "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps({"format": 1, "adam_step": store.step_count,
                         "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise AutodiffError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    store = ParamStore()
    store.step_count = int(header["adam_step"])
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=start).reshape(shape).astype(np.float64)
        if entry["role"] == "param":
            store.add(entry["name"], arr)
        elif entry["role"] == "adam_m":
            store._m[entry["name"]] = arr.copy()
        else:
            store._v[entry["name"]] = arr.copy()
    return store
