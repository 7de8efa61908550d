"""Dense tensors with reverse-mode gradients.

A deliberately small engine: every primitive returns a new ``Tensor`` holding a
closure that maps the upstream gradient to gradients for its parents. Calling
``backward`` on a scalar builds the computation record (all reachable nodes in
reverse creation order) and replays it once.

Shapes may carry leading batch dimensions; the last one or two axes are the
ones the function signatures describe (``n x d`` and so on).
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_grad_enabled = True
_debug_checks = False


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Assert finiteness after every forward op and every backward step."""
    global _debug_checks
    prev = _debug_checks
    _debug_checks = enabled
    try:
        yield
    finally:
        _debug_checks = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_counter)
        self.name = name
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> list["Tensor"]:
        """Accumulate gradients into every reachable leaf; returns the record replayed."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        record = computation_record(self)
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in record:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if _debug_checks and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at op {node.op}")
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        return record

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def computation_record(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, latest-created first."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op {op}")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; gradients land back in the selected region."""
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(src_shape, dtype=dtype)
        gx[key] = g
        return (gx,)

    return _make(x.data[key], (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(picked, (x,), backward, "take_last")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    # 16-bit uniform draws from raw bytes; the rescale uses the quantized drop rate
    cut = int(round(p * 65536))
    bits = np.frombuffer(rng.bytes(2 * x.data.size), dtype="<u2").reshape(x.shape)
    keep = (bits >= cut).astype(x.dtype) * x.dtype.type(65536.0 / (65536 - cut))
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x W + b`` with ``b`` broadcast over rows."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ Wd.T, xd.reshape(-1, xd.shape[-1]).T @ g2, g2.sum(axis=0)

    return _make(xd @ Wd + b.data, (x, W, b), backward, "affine")


def embed_gather(table: Tensor, indices) -> Tensor:
    """Rows of ``table`` at ``indices``; gradients scatter-add back into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    vocab = table.shape[0]
    bad = np.argwhere((idx < 0) | (idx >= vocab))
    if len(bad):
        pos = tuple(int(v) for v in bad[0])
        raise IndexError(f"embedding index {int(idx[pos])} at position {pos} outside [0, {vocab})")
    flat = idx.ravel()
    d = table.shape[1]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g.reshape(-1, d))
        return (gt,)

    return _make(table.data[idx], (table,), backward, "embed_gather")


# ---------------------------------------------------------------------------
# normalisation


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"softmax temperature must be > 0, got {tau}")


def softmax_rows(x: Tensor, tau: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``x / tau``; ``mask`` False entries get probability 0."""
    _check_tau(tau)
    z = x.data / tau
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y / tau,)

    return _make(y, (x,), backward, "softmax")


def log_softmax_rows(x: Tensor, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def backward(g):
        return ((g - y * g.sum(axis=-1, keepdims=True)) / tau,)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = xd.shape[-1]

    def backward(g):
        gg = gamma.data
        gxhat = g * gg
        gx = inv / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# attention block


@dataclass
class BlockParams:
    """Parameters of one pre-norm transformer block (attention + feed-forward)."""

    ln1_g: Tensor
    ln1_b: Tensor
    Wq: Tensor
    bq: Tensor
    Wk: Tensor
    bk: Tensor
    Wv: Tensor
    bv: Tensor
    Wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.__dict__)


def init_block(d: int, hidden: int, rng: np.random.Generator, dtype=np.float64, std: float = 0.02) -> BlockParams:
    def w(rows, cols):
        return Tensor(truncated_normal(rng, (rows, cols), std).astype(dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    return BlockParams(
        ln1_g=ones(d), ln1_b=zeros(d),
        Wq=w(d, d), bq=zeros(d), Wk=w(d, d), bk=zeros(d), Wv=w(d, d), bv=zeros(d),
        Wo=w(d, d), bo=zeros(d),
        ln2_g=ones(d), ln2_b=zeros(d),
        W1=w(d, hidden), b1=zeros(hidden), W2=w(hidden, d), b2=zeros(d),
    )


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def attention_mask(valid: np.ndarray) -> np.ndarray:
    """Boolean ``(..., n, n)`` mask: query q sees key k iff k <= q and k is a real item.

    Padded queries see only themselves so no row is empty.
    """
    n = valid.shape[-1]
    causal = np.tril(np.ones((n, n), dtype=bool))
    mask = causal & valid[..., None, :]
    return mask | np.eye(n, dtype=bool)


def causal_self_attention_block(
    x: Tensor,
    params: BlockParams,
    heads: int,
    valid: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    return_attention: bool = False,
):
    """One pre-norm block: ``x + MHA(LN(x))`` then ``+ FFN(LN(.))``.

    ``x`` is ``(..., n, d)``; ``valid`` marks non-padded positions and defaults
    to all True. Position t only attends to positions <= t.
    """
    *lead, n, d = x.shape
    if n < 1:
        raise ShapeError("attention block needs at least one position")
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    if valid is None:
        valid = np.ones(tuple(lead) + (n,), dtype=bool)
    dh = d // heads
    mask = attention_mask(valid)[..., None, :, :]

    def split(t: Tensor) -> Tensor:
        t = reshape(t, tuple(lead) + (n, heads, dh))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(t, axes)

    h = layer_norm(x, params.ln1_g, params.ln1_b)
    q = split(affine(h, params.Wq, params.bq))
    k = split(affine(h, params.Wk, params.bk))
    v = split(affine(h, params.Wv, params.bv))
    kt_axes = tuple(range(len(lead) + 1)) + (len(lead) + 2, len(lead) + 1)
    scores = mul(matmul(q, transpose(k, kt_axes)), 1.0 / math.sqrt(dh))
    attn = softmax_rows(scores, mask=mask)
    ctx = matmul(dropout(attn, dropout_p, rng), v)
    back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = reshape(transpose(ctx, back), tuple(lead) + (n, d))
    x = add(x, dropout(affine(ctx, params.Wo, params.bo), dropout_p, rng))

    h = layer_norm(x, params.ln2_g, params.ln2_b)
    ff = affine(dropout(relu(affine(h, params.W1, params.b1)), dropout_p, rng), params.W2, params.b2)
    x = add(x, dropout(ff, dropout_p, rng))
    if return_attention:
        return x, attn.data
    return x


# ---------------------------------------------------------------------------
# losses


def sampled_softmax_cross_entropy(
    states: Tensor,
    W: Tensor,
    b: Tensor,
    targets,
    negatives=None,
    valid: np.ndarray | None = None,
    excluded: Sequence[int] = (),
) -> Tensor:
    """Per-position ``-log softmax`` of the target logit among candidate logits.

    With ``negatives`` given, candidates are ``{target} ∪ negatives``; a target
    appearing in ``negatives`` is a contract violation. With ``negatives=None``
    every column of ``W`` except ``excluded`` competes (full-catalog mode).
    Invalid positions (``valid`` False) get loss 0 and no gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    hd, Wd, bd = states.data, W.data, b.data
    if hd.shape[:-1] != targets.shape:
        raise ShapeError(f"states {hd.shape} do not align with targets {targets.shape}")
    if valid is None:
        valid = np.ones(targets.shape, dtype=bool)
    vmask = valid.astype(hd.dtype)
    safe_targets = np.where(valid, targets, 0)
    d = hd.shape[-1]

    if negatives is None:
        # only valid positions are scored; the rest keep loss 0
        rows = np.flatnonzero(valid.reshape(-1))
        h = hd.reshape(-1, d)[rows]
        tg = safe_targets.reshape(-1)[rows]
        ar = np.arange(len(rows))
        z = h @ Wd + bd
        if len(excluded):
            z[:, list(excluded)] = -np.inf
        z -= z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        denom = e.sum(axis=-1)
        flat = np.zeros(targets.size, dtype=hd.dtype)
        flat[rows] = np.log(denom) - z[ar, tg]
        loss = flat.reshape(targets.shape)

        def backward(g):
            gv = g.reshape(-1)[rows]
            p = e * (gv / denom)[:, None]
            p[ar, tg] -= gv
            gh = np.zeros((targets.size, d), dtype=hd.dtype)
            gh[rows] = p @ Wd.T
            return gh.reshape(hd.shape), h.T @ p, p.sum(axis=0)

        return _make(loss, (states, W, b), backward, "softmax_xent_full")

    neg = np.asarray(negatives, dtype=np.int64)
    if np.isin(targets[valid], neg).any():
        bad = targets[valid][np.isin(targets[valid], neg)][0]
        raise ValueError(f"target {int(bad)} collides with the negative set")
    Wn = Wd[:, neg]
    wt = Wd.T[safe_targets]
    tgt = (hd * wt).sum(axis=-1) + bd[safe_targets]
    neg_logits = hd @ Wn + bd[neg]
    logits = np.concatenate([tgt[..., None], neg_logits], axis=-1)
    zmax = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    lse = (np.log(denom) + zmax)[..., 0]
    loss = np.where(valid, lse - tgt, 0.0).astype(hd.dtype)

    def backward(g):
        p = e / denom * (g * vmask)[..., None]
        gt = p[..., 0] - g * vmask
        pn = p[..., 1:]
        gh = gt[..., None] * wt + pn @ Wn.T
        gW = np.zeros_like(Wd)
        h2 = hd.reshape(-1, d)
        gW[:, neg] += h2.T @ pn.reshape(-1, len(neg))
        np.add.at(gW.T, safe_targets.ravel(), gt.reshape(-1, 1) * h2)
        gb = np.zeros_like(bd)
        gb[neg] += pn.reshape(-1, len(neg)).sum(axis=0)
        np.add.at(gb, safe_targets.ravel(), gt.ravel())
        return gh, gW, gb

    return _make(loss, (states, W, b), backward, "softmax_xent_sampled")


# ---------------------------------------------------------------------------
# gradient oracle


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    worst_param: str | None
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
    floor: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_entries`` set, a random subset of entries per parameter is probed.
    """
    named = params if isinstance(params, dict) else {f"p{i}": p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = None
    out = f()
    out.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in named.items()}

    report = GradCheckReport(0.0, 0.0, None)
    with no_grad():
        for key, p in named.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
            worst = 0.0
            a_flat = analytic[key].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = float(a_flat[i])
                abs_err = abs(a - num)
                rel = abs_err / max(abs(a), abs(num), floor)
                if not math.isfinite(rel):
                    rel = math.inf
                worst = max(worst, rel)
                report.max_abs_err = max(report.max_abs_err, abs_err)
            report.per_param[key] = worst
            if worst >= report.max_rel_err:
                report.max_rel_err = worst
                report.worst_param = key
    for p in named.values():
        p.grad = None
    return report
