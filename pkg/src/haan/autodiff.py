"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Only the primitives needed by the HAAN networks and losses are provided.
Operations record themselves on the innermost active :class:`Tape`; with no
tape active they simply compute values, which is how gradient recording is
disabled (e.g. while clustering features).

Example:
    >>> w = Tensor([[2.0, 3.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = linear(Tensor([1.0, 0.0]), w, Tensor([1.0])).sum()
    >>> grads = backward(tape, loss, {"w": w})
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

_ids = itertools.count()
_local = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside an operation's domain (e.g. zero-norm vector)."""


class ContractError(RuntimeError):
    """Misuse of the tape or gradient-check machinery."""


class Tensor:
    """Dense row-major array with an optional gradient requirement.

    ``data`` is float32 unless ``dtype=np.float64`` is given (used for
    gradient checking); results of operations keep their inputs' precision.
    """

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations executed while active."""

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted")
        stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    @property
    def op_names(self) -> list[str]:
        return [r.op for r in self.records]


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float32), dtype=dtype)


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs, dtype=out.dtype)
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(op, tuple(inputs), result, backward_fn))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- branch bookkeeping for gradient_check ----------------------------------
# Non-smooth ops (relu, selections) report their discrete decisions so the
# finite-difference harness can skip coordinates whose perturbation flips one.

def note_branch(key: str, decision: np.ndarray, margin: float = math.inf) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append((key, np.asarray(decision).tobytes(), float(margin)))


# --- primitives -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    out = a.data - b.data
    return _emit("sub", (a, b), out, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    out = ad * bd
    return _emit(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(in,)`` or ``(rows, in)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", inputs, out, backward_fn)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    note_branch("relu", mask, float(np.min(np.abs(xd))) if xd.size else math.inf)
    return _emit("relu", (x,), np.where(mask, xd, 0).astype(xd.dtype), lambda g: (g * mask,))


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def backward_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), out, backward_fn)


def tmean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / count)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (no gradient to index)."""
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape
    out = np.take(x.data, idx, axis=axis)

    def backward_fn(g):
        grad = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, idx.ravel(), np.moveaxis(g, axis, 0).reshape((idx.size,) + moved.shape[1:]))
        return (grad,)

    return _emit("take", (x,), out, backward_fn)


def segment_mean(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Row-wise mean of ``x`` per segment id; segments with no rows give zeros."""
    ids = np.asarray(segment_ids, dtype=np.intp)
    if x.ndim != 2 or ids.shape != (x.shape[0],):
        raise DimensionError(f"segment_mean: ids {ids.shape} do not index rows of {x.shape}")
    counts = np.bincount(ids, minlength=num_segments)[:num_segments]
    out = np.zeros((num_segments, x.shape[1]), dtype=x.dtype)
    np.add.at(out, ids, x.data)
    present = counts > 0
    out[present] /= counts[present, None].astype(x.dtype)

    def backward_fn(g):
        scale = np.zeros(num_segments, dtype=g.dtype)
        scale[present] = 1.0 / counts[present]
        return (g[ids] * scale[ids, None],)

    return _emit("segment_mean", (x,), out, backward_fn)


def segment_max(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Element-wise max of rows per segment; gradient routes to the first argmax."""
    ids = np.asarray(segment_ids, dtype=np.intp)
    xd = x.data
    out = np.empty((num_segments, xd.shape[1]), dtype=xd.dtype)
    winners = np.empty((num_segments, xd.shape[1]), dtype=np.intp)
    for s in range(num_segments):
        rows = np.flatnonzero(ids == s)
        if rows.size == 0:
            raise DomainError(f"segment_max: segment {s} is empty")
        arg = np.argmax(xd[rows], axis=0)
        winners[s] = rows[arg]
        out[s] = xd[winners[s], np.arange(xd.shape[1])]
    note_branch("segment_max", winners)

    def backward_fn(g):
        grad = np.zeros_like(xd, dtype=g.dtype)
        cols = np.broadcast_to(np.arange(xd.shape[1]), winners.shape)
        np.add.at(grad, (winners.ravel(), cols.ravel()), g.ravel())
        return (grad,)

    return _emit("segment_max", (x,), out, backward_fn)


def _row_mean_above_mean(col: np.ndarray) -> tuple[float, np.ndarray]:
    # exact: every float is an integer over a power of two, so scale the column
    # to a common denominator and stay in Python ints until one final division
    ratios = [v.as_integer_ratio() for v in col.tolist()]
    denom = max(d for _, d in ratios)
    nums = [n * (denom // d) for n, d in ratios]
    total, count = sum(nums), len(nums)
    mask = np.array([count * n >= total for n in nums])
    selected = [n for n, keep in zip(nums, mask.tolist()) if keep]
    return sum(selected) / (len(selected) * denom), mask


def mil_pool(scores: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
    """Average of the clip scores that are at least the per-class mean.

    ``scores`` is ``(T, C)`` for one video, or the row-concatenation of several
    videos with ``lengths`` giving each video's clip count; the result is
    ``(C,)`` or ``(len(lengths), C)``. The mean test and the average are
    evaluated in exact arithmetic and rounded once, so the result does not
    depend on clip order. The selection mask is constant for
    differentiation.
    """
    sd = scores.data
    if sd.ndim != 2 or sd.shape[0] < 1:
        raise DimensionError(f"mil_pool: expected (T>=1, C) scores, got {sd.shape}")
    single = lengths is None
    lengths = [sd.shape[0]] if single else list(lengths)
    if sum(lengths) != sd.shape[0] or min(lengths) < 1:
        raise DimensionError(f"mil_pool: lengths {lengths} do not partition {sd.shape[0]} rows")
    n_cls = sd.shape[1]
    out = np.empty((len(lengths), n_cls), dtype=sd.dtype)
    weights = np.zeros_like(sd)
    start = 0
    for b, length in enumerate(lengths):
        block = sd[start:start + length]
        for j in range(n_cls):
            value, mask = _row_mean_above_mean(block[:, j])
            out[b, j] = value
            weights[start:start + length, j] = mask / mask.sum()
        start += length
    note_branch("mil_pool", weights > 0)
    seg = np.repeat(np.arange(len(lengths)), lengths)

    def backward_fn(g):
        return (g[seg] * weights,)

    result = _emit("mil_pool", (scores,), out, backward_fn)
    if single:
        return take(result, 0) if result.requires_grad else Tensor(out[0], dtype=out.dtype)
    return result


def softmax_cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Cross entropy of softmax(logits) against integer class targets.

    1-D ``logits`` with a scalar target gives one loss. 2-D ``logits`` with a
    target per row gives the mean over rows, or ``sum(weights * loss)`` when
    per-row ``weights`` are supplied.
    """
    ld = logits.data
    single = ld.ndim == 1
    l2 = ld[None, :] if single else ld
    tgt = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if tgt.shape != (l2.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: {tgt.shape[0]} targets for {l2.shape[0]} rows")
    if np.any(tgt < 0) or np.any(tgt >= l2.shape[1]):
        raise IndexError(f"softmax_cross_entropy: target out of range [0, {l2.shape[1]})")
    if weights is None:
        w = np.full(l2.shape[0], 1.0 / l2.shape[0], dtype=ld.dtype)
    else:
        w = np.asarray(weights, dtype=ld.dtype)
    shifted = l2 - l2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(l2.shape[0])
    per_row = lse - shifted[rows, tgt]
    out = np.asarray(np.dot(w, per_row), dtype=ld.dtype)

    def backward_fn(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, tgt] -= 1.0
        grad = probs * (w * g)[:, None]
        return (grad[0] if single else grad,)

    return _emit("softmax_cross_entropy", (logits,), out, backward_fn)


def bce_with_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Binary cross entropy on logits, ``max(z,0) - z*t + log(1+exp(-|z|))``.

    Returns the mean over all entries, or ``sum(weights * loss)``.
    """
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise DimensionError(f"bce_with_logits: targets {t.shape} vs logits {z.shape}")
    if weights is None:
        w = np.full(z.shape, 1.0 / max(z.size, 1), dtype=z.dtype)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=z.dtype), z.shape)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(np.sum(w * per), dtype=z.dtype)

    def backward_fn(g):
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((sig - t) * w * g,)

    return _emit("bce_with_logits", (logits,), out, backward_fn)


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """``1 - cos(a, b)`` along the last axis (rows are paired)."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise DimensionError(f"cosine_distance: shapes {ad.shape} and {bd.shape} differ")
    na = np.linalg.norm(ad, axis=-1)
    nb = np.linalg.norm(bd, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DomainError("cosine_distance: zero-norm input")
    dot = np.sum(ad * bd, axis=-1)
    denom = na * nb
    out = np.asarray(1.0 - dot / denom, dtype=ad.dtype)

    def backward_fn(g):
        g = np.asarray(g)[..., None]
        cos = (dot / denom)[..., None]
        ga = -(bd / denom[..., None] - cos * ad / (na ** 2)[..., None]) * g
        gb = -(ad / denom[..., None] - cos * bd / (nb ** 2)[..., None]) * g
        return ga, gb

    return _emit("cosine_distance", (a, b), out, backward_fn)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """``||a - b||`` along the last axis; gradient taken as zero where a == b."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise DimensionError(f"euclidean_distance: shapes {ad.shape} and {bd.shape} differ")
    diff = ad - bd
    norm = np.linalg.norm(diff, axis=-1)
    out = np.asarray(norm, dtype=ad.dtype)

    def backward_fn(g):
        safe = np.where(norm > 0, norm, 1.0)[..., None]
        unit = np.where(norm[..., None] > 0, diff / safe, 0.0)
        ga = unit * np.asarray(g)[..., None]
        return ga, -ga

    return _emit("euclidean_distance", (a, b), out, backward_fn)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equally-shaped tensors along a new leading axis."""
    datas = [r.data for r in rows]
    out = np.stack(datas)
    return _emit("stack", tuple(rows), out, lambda g: tuple(g[i] for i in range(len(rows))))


# --- backward ---------------------------------------------------------------

class GradientSet(dict):
    """Mapping from parameter key to a gradient array of the parameter's shape."""


def backward(tape: Tape, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> GradientSet:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    With ``params`` the result is keyed by the mapping's keys and every entry is
    present (zeros where unreachable). Without it, it is keyed by ``node_id``
    for every ``requires_grad`` leaf reachable on the tape.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape._consumed:
        raise ContractError("backward: tape already consumed; run a new forward pass")
    tape._consumed = True

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    produced = {r.output.node_id for r in tape.records}
    leaves: Dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if not inp.requires_grad or gi is None:
                continue
            if inp.node_id not in produced:
                leaves[inp.node_id] = inp
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = gi if prev is None else prev + gi
    if loss.node_id not in produced and loss.requires_grad:
        leaves[loss.node_id] = loss

    if params is None:
        return GradientSet({nid: np.asarray(grads[nid], dtype=t.dtype).reshape(t.shape)
                            for nid, t in leaves.items()})
    out = GradientSet()
    for key, p in params.items():
        g = grads.get(p.node_id)
        out[key] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out


# --- finite-difference verification -------------------------------------------

def gradient_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
                   num_samples: int = 40, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` builds a fresh forward pass from the (float64) ``params``, which
    are perturbed in place one sampled coordinate at a time and restored.
    Coordinates whose perturbation flips a non-smooth decision, or that sit
    within ``10 * eps`` of a relu kink, are skipped.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"gradient_check: eps {eps} outside [1e-6, 1e-3]")
    for key, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"gradient_check: parameter {key!r} is not float64")

    def evaluate():
        _local.branches = []
        try:
            value = float(loss_fn().data)
        finally:
            branches, _local.branches = _local.branches, None
        return value, branches

    def margin(branches):
        return min((m for _, _, m in branches), default=math.inf)

    base, base_branches = evaluate()
    again, _ = evaluate()
    if base != again:
        raise ContractError("gradient_check: loss function is not deterministic")
    decisions = [(k, d) for k, d, _ in base_branches]
    kink = 10 * eps
    with Tape() as tape:
        loss = loss_fn()
    analytic = backward(tape, loss, params)

    rng = np.random.default_rng(seed)
    keys = list(params)
    sizes = np.array([params[k].data.size for k in keys])
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < num_samples and attempts < 20 * num_samples:
        attempts += 1
        key = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
        flat = params[key].data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + eps
        f_plus, br_plus = evaluate()
        flat[i] = orig - eps
        f_minus, br_minus = evaluate()
        flat[i] = orig
        if [(k, d) for k, d, _ in br_plus] != decisions or [(k, d) for k, d, _ in br_minus] != decisions:
            continue
        if min(margin(br_plus), margin(br_minus)) < kink <= margin(base_branches):
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        a = float(analytic[key].reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
        checked += 1
    if checked == 0:
        raise ContractError("gradient_check: every sampled coordinate crossed a kink")
    return worst
