"""Dense-tensor numerical core with reverse-mode automatic differentiation.

Computation is recorded on an append-only tape: every operation appends one
node holding the numpy output plus a vector-Jacobian closure. Node inputs
always precede outputs in the tape, so the graph is acyclic by construction
and a single reverse sweep implements backpropagation.

Operands may be `Tensor` handles (tracked, receive gradients) or plain
numpy arrays / scalars (baked into the op as constants, never receive
gradients). Baking is how frozen quantities — teacher weights, dropout
masks, interpolation offsets — stay out of the gradient map entirely.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


DEFAULT_DTYPE = np.float64

_GELU_C = 0.7978845608028654      # sqrt(2 / pi)
_GELU_A = 0.044715


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeMismatch(TensorError):
    """Operands do not conform; message names both shapes."""


class NumericError(TensorError):
    """Non-finite value produced in debug evaluation mode."""


class InputError(TensorError):
    """Operand violates an operation precondition (e.g. unnormalized distribution)."""


class UsageError(TensorError):
    """API misuse, e.g. backward from a non-scalar root."""


class _Node:
    __slots__ = ("op", "inputs", "value", "vjp", "trainable")

    def __init__(self, op, inputs, value, vjp, trainable=False):
        self.op = op
        self.inputs = inputs          # node ids of tracked operands
        self.value = value            # np.ndarray output
        self.vjp = vjp                # grad_out -> list of grads aligned with inputs
        self.trainable = trainable    # meaningful for leaves only


class Tensor:
    """Handle onto one tape node. Immutable view of the node's value."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(nid={self.nid}, shape={self.shape})"


class Tape:
    """Append-only computation graph, rebuilt per training step.

    Single-threaded construction; distinct tapes may be evaluated in
    parallel. With debug=True every node output is checked for NaN/Inf
    and a NumericError naming the node is raised on failure.
    """

    def __init__(self, debug: bool = False):
        self.nodes: list[_Node] = []
        self.debug = debug

    def _append(self, op, inputs, value, vjp, trainable=False) -> Tensor:
        value = np.asarray(value)
        nid = len(self.nodes)
        if self.debug and not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite output at node {nid} (op {op!r})")
        self.nodes.append(_Node(op, inputs, value, vjp, trainable))
        return Tensor(self, nid)

    def leaf(self, value, trainable: bool = False) -> Tensor:
        return self._append("leaf", (), np.asarray(value), None, trainable=trainable)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar root.

        Returns node id -> gradient for every node reachable from the root;
        each gradient has the shape of the node's output.
        """
        if root.tape is not self:
            raise UsageError("root tensor belongs to a different tape")
        rv = root.value
        if rv.size != 1:
            raise UsageError(f"backward requires a scalar root, got shape {rv.shape}")
        grads: dict[int, np.ndarray] = {root.nid: np.ones_like(rv)}
        for nid in range(root.nid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            for in_id, in_grad in zip(node.inputs, node.vjp(g)):
                if in_grad is None:
                    continue
                acc = grads.get(in_id)
                if acc is None:
                    grads[in_id] = in_grad
                else:
                    grads[in_id] = acc + in_grad
        return grads


def _operands(op_name, args):
    """Split operands into (tape, values, node ids). Arrays pass as constants."""
    tape = None
    values, nids = [], []
    for a in args:
        if isinstance(a, Tensor):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise UsageError(f"{op_name}: operands live on different tapes")
            values.append(a.value)
            nids.append(a.nid)
        else:
            values.append(np.asarray(a))
            nids.append(None)
    if tape is None:
        raise UsageError(f"{op_name}: at least one operand must be a Tensor")
    return tape, values, nids


def _register(tape, op, nids, value, partial_vjps):
    """Append a node, dropping gradient slots for constant operands."""
    tracked = [i for i, nid in enumerate(nids) if nid is not None]
    inputs = tuple(nids[i] for i in tracked)

    def vjp(g):
        return [partial_vjps[i](g) for i in tracked]

    return tape._append(op, inputs, value, vjp)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise kernels


def add(a, b):
    tape, (av, bv), nids = _operands("add", (a, b))
    try:
        out = av + bv
    except ValueError:
        raise ShapeMismatch(f"add: shapes {av.shape} and {bv.shape} do not broadcast")
    return _register(tape, "add", nids, out,
                     [lambda g: _unbroadcast(g, av.shape),
                      lambda g: _unbroadcast(g, bv.shape)])


def sub(a, b):
    tape, (av, bv), nids = _operands("sub", (a, b))
    try:
        out = av - bv
    except ValueError:
        raise ShapeMismatch(f"sub: shapes {av.shape} and {bv.shape} do not broadcast")
    return _register(tape, "sub", nids, out,
                     [lambda g: _unbroadcast(g, av.shape),
                      lambda g: _unbroadcast(-g, bv.shape)])


def mul(a, b):
    tape, (av, bv), nids = _operands("mul", (a, b))
    try:
        out = av * bv
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {av.shape} and {bv.shape} do not broadcast")
    return _register(tape, "mul", nids, out,
                     [lambda g: _unbroadcast(g * bv, av.shape),
                      lambda g: _unbroadcast(g * av, bv.shape)])


def scale(a: Tensor, c: float):
    tape, (av,), nids = _operands("scale", (a,))
    c = float(c)
    return _register(tape, "scale", nids, av * c, [lambda g: g * c])


def affine(a: Tensor, coeff: float, shift):
    """shift + coeff * a, with `shift` baked as a constant offset."""
    tape, (av,), nids = _operands("affine", (a,))
    coeff = float(coeff)
    shift = np.asarray(shift)
    if shift.shape != av.shape:
        raise ShapeMismatch(f"affine: shift shape {shift.shape} != operand shape {av.shape}")
    return _register(tape, "affine", nids, shift + coeff * av, [lambda g: g * coeff])


def gelu_values(x: np.ndarray) -> np.ndarray:
    """Plain-array gelu, shared by the kernel and untaped code paths.

    Uses the tanh approximation 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)));
    its own derivative is what the gradient checks verify.
    """
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return x * (0.5 * (1.0 + t))


def gelu(a):
    """Gaussian-error-linear unit (tanh approximation)."""
    tape, (av,), nids = _operands("gelu", (a,))
    t = np.tanh(_GELU_C * (av + _GELU_A * av * av * av))
    half_1pt = 0.5 * (1.0 + t)
    out = av * half_1pt

    def da(g):
        sech2 = 1.0 - t * t
        inner = _GELU_C * (1.0 + 3.0 * _GELU_A * av * av)
        return g * (half_1pt + 0.5 * av * sech2 * inner)

    return _register(tape, "gelu", nids, out, [da])


# ---------------------------------------------------------------------------
# structural kernels


def matmul(a, b):
    tape, (av, bv), nids = _operands("matmul", (a, b))
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be >= 2-D, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {av.shape} and {bv.shape} are not conformable")
    out = np.matmul(av, bv)

    def da(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        return _unbroadcast(ga, av.shape)

    def db(g):
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(gb, bv.shape)

    return _register(tape, "matmul", nids, out, [da, db])


def transpose(a: Tensor, axes):
    tape, (av,), nids = _operands("transpose", (a,))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _register(tape, "transpose", nids, np.transpose(av, axes),
                     [lambda g: np.transpose(g, inv)])


def reshape(a: Tensor, shape):
    tape, (av,), nids = _operands("reshape", (a,))
    shape = tuple(shape)
    return _register(tape, "reshape", nids, av.reshape(shape),
                     [lambda g: g.reshape(av.shape)])


def take_rows(a, ids):
    """Gather rows along axis 0; adjoint scatter-adds into the table."""
    tape, (av,), nids = _operands("take_rows", (a,))
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ShapeMismatch(f"take_rows: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= av.shape[0]):
        raise InputError(f"take_rows: id out of range [0, {av.shape[0]})")
    out = av[ids]

    def da(g):
        acc = np.zeros_like(av)
        np.add.at(acc, ids, g)
        return acc

    return _register(tape, "take_rows", nids, out, [da])


def embedding_lookup(table, ids):
    """Look up rows of `table` for integer `ids` of any shape."""
    ids = np.asarray(ids)
    flat = take_rows(table, ids.reshape(-1))
    table_v = table.value if isinstance(table, Tensor) else np.asarray(table)
    return reshape(flat, ids.shape + table_v.shape[1:])


def slice1d(a: Tensor, start: int, stop: int):
    tape, (av,), nids = _operands("slice1d", (a,))
    if av.ndim != 1:
        raise ShapeMismatch(f"slice1d: operand must be 1-D, got shape {av.shape}")

    def da(g):
        acc = np.zeros_like(av)
        acc[start:stop] = g
        return acc

    return _register(tape, "slice1d", nids, av[start:stop], [da])


# ---------------------------------------------------------------------------
# normalization kernels


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    if eps < 0:
        raise InputError("layer_norm: eps must be >= 0")
    tape, (xv, gv, bv), nids = _operands("layer_norm", (x, gain, bias))
    d = xv.shape[-1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gain/bias shapes {gv.shape}/{bv.shape} do not match last axis ({d},)")
    mean = xv.mean(axis=-1, keepdims=True)
    centered = xv - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out = gv * y + bv

    def dx(g):
        gy = g * gv
        return inv * (gy - gy.mean(axis=-1, keepdims=True)
                      - y * np.mean(gy * y, axis=-1, keepdims=True))

    return _register(tape, "layer_norm", nids, out,
                     [dx,
                      lambda g: (g * y).reshape(-1, d).sum(axis=0),
                      lambda g: g.reshape(-1, d).sum(axis=0)])


def softmax(x, axis: int = -1):
    """Row-stochastic softmax with max-subtraction stabilization."""
    tape, (xv,), nids = _operands("softmax", (x,))
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def dx(g):
        return p * (g - np.sum(g * p, axis=axis, keepdims=True))

    return _register(tape, "softmax", nids, p, [dx])


def log_softmax(x, axis: int = -1):
    tape, (xv,), nids = _operands("log_softmax", (x,))
    shifted = xv - xv.max(axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def dx(g):
        return g - p * g.sum(axis=axis, keepdims=True)

    return _register(tape, "log_softmax", nids, out, [dx])


def unit_normalize(x, eps: float = 1e-12):
    """Scale each last-axis vector to unit L2 norm."""
    tape, (xv,), nids = _operands("unit_normalize", (x,))
    norm = np.sqrt(np.sum(xv * xv, axis=-1, keepdims=True) + eps)
    y = xv / norm

    def dx(g):
        return (g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm

    return _register(tape, "unit_normalize", nids, y, [dx])


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor):
    tape, (xv,), nids = _operands("sum_all", (x,))
    return _register(tape, "sum_all", nids, xv.sum(),
                     [lambda g: np.broadcast_to(g, xv.shape).copy()])


def mean_all(x: Tensor):
    return scale(sum_all(x), 1.0 / x.value.size)


def cross_entropy(logits, target_id):
    """Mean negative log-likelihood of integer targets under the logits.

    Accepts (C,) logits with a scalar target or (N, C) with (N,) targets.
    """
    tape, (lv,), nids = _operands("cross_entropy", (logits,))
    squeeze = lv.ndim == 1
    lv2 = lv[None, :] if squeeze else lv
    targets = np.atleast_1d(np.asarray(target_id, dtype=np.int64))
    n, c = lv2.shape
    if targets.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: {n} logit rows but targets shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise InputError(f"cross_entropy: target out of range [0, {c})")
    m = lv2.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(lv2 - m), axis=1))
    picked = lv2[np.arange(n), targets]
    out = np.mean(lse - picked)

    def dl(g):
        p = np.exp(lv2 - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        p *= g / n
        return p[0] if squeeze else p

    return _register(tape, "cross_entropy", nids, out, [dl])


KL_PROB_FLOOR = 1e-12


def kl_divergence(p_teacher, log_q):
    """KL(p || q) from a constant teacher distribution to student log-probs.

    Teacher probabilities are clamped to >= 1e-12 before their log; the
    teacher side never receives gradients. 2-D inputs average over rows.
    """
    p = np.asarray(p_teacher, dtype=np.float64)
    if np.any(p < -1e-9):
        raise InputError("kl_divergence: teacher distribution has negative mass")
    sums = p.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= 1e-9):
        raise InputError(
            f"kl_divergence: teacher rows must sum to 1 +- 1e-9 (got sums in "
            f"[{sums.min():.3e}, {sums.max():.3e}])")
    tape, (lqv,), nids = _operands("kl_divergence", (log_q,))
    if p.shape != lqv.shape:
        raise ShapeMismatch(f"kl_divergence: shapes {p.shape} and {lqv.shape} differ")
    n_rows = 1 if p.ndim == 1 else int(np.prod(p.shape[:-1]))
    p_flr = np.maximum(p, KL_PROB_FLOOR)
    out = np.asarray(np.sum(p * (np.log(p_flr) - lqv)) / n_rows, dtype=lqv.dtype)
    p_cast = p.astype(lqv.dtype)  # keep student-side gradients in the graph dtype

    def dlq(g):
        return (-p_cast * g) / lqv.dtype.type(n_rows)

    return _register(tape, "kl_divergence", nids, out, [dlq])


def mse(a, b):
    """Mean squared elementwise difference."""
    d = sub(a, b)
    return mean_all(mul(d, d))


# ---------------------------------------------------------------------------
# gradient verification oracle


def finite_diff_check(f: Callable, params: Mapping[str, np.ndarray], h: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f(tape, tensors)` must build and return a scalar Tensor from a dict of
    leaf tensors mirroring `params`, deterministically. Error per coordinate
    is |analytic - numeric| / (|analytic| + |numeric| + 1e-12); the max over
    all checked coordinates is returned. With `max_coords`, a seeded random
    subset of coordinates per segment is checked instead of all of them.
    """
    if h <= 0:
        raise InputError("finite_diff_check: h must be > 0")
    # private copies: coordinates are perturbed in place during the sweep
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    tensors = {k: tape.leaf(v, trainable=True) for k, v in params.items()}
    root = f(tape, tensors)
    grads = tape.backward(root)
    analytic = {k: grads.get(tensors[k].nid, np.zeros_like(params[k])) for k in params}

    def value_at(perturbed):
        t = Tape()
        return float(f(t, {k: t.leaf(v) for k, v in perturbed.items()}).value)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = value_at(params)
            flat[i] = orig - h
            down = value_at(params)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
