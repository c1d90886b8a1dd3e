"""Tape-based reverse-mode differentiation over numpy arrays.

Only the operations needed by the reconstruction graph are provided. Complex
quantities are carried as real arrays with a leading axis of length 2
holding (real, imaginary), so every node value is a real ndarray.

Typical use::

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    x = tape.const(coords)
    y = tape.affine(x, w, tape.leaf(np.zeros(3)))
    loss = tape.l1(tape.sin(y))
    grads = backward(tape, loss)   # {leaf id: dloss/dleaf}
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OP_KINDS = (
    "leaf",
    "affine",
    "sin",
    "relu",
    "add",
    "sub",
    "scalar-mul",
    "elementwise-mul",
    "complex-mul",
    "fft2-unitary",
    "ifft2-unitary",
    "mask-select",
    "abs-l1-sum",
    "sum",
    "forward-diff-x",
    "forward-diff-y",
    "reshape",
    "pair",
    "monomial-basis-apply",
)

# ops whose derivative jumps where their input crosses zero
NONSMOOTH_KINDS = ("abs-l1-sum", "relu")


class ShapeError(ValueError):
    """Inputs to an operation have incompatible shapes."""


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attrs: dict = field(default_factory=dict)


def _check_same(kind, *arrays):
    shapes = [a.shape for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ShapeError(f"{kind}: input shapes differ: {shapes}")


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_complex(x):
    return x[0] + 1j * x[1]


def _as_pair(z, dtype):
    return np.stack([z.real, z.imag]).astype(dtype, copy=False)


def _fft2(x, inverse=False):
    fn = np.fft.ifft2 if inverse else np.fft.fft2
    return _as_pair(fn(_as_complex(x), norm="ortho"), x.dtype)


def _fwd_diff(x, axis):
    out = np.zeros_like(x)
    n = x.shape[axis]
    lead = [slice(None)] * x.ndim
    tail = [slice(None)] * x.ndim
    lead[axis] = slice(0, n - 1)
    tail[axis] = slice(1, n)
    out[tuple(lead)] = x[tuple(tail)] - x[tuple(lead)]
    return out


def _fwd_diff_adjoint(g, axis):
    out = np.zeros_like(g)
    n = g.shape[axis]
    head = [slice(None)] * g.ndim
    body = [slice(None)] * g.ndim
    head[axis] = slice(1, n)
    body[axis] = slice(0, n - 1)
    out[tuple(head)] += g[tuple(body)]
    out[tuple(body)] -= g[tuple(body)]
    return out


# ---------------------------------------------------------------------------
# forward rules: (input values, attrs) -> output value
# ---------------------------------------------------------------------------

def _f_affine(vals, attrs):
    x, w, b = vals
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine: expected x 2-D, W 2-D, b 1-D; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"affine: x {x.shape} @ W.T {w.shape[::-1]} + b {b.shape} mismatch")
    return x @ w.T + b


def _f_cmul(vals, attrs):
    a, b = vals
    if a.shape[0] != 2 or b.shape[0] != 2:
        raise ShapeError(f"complex-mul: inputs must have leading (re, im) axis, got {a.shape}, {b.shape}")
    _check_broadcast("complex-mul", a, b)
    return np.stack([a[0] * b[0] - a[1] * b[1], a[0] * b[1] + a[1] * b[0]])


def _f_fft(vals, attrs, inverse=False):
    (x,) = vals
    if x.ndim < 3 or x.shape[0] != 2:
        raise ShapeError(f"fft2: expected (2, ..., d1, d2), got {x.shape}")
    return _fft2(x, inverse)


def _f_mask(vals, attrs):
    (x,) = vals
    m = attrs["mask"]
    if x.shape[-m.ndim:] != m.shape:
        raise ShapeError(f"mask-select: mask {m.shape} does not match trailing dims of {x.shape}")
    return x * m


def _f_add(vals, attrs):
    a, b = vals
    _check_broadcast("add", a, b)
    return a + b


def _f_sub(vals, attrs):
    a, b = vals
    _check_broadcast("sub", a, b)
    return a - b


def _f_mul(vals, attrs):
    a, b = vals
    _check_broadcast("elementwise-mul", a, b)
    return a * b


def _f_pair(vals, attrs):
    re, im = vals
    _check_same("pair", re, im)
    return np.stack([re, im])


def _f_reshape(vals, attrs):
    (x,) = vals
    shape = attrs["shape"]
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def _f_diff(vals, attrs, axis):
    (x,) = vals
    if x.ndim < 2:
        raise ShapeError(f"forward-diff: need at least 2-D input, got {x.shape}")
    return _fwd_diff(x, axis)


def _f_poly(vals, attrs):
    (c,) = vals
    basis = attrs["basis"]
    if c.ndim != 3 or c.shape[1] != 2 or c.shape[2] != basis.shape[1]:
        raise ShapeError(
            f"monomial-basis-apply: coefficients {c.shape} incompatible with basis {basis.shape}")
    # (coil, part, k) x (pixel, k) -> (part, coil, pixel)
    return np.einsum("cpk,nk->pcn", c, basis)


_FORWARD = {
    "affine": _f_affine,
    "sin": lambda v, a: np.sin(v[0]),
    "relu": lambda v, a: np.maximum(v[0], 0),
    "add": _f_add,
    "sub": _f_sub,
    "scalar-mul": lambda v, a: v[0] * v[0].dtype.type(a["scalar"]),
    "elementwise-mul": _f_mul,
    "complex-mul": _f_cmul,
    "fft2-unitary": lambda v, a: _f_fft(v, a, inverse=False),
    "ifft2-unitary": lambda v, a: _f_fft(v, a, inverse=True),
    "mask-select": _f_mask,
    "abs-l1-sum": lambda v, a: np.abs(v[0]).sum(),
    "sum": lambda v, a: v[0].sum(),
    "forward-diff-x": lambda v, a: _f_diff(v, a, -2),
    "forward-diff-y": lambda v, a: _f_diff(v, a, -1),
    "reshape": _f_reshape,
    "pair": _f_pair,
    "monomial-basis-apply": _f_poly,
}


# ---------------------------------------------------------------------------
# backward rules: (output grad, input values, output value, attrs, needs) -> input grads
# ---------------------------------------------------------------------------

def _b_affine(g, vals, out, attrs, needs):
    x, w, b = vals
    return (
        g @ w if needs[0] else None,
        g.T @ x if needs[1] else None,
        g.sum(axis=0) if needs[2] else None,
    )


def _b_cmul(g, vals, out, attrs, needs):
    a, b = vals
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(np.stack([g[0] * b[0] + g[1] * b[1], g[1] * b[0] - g[0] * b[1]]), a.shape)
    if needs[1]:
        gb = _unbroadcast(np.stack([g[0] * a[0] + g[1] * a[1], g[1] * a[0] - g[0] * a[1]]), b.shape)
    return ga, gb


def _b_mul(g, vals, out, attrs, needs):
    a, b = vals
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def _b_l1(g, vals, out, attrs, needs):
    # sign(0) = 0 subgradient
    return (np.sign(vals[0]) * g,)


_BACKWARD = {
    "affine": _b_affine,
    "sin": lambda g, v, o, a, n: (g * np.cos(v[0]),),
    "relu": lambda g, v, o, a, n: (g * (v[0] > 0),),
    "add": lambda g, v, o, a, n: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    "sub": lambda g, v, o, a, n: (_unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)),
    "scalar-mul": lambda g, v, o, a, n: (g * g.dtype.type(a["scalar"]),),
    "elementwise-mul": _b_mul,
    "complex-mul": _b_cmul,
    # unitary transforms: the adjoint is the inverse
    "fft2-unitary": lambda g, v, o, a, n: (_fft2(g, inverse=True),),
    "ifft2-unitary": lambda g, v, o, a, n: (_fft2(g, inverse=False),),
    "mask-select": lambda g, v, o, a, n: (g * a["mask"],),
    "abs-l1-sum": _b_l1,
    "sum": lambda g, v, o, a, n: (np.full_like(v[0], g),),
    "forward-diff-x": lambda g, v, o, a, n: (_fwd_diff_adjoint(g, -2),),
    "forward-diff-y": lambda g, v, o, a, n: (_fwd_diff_adjoint(g, -1),),
    "reshape": lambda g, v, o, a, n: (g.reshape(v[0].shape),),
    "pair": lambda g, v, o, a, n: (g[0], g[1]),
    "monomial-basis-apply": lambda g, v, o, a, n: (np.einsum("pcn,nk->cpk", g, a["basis"]),),
}


class Tape:
    """Records operations in execution order; node ids index ``self.nodes``."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- construction ------------------------------------------------------
    def leaf(self, value, requires_grad=True) -> int:
        value = np.asarray(value)
        if not np.all(np.isfinite(value)):
            raise ValueError("leaf values must be finite")
        self.nodes.append(Node("leaf", (), value, requires_grad))
        return len(self.nodes) - 1

    def const(self, value) -> int:
        return self.leaf(value, requires_grad=False)

    def record(self, kind: str, inputs, **attrs) -> int:
        """Apply op ``kind`` to the given node ids and append the result."""
        if kind not in _FORWARD:
            raise ValueError(f"unknown op kind {kind!r}")
        inputs = tuple(int(i) for i in inputs)
        if any(i < 0 or i >= len(self.nodes) for i in inputs):
            raise ValueError(f"{kind}: input ids {inputs} out of range")
        value = _FORWARD[kind]([self.nodes[i].value for i in inputs], attrs)
        req = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(kind, inputs, np.asarray(value), req, attrs))
        return len(self.nodes) - 1

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf" and n.requires_grad]

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> None:
        """Recompute every node in order, optionally replacing leaf values."""
        for i, node in enumerate(self.nodes):
            if node.kind == "leaf":
                if overrides and i in overrides:
                    node.value = np.asarray(overrides[i])
                continue
            node.value = np.asarray(
                _FORWARD[node.kind]([self.nodes[j].value for j in node.inputs], node.attrs))

    # -- op shorthands -----------------------------------------------------
    def affine(self, x, w, b):
        return self.record("affine", (x, w, b))

    def sin(self, x):
        return self.record("sin", (x,))

    def relu(self, x):
        return self.record("relu", (x,))

    def add(self, a, b):
        return self.record("add", (a, b))

    def sub(self, a, b):
        return self.record("sub", (a, b))

    def scale(self, x, s):
        return self.record("scalar-mul", (x,), scalar=float(s))

    def mul(self, a, b):
        return self.record("elementwise-mul", (a, b))

    def cmul(self, a, b):
        return self.record("complex-mul", (a, b))

    def fft2(self, x):
        return self.record("fft2-unitary", (x,))

    def ifft2(self, x):
        return self.record("ifft2-unitary", (x,))

    def mask(self, x, mask):
        return self.record("mask-select", (x,), mask=np.asarray(mask))

    def l1(self, x):
        return self.record("abs-l1-sum", (x,))

    def total(self, x):
        return self.record("sum", (x,))

    def diff_x(self, x):
        return self.record("forward-diff-x", (x,))

    def diff_y(self, x):
        return self.record("forward-diff-y", (x,))

    def reshape(self, x, shape):
        return self.record("reshape", (x,), shape=tuple(shape))

    def pair(self, re, im):
        return self.record("pair", (re, im))

    def poly(self, coeffs, basis):
        return self.record("monomial-basis-apply", (coeffs,), basis=np.asarray(basis))


def backward(tape: Tape, loss: int) -> dict[int, np.ndarray]:
    """Gradient of a scalar node with respect to every differentiable leaf.

    Leaves the loss does not depend on get a zero gradient.
    """
    out = tape.nodes[loss].value
    if out.size != 1 or out.ndim != 0:
        raise ValueError(f"backward needs a scalar loss node, node {loss} has shape {out.shape}")
    grads: dict[int, np.ndarray] = {loss: np.ones_like(out)}
    for i in range(loss, -1, -1):
        node = tape.nodes[i]
        g = grads.pop(i, None) if node.kind != "leaf" else grads.get(i)
        if g is None or node.kind == "leaf" or not node.requires_grad:
            continue
        vals = [tape.nodes[j].value for j in node.inputs]
        needs = [tape.nodes[j].requires_grad for j in node.inputs]
        for j, gj, need in zip(node.inputs, _BACKWARD[node.kind](g, vals, node.value, node.attrs, needs), needs):
            if not need or gj is None:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
    return {i: grads.get(i, np.zeros_like(tape.nodes[i].value)) for i in tape.leaves()}


@dataclass
class FDResult:
    max_rel_error: float
    worst: tuple[int, tuple[int, ...]] | None
    checked: int
    kinks: int = 0


def _kink_signature(tape: Tape):
    return [np.signbit(tape.nodes[n.inputs[0]].value) | (tape.nodes[n.inputs[0]].value == 0)
            for n in tape.nodes if n.kind in NONSMOOTH_KINDS]


def finite_difference_check(tape: Tape, loss: int, leaves=None, step: float = 1e-6,
                            entries: int | None = None, seed: int = 0,
                            max_refine: int = 3) -> FDResult:
    """Compare analytic gradients with central differences.

    ``entries`` limits the check to that many randomly drawn (leaf, index)
    pairs; ``None`` checks everything. When the +/- evaluations land on
    different sides of an |.| or relu kink, the step is shrunk by 10 up to
    ``max_refine`` times; entries that still straddle a kink are skipped
    and counted in ``kinks``. Relative error is |a - n| / max(|a|, |n|),
    defined as 0 when both vanish.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = tape.leaves() if leaves is None else list(leaves)
    grads = backward(tape, loss)
    pool = [(leaf, idx) for leaf in leaves for idx in np.ndindex(tape.value(leaf).shape)]
    if entries is not None and entries < len(pool):
        rng = np.random.default_rng(seed)
        pool = [pool[k] for k in sorted(rng.choice(len(pool), size=entries, replace=False))]

    base = {leaf: tape.value(leaf).copy() for leaf in leaves}

    def evaluate(leaf, idx, delta):
        x = base[leaf].copy()
        x[idx] += delta
        tape.replay({**base, leaf: x})
        return float(tape.value(loss)), _kink_signature(tape)

    worst, worst_at, kinks = 0.0, None, 0
    try:
        for leaf, idx in pool:
            h = step
            for _ in range(max_refine + 1):
                fp, sp = evaluate(leaf, idx, h)
                fm, sm = evaluate(leaf, idx, -h)
                smooth = all(np.array_equal(a, b) for a, b in zip(sp, sm))
                if smooth:
                    break
                h /= 10
            if not smooth:
                kinks += 1
                continue
            num = (fp - fm) / (2 * h)
            ana = float(grads[leaf][idx])
            denom = max(abs(ana), abs(num))
            rel = 0.0 if denom == 0 else abs(ana - num) / denom
            if rel > worst or worst_at is None:
                worst, worst_at = max(rel, worst), (leaf, idx)
    finally:
        tape.replay(base)
    return FDResult(worst, worst_at, len(pool) - kinks, kinks)
