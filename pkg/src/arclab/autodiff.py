"""Reverse-mode differentiation over the dense kernels.

A :class:`Tape` records primitive applications in topological order; each
node stores its forward value and a vector-Jacobian closure. Forward values
come from the exact same :mod:`arclab.kernel` functions the tape-free
:class:`Eager` backend calls, so a recorded forward is bitwise identical to
an unrecorded one. A parameter is a single leaf node: reusing it at many
graph sites (shared projections, a transposed twin) accumulates all site
contributions into one gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel
from .errors import GraphError, ShapeError


@dataclass(frozen=True)
class Var:
    """Handle to one tape node."""

    tape: "Tape"
    idx: int

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape


@dataclass
class _Node:
    value: np.ndarray
    parents: tuple[int, ...] = ()
    vjp: object = None  # callable(grad) -> tuple of parent grads; None for leaves


@dataclass
class _Param:
    idx: int
    trainable: bool


def _check_broadcast_add(a: np.ndarray, b: np.ndarray) -> bool:
    """True if b is a single row broadcast over a's rows; raises otherwise."""
    if a.shape == b.shape:
        return False
    if b.shape == (1, a.shape[1]):
        return True
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


class Tape:
    """Append-only record of a forward computation plus a parameter registry."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._params: dict[str, _Param] = {}

    # -- leaves ----------------------------------------------------------
    def parameter(self, name: str, value: np.ndarray, trainable: bool = True) -> Var:
        if name in self._params:
            raise GraphError(f"parameter {name!r} registered twice")
        var = self._leaf(value)
        self._params[name] = _Param(var.idx, trainable)
        return var

    def constant(self, value: np.ndarray) -> Var:
        return self._leaf(value)

    def _leaf(self, value) -> Var:
        node = _Node(kernel.as_matrix(value))
        self._nodes.append(node)
        return Var(self, len(self._nodes) - 1)

    def _record(self, value: np.ndarray, parents: tuple[Var, ...], vjp) -> Var:
        self._nodes.append(_Node(value, tuple(p.idx for p in parents), vjp))
        return Var(self, len(self._nodes) - 1)

    def _check(self, *operands):
        for p in operands:
            if not isinstance(p, Var) or p.tape is not self:
                raise GraphError(
                    "operand is not a node of this tape; wrap arrays via constant()/parameter()"
                )

    # -- primitives ------------------------------------------------------
    def matmul(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        out = kernel.matmul(a.value, b.value)
        av, bv = a.value, b.value

        def vjp(g):
            return g @ bv.T, av.T @ g

        return self._record(out, (a, b), vjp)

    def add(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        broadcast = _check_broadcast_add(a.value, b.value)
        out = a.value + b.value

        def vjp(g):
            return g, (g.sum(axis=0, keepdims=True) if broadcast else g)

        return self._record(out, (a, b), vjp)

    def scale(self, a: Var, c: float) -> Var:
        self._check(a)
        return self._record(a.value * c, (a,), lambda g: (g * c,))

    def transpose(self, a: Var) -> Var:
        self._check(a)
        return self._record(np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,))

    def layernorm(self, a: Var, gamma: Var, beta: Var, eps: float) -> Var:
        self._check(a, gamma, beta)
        out = kernel.layernorm(a.value, gamma.value, beta.value, eps)
        x = a.value
        g_row = gamma.value.reshape(1, -1)
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std

        def vjp(g):
            gg = g * g_row
            gx = inv_std * (
                gg
                - gg.mean(axis=1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=1, keepdims=True)
            )
            dgamma = (g * xhat).sum(axis=0, keepdims=True)
            dbeta = g.sum(axis=0, keepdims=True)
            return gx, dgamma.reshape(gamma.value.shape), dbeta.reshape(beta.value.shape)

        return self._record(out, (a, gamma, beta), vjp)

    def softmax_rows(self, a: Var) -> Var:
        self._check(a)
        out = kernel.softmax_rows(a.value)

        def vjp(g):
            inner = (g * out).sum(axis=1, keepdims=True)
            return ((g - inner) * out,)

        return self._record(out, (a,), vjp)

    def gelu(self, a: Var) -> Var:
        self._check(a)
        out = kernel.gelu(a.value)
        grad = kernel.gelu_grad(a.value)
        return self._record(out, (a,), lambda g: (g * grad,))

    def concat_rows(self, parts: list[Var]) -> Var:
        self._check(*parts)
        out = np.concatenate([p.value for p in parts], axis=0)
        sizes = [p.value.shape[0] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(sizes)))

        return self._record(out, tuple(parts), vjp)

    def concat_cols(self, parts: list[Var]) -> Var:
        self._check(*parts)
        out = np.concatenate([p.value for p in parts], axis=1)
        sizes = [p.value.shape[1] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(sizes)))

        return self._record(out, tuple(parts), vjp)

    def slice_rows(self, a: Var, start: int, stop: int) -> Var:
        self._check(a)
        out = a.value[start:stop].copy()
        shape = a.value.shape

        def vjp(g):
            full = np.zeros(shape)
            full[start:stop] = g
            return (full,)

        return self._record(out, (a,), vjp)

    def slice_cols(self, a: Var, start: int, stop: int) -> Var:
        self._check(a)
        out = a.value[:, start:stop].copy()
        shape = a.value.shape

        def vjp(g):
            full = np.zeros(shape)
            full[:, start:stop] = g
            return (full,)

        return self._record(out, (a,), vjp)

    def col_scale(self, a: Var, c: Var) -> Var:
        """a * c broadcast over rows: multiplies column j by c[0, j]."""
        self._check(a, c)
        c_row = c.value.reshape(1, -1)
        if c_row.shape[1] != a.value.shape[1]:
            raise ShapeError(f"col_scale width mismatch: {a.value.shape} vs {c.value.shape}")
        out = a.value * c_row
        av = a.value

        def vjp(g):
            return g * c_row, (g * av).sum(axis=0, keepdims=True).reshape(c.value.shape)

        return self._record(out, (a, c), vjp)

    def mul_mask(self, a: Var, mask: np.ndarray) -> Var:
        """Elementwise product with a fixed mask (saved, so backward is exact)."""
        self._check(a)
        if mask.shape != a.value.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match {a.value.shape}")
        mask = mask.copy()
        return self._record(a.value * mask, (a,), lambda g: (g * mask,))

    def mean(self, a: Var) -> Var:
        self._check(a)
        out = np.array([[a.value.mean()]])
        shape = a.value.shape
        size = a.value.size

        def vjp(g):
            return (np.full(shape, g[0, 0] / size),)

        return self._record(out, (a,), vjp)

    def cross_entropy(self, logits: Var, labels: np.ndarray) -> Var:
        self._check(logits)
        labels = np.asarray(labels)
        out = np.array([[kernel.cross_entropy(logits.value, labels)]])
        probs = kernel.softmax_rows(logits.value)
        n = logits.value.shape[0]

        def vjp(g):
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            return (d * (g[0, 0] / n),)

        return self._record(out, (logits,), vjp)


class Eager:
    """Tape-free twin of :class:`Tape`: same method surface over plain arrays."""

    @staticmethod
    def constant(value):
        return kernel.as_matrix(value)

    @staticmethod
    def matmul(a, b):
        return kernel.matmul(a, b)

    @staticmethod
    def add(a, b):
        _check_broadcast_add(a, b)
        return a + b

    @staticmethod
    def scale(a, c):
        return a * c

    @staticmethod
    def transpose(a):
        return np.ascontiguousarray(a.T)

    @staticmethod
    def layernorm(a, gamma, beta, eps):
        return kernel.layernorm(a, gamma, beta, eps)

    @staticmethod
    def softmax_rows(a):
        return kernel.softmax_rows(a)

    @staticmethod
    def gelu(a):
        return kernel.gelu(a)

    @staticmethod
    def concat_rows(parts):
        return np.concatenate(parts, axis=0)

    @staticmethod
    def concat_cols(parts):
        return np.concatenate(parts, axis=1)

    @staticmethod
    def slice_rows(a, start, stop):
        return a[start:stop].copy()

    @staticmethod
    def slice_cols(a, start, stop):
        return a[:, start:stop].copy()

    @staticmethod
    def col_scale(a, c):
        c_row = c.reshape(1, -1)
        if c_row.shape[1] != a.shape[1]:
            raise ShapeError(f"col_scale width mismatch: {a.shape} vs {c.shape}")
        return a * c_row

    @staticmethod
    def mul_mask(a, mask):
        if mask.shape != a.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match {a.shape}")
        return a * mask

    @staticmethod
    def mean(a):
        return np.array([[a.mean()]])

    @staticmethod
    def cross_entropy(logits, labels):
        return np.array([[kernel.cross_entropy(logits, np.asarray(labels))]])


def value_of(x) -> np.ndarray:
    """Forward value of a backend value (Var or plain array)."""
    return x.value if isinstance(x, Var) else x


def record_forward(tape: Tape, build):
    """Run ``build(tape)`` and return (output node, its scalar value)."""
    out = build(tape)
    if not isinstance(out, Var) or out.tape is not tape:
        raise GraphError("builder must return a node of the given tape")
    return out, float(out.value[0, 0]) if out.value.size == 1 else out.value


def backward(tape: Tape, out: Var) -> dict[str, np.ndarray]:
    """Accumulated gradients of a scalar output for every touched trainable.

    Visits nodes exactly once in reverse topological (id) order. A parameter
    used at several sites receives the sum of all site contributions.
    Frozen parameters never appear in the result.
    """
    if out.tape is not tape:
        raise GraphError("output node does not belong to this tape")
    if out.value.shape != (1, 1):
        raise GraphError(f"backward needs a scalar output, got shape {out.value.shape}")
    grads: dict[int, np.ndarray] = {out.idx: np.ones((1, 1))}
    for idx in range(out.idx, -1, -1):
        node = tape._nodes[idx]
        if node.vjp is None:
            continue
        g = grads.pop(idx, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent in grads:
                # out-of-place: a vjp may hand back views or shared buffers
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return {
        name: grads[p.idx]
        for name, p in tape._params.items()
        if p.trainable and p.idx in grads
    }


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between analytic and central differences."""

    errors: dict[str, float]
    tol: float
    h: float

    @property
    def max_rel_err(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        lines = [
            f"{name}: rel_err={err:.3e} {'ok' if err <= self.tol else 'FAIL'}"
            for name, err in sorted(self.errors.items())
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"gradcheck {verdict}: max rel err {self.max_rel_err:.3e} (tol {self.tol:g})")
        return "\n".join(lines)


def gradcheck(build, params: dict[str, np.ndarray], h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``build(tape, values)`` must register each entry of ``values`` it uses
    via ``tape.parameter(name, values[name], trainable=True)`` and return a
    scalar loss node, deterministically for fixed values. The relative error
    per entry uses denominator max(|analytic|, |numeric|, 1e-8). A parameter
    the loss never touches counts as an exact zero gradient.
    """
    tape = Tape()
    out = build(tape, params)
    analytic = backward(tape, out)

    def loss_at(values) -> float:
        t = Tape()
        o = build(t, values)
        return float(o.value[0, 0])

    errors: dict[str, float] = {}
    for name, base in params.items():
        ana = analytic.get(name, np.zeros_like(base))
        num = np.zeros_like(base)
        work = {k: (v.copy() if k == name else v) for k, v in params.items()}
        flat = work[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_at(work)
            flat[i] = orig - h
            f_minus = loss_at(work)
            flat[i] = orig
            num.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        errors[name] = float((np.abs(ana - num) / denom).max()) if base.size else 0.0
    return GradCheckReport(errors=errors, tol=tol, h=h)
