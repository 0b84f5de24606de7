"""
doawave — Forward-Mode Dual Numbers
Scalar duals (real and complex) and a numpy-backed dual array carrying one
tangent direction through complex linear algebra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

Number = Union[int, float]


# ── Scalars ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class DualReal:
    """value + deriv * eps, eps^2 = 0."""

    value: float
    deriv: float = 0.0

    @staticmethod
    def lift(x: Union["DualReal", Number]) -> "DualReal":
        return x if isinstance(x, DualReal) else DualReal(float(x), 0.0)

    def __add__(self, other):
        o = DualReal.lift(other)
        return DualReal(self.value + o.value, self.deriv + o.deriv)

    __radd__ = __add__

    def __sub__(self, other):
        o = DualReal.lift(other)
        return DualReal(self.value - o.value, self.deriv - o.deriv)

    def __rsub__(self, other):
        return DualReal.lift(other) - self

    def __neg__(self):
        return DualReal(-self.value, -self.deriv)

    def __mul__(self, other):
        o = DualReal.lift(other)
        return DualReal(self.value * o.value, self.value * o.deriv + self.deriv * o.value)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = DualReal.lift(other)
        if o.value == 0.0:
            raise ZeroDivisionError("dual division by a zero value")
        return DualReal(self.value / o.value,
                        (self.deriv * o.value - self.value * o.deriv) / (o.value * o.value))

    def __rtruediv__(self, other):
        return DualReal.lift(other) / self

    def __pow__(self, power: Number):
        return DualReal(self.value ** power, power * self.value ** (power - 1) * self.deriv)

    def exp(self):
        e = math.exp(self.value)
        return DualReal(e, e * self.deriv)

    def sin(self):
        return DualReal(math.sin(self.value), math.cos(self.value) * self.deriv)

    def cos(self):
        return DualReal(math.cos(self.value), -math.sin(self.value) * self.deriv)

    def sqrt(self):
        r = math.sqrt(self.value)
        return DualReal(r, 0.5 * self.deriv / r)

    def relu(self):
        # subgradient 0 at the kink
        return self if self.value > 0 else DualReal(0.0, 0.0)


@dataclass(frozen=True)
class DualComplex:
    re: DualReal
    im: DualReal

    @staticmethod
    def lift(x) -> "DualComplex":
        if isinstance(x, DualComplex):
            return x
        if isinstance(x, DualReal):
            return DualComplex(x, DualReal(0.0))
        z = complex(x)
        return DualComplex(DualReal(z.real), DualReal(z.imag))

    @staticmethod
    def expj(phase: DualReal) -> "DualComplex":
        """exp(j * phase)."""
        return DualComplex(phase.cos(), phase.sin())

    @property
    def value(self) -> complex:
        return complex(self.re.value, self.im.value)

    @property
    def deriv(self) -> complex:
        return complex(self.re.deriv, self.im.deriv)

    def __add__(self, other):
        o = DualComplex.lift(other)
        return DualComplex(self.re + o.re, self.im + o.im)

    __radd__ = __add__

    def __sub__(self, other):
        o = DualComplex.lift(other)
        return DualComplex(self.re - o.re, self.im - o.im)

    def __rsub__(self, other):
        return DualComplex.lift(other) - self

    def __neg__(self):
        return DualComplex(-self.re, -self.im)

    def __mul__(self, other):
        o = DualComplex.lift(other)
        return DualComplex(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = DualComplex.lift(other)
        den = o.abs2()
        num = self * o.conj()
        return DualComplex(num.re / den, num.im / den)

    def conj(self):
        return DualComplex(self.re, -self.im)

    def abs2(self) -> DualReal:
        return self.re * self.re + self.im * self.im


# ── Arrays ──────────────────────────────────────────────────────────


def _value(x):
    return x.value if isinstance(x, DualArray) else np.asarray(x)


def _tangent(x):
    return x.tangent if isinstance(x, DualArray) else None


@dataclass(frozen=True)
class DualArray:
    """Array value with the derivative along one input direction."""

    value: np.ndarray
    tangent: np.ndarray

    @classmethod
    def constant(cls, value) -> "DualArray":
        v = np.asarray(value)
        return cls(v, np.zeros_like(v))

    @classmethod
    def lift(cls, x) -> "DualArray":
        return x if isinstance(x, DualArray) else cls.constant(x)

    @property
    def shape(self):
        return self.value.shape

    def __getitem__(self, idx):
        return DualArray(self.value[idx], self.tangent[idx])

    def __add__(self, other):
        o = DualArray.lift(other)
        return DualArray(self.value + o.value, self.tangent + o.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        o = DualArray.lift(other)
        return DualArray(self.value - o.value, self.tangent - o.tangent)

    def __rsub__(self, other):
        return DualArray.lift(other) - self

    def __neg__(self):
        return DualArray(-self.value, -self.tangent)

    def __mul__(self, other):
        o = DualArray.lift(other)
        return DualArray(self.value * o.value, self.tangent * o.value + self.value * o.tangent)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = DualArray.lift(other)
        q = self.value / o.value
        return DualArray(q, (self.tangent - q * o.tangent) / o.value)

    def __rtruediv__(self, other):
        return DualArray.lift(other) / self

    def __matmul__(self, other):
        o = DualArray.lift(other)
        return DualArray(self.value @ o.value, self.tangent @ o.value + self.value @ o.tangent)

    def __rmatmul__(self, other):
        return DualArray.lift(other) @ self

    def conj(self):
        return DualArray(np.conj(self.value), np.conj(self.tangent))

    def real(self):
        return DualArray(np.real(self.value), np.real(self.tangent))

    def abs2(self):
        """|z|^2 with derivative 2 Re(conj(z) dz)."""
        return DualArray(np.abs(self.value) ** 2, 2.0 * np.real(np.conj(self.value) * self.tangent))

    def exp(self):
        e = np.exp(self.value)
        return DualArray(e, e * self.tangent)

    def cos(self):
        return DualArray(np.cos(self.value), -np.sin(self.value) * self.tangent)

    def sin(self):
        return DualArray(np.sin(self.value), np.cos(self.value) * self.tangent)

    def relu(self):
        active = self.value > 0
        return DualArray(np.where(active, self.value, 0.0), np.where(active, self.tangent, 0.0))

    def sum(self, axis=None):
        return DualArray(self.value.sum(axis=axis), self.tangent.sum(axis=axis))

    def swapaxes(self, a: int, b: int):
        return DualArray(np.swapaxes(self.value, a, b), np.swapaxes(self.tangent, a, b))

    def transpose(self, axes):
        return DualArray(np.transpose(self.value, axes), np.transpose(self.tangent, axes))

    def softmax(self, axis: int = 0):
        shifted = np.exp(self.value - self.value.max(axis=axis, keepdims=True))
        s = shifted / shifted.sum(axis=axis, keepdims=True)
        mean_t = (s * self.tangent).sum(axis=axis, keepdims=True)
        return DualArray(s, s * (self.tangent - mean_t))


def einsum(subscripts: str, *operands) -> DualArray:
    """Multilinear einsum; the tangent is the sum of one-operand-differentiated terms."""
    values = [_value(o) for o in operands]
    out = np.einsum(subscripts, *values)
    tangent = np.zeros_like(out)
    for i, op in enumerate(operands):
        t = _tangent(op)
        if t is None:
            continue
        swapped = values[:i] + [t] + values[i + 1:]
        tangent = tangent + np.einsum(subscripts, *swapped)
    return DualArray(out, tangent)


def solve(a, b) -> DualArray:
    """X = A^-1 B, dX = A^-1 (dB - dA X). B must be a (batched) matrix."""
    av, bv = _value(a), _value(b)
    x = np.linalg.solve(av, bv)
    rhs = np.zeros_like(x) if _tangent(b) is None else _tangent(b).astype(x.dtype, copy=True)
    if _tangent(a) is not None:
        rhs = rhs - _tangent(a) @ x
    return DualArray(x, np.linalg.solve(av, rhs))


def inv(a) -> DualArray:
    """d(A^-1) = -A^-1 dA A^-1."""
    a = DualArray.lift(a)
    x = np.linalg.inv(a.value)
    return DualArray(x, -x @ a.tangent @ x)


def where(cond, a, b) -> DualArray:
    a, b = DualArray.lift(a), DualArray.lift(b)
    return DualArray(np.where(cond, a.value, b.value), np.where(cond, a.tangent, b.tangent))


def stack(items, axis: int = 0) -> DualArray:
    items = [DualArray.lift(x) for x in items]
    return DualArray(np.stack([x.value for x in items], axis=axis),
                     np.stack([x.tangent for x in items], axis=axis))
