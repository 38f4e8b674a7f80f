"""Per-node, per-iteration arithmetic cost of DLMS and SONEC-DLMS.

``operation_counts`` gives the closed-form table; ``instrumented_counts``
executes one node's iteration on :class:`Counted` scalars and tallies what was
actually done, so the two can be compared.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def operation_counts(algorithm: str, n_k: int, L: int) -> tuple[int, int, int]:
    """``(adds, mults, nonlinear_ops)`` for one node and one iteration."""
    if n_k < 1 or L < 1:
        raise ValueError("n_k and L must be positive")
    if algorithm == "dlms":
        return L * (3 * n_k - 1), L * (3 * n_k + 1), 0
    if algorithm == "sonec_dlms":
        return L * (9 * n_k + 1), L * (9 * n_k + 2), 3 * n_k
    raise ValueError(f"unknown algorithm {algorithm!r}; expected 'dlms' or 'sonec_dlms'")


@dataclass
class OpCounter:
    adds: int = 0
    mults: int = 0
    nonlinear: int = 0


class Counted:
    """Float wrapper that records every arithmetic operation in a shared counter.

    Subtraction counts as an addition and division as a multiplication; a
    square root counts as a nonlinear operation. Negation is free.
    """

    __slots__ = ("value", "counter")

    def __init__(self, value: float, counter: OpCounter) -> None:
        self.value = float(value)
        self.counter = counter

    @staticmethod
    def _v(x) -> float:
        return x.value if isinstance(x, Counted) else float(x)

    def _add(self, x, sign: float = 1.0) -> "Counted":
        self.counter.adds += 1
        return Counted(self.value + sign * self._v(x), self.counter)

    def __add__(self, x):
        return self._add(x)

    __radd__ = __add__

    def __sub__(self, x):
        return self._add(x, -1.0)

    def __rsub__(self, x):
        self.counter.adds += 1
        return Counted(self._v(x) - self.value, self.counter)

    def __mul__(self, x):
        self.counter.mults += 1
        return Counted(self.value * self._v(x), self.counter)

    __rmul__ = __mul__

    def __truediv__(self, x):
        self.counter.mults += 1
        return Counted(self.value / self._v(x), self.counter)

    def __rtruediv__(self, x):
        self.counter.mults += 1
        return Counted(self._v(x) / self.value, self.counter)

    def __neg__(self):
        return Counted(-self.value, self.counter)

    def __lt__(self, x):
        return self.value < self._v(x)

    def sqrt(self) -> "Counted":
        self.counter.nonlinear += 1
        return Counted(math.sqrt(max(self.value, 0.0)), self.counter)

    def __float__(self) -> float:
        return self.value


def _dot(xs, ys):
    acc = xs[0] * ys[0]
    for x, y in zip(xs[1:], ys[1:]):
        acc = acc + x * y
    return acc


def _invert(x, b):
    # 2x / (1 + sqrt(1 + 4 b x))
    return (2 * x) / (1 + (1 + 4 * b * x).sqrt())


def _node_iteration(omega, u_nb, d_nb, c_k, a_k, mu, phis, b_hat=None, mu_b=None):
    """One node's adaptation and combination, written with scalar arithmetic.

    ``phis`` are the neighbours' transmitted intermediate estimates; with
    ``b_hat`` given, measurements and received estimates are compensated and
    ``b_hat`` is updated (steps 1 to 5 of the estimate-and-compensate scheme).
    """
    L = len(omega)
    grad = None
    new_b = []
    for j, (u, d, c) in enumerate(zip(u_nb, d_nb, c_k)):
        e = d - _dot(u, omega)
        if b_hat is not None:
            d_hat = _invert(d, b_hat[j])
            sq = d_hat * d_hat
            e = e - b_hat[j] * sq
            new_b.append(b_hat[j] + mu_b * c * e * sq)
        ce = c * e
        term = [ce * x for x in u]
        grad = term if grad is None else [g + t for g, t in zip(grad, term)]
    phi = [w + mu * g for w, g in zip(omega, grad)]
    received = phis if b_hat is None else [[_invert(x, bl) for x in p] for p, bl in zip(phis, new_b)]
    out = [a_k[0] * x for x in received[0]]
    for a, p in zip(a_k[1:], received[1:]):
        out = [o + a * x for o, x in zip(out, p)]
    return phi, out, L


def instrumented_counts(algorithm: str, n_k: int, L: int, seed: int = 0) -> tuple[int, int, int]:
    """Count the operations of one node iteration executed on :class:`Counted` values.

    Scalar constants (step sizes, weights) are plain floats; every operation
    touching data or state is counted.
    """
    if algorithm not in ("dlms", "sonec_dlms"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    rng = np.random.default_rng(seed)
    ctr = OpCounter()

    def vec(n):
        return [Counted(x, ctr) for x in 0.3 * rng.standard_normal(n)]

    omega = vec(L)
    u_nb = [vec(L) for _ in range(n_k)]
    d_nb = vec(n_k)
    phis = [vec(L) for _ in range(n_k)]
    weights = [1.0 / n_k] * n_k
    b_hat = [Counted(-0.1, ctr) for _ in range(n_k)] if algorithm == "sonec_dlms" else None
    _node_iteration(omega, u_nb, d_nb, weights, weights, 0.01, phis, b_hat, 0.005)
    return ctr.adds, ctr.mults, ctr.nonlinear
