"""Invertible activations as Bregman proximity operators.

An activation ``rho`` that is the inverse gradient of a strictly convex
Legendre potential ``phi`` (so ``grad phi = rho^{-1}``) gives, with g = 0,

    prox^phi(P) = argmin_Q { phi(Q) - <Q, P> } = rho(P).

Potentials are separable: ``phi(P)`` is the entrywise potential summed over
all entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import spence

from .tensor import (
    NumericDomainError,
    ShapeError,
    Tensor,
    custom_op,
    elementwise,
    frobenius_inner,
    matmul,
    subtract,
)
from .tensor import sum as tsum

DEFAULT_CLAMP_MARGIN = 1e-6
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ActivationPair:
    """An activation, its inverse, their derivatives and the potential phi."""

    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    forward_derivative: Callable[[np.ndarray], np.ndarray]
    inverse_derivative: Callable[[np.ndarray], np.ndarray]
    inverse_domain: tuple
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def potential_gradient(self):
        return self.inverse

    @property
    def has_potential(self):
        return self.potential is not None

    def in_domain(self, y, margin=0.0):
        lo, hi = self.inverse_domain
        y = np.asarray(y)
        return (y > lo + margin) & (y < hi - margin)


def _tanh_potential(y):
    return y * np.arctanh(y) + 0.5 * np.log1p(-y * y)


def _softplus_inverse(y):
    # log(e^y - 1) without cancellation at either end
    return y + np.log(-np.expm1(-y))


def _softplus_potential(y):
    # antiderivative of log(e^y - 1): y^2/2 + Li2(e^-y), shifted so phi(0+) = 0
    return 0.5 * y * y + spence(-np.expm1(-y)) - math.pi ** 2 / 6.0


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


IDENTITY = ActivationPair(
    name="identity",
    forward=lambda x: np.array(x, dtype=np.float64, copy=True),
    inverse=lambda y: np.array(y, dtype=np.float64, copy=True),
    forward_derivative=lambda x: np.ones_like(x, dtype=np.float64),
    inverse_derivative=lambda y: np.ones_like(y, dtype=np.float64),
    inverse_domain=(-math.inf, math.inf),
    potential=lambda y: 0.5 * np.square(y),
)

TANH = ActivationPair(
    name="tanh",
    forward=np.tanh,
    inverse=np.arctanh,
    forward_derivative=lambda x: 1.0 - np.tanh(x) ** 2,
    inverse_derivative=lambda y: 1.0 / (1.0 - np.square(y)),
    inverse_domain=(-1.0, 1.0),
    potential=_tanh_potential,
)

ARCTAN = ActivationPair(
    name="arctan",
    forward=np.arctan,
    inverse=np.tan,
    forward_derivative=lambda x: 1.0 / (1.0 + np.square(x)),
    inverse_derivative=lambda y: 1.0 + np.tan(y) ** 2,
    inverse_domain=(-math.pi / 2, math.pi / 2),
    potential=lambda y: -np.log(np.cos(y)),
)

SOFTPLUS = ActivationPair(
    name="softplus",
    forward=lambda x: np.logaddexp(0.0, x),
    inverse=_softplus_inverse,
    forward_derivative=_sigmoid,
    inverse_derivative=lambda y: -1.0 / np.expm1(-y),
    inverse_domain=(0.0, math.inf),
    potential=_softplus_potential,
)

LEAKY_RELU = ActivationPair(
    name="leaky_relu",
    forward=lambda x: np.where(x >= 0, x, LEAKY_SLOPE * x),
    inverse=lambda y: np.where(y >= 0, y, y / LEAKY_SLOPE),
    forward_derivative=lambda x: np.where(x >= 0, 1.0, LEAKY_SLOPE),
    inverse_derivative=lambda y: np.where(y >= 0, 1.0, 1.0 / LEAKY_SLOPE),
    inverse_domain=(-math.inf, math.inf),
    potential=lambda y: np.where(y >= 0, 0.5, 0.5 / LEAKY_SLOPE) * np.square(y),
)

_REGISTRY = (IDENTITY, TANH, ARCTAN, SOFTPLUS, LEAKY_RELU)


def activation_registry():
    """All invertible activation pairs known to the package."""
    return list(_REGISTRY)


def get_activation(name):
    for pair in _REGISTRY:
        if pair.name == name:
            return pair
    known = ", ".join(p.name for p in _REGISTRY)
    raise KeyError(f"unknown activation {name!r}; expected one of: {known}")


def apply_activation(pair, x):
    return elementwise(x, pair.forward, pair.forward_derivative, pair.name)


def prox(pair, p):
    """Bregman proximity operator with g = 0, i.e. ``rho(P)``."""
    return apply_activation(pair, p)


def clamp_to_domain(pair, values, margin=DEFAULT_CLAMP_MARGIN):
    """Clip into ``[lo + margin, hi - margin]``; also returns the clipped mask."""
    lo, hi = pair.inverse_domain
    lo = lo + margin if math.isfinite(lo) else -np.inf
    hi = hi - margin if math.isfinite(hi) else np.inf
    clipped = np.clip(values, lo, hi)
    return clipped, (values < lo) | (values > hi)


def apply_inverse(pair, x, clamp_margin=DEFAULT_CLAMP_MARGIN, diagnostics=None):
    """``rho^{-1}(x)`` after clamping ``x`` into the inverse domain.

    Clamped entries get zero gradient. When ``diagnostics`` is a dict its
    ``"clamped"`` counter is incremented by the number of clamped entries.
    """
    clipped, hit = clamp_to_domain(pair, x.values, clamp_margin)
    if diagnostics is not None:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + int(hit.sum())
    with np.errstate(all="ignore"):
        out = pair.inverse(clipped)
    if not np.all(np.isfinite(out)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(out))[0])
        raise NumericDomainError(f"{pair.name} inverse is non-finite at entry {bad}", index=bad)
    deriv = np.where(hit, 0.0, pair.inverse_derivative(clipped))
    return custom_op(out, (x,), lambda g: (g * deriv,))


def _require_potential(pair):
    if pair.potential is None:
        raise ValueError(f"activation {pair.name!r} has no potential")


def _check_domain(pair, t, what):
    ok = pair.in_domain(t.values)
    if not np.all(ok):
        bad = tuple(int(i) for i in np.argwhere(~ok)[0])
        raise NumericDomainError(
            f"{what} entry {bad} = {t.values[bad]!r} lies outside the domain {pair.inverse_domain} "
            f"of the {pair.name} potential", index=bad)


def potential_sum(pair, t):
    """``sum_ij phi(t_ij)`` as a differentiable 1x1 tensor."""
    _require_potential(pair)
    return tsum(elementwise(t, pair.potential, pair.inverse, f"phi[{pair.name}]"))


def bregman_distance(pair, p, q):
    """D_phi(P, Q) = phi(P) - phi(Q) - <grad phi(Q), P - Q>, as a 1x1 tensor."""
    _require_potential(pair)
    if p.shape != q.shape:
        raise ShapeError(f"bregman_distance: shapes differ, {p.shape} vs {q.shape}")
    _check_domain(pair, p, "P")
    _check_domain(pair, q, "Q")
    grad_q = elementwise(q, pair.inverse, pair.inverse_derivative, f"grad_phi[{pair.name}]")
    return potential_sum(pair, p) - potential_sum(pair, q) - frobenius_inner(grad_q, subtract(p, q))


@dataclass
class BilinearEnergyParams:
    """E (d x d), b and c (1 x d) and the offset delta of the bilinear energy."""

    E: Tensor
    b: Tensor
    c: Tensor
    delta: float = 0.0

    def __post_init__(self):
        d = self.E.rows
        if self.E.shape != (d, d) or self.b.shape != (1, d) or self.c.shape != (1, d):
            raise ShapeError(
                f"inconsistent energy shapes E={self.E.shape}, b={self.b.shape}, c={self.c.shape}")

    @property
    def width(self):
        return self.E.rows


def bilinear_energy(params, z, u):
    """f(Z, U) = tr(U E Z^T) - <1 b^T, Z> - <1 c^T, U> + delta."""
    d = params.width
    if z.shape != u.shape or z.cols != d:
        raise ShapeError(f"bilinear_energy: Z {z.shape} and U {u.shape} must both be n x {d}")
    coupling = frobenius_inner(matmul(u, params.E), z)
    bias_z = tsum(matmul(z, params.b.T))
    bias_u = tsum(matmul(u, params.c.T))
    return coupling - bias_z - bias_u + params.delta


def lower_level_objective(pair, params, z, u, anchor=None):
    """F(Z) = f(Z, U) + D_phi(Z, anchor) with g = 0.

    ``anchor`` defaults to ``U``. The Bregman layer couples the energy to the
    propagated features and anchors the distance at their ``M`` image, so the
    verifier passes ``anchor = U M`` explicitly.
    """
    anchor = u if anchor is None else anchor
    return bilinear_energy(params, z, u) + bregman_distance(pair, z, anchor)
