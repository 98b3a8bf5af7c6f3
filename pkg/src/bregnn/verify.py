"""Numerical oracles: finite differences and the Bregman-layer argmin certificate.

The certificate re-derives the Bregman layer output ``Z*`` as the solution of
the lower-level problem

    F(Z) = tr(U E Z^T) - <1 b^T, Z> - <1 c^T, U> + delta + D_phi(Z, U M),
    E = -W,  U = P(Z_prev),

by checking first-order optimality (``grad F(Z*) ~ 0``) with reverse-mode
autodiff and then probing ``F`` at random points on a small sphere around
``Z*``. ``F`` is built from :mod:`bregman` primitives only, so it shares no
code path with :func:`layers.bregman_layer` except the activation pair.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import bregman
from .layers import AGGREGATORS, Aggregator, BregmanLayerParams, GraphOperators, bregman_layer
from .sparsegraph import SparseMatrix, canonical_edges
from .tensor import NumericDomainError, Tensor, backward, matmul

GRAD_TOL = 1e-6
DEFAULT_TRIALS = 100
DEFAULT_RADIUS = 1e-2
DEFAULT_STEP = 1e-5


class InfeasibleInstance(RuntimeError):
    pass


def _scalar(v):
    return v.item() if isinstance(v, Tensor) else float(v)


def finite_diff_grad(f, x, step=DEFAULT_STEP):
    """Central-difference gradient of the scalar function ``f`` at tensor ``x``."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.values, dtype=np.float64)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        vals = []
        for sign in (1.0, -1.0):
            probe = base.copy()
            probe[idx] += sign * step
            v = _scalar(f(Tensor(probe)))
            if not np.isfinite(v):
                raise NumericDomainError(f"f is non-finite at entry {idx} {'+' if sign > 0 else '-'} step",
                                         index=idx)
            vals.append(v)
        grad[idx] = (vals[0] - vals[1]) / (2.0 * step)
    return Tensor(grad)


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def autodiff_grads(f, inputs):
    """Gradients of scalar ``f(*inputs)`` w.r.t. each input, via the tape."""
    leaves = [Tensor(t.values.copy(), requires_grad=True) for t in inputs]
    backward(f(*leaves))
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values) for leaf in leaves]


def gradcheck(f, inputs, step=DEFAULT_STEP):
    """Largest relative error between autodiff and finite differences over ``inputs``."""
    analytic = autodiff_grads(f, inputs)
    worst = 0.0
    for i, t in enumerate(inputs):
        def partial(x, i=i):
            args = [Tensor(u.values.copy()) for u in inputs]
            args[i] = x
            return f(*args)

        numeric = finite_diff_grad(partial, t, step).values
        worst = max(worst, relative_error(analytic[i], numeric))
    return worst


# ----------------------------------------------------------------------
# argmin certificate


@dataclass
class Certificate:
    activation: str
    aggregator: str
    n: int
    d: int
    grad_inf_norm: float
    min_increase: float
    trials: int
    radius: float
    passed: bool
    seed: int = -1

    def as_dict(self):
        d = asdict(self)
        d["status"] = "PASS" if self.passed else "FAIL"
        return d


def lower_level_terms(params, c, delta):
    return bregman.BilinearEnergyParams(E=params.E.detach(), b=params.b.detach(), c=c, delta=delta)


def certify_argmin(pair, params, u, trials=DEFAULT_TRIALS, radius=DEFAULT_RADIUS, rng=None,
                   c=None, delta=0.0, bias_shift=0.0, aggregator="", grad_tol=GRAD_TOL):
    """Check that the Bregman layer output minimizes the lower-level objective.

    ``u`` holds the propagated features ``P(Z_prev)``. ``bias_shift`` adds a
    constant to the bias used for the closed form only (fault injection: the
    certificate must then fail).
    """
    if not pair.has_potential:
        raise ValueError(f"activation {pair.name!r} has no potential to certify against")
    if trials < 0:
        raise ValueError("trials must be non-negative")
    rng = np.random.default_rng(0) if rng is None else rng
    n, d = u.shape
    c = Tensor(np.zeros((1, d))) if c is None else c
    anchor = matmul(u, params.M.detach())
    if not np.all(pair.in_domain(anchor.values)):
        raise InfeasibleInstance("U M leaves the inverse domain")

    shifted = BregmanLayerParams(params.M.detach(), params.W.detach(), Tensor(params.b.values + bias_shift))
    z_star = bregman_layer(shifted, pair, u, clamp_margin=0.0).values
    energy = lower_level_terms(params, c, delta)

    def objective(z):
        return bregman.lower_level_objective(pair, energy, z, u, anchor=anchor)

    z = Tensor(z_star, requires_grad=True)
    f_star = objective(z)
    backward(f_star)
    grad_inf = float(np.max(np.abs(z.grad)))

    min_increase = np.inf
    for _ in range(trials):
        delta_z = rng.standard_normal(z_star.shape)
        delta_z *= radius / np.linalg.norm(delta_z)
        probe = z_star + delta_z
        if not np.all(pair.in_domain(probe)):
            raise InfeasibleInstance("perturbation leaves the potential's domain")
        min_increase = min(min_increase, objective(Tensor(probe)).item() - f_star.item())
    passed = grad_inf < grad_tol and (trials == 0 or min_increase > 0)
    return Certificate(pair.name, aggregator, n, d, grad_inf, float(min_increase), trials, radius, passed)


def random_graph(n, rng, p=0.5):
    while True:
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.size) < p
        if keep.any():
            return SparseMatrix.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))


def random_instance(pair, kind, rng, n, d, radius=DEFAULT_RADIUS, max_attempts=100):
    """Random (params, U, c, delta) whose closed form lies strictly in the domain.

    Draws are rejected until ``U M`` is inside the inverse domain and the
    output keeps a ``2 * radius + 0.1`` margin from the domain boundary (room
    for the fault-injection bias shift).
    """
    for _ in range(max_attempts):
        ops = GraphOperators.from_adjacency(random_graph(n, rng))
        z_prev = Tensor(pair.forward(rng.standard_normal((n, d))))
        agg = Aggregator(kind, ops, width=d, rng=rng)
        u = agg(z_prev).detach()
        if pair.name == "softplus":
            m = rng.uniform(0.1, 1.0, size=(d, d)) / d
        else:
            m = rng.standard_normal((d, d)) / np.sqrt(d)
        params = BregmanLayerParams(
            M=Tensor(m),
            W=Tensor(0.5 * rng.standard_normal((d, d)) / np.sqrt(d)),
            b=Tensor(0.3 * rng.standard_normal((1, d))),
        )
        anchor = u.values @ m
        if not np.all(pair.in_domain(anchor, margin=1e-3)):
            continue
        z_star = bregman_layer(params, pair, u, clamp_margin=0.0).values
        if not np.all(pair.in_domain(z_star, margin=2 * radius + 0.1)):
            continue
        c = Tensor(rng.standard_normal((1, d)))
        delta = float(rng.standard_normal())
        return params, u, c, delta
    raise InfeasibleInstance("instance infeasible")


def run_certificates(instances=50, trials=DEFAULT_TRIALS, radius=DEFAULT_RADIUS, seed=0,
                     activations=None, aggregators=AGGREGATORS, inject_fault=False):
    """Certificates for every (activation with potential) x aggregator pair.

    Yields one :class:`Certificate` per instance. With ``inject_fault`` the
    closed form of the first instance of each combination gets its bias
    shifted by 0.1, which must be detected.
    """
    if instances < 1:
        raise ValueError("instances must be at least 1")
    pairs = [p for p in bregman.activation_registry() if p.has_potential]
    if activations is not None:
        pairs = [bregman.get_activation(a) for a in activations]
    for pi, pair in enumerate(pairs):
        for ai, kind in enumerate(aggregators):
            for k in range(instances):
                inst_seed = seed * 1_000_003 + pi * 10_007 + ai * 1_009 + k
                rng = np.random.default_rng(inst_seed)
                n = int(rng.integers(3, 9))
                d = int(rng.integers(2, 6))
                params, u, c, delta = random_instance(pair, kind, rng, n, d, radius)
                shift = 0.1 if (inject_fault and k == 0) else 0.0
                cert = certify_argmin(pair, params, u, trials, radius, rng, c=c, delta=delta,
                                      bias_shift=shift, aggregator=kind)
                cert.seed = inst_seed
                yield cert


# ----------------------------------------------------------------------
# over-smoothing diagnostics


def smoothness_metric(z, adj):
    """Mean squared distance between L2-normalized features across edges."""
    zv = z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if zv.shape[0] != adj.n:
        raise ValueError(f"features have {zv.shape[0]} rows but the graph has {adj.n} nodes")
    edges = canonical_edges(np.stack([adj.row_ids(), adj.col_idx], axis=1))
    if edges.shape[0] == 0:
        raise ValueError("smoothness metric is undefined for a graph without edges")
    norms = np.linalg.norm(zv, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    zn = zv / norms
    diff = zn[edges[:, 0]] - zn[edges[:, 1]]
    return float(np.mean(np.sum(diff * diff, axis=1)))
