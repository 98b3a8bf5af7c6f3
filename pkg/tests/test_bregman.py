"""Activation pairs, potentials, Bregman distance and the lower-level objective."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from bregnn import bregman
from bregnn.bregman import BilinearEnergyParams
from bregnn.layers import BregmanLayerParams, bregman_layer
from bregnn.tensor import NumericDomainError, ShapeError, Tensor, backward
from bregnn.tensor import sum as tsum
from bregnn.verify import certify_argmin

PAIRS = bregman.activation_registry()
NAMES = [p.name for p in PAIRS]
# interior sample ranges, kept away from the boundary so round trips are well conditioned
INTERIOR = {"identity": (-50, 50), "tanh": (-0.999, 0.999), "arctan": (-1.5, 1.5),
            "softplus": (1e-3, 30), "leaky_relu": (-50, 50)}


def interior(name):
    lo, hi = INTERIOR[name]
    return st.floats(lo, hi, allow_nan=False)


def test_registry_contents():
    assert NAMES == ["identity", "tanh", "arctan", "softplus", "leaky_relu"]
    assert bregman.get_activation("tanh").inverse_domain == (-1.0, 1.0)
    assert bregman.get_activation("arctan").inverse_domain == (-math.pi / 2, math.pi / 2)
    assert bregman.get_activation("softplus").inverse_domain == (0.0, math.inf)
    with pytest.raises(KeyError, match="relu6"):
        bregman.get_activation("relu6")


def test_tanh_pair_values():
    t = bregman.TANH
    assert t.inverse(np.array(0.5)) == pytest.approx(math.atanh(0.5), abs=1e-15)
    assert abs(math.atanh(0.5) - 0.5493) < 1e-4
    assert t.forward(np.array(math.atanh(0.5))) == pytest.approx(0.5, abs=1e-15)


def test_apply_inverse_clamps_with_stop_gradient():
    x = Tensor([[1.5, 0.25]], requires_grad=True)
    diag = {}
    out = bregman.apply_inverse(bregman.TANH, x, clamp_margin=1e-6, diagnostics=diag)
    assert out.values[0, 0] == pytest.approx(math.atanh(1 - 1e-6), abs=1e-12)
    assert abs(out.values[0, 0] - 7.254328619) < 1e-8
    assert diag["clamped"] == 1
    backward(tsum(out))
    assert x.grad[0, 0] == 0.0
    assert x.grad[0, 1] == pytest.approx(1 / (1 - 0.25 ** 2))


def test_apply_inverse_identity_and_softplus_boundary():
    x = np.array([[-3.0, 0.0, 2.5]])
    np.testing.assert_array_equal(bregman.apply_inverse(bregman.IDENTITY, Tensor(x)).values, x)
    out = bregman.apply_inverse(bregman.SOFTPLUS, Tensor([[-3.0]]), clamp_margin=1e-6)
    assert out.item() == pytest.approx(math.log(math.expm1(1e-6)), abs=1e-12)


@pytest.mark.parametrize("name", NAMES)
@given(data=st.data())
def test_round_trip(name, data):
    pair = bregman.get_activation(name)
    y = data.draw(interior(name))
    assert abs(pair.forward(pair.inverse(np.array(y))) - y) < 1e-10 * max(1.0, abs(y))
    x = float(pair.inverse(np.array(y)))
    assert abs(pair.inverse(pair.forward(np.array(x))) - x) < 1e-8 * max(1.0, abs(x))


@pytest.mark.parametrize("name", NAMES)
@given(x=st.floats(-5, 5, allow_nan=False))
def test_forward_derivative_matches_numeric(name, x):
    pair = bregman.get_activation(name)
    if name == "leaky_relu" and abs(x) < 1e-4:
        return
    h = 1e-6
    numeric = (pair.forward(np.array(x + h)) - pair.forward(np.array(x - h))) / (2 * h)
    analytic = pair.forward_derivative(np.array(x))
    assert analytic > 0
    assert abs(numeric - analytic) <= 1e-6 * abs(analytic)


@pytest.mark.parametrize("name,y0", [("identity", 0.0), ("tanh", 0.0), ("arctan", 0.0),
                                     ("softplus", 0.0), ("leaky_relu", 0.0)])
@pytest.mark.parametrize("y", [-1.2, -0.3, 0.05, 0.6, 0.95, 1.4, 3.0, 12.0])
def test_potential_is_antiderivative_of_inverse(name, y0, y):
    pair = bregman.get_activation(name)
    if not pair.in_domain(y, margin=1e-9):
        return
    integral, _ = quad(lambda t: float(pair.inverse(np.array(t))), y0, y, epsabs=1e-13, epsrel=1e-13, limit=200)
    phi0 = 0.0 if name == "softplus" else float(pair.potential(np.array(y0)))
    assert float(pair.potential(np.array(y))) - phi0 == pytest.approx(integral, abs=1e-10)


def test_identity_distance_is_half_squared_euclidean():
    rng = np.random.default_rng(0)
    p, q = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    d = bregman.bregman_distance(bregman.IDENTITY, Tensor(p), Tensor(q)).item()
    assert d == pytest.approx(0.5 * np.sum((p - q) ** 2), abs=1e-12)


@pytest.mark.parametrize("name", NAMES)
@given(data=st.data())
def test_distance_nonnegative_and_zero_on_diagonal(name, data):
    pair = bregman.get_activation(name)
    lo, hi = INTERIOR[name]
    lo, hi = max(lo, -5.0), min(hi, 5.0)
    vals = st.lists(st.floats(lo, hi, allow_nan=False), min_size=6, max_size=6)
    p = Tensor(np.array(data.draw(vals)).reshape(2, 3))
    q = Tensor(np.array(data.draw(vals)).reshape(2, 3))
    assert bregman.bregman_distance(pair, p, q).item() >= -1e-12
    assert bregman.bregman_distance(pair, p, p).item() == 0.0


def test_distance_domain_and_shape_errors():
    with pytest.raises(NumericDomainError) as info:
        bregman.bregman_distance(bregman.TANH, Tensor([[0.1, 1.2]]), Tensor([[0.1, 0.2]]))
    assert info.value.index == (0, 1)
    with pytest.raises(ShapeError):
        bregman.bregman_distance(bregman.TANH, Tensor([[0.1]]), Tensor([[0.1, 0.2]]))


def _energy(d, e=None, b=None, c=None, delta=0.0):
    z = np.zeros((d, d))
    zr = np.zeros((1, d))
    return BilinearEnergyParams(Tensor(z if e is None else e), Tensor(zr if b is None else b),
                                Tensor(zr if c is None else c), delta)


def test_bilinear_energy_examples():
    rng = np.random.default_rng(1)
    z, u = Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal((3, 2)))
    assert bregman.bilinear_energy(_energy(2, delta=3.0), z, u).item() == 3.0
    i2 = Tensor(np.eye(2))
    assert bregman.bilinear_energy(_energy(2, e=np.eye(2)), i2, i2).item() == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        bregman.bilinear_energy(_energy(2), Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 2))))


@given(st.integers(0, 2**31))
def test_trace_form_equals_sum_of_row_vector_forms(seed):
    rng = np.random.default_rng(seed)
    n, d = 5, 3
    z, u = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    e, b, c = rng.standard_normal((d, d)), rng.standard_normal((1, d)), rng.standard_normal((1, d))
    params = _energy(d, e, b, c)
    # per-node form u_i^T E z_i - b^T z_i - c^T u_i, summed by hand
    by_rows = sum(float(u[i] @ e @ z[i] - b[0] @ z[i] - c[0] @ u[i]) for i in range(n))
    assert bregman.bilinear_energy(params, Tensor(z), Tensor(u)).item() == pytest.approx(by_rows, abs=1e-12)


def test_lower_level_objective_examples():
    rng = np.random.default_rng(2)
    u = rng.uniform(-0.5, 0.5, (3, 2))
    assert bregman.lower_level_objective(bregman.TANH, _energy(2), Tensor(u), Tensor(u)).item() == 0.0
    # identity pair with E = 0, b = 0: Z = U is a stationary point and every perturbation costs more
    z = Tensor(u.copy(), requires_grad=True)
    f = bregman.lower_level_objective(bregman.IDENTITY, _energy(2), z, Tensor(u))
    backward(f)
    assert np.max(np.abs(z.grad)) == 0.0
    for _ in range(20):
        probe = u + 1e-2 * rng.standard_normal(u.shape)
        assert bregman.lower_level_objective(bregman.IDENTITY, _energy(2), Tensor(probe), Tensor(u)).item() > 0
    with pytest.raises(NumericDomainError):
        bregman.lower_level_objective(bregman.TANH, _energy(2), Tensor([[2.0, 0.0]]), Tensor([[0.0, 0.0]]))


@pytest.mark.parametrize("name", ["identity", "tanh", "arctan", "softplus", "leaky_relu"])
@given(data=st.data())
def test_prox_with_zero_g_is_the_activation(name, data):
    # minimizer of phi(Q) - <Q, P> satisfies grad phi(Q) = P, i.e. Q = rho(P)
    pair = bregman.get_activation(name)
    p = np.array(data.draw(st.lists(st.floats(-4, 4, allow_nan=False), min_size=4, max_size=4))).reshape(2, 2)
    q = bregman.prox(pair, Tensor(p)).values
    np.testing.assert_array_equal(q, pair.forward(p))
    assert np.max(np.abs(pair.potential_gradient(q) - p)) < 1e-8


@pytest.mark.parametrize("name", ["identity", "tanh", "arctan", "softplus"])
def test_closed_form_beats_random_perturbations(name):
    pair = bregman.get_activation(name)
    rng = np.random.default_rng(11)
    d = 3
    u = Tensor(np.abs(rng.uniform(0.1, 0.5, (4, d))))
    params = BregmanLayerParams(Tensor(rng.uniform(0.1, 0.4, (d, d))), Tensor(0.1 * rng.standard_normal((d, d))),
                                Tensor(0.05 * rng.standard_normal((1, d))))
    cert = certify_argmin(pair, params, u, trials=100, radius=1e-2, rng=rng)
    assert cert.passed and cert.min_increase > 0
    z_star = bregman_layer(params, pair, u).values
    assert np.all(pair.in_domain(z_star))
