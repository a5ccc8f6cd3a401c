import numpy as np
import pytest
from scipy.integrate import quad
from hypothesis import given
from hypothesis import strategies as st

from flatvaradhan import heat_kernel as hk
from flatvaradhan.distributions import Mixture, Uniform, VonMises, integrate
from flatvaradhan.errors import InvalidInputError, UnsupportedOperationError
from flatvaradhan.manifold import CIRCLE, TORUS2
from flatvaradhan.varadhan import (
    VaradhanFunction,
    circle_frechet_mean,
    local_minimize,
    mean,
    minimize,
    variance,
)

PI = np.pi


def trapezoid_F(density, t, x, res=8192):
    """Independent oracle: periodic trapezoid rule over xi on the tensor grid."""
    return integrate(density, lambda xi: hk.cost(density.manifold, t, np.asarray(x), xi), res=res)


def quad_F(density, t, x, fn=None):
    """Adaptive-quadrature oracle on the circle, split at x and at the cut point x + pi."""
    fn = fn or (lambda xi: hk.cost(CIRCLE, t, np.array([x]), np.array([xi])))
    g = lambda xi: float(density.pdf(np.array([xi])) * fn(xi))  # noqa: E731
    a = quad(g, x - PI, x, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    b = quad(g, x, x + PI, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    return a + b


def test_uniform_constant_value():
    F = VaradhanFunction.population(Uniform(1), 0.0)
    vals = F.value(CIRCLE.grid(17))
    np.testing.assert_allclose(vals, PI**2 / 3, atol=1e-6)


@pytest.mark.parametrize("t", [0.0, 0.05, 0.5])
def test_population_matches_trapezoid_oracle(vm02, mixture, t):
    for d in (vm02, mixture):
        F = VaradhanFunction.population(d, t)
        for x in (0.0, 1.3, PI, 4.0):
            assert F.value([x]) == pytest.approx(quad_F(d, t, x), abs=1e-10)


def test_population_torus_matches_trapezoid_oracle():
    d = Mixture((0.7, 0.3), (VonMises((0.0, 1.0), (2.0, 1.0)), Uniform(2)))
    F = VaradhanFunction.population(d, 0.2)
    for x in ([0.0, 0.0], [2.0, 3.5]):
        assert F.value(x) == pytest.approx(trapezoid_F(d, 0.2, x, res=512), abs=1e-8)


def test_single_sample_equals_cost():
    y = np.array([1.7])
    for t in (0.0, 0.01, 0.3):
        F = VaradhanFunction.empirical(y[None], t)
        x = np.array([4.0])
        assert F.value(x) == hk.cost(CIRCLE, t, x, y)
        if t > 0:
            assert np.array_equal(F.grad(x), hk.grad_x(CIRCLE, t, x, y))
            assert np.array_equal(F.hess(x), hk.hess_x(CIRCLE, t, x, y))


def test_mean_is_strict_minimizer(vm02):
    F = VaradhanFunction.population(vm02, 0.0)
    assert F.value([0.0]) < F.value([PI])


def test_symmetric_density_zero_gradient(vm02):
    for t in (0.01, 0.1, 1.0):
        assert abs(VaradhanFunction.population(vm02, t).grad([0.0])[0]) < 1e-10


def test_uniform_zero_gradient():
    F = VaradhanFunction.population(Uniform(1), 0.05)
    for x in (0.0, 1.0, 2.5, 5.0):
        assert abs(F.grad([x])[0]) < 1e-8


def test_t_zero_derivatives_unsupported(vm02):
    F = VaradhanFunction.population(vm02, 0.0)
    with pytest.raises(UnsupportedOperationError):
        F.grad([0.0])
    with pytest.raises(UnsupportedOperationError):
        F.hess([0.0])
    # the subgradient is -2 E[Log]
    oracle = -2 * quad_F(vm02, 0.0, 0.7, fn=lambda xi: CIRCLE.log_tie(np.array([0.7]), np.array([xi]))[0])
    assert F.subgrad([0.7])[0] == pytest.approx(oracle, abs=1e-10)


def test_population_derivatives_fd(mixture):
    h = 1e-5
    rng = np.random.default_rng(0)
    for t in (0.02, 0.2, 1.0):
        F = VaradhanFunction.population(mixture, t)
        for x in rng.uniform(0, 2 * PI, 4):
            fd_g = (F.value([x + h]) - F.value([x - h])) / (2 * h)
            fd_h = (F.grad([x + h])[0] - F.grad([x - h])[0]) / (2 * h)
            g, H = F.grad([x])[0], F.hess([x])[0, 0]
            assert abs(g - fd_g) / (1 + abs(g)) < 1e-6
            assert abs(H - fd_h) / (1 + abs(H)) < 1e-5


def test_empirical_torus_derivatives_fd():
    rng = np.random.default_rng(1)
    xs = rng.uniform(0, 2 * PI, (30, 2))
    F = VaradhanFunction.empirical(xs, 0.1)
    x, h = np.array([1.0, 2.0]), 1e-5
    f, g, H = F.value_grad_hess(x)
    assert f == pytest.approx(F.value(x), rel=1e-14)
    for k in range(2):
        e = np.eye(2)[k] * h
        assert g[k] == pytest.approx((F.value(x + e) - F.value(x - e)) / (2 * h), rel=1e-6, abs=1e-7)
        np.testing.assert_allclose(H[:, k], (F.grad(x + e) - F.grad(x - e)) / (2 * h), rtol=1e-5, atol=1e-6)
    assert H[0, 1] == 0.0


def test_single_sample_minimizer():
    y = np.array([[2.2]])
    for t in (0.0, 0.05, 0.5):
        r = minimize(VaradhanFunction.empirical(y, t))
        assert r.minimizer[0] == pytest.approx(2.2, abs=1e-8)
    assert variance(VaradhanFunction.empirical(y, 0.0)) == pytest.approx(0.0, abs=1e-16)


def test_von_mises_mean(vm02):
    r = minimize(VaradhanFunction.population(vm02, 0.0))
    assert CIRCLE.distance(r.minimizer, [0.0]) < 1e-6
    assert r.converged and not r.flat
    assert mean(VaradhanFunction.population(VonMises((1.0,), (4.0,)), 0.1))[0] == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("t", [0.0, 0.1])
def test_uniform_flat(t):
    r = minimize(VaradhanFunction.population(Uniform(1), t))
    assert r.flat
    assert r.uniqueness_margin < 1e-10


def test_uniform_variance():
    assert variance(VaradhanFunction.population(Uniform(1), 0.0)) == pytest.approx(PI**2 / 3, abs=1e-6)


@pytest.mark.parametrize("t", [0.0, 0.05, 0.3])
def test_minimizer_optimal_on_audit_grid(mixture, t):
    F = VaradhanFunction.population(mixture, t)
    r = minimize(F)
    assert np.all(r.value <= F.value(CIRCLE.grid(512)) + 1e-9)
    assert r.uniqueness_margin > 0


def test_minimizer_optimal_on_torus():
    d = VonMises((1.0, 5.0), (2.0, 0.5))
    F = VaradhanFunction.population(d, 0.1)
    r = minimize(F, starts=16)
    assert np.all(r.value <= F.value(TORUS2.grid(64)) + 1e-9)
    np.testing.assert_allclose(r.minimizer, [1.0, 5.0], atol=1e-6)


@pytest.mark.parametrize("alpha", [0.4, 2.5, -1.1])
def test_rotation_equivariance(vm02, mixture, alpha):
    for d in (vm02, mixture):
        for t in (0.0, 0.1):
            r0 = minimize(VaradhanFunction.population(d, t))
            r1 = minimize(VaradhanFunction.population(d.rotate(alpha), t))
            assert CIRCLE.distance(r1.minimizer, CIRCLE.exp(r0.minimizer, [alpha])) < 1e-6
            assert r1.value == pytest.approx(r0.value, abs=1e-9)


def test_continuity_in_t(vm02):
    ts = np.array([0.2, 0.1, 0.05, 0.01, 0.003, 0.001])
    res = [minimize(VaradhanFunction.population(vm02, t)) for t in ts]
    v0 = variance(VaradhanFunction.population(vm02, 0.0))
    for r in res:
        assert CIRCLE.distance(r.minimizer, [0.0]) < 1e-4
    gaps = np.array([r.value - v0 for r in res])
    # V^t - V^0 = t log(2 pi t) + O(t^2); the leading term is not monotone above t = 1/(2 pi e)
    resid = np.abs(gaps - ts * np.log(2 * PI * ts))
    assert np.all(np.diff(resid) < 0)
    assert np.all(resid < 1e-2 * ts)
    below = np.abs(gaps[ts < 1 / (2 * PI * np.e)])
    assert np.all(np.diff(below) < 0)


@pytest.mark.parametrize("t", [0.2, 0.1, 0.05, 0.01])
def test_min_functional_lipschitz(mixture, t):
    g = CIRCLE.grid(512)
    F0 = VaradhanFunction.population(mixture, 0.0)
    Ft = VaradhanFunction.population(mixture, t)
    sup = np.max(np.abs(Ft.value(g) - F0.value(g)))
    assert abs(variance(Ft) - variance(F0)) <= sup


def test_exact_circle_frechet_mean():
    rng = np.random.default_rng(2)
    for n in (1, 2, 7, 50):
        xs = rng.uniform(0, 2 * PI, n)
        m, v = circle_frechet_mean(xs)
        F = VaradhanFunction.empirical(xs[:, None], 0.0)
        assert F.value([m]) == pytest.approx(v, abs=1e-12)
        assert np.all(v <= F.value(CIRCLE.grid(4096)) + 1e-12)
        r = minimize(F)
        assert r.value == pytest.approx(v, abs=1e-9)


def test_tie_break_is_deterministic():
    # two antipodal atoms: the Frechet function has two minimizers; the lower grid index wins
    xs = np.array([[PI / 2], [3 * PI / 2]])
    r1 = minimize(VaradhanFunction.empirical(xs, 0.1))
    r2 = minimize(VaradhanFunction.empirical(xs[::-1], 0.1))
    assert np.array_equal(r1.minimizer, r2.minimizer)
    assert r1.minimizer[0] < PI


def test_local_minimize_converges(mixture):
    F = VaradhanFunction.population(mixture, 0.1)
    x, f, ok, _ = local_minimize(F, np.array([0.3]))
    assert ok and abs(F.grad(x)[0]) < 1e-8


def test_validation(vm02):
    with pytest.raises(InvalidInputError):
        VaradhanFunction(0.1)
    with pytest.raises(InvalidInputError):
        VaradhanFunction.population(vm02, -0.1)
    with pytest.raises(InvalidInputError):
        minimize(VaradhanFunction.population(vm02, 0.1), starts=4)
    with pytest.raises(InvalidInputError):
        VaradhanFunction.population(vm02, 0.1).value([0.0, 1.0])


@given(st.floats(0.0, 2 * PI), st.floats(0.005, 2.0))
def test_population_batch_matches_single(x, t):
    F = VaradhanFunction.population(VonMises((0.5,), (1.5,)), t, res=256)
    batch = F.value(np.array([[x], [x + 1.0]]))
    assert batch[0] == pytest.approx(F.value([x]), rel=1e-14)
    assert batch[1] == pytest.approx(F.value([x + 1.0]), rel=1e-14)
