import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossnet.largedev import (
    DiscretePath,
    canonical,
    hamiltonian,
    hamiltonian_gradient,
    legendre,
    path_action,
    quasipotential,
    reversed_flow_path,
    reversibility_residual,
    verify_hjb,
)
from lossnet.meanfield import find_equilibria, integrate, lyapunov_g, lyapunov_gradient
from lossnet.models import Closed, Jump, Mobile, MobileSplit, Open, Rerouting
from lossnet.statespace import erlang_measure

from .oracles import grid_legendre

MODELS = {
    "rerouting": Rerouting(3, 2.1),
    "mobile": Mobile(3, [1, 2], [1.0, 0.4], [0.5, 0.3], [1.0, 0.7]),
    "split": MobileSplit(3, [1, 2], [1.0, 0.4], [0.5, 0.3], [1.0, 0.7]),
    "closed": Closed(3, 1.4),
    "open": Open(3, 1.2),
}
# three-state instances for the grid-search oracle
SMALL = [Open(2, 0.8), MobileSplit(2, [1], [1.0], [0.5], [1.0]), Rerouting(2, 1.1), Mobile(2, [1], [0.7], [0.4], [1.3])]
TINY_SPLIT = MobileSplit(3, [1], [1.0], [0.5], [1.0])


def interior(rng, model):
    return rng.dirichlet(np.ones(model.statespace.size) * 2)


# ----------------------------------------------------------------- Hamiltonian
@pytest.mark.parametrize("name", sorted(MODELS))
def test_hamiltonian_trivial_covectors(name):
    model = MODELS[name]
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = interior(rng, model)
        S = len(y)
        assert hamiltonian(model, y, np.zeros(S)).value == 0.0
        assert hamiltonian(model, y, np.full(S, 3.7)).value == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(hamiltonian_gradient(model, y, np.zeros(S)), model.mean_field(y), atol=1e-12)


def test_hamiltonian_saturation_flag():
    model = MODELS["open"]
    alpha = np.array([0.0, 800.0, 0.0, 0.0])
    res = hamiltonian(model, [0.4, 0.3, 0.2, 0.1], alpha)
    assert res.saturated and math.isfinite(res.value)
    assert not hamiltonian(model, [0.4, 0.3, 0.2, 0.1], np.zeros(4)).saturated


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(MODELS)), st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_hamiltonian_convex(name, seed, t):
    model = MODELS[name]
    rng = np.random.default_rng(seed)
    y = interior(rng, model)
    a1, a2 = rng.normal(size=(2, len(y))) * 2

    def H(a):
        return hamiltonian(model, y, a).value

    assert H(t * a1 + (1 - t) * a2) <= t * H(a1) + (1 - t) * H(a2) + 1e-12 * (1 + abs(H(a1)) + abs(H(a2)))


def test_canonical_zero_mean():
    a = canonical([1.0, 2.0, 6.0])
    assert a.sum() == pytest.approx(0.0) and np.allclose(np.diff(a), [1.0, 4.0])


# ------------------------------------------------------------------ Legendre
@pytest.mark.parametrize("name", sorted(MODELS))
def test_legendre_zero_at_mean_field(name):
    model = MODELS[name]
    y = interior(np.random.default_rng(1), model)
    res = legendre(model, y, model.mean_field(y))
    assert abs(res.value) <= 1e-10
    assert np.abs(res.alpha).max() <= 1e-8


def test_legendre_infinite_when_unreachable():
    model = Open(1, 0.5)
    res = legendre(model, [1.0, 0.0], [1.0, -1.0])
    assert res.value == math.inf and res.alpha is None
    model = Open(2, 0.8)
    res = legendre(model, [1.0, 0.0, 0.0], np.array([1.0, -1.0, 0.0]))
    assert res.value == math.inf


def test_legendre_rejects_nonzero_sum():
    with pytest.raises(ValueError):
        legendre(MODELS["open"], [0.25] * 4, [1.0, 0.0, 0.0, 0.0])


@pytest.mark.parametrize("model", SMALL, ids=lambda m: m.family)
def test_legendre_matches_grid_search(model):
    rng = np.random.default_rng(7)
    jumps = [j.delta for j in model.jump_set()]
    for _ in range(5):
        y = interior(rng, model)
        beta = model.mean_field(y) + canonical(rng.normal(size=3) * 0.3)
        res = legendre(model, y, beta)
        oracle = grid_legendre(jumps, model.limit_rate_vector(y), beta)
        assert res.value == pytest.approx(oracle, abs=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(MODELS)), st.integers(0, 2**32 - 1))
def test_fenchel_young(name, seed):
    model = MODELS[name]
    rng = np.random.default_rng(seed)
    y = interior(rng, model)
    beta = model.mean_field(y) + canonical(rng.normal(size=len(y)) * 0.5)
    alpha = rng.normal(size=len(y))
    res = legendre(model, y, beta)
    if res.finite:
        assert alpha @ beta <= res.value + hamiltonian(model, y, alpha).value + 1e-9
        assert res.value >= -1e-12


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(sorted(MODELS)), st.integers(0, 2**32 - 1), st.sampled_from([1e-3, 1e-2, 0.3]))
def test_lagrangian_vanishes_only_on_mean_field(name, seed, scale):
    model = MODELS[name]
    rng = np.random.default_rng(seed)
    y = interior(rng, model)
    beta = model.mean_field(y) + canonical(rng.normal(size=len(y))) * scale
    res = legendre(model, y, beta)
    assert res.value > 1e-10
    assert abs(legendre(model, y, model.mean_field(y)).value) <= 1e-10


# -------------------------------------------------------------------- action
def test_flow_path_has_small_action():
    model = TINY_SPLIT
    traj = integrate(model, [0.7, 0.1, 0.1, 0.1], 5.0, 1e-11)
    assert path_action(model, DiscretePath.from_trajectory(traj, 200)) <= 1e-4


def test_flow_path_refinement():
    model = Open(2, 0.8)
    traj = integrate(model, [0.9, 0.05, 0.05], 4.0, 1e-11)
    coarse = path_action(model, DiscretePath.from_trajectory(traj, 25))
    fine = path_action(model, DiscretePath.from_trajectory(traj, 50))
    assert fine <= coarse + 1e-6


def test_constant_path_action():
    model = Open(2, 0.8)
    y = np.array([0.6, 0.3, 0.1])
    path = DiscretePath(np.vstack([y, y]), [2.5])
    expected = 2.5 * legendre(model, y, np.zeros(3)).value
    assert path_action(model, path) == pytest.approx(expected)
    assert expected > 0


def test_path_validation():
    with pytest.raises(ValueError):
        DiscretePath(np.array([[0.5, 0.5], [0.4, 0.6]]), [0.0])
    with pytest.raises(ValueError):
        DiscretePath(np.array([[0.5, 0.6], [0.4, 0.6]]), [1.0])
    with pytest.raises(ValueError):
        DiscretePath(np.array([[0.5, 0.5]]), [1.0])


def test_infinite_action_propagates(monkeypatch):
    import lossnet.largedev as ld

    model = Open(1, 0.5)
    stuck = DiscretePath(np.array([[1.0, 0.0], [1.0, 0.0]]), [2.0])
    # only arrivals act at the empty state, so standing still costs lam per unit time
    assert path_action(model, stuck) == pytest.approx(1.0)
    real = ld.legendre

    def blocked(model, y, beta, **kw):
        res = real(model, y, beta, **kw)
        return ld.LegendreResult(math.inf, None, res.iterations, res.gradient_norm)

    monkeypatch.setattr(ld, "legendre", blocked)
    assert path_action(model, stuck) == math.inf


# ------------------------------------------------------------- quasipotential
@pytest.fixture(scope="module")
def split_equilibrium():
    return find_equilibria(TINY_SPLIT).stable[0].y


def test_quasipotential_degenerate(split_equilibrium):
    est = quasipotential(TINY_SPLIT, split_equilibrium, split_equilibrium, 8)
    assert est.value == 0.0


def test_quasipotential_near_equilibrium_matches_g(split_equilibrium):
    y0 = split_equilibrium
    y1 = y0 * np.exp(0.08 * np.array([1.0, -1.0, 0.5, -0.5]))
    y1 /= y1.sum()
    est = quasipotential(TINY_SPLIT, y0, y1, 8)
    dg = lyapunov_g(TINY_SPLIT, y1) - lyapunov_g(TINY_SPLIT, y0)
    assert est.value >= 0
    assert est.value == pytest.approx(dg, rel=0.05)
    # the estimate is an upper bound below any witness path
    witness = path_action(TINY_SPLIT, reversed_flow_path(TINY_SPLIT, y0, y1, 40), nodes=3)
    assert est.value <= witness + 1e-6
    assert '"value"' in est.to_json()


def test_quasipotential_positive_while_flow_is_free(split_equilibrium):
    model = TINY_SPLIT
    y0 = split_equilibrium
    traj = integrate(model, [0.55, 0.25, 0.15, 0.05], 1.0, 1e-11)
    y1 = traj.final
    est = quasipotential(model, y0, y1, 6)
    assert est.value > 1e-4
    # following the flow from y1 towards y0 costs essentially nothing
    down = integrate(model, y1, 30.0, 1e-11)
    assert path_action(model, DiscretePath.from_trajectory(down, 300)) < 1e-4


def test_quasipotential_preconditions():
    model = Open(2, 0.8)
    with pytest.raises(ValueError):
        quasipotential(model, [0.5, 0.3, 0.2], [0.4, 0.4, 0.2], 4)
    report = find_equilibria(Rerouting(300, 275.55))
    middle = report.equilibria[1].y
    with pytest.raises(ValueError, match="stable"):
        quasipotential(report.model, middle, report.equilibria[0].y, 4)


# --------------------------------------------------------------- verification
def test_hjb_holds_for_split_model():
    rng = np.random.default_rng(3)
    for model in (MODELS["split"], TINY_SPLIT):
        for _ in range(1000 if model is TINY_SPLIT else 200):
            assert verify_hjb(model, interior(rng, model)) <= 1e-10


def test_hjb_fails_for_composite_jumps():
    model = MODELS["mobile"]
    rng = np.random.default_rng(4)
    residuals = [verify_hjb(model, interior(rng, model)) for _ in range(50)]
    assert max(residuals) > 1e-3


def test_hjb_at_equilibrium():
    for model in (MODELS["mobile"], MODELS["split"]):
        for eq in find_equilibria(model).equilibria:
            assert verify_hjb(model, eq.y) <= 1e-10
            assert np.ptp(lyapunov_gradient(model, eq.y)) < 1e-8


def test_gradient_vanishes_only_at_equilibria():
    model = MODELS["split"]
    rng = np.random.default_rng(8)
    for _ in range(100):
        y = interior(rng, model)
        flat = np.ptp(lyapunov_gradient(model, y)) < 1e-9
        assert flat == (np.abs(model.mean_field(y)).max() <= 1e-9)
        assert model.mean_field(y) @ lyapunov_gradient(model, y) < 0


def test_reversibility():
    model = MODELS["split"]
    rng = np.random.default_rng(5)
    jumps = model.jump_set()
    for _ in range(500):
        y = interior(rng, model)
        for z in jumps:
            assert abs(reversibility_residual(model, y, z)) <= 1e-10


def test_reversibility_at_equilibrium_arrival():
    model = MODELS["split"]
    y = find_equilibria(model).equilibria[0].y
    ss = model.statespace
    arrival = next(j for j in model.jump_set() if j.support == (0, ss.up[0, 0]) and j.values == (-1, 1))
    assert reversibility_residual(model, y, arrival) == pytest.approx(0.0, abs=1e-14)
    mu = model.limit_rate_vector(y)
    jumps = model.jump_set()
    forward, backward = mu[jumps.index(arrival)], mu[jumps.index(-arrival)]
    # detailed balance of the Erlang measure for the typical-node queue
    rho = model.rho_of_y(y)
    nu = erlang_measure(ss, rho)
    assert forward == pytest.approx(nu[0] * rho[0] * model.service[0], rel=1e-12)
    assert backward == pytest.approx(nu[ss.up[0, 0]] * model.service[0], rel=1e-12)


def test_verification_rejects_rerouting():
    with pytest.raises(TypeError):
        verify_hjb(Rerouting(3, 1.0), [0.25] * 4)
    with pytest.raises(TypeError):
        reversibility_residual(Rerouting(3, 1.0), [0.25] * 4, Rerouting(3, 1.0).jump_set()[0])


def test_reversibility_needs_reverse_jump():
    model = MODELS["split"]
    bogus = Jump((0, 5), (-1, 1), model.statespace.size)
    with pytest.raises(ValueError):
        reversibility_residual(model, [1 / 6] * 6, bogus)
