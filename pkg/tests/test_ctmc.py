import math

import numpy as np
import pytest
from scipy import stats

from lossnet.ctmc import (
    BallRegion,
    SublevelRegion,
    path_vs_ode,
    read_event_log,
    run_exit_times,
    simulate,
    slow_mode_region,
    stationary_occupation,
    verify_attraction,
    write_event_log,
)
from lossnet.exceptions import PreconditionError
from lossnet.meanfield import find_equilibria, integrate, jacobian, tangent_basis
from lossnet.models import Closed, Mobile, MobileSplit, Open, Rerouting
from lossnet.statespace import EmpiricalVector, erlang_measure

MOBILE = Mobile(3, [1, 2], [1.0, 0.4], [0.5, 0.3], [1.0, 0.7])
SPLIT = MobileSplit(3, [1, 2], [1.0, 0.4], [0.5, 0.3], [1.0, 0.7])


def ev(counts):
    counts = np.asarray(counts)
    return EmpiricalVector(counts, int(counts.sum()))


# ------------------------------------------------------------------ simulate
def test_open_first_holding_time():
    model, N = Open(2, 0.8), 5
    y0 = ev([N, 0, 0])
    R = 10_000
    hold = np.array([simulate(model, N, y0, 1e9, 7, replica=r, max_events=1).times[0] for r in range(R)])
    mean = 1 / (0.8 * N)
    # exponential: standard deviation equals the mean
    assert abs(hold.mean() - mean) <= 3 * mean / math.sqrt(R)


@pytest.mark.parametrize(
    "model,counts",
    [
        (Rerouting(2, 1.3), [0, 3, 2]),
        (Rerouting(3, 1.3), [2, 1, 1, 2]),
        (MOBILE, [1, 2, 0, 1, 1, 0]),
        (SPLIT, [1, 2, 0, 1, 1, 0]),
        (Closed(3, 1.5), [1, 1, 2, 2]),
        (Closed(2, 1.0), [1, 2, 1]),
        (Open(2, 0.8), [1, 2, 3]),
    ],
)
def test_first_jump_follows_finite_rates(model, counts):
    N = sum(counts)
    y0 = ev(counts)
    rates = model.transitions.finite_rate_vector(np.array(counts), N)
    total = rates.sum()
    R = 4000
    freq = np.zeros(len(rates))
    hold = 0.0
    for r in range(R):
        path = simulate(model, N, y0, 1e9, 11, replica=r, max_events=1)
        freq[path.jumps[0]] += 1
        hold += path.times[0]
    p = rates / total
    se = np.sqrt(p * (1 - p) / R)
    assert np.all(freq[p == 0] == 0)
    live = p > 0
    assert np.max(np.abs(freq[live] / R - p[live]) / se[live]) < 4.5
    assert abs(hold / R * total - 1) < 4.5 / math.sqrt(R)


@pytest.mark.parametrize("model,N", [(Closed(3, 1.7), 60), (Closed(2, 1.5), 31)])
def test_closed_paths_conserve_customers(model, N):
    M = int(model.lam * N)
    counts = np.zeros(model.capacity + 1, dtype=np.int64)
    base, extra = divmod(M, N)
    counts[base] = N - extra
    counts[base + 1] += extra
    path = simulate(model, N, ev(counts), 20.0, 3)
    C = model.statespace.states[:, 0]
    visited = path.counts_matrix()
    assert np.all(visited @ C == M)
    assert np.all(visited[:, -1] < N)


@pytest.mark.parametrize("model,counts", [(MOBILE, [5, 3, 2, 4, 1, 5]), (Rerouting(3, 2.5), [4, 4, 4, 4]),
                                          (Open(3, 1.5), [10, 0, 0, 0])])
def test_path_invariants(model, counts):
    N = sum(counts)
    path = simulate(model, N, ev(counts), 5.0, 1)
    assert path.status == "done"
    assert np.all(np.diff(path.times) > 0) and path.times[-1] <= 5.0
    states = path.counts_matrix()
    assert np.all(states >= 0) and np.all(states.sum(axis=1) == N)
    allowed = {tuple(j.delta) for j in model.jump_set()}
    steps = np.diff(states, axis=0)
    assert {tuple(s) for s in steps} <= allowed
    for before, j in zip(states[:-1], path.jumps):
        assert model.transitions.finite_rate_vector(before, N)[j] > 0
    np.testing.assert_array_equal(path.final_counts, states[-1])
    np.testing.assert_array_equal(path.state_at(5.0).counts, states[-1])


def test_event_count_matches_integrated_rate():
    model, N, T = MOBILE, 200, 3.0
    y0 = EmpiricalVector.nearest(np.full(6, 1 / 6), N)
    path = simulate(model, N, y0, T, 5)
    states = path.counts_matrix()
    totals = np.array([model.transitions.finite_rate_vector(c, N).sum() for c in states])
    dt = np.diff(np.concatenate([[0.0], path.times, [T]]))
    compensator = float(totals @ dt)
    assert abs(path.n_events - compensator) <= 5 * math.sqrt(compensator)


def test_reproducible_paths(tmp_path):
    model, N = SPLIT, 100
    y0 = EmpiricalVector.nearest(np.full(6, 1 / 6), N)
    a = simulate(model, N, y0, 2.0, 42)
    b = simulate(model, N, y0, 2.0, 42)
    c = simulate(model, N, y0, 2.0, 43)
    d = simulate(model, N, y0, 2.0, 42, replica=1)
    assert a.digest() == b.digest()
    assert len({a.digest(), c.digest(), d.digest()}) == 3
    write_event_log(a, tmp_path / "events.bin")
    again = read_event_log(tmp_path / "events.bin")
    assert again.digest() == a.digest()
    assert again.model.to_dict() == model.to_dict() and again.seed == 42
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_event_log(tmp_path / "bad.bin")


def test_simulate_validation():
    model = Open(2, 0.8)
    with pytest.raises(ValueError):
        simulate(model, 4, ev([2, 2, 1]), 1.0, 0)
    with pytest.raises(ValueError):
        simulate(model, 5, ev([2, 2, 1]), 0.0, 0)
    with pytest.raises(ValueError):
        simulate(Rerouting(2, 1.0), 2, ev([1, 1, 0]), 1.0, 0)
    with pytest.raises(ValueError):
        simulate(Closed(2, 1.0), 3, ev([0, 0, 3]), 1.0, 0)


def test_event_cap_marks_path():
    path = simulate(Open(2, 0.8), 50, ev([50, 0, 0]), 100.0, 0, max_events=10)
    assert path.status == "capped" and path.n_events == 10


# -------------------------------------------------------------- path vs ODE
def _ode_error(N, T, seed, y=None):
    model = Open(2, 0.8)
    start = EmpiricalVector.nearest([1.0, 0.0, 0.0] if y is None else y, N)
    path = simulate(model, N, start, T, seed)
    traj = integrate(model, start.y, T)
    return path_vs_ode(path, traj)


def test_large_population_tracks_ode():
    assert _ode_error(10_000, 10.0, 0) < 0.05


def test_error_shrinks_with_population():
    wins = sum(_ode_error(100, 10.0, s) > _ode_error(10_000, 10.0, s) for s in range(100))
    assert wins >= 90


def test_equilibrium_start_has_no_drift():
    y_star = erlang_measure(Open(2, 0.8).statespace, [1.0])
    for N in (1000, 10_000):
        assert _ode_error(N, 10.0, 1, y_star) < 5 / math.sqrt(N)


def test_path_vs_ode_range_checks():
    model, N = Open(2, 0.8), 50
    start = ev([50, 0, 0])
    path = simulate(model, N, start, 5.0, 0)
    with pytest.raises(ValueError):
        path_vs_ode(path, integrate(model, start.y, 2.0))
    with pytest.raises(ValueError):
        path_vs_ode(path, integrate(model, [0.4, 0.4, 0.2], 5.0))


# ----------------------------------------------------------------- exit times
def test_unstable_equilibrium_rejected():
    model = Rerouting(300, 275.55)
    report = find_equilibria(model)
    middle = report.equilibria[1]
    assert middle.stability == "unstable"
    with pytest.raises(PreconditionError):
        run_exit_times(model, middle.y, BallRegion(middle.y, 0.01), [50, 100, 200], 4, 0)


def test_region_without_attractor_fails_check():
    model = Open(2, 0.8)
    y_star = erlang_measure(model.statespace, [1.0])
    assert verify_attraction(model, BallRegion(y_star, 0.1), samples=20).ok
    off = BallRegion(np.array([0.6, 0.3, 0.1]), 0.05)
    with pytest.raises(PreconditionError):
        verify_attraction(model, off, samples=10)
    with pytest.raises(PreconditionError):
        run_exit_times(model, off.center, off, [10, 20, 40], 2, 0)


def test_ball_reaching_another_basin_fails_check():
    model = Mobile(8, [1, 8], [4.555, 12.086], [0.208, 0.811], [4.513, 0.132])
    report = find_equilibria(model, per_axis=16)
    a, b = (e.y for e in report.stable)
    saddle = next(e.y for e in report.equilibria if e.stability == "unstable")
    radius = 0.3 * np.linalg.norm(a - b)
    assert radius > np.linalg.norm(b - saddle)
    region = BallRegion(b, radius)
    check = verify_attraction(model, region, samples=30)
    assert not check.ok and check.max_final_distance > 0.1
    with pytest.raises(PreconditionError, match="not attracted"):
        run_exit_times(model, b, region, [10, 20, 40], 2, 0, check_samples=30)


def test_open_exit_times_grow_with_population():
    model = Open(2, 0.8)
    y_star = erlang_measure(model.statespace, [1.0])
    region = BallRegion(y_star, 0.12)
    exp = run_exit_times(model, y_star, region, [10, 20, 40], 300, 9, check_samples=100)
    assert exp.fit is not None and exp.fit["slope"] > 0
    for N in exp.Ns:
        assert np.all(exp.times[N] > 0) and not exp.censored[N].any()
    for small, large in zip(exp.Ns, exp.Ns[1:]):
        # one-sided rank test at the 95% level
        res = stats.mannwhitneyu(exp.times[large], exp.times[small], alternative="greater")
        assert res.pvalue < 0.05
    assert len(exp.summary_rows()) == 3 and len(exp.replica_rows()) == 900


def test_censoring_and_fit_threshold():
    model = Open(2, 0.8)
    y_star = erlang_measure(model.statespace, [1.0])
    exp = run_exit_times(model, y_star, BallRegion(y_star, 0.12), [10, 40], 20, 1, event_cap=30)
    assert exp.fit is None
    assert exp.censored[40].any() and exp.warnings
    row = {r["N"]: r for r in exp.summary_rows()}[40]
    assert row["censored"] == int(exp.censored[40].sum())


def test_sublevel_region_exit():
    model = MobileSplit(3, [1], [1.0], [0.5], [1.0])
    y_star = find_equilibria(model).stable[0].y
    region = SublevelRegion(model, y_star, 0.02, 1.0)
    exp = run_exit_times(model, y_star, region, [20, 40, 80], 50, 4, check_samples=30)
    assert exp.region["kind"] == "g_sublevel"
    assert exp.mean(80) > exp.mean(20)


def test_slow_mode_region_is_biorthonormal():
    model = Rerouting(40, 30.0)
    y_star = find_equilibria(model).equilibria[0].y
    region = slow_mode_region(model, y_star, 0.05, modes=2)
    np.testing.assert_allclose(region.W @ region.V, np.eye(2), atol=1e-10)
    B = tangent_basis(model)
    J = jacobian(model, y_star)
    # W spans left eigenvectors, so W J V is diagonal
    D = region.W @ J @ region.V
    assert abs(D[0, 1]) < 1e-6 and abs(D[1, 0]) < 1e-6
    assert np.allclose(B @ (B.T @ region.V), region.V)


# ------------------------------------------------------------------ occupation
def test_open_occupation_concentrates():
    summary = stationary_occupation(Open(2, 0.8), 500, 5.0, 60.0, 3)
    assert summary.mass_near_reference > 0.9
    assert summary.cell_contains(summary.modal_cell, np.array([0.4, 0.4, 0.2]))
    assert summary.mass.sum() == pytest.approx(1.0)


def test_closed_occupation_concentrates():
    model = Closed(2, 0.8)
    summary = stationary_occupation(model, 500, 5.0, 60.0, 3)
    assert summary.mass_near_reference > 0.9
    assert summary.cell_contains(summary.modal_cell, summary.reference)


def test_occupation_burnin_error():
    with pytest.raises(ValueError):
        stationary_occupation(Open(2, 0.8), 50, 5.0, 5.0, 0)
