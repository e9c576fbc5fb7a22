import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tontine.grid import TimeGrid
from tontine.mortality import (
    BoundChain,
    MortalityTable,
    SurvivorPath,
    bound_chain,
    check_time_point_bound,
    counts_from_death_times,
    explicit_table,
    finite_time_points,
    gompertz_makeham_survival,
    gompertz_makeham_table,
    numeric_survival_from_hazard,
    point_mass_table,
    simulate_death_times,
    simulate_survivor_counts,
    simulate_survivors,
    survivor_bound_event,
    uniform_table,
)


# --- table construction --------------------------------------------------------


def test_uniform_quarterly_table_matches_hand_arithmetic():
    table = uniform_table(TimeGrid(0.25, 1.0))
    assert np.allclose(table.p, 1.0)
    assert np.allclose(table.pi[:4], [1.0, 0.75, 0.5, 0.25])
    assert table.pi[4] == 0.0


def test_point_mass_at_last_point_has_no_early_deaths():
    grid = TimeGrid(0.5, 3.0)
    table = point_mass_table(grid)
    assert np.allclose(table.pi[: grid.n_steps], 1.0)
    assert table.pi[-1] == 0.0


def test_gompertz_makeham_against_quadrature_oracle():
    # Post-retirement scale: hazard ~1.7% at t=0 rising tenfold by t=30.
    grid = TimeGrid(0.5, 30.0)
    a, b, c = 0.002, 0.015, 0.1
    table = gompertz_makeham_table(grid, a, b, c)
    pi = table.pi[: grid.n_steps]
    assert np.all(np.diff(pi) < 0)
    assert pi[-1] < 0.1
    # Oracle: quadrature of the hazard, independent of the closed form.
    for t in [0.5, 5.0, 12.5, 29.5]:
        oracle = numeric_survival_from_hazard(lambda s: a + b * np.exp(c * s), t)
        assert pi[grid.index_of(t)] == pytest.approx(oracle, rel=1e-8)


def test_anchor_count_growth_law():
    # Anchor count follows log(1/pi(t0)) / log(1/(1-eps)); grid quantization
    # inflates it slightly, so assert the law within 25% and the eps-scaling
    # of the counts within 15%.
    grid = TimeGrid(1.0 / 2048.0, 1.0)
    table = uniform_table(grid)
    t0 = 0.75
    counts = {}
    for eps in (0.05, 0.02):
        anchors = finite_time_points(table, t0, eps)
        predicted = np.log(1.0 / 0.25) / np.log(1.0 / (1.0 - eps))
        counts[eps] = len(anchors)
        assert abs(len(anchors) - predicted) <= 0.25 * predicted
    ratio = counts[0.02] / counts[0.05]
    predicted_ratio = np.log(1.0 / 0.95) / np.log(1.0 / 0.98)
    assert abs(ratio - predicted_ratio) <= 0.15 * predicted_ratio


def test_gompertz_makeham_closed_form_survival_matches_quad():
    for t in [0.1, 1.0, 10.0]:
        closed = gompertz_makeham_survival(0.001, 0.0007, 0.09, np.array([t]))[0]
        oracle = numeric_survival_from_hazard(lambda s: 0.001 + 0.0007 * np.exp(0.09 * s), t)
        assert closed == pytest.approx(oracle, rel=1e-9)


def test_negative_masses_rejected():
    grid = TimeGrid(0.5, 1.0)
    with pytest.raises(ValueError):
        explicit_table(grid, np.array([1.0, -0.1]))
    with pytest.raises(ValueError):
        MortalityTable(grid, np.array([-1.0, 3.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=10.0), min_size=4, max_size=4))
def test_table_invariants_on_random_masses(masses):
    grid = TimeGrid(0.25, 1.0)
    if sum(masses) <= 0:
        with pytest.raises(ValueError):
            explicit_table(grid, np.array(masses))
        return
    table = explicit_table(grid, np.array(masses))
    assert table.p.sum() * grid.dt == pytest.approx(1.0, abs=1e-12)
    assert table.pi[0] == 1.0
    assert np.all(np.diff(table.pi) <= 1e-12)
    assert np.all(np.diff(table.cdf) >= -1e-12)


# --- survivor simulation --------------------------------------------------------


def test_no_deaths_before_point_mass():
    grid = TimeGrid(0.25, 2.0)
    path = simulate_survivors(50, point_mass_table(grid), seed=5)
    assert np.all(path.counts == 50)


def test_mean_survivors_within_three_binomial_se():
    grid = TimeGrid(0.25, 1.0)
    table = uniform_table(grid)
    n = 10_000
    path = simulate_survivors(n, table, seed=11)
    pi = table.pi[: grid.n_steps]
    se = np.sqrt(n * pi * (1 - pi))
    assert np.all(np.abs(path.counts - n * pi) <= 3 * np.maximum(se, 1.0))


def test_survivor_simulation_deterministic():
    table = uniform_table(TimeGrid(0.25, 1.0))
    a = simulate_survivors(100, table, seed=9)
    b = simulate_survivors(100, table, seed=9)
    assert np.array_equal(a.counts, b.counts)


def test_survivor_path_monotone_validation():
    with pytest.raises(ValueError):
        SurvivorPath(5, np.array([5, 6, 3, 1]), seed=0)


def test_death_times_consistent_with_counts():
    grid = TimeGrid(0.25, 1.0)
    table = uniform_table(grid)
    taus = simulate_death_times(2000, table, seed=3)
    counts = counts_from_death_times(taus, grid)
    pi = table.pi[: grid.n_steps]
    se = np.sqrt(2000 * pi * (1 - pi))
    assert np.all(np.abs(counts - 2000 * pi) <= 4 * np.maximum(se, 1.0))


# --- survivor bound event -------------------------------------------------------


def test_bound_event_trivially_true_without_mortality():
    grid = TimeGrid(0.25, 2.0)
    table = point_mass_table(grid)
    path = simulate_survivors(30, table, seed=1)
    assert survivor_bound_event(path, table, lam=1.0)
    assert survivor_bound_event(path, table, lam=0.5)


def test_bound_event_false_when_count_exceeds_mean_at_lam_one():
    grid = TimeGrid(0.25, 1.0)
    table = uniform_table(grid)
    # A path where everyone survives to the second point: 10 > 10 * 0.75.
    path = SurvivorPath(10, np.array([10, 10, 5, 2]), seed=0)
    assert not survivor_bound_event(path, table, lam=1.0)


def test_bound_probability_increases_with_n():
    grid = TimeGrid(0.25, 1.0)
    table = uniform_table(grid)
    lam = 0.8
    probs = {}
    for n in (20, 400):
        chain = bound_chain(n, table, lam)
        probs[n] = chain.prob_bound_holds(grid.n_steps - 1)
    assert probs[400] > probs[20]
    # Monte Carlo agrees with the exact chain within 3 standard errors.
    counts = simulate_survivor_counts(20, table, trials=40_000, seed=21, label="bound-mc")
    mean = table.expected_survivors(20)
    events = np.all(counts <= mean / lam + 1e-9, axis=1)
    se = events.std(ddof=1) / np.sqrt(events.size)
    assert abs(events.mean() - probs[20]) < 3 * se


# --- finite time points ----------------------------------------------------------


def test_linear_survival_anchor_points():
    # pi(t) = 1 - t on a T=1 grid: anchors {0.5, 0} for t0=0.75, eps=0.5.
    grid = TimeGrid(0.25, 1.0)
    table = uniform_table(grid)
    anchors = finite_time_points(table, t0=0.75, eps=0.5)
    assert np.allclose(anchors, [0.5, 0.0])


def test_point_mass_gives_single_zero_anchor():
    grid = TimeGrid(0.25, 2.0)
    table = point_mass_table(grid)
    anchors = finite_time_points(table, t0=1.0, eps=0.3)
    assert np.allclose(anchors, [0.0])


def test_anchor_recursion_recheck_forward():
    grid = TimeGrid(1.0 / 64.0, 1.0)
    table = uniform_table(grid)
    eps = 0.3
    anchors = finite_time_points(table, t0=0.5, eps=eps)
    pi = table.pi[: grid.n_steps]
    seq = [0.5] + list(anchors)
    for prev_t, next_t in zip(seq, seq[1:]):
        prev, nxt = grid.index_of(prev_t), grid.index_of(next_t)
        assert nxt < prev
        target = pi[prev] / (1.0 - eps)
        # The chosen point satisfies the bound and is the earliest one to do so.
        assert pi[nxt] <= target * (1 + 1e-12)
        if nxt > 0:
            assert pi[nxt - 1] > target * (1 - 1e-12)
    assert anchors[-1] == 0.0


def test_t0_beyond_death_time_rejected():
    grid = TimeGrid(0.25, 1.0)
    table = point_mass_table(grid, at=0.5)
    with pytest.raises(ValueError):
        finite_time_points(table, t0=0.75, eps=0.3)


# --- the two-sided bound check ----------------------------------------------------


def test_bound_check_trivial_without_mortality():
    grid = TimeGrid(0.25, 2.0)
    table = point_mass_table(grid)
    report = check_time_point_bound(25, table, t0=1.0, eps=0.3, trials=2000, seed=2)
    assert report.lhs_prob == 1.0 and report.rhs_prob == 1.0
    assert not report.violation


def test_bound_check_uniform_table():
    grid = TimeGrid(1.0 / 16.0, 1.0)
    table = uniform_table(grid)
    report = check_time_point_bound(50, table, t0=0.5, eps=0.3, trials=20_000, seed=8)
    assert report.lhs_prob >= report.rhs_prob - 3 * np.hypot(report.lhs_se, report.rhs_se)
    assert not report.violation


def test_bound_check_single_life_matches_enumeration():
    # Oracle: with one life everything is a function of the death time, so
    # both probabilities are sums of death masses over explicit time sets.
    grid = TimeGrid(0.25, 1.0)
    table = uniform_table(grid)
    eps, t0 = 0.4, 0.5
    anchors = finite_time_points(table, t0, eps)
    pi = table.pi[: grid.n_steps]
    factor = 1.0 / (1.0 - eps)
    window = grid.points <= t0 + 1e-12
    masses = table.p * grid.dt

    def count_at(tau, t):
        return 1 if tau >= t - 1e-12 else 0

    lhs = rhs = 0.0
    for tau, mass in zip(grid.points, masses):
        counts = np.array([count_at(tau, t) for t in grid.points])
        if np.all(counts[window] <= factor**2 * pi[window] + 1e-9):
            lhs += mass
        aidx = [grid.index_of(t) for t in anchors]
        if np.all(counts[aidx] <= factor * pi[aidx] + 1e-9):
            rhs += mass
    assert lhs >= rhs - 1e-12
    report = check_time_point_bound(1, table, t0, eps, trials=40_000, seed=4)
    assert report.lhs_prob == pytest.approx(lhs, abs=4 * max(report.lhs_se, 1e-3))
    assert report.rhs_prob == pytest.approx(rhs, abs=4 * max(report.rhs_se, 1e-3))
    assert not report.violation


# --- exact chains ------------------------------------------------------------------


def test_bound_chain_count_marginal_matches_binomial():
    grid = TimeGrid(0.25, 1.0)
    table = uniform_table(grid)
    chain = bound_chain(8, table, lam=0.9)
    pi = table.pi[: grid.n_steps]
    from scipy import stats

    for t in range(grid.n_steps):
        exact = stats.binom.pmf(np.arange(9), 8, pi[t])
        assert np.allclose(chain.count[t], exact, atol=1e-12)


def test_bound_chain_joint_below_marginal():
    grid = TimeGrid(0.25, 1.0)
    chain = bound_chain(12, uniform_table(grid), lam=0.7)
    assert np.all(chain.joint <= chain.count + 1e-15)
    probs = [chain.prob_bound_holds(t) for t in range(grid.n_steps)]
    assert np.all(np.diff(probs) <= 1e-15)
