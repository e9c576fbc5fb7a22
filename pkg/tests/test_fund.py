import numpy as np
import pytest

from tontine.fund import (
    ConstantRateStrategy,
    PathBundle,
    equal_split,
    evolve_finite,
    evolve_heterogeneous,
    evolve_infinite,
)
from tontine.grid import TimeGrid
from tontine.market import MarketModel, build_lattice, sample_lattice_paths
from tontine.mortality import (
    point_mass_table,
    simulate_survivor_counts,
    uniform_table,
)
from tontine.preferences import LogUtility, VnmParams, vnm_utility
from tontine.rng import substream


def flat_paths(grid, rate=0.0):
    """Deterministic all-bond path bundle (risky return pinned to bond)."""
    bond = np.full(grid.n_steps, np.exp(rate * grid.dt))
    return PathBundle(grid, bond[None, :].copy(), bond, None)


def lattice_paths(grid, n_paths=32, seed=0, mu=0.05, sigma=0.2, rate=0.01):
    model = MarketModel(rate=rate, mu=(mu,), sigma=(sigma,), s0=(1.0,))
    lat = build_lattice(model, grid)
    return lat, PathBundle.from_lattice_paths(sample_lattice_paths(lat, n_paths, "P", seed))


# --- finite pools -----------------------------------------------------------------


def test_zero_consumption_all_bond_conserves_wealth():
    grid = TimeGrid(0.25, 2.0)
    counts = np.full((1, grid.n_steps), 5)
    traj = evolve_finite(ConstantRateStrategy(0.0), flat_paths(grid), counts, np.full(5, 2.0))
    assert np.allclose(traj.pre_value, 10.0)
    assert traj.admissible.all()


def test_equal_drawdown_exhausts_fund_exactly():
    # Consume total F / (remaining points) at each point, bond at r=0.
    grid = TimeGrid(0.25, 1.0)
    m = grid.n_steps
    n = 4

    class Drawdown:
        def consumption_rate(self, t_idx, alive, wealth, node=None):
            remaining = m - t_idx
            return wealth / (alive * remaining * grid.dt)

        def risky_fraction(self, t_idx, alive, wealth, node=None):
            return np.zeros_like(np.asarray(wealth))

    counts = np.full((1, m), n)
    traj = evolve_finite(Drawdown(), flat_paths(grid), counts, np.ones(n))
    assert traj.post_value[0, -1] == pytest.approx(0.0, abs=1e-12)
    assert traj.pre_value[0, -1] == pytest.approx(0.0, abs=1e-12)
    assert traj.admissible.all()
    # Budget identity at r=0: total consumption + terminal = initial.
    assert traj.total_consumption()[0] + traj.pre_value[0, -1] == pytest.approx(4.0, rel=1e-12)


def test_overdraw_flagged_not_thrown():
    grid = TimeGrid(0.25, 1.0)
    counts = np.full((1, grid.n_steps), 2)
    traj = evolve_finite(ConstantRateStrategy(100.0), flat_paths(grid), counts, np.ones(2))
    assert not traj.admissible[0]
    assert traj.first_violation[0] == 0


def test_self_financing_identity_on_lattice_paths():
    grid = TimeGrid(0.25, 2.0)
    lat, paths = lattice_paths(grid, n_paths=64, seed=4)
    counts = simulate_survivor_counts(10, uniform_table(grid), trials=64, seed=5)
    traj = evolve_finite(ConstantRateStrategy(0.02, fraction=0.4), paths, counts, np.ones(10))
    gross = 0.4 * paths.risky_gross + 0.6 * paths.bond_gross[None, :]
    assert np.allclose(traj.pre_value[:, 1:], traj.post_value * gross, rtol=1e-13)
    drains = counts * traj.rate * grid.dt
    assert np.allclose(traj.post_value, traj.pre_value[:, :-1] - drains, rtol=1e-13)


# --- infinite pools -----------------------------------------------------------------


def test_infinite_zero_consumption_compounds_at_portfolio_return():
    grid = TimeGrid(0.5, 2.0)
    lat, paths = lattice_paths(grid, n_paths=8, seed=1)
    table = uniform_table(grid)
    traj = evolve_infinite(ConstantRateStrategy(0.0, fraction=1.0), paths, table, 1.0)
    assert np.allclose(traj.pre_value[:, -1], np.prod(paths.risky_gross, axis=1), rtol=1e-13)


def test_point_mass_mortality_finite_equals_infinite_per_unit_budget():
    grid = TimeGrid(0.25, 1.0)
    table = point_mass_table(grid)
    strategy = ConstantRateStrategy(0.3, fraction=0.5)
    lat, paths = lattice_paths(grid, n_paths=16, seed=2)
    n = 7
    counts = np.broadcast_to(n, (16, grid.n_steps)).copy()
    fin = evolve_finite(strategy, paths, counts, np.ones(n))
    inf = evolve_infinite(strategy, paths, table, 1.0)
    assert np.allclose(fin.pre_value / n, inf.pre_value, rtol=1e-12)


def test_annuity_rate_exhausts_budget_against_expected_survival():
    grid = TimeGrid(0.25, 1.0)
    table = uniform_table(grid)
    x0 = 1.0
    rate = x0 / (np.sum(table.pi[: grid.n_steps]) * grid.dt)
    traj = evolve_infinite(ConstantRateStrategy(rate), flat_paths(grid), table, x0)
    assert traj.post_value[0, -1] == pytest.approx(0.0, abs=1e-12)
    assert traj.admissible.all()


# --- heterogeneous pools ---------------------------------------------------------------


def test_single_type_reduces_to_infinite_evolution():
    grid = TimeGrid(0.25, 1.0)
    table = uniform_table(grid)
    rates = np.array([0.4, 0.5, 0.6, 0.7])
    lat, paths = lattice_paths(grid, n_paths=8, seed=3)
    het = evolve_heterogeneous([rates], [1.0], [1.0], [table], paths, allocation=0.25)

    class StreamPolicy:
        def consumption_rate(self, t_idx, alive, wealth, node=None):
            return np.broadcast_to(rates[t_idx], np.shape(wealth))

        def risky_fraction(self, t_idx, alive, wealth, node=None):
            return np.full(np.shape(wealth), 0.25)

    inf = evolve_infinite(StreamPolicy(), paths, table, 1.0)
    assert np.allclose(het.pre_value, inf.pre_value, rtol=1e-13)


def test_two_types_one_consuming_zero():
    grid = TimeGrid(0.25, 1.0)
    table_a = uniform_table(grid)
    table_b = point_mass_table(grid)
    rates_b = np.full(grid.n_steps, 0.8)
    het = evolve_heterogeneous(
        [np.zeros(grid.n_steps), rates_b],
        [0.25, 0.75],
        [1.0, 2.0],
        [table_a, table_b],
        flat_paths(grid),
    )
    # Drain equals the consuming type's weighted consumption only.
    drains = het.pre_value[0, :-1] - het.post_value[0]
    expected = 0.75 * table_b.pi[: grid.n_steps] * rates_b * grid.dt
    assert np.allclose(drains, expected, atol=1e-14)
    assert het.pre_value[0, 0] == pytest.approx(0.25 * 1.0 + 0.75 * 2.0)


def test_virtual_individual_equivalence():
    # Replacing each type by a no-mortality type consuming pi-weighted
    # rates leaves the trajectory unchanged, path by path.
    grid = TimeGrid(0.25, 2.0)
    tables = [uniform_table(grid), point_mass_table(grid)]
    rates = [np.linspace(0.5, 0.9, grid.n_steps), np.linspace(0.3, 0.1, grid.n_steps)]
    weights = [1.0 / 3.0, 2.0 / 3.0]
    budgets = [1.0, 1.5]
    lat, paths = lattice_paths(grid, n_paths=16, seed=6)
    real = evolve_heterogeneous(rates, weights, budgets, tables, paths, allocation=0.5)
    virtual_rates = [r * t.pi[: grid.n_steps] for r, t in zip(rates, tables)]
    no_mortality = [point_mass_table(grid), point_mass_table(grid)]
    virtual = evolve_heterogeneous(virtual_rates, weights, budgets, no_mortality, paths, allocation=0.5)
    assert np.allclose(real.pre_value, virtual.pre_value, rtol=1e-13)


def test_weight_validation():
    grid = TimeGrid(0.25, 1.0)
    with pytest.raises(ValueError):
        evolve_heterogeneous(
            [np.zeros(4)], [0.7], [1.0], [uniform_table(grid)], flat_paths(grid)
        )


# --- equal split ------------------------------------------------------------------------


def test_equal_split_identity_for_equal_consumptions():
    grid = TimeGrid(0.25, 1.0)
    death = np.array([1.0, 1.0, 1.0])
    cons = np.full((3, grid.n_steps), 1.2)
    out = equal_split(cons, death, grid)
    assert np.allclose(out, cons)


def test_equal_split_single_survivor_takes_total():
    grid = TimeGrid(0.25, 1.0)
    death = np.array([0.0, 0.25, 1.0])
    cons = np.array(
        [
            [1.0, 9.0, 9.0, 9.0],
            [1.0, 1.0, 9.0, 9.0],
            [1.0, 1.0, 1.0, 1.0],
        ]
    )
    out = equal_split(cons, death, grid)
    # At t=0.5 and t=0.75 only individual 2 is alive and takes the total.
    assert out[2, 2] == pytest.approx(cons[:, 2].sum())
    assert out[0, 2] == 0.0 and out[1, 2] == 0.0
    # Totals preserved at every point with a survivor.
    assert np.allclose(out.sum(axis=0), cons.sum(axis=0))


def test_equal_split_weakly_improves_concave_gain():
    grid = TimeGrid(0.25, 1.0)
    gain = VnmParams(LogUtility())
    gen = substream(77, "equal-split-test")
    n = 5
    for _ in range(300):
        death = grid.points[gen.integers(0, grid.n_steps, size=n)]
        alive = grid.points[None, :] <= death[:, None] + 1e-12
        cons = np.where(alive, gen.uniform(0.2, 2.0, (n, grid.n_steps)), 0.0)
        split = equal_split(cons, death, grid)
        weights = np.full(n, 1.0 / n)
        before = np.mean(
            [
                vnm_utility(gain, cons[i : i + 1], death[i : i + 1], np.array([1.0]), grid.points, grid.dt)
                for i in range(n)
            ]
        )
        after = np.mean(
            [
                vnm_utility(gain, split[i : i + 1], death[i : i + 1], np.array([1.0]), grid.points, grid.dt)
                for i in range(n)
            ]
        )
        assert after >= before - 1e-10
