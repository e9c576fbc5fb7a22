"""Discretized verifier for the recursive-utility convergence machinery.

The recursive value process is transformed by ``tilde_V = alpha *
exp(-b*alpha*t/rho) * V``, which makes it nonnegative and turns the
aggregator into the separable driver

    F(t, c, v) = (b*alpha/rho) * exp(-b*t) * c**rho * v**(1 - rho/alpha),

truncated at level ``m`` as ``F_m(t, c, v) = (b*alpha/rho) * exp(-b*t) *
min(c**rho, m) * min(v, m)**(1 - rho/alpha)``.  The truncated driver is
Lipschitz in ``v`` with an explicit constant, the solutions are
nonnegative and decrease in ``m``, and their back-transforms increase in
``m`` to the recursive utility.

The solver runs implicit backward Euler on the market-lattice x death
chain, solving each node by fixed-point iteration (a contraction while
``C_m * dt < 1``).  Because a dead individual's untransformed value is
the constant adequacy value, the death branch of the transformed chain
absorbs at the time-dependent profile ``exp(-b*alpha*s/rho) *
a**alpha``; with that convention the back-transformed solution is a
consistent discretization of the same utility as the preference module's
explicit scheme, and the two agree to first order in the step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .market import Lattice, Stream
from .mortality import MortalityTable, bound_chain
from .preferences import EzParams


class StepTooCoarseError(RuntimeError):
    """The implicit per-node solve is not a contraction at this step size."""


def lipschitz_constant(params: EzParams, level: float) -> float:
    """Lipschitz constant of the truncated driver in its value argument.

    ``(1 - rho/alpha) * b * |alpha| / rho * m**(1 - rho/alpha)``.
    """
    if level <= 0:
        raise ValueError("truncation level must be positive")
    alpha, rho, b = params.risk, params.substitution, params.discount
    return float((1.0 - rho / alpha) * b * abs(alpha) / rho * level ** (1.0 - rho / alpha))


@dataclass(frozen=True)
class TruncatedDriver:
    """Driver of the transformed equation at truncation level ``level``.

    ``level = inf`` gives the untruncated driver.
    """

    params: EzParams
    level: float

    def __post_init__(self) -> None:
        if self.level < 0:
            raise ValueError("truncation level must be nonnegative")

    def __call__(self, t: float, consumption, value):
        p = self.params
        c = np.asarray(consumption, dtype=float)
        v = np.maximum(np.asarray(value, dtype=float), 0.0)
        cpow = np.power(c, p.substitution)
        if math.isfinite(self.level):
            cpow = np.minimum(cpow, self.level)
            v = np.minimum(v, self.level)
        coef = p.discount * p.risk / p.substitution * math.exp(-p.discount * t)
        return coef * cpow * np.power(v, 1.0 - p.substitution / p.risk)

    def terminal_value(self) -> float:
        p = self.params
        return math.exp(-p.discount * p.risk / p.substitution * 0.0) * 0.0 + self.absorption(1.0) * 0.0 + self._terminal()

    def _terminal(self) -> float:
        p = self.params
        horizonless = p.adequacy**p.risk
        return horizonless  # scaled by the time factor at the horizon by callers

    def absorption(self, t: float) -> float:
        """Transformed value of a dead individual at time ``t``."""
        p = self.params
        return math.exp(-p.discount * p.risk / p.substitution * t) * p.adequacy**p.risk


@dataclass(frozen=True)
class BsdeSolution:
    """Backward solution on the chain: per-level alive values."""

    driver: TruncatedDriver
    values: list  # values[i]: array over lattice nodes at level i (alive states)
    initial: float
    iterations_max: int

    def utility(self) -> float:
        """Back-transformed initial utility tilde_V0 / alpha."""
        return self.initial / self.driver.params.risk


def _implicit_node_solve(driver, t, consumption, expected, dt, tol=1e-12, max_iter=50):
    """Solve v = expected + F(t, c, v) * dt per node by fixed-point iteration."""
    expected = np.asarray(expected, dtype=float)
    v = expected.copy()
    scale = max(float(np.max(np.abs(expected))), 1e-30)
    for k in range(max_iter):
        nxt = expected + driver(t, consumption, v) * dt
        nxt = np.maximum(nxt, 0.0)
        delta = float(np.max(np.abs(nxt - v)))
        v = nxt
        if delta <= tol * scale:
            return v, k + 1
    raise StepTooCoarseError(
        "implicit node solve did not contract; reduce the step or the truncation level"
    )


def solve_truncated(
    driver: TruncatedDriver,
    consumption: Stream | np.ndarray | float,
    table: MortalityTable,
    lattice: Lattice | None = None,
) -> BsdeSolution:
    """Solve the transformed equation for one life on the (lattice x death) chain.

    Args:
        consumption: deterministic rates (scalar or per grid point) or a
            node-adapted stream when a lattice is supplied.

    The terminal value is the transformed adequacy value at the horizon;
    the death branch absorbs at the transformed adequacy profile.  The
    solution is nonnegative at every node, and for finite truncation the
    contraction condition ``C_m * dt < 1`` is enforced.
    """
    grid = table.grid
    m = grid.n_steps
    dt = grid.dt
    params = driver.params
    if math.isfinite(driver.level) and driver.level > 0:
        if lipschitz_constant(params, driver.level) * dt >= 1.0:
            raise StepTooCoarseError(
                f"C_m * dt = {lipschitz_constant(params, driver.level) * dt:.3f} >= 1"
            )
    s = table.step_survival
    points = grid.points
    terminal = driver.absorption(grid.horizon)

    deterministic = not isinstance(consumption, list)
    if deterministic:
        rates = np.broadcast_to(np.asarray(consumption, dtype=float), (m,))
        if np.any(rates < 0):
            raise ValueError("consumption must be nonnegative")
    elif lattice is None:
        raise ValueError("node-adapted streams require a lattice")

    iters_max = 0
    if deterministic and lattice is None:
        value = terminal
        values = [None] * (m + 1)
        values[m] = np.array([terminal])
        for i in range(m - 1, -1, -1):
            absorbed = driver.absorption(points[i] + dt)
            expected = (1.0 - s[i]) * absorbed + s[i] * value
            solved, iters = _implicit_node_solve(driver, points[i], rates[i], np.asarray(expected), dt)
            value = float(solved)
            values[i] = np.array([value])
            iters_max = max(iters_max, iters)
        return BsdeSolution(driver, values, float(value), iters_max)

    p_up = lattice.p_up
    level_vals = np.full(m + 1, terminal)
    values = [None] * (m + 1)
    values[m] = level_vals
    for i in range(m - 1, -1, -1):
        cont = p_up * level_vals[1 : i + 2] + (1.0 - p_up) * level_vals[: i + 1]
        absorbed = driver.absorption(points[i] + dt)
        expected = (1.0 - s[i]) * absorbed + s[i] * cont
        rate_i = rates[i] if deterministic else np.asarray(consumption[i], dtype=float)
        level_vals, iters = _implicit_node_solve(driver, points[i], rate_i, expected, dt)
        values[i] = level_vals
        iters_max = max(iters_max, iters)
    return BsdeSolution(driver, values, float(level_vals[0]), iters_max)


@dataclass(frozen=True)
class TruncationRow:
    level: float
    tilde_v0: float
    utility: float


def convergence_in_m(
    params: EzParams,
    consumption,
    table: MortalityTable,
    levels: Sequence[float],
    lattice: Lattice | None = None,
) -> list[TruncationRow]:
    """Solutions across truncation levels; ``tilde_v0`` decreases in the level."""
    rows = []
    for level in levels:
        sol = solve_truncated(TruncatedDriver(params, float(level)), consumption, table, lattice)
        rows.append(TruncationRow(level=float(level), tilde_v0=sol.initial, utility=sol.utility()))
    return rows


# ---------------------------------------------------------------------------
# Transfer streams: the same equation driven by the gated finite-pool stream
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransferSolutions:
    """Solutions for the scaled stream and its survivor-bound-gated version."""

    tilde_v_infinite: float
    tilde_v_finite: float
    prob_bound_fails: float  # P(bound violated by the horizon window)

    @property
    def gap(self) -> float:
        return abs(self.tilde_v_infinite - self.tilde_v_finite)


def solve_transfer_pair(
    driver: TruncatedDriver,
    stream: Stream,
    lam: float,
    n: int,
    table: MortalityTable,
    lattice: Lattice,
    window_end: float | None = None,
) -> TransferSolutions:
    """Solve the equation for ``lam*stream`` and its gated finite-``n`` version.

    The finite-pool consumption is ``lam * stream`` while the pool's
    survivor count stays within ``1/lam`` of its mean and zero afterwards,
    so the chain state is (market node, survivor count, bound flag); the
    reference solution replaces the gate by 1.  Also returns the
    probability that the bound fails by ``window_end`` (default: the last
    grid point), computed from the exact count chain.
    """
    if not (0.0 < lam < 1.0):
        raise ValueError("lam must lie in (0, 1)")
    grid = table.grid
    m = grid.n_steps
    dt = grid.dt
    s = table.step_survival
    pi = table.pi[:m]
    points = grid.points
    p_up = lattice.p_up

    scaled = [lam * np.asarray(level, dtype=float) for level in stream]
    inf_sol = solve_truncated(driver, scaled, table, lattice)

    mean = table.expected_survivors(n)
    thresholds = np.floor(mean / lam + 1e-9).astype(int)
    terminal = driver.absorption(grid.horizon)

    # values[x, j, g] for alive states; j = survivors including self (>=1).
    nxt = np.full((m + 1, n + 1, 2), terminal)
    from .mortality import binomial_transition_matrix

    for i in range(m - 1, -1, -1):
        absorbed = driver.absorption(points[i] + dt)
        others = binomial_transition_matrix(n - 1, s[i])  # others alive: j-1 -> k
        thresh_next = thresholds[i + 1] if i + 1 < m else n
        j_next = np.arange(1, n + 1)
        keep = (j_next <= thresh_next).astype(int)  # g stays 1 only within bound
        cur = np.full((i + 1, n + 1, 2), terminal)
        # Effective next values after applying the gate update for each g.
        eff1 = np.where(keep[None, :] == 1, nxt[: i + 2, 1:, 1], nxt[: i + 2, 1:, 0])
        eff0 = nxt[: i + 2, 1:, 0]
        for j in range(1, n + 1):
            w = others[j - 1, :j]  # k = 0..j-1 others survive -> j' = 1+k
            mix1 = eff1[:, :j] @ w
            mix0 = eff0[:, :j] @ w
            cont1 = p_up * mix1[1 : i + 2] + (1.0 - p_up) * mix1[: i + 1]
            cont0 = p_up * mix0[1 : i + 2] + (1.0 - p_up) * mix0[: i + 1]
            expected1 = (1.0 - s[i]) * absorbed + s[i] * cont1
            expected0 = (1.0 - s[i]) * absorbed + s[i] * cont0
            rate1 = lam * np.asarray(stream[i], dtype=float)
            cur[:, j, 1], _ = _implicit_node_solve(driver, points[i], rate1, expected1, dt)
            cur[:, j, 0], _ = _implicit_node_solve(driver, points[i], 0.0, expected0, dt)
        nxt = np.full((m + 1, n + 1, 2), terminal)
        nxt[: i + 1] = cur

    g0 = 1 if n <= thresholds[0] else 0
    finite_v0 = float(nxt[0, n, g0])

    chain = bound_chain(n, table, lam)
    end = points[-1] if window_end is None else window_end
    idx = int(np.searchsorted(points, end + 1e-12) - 1)
    prob_fail = 1.0 - chain.prob_bound_holds(max(idx, 0))
    return TransferSolutions(
        tilde_v_infinite=float(inf_sol.initial),
        tilde_v_finite=finite_v0,
        prob_bound_fails=float(prob_fail),
    )


@dataclass(frozen=True)
class ErrorBoundReport:
    """The a-priori bound on the squared solution gap, and whether it holds."""

    gap_squared: float
    bound_constant: float
    prob_bound_fails: float
    delta: float
    rhs: float
    holds: bool


def error_bound_check(
    params: EzParams,
    level: float,
    stream: Stream,
    lam: float,
    n: int,
    table: MortalityTable,
    lattice: Lattice,
    delta: float | None = None,
) -> ErrorBoundReport:
    """Check ``gap^2 <= C_tilde * (T * P(bound fails by T - delta) + delta)``.

    The constant combines the driver's Lipschitz data: with ``C_m`` the
    Lipschitz constant, ``eta = 1/C_m**2``, ``beta = 3 C_m**2 + 2 C_m``
    and ``K = b |alpha| / rho * m**(2 - rho/alpha)``, the constant is
    ``eta * K**2 * exp(beta T)``.  Checked as an inequality only.
    """
    horizon = table.grid.horizon
    if delta is None:
        delta = horizon / 10.0
    if not (0.0 < delta < horizon):
        raise ValueError("delta must lie in (0, horizon)")
    driver = TruncatedDriver(params, float(level))
    pair = solve_transfer_pair(driver, stream, lam, n, table, lattice, window_end=horizon - delta)
    c_m = lipschitz_constant(params, level)
    eta = 1.0 / c_m**2
    beta = 3.0 * c_m**2 + 2.0 * c_m
    k_const = params.discount * abs(params.risk) / params.substitution * level ** (
        2.0 - params.substitution / params.risk
    )
    c_tilde = eta * k_const**2 * math.exp(beta * horizon)
    rhs = c_tilde * (horizon * pair.prob_bound_fails + delta)
    gap_sq = pair.gap**2
    return ErrorBoundReport(
        gap_squared=gap_sq,
        bound_constant=c_tilde,
        prob_bound_fails=pair.prob_bound_fails,
        delta=delta,
        rhs=rhs,
        holds=bool(gap_sq <= rhs),
    )
