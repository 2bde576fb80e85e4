"""Centralized ground truth: price bisection, KKT certification, diagnostics.

The convex dispatch problem minimizes total generation cost minus consumer
utility subject to net supply >= demand and per-agent boxes. Because every
best response is monotone in the price, the aggregate balance function

    g(lam) = sum_gen net(response_corrected(lam)) - sum_cons response(lam)

is nondecreasing, so the optimum is found by bisection on lam >= 0. The KKT
checker certifies arbitrary candidates by recovering bound multipliers from
complementarity and reporting every residual; the brute-force grid search is
the independent cross-check for the bisection route.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .best_response import consumer_response, generator_response_corrected
from .scenario import NodeKind, Scenario

DEFAULT_SOLVE_TOL = 1e-9
ACTIVE_BOUND_TOL = 1e-7
MAX_BRACKET_DOUBLINGS = 60
MAX_BISECT_ITERS = 200


class InfeasibleScenarioError(ValueError):
    pass


class BracketError(RuntimeError):
    pass


def objective_value(scenario: Scenario, P: np.ndarray) -> float:
    """Total cost minus total utility at a full node-order power vector."""
    P = np.asarray(P, dtype=float)
    total = 0.0
    for i in range(scenario.n_nodes):
        params = scenario.node_params(i)
        if scenario.graph.node_kind[i] is NodeKind.GENERATOR:
            total += params.cost(float(P[i]))
        else:
            total -= params.utility(float(P[i]))
    return total


def _responses(scenario: Scenario, lam: float) -> np.ndarray:
    P = np.empty(scenario.n_nodes)
    for i in range(scenario.n_nodes):
        params = scenario.node_params(i)
        if scenario.graph.node_kind[i] is NodeKind.GENERATOR:
            P[i] = generator_response_corrected(params, lam)
        else:
            P[i] = consumer_response(params, lam)
    return P


def _balance(scenario: Scenario, lam: float) -> float:
    total = 0.0
    for i in range(scenario.n_nodes):
        params = scenario.node_params(i)
        if scenario.graph.node_kind[i] is NodeKind.GENERATOR:
            P = generator_response_corrected(params, lam)
            total += P - params.B * P * P
        else:
            total -= consumer_response(params, lam)
    return total


@dataclass(frozen=True, eq=False)
class CentralSolution:
    lam: float
    P: np.ndarray
    objective: float
    balance_residual: float
    bracket_width: float
    iterations: int


def solve_centralized(scenario: Scenario, tol: float = DEFAULT_SOLVE_TOL) -> CentralSolution:
    """Solve the relaxed dispatch problem by bisection on the balance price.

    Returns the full node-order power vector and the price. The slack-balance
    case (net supply covers peak demand at zero price) returns lam = 0
    without bisection. Bisection terminates only when both |g(lam)| <= tol and
    the bracket width is <= tol*max(1, lam); failure to bracket raises.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    feasible, slack = _feasibility(scenario)
    if not feasible:
        raise InfeasibleScenarioError(
            f"demand headroom violated: sum_cons p_max - sum_gen (p_min - B*p_max^2) = {slack}"
        )
    max_supply = sum(g.p_max - g.B * g.p_max * g.p_max for g in scenario.generators)
    min_demand = sum(c.p_min for c in scenario.consumers)
    if max_supply < min_demand:
        raise InfeasibleScenarioError(
            f"demand floor {min_demand} exceeds maximal net supply {max_supply}"
        )

    g0 = _balance(scenario, 0.0)
    if g0 >= 0.0:
        P = _responses(scenario, 0.0)
        return CentralSolution(
            lam=0.0,
            P=P,
            objective=objective_value(scenario, P),
            balance_residual=g0,
            bracket_width=0.0,
            iterations=0,
        )

    hi = 0.0
    for g in scenario.generators:
        hi = max(hi, g.marginal_cost(g.p_max) / (1.0 - 2.0 * g.B * g.p_max))
    for c in scenario.consumers:
        hi = max(hi, c.marginal_utility(c.p_min))
    if hi <= 0.0:
        hi = 1.0
    doublings = 0
    while _balance(scenario, hi) < 0.0:
        hi *= 2.0
        doublings += 1
        if doublings > MAX_BRACKET_DOUBLINGS:
            raise BracketError(f"could not bracket the balance price; g({hi}) < 0")

    lo = 0.0
    lam = hi
    g_lam = _balance(scenario, lam)
    iterations = 0
    while iterations < MAX_BISECT_ITERS:
        mid = 0.5 * (lo + hi)
        g_mid = _balance(scenario, mid)
        if g_mid >= 0.0:
            hi, lam, g_lam = mid, mid, g_mid
        else:
            lo = mid
        iterations += 1
        if abs(g_lam) <= tol and (hi - lo) <= tol * max(1.0, lam):
            break
        if hi - lo <= np.finfo(float).eps * max(1.0, hi):
            break
    else:
        raise BracketError("bisection failed to reach the requested tolerance")
    if abs(g_lam) > tol:
        raise BracketError(
            f"bisection stalled: |g(lam)| = {abs(g_lam)} > tol = {tol} at lam = {lam}"
        )

    P = _responses(scenario, lam)
    return CentralSolution(
        lam=lam,
        P=P,
        objective=objective_value(scenario, P),
        balance_residual=g_lam,
        bracket_width=hi - lo,
        iterations=iterations,
    )


def _feasibility(scenario: Scenario):
    lhs = sum(c.p_max for c in scenario.consumers)
    rhs = sum(g.p_min - g.B * g.p_max * g.p_max for g in scenario.generators)
    return lhs - rhs >= 0.0, lhs - rhs


# ---------------------------------------------------------------------------
# KKT certification


@dataclass(frozen=True, eq=False)
class KktReport:
    """Residuals of the first-order optimality system with recovered bound
    multipliers. All pathologies show up as residuals, never as exceptions."""

    lam: float
    gamma: np.ndarray
    nu: np.ndarray
    stationarity: np.ndarray
    balance_complementarity: float
    lower_complementarity: np.ndarray
    upper_complementarity: np.ndarray
    balance_slack: float
    lower_slack: np.ndarray
    upper_slack: np.ndarray
    max_residual: float
    certified: bool
    tol: float = field(default=0.0)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "gamma": self.gamma.tolist(),
            "nu": self.nu.tolist(),
            "stationarity": self.stationarity.tolist(),
            "complementarity": {
                "balance": self.balance_complementarity,
                "lower": self.lower_complementarity.tolist(),
                "upper": self.upper_complementarity.tolist(),
            },
            "primal_feasibility": {
                "balance_slack": self.balance_slack,
                "lower_slack": self.lower_slack.tolist(),
                "upper_slack": self.upper_slack.tolist(),
            },
            "max_residual": self.max_residual,
            "certified": self.certified,
            "tol": self.tol,
        }


def kkt_check(
    P: np.ndarray,
    lam: float,
    scenario: Scenario,
    tol: float = 1e-6,
    active_tol: float = ACTIVE_BOUND_TOL,
) -> KktReport:
    """Certify a candidate (P, lam) against the first-order conditions.

    Bound multipliers are recovered from complementarity: they are nonzero
    only at active bounds, set to the value that zeroes the stationarity
    expression there, then clamped at zero with any shortfall reported as a
    stationarity residual. Box violations appear as negative primal slack,
    not as errors.
    """
    P = np.asarray(P, dtype=float)
    n = scenario.n_nodes
    gamma = np.zeros(n)
    nu = np.zeros(n)
    stationarity = np.zeros(n)
    lower_slack = np.zeros(n)
    upper_slack = np.zeros(n)

    net_supply = 0.0
    demand = 0.0
    for i in range(n):
        params = scenario.node_params(i)
        Pi = float(P[i])
        if scenario.graph.node_kind[i] is NodeKind.GENERATOR:
            # stationarity: C'(P) - lam*(1 - 2BP) - gamma + nu = 0
            expr = params.marginal_cost(Pi) - lam * (1.0 - 2.0 * params.B * Pi)
            net_supply += Pi - params.B * Pi * Pi
        else:
            # stationarity: lam - U'(P) - gamma + nu = 0
            expr = lam - params.marginal_utility(Pi)
            demand += Pi
        lower_slack[i] = Pi - params.p_min
        upper_slack[i] = params.p_max - Pi
        at_lower = abs(Pi - params.p_min) <= active_tol
        at_upper = abs(Pi - params.p_max) <= active_tol
        if at_lower and expr >= 0.0:
            gamma[i] = expr
        elif at_upper and expr <= 0.0:
            nu[i] = -expr
        else:
            stationarity[i] = expr

    balance_slack = net_supply - demand
    balance_complementarity = lam * (demand - net_supply)
    lower_complementarity = np.abs(gamma * lower_slack)
    upper_complementarity = np.abs(nu * upper_slack)

    residuals = [
        float(np.abs(stationarity).max(initial=0.0)),
        abs(balance_complementarity),
        float(lower_complementarity.max(initial=0.0)),
        float(upper_complementarity.max(initial=0.0)),
        max(0.0, -balance_slack),
        float(np.maximum(-lower_slack, 0.0).max(initial=0.0)),
        float(np.maximum(-upper_slack, 0.0).max(initial=0.0)),
        max(0.0, -lam),
    ]
    max_residual = max(residuals)
    return KktReport(
        lam=float(lam),
        gamma=gamma,
        nu=nu,
        stationarity=stationarity,
        balance_complementarity=balance_complementarity,
        lower_complementarity=lower_complementarity,
        upper_complementarity=upper_complementarity,
        balance_slack=balance_slack,
        lower_slack=lower_slack,
        upper_slack=upper_slack,
        max_residual=max_residual,
        certified=max_residual <= tol,
        tol=tol,
    )


def implied_prices(P_gen, scenario: Scenario, variant: str) -> np.ndarray:
    """Per-generator price each variant's stationarity implies at powers P_gen.

    original:  2a*P + b          (raw marginal cost)
    corrected: (2a*P + b)/(1 - 2B*P)  (loss-adjusted marginal cost)

    At a true optimum the corrected values of interior generators coincide;
    the original values generally cannot, which is the contradiction this
    toolkit reproduces.
    """
    P_gen = np.asarray(P_gen, dtype=float)
    if P_gen.size != len(scenario.generators):
        raise ValueError("expected one power per generator")
    out = np.empty(P_gen.size)
    for j, g in enumerate(scenario.generators):
        mc = g.marginal_cost(float(P_gen[j]))
        if variant == "original":
            out[j] = mc
        elif variant == "corrected":
            out[j] = mc / (1.0 - 2.0 * g.B * float(P_gen[j]))
        else:
            raise ValueError(f"unknown variant {variant!r}")
    return out


# ---------------------------------------------------------------------------
# independent brute-force reference


@dataclass(frozen=True, eq=False)
class BruteForceResult:
    P: np.ndarray
    objective: float
    grid_step: float


def _demand_curve(scenario: Scenario):
    """Knots of the piecewise-linear aggregate demand as a function of price."""
    knots = {0.0}
    for c in scenario.consumers:
        knots.add(max(0.0, c.w - 2.0 * c.alpha * c.p_max))
        knots.add(max(0.0, c.w - 2.0 * c.alpha * c.p_min))
    mu = np.array(sorted(knots))
    demand = np.zeros_like(mu)
    for c in scenario.consumers:
        demand += _consumer_response_vec(c, mu)
    return mu, demand


def _consumer_response_vec(c, mu: np.ndarray) -> np.ndarray:
    x = np.where(mu > 0.0, (c.w - mu) / (2.0 * c.alpha), c.saturation)
    return np.clip(x, c.p_min, c.p_max)


def _consumer_allocation_value(scenario: Scenario, S: np.ndarray, mu_knots, demand_knots):
    """Best total utility given net supply S, via the balancing price.

    Demand is nonincreasing piecewise-linear in the price, so inverting it at
    S (between knots) is exact; consumers then respond to that price.
    """
    d0 = demand_knots[0]
    x = demand_knots[::-1]
    y = mu_knots[::-1]
    mu = np.where(S >= d0, 0.0, np.interp(S, x, y))
    value = np.zeros_like(S)
    for c in scenario.consumers:
        r = _consumer_response_vec(c, mu)
        sat = c.saturation
        value += np.where(r <= sat, c.w * r - c.alpha * r * r, c.w * c.w / (4.0 * c.alpha))
    return value


def _axis_grid(lo: float, hi: float, step: float) -> np.ndarray:
    g = lo + step * np.arange(int(np.floor((hi - lo) / step)) + 1)
    if g[-1] < hi:
        g = np.append(g, hi)
    return g


def brute_force_reference(scenario: Scenario, grid_step: float) -> BruteForceResult:
    """Grid search over generator powers; consumers take the balancing price.

    Feasibility keeps net supply >= the consumer demand floor (the relaxed
    balance as an inequality). Returns the best feasible grid point, ties
    resolved to the lexicographically smallest one. Cost grows with the
    product of the generator grids, so at most 3 generators are accepted.
    """
    n_gen = len(scenario.generators)
    if not (1 <= n_gen <= 3):
        raise ValueError("brute force supports 1 to 3 generators")
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")

    mu_knots, demand_knots = _demand_curve(scenario)
    demand_floor = sum(c.p_min for c in scenario.consumers)
    grids = [_axis_grid(g.p_min, g.p_max, grid_step) for g in scenario.generators]
    nets = [grid - g.B * grid * grid for g, grid in zip(scenario.generators, grids)]
    costs = [g.a * grid * grid + g.b * grid + g.c for g, grid in zip(scenario.generators, grids)]

    best_val = np.inf
    best_gen = None
    chunk = 128
    for s in range(0, len(grids[0]), chunk):
        if n_gen == 1:
            S = nets[0][s:s + chunk]
            base = costs[0][s:s + chunk]
        elif n_gen == 2:
            S = nets[0][s:s + chunk, None] + nets[1][None, :]
            base = costs[0][s:s + chunk, None] + costs[1][None, :]
        else:
            S = (nets[0][s:s + chunk, None, None] + nets[1][None, :, None]
                 + nets[2][None, None, :])
            base = (costs[0][s:s + chunk, None, None] + costs[1][None, :, None]
                    + costs[2][None, None, :])
        obj = np.where(
            S >= demand_floor - 1e-12,
            base - _consumer_allocation_value(scenario, S, mu_knots, demand_knots),
            np.inf,
        )
        flat = int(np.argmin(obj))
        val = float(obj.flat[flat])
        if val < best_val:
            idx = np.unravel_index(flat, np.shape(obj))
            point = [grids[0][s + idx[0]]]
            for axis in range(1, n_gen):
                point.append(grids[axis][idx[axis]])
            best_val = val
            best_gen = point

    if best_gen is None or not np.isfinite(best_val):
        raise InfeasibleScenarioError("no feasible grid point: demand floor exceeds net supply")

    # rebuild the full node vector: consumers at the balancing price of the
    # winning supply level
    S_best = sum(g - gp.B * g * g for gp, g in zip(scenario.generators, best_gen))
    d0 = demand_knots[0]
    mu = 0.0 if S_best >= d0 else float(
        np.interp(S_best, demand_knots[::-1], mu_knots[::-1])
    )
    P = np.empty(scenario.n_nodes)
    gi = iter(best_gen)
    for i in range(scenario.n_nodes):
        if scenario.graph.node_kind[i] is NodeKind.GENERATOR:
            P[i] = next(gi)
        else:
            P[i] = consumer_response(scenario.node_params(i), mu)
    return BruteForceResult(P=P, objective=best_val, grid_step=grid_step)
