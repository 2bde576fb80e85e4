"""Closed-form per-agent subproblem solutions and price initialization.

Each agent minimizes a scalar objective over its power box given a price
signal. The two generator variants differ in whether the price multiplies the
raw output P (original) or the loss-adjusted net injection P - B*P^2
(corrected). All minimizers here are exact, not iterative.
"""

from __future__ import annotations

import math

from .scenario import AgentParams, ConsumerParams, GeneratorParams


def _require_finite(lam: float) -> None:
    if not math.isfinite(lam):
        raise ValueError(f"price signal must be finite, got {lam!r}")


def _clip(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def generator_response_original(p: GeneratorParams, lam: float) -> float:
    """argmin over [p_min, p_max] of a*P^2 + b*P + c - lam*P."""
    _require_finite(lam)
    return _clip((lam - p.b) / (2.0 * p.a), p.p_min, p.p_max)


def generator_response_corrected(p: GeneratorParams, lam: float) -> float:
    """argmin over [p_min, p_max] of C(P) - lam*(P - B*P^2).

    The objective is (a + lam*B)*P^2 + (b - lam)*P + c. For a + lam*B > 0 the
    unique minimizer is the clipped stationary point; for a + lam*B <= 0 (a
    transient, price deeply negative) the objective is concave or linear, so
    the minimum sits at an endpoint. Ties go to p_min.
    """
    _require_finite(lam)
    curv = p.a + lam * p.B
    if curv > 0.0:
        return _clip((lam - p.b) / (2.0 * curv), p.p_min, p.p_max)
    lin = p.b - lam
    lo = curv * p.p_min * p.p_min + lin * p.p_min
    hi = curv * p.p_max * p.p_max + lin * p.p_max
    return p.p_min if lo <= hi else p.p_max


def consumer_response(p: ConsumerParams, lam: float) -> float:
    """Exact minimizer over [p_min, p_max] of lam*P - U(P).

    U is concave increasing up to its saturation point w/(2*alpha) and flat
    beyond it, so: positive price -> clipped stationary point of the concave
    branch; zero price -> smallest maximizer of U (the clipped saturation
    point); negative price -> p_max.
    """
    _require_finite(lam)
    if lam < 0.0:
        return p.p_max
    if lam == 0.0:
        return _clip(p.saturation, p.p_min, p.p_max)
    return _clip((p.w - lam) / (2.0 * p.alpha), p.p_min, p.p_max)


def lambda_init(params: AgentParams) -> float:
    """Starting price of a node: marginal cost at the floor for generators
    (loss-adjusted), marginal utility at the cap for consumers.
    """
    if isinstance(params, GeneratorParams):
        divisor = 1.0 - 2.0 * params.B * params.p_min
        if divisor <= 0.0:
            raise ValueError("2*B*p_min >= 1; loss-adjusted marginal cost undefined")
        return params.marginal_cost(params.p_min) / divisor
    if isinstance(params, ConsumerParams):
        if params.p_max <= params.saturation:
            return params.w - 2.0 * params.alpha * params.p_max
        return 0.0
    raise TypeError(f"unsupported agent parameters: {type(params).__name__}")
