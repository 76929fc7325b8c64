"""Simulation oracles for the quantities that drive the convergence analysis.

Policies are passed either as :class:`GaussianPolicyParams` or as propensity
matrices of shape (n_eval, K) aligned with the environment's eval contexts.
Expectations over contexts are averages over those eval contexts, and costs
enter through ``E[c^2 | x, a] = p_{x,a}`` (costs are binary).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import Environment, true_risk
from .policy import QUADRATURE, GaussianPolicyParams, PropensityConfig, propensities, propensity_matrix

DEFAULT_U_GRID = (0.0, 0.1, 0.25, 0.5)


def optimal_policy(env: Environment, round: int | None = None) -> np.ndarray:
    _, labels = env.eval_set(round)
    P = np.zeros((labels.size, env.num_actions))
    P[np.arange(labels.size), labels] = 1.0
    return P


def policy_matrix(env: Environment, policy, round: int | None = None,
                  cfg: PropensityConfig = QUADRATURE) -> np.ndarray:
    X, labels = env.eval_set(round)
    if isinstance(policy, GaussianPolicyParams):
        return propensity_matrix(policy, X, cfg)
    P = np.asarray(policy, dtype=np.float64)
    if P.shape != (labels.size, env.num_actions):
        raise ValueError(f"policy matrix must have shape {(labels.size, env.num_actions)}")
    return P


def _second_moments(env, round):
    _, labels = env.eval_set(round)
    return env.cost_prob_matrix(labels)


def _check_support(target, behavior):
    bad = (target > 0) & (behavior <= 0)
    if bad.any():
        raise ValueError("behaviour propensity is zero where the target puts mass")


def pseudo_variance(env: Environment, target, behavior, round: int | None = None) -> float:
    """``E_x sum_a target(a|x) E[c^2|x,a] / behavior(a|x)``."""
    T = policy_matrix(env, target, round)
    B = policy_matrix(env, behavior, round)
    _check_support(T, B)
    C2 = _second_moments(env, round)
    ratio = np.divide(T * C2, B, out=np.zeros_like(T), where=T > 0)
    return float(np.mean(ratio.sum(axis=1)))


def l_term(env: Environment, target, behavior, round: int | None = None) -> float:
    """``E_x[ E_behavior[c^2] + E_target[c^2 (1 / behavior(a|x) - 2)] ]``."""
    T = policy_matrix(env, target, round)
    B = policy_matrix(env, behavior, round)
    _check_support(T, B)
    C2 = _second_moments(env, round)
    inv = np.divide(1.0, B, out=np.zeros_like(B), where=T > 0)
    per_x = (B * C2).sum(axis=1) + (T * C2 * (inv - 2.0)).sum(axis=1)
    return float(np.mean(per_x))


def optimal_action_propensity(env: Environment, policy, round: int | None = None,
                              cfg: PropensityConfig = QUADRATURE) -> np.ndarray:
    X, labels = env.eval_set(round)
    if isinstance(policy, GaussianPolicyParams):
        return propensities(policy, X, labels, cfg)
    P = policy_matrix(env, policy, round)
    return P[np.arange(labels.size), labels]


def coverage_cstar(env: Environment, policy, round: int | None = None,
                   cfg: PropensityConfig = QUADRATURE) -> float:
    """``min_x pi(a*(x)|x)`` over the eval contexts."""
    return float(np.min(optimal_action_propensity(env, policy, round, cfg)))


def min_gaps(env: Environment, round: int | None = None) -> np.ndarray:
    """Per-context ``min_{a != a*} c(a, x) - c(a*, x)``."""
    _, labels = env.eval_set(round)
    C = -env.cost_prob_matrix(labels)
    rows = np.arange(labels.size)
    best = C[rows, labels]
    other = C.copy()
    other[rows, labels] = np.inf
    return other.min(axis=1) - best


def delta_u_from_gaps(gaps, u: float) -> float:
    """Largest threshold ``D`` with ``P(gap >= D) >= 1 - u`` under the empirical law."""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must lie in [0, 1), got {u}")
    g = np.sort(np.asarray(gaps, dtype=np.float64))
    n = g.size
    i = min(int(math.floor(n * u + 1e-9)), n - 1)
    return float(g[i])


def delta_u(env: Environment, u: float, round: int | None = None) -> float:
    return delta_u_from_gaps(min_gaps(env, round), u)


def gamma_from(cstar: float, gap: float, u: float) -> float:
    """``1 + (1/4 + 1/C*) / (Delta_u (1 - u))``."""
    if not gap > 0:
        raise ValueError("Delta_u must be positive")
    if not cstar > 0:
        raise ValueError("coverage C* must be positive")
    return 1.0 + (0.25 + 1.0 / cstar) / (gap * (1.0 - u))


def gamma_uniform_from(cstar: float, gap: float, u: float) -> float:
    """The uniform bound ``3 / (Delta_u (1 - u) C*)``."""
    if not gap > 0:
        raise ValueError("Delta_u must be positive")
    if not cstar > 0:
        raise ValueError("coverage C* must be positive")
    return 3.0 / (gap * (1.0 - u) * cstar)


def gamma_k(env: Environment, policy, u: float = 0.0, round: int | None = None) -> float:
    return gamma_from(coverage_cstar(env, policy, round), delta_u(env, u, round), u)


def gamma_uniform_bound(env: Environment, policy, u: float = 0.0,
                        round: int | None = None) -> float:
    return gamma_uniform_from(coverage_cstar(env, policy, round), delta_u(env, u, round), u)


def optimal_risk(env: Environment, round: int | None = None) -> float:
    return true_risk(env, optimal_policy(env, round), round)


@dataclass
class LemmaReport:
    lhs: float
    rhs: float
    holds: bool
    gamma: float = math.nan
    cstar: float = math.nan
    delta_u: float = math.nan
    u: float = 0.0
    skipped: str | None = None

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs


def check_acceleration_lemma(env: Environment, policy, u: float = 0.0,
                             round: int | None = None, rtol: float = 1e-12) -> LemmaReport:
    """Compare ``L(pi*, pi_k)`` with ``gamma_k (R(pi_k) - R(pi*))``."""
    P = policy_matrix(env, policy, round)
    labels = env.eval_set(round)[1]
    cstar = float(P[np.arange(labels.size), labels].min())
    gap = delta_u(env, u, round)
    if not (cstar > 0 and gap > 0):
        reason = "coverage C* is zero" if not cstar > 0 else "Delta_u is zero"
        return LemmaReport(math.nan, math.nan, False, cstar=cstar, delta_u=gap, u=u,
                           skipped=reason)
    gamma = gamma_from(cstar, gap, u)
    lhs = l_term(env, optimal_policy(env, round), P, round)
    sub = true_risk(env, P, round) - optimal_risk(env, round)
    rhs = gamma * sub
    holds = lhs <= rhs + rtol * max(1.0, abs(rhs))
    return LemmaReport(lhs, rhs, bool(holds), gamma, cstar, gap, u)


@dataclass
class TheorySnapshot:
    round: int
    pseudo_variance: float
    l_term: float
    cstar: float
    delta_u: dict = field(default_factory=dict)
    gamma: float = math.nan
    suboptimality: float = math.nan

    def to_json(self) -> str:
        d = asdict(self)
        d["delta_u"] = {str(k): v for k, v in self.delta_u.items()}
        return json.dumps({k: _json_num(v) for k, v in d.items()})


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def theory_snapshot(env: Environment, policy, round: int, u_grid=DEFAULT_U_GRID,
                    env_round: int | None = None) -> TheorySnapshot:
    """All oracle quantities for the behaviour policy of one round."""
    P = policy_matrix(env, policy, env_round)
    star = optimal_policy(env, env_round)
    labels = env.eval_set(env_round)[1]
    cstar = float(P[np.arange(labels.size), labels].min())
    gaps = min_gaps(env, env_round)
    table = {float(u): delta_u_from_gaps(gaps, u) for u in u_grid}
    try:
        S = pseudo_variance(env, star, P, env_round)
        L = l_term(env, star, P, env_round)
    except ValueError:
        S = L = math.inf
    gamma = gamma_from(cstar, table[u_grid[0]], u_grid[0]) if cstar > 0 and table[u_grid[0]] > 0 \
        else math.inf
    sub = true_risk(env, P, env_round) - optimal_risk(env, env_round)
    return TheorySnapshot(round, S, L, cstar, table, gamma, sub)


@dataclass
class SuboptimalityReport:
    lhs: float
    rhs: float
    holds: bool


def check_suboptimality_bound(env: Environment, behaviors, sizes, lam: float, kl_star: float,
                              final_policy, delta: float = 0.05) -> SuboptimalityReport:
    """Evaluate ``D_{k+1}`` against its bound with oracle ``L`` terms.

    ``behaviors[j]`` logged ``sizes[j]`` interactions; ``kl_star`` is the KL of a
    near-optimal surrogate posterior to the prior. Reported, not asserted: the
    class optimum is only approximated by the surrogate.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    N = sizes.sum()
    star = optimal_policy(env)
    Ls = np.array([l_term(env, star, b) for b in behaviors])
    rhs = lam / (1 - lam) * float(sizes @ Ls) / N + 2 * (kl_star + math.log(2 / delta)) / (lam * N)
    lhs = true_risk(env, policy_matrix(env, final_policy)) - optimal_risk(env)
    return SuboptimalityReport(lhs, rhs, bool(lhs <= rhs))
