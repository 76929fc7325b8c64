"""Sequential deploy, collect and retrain loops.

Every learner deploys ``pi_j``, logs ``n_j`` interactions with frozen logging
propensities, retrains, and records the oracle risk of every policy it
produces. Round ``j`` draws its contexts, actions and costs from a stream keyed
on ``(seed, j)``, so learners that share a seed also share their first batch.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diagnostics
from .env import Environment, risk_from_optimal_propensity, sample_cost
from .estimators import LogDataset, RegularizerSpec, empirical_risk
from .objectives import CRMObjective, ObjectiveSpec, PacBayesObjective, bound_value
from .optimizer import OptimizerConfig, minimize
from .policy import (
    QUADRATURE,
    GaussianPolicyParams,
    PropensityConfig,
    kl_gaussian,
    propensities,
    sample_action,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("seq_ls", "seq_adj_ls", "noniid_ls", "scrm", "batch_ls")
LAMBDA_KINDS = ("fixed", "inv_sqrt_m", "inv_sqrt_km", "thm44", "cor45")
ADJ_LAMBDA_CLAMP = 0.999
TRACE_KEYS = ("round", "n_j", "N_k", "lambda", "true_risk", "emp_risk", "kl", "bound", "cstar",
              "wall_ms")
_COLLECT_STREAM = 1


# ---------------------------------------------------------------------------
# lambda schedules


@dataclass(frozen=True)
class LambdaRule:
    """How the smoothing parameter is chosen each round.

    ``gamma``, ``beta1`` and ``beta2`` may be left as ``None``; the learner then
    fills them from the environment oracle and the batch schedule.
    """

    kind: str = "inv_sqrt_m"
    value: float | None = None
    alpha: float = 0.0
    gamma: float | None = None
    beta1: float | None = None
    beta2: float | None = None

    def __post_init__(self):
        if self.kind not in LAMBDA_KINDS:
            raise ValueError(f"unknown lambda rule {self.kind!r}; expected one of {LAMBDA_KINDS}")
        if self.kind == "fixed" and not (self.value is not None and self.value > 0):
            raise ValueError("fixed lambda rule needs value > 0")
        if self.kind in ("thm44", "cor45"):
            if not 0.0 <= self.alpha < 1.0:
                raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
            if self.gamma is not None and not self.gamma > 0:
                raise ValueError(f"gamma must be positive, got {self.gamma}")

    @classmethod
    def fixed(cls, value: float) -> "LambdaRule":
        return cls("fixed", value=value)


def lambda_schedule(rule: LambdaRule, m: int, k: int = 0, gamma: float | None = None,
                    beta1: float | None = None, beta2: float | None = None) -> float:
    """Smoothing parameter for round ``k`` with batch size ``m``.

    fixed: ``value``; inv_sqrt_m: ``1/sqrt(m)``; inv_sqrt_km: ``1/sqrt((k+1) m)``;
    thm44: ``(1 - alpha) / (8 gamma sqrt(m))``;
    cor45: ``1 / (1 + 2^(2 + alpha) gamma beta1 beta2 / (1 - alpha))``.
    Explicit keyword values override the ones stored on ``rule``.
    """
    if m < 1:
        raise ValueError("batch size must be >= 1")
    if rule.kind == "fixed":
        return float(rule.value)
    if rule.kind == "inv_sqrt_m":
        return 1.0 / math.sqrt(m)
    if rule.kind == "inv_sqrt_km":
        return 1.0 / math.sqrt((k + 1) * m)
    alpha = rule.alpha
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    g = rule.gamma if gamma is None else gamma
    if g is None or not g > 0:
        raise ValueError(f"gamma must be positive, got {g}")
    if rule.kind == "thm44":
        return (1.0 - alpha) / (8.0 * g * math.sqrt(m))
    b1 = rule.beta1 if beta1 is None else beta1
    b2 = rule.beta2 if beta2 is None else beta2
    if b1 is None or b2 is None or not (b1 > 0 and b2 > 0):
        raise ValueError("cor45 needs positive beta1 and beta2")
    return 1.0 / (1.0 + 2.0 ** (2.0 + alpha) * g * b1 * b2 / (1.0 - alpha))


def clamp_for_adj(lam: float) -> tuple[float, bool]:
    """Adjusted LS needs ``lam < 1``; returns ``(lam, clamped)``."""
    if lam >= 1.0:
        return ADJ_LAMBDA_CLAMP, True
    return lam, False


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str = "seq_ls"
    rounds: int = 10
    total: int | None = 20000
    batch_sizes: tuple | None = None
    lambda_rule: LambdaRule = field(default_factory=LambdaRule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    prior_policy: GaussianPolicyParams | None = None
    sigma: float = 1.0
    seed: int = 0
    train_prop: PropensityConfig = field(default_factory=PropensityConfig)
    log_prop: PropensityConfig = QUADRATURE
    eval_prop: PropensityConfig = QUADRATURE
    delta: float = 0.05
    warm_start: bool = True
    report_bounds: bool = True
    scrm_clip: float = 10.0
    gap_u: float = 0.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.batch_sizes is not None:
            sizes = tuple(int(n) for n in self.batch_sizes)
            if any(n < 1 for n in sizes):
                raise ValueError("every batch size must be >= 1")
            object.__setattr__(self, "batch_sizes", sizes)
        elif self.total is None or self.total < 1:
            raise ValueError("need a positive total budget or explicit batch sizes")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")

    def replace(self, **kw) -> "LearnerConfig":
        return replace(self, **kw)

    @property
    def k_max(self) -> int:
        return 1 if self.algorithm == "batch_ls" else self.rounds


def scrm_batch_sizes(total: int, rounds: int) -> list[int]:
    """``n_j = n_0 2^j`` with ``n_0 = ceil(N / 2^k)``; the last batch is cut to the budget."""
    n0 = -(-total // 2**rounds)
    sizes, used = [], 0
    for j in range(rounds):
        n = min(n0 * 2**j, total - used)
        if n < 1:
            raise ValueError(f"budget {total} is exhausted before round {j} of {rounds}")
        sizes.append(n)
        used += n
    return sizes


def batch_schedule(cfg: LearnerConfig) -> list[int]:
    if cfg.batch_sizes is not None:
        if cfg.algorithm != "batch_ls" and len(cfg.batch_sizes) != cfg.rounds:
            raise ValueError(f"need {cfg.rounds} batch sizes, got {len(cfg.batch_sizes)}")
        return [sum(cfg.batch_sizes)] if cfg.algorithm == "batch_ls" else list(cfg.batch_sizes)
    if cfg.algorithm == "batch_ls":
        return [cfg.total]
    if cfg.algorithm == "scrm":
        return scrm_batch_sizes(cfg.total, cfg.rounds)
    base, extra = divmod(cfg.total, cfg.rounds)
    if base < 1:
        raise ValueError(f"budget {cfg.total} is smaller than the number of rounds {cfg.rounds}")
    return [base + (1 if j < extra else 0) for j in range(cfg.rounds)]


# ---------------------------------------------------------------------------
# trace


@dataclass
class RunTrace:
    """Per-policy records: record ``j`` describes ``pi_j``."""

    algorithm: str
    seed: int
    records: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    dataset: LogDataset | None = None
    warnings: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def risks(self) -> np.ndarray:
        return np.array([r["true_risk"] for r in self.records])

    @property
    def final_risk(self) -> float:
        return float(self.records[-1]["true_risk"])

    def to_jsonl(self, path) -> None:
        lines = [json.dumps(_clean(r), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "RunTrace":
        text = Path(path).read_text()
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: not JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or any(k not in rec for k in TRACE_KEYS):
                raise ValueError(f"{path}:{lineno}: record lacks trace keys")
            if rec["round"] != len(records):
                raise ValueError(f"{path}:{lineno}: expected round {len(records)}")
            if not isinstance(rec["true_risk"], (int, float)):
                raise ValueError(f"{path}:{lineno}: true_risk is not a number")
            records.append(rec)
        if not records:
            raise ValueError(f"{path}: empty trace")
        head = records[0]
        return cls(head.get("algorithm", "unknown"), int(head.get("seed", 0)), records)


def _clean(rec):
    out = {}
    for k, v in rec.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        if isinstance(v, float) and not math.isfinite(v):
            v = None
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# building blocks


def initial_policy(env: Environment, cfg: LearnerConfig) -> GaussianPolicyParams:
    if cfg.prior_policy is not None:
        p = cfg.prior_policy
        if p.mu.shape != (env.num_actions, env.dim_context):
            raise ValueError("prior policy shape does not match the environment")
        return p
    return GaussianPolicyParams.uniform(env.num_actions, env.dim_context, cfg.sigma)


def collect(env: Environment, policy: GaussianPolicyParams, n: int, seed: int, round: int,
            log_prop: PropensityConfig = QUADRATURE) -> LogDataset:
    """Deploy ``policy`` for ``n`` interactions of round ``round``."""
    rng = np.random.default_rng([seed, round, _COLLECT_STREAM])
    X, labels = env.sample_contexts(n, rng, round)
    actions = sample_action(policy, X, rng)
    costs = sample_cost(env, X, actions, rng, labels)
    q = propensities(policy, X, actions, log_prop)
    # a sampled action always has positive mass; guard against underflow
    q = np.clip(q, np.finfo(np.float64).tiny, 1.0)
    return LogDataset(X, actions, costs, q, np.full(n, round))


def policy_risk(env: Environment, policy: GaussianPolicyParams, round: int | None = None,
                cfg: PropensityConfig = QUADRATURE) -> tuple[float, float]:
    """Oracle ``(R(pi), C*)`` from optimal-action propensities on the eval contexts."""
    p_opt = diagnostics.optimal_action_propensity(env, policy, round, cfg)
    return risk_from_optimal_propensity(env, p_opt), float(p_opt.min())


def _oracle_gamma(env, cfg, pi0):
    _, cstar = policy_risk(env, pi0, 0, cfg.eval_prop)
    gap = diagnostics.delta_u(env, cfg.gap_u, 0)
    return diagnostics.gamma_uniform_from(cstar, gap, cfg.gap_u)


def _betas(sizes):
    N = np.cumsum(sizes)
    beta1 = float(np.max((np.arange(len(sizes)) + 1) / N))
    return beta1, float(max(sizes))


class _Lambda:
    """Evaluates the configured rule, filling gamma and betas when absent."""

    def __init__(self, env, cfg, sizes, pi0):
        self.rule = cfg.lambda_rule
        self.gamma = self.rule.gamma
        if self.rule.kind in ("thm44", "cor45") and self.gamma is None:
            self.gamma = _oracle_gamma(env, cfg, pi0)
        b1, b2 = _betas(sizes)
        self.beta1 = self.rule.beta1 if self.rule.beta1 is not None else b1
        self.beta2 = self.rule.beta2 if self.rule.beta2 is not None else b2

    def __call__(self, m, k):
        return lambda_schedule(self.rule, m, k, self.gamma, self.beta1, self.beta2)


def _train(objective, init, opt_cfg, key):
    res = minimize(objective.value, objective.value_and_grad, init.mu, opt_cfg,
                   n_items=objective.n, key=key)
    return init.with_mu(res.x)


def _record(round, n_j, N_k, lam, risk, cstar, emp=None, kl=0.0, bound=None, wall_ms=0.0,
            **extra):
    rec = {"round": round, "n_j": n_j, "N_k": N_k, "lambda": lam, "true_risk": risk,
           "emp_risk": emp, "kl": kl, "bound": bound, "cstar": cstar, "wall_ms": wall_ms}
    rec.update(extra)
    return rec


# ---------------------------------------------------------------------------
# the loop


def run(env: Environment, cfg: LearnerConfig) -> RunTrace:
    """Dispatch on ``cfg.algorithm``."""
    return _RUNNERS[cfg.algorithm](env, cfg)


def _check_algorithm(cfg, *allowed):
    if cfg.algorithm not in allowed:
        raise ValueError(f"config algorithm is {cfg.algorithm!r}, expected {allowed[0]!r}")


def run_seq_ls(env: Environment, cfg: LearnerConfig) -> RunTrace:
    """Cumulative data, LS objective, prior fixed at ``pi_0``."""
    _check_algorithm(cfg, "seq_ls")
    return _loop(env, cfg)


def run_seq_adj_ls(env: Environment, cfg: LearnerConfig) -> RunTrace:
    """Cumulative data, adjusted-LS objective, prior fixed at ``pi_0``."""
    _check_algorithm(cfg, "seq_adj_ls")
    return _loop(env, cfg)


def run_noniid_ls(env: Environment, cfg: LearnerConfig) -> RunTrace:
    """Latest batch only, LS objective, prior chained to the previous posterior."""
    _check_algorithm(cfg, "noniid_ls")
    if env.drift is None:
        raise ValueError("noniid_ls needs an environment with a drift schedule")
    if env.drift.horizon < cfg.rounds:
        raise ValueError(f"drift schedule covers {env.drift.horizon} rounds, need {cfg.rounds}")
    return _loop(env, cfg)


def run_scrm(env: Environment, cfg: LearnerConfig) -> RunTrace:
    """Doubling batches, latest batch only, clipped IPS with a variance penalty."""
    _check_algorithm(cfg, "scrm")
    return _loop(env, cfg)


def run_batch_ls(env: Environment, cfg: LearnerConfig) -> RunTrace:
    """Collect the whole budget with ``pi_0`` and fit once."""
    _check_algorithm(cfg, "batch_ls")
    return _loop(env, cfg)


_RUNNERS = {
    "seq_ls": run_seq_ls,
    "seq_adj_ls": run_seq_adj_ls,
    "noniid_ls": run_noniid_ls,
    "scrm": run_scrm,
    "batch_ls": run_batch_ls,
}


def _loop(env: Environment, cfg: LearnerConfig) -> RunTrace:
    algo = cfg.algorithm
    sizes = batch_schedule(cfg)
    k_max = len(sizes)
    pi0 = initial_policy(env, cfg)
    lam_of = _Lambda(env, cfg, sizes, pi0)
    trace = RunTrace(algo, cfg.seed, policies=[pi0])
    env_round = 0 if env.drift is not None else None
    risk, cstar = policy_risk(env, pi0, env_round, cfg.eval_prop)
    trace.records.append(_record(0, sizes[0], 0, None, risk, cstar, algorithm=algo,
                                 seed=cfg.seed, n_train=0, kl_initial=0.0, step_norm=0.0,
                                 lambda_clamped=False, digest=None))
    behavior_risks = [risk]
    data = LogDataset.empty(env.dim_context)
    for j in range(k_max):
        t0 = time.perf_counter()
        current = trace.policies[j]
        batch = collect(env, current, sizes[j], cfg.seed, j, cfg.log_prop)
        data = data.append(batch)
        latest_only = algo in ("noniid_ls", "scrm")
        train_set = batch if latest_only else data
        offset = len(data) - len(batch) if latest_only else 0
        init = current if cfg.warm_start or algo == "noniid_ls" else pi0
        lam, clamped, emp, bound = None, False, None, None
        if algo == "scrm":
            obj = CRMObjective(train_set, pi0, cfg.train_prop, cfg.scrm_clip,
                               noise_key=(cfg.seed, j), index_offset=offset)
            new = _train(obj, init, cfg.optimizer, (cfg.seed, j))
            prior = pi0
            if cfg.report_bounds:
                p = propensities(new, train_set.contexts, train_set.actions, cfg.eval_prop)
                emp = empirical_risk(RegularizerSpec.clipped(cfg.scrm_clip), train_set, p)
        else:
            lam = lam_of(sizes[j], j)
            if algo == "seq_adj_ls":
                lam, clamped = clamp_for_adj(lam)
                if clamped:
                    msg = f"round {j}: lambda clamped to {ADJ_LAMBDA_CLAMP}"
                    trace.warnings.append(msg)
                    log.warning(msg)
                est = RegularizerSpec.adj_ls(lam)
            else:
                est = RegularizerSpec.ls(lam)
            prior = current if algo == "noniid_ls" else pi0
            spec = ObjectiveSpec(est, prior, cfg.delta, prop_cfg=cfg.train_prop)
            obj = PacBayesObjective(train_set, spec, noise_key=(cfg.seed, j), index_offset=offset)
            new = _train(obj, init, cfg.optimizer, (cfg.seed, j))
            if cfg.report_bounds:
                eval_spec = replace(spec, prop_cfg=cfg.eval_prop)
                p = propensities(new, train_set.contexts, train_set.actions, cfg.eval_prop)
                emp = empirical_risk(est, train_set, p)
                bound = bound_value(train_set, new, eval_spec, behavior_risks=behavior_risks)
        trace.policies.append(new)
        next_round = j + 1 if env.drift is not None else None
        risk, cstar = policy_risk(env, new, next_round, cfg.eval_prop)
        behavior_risks.append(risk)
        wall = (time.perf_counter() - t0) * 1000.0
        trace.records.append(_record(
            j + 1, sizes[j + 1] if j + 1 < k_max else 0, len(data), lam, risk, cstar,
            emp=emp, kl=kl_gaussian(new, prior), bound=bound, wall_ms=wall,
            algorithm=algo, seed=cfg.seed, n_train=len(train_set),
            kl_initial=kl_gaussian(new, pi0),
            step_norm=float(np.linalg.norm(new.mu - current.mu)),
            lambda_clamped=clamped, digest=data.digest()))
    trace.dataset = data
    return trace
