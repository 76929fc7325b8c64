"""PAC-Bayesian learning objectives and certified bound values."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import LogDataset, RegularizerSpec, c_hat_term, h_unit
from .policy import (
    GaussianPolicyParams,
    PropensityConfig,
    kl_gaussian,
    kl_grad_mu,
    mc_noise,
    propensities,
)


@dataclass(frozen=True)
class ObjectiveSpec:
    estimator: RegularizerSpec
    prior: GaussianPolicyParams
    delta: float = 0.05
    include_c_hat: bool = False
    prop_cfg: PropensityConfig = field(default_factory=PropensityConfig)

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.estimator.kind not in ("ls", "adj_ls"):
            raise ValueError("PAC-Bayes objectives need an ls or adj_ls estimator")

    @property
    def lam(self) -> float:
        return self.estimator.lam


def _check_nonempty(dataset: LogDataset):
    if len(dataset) == 0:
        raise ValueError("objective needs a nonempty dataset")


def _target_props(dataset, q_params, cfg, noise=None, want_grad=False):
    return propensities(q_params, dataset.contexts, dataset.actions, cfg,
                        noise=noise, want_grad=want_grad)


def _objective(dataset, q_params, spec, noise):
    _check_nonempty(dataset)
    N = len(dataset)
    p = _target_props(dataset, q_params, spec.prop_cfg, noise)
    emp = float(np.mean(p * h_unit(spec.estimator, dataset.propensities, dataset.costs)))
    return emp + kl_gaussian(q_params, spec.prior) / (spec.lam * N)


def ls_objective(dataset: LogDataset, q_params: GaussianPolicyParams, spec: ObjectiveSpec,
                 noise=None) -> float:
    """LS empirical risk plus ``KL(Q, P) / (lam N)``; ``log(1/delta)`` is left out."""
    if spec.estimator.kind != "ls":
        raise ValueError("ls_objective needs an ls estimator")
    return _objective(dataset, q_params, spec, noise)


def adj_objective(dataset: LogDataset, q_params: GaussianPolicyParams, spec: ObjectiveSpec,
                  noise=None) -> float:
    """Adjusted-LS empirical risk plus ``KL(Q, P) / (lam N)``.

    The correction term and the behaviour risks do not depend on ``Q`` and are
    reported by :func:`bound_value` only.
    """
    if spec.estimator.kind != "adj_ls":
        raise ValueError("adj_objective needs an adj_ls estimator")
    return _objective(dataset, q_params, spec, noise)


def bound_value(dataset: LogDataset, q_params: GaussianPolicyParams, spec: ObjectiveSpec,
                behavior_risks=None, noise=None) -> float:
    """High-probability upper bound on ``R(pi_Q)``.

    ls: ``R_ls + (KL + log(1/delta)) / (lam N)``.
    adj_ls: ``sum_j (n_j / N) R(pi_j) + R_adj + C_hat + (KL + log(1/delta)) / (lam N)``,
    where ``behavior_risks[j]`` is the oracle risk of the policy that logged round ``j``.
    """
    _check_nonempty(dataset)
    N = len(dataset)
    value = _objective(dataset, q_params, spec, noise) + math.log(1.0 / spec.delta) / (spec.lam * N)
    if spec.estimator.kind == "ls":
        return value
    if behavior_risks is None:
        raise ValueError("adjusted bound needs the oracle risks of the behaviour policies")
    sizes = dataset.round_sizes()
    risks = np.asarray(behavior_risks, dtype=np.float64)
    if risks.shape != sizes.shape:
        raise ValueError(f"need {sizes.size} behaviour risks, got {risks.size}")
    return value + float(sizes @ risks) / N + c_hat_term(dataset, spec.lam)


def objective_grad(dataset: LogDataset, q_params: GaussianPolicyParams, spec: ObjectiveSpec,
                   noise=None) -> np.ndarray:
    """Gradient of the ls / adj objective with respect to the mean matrix.

    Uses ``dh/dp = h(1, q, c)`` (the estimators are linear in ``p``) chained
    through the propensity gradient, plus ``(mu_Q - mu_P) / (sigma_P^2 lam N)``.
    """
    _check_nonempty(dataset)
    N = len(dataset)
    _, coef, u = _target_props(dataset, q_params, spec.prop_cfg, noise, want_grad=True)
    w = h_unit(spec.estimator, dataset.propensities, dataset.costs) / N
    return (w[:, None] * coef).T @ u + kl_grad_mu(q_params, spec.prior) / (spec.lam * N)


# ---------------------------------------------------------------------------
# minibatch training objectives


class _Trainable:
    """Shared plumbing: contexts, per-epoch common random numbers, minibatches."""

    def __init__(self, dataset: LogDataset, template: GaussianPolicyParams,
                 prop_cfg: PropensityConfig, noise_key=(), index_offset: int = 0):
        _check_nonempty(dataset)
        self.data = dataset
        self.template = template
        self.cfg = prop_cfg
        self.noise_key = tuple(noise_key)
        self.index = index_offset + np.arange(len(dataset))
        self._noise_epoch = None
        self._noise = None

    @property
    def n(self) -> int:
        return len(self.data)

    def noise(self, epoch):
        if self.cfg.method != "monte_carlo":
            return None
        if self._noise_epoch != epoch:
            key = (self.cfg.shared_noise_seed, *self.noise_key, epoch + 1)
            self._noise = mc_noise(key, self.index, self.cfg.num_samples)
            self._noise_epoch = epoch
        return self._noise

    def params(self, mu) -> GaussianPolicyParams:
        return self.template.with_mu(mu)

    def props(self, mu, idx, epoch, want_grad):
        noise = self.noise(epoch)
        X, A = self.data.contexts, self.data.actions
        if idx is not None:
            X, A = X[idx], A[idx]
            noise = None if noise is None else noise[idx]
        return propensities(self.params(mu), X, A, self.cfg, noise=noise, want_grad=want_grad)


class PacBayesObjective(_Trainable):
    """``mean h(p_i, q_i, c_i) + KL(Q, P) / (lam N)`` for ls / adj_ls.

    ``value`` evaluates at the draws of ``epoch=-1`` so start and end points are
    compared on the same noise.
    """

    def __init__(self, dataset, spec: ObjectiveSpec, noise_key=(), index_offset=0):
        super().__init__(dataset, spec.prior, spec.prop_cfg, noise_key, index_offset)
        self.spec = spec
        self.weights = h_unit(spec.estimator, dataset.propensities, dataset.costs)
        self.kl_scale = 1.0 / (spec.lam * self.n)

    def value(self, mu) -> float:
        p = self.props(mu, None, -1, False)
        q = self.params(mu)
        return float(np.mean(p * self.weights)) + kl_gaussian(q, self.spec.prior) * self.kl_scale

    def value_and_grad(self, mu, idx, epoch):
        p, coef, u = self.props(mu, idx, epoch, True)
        w = self.weights if idx is None else self.weights[idx]
        q = self.params(mu)
        val = float(np.mean(p * w)) + kl_gaussian(q, self.spec.prior) * self.kl_scale
        grad = ((w / w.size)[:, None] * coef).T @ u + kl_grad_mu(q, self.spec.prior) * self.kl_scale
        return val, grad


class CRMObjective(_Trainable):
    """Clipped IPS plus an empirical standard-deviation penalty.

    ``mean(u) + sqrt(var(u) / n)`` with ``u_i = p_i max(c_i / q_i, -M)``; the
    batch-size penalty uses the size of the training batch, not the minibatch.
    """

    def __init__(self, dataset, template, prop_cfg, clip=10.0, noise_key=(), index_offset=0):
        super().__init__(dataset, template, prop_cfg, noise_key, index_offset)
        self.weights = h_unit(RegularizerSpec.clipped(clip), dataset.propensities, dataset.costs)

    def _penalized(self, uvals):
        return float(np.mean(uvals) + math.sqrt(np.var(uvals) / self.n))

    def value(self, mu) -> float:
        return self._penalized(self.props(mu, None, -1, False) * self.weights)

    def value_and_grad(self, mu, idx, epoch):
        p, coef, u = self.props(mu, idx, epoch, True)
        w = self.weights if idx is None else self.weights[idx]
        vals = p * w
        b = vals.size
        var = float(np.var(vals))
        dmean = w / b
        if var > 0:
            dstd = (vals - vals.mean()) * w / (b * math.sqrt(var * self.n))
        else:
            dstd = np.zeros_like(w)
        grad = ((dmean + dstd)[:, None] * coef).T @ u
        return self._penalized(vals), grad
