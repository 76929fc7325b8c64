"""Linear Gaussian policies.

A posterior ``Q = N(mu, sigma^2 I)`` over the per-action weight vectors defines
the stochastic policy ``pi_Q(a|x) = P_{theta~Q}(a = argmax_b x.theta_b)``. Its
propensities reduce to a one dimensional Gaussian integral that is evaluated
either with Monte Carlo draws (the training estimator) or with Gauss-Hermite
quadrature (the deterministic oracle).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _accel


@dataclass(frozen=True)
class GaussianPolicyParams:
    """Mean matrix ``mu`` (K x d) and shared scale ``sigma`` of a Gaussian posterior."""

    mu: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        if mu.ndim != 2:
            raise ValueError(f"mu must be a K x d matrix, got shape {mu.shape}")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def num_actions(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def with_mu(self, mu) -> "GaussianPolicyParams":
        return GaussianPolicyParams(mu, self.sigma)

    @classmethod
    def uniform(cls, num_actions: int, dim: int, sigma: float = 1.0) -> "GaussianPolicyParams":
        return cls(np.zeros((num_actions, dim)), sigma)


@dataclass(frozen=True)
class PropensityConfig:
    method: str = "monte_carlo"
    num_samples: int = 32
    num_nodes: int = 64
    shared_noise_seed: int = 0

    def __post_init__(self):
        if self.method not in ("monte_carlo", "gauss_hermite"):
            raise ValueError(f"unknown propensity method {self.method!r}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.num_nodes < 8:
            raise ValueError("num_nodes must be >= 8")

    @classmethod
    def quadrature(cls, num_nodes: int = 64) -> "PropensityConfig":
        return cls(method="gauss_hermite", num_nodes=num_nodes)


QUADRATURE = PropensityConfig.quadrature()


# ---------------------------------------------------------------------------
# integration nodes


_HERMITE_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def hermite_nodes(num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite nodes and weights for expectations under N(0, 1)."""
    if num_nodes not in _HERMITE_CACHE:
        t, w = np.polynomial.hermite.hermgauss(num_nodes)
        _HERMITE_CACHE[num_nodes] = (np.sqrt(2.0) * t, w / np.sqrt(np.pi))
    return _HERMITE_CACHE[num_nodes]


def mc_noise(key, indices, num_samples: int) -> np.ndarray:
    """Standard normal draws for the given context indices.

    Row ``i`` depends only on ``(key, indices[i], num_samples)``: the draws come
    from a counter-based Philox stream, read at offset ``index * num_samples``.
    This gives common random numbers for a context no matter which batch it is
    evaluated in.
    """
    from scipy.special import ndtri

    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if indices.size == 0:
        return np.empty((0, num_samples))
    seed_key = np.random.SeedSequence(np.atleast_1d(key).tolist()).generate_state(2, np.uint64)
    lo, hi = int(indices.min()), int(indices.max()) + 1
    bitgen = np.random.Philox(key=seed_key)
    if lo:
        # one Philox counter step yields 4 raw 64-bit outputs
        skip = lo * num_samples
        bitgen.advance(skip // 4)
        bitgen.random_raw(skip % 4)
    raw = bitgen.random_raw((hi - lo) * num_samples).reshape(hi - lo, num_samples)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)[indices - lo]


def _nodes_for(n, cfg: PropensityConfig, noise, indices):
    if cfg.method == "gauss_hermite":
        t, w = hermite_nodes(cfg.num_nodes)
        return t[None, :], w, False
    if noise is None:
        idx = np.arange(n) if indices is None else indices
        noise = mc_noise(cfg.shared_noise_seed, idx, cfg.num_samples)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (n, cfg.num_samples):
        raise ValueError(f"noise must have shape {(n, cfg.num_samples)}, got {noise.shape}")
    return noise, np.full(cfg.num_samples, 1.0 / cfg.num_samples), True


# ---------------------------------------------------------------------------
# scores and actions


def _as_contexts(params: GaussianPolicyParams, x) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != params.dim:
        raise ValueError(f"context dimension {X.shape[1]} != policy dimension {params.dim}")
    return X


def scores(params: GaussianPolicyParams, x) -> np.ndarray:
    """Mean scores ``x . mu_a``; a vector for one context, a matrix for many."""
    x = np.asarray(x, dtype=np.float64)
    X = _as_contexts(params, x)
    out = X @ params.mu.T
    return out[0] if x.ndim == 1 else out


def deterministic_action(params, x):
    """Argmax of the mean scores, ties to the lowest index.

    ``params`` may be a :class:`GaussianPolicyParams` or a bare K x d matrix.
    """
    if not isinstance(params, GaussianPolicyParams):
        params = GaussianPolicyParams(params)
    s = scores(params, x)
    return np.argmax(s, axis=-1)


def sample_action(params: GaussianPolicyParams, x, rng: np.random.Generator):
    """Draw ``argmax_a x . theta_a`` for ``theta ~ N(mu, sigma^2 I)``.

    The perturbed score ``x . mu_a + sigma ||x|| e_a`` has exactly the law of
    ``x . theta_a``. Zero contexts make every action exchangeable and get a
    uniform draw.
    """
    x = np.asarray(x, dtype=np.float64)
    X = _as_contexts(params, x)
    n, K = X.shape[0], params.num_actions
    s = X @ params.mu.T
    norms = np.linalg.norm(X, axis=1)
    s = s + params.sigma * norms[:, None] * rng.standard_normal((n, K))
    actions = np.argmax(s, axis=1)
    zero = norms == 0
    if zero.any():
        actions[zero] = rng.integers(0, K, size=int(zero.sum()))
    return actions[0] if x.ndim == 1 else actions


# ---------------------------------------------------------------------------
# propensities


def _standardized(params: GaussianPolicyParams, X):
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    z = (X @ params.mu.T) / (params.sigma * safe[:, None])
    return z, norms


def propensities(params: GaussianPolicyParams, X, actions, cfg: PropensityConfig = QUADRATURE,
                 noise=None, indices=None, want_grad=False):
    """Propensities of ``actions[i]`` at ``X[i]``, optionally with gradients.

    Parameters
    ----------
    noise : ndarray, shape (n, S), optional
        Monte Carlo draws to use; by default they are derived from
        ``cfg.shared_noise_seed`` and ``indices`` (or ``arange(n)``).
    want_grad : bool
        Also return the per-context gradient coefficients ``coef`` (n x K) and
        the unit directions ``u = x / (sigma ||x||)`` (n x d), so that
        ``d prop_i / d mu_b = coef[i, b] * u[i]``.
    """
    X = _as_contexts(params, X)
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    n, K = X.shape[0], params.num_actions
    if actions.shape != (n,):
        raise ValueError("need one action per context")
    if np.any((actions < 0) | (actions >= K)):
        raise ValueError("action out of range")
    z, norms = _standardized(params, X)
    nodes, weights, fast = _nodes_for(n, cfg, noise, indices)
    prop, coef = _accel.prop_grad(z, actions, nodes, weights, want_grad, fast)
    zero = norms == 0
    if zero.any():
        prop[zero] = 1.0 / K
    if not want_grad:
        return prop
    safe = np.where(norms > 0, norms, 1.0)
    u = X / (params.sigma * safe[:, None])
    coef[zero] = 0.0
    return prop, coef, u


def propensity(params: GaussianPolicyParams, x, a: int, cfg: PropensityConfig = QUADRATURE,
               index: int = 0) -> float:
    """``pi(a|x)`` for a single context (Monte Carlo draws keyed on ``index``)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(propensities(params, x, [a], cfg, indices=np.array([index]))[0])


def propensity_grad_mu(params: GaussianPolicyParams, x, a: int,
                       cfg: PropensityConfig = QUADRATURE, index: int = 0) -> np.ndarray:
    """``d pi(a|x) / d mu`` as a K x d matrix, with the same draws as :func:`propensity`."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    _, coef, u = propensities(params, x, [a], cfg, indices=np.array([index]), want_grad=True)
    return np.outer(coef[0], u[0])


def propensity_matrix(params: GaussianPolicyParams, X, cfg: PropensityConfig = QUADRATURE,
                      noise=None) -> np.ndarray:
    """All action propensities, shape (n, K). Costs K kernel calls."""
    X = _as_contexts(params, X)
    n, K = X.shape[0], params.num_actions
    if cfg.method == "monte_carlo" and noise is None:
        noise = mc_noise(cfg.shared_noise_seed, np.arange(n), cfg.num_samples)
    out = np.empty((n, K))
    for a in range(K):
        out[:, a] = propensities(params, X, np.full(n, a), cfg, noise=noise)
    return out


# ---------------------------------------------------------------------------
# divergence


def kl_gaussian(q: GaussianPolicyParams, p: GaussianPolicyParams) -> float:
    """KL(Q || P) between isotropic Gaussians with shared scales on R^{K d}."""
    if q.mu.shape != p.mu.shape:
        raise ValueError(f"shape mismatch {q.mu.shape} vs {p.mu.shape}")
    D = q.mu.size
    r = q.sigma**2 / p.sigma**2
    diff = q.mu - p.mu
    return 0.5 * D * (r - 1.0 - math.log(r)) + float(np.sum(diff * diff)) / (2.0 * p.sigma**2)


def kl_grad_mu(q: GaussianPolicyParams, p: GaussianPolicyParams) -> np.ndarray:
    return (q.mu - p.mu) / p.sigma**2


# ---------------------------------------------------------------------------
# logging policy


@dataclass(frozen=True)
class SupervisedConfig:
    lr: float = 0.1
    epochs: int = 10
    l2: float = 1e-4
    batch_size: int = 32
    seed: int = 0


def fit_multinomial_logistic(X, labels, num_actions: int, cfg: SupervisedConfig = SupervisedConfig()):
    """Softmax regression of labels on contexts with Adam and an L2 penalty."""
    from .optimizer import AdamState, OptimizerConfig, adam_step

    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = X.shape
    if n == 0:
        raise ValueError("supervised set is empty")
    W = np.zeros((num_actions, d))
    opt = OptimizerConfig(lr=cfg.lr, epochs=cfg.epochs)
    state = AdamState.zeros(W.shape)
    rng = np.random.default_rng(cfg.seed)
    onehot = np.eye(num_actions)[labels]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            logits = X[idx] @ W.T
            logits -= logits.max(axis=1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(axis=1, keepdims=True)
            grad = (P - onehot[idx]).T @ X[idx] / len(idx) + cfg.l2 * W
            state, delta = adam_step(state, grad, opt)
            W = W + delta
    return W


def make_logging_policy(env, supervised_set, alpha: float,
                        train_cfg: SupervisedConfig = SupervisedConfig(),
                        sigma: float = 1.0) -> GaussianPolicyParams:
    """Initial behaviour policy: a softmax-trained scorer tempered by ``alpha``.

    ``alpha = 0`` gives the uniform policy, ``alpha = 1`` the trained means.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    X, labels = supervised_set
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("supervised set is empty")
    W = fit_multinomial_logistic(X, labels, env.num_actions, train_cfg)
    return GaussianPolicyParams(alpha * W, sigma)


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(params: GaussianPolicyParams, path) -> None:
    K, d = params.mu.shape
    lines = [f"{K},{d},{params.sigma!r}"]
    lines += [",".join(repr(float(v)) for v in row) for row in params.mu]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> GaussianPolicyParams:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows:
        raise ValueError(f"{path}: empty checkpoint")
    head = rows[0].split(",")
    if len(head) != 3:
        raise ValueError(f"{path}: header must be K,d,sigma")
    K, d, sigma = int(head[0]), int(head[1]), float(head[2])
    if len(rows) != K + 1:
        raise ValueError(f"{path}: expected {K} mean rows, found {len(rows) - 1}")
    mu = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    if mu.shape != (K, d):
        raise ValueError(f"{path}: mean rows do not match K={K}, d={d}")
    return GaussianPolicyParams(mu, sigma)
