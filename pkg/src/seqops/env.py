"""Contextual-bandit environments built from multiclass problems.

The cost of playing ``a`` in context ``x`` is ``-1`` with probability
``p = eps + 1[a = a*(x)] (1 - 2 eps)`` and ``0`` otherwise, where ``a*(x)`` is
the label of ``x``. The simulator knows ``a*`` and therefore every expected
cost exactly, which is what the risk oracles below rely on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

DEFAULT_EVAL_CONTEXTS = 2000
DEFAULT_EVAL_FRACTION = 0.2
ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class DriftSchedule:
    """Per-round translation of the context distribution.

    ``shifts[k]`` is added to every context drawn in round ``k``; the schedule is
    defined on rounds ``0 .. len(shifts) - 1`` only.
    """

    shifts: np.ndarray

    def __post_init__(self):
        s = np.array(self.shifts, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError("shifts must be a (rounds, d) array")
        s.setflags(write=False)
        object.__setattr__(self, "shifts", s)

    @property
    def horizon(self) -> int:
        return self.shifts.shape[0]

    def shift(self, k: int) -> np.ndarray:
        if not 0 <= k < self.horizon:
            raise ValueError(f"drift schedule is defined on rounds [0, {self.horizon}), got {k}")
        return self.shifts[k]

    @classmethod
    def linear(cls, step, rounds: int, dim: int) -> "DriftSchedule":
        step = np.broadcast_to(np.asarray(step, dtype=np.float64), (dim,))
        return cls(np.arange(rounds)[:, None] * step[None, :])

    @classmethod
    def identity(cls, rounds: int, dim: int) -> "DriftSchedule":
        return cls(np.zeros((rounds, dim)))


@dataclass(frozen=True, eq=False)
class Environment:
    """A multiclass-to-bandit problem.

    Synthetic environments label contexts with ``argmax_a anchor_a . x``;
    file-backed ones carry the label column of their rows. ``eval_contexts``
    with ``eval_labels`` form the fixed sample on which oracle expectations are
    taken.
    """

    dim_context: int
    num_actions: int
    noise_eps: float
    eval_contexts: np.ndarray
    eval_labels: np.ndarray
    anchors: np.ndarray | None = None
    rows: np.ndarray | None = None
    row_labels: np.ndarray | None = None
    drift: DriftSchedule | None = None

    def __post_init__(self):
        if self.dim_context < 1:
            raise ValueError("dim_context must be >= 1")
        if self.num_actions < 2:
            raise ValueError("num_actions must be >= 2")
        if not 0.0 <= self.noise_eps < 0.5:
            raise ValueError(
                f"noise eps must lie in [0, 0.5) so the labelled action stays uniquely best, "
                f"got {self.noise_eps}"
            )
        if (self.anchors is None) == (self.rows is None):
            raise ValueError("exactly one of anchors / rows must be given")

    # -- labels and costs ---------------------------------------------------

    @property
    def K(self) -> int:
        return self.num_actions

    @property
    def d(self) -> int:
        return self.dim_context

    def optimal_action(self, X) -> np.ndarray:
        """``a*(x)``. File-backed environments only know their own rows."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.anchors is not None:
            return np.argmax(X @ self.anchors.T, axis=1)
        lookup = self._row_lookup()
        try:
            return np.array([lookup[r.tobytes()] for r in X], dtype=np.int64)
        except KeyError:
            raise KeyError("context is not a row of this feature/label environment") from None

    def _row_lookup(self):
        cache = self.__dict__.get("_lookup")
        if cache is None:
            cache = {}
            for X, y in ((self.rows, self.row_labels), (self.eval_contexts, self.eval_labels)):
                for r, lab in zip(np.ascontiguousarray(X), y):
                    cache.setdefault(r.tobytes(), int(lab))
            object.__setattr__(self, "_lookup", cache)
        return cache

    def cost_prob(self, actions, labels) -> np.ndarray:
        """Probability of a ``-1`` cost, elementwise."""
        hit = np.asarray(actions) == np.asarray(labels)
        return self.noise_eps + hit * (1.0 - 2.0 * self.noise_eps)

    def cost_prob_matrix(self, labels) -> np.ndarray:
        """(n, K) matrix of ``p_{x,a}`` for contexts with the given labels."""
        labels = np.asarray(labels, dtype=np.int64)
        P = np.full((labels.size, self.num_actions), self.noise_eps)
        P[np.arange(labels.size), labels] = 1.0 - self.noise_eps
        return P

    # -- sampling -----------------------------------------------------------

    def sample_contexts(self, n: int, rng: np.random.Generator, round: int = 0):
        """Draw ``n`` contexts for round ``round``; returns ``(X, labels)``."""
        if self.anchors is not None:
            X = rng.standard_normal((n, self.dim_context))
            if self.drift is not None:
                shift = self.drift.shift(round)
                if np.any(shift):
                    X = X + shift
            return X, self.optimal_action(X)
        idx = rng.integers(0, self.rows.shape[0], size=n)
        X, labels = self.rows[idx], self.row_labels[idx]
        if self.drift is not None:
            shift = self.drift.shift(round)
            if np.any(shift):
                X = X + shift
        return X, labels

    def eval_set(self, round: int | None = None):
        """Oracle contexts and labels, translated by the drift at ``round``."""
        if self.drift is None or round is None:
            return self.eval_contexts, self.eval_labels
        shift = self.drift.shift(min(round, self.drift.horizon - 1))
        X = self.eval_contexts + shift
        labels = self.optimal_action(X) if self.anchors is not None else self.eval_labels
        return X, labels


@dataclass(frozen=True)
class LoggedInteraction:
    context: np.ndarray
    action: int
    cost: float
    logged_propensity: float
    round: int


# ---------------------------------------------------------------------------
# construction


def make_synthetic_env(d: int, K: int, eps: float, seed: int,
                       num_eval: int = DEFAULT_EVAL_CONTEXTS) -> Environment:
    """Linearly realizable problem: ``a*(x) = argmax_a anchor_a . x``.

    Anchors are ``K`` random unit vectors; contexts are standard Gaussian.
    """
    if d < 1 or K < 2:
        raise ValueError("need d >= 1 and K >= 2")
    if not 0.0 <= eps < 0.5:
        raise ValueError(f"eps must lie in [0, 0.5), got {eps}")
    rng = np.random.default_rng([seed, 0xA11C])
    anchors = rng.standard_normal((K, d))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    anchors.setflags(write=False)
    X_eval = np.random.default_rng([seed, 0xE7A1]).standard_normal((num_eval, d))
    labels = np.argmax(X_eval @ anchors.T, axis=1)
    return Environment(d, K, float(eps), X_eval, labels, anchors=anchors)


def drift_context_sampler(env: Environment, schedule: DriftSchedule | None) -> Environment:
    """Same costs, contexts translated per round by ``schedule``."""
    if schedule is not None and schedule.shifts.shape[1] != env.dim_context:
        raise ValueError("drift dimension does not match the environment")
    return replace(env, drift=schedule)


def load_feature_label_env(path, eps: float, eval_fraction: float = DEFAULT_EVAL_FRACTION,
                           seed: int = 0, num_actions: int | None = None) -> Environment:
    """Environment from a ``f_1,...,f_d,label`` text file.

    ``ceil(eval_fraction * n)`` shuffled rows are held out as oracle contexts;
    the remaining rows (all rows, if none remain) are sampled uniformly.
    """
    text = Path(path).read_text()
    feats, labels = [], []
    width = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            vals = [float(v) for v in parts[:-1]]
            lab_f = float(parts[-1])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed row {line!r}") from None
        if len(parts) < 2 or lab_f != int(lab_f):
            raise ValueError(f"{path}:{lineno}: malformed row {line!r}")
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} features, found {len(vals)}")
        feats.append(vals)
        labels.append(int(lab_f))
    if not feats:
        raise ValueError(f"{path}: no rows")
    X = np.array(feats, dtype=np.float64)
    y = np.array(labels, dtype=np.int64)
    K = int(num_actions) if num_actions is not None else max(2, int(y.max()) + 1)
    if y.min() < 0 or y.max() >= K:
        raise ValueError(f"{path}: label out of range [0, {K})")
    n = X.shape[0]
    n_eval = math.ceil(eval_fraction * n)
    order = np.random.default_rng(seed).permutation(n)
    ev, tr = order[:n_eval], order[n_eval:]
    if tr.size == 0:
        tr = order
    return Environment(X.shape[1], K, float(eps), X[ev], y[ev], rows=X[tr], row_labels=y[tr])


def write_feature_label_file(path, X, labels) -> None:
    lines = [",".join(repr(float(v)) for v in row) + f",{int(lab)}" for row, lab in zip(X, labels)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# cost model and oracles


def sample_cost(env: Environment, x, a, rng: np.random.Generator, labels=None):
    """Bernoulli costs in {-1, 0}; vectorized over rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if labels is None:
        labels = env.optimal_action(x)
    a = np.asarray(a)
    if np.any((a < 0) | (a >= env.num_actions)):
        raise ValueError("action out of range")
    p = env.cost_prob(a, labels)
    c = -(rng.random(np.shape(p)) < p).astype(np.float64)
    return c[0] if x.ndim == 1 and np.ndim(c) else c


def expected_cost(env: Environment, x, a):
    """``c(a, x) = -(eps + 1[a = a*(x)] (1 - 2 eps))``."""
    x = np.asarray(x, dtype=np.float64)
    out = -env.cost_prob(a, env.optimal_action(x))
    return float(out[0]) if x.ndim == 1 and np.size(out) == 1 else out


def true_risk(env: Environment, policy_propensities, round: int | None = None,
              tol: float = ROW_SUM_TOL) -> float:
    """Oracle risk: mean over eval contexts of ``sum_a pi(a|x) c(a, x)``."""
    P = np.asarray(policy_propensities, dtype=np.float64)
    _, labels = env.eval_set(round)
    if P.shape != (labels.size, env.num_actions):
        raise ValueError(f"expected propensities of shape {(labels.size, env.num_actions)}")
    dev = np.abs(P.sum(axis=1) - 1.0).max()
    if dev > tol:
        raise ValueError(f"propensity rows deviate from 1 by {dev:.3g} > {tol:g}")
    C = -env.cost_prob_matrix(labels)
    return float(np.mean(np.sum(P * C, axis=1)))


def risk_from_optimal_propensity(env: Environment, p_opt) -> float:
    """Risk of any policy from ``pi(a*(x)|x)`` alone.

    Exact for the binary cost model: every non-optimal action costs ``-eps``.
    """
    p_opt = np.asarray(p_opt, dtype=np.float64)
    return float(np.mean(-env.noise_eps - (1.0 - 2.0 * env.noise_eps) * p_opt))
