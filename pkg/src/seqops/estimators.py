"""Regularized importance-weighted risk estimators and logged data.

Every estimator here is an average of ``h(p, q, c)`` over logged interactions,
where ``p`` is the target policy's propensity of the logged action, ``q`` the
logging policy's, and ``c`` the observed cost. All four regularizers are linear
in ``p``, which the objectives exploit for their gradients.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import LoggedInteraction

KINDS = ("ips", "clipped_ips", "ls", "adj_ls")


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str
    lam: float | None = None
    clip: float = 10.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {KINDS}")
        if self.kind == "ls" and not (self.lam is not None and self.lam > 0):
            raise ValueError(f"ls needs lambda > 0, got {self.lam}")
        if self.kind == "adj_ls" and not (self.lam is not None and 0 < self.lam < 1):
            raise ValueError(f"adj_ls needs lambda in (0, 1), got {self.lam}")
        if self.kind == "clipped_ips" and not self.clip >= 1:
            raise ValueError(f"clipping threshold must be >= 1, got {self.clip}")

    @classmethod
    def ips(cls):
        return cls("ips")

    @classmethod
    def clipped(cls, M: float = 10.0):
        return cls("clipped_ips", clip=M)

    @classmethod
    def ls(cls, lam: float):
        return cls("ls", lam=lam)

    @classmethod
    def adj_ls(cls, lam: float):
        return cls("adj_ls", lam=lam)


def h_unit(spec: RegularizerSpec, q, c) -> np.ndarray:
    """``h(spec, 1, q, c)``: the per-interaction weight of the target propensity."""
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if np.any(q <= 0):
        raise ValueError("logged propensities must be positive")
    if spec.kind == "ips":
        return c / q
    if spec.kind == "clipped_ips":
        return np.maximum(c / q, -spec.clip)
    lam = spec.lam
    if spec.kind == "ls":
        return -np.log1p(-lam * c / q) / lam
    denom = q * (1.0 + lam * c)
    if np.any(denom <= 0):
        raise ValueError("adjusted LS needs 1 + lambda c > 0")
    return -np.log1p(-lam * c / denom) / lam


def h_value(spec: RegularizerSpec, p, q, c):
    """Regularized importance-weighted cost ``h(p, q, c) <= 0``.

    ips: ``p c / q``; clipped: ``p max(c / q, -M)``;
    ls: ``-(p / lam) log(1 - lam c / q)``;
    adj_ls: ``-(p / lam) log(1 - lam c / (q (1 + lam c)))``.
    """
    out = np.asarray(p, dtype=np.float64) * h_unit(spec, q, c)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# logged data


@dataclass(frozen=True, eq=False)
class LogDataset:
    """Logged interactions stored column-wise, ordered by round."""

    contexts: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    propensities: np.ndarray
    rounds: np.ndarray

    def __post_init__(self):
        cols = {
            "contexts": np.asarray(self.contexts, dtype=np.float64),
            "actions": np.asarray(self.actions, dtype=np.int64),
            "costs": np.asarray(self.costs, dtype=np.float64),
            "propensities": np.asarray(self.propensities, dtype=np.float64),
            "rounds": np.asarray(self.rounds, dtype=np.int64),
        }
        n = cols["actions"].shape[0]
        if cols["contexts"].ndim != 2 or cols["contexts"].shape[0] != n:
            raise ValueError("contexts must be an (n, d) array")
        for name in ("costs", "propensities", "rounds"):
            if cols[name].shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if np.any(cols["propensities"] <= 0) or np.any(cols["propensities"] > 1):
            raise ValueError("logged propensities must lie in (0, 1]")
        if n and np.any(np.diff(cols["rounds"]) < 0):
            raise ValueError("interactions must be ordered by round")
        for name, arr in cols.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def dim(self) -> int:
        return self.contexts.shape[1]

    @classmethod
    def empty(cls, d: int) -> "LogDataset":
        return cls(np.empty((0, d)), np.empty(0), np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def from_records(cls, records) -> "LogDataset":
        records = list(records)
        if not records:
            raise ValueError("no records")
        return cls(
            np.array([r.context for r in records]),
            np.array([r.action for r in records]),
            np.array([r.cost for r in records]),
            np.array([r.logged_propensity for r in records]),
            np.array([r.round for r in records]),
        )

    def records(self):
        for i in range(len(self)):
            yield LoggedInteraction(self.contexts[i], int(self.actions[i]), float(self.costs[i]),
                                    float(self.propensities[i]), int(self.rounds[i]))

    def append(self, other: "LogDataset") -> "LogDataset":
        if len(self) and len(other) and other.rounds[0] < self.rounds[-1]:
            raise ValueError("appended rounds must not precede existing ones")
        return LogDataset(
            np.concatenate([self.contexts, other.contexts]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.costs, other.costs]),
            np.concatenate([self.propensities, other.propensities]),
            np.concatenate([self.rounds, other.rounds]),
        )

    def subset(self, idx) -> "LogDataset":
        return LogDataset(self.contexts[idx], self.actions[idx], self.costs[idx],
                          self.propensities[idx], self.rounds[idx])

    def round_sizes(self) -> np.ndarray:
        """``n_j`` for rounds ``0 .. max_round``."""
        if not len(self):
            return np.zeros(0, dtype=np.int64)
        return np.bincount(self.rounds)

    def digest(self, upto: int | None = None) -> str:
        """SHA-1 of the first ``upto`` interactions (all by default)."""
        sl = slice(0, len(self) if upto is None else upto)
        h = hashlib.sha1()
        for arr in (self.contexts, self.actions, self.costs, self.propensities, self.rounds):
            h.update(np.ascontiguousarray(arr[sl]).tobytes())
        return h.hexdigest()


def save_log(dataset: LogDataset, path) -> None:
    """Dump as ``round,action,cost,logged_propensity,x_0..x_{d-1}`` with a header."""
    d = dataset.dim
    header = "round,action,cost,logged_propensity," + ",".join(f"x_{j}" for j in range(d))
    lines = [header]
    for i in range(len(dataset)):
        vals = [str(int(dataset.rounds[i])), str(int(dataset.actions[i])),
                repr(float(dataset.costs[i])), repr(float(dataset.propensities[i]))]
        vals += [repr(float(v)) for v in dataset.contexts[i]]
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_log(path) -> LogDataset:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("round,action,cost,logged_propensity"):
        raise ValueError(f"{path}: missing header row")
    d = len(lines[0].split(",")) - 4
    rows = []
    for lineno, ln in enumerate(lines[1:], 2):
        parts = ln.split(",")
        if len(parts) != d + 4:
            raise ValueError(f"{path}:{lineno}: expected {d + 4} columns")
        rows.append(parts)
    if not rows:
        return LogDataset.empty(d)
    arr = np.array(rows, dtype=np.float64)
    return LogDataset(arr[:, 4:], arr[:, 1].astype(np.int64), arr[:, 2], arr[:, 3],
                      arr[:, 0].astype(np.int64))


# ---------------------------------------------------------------------------
# dataset-level estimates


def empirical_risk(spec: RegularizerSpec, dataset: LogDataset, target_propensities) -> float:
    """Mean of ``h(p_i, q_i, c_i)`` with the frozen logged propensities ``q_i``."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    p = np.asarray(target_propensities, dtype=np.float64)
    if p.shape != (n,):
        raise ValueError(f"need one target propensity per interaction ({n}), got shape {p.shape}")
    return float(np.mean(p * h_unit(spec, dataset.propensities, dataset.costs)))


def c_hat_term(dataset: LogDataset, lam: float) -> float:
    """Policy-independent correction ``mean((1 / lam) log(1 / (1 + lam c_i)))``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    c = dataset.costs
    if len(c) == 0:
        raise ValueError("empty dataset")
    if np.any(1.0 + lam * c <= 0):
        raise ValueError("1 + lambda c must be positive (lambda < 1 for costs in [-1, 0])")
    return float(np.mean(-np.log1p(lam * c) / lam))
