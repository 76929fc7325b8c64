"""Experiment configuration files.

Grammar, one item per line::

    # comment
    [section]
    key = value

Values are integers, floats, ``true`` / ``false``, ``none``, quoted or bare
strings, or bracketed comma-separated arrays of those scalars.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .env import DriftSchedule, Environment, drift_context_sampler, load_feature_label_env, make_synthetic_env
from .learner import ALGORITHMS, LambdaRule, LearnerConfig
from .optimizer import OptimizerConfig
from .policy import PropensityConfig, SupervisedConfig, make_logging_policy

_SECTION = re.compile(r"^\[([A-Za-z_][A-Za-z0-9_]*)\]$")
_ITEM = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry as ``section.key``."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _scalar(text: str):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def _strip_comment(line: str) -> str:
    out, quote = [], None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def parse_config_text(text: str) -> dict:
    """Parse into ``{section: {key: value}}``; keys before any header go to ``""``."""
    data: dict = {"": {}}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            if section in data and data[section]:
                raise ConfigError(section, f"line {lineno}: duplicate section")
            data.setdefault(section, {})
            continue
        m = _ITEM.match(line)
        if not m:
            raise ConfigError(section or "<top>", f"line {lineno}: cannot parse {raw.strip()!r}")
        key, value = m.group(1), m.group(2).strip()
        if key in data[section]:
            raise ConfigError(f"{section}.{key}", f"line {lineno}: duplicate key")
        if value.startswith("["):
            if not value.endswith("]"):
                raise ConfigError(f"{section}.{key}", f"line {lineno}: unterminated array")
            inner = value[1:-1].strip()
            data[section][key] = [_scalar(v) for v in inner.split(",")] if inner else []
        else:
            data[section][key] = _scalar(value)
    if not data[""]:
        del data[""]
    return data


def parse_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return parse_config_text(text)


# ---------------------------------------------------------------------------
# typed blocks


@dataclass(frozen=True)
class EnvBlock:
    d: int = 20
    K: int = 10
    eps: float = 0.2
    seed: int = 0
    num_eval: int = 2000
    drift_step: float = 0.0
    drift: bool = False
    data_path: str | None = None


@dataclass(frozen=True)
class PolicyBlock:
    sigma: float = 1.0
    alpha: float = 0.0
    supervised_size: int = 1000
    propensity: str = "monte_carlo"
    num_samples: int = 32
    num_nodes: int = 64
    noise_seed: int = 0


@dataclass(frozen=True)
class LearnerBlock:
    algorithm: str = "seq_ls"
    rounds: int = 10
    total: int = 20000
    batch_sizes: list | None = None
    lambda_rule: str = "inv_sqrt_m"
    lambda_value: float | None = None
    lambda_alpha: float = 0.0
    gamma: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int | None = 32
    delta: float = 0.05
    warm_start: bool = True
    report_bounds: bool = True
    scrm_clip: float = 10.0


@dataclass(frozen=True)
class RunBlock:
    num_seeds: int = 1
    out: str = "runs"
    emit_plots: bool = False
    jobs: int = 1


_BLOCKS = {"env": EnvBlock, "policy": PolicyBlock, "learner": LearnerBlock, "run": RunBlock}


def _coerce(section, name, value, default):
    key = f"{section}.{name}"
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _block(section, cls, raw):
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for name, value in raw.items():
        if name not in defaults:
            raise ConfigError(f"{section}.{name}", "unknown key")
        out[name] = _coerce(section, name, value, defaults[name])
    return cls(**out)


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvBlock = field(default_factory=EnvBlock)
    policy: PolicyBlock = field(default_factory=PolicyBlock)
    learner: LearnerBlock = field(default_factory=LearnerBlock)
    run: RunBlock = field(default_factory=RunBlock)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        for section in data:
            if section not in _BLOCKS:
                raise ConfigError(section or "<top>", "unknown section")
        cfg = cls(**{s: _block(s, c, data.get(s, {})) for s, c in _BLOCKS.items()})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(parse_config(path))

    def with_learner(self, **kw) -> "ExperimentConfig":
        cfg = replace(self, learner=replace(self.learner, **kw))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Build every object once so constructor errors surface with key names."""
        e, p, lr, r = self.env, self.policy, self.learner, self.run
        if lr.algorithm not in ALGORITHMS:
            raise ConfigError("learner.algorithm",
                              f"unknown algorithm {lr.algorithm!r}; expected one of {ALGORITHMS}")
        checks = [
            ("env.d", e.d >= 1, "must be >= 1"),
            ("env.K", e.K >= 2, "must be >= 2"),
            ("env.eps", 0.0 <= e.eps < 0.5, "must lie in [0, 0.5)"),
            ("env.num_eval", e.num_eval >= 1, "must be >= 1"),
            ("policy.sigma", p.sigma > 0, "must be positive"),
            ("policy.alpha", 0.0 <= p.alpha <= 1.0, "must lie in [0, 1]"),
            ("policy.supervised_size", p.supervised_size >= 0, "must be >= 0"),
            ("policy.supervised_size", p.alpha == 0 or p.supervised_size > 0,
             "must be positive when alpha > 0"),
            ("run.num_seeds", r.num_seeds >= 1, "must be >= 1"),
            ("run.jobs", r.jobs >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        for key, build in (("policy.propensity", self.propensity_config),
                           ("learner.lambda_rule", self.lambda_rule),
                           ("learner.optimizer", self.optimizer_config)):
            try:
                build()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        try:
            self.learner_config(seed=0, prior=None)
        except ValueError as exc:
            raise ConfigError("learner", str(exc)) from None

    # -- builders -----------------------------------------------------------

    def propensity_config(self) -> PropensityConfig:
        p = self.policy
        return PropensityConfig(p.propensity, p.num_samples, p.num_nodes, p.noise_seed)

    def lambda_rule(self) -> LambdaRule:
        lr = self.learner
        return LambdaRule(lr.lambda_rule, lr.lambda_value, lr.lambda_alpha, lr.gamma,
                          lr.beta1, lr.beta2)

    def optimizer_config(self) -> OptimizerConfig:
        lr = self.learner
        return OptimizerConfig(lr=lr.lr, epochs=lr.epochs, batch_size=lr.batch_size)

    def learner_config(self, seed: int, prior) -> LearnerConfig:
        lr = self.learner
        sizes = tuple(lr.batch_sizes) if lr.batch_sizes else None
        return LearnerConfig(
            algorithm=lr.algorithm, rounds=lr.rounds, total=lr.total, batch_sizes=sizes,
            lambda_rule=self.lambda_rule(), optimizer=self.optimizer_config().replace(seed=seed),
            prior_policy=prior, sigma=self.policy.sigma, seed=seed,
            train_prop=self.propensity_config(), delta=lr.delta, warm_start=lr.warm_start,
            report_bounds=lr.report_bounds, scrm_clip=lr.scrm_clip)

    def build_env(self) -> Environment:
        e = self.env
        if e.data_path:
            env = load_feature_label_env(e.data_path, e.eps, seed=e.seed)
        else:
            env = make_synthetic_env(e.d, e.K, e.eps, e.seed, e.num_eval)
        if e.drift or e.drift_step:
            env = drift_context_sampler(
                env, DriftSchedule.linear(e.drift_step, self.learner.rounds + 1, env.dim_context))
        return env

    def build_prior(self, env: Environment):
        """Initial policy: uniform, or a tempered supervised fit when ``alpha > 0``."""
        p = self.policy
        if p.alpha == 0:
            return None
        rng = np.random.default_rng([self.env.seed, 0x5E7])
        X, labels = env.sample_contexts(p.supervised_size, rng, 0)
        return make_logging_policy(env, (X, labels), p.alpha, SupervisedConfig(), p.sigma)
