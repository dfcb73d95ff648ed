"""Configuration dataclasses and the flat key-value config file.

Config files hold one ``key value`` pair per line (``key = value`` and
``key: value`` also work, ``#`` starts a comment). Key names follow the
hyper-parameter tables of the PlaNet/Dreamer lineage, e.g.::

    belief-size 200
    free-nats 3
    action-learning-rate 0.1-0.01-0.005-0.0001
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class TrainConfig:
    # world model sizes (desk scale; 200/30/200/1024 for fidelity runs)
    belief_size: int = 64
    state_size: int = 16
    hidden_size: int = 64
    embedding_size: int = 64
    min_stddev: float = 1e-4
    # world model optimisation
    free_nats: float = 3.0
    learning_rate: float = 1e-3
    adam_epsilon: float = 1e-4
    grad_clip_norm: float = 1000.0
    batch_size: int = 50
    chunk_length: int = 50
    collect_interval: int = 100
    experience_size: int = 10_000  # episodes
    # actor-critic (policy / policy-grad-mpc planners only)
    imagination_horizon: int = 15
    discount: float = 0.99
    lambda_: float = 0.95
    actor_learning_rate: float = 8e-5
    value_learning_rate: float = 8e-5
    seed: int = 0

    def __post_init__(self):
        if min(self.belief_size, self.state_size, self.hidden_size, self.embedding_size) < 1:
            raise ValueError("layer sizes must be positive")
        if self.chunk_length < 2:
            raise ValueError("chunk_length must be >= 2")
        if self.batch_size < 1 or self.collect_interval < 0:
            raise ValueError("batch_size must be >= 1 and collect_interval >= 0")


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 12
    iterations: int = 40
    candidates: int = 1000
    action_lr_schedule: tuple[float, ...] = (0.1, 0.01, 0.005, 0.0001)
    action_low: float = -1.0
    action_high: float = 1.0
    discount: float = 1.0
    elite_count: int | None = None  # None: min(100, candidates)
    lambda_: float = 0.95
    exploration_noise: float = 0.3
    block_size: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "action_lr_schedule", tuple(float(a) for a in self.action_lr_schedule))
        if self.horizon < 1 or self.iterations < 1 or self.candidates < 1:
            raise ValueError("need horizon >= 1, iterations >= 1, candidates >= 1")
        if self.elite_count is not None and not 1 <= self.elite_count <= self.candidates:
            raise ValueError("elite_count must lie in [1, candidates]")
        if not self.action_lr_schedule or min(self.action_lr_schedule) <= 0:
            raise ValueError("action_lr_schedule must be nonempty and positive")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if not self.action_low < self.action_high:
            raise ValueError("action bounds must satisfy low < high")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    @property
    def top_k(self) -> int:
        """CEM elite count; unset means min(100, candidates)."""
        return min(100, self.candidates) if self.elite_count is None else self.elite_count

    def learning_rate(self, iteration: int, iterations: int | None = None) -> float:
        """Step size for ``iteration``: the schedule is split into equal blocks over the iterations."""
        k = len(self.action_lr_schedule)
        total = max(self.iterations if iterations is None else iterations, 1)
        return self.action_lr_schedule[min(iteration * k // total, k - 1)]


PLANNER_KINDS = ("grad-mpc", "cem", "policy", "policy-grad-mpc", "random")


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "point_reacher"
    planner: str = "grad-mpc"
    planner_cfg: PlannerConfig = field(default_factory=PlannerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed_episodes: int = 5
    total_steps: int = 50_000  # environment (physics) steps, action repeat included
    episode_length: int | None = None  # physics steps; None = env default
    action_repeat: int | None = None  # None = env default
    eval_episodes: int = 10
    eval_interval: int = 5  # planner episodes between evaluations
    seeds: tuple[int, ...] = (0, 1, 2)
    model: str = "learned"  # "learned" or "true" (analytic model, where an env provides one)
    wall_clock: bool = True  # False writes 0 in the seconds column so reruns are byte-identical

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.planner not in PLANNER_KINDS:
            raise ValueError(f"unknown planner {self.planner!r}; choose from {PLANNER_KINDS}")
        if self.model not in ("learned", "true"):
            raise ValueError("model must be 'learned' or 'true'")
        if self.seed_episodes < 0 or self.eval_episodes < 1 or self.eval_interval < 1:
            raise ValueError("seed_episodes >= 0, eval_episodes >= 1, eval_interval >= 1 required")


def _schedule(text: str) -> tuple[float, ...]:
    # dash-separated values; entries may themselves contain "e-" (1e-3-1e-4)
    parts, out = str(text).split("-"), []
    i = 0
    while i < len(parts):
        tok = parts[i]
        while tok.lower().endswith("e") and i + 1 < len(parts):
            i += 1
            tok = f"{tok}-{parts[i]}"
        out.append(float(tok))
        i += 1
    return tuple(out)


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in str(text).replace(",", " ").split())


# key -> (section, field, parser)
KEYS: dict[str, tuple[str, str, object]] = {
    "belief-size": ("train", "belief_size", int),
    "state-size": ("train", "state_size", int),
    "hidden-size": ("train", "hidden_size", int),
    "embedding-size": ("train", "embedding_size", int),
    "min-stddev": ("train", "min_stddev", float),
    "free-nats": ("train", "free_nats", float),
    "learning-rate": ("train", "learning_rate", float),
    "adam-epsilon": ("train", "adam_epsilon", float),
    "grad-clip-norm": ("train", "grad_clip_norm", float),
    "batch-size": ("train", "batch_size", int),
    "chunk-length": ("train", "chunk_length", int),
    "collect-interval": ("train", "collect_interval", int),
    "experience-size": ("train", "experience_size", int),
    "imagination-horizon": ("train", "imagination_horizon", int),
    "discount": ("train", "discount", float),
    "lambda": ("train", "lambda_", float),
    "actor-learning-rate": ("train", "actor_learning_rate", float),
    "value-learning-rate": ("train", "value_learning_rate", float),
    "planning-horizon": ("planner", "horizon", int),
    "optimisation-iters": ("planner", "iterations", int),
    "candidates": ("planner", "candidates", int),
    "top-candidates": ("planner", "elite_count", int),
    "action-learning-rate": ("planner", "action_lr_schedule", _schedule),
    "planning-discount": ("planner", "discount", float),
    "exploration-noise": ("planner", "exploration_noise", float),
    "candidate-block-size": ("planner", "block_size", int),
    "env": ("experiment", "env", str),
    "planner": ("experiment", "planner", str),
    "model": ("experiment", "model", str),
    "seed-episodes": ("experiment", "seed_episodes", int),
    "total-steps": ("experiment", "total_steps", int),
    "max-episode-length": ("experiment", "episode_length", int),
    "action-repeat": ("experiment", "action_repeat", int),
    "eval-episodes": ("experiment", "eval_episodes", int),
    "eval-interval": ("experiment", "eval_interval", int),
    "seeds": ("experiment", "seeds", _seeds),
    "wall-clock": ("experiment", "wall_clock", _bool),
    "seed": ("both", "seed", int),
}

# Keys from the reference tables that have no effect at this scale. They are
# accepted only with the value that matches what is implemented.
FIXED_KEYS = {
    "optimizer": "adam",
    "activation-function": "relu",
    "overshooting-kl-beta": "0",
    "overshooting-reward-scale": "0",
    "global-kl-beta": "0",
}
# Image-only settings: accepted and ignored.
IGNORED_KEYS = {"bit-depth", "overshooting-distance"}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            bits = line.split(None, 1)
            if len(bits) != 2:
                raise ConfigError(f"line {lineno}: expected 'key value', got {line!r}")
            key, value = bits
        pairs[key.strip().lower()] = value.strip()
    return pairs


def load_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def build_experiment(pairs: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply key-value pairs on top of ``base`` (defaults when omitted)."""
    base = base or ExperimentConfig()
    sections: dict[str, dict] = {"train": {}, "planner": {}, "experiment": {}}
    for key, raw in pairs.items():
        if key in IGNORED_KEYS:
            continue
        if key in FIXED_KEYS:
            if str(raw).strip().lower() not in (FIXED_KEYS[key], FIXED_KEYS[key] + ".0"):
                raise ConfigError(f"{key}: only {FIXED_KEYS[key]!r} is supported, got {raw!r}")
            continue
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, parse = KEYS[key]
        try:
            value = parse(raw)
        except ValueError as err:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from err
        if section == "both":
            sections["train"][name] = value
            sections["planner"][name] = value
        else:
            sections[section][name] = value
    try:
        train = dataclasses.replace(base.train, **sections["train"])
        planner = dataclasses.replace(base.planner_cfg, **sections["planner"])
        return dataclasses.replace(base, train=train, planner_cfg=planner, **sections["experiment"])
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def config_to_pairs(cfg: ExperimentConfig) -> dict[str, str]:
    """Inverse of :func:`build_experiment` for the keys it understands."""
    out = {}
    for key, (section, name, _) in KEYS.items():
        if section == "both":
            obj = cfg.train
        else:
            obj = {"train": cfg.train, "planner": cfg.planner_cfg, "experiment": cfg}[section]
        value = getattr(obj, name)
        if value is None:
            continue
        if name == "action_lr_schedule":
            value = "-".join(repr(v) for v in value)
        elif name == "seeds":
            value = ",".join(str(s) for s in value)
        out[key] = str(value)
    return out
