"""Trajectory containers, demo mixtures and JSONL serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envsim import EnvConfig, StrategyTag, script_demo
from .numcore import RngStream, derive_seed

SCHEMA_VERSION = 1


class ValidationError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class DemoSource:
    tag: StrategyTag

    kind = "demo"

    def to_dict(self) -> dict:
        return {"kind": "demo", "tag": StrategyTag(self.tag).value}


@dataclass(frozen=True)
class RolloutSource:
    ckpt: int

    kind = "rollout"

    def to_dict(self) -> dict:
        return {"kind": "rollout", "ckpt": int(self.ckpt)}


def source_from_dict(d: dict):
    if d.get("kind") == "demo":
        return DemoSource(StrategyTag(d["tag"]))
    if d.get("kind") == "rollout":
        return RolloutSource(int(d["ckpt"]))
    raise ValueError(f"unknown source {d!r}")


@dataclass
class Trajectory:
    """States ``(T, d)`` (x, y, t/T_max [, extra]) and actions ``(T, 2)``."""

    id: str
    states: np.ndarray
    actions: np.ndarray
    outcome: float
    source: DemoSource | RolloutSource
    seed: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValidationError(f"{self.id}: states/actions must be 2-d")
        if len(self.states) != len(self.actions):
            raise ValidationError(f"{self.id}: {len(self.states)} states vs {len(self.actions)} actions")
        if len(self.states) < 1:
            raise ValidationError(f"{self.id}: empty trajectory")
        if not 0.0 <= self.outcome <= 1.0:
            raise ValidationError(f"{self.id}: outcome {self.outcome} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def tag(self) -> StrategyTag | None:
        """Ground-truth strategy for demos; evaluation metadata only."""
        return self.source.tag if isinstance(self.source, DemoSource) else None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source": self.source.to_dict(),
            "seed": int(self.seed),
            "outcome": float(self.outcome),
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            id=d["id"],
            states=np.array(d["states"], dtype=np.float64),
            actions=np.array(d["actions"], dtype=np.float64),
            outcome=float(d["outcome"]),
            source=source_from_dict(d["source"]),
            seed=int(d["seed"]),
        )


def _check_unique(trajs) -> None:
    seen = set()
    for tr in trajs:
        if tr.id in seen:
            raise ValidationError(f"duplicate trajectory id {tr.id}")
        seen.add(tr.id)


@dataclass
class DemoDataset:
    trajectories: list[Trajectory]
    mixture: dict[str, int] = field(default_factory=dict)
    env_config: EnvConfig | None = None

    def __post_init__(self):
        _check_unique(self.trajectories)
        for tr in self.trajectories:
            if tr.outcome != 1.0:
                raise ValidationError(f"demo {tr.id} is not successful (outcome {tr.outcome})")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


@dataclass
class RolloutSet:
    ckpt: int
    trajectories: list[Trajectory]
    env_config: EnvConfig | None = None

    def __post_init__(self):
        _check_unique(self.trajectories)
        for tr in self.trajectories:
            if not isinstance(tr.source, RolloutSource) or tr.source.ckpt != self.ckpt:
                raise ValidationError(f"rollout {tr.id} does not belong to checkpoint {self.ckpt}")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def success_rate(self) -> float:
        return float(np.mean([t.outcome for t in self.trajectories])) if self.trajectories else 0.0

    def subset(self, n: int) -> "RolloutSet":
        """The first ``n`` episodes; episode order is seed order so this is a fixed subsample."""
        return RolloutSet(self.ckpt, self.trajectories[:n], self.env_config)


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

def _fmt(obj) -> str:
    # repr() of a Python float is the shortest string that round-trips exactly,
    # which is never more than 17 significant digits
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_jsonl(data, path, extra: list[dict] | None = None) -> int:
    """Write a header line then one trajectory per line. Returns bytes written.

    ``extra`` optionally adds per-line fields (e.g. ``{"weight": w}``).
    """
    header = {"schema_version": SCHEMA_VERSION}
    if isinstance(data, RolloutSet):
        header["kind"] = "rollouts"
        header["ckpt"] = data.ckpt
    else:
        header["kind"] = "demos"
        header["mixture"] = dict(data.mixture)
    cfg = data.env_config
    header["env_config"] = cfg.to_dict() if cfg is not None else None
    lines = [_fmt(header)]
    for i, tr in enumerate(data.trajectories):
        d = tr.to_dict()
        if extra is not None:
            d.update(extra[i])
        lines.append(_fmt(d))
    text = "\n".join(lines) + "\n"
    payload = text.encode()
    Path(path).write_bytes(payload)
    return len(payload)


def read_jsonl(path) -> tuple[dict, list[dict]]:
    header = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(str(e), lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno)
            if header is None:
                if obj.get("schema_version") != SCHEMA_VERSION:
                    raise ParseError(f"unsupported schema_version {obj.get('schema_version')!r}", lineno)
                header = obj
            else:
                rows.append((lineno, obj))
    if header is None:
        raise ParseError("missing metadata header", 1)
    return header, rows


def load_jsonl(path):
    """Inverse of :func:`save_jsonl`; returns a DemoDataset or RolloutSet."""
    header, rows = read_jsonl(path)
    trajs = []
    for lineno, obj in rows:
        try:
            trajs.append(Trajectory.from_dict(obj))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ValidationError):
                raise ValidationError(f"line {lineno}: {e}") from None
            raise ParseError(f"bad trajectory record: {e}", lineno) from None
    cfg = EnvConfig.from_dict(header["env_config"]) if header.get("env_config") else None
    if header.get("kind") == "rollouts":
        return RolloutSet(int(header["ckpt"]), trajs, cfg)
    return DemoDataset(trajs, dict(header.get("mixture", {})), cfg)


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------

def build_mixture(spec, config: EnvConfig, seed: int) -> DemoDataset:
    """Scripted demos per ``[(tag, count), ...]``, shuffled by ``seed``."""
    trajs = []
    mixture = {}
    for tag, count in spec:
        tag = StrategyTag(tag)
        if count < 0:
            raise ValueError(f"negative count for {tag.value}")
        mixture[tag.value] = mixture.get(tag.value, 0) + int(count)
        for i in range(int(count)):
            trajs.append(script_demo(tag, config, derive_seed(seed, "demo", tag.value, i)))
    order = RngStream(seed).substream("mixture-shuffle").permutation(len(trajs))
    return DemoDataset([trajs[i] for i in order], mixture, config)


def dataset_stats(data) -> dict:
    trajs = list(data.trajectories)
    by_source: dict[str, int] = {}
    for tr in trajs:
        key = tr.source.tag.value if isinstance(tr.source, DemoSource) else f"ckpt{tr.source.ckpt}"
        by_source[key] = by_source.get(key, 0) + 1
    lengths = np.array([len(t) for t in trajs], dtype=float)
    q = np.quantile(lengths, [0.0, 0.25, 0.5, 0.75, 1.0]).tolist() if trajs else [0.0] * 5
    return {
        "n": len(trajs),
        "by_source": dict(sorted(by_source.items())),
        "length_quantiles": dict(zip(["min", "q25", "median", "q75", "max"], q)),
        "outcome_mean": float(np.mean([t.outcome for t in trajs])) if trajs else float("nan"),
    }
