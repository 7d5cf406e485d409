"""Success classifiers on policy rollouts, cross-validated selection, and filtering.

A classifier maps a single (normalized) state to the probability that it came
from a successful rollout. Demos are scored by their mean per-state
probability and kept when that mean is strictly above the threshold, which is
the mean probability over every state of the chosen classifier's own
training rollouts.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import DemoDataset, RolloutSet, Trajectory
from .numcore import (
    AdamWState,
    ContractError,
    MlpParams,
    RngStream,
    adamw_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

log = logging.getLogger(__name__)

P_CLAMP = 1e-7
SUCCESS_CUTOFF = 0.99  # fractional outcomes at or above this count as successes
PREFIX_STEPS = 100


class CurationConfigError(ValueError):
    pass


class DegenerateFilterError(RuntimeError):
    """Too few demos survived the threshold; carries the score histogram."""

    def __init__(self, msg: str, histogram: dict):
        super().__init__(f"{msg}; score histogram {histogram}")
        self.histogram = histogram


@dataclass
class CurationConfig:
    checkpoints: int = 4
    rollouts_per_ckpt: int = 50
    val_rollouts: int | None = None  # None: same as rollouts_per_ckpt
    epochs: int = 200
    batch: int = 256
    lr: float = 1e-3
    hidden: tuple = (8, 8)
    dropout: float = 0.3
    weight_decay: float = 0.1
    regularization: bool = True
    mode: str = "episode"  # "episode" | "chunk"
    chunk_width: int = 16
    kind: str = "step"  # "step" | "trajectory"
    ckpt_strategy: str = "evenly_spaced"  # "evenly_spaced" | "plateau"
    cross_validation: bool = True
    fallback: bool = False  # keep top 25% by score instead of failing on degenerate filters
    min_kept_fraction: float = 0.05

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.checkpoints < 2:
            raise CurationConfigError("cross-validation needs at least 2 checkpoints")
        if self.rollouts_per_ckpt < 1 or self.chunk_width < 1:
            raise CurationConfigError("rollouts_per_ckpt and chunk_width must be >= 1")
        if self.mode not in ("episode", "chunk"):
            raise CurationConfigError(f"unknown filter mode {self.mode!r}")
        if self.kind not in ("step", "trajectory"):
            raise CurationConfigError(f"unknown classifier kind {self.kind!r}")
        if self.ckpt_strategy not in ("evenly_spaced", "plateau"):
            raise CurationConfigError(f"unknown checkpoint strategy {self.ckpt_strategy!r}")

    @property
    def effective_dropout(self) -> float:
        return self.dropout if self.regularization else 0.0

    @property
    def effective_weight_decay(self) -> float:
        # the unregularized ablation keeps a token 1e-4 decay
        return self.weight_decay if self.regularization else 1e-4


# ---------------------------------------------------------------------------
# normalizer and features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, states) -> np.ndarray:
        return (np.asarray(states, dtype=float) - self.mean) / self.std

    def checksum(self) -> str:
        blob = self.mean.astype("<f8").tobytes() + self.std.astype("<f8").tobytes()
        return hashlib.sha256(blob).hexdigest()[:16]


def fit_normalizer(rollouts) -> Normalizer:
    trajs = list(rollouts)
    if not trajs:
        raise ContractError("cannot fit a normalizer on an empty rollout set")
    s = np.concatenate([t.states[:, :3] for t in trajs])
    return Normalizer(s.mean(axis=0), np.maximum(s.std(axis=0), 1e-8))


def pooled_features(traj: Trajectory, norm: Normalizer, prefix: int = PREFIX_STEPS) -> np.ndarray:
    """Mean, std, min, max per dimension over the first ``prefix`` normalized states.

    Shorter trajectories are padded by repeating their last state.
    """
    s = norm.apply(traj.states[:prefix, :3])
    if len(s) < prefix:
        s = np.concatenate([s, np.repeat(s[-1:], prefix - len(s), axis=0)])
    # centre on the first state so a constant prefix gives an exact zero std
    d = s - s[0]
    return np.concatenate([s[0] + d.mean(axis=0), d.std(axis=0), s.min(axis=0), s.max(axis=0)])


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

@dataclass
class QualityClassifier:
    mlp: MlpParams
    normalizer: Normalizer
    kind: str = "step"
    ckpt: int = 0
    val_loss: float = float("nan")
    best_epoch: int = 0
    dropout: float = 0.3
    weight_decay: float = 0.1
    val_history: list[float] = field(default_factory=list)
    train_history: list[float] = field(default_factory=list)

    def step_probs(self, traj: Trajectory) -> np.ndarray:
        """Eval-mode success probability of every state (step kind)."""
        q, _ = mlp_forward(self.mlp, self.normalizer.apply(traj.states[:, :3]))
        return q[:, 0]

    def traj_prob(self, traj: Trajectory) -> float:
        q, _ = mlp_forward(self.mlp, pooled_features(traj, self.normalizer))
        return float(q[0])


def constant_classifier(c: float, kind: str = "step") -> QualityClassifier:
    """A classifier that outputs ``c`` everywhere (zero weights, logit bias)."""
    width = 3 if kind == "step" else 12
    logit = np.log(c / (1.0 - c))
    mlp = MlpParams([np.zeros((1, width))], [np.array([logit])], "sigmoid")
    return QualityClassifier(mlp, Normalizer(np.zeros(3), np.ones(3)), kind)


def bce(q, y) -> np.ndarray:
    q = np.clip(q, P_CLAMP, 1.0 - P_CLAMP)
    return -y * np.log(q) - (1.0 - y) * np.log(1.0 - q)


def step_loss(classifier: QualityClassifier, traj: Trajectory, y: float) -> float:
    """Per-step binary cross-entropy averaged over the trajectory; soft labels allowed."""
    if not 0.0 <= y <= 1.0:
        raise ContractError(f"label {y} outside [0, 1]")
    if classifier.kind == "trajectory":
        return float(bce(np.array([classifier.traj_prob(traj)]), y)[0])
    return float(bce(classifier.step_probs(traj), y).mean())


def dataset_loss(classifier: QualityClassifier, rollouts) -> float:
    """Mean over trajectories of :func:`step_loss` with the trajectory's own outcome."""
    trajs = list(rollouts)
    return float(np.mean([step_loss(classifier, t, t.outcome) for t in trajs]))


def _design(trajs, norm: Normalizer, kind: str):
    """Inputs, labels and per-row weights whose weighted mean equals the dataset loss."""
    if kind == "trajectory":
        x = np.stack([pooled_features(t, norm) for t in trajs])
        y = np.array([t.outcome for t in trajs], dtype=float)
        return x, y, np.ones(len(trajs))
    x = np.concatenate([norm.apply(t.states[:, :3]) for t in trajs])
    y = np.concatenate([np.full(len(t), t.outcome) for t in trajs])
    w = np.concatenate([np.full(len(t), 1.0 / len(t)) for t in trajs])
    return x, y, w * (len(x) / len(trajs))


def _weighted_loss(mlp: MlpParams, x, y, w) -> float:
    q, _ = mlp_forward(mlp, x)
    return float(np.dot(w, bce(q[:, 0], y)) / len(x))


def train_classifier(train, val, config: CurationConfig, seed: int, ckpt: int = 0) -> QualityClassifier:
    """AdamW on the trajectory-averaged BCE; returns the epoch with lowest val loss.

    Epoch 0 (the initial parameters) is a candidate, so ``epochs=0`` returns
    the untrained network with its validation loss.
    """
    train = list(train)
    val = list(val)
    if not train:
        raise ContractError("empty classifier training set")
    if not val:
        raise ContractError("empty classifier validation set")
    labels = {t.outcome >= SUCCESS_CUTOFF for t in train}
    if len(labels) < 2:
        log.warning("classifier training set for checkpoint %d holds a single class", ckpt)
    norm = fit_normalizer(train)
    kind = config.kind
    x, y, w = _design(train, norm, kind)
    xv, yv, wv = _design(val, norm, kind)
    rng = RngStream(seed)
    mlp = init_mlp([x.shape[1], *config.hidden, 1], rng.substream("init"), "sigmoid")
    opt = AdamWState.for_params(mlp, lr=config.lr, weight_decay=config.effective_weight_decay)
    drop = config.effective_dropout
    batch_rng = rng.substream("batches")
    drop_rng = rng.substream("dropout")
    best = mlp.copy()
    best_loss = _weighted_loss(mlp, xv, yv, wv)
    best_epoch = 0
    val_hist = [best_loss]
    train_hist = [_weighted_loss(mlp, x, y, w)]
    n = len(x)
    bs = config.batch if kind == "step" else min(config.batch, n)
    for epoch in range(1, config.epochs + 1):
        order = batch_rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            q, cache = mlp_forward(mlp, x[idx], drop, drop_rng, train_mode=True)
            g = (w[idx] * (q[:, 0] - y[idx]) / len(idx))[:, None]
            grads, _ = mlp_backward(mlp, cache, g, through_head=False)
            adamw_step(mlp, grads, opt)
        vl = _weighted_loss(mlp, xv, yv, wv)
        val_hist.append(vl)
        train_hist.append(_weighted_loss(mlp, x, y, w))
        if vl < best_loss:
            best, best_loss, best_epoch = mlp.copy(), vl, epoch
    return QualityClassifier(
        best, norm, kind, ckpt, best_loss, best_epoch, drop, config.effective_weight_decay, val_hist, train_hist
    )


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

@dataclass
class Selection:
    chosen: QualityClassifier
    candidates: list[QualityClassifier]
    train_sets: dict[int, RolloutSet]
    val_ckpt: int | None

    @property
    def val_losses(self) -> list[float]:
        return [c.val_loss for c in self.candidates]

    @property
    def train_set(self) -> RolloutSet:
        return self.train_sets[self.chosen.ckpt]


def select_min(candidates: list[QualityClassifier]) -> QualityClassifier:
    """Lowest recorded validation loss; earliest candidate wins ties."""
    if not candidates:
        raise ContractError("no candidate classifiers")
    return min(candidates, key=lambda c: c.val_loss)


def plateau_index(success_rates) -> int:
    """Earliest checkpoint reaching 90% of the best checkpoint's success."""
    rates = np.asarray(success_rates, dtype=float)
    return int(np.argmax(rates >= 0.9 * rates.max()))


def plateau_candidates(success_rates) -> tuple[list[int], int]:
    """Training checkpoints near the plateau and the validation (best) checkpoint.

    Validation uses the best-performing checkpoint (latest on ties). Training
    uses the plateau checkpoint and its neighbours, excluding the validation one.
    """
    rates = np.asarray(success_rates, dtype=float)
    c = len(rates)
    best = int(c - 1 - np.argmax(rates[::-1]))
    p = plateau_index(rates)
    near = [i for i in (p - 1, p, p + 1) if 0 <= i < c and i != best]
    if not near:
        near = [min((i for i in range(c) if i != best), key=lambda i: abs(i - p))]
    return near, best


def cross_validate_select(rollout_sets: list[RolloutSet], config: CurationConfig, seed: int,
                          success_rates=None) -> Selection:
    """Train one classifier per early checkpoint, validate all on a held-out checkpoint.

    ``rollout_sets`` are ordered by checkpoint. With the evenly spaced strategy
    the last set validates and the others train. The plateau strategy needs
    per-checkpoint ``success_rates``.
    """
    c = len(rollout_sets)
    if c < 2:
        raise CurationConfigError("cross-validation needs rollouts from at least 2 checkpoints")
    if config.ckpt_strategy == "plateau":
        if success_rates is None:
            success_rates = [rs.success_rate for rs in rollout_sets]
        train_idx, val_idx = plateau_candidates(success_rates)
    else:
        train_idx, val_idx = list(range(c - 1)), c - 1
    val = rollout_sets[val_idx]
    cands = []
    for i in train_idx:
        rs = rollout_sets[i]
        cands.append(train_classifier(rs, val, config, RngStream(seed).substream("classifier", i).seed, ckpt=rs.ckpt))
    chosen = select_min(cands)
    return Selection(chosen, cands, {rollout_sets[i].ckpt: rollout_sets[i] for i in train_idx}, val.ckpt)


def holdout_select(pool: RolloutSet, config: CurationConfig, seed: int) -> Selection:
    """No cross-validation: split one checkpoint's rollouts into random halves."""
    trajs = list(pool)
    if len(trajs) < 2:
        raise CurationConfigError("hold-out split needs at least 2 rollouts")
    order = RngStream(seed).substream("holdout-split").permutation(len(trajs))
    half = len(trajs) // 2
    tr = RolloutSet(pool.ckpt, [trajs[i] for i in sorted(order[:half])], pool.env_config)
    va = RolloutSet(pool.ckpt, [trajs[i] for i in sorted(order[half:])], pool.env_config)
    clf = train_classifier(tr, va, config, RngStream(seed).substream("classifier", "holdout").seed, ckpt=pool.ckpt)
    return Selection(clf, [clf], {pool.ckpt: tr}, None)


# ---------------------------------------------------------------------------
# scoring and filtering
# ---------------------------------------------------------------------------

def episode_score(classifier: QualityClassifier, traj: Trajectory) -> float:
    if classifier.kind == "trajectory":
        return classifier.traj_prob(traj)
    return float(classifier.step_probs(traj).mean())


def compute_threshold(classifier: QualityClassifier, rollouts) -> float:
    """Mean success probability over every state of ``rollouts`` (state-weighted).

    For the trajectory kind each rollout contributes its single pooled score.
    """
    trajs = list(rollouts)
    if classifier.kind == "trajectory":
        return float(np.mean([classifier.traj_prob(t) for t in trajs]))
    return float(np.concatenate([classifier.step_probs(t) for t in trajs]).mean())


def score_histogram(scores, bins: int = 10) -> dict:
    counts, edges = np.histogram(np.asarray(list(scores), dtype=float), bins=bins, range=(0.0, 1.0))
    return {f"{edges[i]:.1f}-{edges[i + 1]:.1f}": int(counts[i]) for i in range(bins)}


@dataclass
class CurationResult:
    gamma: float
    chosen_ckpt: int
    val_losses: list[float]
    scores: dict[str, float]
    kept: list[str]
    discarded: list[str]
    kept_rollouts: list[str] = field(default_factory=list)
    mode: str = "episode"
    normalizer_checksum: str = ""
    fallback_used: bool = False
    composition: dict = field(default_factory=dict)

    @property
    def kept_fraction(self) -> float:
        total = len(self.kept) + len(self.discarded)
        return len(self.kept) / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "chosen_ckpt": self.chosen_ckpt,
            "val_losses": list(self.val_losses),
            "scores": dict(self.scores),
            "kept": list(self.kept),
            "discarded": list(self.discarded),
            "kept_rollouts": list(self.kept_rollouts),
            "mode": self.mode,
            "normalizer_checksum": self.normalizer_checksum,
            "fallback_used": self.fallback_used,
            "kept_fraction": self.kept_fraction,
            "composition": self.composition,
        }


def _apply_rule(ids, scores, gamma, config: CurationConfig | None, what: str):
    keep = [s > gamma for s in scores]
    min_frac = config.min_kept_fraction if config else 0.05
    fallback = bool(config and config.fallback)
    if ids and sum(keep) < min_frac * len(ids):
        hist = score_histogram(scores)
        if not fallback:
            raise DegenerateFilterError(
                f"only {sum(keep)} of {len(ids)} {what} scored above gamma={gamma:.6g}", hist
            )
        log.warning("degenerate filter (%d/%d kept); keeping top 25%% by score", sum(keep), len(ids))
        order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
        top = set(order[: max(1, int(np.ceil(0.25 * len(ids))))])
        return [i in top for i in range(len(ids))], True
    return keep, False


def _composition(demos, kept_ids: set[str]) -> dict:
    comp: dict[str, dict[str, int]] = {}
    for tr in demos:
        tag = tr.tag.value if tr.tag is not None else "rollout"
        row = comp.setdefault(tag, {"kept": 0, "discarded": 0})
        row["kept" if tr.id in kept_ids else "discarded"] += 1
    return dict(sorted(comp.items()))


def filter_episodes(demos, classifier: QualityClassifier, gamma: float,
                    config: CurationConfig | None = None, val_losses=()) -> CurationResult:
    """Keep demos whose mean state probability is strictly above ``gamma``."""
    trajs = list(demos)
    ids = [t.id for t in trajs]
    scores = [episode_score(classifier, t) for t in trajs]
    keep, used_fallback = _apply_rule(ids, scores, gamma, config, "demos")
    kept = [i for i, k in zip(ids, keep) if k]
    return CurationResult(
        gamma=gamma,
        chosen_ckpt=classifier.ckpt,
        val_losses=list(val_losses),
        scores=dict(zip(ids, scores)),
        kept=kept,
        discarded=[i for i, k in zip(ids, keep) if not k],
        mode="episode",
        normalizer_checksum=classifier.normalizer.checksum(),
        fallback_used=used_fallback,
        composition=_composition(trajs, set(kept)),
    )


def split_chunks(traj: Trajectory, width: int) -> list[Trajectory]:
    if width < 1:
        raise ContractError("chunk width must be >= 1")
    out = []
    for j, start in enumerate(range(0, len(traj), width)):
        sl = slice(start, start + width)
        out.append(replace(traj, id=f"{traj.id}#c{j}", states=traj.states[sl], actions=traj.actions[sl]))
    return out


def filter_chunks(demos, classifier: QualityClassifier, gamma: float, width: int = 16,
                  config: CurationConfig | None = None, val_losses=()) -> tuple[CurationResult, list[Trajectory]]:
    """Apply the keep rule to non-overlapping ``width``-step windows.

    Returns the result (ids are chunk ids) and the kept chunks as standalone
    trajectories, so training never samples across a removed chunk.
    """
    if classifier.kind != "step":
        raise ContractError("chunk filtering needs a per-step classifier")
    trajs = list(demos)
    chunks = [c for t in trajs for c in split_chunks(t, width)]
    ids = [c.id for c in chunks]
    scores = [episode_score(classifier, c) for c in chunks]
    keep, used_fallback = _apply_rule(ids, scores, gamma, config, "chunks")
    kept_chunks = [c for c, k in zip(chunks, keep) if k]
    kept = [c.id for c in kept_chunks]
    comp: dict[str, dict[str, int]] = {}
    for c, k in zip(chunks, keep):
        row = comp.setdefault(c.tag.value if c.tag is not None else "rollout", {"kept": 0, "discarded": 0})
        row["kept" if k else "discarded"] += 1
    result = CurationResult(
        gamma=gamma,
        chosen_ckpt=classifier.ckpt,
        val_losses=list(val_losses),
        scores=dict(zip(ids, scores)),
        kept=kept,
        discarded=[i for i, k in zip(ids, keep) if not k],
        mode="chunk",
        normalizer_checksum=classifier.normalizer.checksum(),
        fallback_used=used_fallback,
        composition=dict(sorted(comp.items())),
    )
    return result, kept_chunks


def filter_rollouts(rollout_sets, classifier: QualityClassifier, gamma: float) -> list[Trajectory]:
    """Successful rollouts whose score is strictly above ``gamma``."""
    out = []
    for rs in rollout_sets:
        for t in rs:
            if t.outcome >= SUCCESS_CUTOFF and episode_score(classifier, t) > gamma:
                out.append(t)
    return out


def train_trajectory_classifier(train, val, config: CurationConfig, seed: int, ckpt: int = 0) -> QualityClassifier:
    return train_classifier(train, val, replace(config, kind="trajectory"), seed, ckpt)


def curate(demos: DemoDataset, rollout_sets: list[RolloutSet], config: CurationConfig, seed: int,
           holdout_pool: RolloutSet | None = None, success_rates=None):
    """Select a classifier, threshold it, filter demos and rollouts.

    Returns ``(result, training_trajectories, selection)`` where the training
    trajectories are the kept demos (or chunks) followed by the kept rollouts.
    """
    if config.cross_validation:
        sel = cross_validate_select(rollout_sets, config, seed, success_rates)
    else:
        if holdout_pool is None:
            raise CurationConfigError("no-cross-validation mode needs a hold-out rollout pool")
        sel = holdout_select(holdout_pool, config, seed)
    clf = sel.chosen
    gamma = compute_threshold(clf, sel.train_set)
    if config.mode == "chunk" and config.kind == "step":
        result, kept_demo_trajs = filter_chunks(demos, clf, gamma, config.chunk_width, config, sel.val_losses)
    else:
        result = filter_episodes(demos, clf, gamma, config, sel.val_losses)
        kept_ids = set(result.kept)
        kept_demo_trajs = [t for t in demos if t.id in kept_ids]
    kept_rollouts = filter_rollouts(rollout_sets, clf, gamma)
    result.kept_rollouts = [t.id for t in kept_rollouts]
    return result, kept_demo_trajs + kept_rollouts, sel
