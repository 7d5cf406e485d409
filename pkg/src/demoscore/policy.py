"""Mixture-density behavior cloning: training, sampling, rollouts, evaluation."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .datamodel import DemoDataset, RolloutSet, RolloutSource, Trajectory
from .envsim import EnvConfig, reset_batch, step_batch
from .numcore import (
    AdamWState,
    BatchRng,
    ContractError,
    MlpParams,
    RngStream,
    adamw_step,
    derive_seed,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

log = logging.getLogger(__name__)

SIGMA_MIN = 1e-3
SIGMA_MAX = 0.2
_LOG_SMIN = math.log(SIGMA_MIN)
_LOG_SRANGE = math.log(SIGMA_MAX) - math.log(SIGMA_MIN)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
Z90 = 1.6449


class TrainingError(RuntimeError):
    pass


@dataclass
class MdnPolicy:
    """Trunk MLP whose linear output packs ``[logits(K), mu(K,2), rho(K,2)]``.

    Means are scaled by ``action_cap``; std devs map ``rho`` smoothly into
    ``[SIGMA_MIN, SIGMA_MAX]``. Inputs are z-scored with stored statistics.
    """

    net: MlpParams
    n_components: int
    in_mean: np.ndarray
    in_std: np.ndarray
    action_cap: float = 0.05

    @property
    def in_dim(self) -> int:
        return self.net.sizes[0]

    def copy(self) -> "MdnPolicy":
        return MdnPolicy(self.net.copy(), self.n_components, self.in_mean.copy(), self.in_std.copy(), self.action_cap)

    def to_bytes(self) -> bytes:
        """Versioned little-endian blob: header, layer shapes, normalizer, parameters."""
        sizes = self.net.sizes
        head = struct.pack("<4sIIdI", b"MDNP", 1, self.n_components, self.action_cap, len(sizes))
        head += struct.pack(f"<{len(sizes)}I", *sizes)
        body = self.in_mean.astype("<f8").tobytes() + self.in_std.astype("<f8").tobytes() + self.net.to_bytes()
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MdnPolicy":
        magic, version, k, cap, n_sizes = struct.unpack_from("<4sIIdI", blob, 0)
        if magic != b"MDNP" or version != 1:
            raise ValueError("not an MDN policy blob (bad magic/version)")
        off = struct.calcsize("<4sIIdI")
        sizes = list(struct.unpack_from(f"<{n_sizes}I", blob, off))
        off += 4 * n_sizes
        flat = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
        d = sizes[0]
        in_mean, in_std, flat = flat[:d], flat[d : 2 * d], flat[2 * d :]
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[: n_in * n_out].reshape(n_out, n_in).copy())
            flat = flat[n_in * n_out :]
            biases.append(flat[:n_out].copy())
            flat = flat[n_out:]
        if flat.size:
            raise ValueError("trailing bytes in policy blob")
        return cls(MlpParams(weights, biases, "linear"), k, in_mean.copy(), in_std.copy(), cap)


def init_policy(in_dim: int, rng: RngStream, n_components: int = 5, hidden=(64, 64),
                in_mean=None, in_std=None, action_cap: float = 0.05) -> MdnPolicy:
    net = init_mlp([in_dim, *hidden, 5 * n_components], rng, "linear", out_scale=0.1)
    return MdnPolicy(
        net,
        n_components,
        np.zeros(in_dim) if in_mean is None else np.asarray(in_mean, float),
        np.ones(in_dim) if in_std is None else np.asarray(in_std, float),
        action_cap,
    )


def _split_heads(policy: MdnPolicy, raw: np.ndarray):
    k = policy.n_components
    logits = raw[:, :k]
    mu = policy.action_cap * raw[:, k : 3 * k].reshape(-1, k, 2)
    rho = raw[:, 3 * k : 5 * k].reshape(-1, k, 2)
    s = 0.5 * (1.0 + np.tanh(0.5 * rho))
    log_sigma = _LOG_SMIN + _LOG_SRANGE * s
    return logits, mu, log_sigma, s


def mixture_params(policy: MdnPolicy, states):
    """``(weights (n,K), mu (n,K,2), sigma (n,K,2))`` for a batch of raw states."""
    x = (np.atleast_2d(states) - policy.in_mean) / policy.in_std
    raw, _ = mlp_forward(policy.net, x)
    logits, mu, log_sigma, _ = _split_heads(policy, raw)
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return w, mu, np.exp(log_sigma)


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def nll_and_grad(policy: MdnPolicy, states, actions, weights=None, need_grad: bool = True):
    """Per-sample NLLs and, optionally, grads of ``sum(w * nll) / n``.

    Returns ``(nll (n,), grads | None)``.
    """
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    n = len(states)
    x = (states - policy.in_mean) / policy.in_std
    raw, cache = mlp_forward(policy.net, x)
    logits, mu, log_sigma, s = _split_heads(policy, raw)
    log_pi = logits - _logsumexp(logits, 1)[:, None]
    diff = actions[:, None, :] - mu  # (n,K,2)
    inv_var = np.exp(-2.0 * log_sigma)
    comp = (-0.5 * diff * diff * inv_var - log_sigma - _HALF_LOG_2PI).sum(axis=2)
    joint = log_pi + comp
    lse = _logsumexp(joint, 1)
    nll = -lse
    if not np.all(np.isfinite(nll)):
        raise FloatingPointError("non-finite MDN negative log-likelihood")
    if not need_grad:
        return nll, None
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    scale = (w / n)[:, None]
    resp = np.exp(joint - lse[:, None])  # posterior responsibilities
    pi = np.exp(log_pi)
    g_logits = (pi - resp) * scale
    g_mu = -(resp * scale)[:, :, None] * diff * inv_var * policy.action_cap
    g_logsig = -(resp * scale)[:, :, None] * (diff * diff * inv_var - 1.0)
    g_rho = g_logsig * _LOG_SRANGE * s * (1.0 - s)
    k = policy.n_components
    g_raw = np.concatenate([g_logits, g_mu.reshape(n, 2 * k), g_rho.reshape(n, 2 * k)], axis=1)
    grads, _ = mlp_backward(policy.net, cache, g_raw)
    return nll, grads


def mdn_nll(policy: MdnPolicy, state, action) -> float:
    nll, _ = nll_and_grad(policy, state, action, need_grad=False)
    return float(nll[0])


def sample_action(policy: MdnPolicy, state, rng: RngStream) -> np.ndarray:
    """Ancestral sample: component from the categorical, then diagonal gaussian."""
    w, mu, sigma = mixture_params(policy, state)
    u = rng.uniform(1)
    z = rng.gaussian(2)
    return _sample_from(policy, w, mu, sigma, u[None, :], z[None, :])[0]


def _sample_from(policy, w, mu, sigma, u, z):
    cdf = np.cumsum(w, axis=1)
    k = np.minimum((cdf <= u).sum(axis=1), w.shape[1] - 1)
    rows = np.arange(len(k))
    a = mu[rows, k] + sigma[rows, k] * z
    return np.clip(a, -policy.action_cap, policy.action_cap)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainRun:
    steps: int = 20000
    batch: int = 64
    lr: float = 1e-3
    checkpoints: int = 4
    n_components: int = 5
    hidden: tuple = (64, 64)
    log_every: int = 500

    def __post_init__(self):
        if self.checkpoints < 2:
            raise ContractError("need at least 2 checkpoints")
        if self.steps < self.checkpoints:
            raise ContractError("steps must be at least the number of checkpoints")

    @property
    def schedule(self) -> list[int]:
        return [i * self.steps // self.checkpoints for i in range(1, self.checkpoints + 1)]


@dataclass
class TrainResult:
    checkpoints: list[MdnPolicy]
    steps: list[int]
    loss_curve: list[tuple[int, float]] = field(default_factory=list)

    @property
    def final(self) -> MdnPolicy:
        return self.checkpoints[-1]


def stack_pairs(trajectories, weights=None, extra_input=None):
    """Flatten episodes into ``(states, actions, per-step weights)``.

    ``extra_input[i]`` (scalar) is appended as a constant column to episode i.
    """
    states, actions, w = [], [], []
    for i, tr in enumerate(trajectories):
        s = tr.states
        if extra_input is not None:
            s = np.column_stack([s, np.full(len(s), float(extra_input[i]))])
        states.append(s)
        actions.append(tr.actions)
        w.append(np.full(len(s), 1.0 if weights is None else float(weights[i])))
    return np.concatenate(states), np.concatenate(actions), np.concatenate(w)


def train_bc(
    data,
    run: TrainRun,
    seed: int,
    weights=None,
    extra_input=None,
    init: MdnPolicy | None = None,
) -> TrainResult:
    """Minibatch Adam on the mean per-step weighted NLL; snapshots at ``run.schedule``.

    ``data`` is a DemoDataset or a plain list of trajectories. ``init`` fine-tunes
    an existing policy instead of starting from scratch.
    """
    trajs = list(data.trajectories if hasattr(data, "trajectories") else data)
    if not trajs:
        raise TrainingError("cannot train a policy on an empty dataset")
    states, actions, w = stack_pairs(trajs, weights, extra_input)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise TrainingError("episode weights must be finite and non-negative")
    rng = RngStream(seed)
    if init is None:
        std = states.std(axis=0)
        policy = init_policy(
            states.shape[1], rng.substream("init"), run.n_components, run.hidden,
            states.mean(axis=0), np.where(std > 1e-8, std, 1.0),
        )
    else:
        if init.in_dim != states.shape[1]:
            raise ContractError(f"fine-tune input width {init.in_dim} != data width {states.shape[1]}")
        policy = init.copy()
    opt = AdamWState.for_params(policy.net, lr=run.lr)
    batch_rng = rng.substream("batches")
    schedule = run.schedule
    snaps, curve = [], []
    running, count = 0.0, 0
    n = len(states)
    for step in range(1, run.steps + 1):
        idx = batch_rng.integers(run.batch, n)
        nll, grads = nll_and_grad(policy, states[idx], actions[idx], w[idx])
        loss = float(np.dot(w[idx], nll) / run.batch)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        adamw_step(policy.net, grads, opt)
        running += loss
        count += 1
        if step % run.log_every == 0 or step == run.steps:
            curve.append((step, running / count))
            running, count = 0.0, 0
        if step in schedule:
            snaps.append(policy.copy())
    return TrainResult(snaps, schedule, curve)


def episode_nll(policy: MdnPolicy, traj: Trajectory, extra=None) -> float:
    s = traj.states
    if extra is not None:
        s = np.column_stack([s, np.full(len(s), float(extra))])
    nll, _ = nll_and_grad(policy, s, traj.actions, need_grad=False)
    return float(nll.mean())


# ---------------------------------------------------------------------------
# rollouts and evaluation
# ---------------------------------------------------------------------------

def episode_seeds(seed: int, m: int) -> list[int]:
    return [derive_seed(seed, "episode", j) for j in range(m)]


def run_episodes(policy: MdnPolicy, config: EnvConfig, seeds, condition=None):
    """Roll out one episode per seed, all in lockstep.

    Returns a list of ``(states, actions, reached, collided)``. Episode ``j``
    depends only on ``seeds[j]``.
    """
    m = len(seeds)
    pos = reset_batch(config, seeds)
    pol_rng = BatchRng([derive_seed(s, "policy") for s in seeds])
    dyn_rng = BatchRng([derive_seed(s, "dynamics") for s in seeds])
    alive = np.ones(m, dtype=bool)
    reached = np.zeros(m, dtype=bool)
    collided = np.zeros(m, dtype=bool)
    obs_log, act_log = [], []
    lengths = np.zeros(m, dtype=int)
    for t in range(config.max_steps):
        obs = np.column_stack([pos, np.full(m, t / config.max_steps)])
        if condition is not None:
            obs = np.column_stack([obs, np.full(m, float(condition))])
        w, mu, sigma = mixture_params(policy, obs)
        u = pol_rng.uniform(1)
        z = pol_rng.gaussian(2)
        act = _sample_from(policy, w, mu, sigma, u, z)
        noise = dyn_rng.gaussian(2)
        obs_log.append(obs)
        act_log.append(act)
        new_pos, _, col, rea, tout = step_batch(pos, t, act, noise, config)
        lengths[alive] += 1
        collided |= alive & col
        reached |= alive & rea
        alive &= ~(col | rea | tout)
        pos = np.where(alive[:, None], new_pos, pos)
        if not alive.any():
            break
    obs_arr = np.stack(obs_log, axis=1)
    act_arr = np.stack(act_log, axis=1)
    return [(obs_arr[j, : lengths[j]], act_arr[j, : lengths[j]], bool(reached[j]), bool(collided[j])) for j in range(m)]


def collect_rollouts(policy: MdnPolicy, config: EnvConfig, m: int, seed: int, ckpt: int = 0,
                     condition=None) -> RolloutSet:
    if m < 1:
        raise ContractError("need at least one rollout")
    seeds = episode_seeds(seed, m)
    trajs = []
    for j, (s, a, reached, collided) in enumerate(run_episodes(policy, config, seeds, condition)):
        if condition is not None:
            s = s[:, :3]
        trajs.append(
            Trajectory(
                id=f"ro-c{ckpt}-{seeds[j]:016x}",
                states=s,
                actions=a,
                outcome=1.0 if (reached and not collided) else 0.0,
                source=RolloutSource(ckpt),
                seed=seeds[j],
            )
        )
    return RolloutSet(ckpt, trajs, config)


def wilson_interval(successes: float, n: int, z: float = Z90) -> tuple[float, float]:
    if n <= 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    # at p = 0 or 1 one bound is exactly p; rounding must not push it past p
    return max(0.0, min(p, center - half)), min(1.0, max(p, center + half))


@dataclass
class SuccessStats:
    n: int
    successes: float
    p_hat: float
    lo: float
    hi: float
    mode: str = "wilson"  # "wilson" | "normal" (fractional outcomes)

    @classmethod
    def from_outcomes(cls, outcomes) -> "SuccessStats":
        o = np.asarray(outcomes, dtype=float)
        n = len(o)
        if n == 0:
            raise ContractError("no outcomes")
        if np.all((o == 0.0) | (o == 1.0)):
            k = float(o.sum())
            lo, hi = wilson_interval(k, n)
            return cls(n, k, k / n, lo, hi, "wilson")
        mean = float(o.mean())
        half = Z90 * float(o.std(ddof=1) if n > 1 else 0.0) / math.sqrt(n)
        return cls(n, float(o.sum()), mean, max(0.0, mean - half), min(1.0, mean + half), "normal")

    def to_dict(self) -> dict:
        return {"n": self.n, "successes": self.successes, "p_hat": self.p_hat, "lo": self.lo, "hi": self.hi,
                "mode": self.mode}


def evaluate_policy(policy: MdnPolicy, config: EnvConfig, n: int, seed: int, condition=None) -> SuccessStats:
    ro = collect_rollouts(policy, config, n, seed, condition=condition)
    return SuccessStats.from_outcomes([t.outcome for t in ro])


def route_of(traj: Trajectory, config: EnvConfig) -> str:
    """``"wide"``, ``"narrow"`` or ``"none"``: the opening used at the wall crossing."""
    x = traj.states[:, 0]
    y = traj.states[:, 1]
    crossing = np.nonzero((x[:-1] < 0) & (x[1:] >= 0))[0]
    if crossing.size:
        i = crossing[0]
        ymax = max(abs(y[i]), abs(y[i + 1]))
        return "wide" if ymax > 0.5 * (config.gap_half_width + config.open_y_min) else "narrow"
    # never crossed (collision or timeout): judge by where it was heading
    return "wide" if np.max(y) > 0.5 * (config.gap_half_width + config.open_y_min) else "narrow"
