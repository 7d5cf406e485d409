"""Small deterministic numerics: counter-based RNG, tanh MLP with backprop, AdamW.

Everything is float64. Matrices are plain numpy arrays; a weight matrix has
shape ``(out, in)`` so a layer computes ``x @ W.T + b`` on a batch of rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class ContractError(ValueError):
    """A call violated a documented pre-condition (shapes, states, ranges)."""


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def _fmix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps mod 2**64
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


def derive_seed(seed: int, *parts: str | int) -> int:
    """Hash a parent seed and a path of tags/indices into a child seed."""
    z = np.uint64(seed & _MASK64)
    with np.errstate(over="ignore"):
        for part in parts:
            if isinstance(part, str):
                key = np.uint64(_tag_hash(part))
            else:
                key = _fmix(np.uint64((int(part) + 0x632BE59BD9B4E019) & _MASK64))
            z = _fmix(z ^ key) + _GOLDEN
    return int(z)


def _raw_bits(seeds: np.ndarray, counter: int, n: int) -> np.ndarray:
    ctr = np.arange(counter, counter + n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _fmix(ctr * _GOLDEN + _GOLDEN)
        return _fmix(seeds[:, None] ^ key[None, :])


def _bits_to_unit(bits: np.ndarray) -> np.ndarray:
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _box_muller(u: np.ndarray) -> np.ndarray:
    # u has an even trailing dimension; consecutive pairs feed one normal
    u1 = 1.0 - u[..., 0::2]  # (0, 1]
    u2 = u[..., 1::2]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class RngStream:
    """Counter-based random stream: output ``k`` is a pure hash of ``(seed, k)``.

    Drawing advances ``counter``; nothing else is mutable. ``substream`` derives
    an independent stream from a string tag.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def substream(self, *parts: str | int) -> "RngStream":
        return RngStream(derive_seed(self.seed, *parts))

    def uniform(self, n: int) -> np.ndarray:
        out = _bits_to_unit(_raw_bits(np.array([self.seed], dtype=np.uint64), self.counter, n))[0]
        self.counter += n
        return out

    def gaussian(self, n: int) -> np.ndarray:
        """Standard normals; consumes two uniforms per value."""
        return _box_muller(self.uniform(2 * n))

    def integers(self, n: int, high: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


class BatchRng:
    """A bank of independent streams sharing one counter.

    Row ``i`` produces exactly what ``RngStream(seeds[i], counter)`` would, which
    lets vectorized rollouts reproduce single-episode runs bit for bit.
    """

    def __init__(self, seeds, counter: int = 0):
        self.seeds = np.asarray([int(s) & _MASK64 for s in seeds], dtype=np.uint64)
        self.counter = int(counter)

    def uniform(self, n: int) -> np.ndarray:
        out = _bits_to_unit(_raw_bits(self.seeds, self.counter, n))
        self.counter += n
        return out

    def gaussian(self, n: int) -> np.ndarray:
        return _box_muller(self.uniform(2 * n))


def rng_uniform(rng: RngStream, n: int) -> np.ndarray:
    return rng.uniform(n)


def rng_gaussian(rng: RngStream, n: int) -> np.ndarray:
    return rng.gaussian(n)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Weights ``(out, in)`` and biases ``(out,)`` per layer; tanh between layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "linear"  # "linear" | "sigmoid"

    def __post_init__(self):
        if self.head not in ("linear", "sigmoid"):
            raise ContractError(f"unknown output head {self.head!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("weights and biases must be non-empty lists of equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractError(
                    f"layer {i}: input width {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}"
                )

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.head)

    def arrays(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def to_bytes(self) -> bytes:
        return b"".join(a.astype("<f8").tobytes() for a in self.arrays())


def init_mlp(sizes, rng: RngStream, head: str = "linear", out_scale: float = 1.0) -> MlpParams:
    """Glorot-uniform weights, zero biases. ``out_scale`` shrinks the last layer."""
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = (2.0 * rng.uniform(n_in * n_out) - 1.0).reshape(n_out, n_in) * limit
        if i == len(sizes) - 2:
            w *= out_scale
        weights.append(w)
        biases.append(np.zeros(n_out))
    return MlpParams(weights, biases, head)


def _rowwise_matmul(h: np.ndarray, wt: np.ndarray) -> np.ndarray:
    # A plain 2-d matmul may pick a different BLAS kernel (and summation
    # order) depending on the batch size; a stack of 1-row products gives
    # every row the same bits whatever batch it is evaluated in.
    return np.matmul(h[:, None, :], wt)[:, 0, :]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer (post dropout)
    hidden: list[np.ndarray]  # tanh outputs before dropout
    masks: list[np.ndarray | None]
    output: np.ndarray
    squeeze: bool


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mlp_forward(
    params: MlpParams,
    x,
    dropout_rate: float = 0.0,
    rng: RngStream | None = None,
    train_mode: bool = False,
) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on one input vector or a batch of rows.

    Dropout (inverted: kept units scaled by ``1/(1-rate)``) acts on hidden
    activations only and only in train mode.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ContractError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    use_dropout = train_mode and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ContractError("train-mode dropout needs an rng")
    inputs, hidden, masks = [], [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if h.shape[1] != w.shape[1]:
            raise ContractError(f"layer {i}: expected input width {w.shape[1]}, got {h.shape[1]}")
        inputs.append(h)
        z = _rowwise_matmul(h, w.T) + b
        if i == last:
            h = _sigmoid(z) if params.head == "sigmoid" else z
            break
        a = np.tanh(z)
        hidden.append(a)
        if use_dropout:
            keep = rng.uniform(a.size).reshape(a.shape) >= dropout_rate
            mask = keep / (1.0 - dropout_rate)
            masks.append(mask)
            h = a * mask
        else:
            masks.append(None)
            h = a
    out = h[0] if squeeze else h
    return out, ForwardCache(inputs, hidden, masks, h, squeeze)


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def mlp_backward(
    params: MlpParams, cache: ForwardCache, grad_output, through_head: bool = True
) -> tuple[MlpGrads, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. the network output.

    Batch gradients are summed over rows. With ``through_head=False`` the
    incoming gradient is taken w.r.t. the pre-sigmoid logits instead, which
    is how BCE gets a well-conditioned ``q - y``.
    Returns ``(param_grads, input_grad)``.
    """
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise ContractError(f"grad_output shape {g.shape} != output shape {cache.output.shape}")
    if params.head == "sigmoid" and through_head:
        q = cache.output
        g = g * q * (1.0 - q)
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        gw[i] = g.T @ cache.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i:
            if cache.masks[i - 1] is not None:
                g = g * cache.masks[i - 1]
            a = cache.hidden[i - 1]
            g = g * (1.0 - a * a)
    grad_in = g[0] if cache.squeeze else g
    return MlpGrads(gw, gb), grad_in


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, **hyper) -> "AdamWState":
        arrays = params.arrays()
        return cls(**hyper, m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adamw_step(params: MlpParams, grads: MlpGrads, state: AdamWState) -> tuple[MlpParams, AdamWState]:
    """One decoupled-weight-decay Adam update, applied in place.

    Decay multiplies weight matrices by ``1 - lr*wd``; biases are not decayed.
    """
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if len(g_arrays) != len(p_arrays) or len(state.m) != len(p_arrays):
        raise ContractError("gradient / optimizer state does not match parameter layout")
    for k, g in enumerate(g_arrays):
        if g.shape != p_arrays[k].shape:
            raise ContractError(f"layer {k // 2}: gradient shape {g.shape} != {p_arrays[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {k // 2}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for k, (p, g) in enumerate(zip(p_arrays, g_arrays)):
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if k % 2 == 0 and state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params, state
