"""A small deterministic convolutional embedding network.

Implemented directly on numpy so that training is a pure function of
(data, config, seed): valid convolutions, 2x2 max pooling, ReLU, a dense
embedding head with optional sigmoid, triplet-loss backpropagation, and Adam.
Parameters live in float32; casting them to float64 gives a shadow mode for
gradient checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class ConvBlock:
    channels: int
    kernel: int
    pool: bool = False


@dataclass(frozen=True)
class ConvNetConfig:
    input_size: int
    blocks: tuple[ConvBlock, ...]
    embedding_dim: int = 128
    sigmoid_head: bool = True
    l2_normalize: bool = False
    init_scheme: str = "he_uniform"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.init_scheme != "he_uniform":
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        self.feature_shapes()  # raises if any map collapses below 1x1

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, h, w) after each block."""
        c, h, w = 1, self.input_size, self.input_size
        shapes = []
        for i, block in enumerate(self.blocks):
            h, w = h - block.kernel + 1, w - block.kernel + 1
            if block.pool:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError(f"block {i} shrinks the feature map below 1x1")
            c = block.channels
            shapes.append((c, h, w))
        return shapes

    def flat_features(self) -> int:
        c, h, w = self.feature_shapes()[-1] if self.blocks else (1, self.input_size, self.input_size)
        return c * h * w

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "blocks": [[b.channels, b.kernel, b.pool] for b in self.blocks],
            "embedding_dim": self.embedding_dim,
            "sigmoid_head": self.sigmoid_head,
            "l2_normalize": self.l2_normalize,
            "init_scheme": self.init_scheme,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ConvNetConfig":
        return cls(
            input_size=int(doc["input_size"]),
            blocks=tuple(ConvBlock(int(c), int(k), bool(p)) for c, k, p in doc["blocks"]),
            embedding_dim=int(doc["embedding_dim"]),
            sigmoid_head=bool(doc["sigmoid_head"]),
            l2_normalize=bool(doc["l2_normalize"]),
            init_scheme=str(doc["init_scheme"]),
            init_seed=int(doc["init_seed"]),
        )


_PRESETS = {
    # default desk-scale embedding net for 100x100 weight images
    "osl-small": (((16, 10, True), (32, 7, True), (32, 4, True), (64, 4, False)), 128),
    # the classic one-shot siamese feature stack, for fidelity runs
    "koch": (((64, 10, True), (128, 7, True), (128, 4, True), (256, 4, False)), 4096),
    # small enough for quick experiments and CI
    "tiny": (((4, 5, True), (8, 3, True)), 16),
}


def preset(name: str, input_size: int = 100, init_seed: int = 0) -> ConvNetConfig:
    try:
        blocks, dim = _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; known: {sorted(_PRESETS)}") from None
    return ConvNetConfig(
        input_size=input_size,
        blocks=tuple(ConvBlock(*b) for b in blocks),
        embedding_dim=dim,
        init_seed=init_seed,
    )


@dataclass(eq=False)
class NetParams:
    """Named parameter tensors; row order is fixed by the config."""

    tensors: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "NetParams":
        return NetParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "NetParams":
        return NetParams({k: v.copy() for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def __eq__(self, other):
        return (
            isinstance(other, NetParams)
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())
        )


def param_shapes(config: ConvNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, block in enumerate(config.blocks):
        shapes[f"conv{i}.weight"] = (block.channels, c_in, block.kernel, block.kernel)
        shapes[f"conv{i}.bias"] = (block.channels,)
        c_in = block.channels
    shapes["embed.weight"] = (config.embedding_dim, config.flat_features())
    shapes["embed.bias"] = (config.embedding_dim,)
    return shapes


def init_params(config: ConvNetConfig, rng: np.random.Generator | None = None) -> NetParams:
    """He-uniform weights, zero biases, float32."""
    if rng is None:
        rng = np.random.default_rng(config.init_seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = math.prod(shape[1:])
            limit = math.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return NetParams(tensors)


def _conv_forward(x, w, b):
    batch, _, _, _ = x.shape
    out_c, _, k, _ = w.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, OH, OW, k, k)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch, oh * ow, -1)
    out = cols @ w.reshape(out_c, -1).T + b
    y = out.transpose(0, 2, 1).reshape(batch, out_c, oh, ow)
    return y, (cols, x.shape)


def _conv_backward(dy, w, cache):
    cols, x_shape = cache
    batch, out_c, oh, ow = dy.shape
    k = w.shape[2]
    dmat = dy.reshape(batch, out_c, oh * ow).transpose(0, 2, 1)
    dw = np.tensordot(dmat, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dcols = (dmat @ w.reshape(out_c, -1)).reshape(batch, oh, ow, x_shape[1], k, k)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + oh, j : j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(x):
    batch, c, h, w = x.shape
    ph, pw = h // 2, w // 2
    win = (
        x[:, :, : ph * 2, : pw * 2]
        .reshape(batch, c, ph, 2, pw, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, c, ph, pw, 4)
    )
    idx = win.argmax(axis=-1)  # first max wins on ties
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def _pool_backward(dy, cache):
    idx, x_shape = cache
    batch, c, ph, pw = dy.shape
    buf = np.zeros((batch, c, ph, pw, 4), dtype=dy.dtype)
    np.put_along_axis(buf, idx[..., None], dy[..., None], axis=-1)
    block = buf.reshape(batch, c, ph, pw, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, : ph * 2, : pw * 2] = block.reshape(batch, c, ph * 2, pw * 2)
    return dx


def _prepare_batch(config: ConvNetConfig, images, dtype) -> np.ndarray:
    x = np.asarray(images)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != config.input_size or x.shape[2] != config.input_size:
        raise ValueError(
            f"expected images of shape ({config.input_size}, {config.input_size}), got {x.shape}"
        )
    return x[:, None].astype(dtype, copy=False), single


def _forward(config: ConvNetConfig, params: NetParams, x, with_cache=False):
    caches = []
    for i, block in enumerate(config.blocks):
        w, b = params.tensors[f"conv{i}.weight"], params.tensors[f"conv{i}.bias"]
        x, conv_cache = _conv_forward(x, w, b)
        mask = x > 0
        x = x * mask
        pool_cache = None
        if block.pool:
            x, pool_cache = _pool_forward(x)
        caches.append((conv_cache, mask, pool_cache))
    flat = x.reshape(x.shape[0], -1)
    z = flat @ params.tensors["embed.weight"].T + params.tensors["embed.bias"]
    if config.sigmoid_head:
        with np.errstate(over="ignore"):
            emb = 1.0 / (1.0 + np.exp(-z))
    else:
        emb = z
    norms = None
    if config.l2_normalize:
        norms = np.sqrt((emb * emb).sum(axis=1, keepdims=True))
        norms = np.maximum(norms, np.asarray(1e-12, dtype=emb.dtype))
        emb = emb / norms
    if not with_cache:
        return emb, None
    return emb, (caches, flat, emb, norms, x.shape)


def _backward(config: ConvNetConfig, params: NetParams, cache, demb):
    caches, flat, emb, norms, last_shape = cache
    if config.l2_normalize:
        # emb holds the normalized output; undo the projection
        dot = (demb * emb).sum(axis=1, keepdims=True)
        demb = (demb - emb * dot) / norms
    if config.sigmoid_head:
        raw = emb * norms if config.l2_normalize else emb
        demb = demb * raw * (1.0 - raw)
    grads: dict[str, np.ndarray] = {}
    grads["embed.weight"] = demb.T @ flat
    grads["embed.bias"] = demb.sum(axis=0)
    dx = (demb @ params.tensors["embed.weight"]).reshape(last_shape)
    for i in range(len(config.blocks) - 1, -1, -1):
        conv_cache, mask, pool_cache = caches[i]
        if pool_cache is not None:
            dx = _pool_backward(dx, pool_cache)
        dx = dx * mask
        w = params.tensors[f"conv{i}.weight"]
        dx, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = _conv_backward(dx, w, conv_cache)
    return grads


def forward(config: ConvNetConfig, params: NetParams, images) -> np.ndarray:
    """Embed one (h, w) image or a batch of them; deterministic."""
    x, single = _prepare_batch(config, images, params.dtype)
    emb, _ = _forward(config, params, x)
    return emb[0] if single else emb


def triplet_loss(anchor, positive, negative, margin: float) -> float:
    """max(0, ||a-p||^2 - ||a-n||^2 + margin) with squared l2 distances."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    if not (a.shape == p.shape == n.shape):
        raise ValueError("triplet members must share one shape")
    d_ap = ((a - p) ** 2).sum()
    d_an = ((a - n) ** 2).sum()
    return float(max(0.0, d_ap - d_an + margin))


def make_triplets(labels) -> list[tuple[int, int, int]]:
    """All ordered same-label (anchor, positive) pairs times all opposite-label
    negatives, in deterministic index order."""
    labels = list(labels)
    out = []
    for value in sorted(set(labels)):
        members = [i for i, l in enumerate(labels) if l == value]
        others = [i for i, l in enumerate(labels) if l != value]
        for a in members:
            for p in members:
                if p == a:
                    continue
                for n in others:
                    out.append((a, p, n))
    return out


def _triplet_terms(emb, ia, ip, inn, margin):
    d_ap = ((emb[ia] - emb[ip]) ** 2).sum(axis=1)
    d_an = ((emb[ia] - emb[inn]) ** 2).sum(axis=1)
    return d_ap - d_an + margin


def batch_loss(config: ConvNetConfig, params: NetParams, images, triplets, margin: float) -> float:
    """Mean triplet loss of a batch, forward pass only."""
    x, _ = _prepare_batch(config, images, params.dtype)
    emb, _ = _forward(config, params, x)
    ia, ip, inn = (np.asarray(v) for v in zip(*triplets))
    viol = _triplet_terms(emb.astype(np.float64), ia, ip, inn, margin)
    return float(np.maximum(viol, 0.0).sum() / len(triplets))


def backward(config: ConvNetConfig, params: NetParams, images, triplets, margin: float):
    """Analytic gradients of the mean batch triplet loss.

    Returns (grads, loss); inactive triplets contribute nothing to either.
    """
    if not triplets:
        raise ValueError("empty triplet batch")
    x, _ = _prepare_batch(config, images, params.dtype)
    emb, cache = _forward(config, params, x, with_cache=True)
    ia, ip, inn = (np.asarray(v) for v in zip(*triplets))
    viol = _triplet_terms(emb, ia, ip, inn, margin)
    active = viol > 0
    count = len(triplets)
    loss = float(viol[active].astype(np.float64).sum() / count)
    demb = np.zeros_like(emb)
    if active.any():
        ea, ep, en = emb[ia[active]], emb[ip[active]], emb[inn[active]]
        np.add.at(demb, ia[active], 2.0 * (en - ep))
        np.add.at(demb, ip[active], 2.0 * (ep - ea))
        np.add.at(demb, inn[active], 2.0 * (ea - en))
    demb /= count
    return _backward(config, params, cache, demb), loss


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t) for k, t in params.tensors.items()},
        )


def adam_step(
    state: AdamState,
    params: NetParams,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[AdamState, NetParams]:
    """One standard Adam update with bias correction."""
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_m[name], new_v[name] = m, v
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(new_m, new_v, t), NetParams(new_p)


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "UB"
    learning_rate: float = 1e-4
    margin: float = 1.0
    batch_size: int | None = None  # None = all triplets per step
    seed: int = 0
    ub_low: float = 0.5
    ub_high: float = 1.25
    max_epochs: int = 100

    def __post_init__(self):
        if self.strategy not in ("ES", "ST", "UB"):
            raise ValueError(f"strategy must be ES, ST or UB, got {self.strategy!r}")
        if self.learning_rate <= 0 or self.margin <= 0:
            raise ValueError("learning rate and margin must be positive")
        if not self.ub_low < self.ub_high:
            raise ValueError("UB interval must satisfy low < high")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 (or None for full batch)")

    @property
    def epochs(self) -> int:
        return {"ES": 1, "ST": 5, "UB": self.max_epochs}[self.strategy]


@dataclass
class TrainResult:
    params: NetParams
    epoch_losses: list[float]

    @property
    def epochs_run(self) -> int:
        return len(self.epoch_losses)


def train(images, labels, config: ConvNetConfig, train_config: TrainConfig) -> TrainResult:
    """Train the embedding net; a pure function of (data, config, seed).

    The run seed drives both initialization and per-epoch triplet shuffling.
    ES stops after 1 epoch, ST after 5; UB stops once the mean epoch loss
    falls inside [ub_low, ub_high], else at max_epochs.
    """
    triplets = make_triplets(labels)
    if not triplets:
        raise ValueError("training data yields no triplets (need two samples of one class)")
    rng = np.random.default_rng(train_config.seed)
    params = init_params(config, rng)
    state = AdamState.zeros_like(params)
    x = np.asarray(images, dtype=np.float32)
    batch = train_config.batch_size or len(triplets)

    losses: list[float] = []
    for _ in range(train_config.epochs):
        order = rng.permutation(len(triplets))
        total = 0.0
        for start in range(0, len(triplets), batch):
            chunk = [triplets[i] for i in order[start : start + batch]]
            grads, loss = backward(config, params, x, chunk, train_config.margin)
            state, params = adam_step(state, params, grads, train_config.learning_rate)
            total += loss * len(chunk)
        epoch_loss = total / len(triplets)
        losses.append(epoch_loss)
        if train_config.strategy == "UB" and train_config.ub_low <= epoch_loss <= train_config.ub_high:
            break
    return TrainResult(params, losses)
