"""Per-user feed-forward network with hand-written forward and backward passes.

Architecture (10 trainable layers when an embedding slice is present): the
leading embedding dimensions run through a 4-layer bottleneck (ReLU x3, Tanh)
that maps 384 down to 64; the result is concatenated with the remaining
features, standardized per example, and fed through a 6-layer trunk (ReLU x5,
linear 2-d output). Dropout is applied right after the standardization and
again before the output layer. The read probability is the sigmoid of output
channel 1 and training minimizes its mean squared error against the click
label, which keeps scores usable as a ranking signal.

Feature sets without the embedding slice skip the bottleneck entirely and the
trunk consumes the raw categorical vector.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from newsrec.binio import ChecksumWriter, derive_seed, read_checksummed
from newsrec.errors import DataError, FormatError, NumericError, UsageError
from newsrec.sampler import SyntheticPool

log = logging.getLogger(__name__)

MODEL_MAGIC = b"DNNRMOD1"
MODEL_VERSION = 1

_NORM_EPS = 1e-8


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    embedding_dim: int = 384
    bottleneck_widths: tuple[int, ...] = (256, 128, 64, 64)
    trunk_widths: tuple[int, ...] = (256, 128, 64, 32, 16, 2)
    dropout_rate: float = 0.2
    epochs: int = 15
    batch_size: int = 60
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise UsageError(f"input_dim must be >= 1, got {self.input_dim}")
        if not 0 <= self.embedding_dim <= self.input_dim:
            raise UsageError(
                f"embedding_dim {self.embedding_dim} outside [0, input_dim={self.input_dim}]"
            )
        if self.embedding_dim > 0 and len(self.bottleneck_widths) != 4:
            raise UsageError(
                f"bottleneck must have 4 layers, got {len(self.bottleneck_widths)}: "
                "the network is fixed at 10 trainable layers"
            )
        if len(self.trunk_widths) != 6:
            raise UsageError(f"trunk must have 6 layers, got {len(self.trunk_widths)}")
        if self.trunk_widths[-1] != 2:
            raise UsageError(f"output layer must be 2-d, got {self.trunk_widths[-1]}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise UsageError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise UsageError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if min(self.epochs, self.batch_size) < 1 or self.learning_rate <= 0:
            raise UsageError("epochs and batch_size must be >= 1 and learning_rate > 0")

    @property
    def n_bottleneck(self) -> int:
        return 4 if self.embedding_dim > 0 else 0

    @property
    def n_layers(self) -> int:
        return self.n_bottleneck + len(self.trunk_widths)

    @property
    def concat_dim(self) -> int:
        rest = self.input_dim - self.embedding_dim
        if self.embedding_dim > 0:
            return self.bottleneck_widths[-1] + rest
        return rest

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for every trainable layer, bottleneck first."""
        shapes: list[tuple[int, int]] = []
        if self.embedding_dim > 0:
            fan_in = self.embedding_dim
            for width in self.bottleneck_widths:
                shapes.append((fan_in, width))
                fan_in = width
        fan_in = self.concat_dim
        for width in self.trunk_widths:
            shapes.append((fan_in, width))
            fan_in = width
        return shapes

    def layer_activations(self) -> list[str]:
        acts = ["relu", "relu", "relu", "tanh"] if self.embedding_dim > 0 else []
        return acts + ["relu"] * 5 + ["linear"]

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["bottleneck_widths"] = list(self.bottleneck_widths)
        d["trunk_widths"] = list(self.trunk_widths)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["bottleneck_widths"] = tuple(d["bottleneck_widths"])
        d["trunk_widths"] = tuple(d["trunk_widths"])
        return cls(**d)


@dataclass
class UserModel:
    user_id: str
    config: NetworkConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss_trace: list[float] = field(default_factory=list)


def init_network(config: NetworkConfig, user_id: str = "") -> UserModel:
    """He-uniform init for ReLU layers, Xavier for Tanh and output; zero biases."""
    rng = np.random.default_rng(config.seed)
    dtype = config.np_dtype()
    weights, biases = [], []
    for (fan_in, fan_out), act in zip(config.layer_shapes(), config.layer_activations()):
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return UserModel(user_id=user_id, config=config, weights=weights, biases=biases)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0)
    if act == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return (z > 0).astype(z.dtype)
    if act == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def _check_finite(z: np.ndarray, layer: int) -> None:
    if not np.isfinite(z).all():
        raise NumericError(f"non-finite activations at layer {layer + 1}")


class _ForwardCache:
    __slots__ = ("layer_inputs", "layer_zs", "rest", "norm_y", "norm_inv_std", "mask1", "mask2", "probs")

    def __init__(self) -> None:
        self.layer_inputs: list[np.ndarray] = []
        self.layer_zs: list[np.ndarray] = []
        self.rest = None
        self.norm_y = None
        self.norm_inv_std = None
        self.mask1 = None
        self.mask2 = None
        self.probs = None


def _forward_batch(
    model: UserModel,
    X: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, _ForwardCache]:
    """Run the network on a (batch, input_dim) matrix.

    Returns read probabilities (float64) and the cache needed for backprop.
    Dropout draws come from `rng` and only happen in train mode.
    """
    cfg = model.config
    dtype = cfg.np_dtype()
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise NumericError(f"input shape {X.shape} does not match input_dim {cfg.input_dim}")
    if train_mode and cfg.dropout_rate > 0 and rng is None:
        raise UsageError("train-mode forward needs an RNG for dropout")
    X = np.ascontiguousarray(X, dtype=dtype)
    cache = _ForwardCache()
    acts = cfg.layer_activations()
    keep = 1.0 - cfg.dropout_rate

    n_b = cfg.n_bottleneck
    if n_b:
        h = X[:, : cfg.embedding_dim]
        cache.rest = X[:, cfg.embedding_dim :]
        for k in range(n_b):
            z = h @ model.weights[k] + model.biases[k]
            _check_finite(z, k)
            cache.layer_inputs.append(h)
            cache.layer_zs.append(z)
            h = _activate(z, acts[k])
        concat = np.concatenate([h, cache.rest], axis=1)
    else:
        concat = X

    # Per-example standardization over the concatenated features (no affine).
    mu = concat.mean(axis=1, keepdims=True)
    centered = concat - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _NORM_EPS)
    normed = centered * inv_std
    cache.norm_y = normed
    cache.norm_inv_std = inv_std

    h = normed
    if train_mode and cfg.dropout_rate > 0:
        cache.mask1 = (rng.random(h.shape) >= cfg.dropout_rate).astype(dtype) / keep
        h = h * cache.mask1

    n_trunk = len(cfg.trunk_widths)
    for j in range(n_trunk):
        k = n_b + j
        z = h @ model.weights[k] + model.biases[k]
        _check_finite(z, k)
        cache.layer_inputs.append(h)
        cache.layer_zs.append(z)
        h = _activate(z, acts[k])
        if j == n_trunk - 2 and train_mode and cfg.dropout_rate > 0:
            cache.mask2 = (rng.random(h.shape) >= cfg.dropout_rate).astype(dtype) / keep
            h = h * cache.mask2

    probs = _sigmoid(h[:, 1])
    cache.probs = probs
    return probs, cache


def _backward_batch(
    model: UserModel, cache: _ForwardCache, labels: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Exact gradients of mean((sigmoid(out[:,1]) - label)^2) w.r.t. all layers."""
    cfg = model.config
    dtype = cfg.np_dtype()
    acts = cfg.layer_activations()
    n_b = cfg.n_bottleneck
    n_layers = cfg.n_layers
    batch = labels.shape[0]

    probs = cache.probs
    # d loss / d logit of channel 1; channel 0 never receives gradient.
    dp = (2.0 / batch) * (probs - labels.astype(np.float64))
    dz_out = np.zeros_like(cache.layer_zs[-1])
    dz_out[:, 1] = (dp * probs * (1.0 - probs)).astype(dtype)

    grads_w: list[np.ndarray] = [np.empty(0)] * n_layers
    grads_b: list[np.ndarray] = [np.empty(0)] * n_layers

    d = dz_out
    for k in range(n_layers - 1, n_b - 1, -1):
        j = k - n_b
        grads_w[k] = cache.layer_inputs[k].T @ d
        grads_b[k] = d.sum(axis=0)
        da = d @ model.weights[k].T
        if j > 0:
            if j - 1 == len(cfg.trunk_widths) - 2 and cache.mask2 is not None:
                da = da * cache.mask2
            d = da * _activation_grad(cache.layer_zs[k - 1], acts[k - 1])
        else:
            d_dropped = da

    if cache.mask1 is not None:
        d_normed = d_dropped * cache.mask1
    else:
        d_normed = d_dropped

    # Standardization backward: dx = r*(g - mean(g) - y*mean(g*y)) per example.
    y = cache.norm_y
    g = d_normed
    gy_mean = (g * y).mean(axis=1, keepdims=True)
    g_mean = g.mean(axis=1, keepdims=True)
    d_concat = cache.norm_inv_std * (g - g_mean - y * gy_mean)

    if n_b:
        d = d_concat[:, : cfg.bottleneck_widths[-1]] * _activation_grad(
            cache.layer_zs[n_b - 1], acts[n_b - 1]
        )
        for k in range(n_b - 1, -1, -1):
            grads_w[k] = cache.layer_inputs[k].T @ d
            grads_b[k] = d.sum(axis=0)
            if k > 0:
                da = d @ model.weights[k].T
                d = da * _activation_grad(cache.layer_zs[k - 1], acts[k - 1])
    return grads_w, grads_b


def loss_and_grads(
    model: UserModel,
    X: np.ndarray,
    labels: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared error on the read probability plus exact gradients."""
    probs, cache = _forward_batch(model, X, train_mode=train_mode, rng=rng)
    err = probs - labels.astype(np.float64)
    loss = float((err * err).mean())
    grads_w, grads_b = _backward_batch(model, cache, labels)
    return loss, grads_w, grads_b


def forward(
    model: UserModel,
    features: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> float:
    """Read probability in (0, 1) for a single feature vector."""
    probs, _ = _forward_batch(model, np.asarray(features)[None, :], train_mode=train_mode, rng=rng)
    return float(probs[0])


class _AdamState:
    def __init__(self, model: UserModel) -> None:
        self.m_w = [np.zeros_like(w) for w in model.weights]
        self.v_w = [np.zeros_like(w) for w in model.weights]
        self.m_b = [np.zeros_like(b) for b in model.biases]
        self.v_b = [np.zeros_like(b) for b in model.biases]
        self.t = 0

    def step(self, model: UserModel, grads_w, grads_b, lr: float) -> None:
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        bc1 = 1.0 - beta1**self.t
        bc2 = 1.0 - beta2**self.t
        for k in range(len(model.weights)):
            for param, grad, m, v in (
                (model.weights[k], grads_w[k], self.m_w[k], self.v_w[k]),
                (model.biases[k], grads_b[k], self.m_b[k], self.v_b[k]),
            ):
                m *= beta1
                m += (1.0 - beta1) * grad
                v *= beta2
                v += (1.0 - beta2) * grad * grad
                param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def train_user(
    model: UserModel, pool: SyntheticPool, rng: np.random.Generator | None = None
) -> UserModel:
    """Train in place on the pool for config.epochs epochs; returns the model.

    Mini-batches are reshuffled each epoch and the final short batch is used.
    The loss trace records the mean squared error per epoch (float64
    accumulation). A single-class pool trains with a warning; a NaN loss
    raises NumericError.
    """
    cfg = model.config
    if not pool.entries:
        raise DataError(f"user {pool.user_id}: empty training pool")
    missing = [e.news_id for e in pool.entries if e.features is None]
    if missing:
        raise DataError(f"user {pool.user_id}: pool entries lack features (e.g. {missing[0]!r})")
    labels_all = np.array([e.label for e in pool.entries], dtype=np.float64)
    if labels_all.min() == labels_all.max():
        log.warning("user %s: single-class pool (all labels %d)", pool.user_id, int(labels_all[0]))
    X = np.stack([e.features for e in pool.entries]).astype(cfg.np_dtype())
    if rng is None:
        rng = np.random.default_rng(derive_seed("train", cfg.seed, model.user_id))

    adam = _AdamState(model) if cfg.optimizer == "adam" else None
    n = len(pool.entries)
    model.loss_trace = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        sq_err_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = X[idx], labels_all[idx]
            probs, cache = _forward_batch(model, xb, train_mode=True, rng=rng)
            err = probs - yb
            sq_err_sum += float((err * err).sum())
            grads_w, grads_b = _backward_batch(model, cache, yb)
            if adam is not None:
                adam.step(model, grads_w, grads_b, cfg.learning_rate)
            else:
                for k in range(len(model.weights)):
                    model.weights[k] -= cfg.learning_rate * grads_w[k]
                    model.biases[k] -= cfg.learning_rate * grads_b[k]
        epoch_loss = sq_err_sum / n
        if not np.isfinite(epoch_loss):
            raise NumericError(f"user {pool.user_id}: training loss diverged to NaN/Inf")
        model.loss_trace.append(epoch_loss)
    return model


def predict(
    model: UserModel, candidates: list[tuple[str, np.ndarray]], chunk_size: int = 4096
) -> list[tuple[str, float]]:
    """Score candidates in input order with dropout disabled."""
    if not candidates:
        return []
    out: list[tuple[str, float]] = []
    for start in range(0, len(candidates), chunk_size):
        chunk = candidates[start : start + chunk_size]
        X = np.stack([feat for _, feat in chunk])
        probs, _ = _forward_batch(model, X, train_mode=False)
        out.extend((nid, float(p)) for (nid, _), p in zip(chunk, probs))
    return out


# ---------------------------------------------------------------------------
# DNNR-MOD binary format (little-endian):
#   magic "DNNRMOD1" | u32 version=1 | u16 uid_len | uid utf-8
#   u32 cfg_len | config JSON (sorted keys) | u32 trace_len | trace_len * f64
#   u32 n_layers | n_layers * [u32 rows | u32 cols | rows*cols f32/f64 weights
#                              (row-major) | cols f32/f64 biases]
#   u64 FNV-1a checksum of all preceding bytes
# ---------------------------------------------------------------------------


def save_model(model: UserModel, path: str | Path) -> None:
    writer = ChecksumWriter(MODEL_MAGIC)
    writer.pack("<I", MODEL_VERSION)
    writer.write_str(model.user_id)
    cfg_blob = json.dumps(model.config.to_json_dict(), sort_keys=True).encode("utf-8")
    writer.pack("<I", len(cfg_blob))
    writer.write(cfg_blob)
    writer.pack("<I", len(model.loss_trace))
    writer.write(np.asarray(model.loss_trace, dtype="<f8").tobytes())
    writer.pack("<I", len(model.weights))
    wire_dtype = "<f4" if model.config.dtype == "float32" else "<f8"
    for w, b in zip(model.weights, model.biases):
        writer.pack("<II", w.shape[0], w.shape[1])
        writer.write(np.ascontiguousarray(w, dtype=wire_dtype).tobytes())
        writer.write(np.ascontiguousarray(b, dtype=wire_dtype).tobytes())
    writer.save(path)


def load_model(path: str | Path) -> UserModel:
    reader = read_checksummed(path, MODEL_MAGIC)
    version = reader.unpack("<I")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model file version {version}")
    user_id = reader.read_str()
    cfg = NetworkConfig.from_json_dict(json.loads(reader.read(reader.unpack("<I")).decode("utf-8")))
    trace_len = reader.unpack("<I")
    trace = np.frombuffer(reader.read(8 * trace_len), dtype="<f8").tolist()
    n_layers = reader.unpack("<I")
    if n_layers != cfg.n_layers:
        raise FormatError(f"{path}: {n_layers} layers on disk but config implies {cfg.n_layers}")
    wire_dtype = "<f4" if cfg.dtype == "float32" else "<f8"
    itemsize = 4 if cfg.dtype == "float32" else 8
    weights, biases = [], []
    for (fan_in, fan_out) in cfg.layer_shapes():
        rows, cols = reader.unpack("<II")
        if (rows, cols) != (fan_in, fan_out):
            raise FormatError(f"{path}: layer shape {(rows, cols)} != config {(fan_in, fan_out)}")
        w = np.frombuffer(reader.read(itemsize * rows * cols), dtype=wire_dtype)
        weights.append(w.reshape(rows, cols).astype(cfg.np_dtype()))
        b = np.frombuffer(reader.read(itemsize * cols), dtype=wire_dtype)
        biases.append(b.astype(cfg.np_dtype()))
    if not reader.at_end():
        raise FormatError(f"{path}: trailing bytes after weights")
    return UserModel(user_id=user_id, config=cfg, weights=weights, biases=biases, loss_trace=trace)


def scaled_config(input_dim: int, embedding_dim: int, seed: int = 0, **overrides) -> NetworkConfig:
    """Small config with widths scaled proportionally; used for gradient tests."""
    if embedding_dim > 0:
        scale = embedding_dim / 384.0
        bneck = tuple(max(4, round(w * scale)) for w in (256, 128, 64, 64))
    else:
        bneck = (256, 128, 64, 64)  # unused when the embedding slice is absent
    concat = (bneck[-1] if embedding_dim else 0) + (input_dim - embedding_dim)
    trunk = tuple(max(4, round(concat * f)) for f in (0.9, 0.6, 0.4, 0.25, 0.15)) + (2,)
    return NetworkConfig(
        input_dim=input_dim,
        embedding_dim=embedding_dim,
        bottleneck_widths=bneck,
        trunk_widths=trunk,
        seed=seed,
        **overrides,
    )
