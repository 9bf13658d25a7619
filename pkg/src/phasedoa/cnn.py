"""
A small convolutional classifier written directly in numpy.

The network is a stack of 2x2 valid convolutions with ReLU, followed by
fully connected ReLU layers and a softmax over the DOA classes. There are
no pooling layers. Dropout follows the convolution stack and every hidden
dense layer when training.

Convolution weights are stored as ``(F, C_in, J, J)``; internally the
activations are kept channels-last ``(B, H, W, C)`` so every convolution is
a single matrix product over unfolded 2x2 patches.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DoaGrid

CHECKPOINT_MAGIC = b"DOAC"
CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12


class ShapeMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# layer primitives


def _unfold(x: np.ndarray, J: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H-J+1, W-J+1, J*J*C) patches, (row, col, channel) order."""
    _, H, W, _ = x.shape
    Ho, Wo = H - J + 1, W - J + 1
    return np.concatenate([x[:, i:i + Ho, j:j + Wo, :] for i in range(J) for j in range(J)], axis=-1)


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    F, C, J, _ = w.shape
    return w.transpose(2, 3, 1, 0).reshape(J * J * C, F)


def _conv_nhwc(x, w, b):
    F, C, J, _ = w.shape
    if x.shape[1] < J or x.shape[2] < J:
        raise ShapeMismatchError(f"input {x.shape[1]}x{x.shape[2]} is smaller than a {J}x{J} filter")
    if x.shape[3] != C:
        raise ShapeMismatchError(f"input has {x.shape[3]} channels, filters expect {C}")
    cols = _unfold(x, J)
    return cols @ _weight_matrix(w) + b, cols


def _conv_nhwc_backward(dout, cols, w, in_shape, need_dx=True):
    F, C, J, _ = w.shape
    K = cols.shape[-1]
    dW = cols.reshape(-1, K).T @ dout.reshape(-1, F)
    dw = dW.reshape(J, J, C, F).transpose(3, 2, 0, 1)
    db = dout.sum(axis=(0, 1, 2))
    if not need_dx:
        return None, dw, db
    dcols = dout @ _weight_matrix(w).T
    dx = np.zeros(in_shape, dtype=dout.dtype)
    Ho, Wo = dout.shape[1], dout.shape[2]
    k = 0
    for i in range(J):
        for j in range(J):
            dx[:, i:i + Ho, j:j + Wo, :] += dcols[..., k * C:(k + 1) * C]
            k += 1
    return dx, dw, db


def conv2d_forward(x, w, b) -> np.ndarray:
    """
    Valid 2-D cross-correlation with stride 1, accumulated in float64.

    Parameters
    ----------
    x : ndarray, shape (C_in, H, W) or (B, C_in, H, W)
    w : ndarray, shape (F, C_in, J, J)
    b : ndarray, shape (F,)

    Returns
    -------
    ndarray, shape (F, H-J+1, W-J+1) or (B, F, H-J+1, W-J+1)
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeMismatchError(f"expected (C, H, W) or (B, C, H, W), got {x.shape}")
    out, _ = _conv_nhwc(x.transpose(0, 2, 3, 1), np.asarray(w, np.float64), np.asarray(b, np.float64))
    out = out.transpose(0, 3, 1, 2)
    return out[0] if single else out


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def dense_forward(x, w, b):
    """``w @ x + b`` for a vector, or row-wise for a batch; ``w`` is (out, in)."""
    x = np.asarray(x)
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatchError(f"input width {x.shape[-1]} != layer input {w.shape[1]}")
    return x @ w.T + b


def softmax(logits, axis=-1):
    z = np.asarray(logits)
    if z.dtype.kind != "f":
        z = z.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(probabilities, label) -> float | np.ndarray:
    """``-log p[label]`` with ``p`` clamped at 1e-12; vectorised over a leading batch axis."""
    p = np.asarray(probabilities)
    label = np.asarray(label)
    n_classes = p.shape[-1]
    if np.any(label < 0) or np.any(label >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    if p.ndim == 1:
        return float(-np.log(max(p[int(label)], PROB_FLOOR)))
    picked = p[np.arange(len(label)), label]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def dropout(x, rate: float, mode: str = "train", rng: np.random.Generator | None = None,
            return_mask: bool = False):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return (x, None) if return_mask else x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    mask = _dropout_mask(rng, np.shape(x), rate, np.asarray(x).dtype)
    return (x * mask, mask) if return_mask else x * mask


def _dropout_mask(rng, shape, rate, dtype):
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


# ---------------------------------------------------------------------------
# network


@dataclass
class Architecture:
    """
    Layer sizes of the classifier.

    ``input_shape`` is the phase-map shape (M, K). Each conv layer shrinks
    both spatial axes by ``kernel - 1``.
    """

    input_shape: tuple
    n_classes: int
    conv_filters: tuple = (64, 64, 64)
    dense_units: tuple = (512, 512)
    kernel: int = 2
    dropout: float = 0.5

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_filters = tuple(int(v) for v in self.conv_filters)
        self.dense_units = tuple(int(v) for v in self.dense_units)
        M, K = self.input_shape
        shrink = len(self.conv_filters) * (self.kernel - 1)
        if M - shrink < 1 or K - shrink < 1:
            raise ShapeMismatchError(
                f"{len(self.conv_filters)} conv layers of {self.kernel}x{self.kernel} do not fit a {M}x{K} input")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")

    def conv_output_shape(self) -> tuple:
        M, K = self.input_shape
        shrink = len(self.conv_filters) * (self.kernel - 1)
        F = self.conv_filters[-1] if self.conv_filters else 1
        return (F, M - shrink, K - shrink)

    @property
    def flat_size(self) -> int:
        return math.prod(self.conv_output_shape())

    def parameter_shapes(self) -> list[tuple[str, tuple]]:
        shapes = []
        c_in = 1
        for i, f in enumerate(self.conv_filters):
            shapes += [(f"conv{i}.w", (f, c_in, self.kernel, self.kernel)), (f"conv{i}.b", (f,))]
            c_in = f
        width = self.flat_size
        for i, u in enumerate(self.dense_units):
            shapes += [(f"dense{i}.w", (u, width)), (f"dense{i}.b", (u,))]
            width = u
        shapes += [("out.w", (self.n_classes, width)), ("out.b", (self.n_classes,))]
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


class Network:
    """
    Parameters of an :class:`Architecture` plus an optimizer step count.

    Weights are He-uniform initialised and biases zero. The output layer
    starts at zero so an untrained network gives the uniform posterior.
    """

    def __init__(self, arch: Architecture, seed: int = 0, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.step = 0
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for name, shape in arch.parameter_shapes():
            if name.endswith(".b") or name.startswith("out."):
                p = np.zeros(shape)
            else:
                fan_in = math.prod(shape[1:])
                limit = math.sqrt(6.0 / fan_in)
                p = rng.uniform(-limit, limit, size=shape)
            self.params[name] = p.astype(self.dtype)

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "Network":
        other = Network.__new__(Network)
        other.arch = self.arch
        other.dtype = np.dtype(dtype)
        other.step = self.step
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def _as_batch(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != net.arch.input_shape:
        raise ShapeMismatchError(
            f"phase maps of shape {x.shape[-2:]} do not match network input {net.arch.input_shape}")
    return x


def draw_dropout_masks(net: Network, batch: int, rng: np.random.Generator) -> list:
    """One mask after the conv stack and one per hidden dense layer."""
    rate = net.arch.dropout
    if rate == 0.0:
        return [None] * (1 + len(net.arch.dense_units))
    F, H, W = net.arch.conv_output_shape()
    shapes = [(batch, H, W, F)] + [(batch, u) for u in net.arch.dense_units]
    return [_dropout_mask(rng, s, rate, net.dtype) for s in shapes]


def _forward(net: Network, x: np.ndarray, masks=None):
    p = net.params
    cache = {"pre": [], "cols": [], "in_shapes": []}
    h = x[..., None]
    for i in range(len(net.arch.conv_filters)):
        cache["in_shapes"].append(h.shape)
        z, cols = _conv_nhwc(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        cache["cols"].append(cols)
        cache["pre"].append(z)
        h = relu(z)
    if masks is not None and masks[0] is not None:
        h = h * masks[0]
    cache["conv_out_shape"] = h.shape
    h = h.reshape(len(h), -1)
    cache["dense_in"] = []
    cache["dense_pre"] = []
    for i in range(len(net.arch.dense_units)):
        cache["dense_in"].append(h)
        z = dense_forward(h, p[f"dense{i}.w"], p[f"dense{i}.b"])
        cache["dense_pre"].append(z)
        h = relu(z)
        if masks is not None and masks[i + 1] is not None:
            h = h * masks[i + 1]
    cache["out_in"] = h
    logits = dense_forward(h, p["out.w"], p["out.b"])
    return logits, cache


def logits(net: Network, phase_maps, mode: str = "eval", rng=None, masks=None) -> np.ndarray:
    x = _as_batch(net, phase_maps)
    if mode == "train" and masks is None:
        masks = draw_dropout_masks(net, len(x), rng)
    elif mode != "train":
        masks = None
    return _forward(net, x, masks)[0]


def forward(net: Network, phase_map, mode: str = "eval", rng=None, masks=None) -> np.ndarray:
    """
    Posterior over the DOA classes.

    A single (M, K) phase map gives an (I,) vector; a batch (B, M, K)
    gives (B, I). Train mode applies dropout, drawing masks from ``rng``
    unless ``masks`` is given.
    """
    single = np.ndim(phase_map) == 2
    probs = softmax(logits(net, phase_map, mode, rng, masks))
    return probs[0] if single else probs


def backward(net: Network, phase_maps, labels, masks=None, reduction: str = "mean"):
    """
    Cross-entropy loss and its gradient for every parameter.

    ``masks`` fixes the dropout pattern (``None`` means eval mode). Returns
    ``(loss, grads)`` where both are summed or averaged over the batch.
    """
    x = _as_batch(net, phase_maps)
    labels = np.atleast_1d(np.asarray(labels))
    if len(labels) != len(x):
        raise ShapeMismatchError(f"{len(labels)} labels for {len(x)} phase maps")
    z, cache = _forward(net, x, masks)
    probs = softmax(z)
    losses = cross_entropy(probs, labels)
    B = len(x)
    scale = 1.0 / B if reduction == "mean" else 1.0

    p = net.params
    g: dict[str, np.ndarray] = {}
    dz = probs.copy()
    dz[np.arange(B), labels] -= 1
    dz *= net.dtype.type(scale)
    h = cache["out_in"]
    g["out.w"] = dz.T @ h
    g["out.b"] = dz.sum(axis=0)
    dh = dz @ p["out.w"]
    for i in reversed(range(len(net.arch.dense_units))):
        if masks is not None and masks[i + 1] is not None:
            dh = dh * masks[i + 1]
        dz = relu_backward(dh, cache["dense_pre"][i])
        g[f"dense{i}.w"] = dz.T @ cache["dense_in"][i]
        g[f"dense{i}.b"] = dz.sum(axis=0)
        dh = dz @ p[f"dense{i}.w"]
    dh = dh.reshape(cache["conv_out_shape"])
    if masks is not None and masks[0] is not None:
        dh = dh * masks[0]
    for i in reversed(range(len(net.arch.conv_filters))):
        dz = relu_backward(dh, cache["pre"][i])
        dh, g[f"conv{i}.w"], g[f"conv{i}.b"] = _conv_nhwc_backward(
            dz, cache["cols"][i], p[f"conv{i}.w"], cache["in_shapes"][i], need_dx=i > 0)
    loss = float(losses.sum() * scale)
    return loss, {k: g[k].astype(net.dtype, copy=False) for k in p}


def predict_proba(net: Network, phase_maps, batch_size: int = 1024) -> np.ndarray:
    x = _as_batch(net, phase_maps)
    out = np.empty((len(x), net.n_classes))
    for s in range(0, len(x), batch_size):
        out[s:s + batch_size] = softmax(_forward(net, x[s:s + batch_size])[0])
    return out


def decode_classes(posteriors) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower index
    return np.argmax(np.asarray(posteriors), axis=-1)


def estimate_doa(net: Network, phase_map, grid: DoaGrid) -> float:
    if grid.class_count != net.n_classes:
        raise ArchitectureMismatchError(
            f"network has {net.n_classes} classes, grid has {grid.class_count}")
    return float(grid.angles_deg[decode_classes(forward(net, phase_map, "eval"))])


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise ShapeMismatchError("gradient and parameter names differ")
    state.step += 1
    t = state.step
    lr_t = state.learning_rate * math.sqrt(1 - state.beta2 ** t) / (1 - state.beta1 ** t)
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        # eps is scaled so this equals lr * m_hat / (sqrt(v_hat) + eps)
        eps_t = state.eps * math.sqrt(1 - state.beta2 ** t)
        p -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(p.dtype, copy=False)


@dataclass
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-3
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    threads: int = 1
    chunk_size: int = 128
    restore_best: bool = True

    def digest(self) -> str:
        # thread count cannot change the result, so it is not part of the digest
        d = asdict(self)
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainResult:
    network: Network
    epochs: list = field(default_factory=list)
    batch_losses: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def _chunked_gradient(net, x, y, masks, chunk, pool):
    """Mean gradient over the batch; chunks are reduced in index order."""
    bounds = [(s, min(s + chunk, len(x))) for s in range(0, len(x), chunk)]

    def work(bound):
        s, e = bound
        m = None if masks is None else [None if mk is None else mk[s:e] for mk in masks]
        return backward(net, x[s:e], y[s:e], m, reduction="sum")

    results = list(pool.map(work, bounds)) if pool is not None else [work(b) for b in bounds]
    loss = 0.0
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    for l_, g in results:
        loss += l_
        for k in grads:
            grads[k] += g[k]
    inv = net.dtype.type(1.0 / len(x))
    for k in grads:
        grads[k] *= inv
    return loss / len(x), grads


def evaluate_loss(net: Network, phase_maps, labels, batch_size: int = 1024) -> tuple[float, float]:
    """Mean eval-mode cross-entropy and accuracy (fraction)."""
    probs = predict_proba(net, phase_maps, batch_size)
    labels = np.asarray(labels)
    return float(cross_entropy(probs, labels).mean()), float(np.mean(decode_classes(probs) == labels))


def train(net: Network, train_maps, train_labels, config: TrainConfig = TrainConfig(),
          val_maps=None, val_labels=None, on_epoch=None) -> TrainResult:
    """
    Shuffled mini-batch training with Adam.

    Stops when the validation loss has not improved for ``patience`` epochs
    (or after ``max_epochs``) and, by default, restores the parameters of
    the best validation epoch. Results depend only on the data and
    ``config.seed``; the thread count does not change the arithmetic.
    """
    x = np.asarray(train_maps)
    y = np.asarray(train_labels).astype(np.int64)
    if x.shape[1:] != net.arch.input_shape:
        raise ShapeMismatchError(f"training maps {x.shape[1:]} vs network input {net.arch.input_shape}")
    if y.max(initial=0) >= net.n_classes:
        raise ShapeMismatchError(f"labels reach {y.max()} but the network has {net.n_classes} classes")
    rng = np.random.default_rng(config.seed)
    state = AdamState(learning_rate=config.learning_rate)
    result = TrainResult(net)
    best = (math.inf, None, 0)
    stale = 0
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(x))
            losses = []
            for s in range(0, len(x), config.batch_size):
                idx = np.sort(order[s:s + config.batch_size])
                xb = x[idx].astype(net.dtype, copy=False)
                masks = draw_dropout_masks(net, len(idx), rng)
                loss, grads = _chunked_gradient(net, xb, y[idx], masks, config.chunk_size, pool)
                adam_step(net.params, grads, state)
                net.step += 1
                losses.append(loss)
                result.batch_losses.append(loss)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "step": net.step}
            if val_maps is not None:
                row["val_loss"], row["val_accuracy"] = evaluate_loss(net, val_maps, val_labels)
                monitor = row["val_loss"]
            else:
                monitor = row["train_loss"]
            result.epochs.append(row)
            if on_epoch is not None:
                on_epoch(row)
            if monitor < best[0]:
                best = (monitor, {k: v.copy() for k, v in net.params.items()}, epoch)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    result.stopped_early = True
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    result.best_epoch = best[2]
    if config.restore_best and best[1] is not None:
        net.params = best[1]
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: Network, training_digest: str = "", extra: dict | None = None) -> None:
    """
    Write ``DOAC`` magic, u16 version, u32-length JSON manifest, then the
    parameters as little-endian float32 in declared layer order.
    """
    shapes = net.arch.parameter_shapes()
    manifest = {
        "architecture": net.arch.to_dict(),
        "step": int(net.step),
        "training_digest": training_digest,
        "parameters": [[name, list(shape)] for name, shape in shapes],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for name, _ in shapes:
        buf.write(np.ascontiguousarray(net.params[name], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_manifest(path) -> dict:
    data = Path(path).read_bytes()
    return _parse_header(data)[0]


def _parse_header(data: bytes):
    if len(data) < 10 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a DOAC checkpoint (bad magic or truncated header)")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    if len(data) < 10 + n:
        raise CheckpointError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(data[10:10 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    return manifest, 10 + n


def load_checkpoint(path, expected_classes: int | None = None, expected_input: tuple | None = None) -> Network:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Raises :class:`CheckpointError` on a corrupt or truncated file and
    :class:`ArchitectureMismatchError` when the stored network does not
    have the requested class count or input shape.
    """
    data = Path(path).read_bytes()
    manifest, offset = _parse_header(data)
    try:
        arch = Architecture.from_dict(manifest["architecture"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt architecture descriptor: {exc}") from None
    if expected_classes is not None and arch.n_classes != expected_classes:
        raise ArchitectureMismatchError(
            f"checkpoint has {arch.n_classes} classes but {expected_classes} were requested")
    if expected_input is not None and tuple(arch.input_shape) != tuple(expected_input):
        raise ArchitectureMismatchError(
            f"checkpoint input {tuple(arch.input_shape)} does not match {tuple(expected_input)}")
    shapes = arch.parameter_shapes()
    if [[n, list(s)] for n, s in shapes] != manifest.get("parameters"):
        raise ArchitectureMismatchError("parameter table does not match the architecture descriptor")
    expected_bytes = 4 * sum(math.prod(s) for _, s in shapes)
    if len(data) - offset != expected_bytes:
        raise CheckpointError(
            f"checkpoint holds {len(data) - offset} parameter bytes, architecture needs {expected_bytes}")
    net = Network.__new__(Network)
    net.arch = arch
    net.dtype = np.dtype(np.float32)
    net.step = int(manifest.get("step", 0))
    net.params = {}
    for name, shape in shapes:
        count = math.prod(shape)
        net.params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    net.manifest = manifest
    return net
