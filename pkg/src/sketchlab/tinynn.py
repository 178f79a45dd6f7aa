"""A small convolutional classifier implemented directly on numpy arrays.

Architecture: ``num_blocks`` repetitions of [3x3 conv (stride 1, pad 1) ->
ReLU -> 2x2 max pool (stride 2)], filter count doubling per block from
``base_filters``, then flatten and one fully-connected layer with a logit
per class. Weights start from He-normal draws (variance 2 / fan_in), biases
at zero.

Training runs in float32; a float64 mode exists for finite-difference
gradient verification. Shuffling, initialization and therefore whole
training runs are bit-reproducible for a fixed seed.

Image datasets are consumed as a directory of raw u8 RGB tensors:

* ``index.json`` -- ``{"version": 1, "n": ..., "height": ..., "width": ...,
  "channels": ..., "label_names": [...]}``
* ``images.u8``  -- n*channels*height*width bytes, row-major (n, c, h, w)
* ``labels.u32`` -- n unsigned 32-bit little-endian integers
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetFormatError

CHECKPOINT_VERSION = 1
CHECKPOINT_META_FILE = "model.json"
CHECKPOINT_PARAMS_FILE = "params.f32"

IMAGE_INDEX_FILE = "index.json"
IMAGE_DATA_FILE = "images.u8"
IMAGE_LABELS_FILE = "labels.u32"

DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_BATCH_SIZE = 16
DEFAULT_EPOCHS = 35


@dataclass(frozen=True)
class CnnConfig:
    num_classes: int
    in_channels: int = 3
    base_filters: int = 16
    num_blocks: int = 4
    input_hw: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_filters < 1 or self.num_blocks < 1 or self.in_channels < 1:
            raise ValueError("base_filters, num_blocks and in_channels must be >= 1")
        h, w = self.input_hw
        if h // (2 ** self.num_blocks) < 1 or w // (2 ** self.num_blocks) < 1:
            raise ValueError(
                f"input {h}x{w} too small for {self.num_blocks} halvings"
            )

    @property
    def block_channels(self) -> list[int]:
        return [self.base_filters * (2 ** b) for b in range(self.num_blocks)]

    @property
    def flatten_dim(self) -> int:
        h, w = self.input_hw
        for _ in range(self.num_blocks):
            h, w = h // 2, w // 2
        return self.block_channels[-1] * h * w


@dataclass
class CnnModel:
    """Parameter tensors plus the architecture they belong to.

    ``params`` maps ``conv{i}.weight`` / ``conv{i}.bias`` / ``fc.weight`` /
    ``fc.bias`` to arrays; :func:`param_order` fixes the serialization order.
    """

    config: CnnConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def param_order(config: CnnConfig) -> list[str]:
    names = []
    for i in range(config.num_blocks):
        names += [f"conv{i}.weight", f"conv{i}.bias"]
    names += ["fc.weight", "fc.bias"]
    return names


def kaiming_init(fan_in: int, shape, seed: int = 0) -> np.ndarray:
    """He-normal draw: i.i.d. N(0, 2 / fan_in), deterministic per seed."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_model(config: CnnConfig, seed: int = 0, dtype=np.float32) -> CnnModel:
    """Kaiming-initialized weights, zero biases; layer seeds derive from seed."""
    layer_seeds = np.random.SeedSequence(seed).generate_state(config.num_blocks + 1)
    params: dict[str, np.ndarray] = {}
    in_ch = config.in_channels
    for i, out_ch in enumerate(config.block_channels):
        fan_in = in_ch * 9
        params[f"conv{i}.weight"] = kaiming_init(
            fan_in, (out_ch, in_ch, 3, 3), int(layer_seeds[i])
        ).astype(dtype)
        params[f"conv{i}.bias"] = np.zeros(out_ch, dtype=dtype)
        in_ch = out_ch
    params["fc.weight"] = kaiming_init(
        config.flatten_dim, (config.flatten_dim, config.num_classes), int(layer_seeds[-1])
    ).astype(dtype)
    params["fc.bias"] = np.zeros(config.num_classes, dtype=dtype)
    model = CnnModel(config=config, params=params)
    assert params["fc.weight"].shape[0] == config.flatten_dim
    return model


# ---------------------------------------------------------------------------
# layers


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) patch matrix for a 3x3/s1/p1 conv."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 3, 3, H, W), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di, dj] = xp[:, :, di:di + H, dj:dj + W]
    return cols.reshape(B, C * 9, H * W)


def _col2im(cols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the image."""
    B, C, H, W = shape
    grad = np.zeros((B, C, H + 2, W + 2), dtype=cols.dtype)
    cols = cols.reshape(B, C, 3, 3, H, W)
    for di in range(3):
        for dj in range(3):
            grad[:, :, di:di + H, dj:dj + W] += cols[:, :, di, dj]
    return grad[:, :, 1:H + 1, 1:W + 1]


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1; spatial dims preserved."""
    B, C, H, W = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if (in_ch, kh, kw) != (C, 3, 3):
        raise ValueError(f"weight shape {weight.shape} incompatible with input channels {C}")
    cols = _im2col(x)
    y = np.matmul(weight.reshape(out_ch, C * 9), cols)
    y += bias[:, None]
    return y.reshape(B, out_ch, H, W)


def conv2d_backward(x: np.ndarray, weight: np.ndarray, dy: np.ndarray):
    """Gradients (dx, dweight, dbias) of the 3x3/s1/p1 convolution."""
    B, C, H, W = x.shape
    out_ch = weight.shape[0]
    cols = _im2col(x)
    dy_mat = dy.reshape(B, out_ch, H * W)
    dw = np.einsum("bop,bcp->oc", dy_mat, cols).reshape(weight.shape)
    db = dy_mat.sum(axis=(0, 2))
    dcols = np.matmul(weight.reshape(out_ch, C * 9).T, dy_mat)
    dx = _col2im(dcols, x.shape)
    return dx, dw, db


def maxpool2_forward(x: np.ndarray):
    """2x2 max pool, stride 2; odd trailing rows/columns are dropped.

    Returns the pooled tensor and the argmax position of each window
    (0..3 in row-major window order; ties take the first position), which
    the backward pass uses to route gradients.
    """
    B, C, H, W = x.shape
    if H < 2 or W < 2:
        raise ValueError(f"spatial dims must be >= 2 to pool, got {H}x{W}")
    H2, W2 = H // 2, W // 2
    windows = (
        x[:, :, : H2 * 2, : W2 * 2]
        .reshape(B, C, H2, 2, W2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H2, W2, 4)
    )
    argmax = windows.argmax(axis=4)
    y = np.take_along_axis(windows, argmax[..., None], axis=4)[..., 0]
    return y, argmax


def maxpool2_backward(dy: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    B, C, H, W = input_shape
    H2, W2 = H // 2, W // 2
    windows = np.zeros((B, C, H2, W2, 4), dtype=dy.dtype)
    np.put_along_axis(windows, argmax[..., None], dy[..., None], axis=4)
    dx = np.zeros(input_shape, dtype=dy.dtype)
    dx[:, :, : H2 * 2, : W2 * 2] = (
        windows.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2 * 2, W2 * 2)
    )
    return dx


def cross_entropy(logits: np.ndarray, labels):
    """Mean negative log softmax likelihood and its logit gradient.

    Computed with max subtraction; gradient is (softmax - onehot) / batch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range for {K} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = float(-log_probs[np.arange(B), labels].mean())
    dlogits = exp / total
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    return loss, dlogits.astype(logits.dtype)


def _forward_cached(model: CnnModel, x: np.ndarray):
    cfg = model.config
    B = x.shape[0]
    if x.shape[1:] != (cfg.in_channels, *cfg.input_hw):
        raise ValueError(
            f"input shape {x.shape[1:]} does not match configured {(cfg.in_channels, *cfg.input_hw)}"
        )
    caches = []
    h = x.astype(model.dtype, copy=False)
    for i in range(cfg.num_blocks):
        pre = conv2d_forward(h, model.params[f"conv{i}.weight"], model.params[f"conv{i}.bias"])
        act = np.maximum(pre, 0)
        pooled, argmax = maxpool2_forward(act)
        caches.append((h, pre, act.shape, argmax))
        h = pooled
    flat = h.reshape(B, -1)
    logits = flat @ model.params["fc.weight"] + model.params["fc.bias"]
    return logits, flat, h.shape, caches


def forward(model: CnnModel, x: np.ndarray) -> np.ndarray:
    """Logits (batch, num_classes) for a (batch, channels, H, W) input."""
    logits, _, _, _ = _forward_cached(model, x)
    return logits


def predict(model: CnnModel, x: np.ndarray) -> np.ndarray:
    return forward(model, x).argmax(axis=1)


def backward(model: CnnModel, x: np.ndarray, labels):
    """Cross-entropy loss and gradients for every parameter tensor."""
    logits, flat, pooled_shape, caches = _forward_cached(model, x)
    loss, dlogits = cross_entropy(logits, labels)
    grads: dict[str, np.ndarray] = {}
    grads["fc.weight"] = flat.T @ dlogits
    grads["fc.bias"] = dlogits.sum(axis=0)
    dh = (dlogits @ model.params["fc.weight"].T).reshape(pooled_shape)
    for i in reversed(range(model.config.num_blocks)):
        x_in, pre, act_shape, argmax = caches[i]
        dact = maxpool2_backward(dh, argmax, act_shape)
        dpre = dact * (pre > 0)
        dh, dw, db = conv2d_backward(x_in, model.params[f"conv{i}.weight"], dpre)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    return loss, grads


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k in params:
            params[k] -= (self.lr * grads[k]).astype(params[k].dtype)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(params[k]))
            v = self.v.setdefault(k, np.zeros_like(params[k]))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(params[k].dtype)
            params[k] -= update


OPTIMIZERS = {"sgd": Sgd, "adam": Adam}


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        # learning_rate 0 is allowed so a no-op run is expressible in tests
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")


@dataclass(frozen=True)
class Checkpoint:
    epoch: int                       # 1-based epoch of the snapshot
    params: dict[str, np.ndarray]
    val_loss: float


@dataclass(frozen=True)
class TrainResult:
    best: Checkpoint
    train_loss_curve: tuple[float, ...]   # one entry per optimizer step
    val_loss_curve: tuple[float, ...]     # one entry per epoch


def select_checkpoint(val_losses) -> int:
    """1-based epoch with the minimum validation loss (ties -> earliest)."""
    losses = list(val_losses)
    if not losses:
        raise ValueError("no validation losses recorded")
    best = min(range(len(losses)), key=lambda i: (losses[i], i))
    return best + 1


def _dataset_loss(model: CnnModel, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    total = 0.0
    for start in range(0, x.shape[0], batch):
        xb = x[start:start + batch]
        logits = forward(model, xb)
        loss, _ = cross_entropy(logits, y[start:start + batch])
        total += loss * xb.shape[0]
    return total / x.shape[0]


def train(
    model: CnnModel,
    train_x: np.ndarray,
    train_y,
    val_x: np.ndarray,
    val_y,
    config: TrainConfig,
) -> TrainResult:
    """Shuffled mini-batch training with per-epoch validation.

    Records the train loss of every optimizer step and the validation loss
    of every epoch, and returns the parameter snapshot from the epoch with
    the lowest validation loss (ties -> earliest epoch).
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    n = train_x.shape[0]
    if val_x.shape[0] == 0:
        raise ValueError("validation set is empty")
    if config.batch_size > n:
        raise ValueError(f"batch_size={config.batch_size} exceeds {n} training samples")
    optimizer = OPTIMIZERS[config.optimizer](config.learning_rate)
    rng = np.random.default_rng(config.seed)
    train_curve: list[float] = []
    val_curve: list[float] = []
    snapshots: list[dict[str, np.ndarray]] = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = perm[start:start + config.batch_size]
            loss, grads = backward(model, train_x[sel], train_y[sel])
            train_curve.append(loss)
            optimizer.step(model.params, grads)
        val_curve.append(_dataset_loss(model, val_x, val_y))
        snapshots.append(model.copy_params())
    best_epoch = select_checkpoint(val_curve)
    best = Checkpoint(
        epoch=best_epoch,
        params=snapshots[best_epoch - 1],
        val_loss=val_curve[best_epoch - 1],
    )
    return TrainResult(best=best, train_loss_curve=tuple(train_curve), val_loss_curve=tuple(val_curve))


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class GradCheckReport:
    per_param: dict[str, float]   # max relative error per parameter tensor
    max_rel_error: float
    tolerance: float
    passed: bool


def grad_check(model: CnnModel, x: np.ndarray, labels, h: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Requires a float64 model; every parameter element is perturbed by +-h.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if model.dtype != np.float64:
        raise ValueError("grad_check requires a float64 model (build with dtype=np.float64)")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _, grads = backward(model, x, labels)

    def loss_at() -> float:
        logits = forward(model, x)
        loss, _ = cross_entropy(logits, labels)
        return loss

    per_param: dict[str, float] = {}
    for name in param_order(model.config):
        tensor = model.params[name]
        analytic = grads[name]
        worst = 0.0
        flat = tensor.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = loss_at()
            flat[j] = orig - h
            f_minus = loss_at()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        per_param[name] = worst
    max_err = max(per_param.values())
    return GradCheckReport(
        per_param=per_param,
        max_rel_error=max_err,
        tolerance=tolerance,
        passed=max_err < tolerance,
    )


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(path, model: CnnModel, epoch: int | None = None, val_loss: float | None = None) -> None:
    """Write ``model.json`` plus all parameter tensors concatenated as f32.

    Tensor order is :func:`param_order`; each tensor is flattened row-major.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    meta = {
        "version": CHECKPOINT_VERSION,
        "num_classes": cfg.num_classes,
        "in_channels": cfg.in_channels,
        "base_filters": cfg.base_filters,
        "num_blocks": cfg.num_blocks,
        "input_height": cfg.input_hw[0],
        "input_width": cfg.input_hw[1],
        "param_order": param_order(cfg),
        "epoch": epoch,
        "val_loss": val_loss,
    }
    (root / CHECKPOINT_META_FILE).write_text(json.dumps(meta), encoding="utf-8")
    payload = np.concatenate([model.params[k].reshape(-1) for k in param_order(cfg)])
    (root / CHECKPOINT_PARAMS_FILE).write_bytes(payload.astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[CnnModel, dict]:
    root = Path(path)
    meta_path = root / CHECKPOINT_META_FILE
    if not meta_path.is_file():
        raise DatasetFormatError(f"missing {CHECKPOINT_META_FILE} in {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"unsupported checkpoint version {meta.get('version')!r}")
    cfg = CnnConfig(
        num_classes=int(meta["num_classes"]),
        in_channels=int(meta["in_channels"]),
        base_filters=int(meta["base_filters"]),
        num_blocks=int(meta["num_blocks"]),
        input_hw=(int(meta["input_height"]), int(meta["input_width"])),
    )
    raw = np.frombuffer((root / CHECKPOINT_PARAMS_FILE).read_bytes(), dtype="<f4")
    model = build_model(cfg, seed=0, dtype=dtype)
    expected = sum(v.size for v in model.params.values())
    if raw.size != expected:
        raise DatasetFormatError(f"params payload has {raw.size} values, expected {expected}")
    at = 0
    for name in param_order(cfg):
        shape = model.params[name].shape
        size = model.params[name].size
        model.params[name] = raw[at:at + size].reshape(shape).astype(dtype)
        at += size
    return model, meta


# ---------------------------------------------------------------------------
# raw image dataset I/O


def save_image_dataset(path, images: np.ndarray, labels, label_names) -> None:
    """Write the raw-u8 image dataset format (see module docstring)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint32)
    n, c, h, w = images.shape
    meta = {
        "version": 1,
        "n": n,
        "height": h,
        "width": w,
        "channels": c,
        "label_names": list(label_names),
    }
    (root / IMAGE_INDEX_FILE).write_text(json.dumps(meta), encoding="utf-8")
    (root / IMAGE_DATA_FILE).write_bytes(images.tobytes())
    (root / IMAGE_LABELS_FILE).write_bytes(labels.astype("<u4").tobytes())


def load_image_dataset(path) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    root = Path(path)
    meta_path = root / IMAGE_INDEX_FILE
    if not meta_path.is_file():
        raise DatasetFormatError(f"missing {IMAGE_INDEX_FILE} in {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    n, c = int(meta["n"]), int(meta["channels"])
    h, w = int(meta["height"]), int(meta["width"])
    raw = (root / IMAGE_DATA_FILE).read_bytes()
    if len(raw) != n * c * h * w:
        raise DatasetFormatError(
            f"{IMAGE_DATA_FILE} holds {len(raw)} bytes, expected {n * c * h * w}"
        )
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, c, h, w)
    raw = (root / IMAGE_LABELS_FILE).read_bytes()
    if len(raw) != n * 4:
        raise DatasetFormatError(f"{IMAGE_LABELS_FILE} holds {len(raw)} bytes, expected {n * 4}")
    labels = np.frombuffer(raw, dtype="<u4")
    names = tuple(str(s) for s in meta["label_names"])
    if labels.size and int(labels.max()) >= len(names):
        raise DatasetFormatError("label out of range in image dataset")
    return images, labels, names


def normalize_images(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """u8 images to float in [0, 1]."""
    return images.astype(dtype) / dtype(255.0)
