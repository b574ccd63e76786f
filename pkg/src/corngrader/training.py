"""Stage training: smoothed soft-target loss, decoupled-decay Adam, warmup +
cosine schedule, the epoch loop with best-checkpoint selection, and a
checksummed checkpoint container.

The loop is bit-reproducible under a fixed seed: shuffling and augmentation
draw from per-(seed, stage, epoch, sample) streams, and nothing here consults
wall-clock time or global RNG state.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import metrics as M
from . import tensor as T
from .data import AugmentConfig, SplitArrays, augment_rng, train_transforms, val_transforms
from .tensor import GradTape, Tensor, backward

CHECKPOINT_MAGIC = b"CGCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    total_epochs: int = 20
    warmup_epochs: int = 5
    warmup_lr_init: float = 1e-5
    min_lr: float = 1e-6
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be < total_epochs")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not self.min_lr <= self.warmup_lr_init <= self.base_lr:
            raise ValueError("need min_lr <= warmup_lr_init <= base_lr")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "label_smoothing": self.label_smoothing,
            "total_epochs": self.total_epochs,
            "warmup_epochs": self.warmup_epochs,
            "warmup_lr_init": self.warmup_lr_init,
            "min_lr": self.min_lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def smooth_targets(class_index: int, num_classes: int = 2, eps: float = 0.1) -> np.ndarray:
    """(1 - eps) on the true class plus eps/C spread uniformly."""
    if not 0 <= class_index < num_classes:
        raise ValueError(f"class index {class_index} out of range for {num_classes} classes")
    out = np.full(num_classes, eps / num_classes, dtype=np.float32)
    out[class_index] += 1.0 - eps
    return out


def soft_cross_entropy(logits: Tensor, soft_targets) -> Tensor:
    """Mean of -sum(t * log_softmax(logits)) over the batch; 1-D input is a
    single sample."""
    targets = soft_targets.data if isinstance(soft_targets, Tensor) else np.asarray(soft_targets)
    targets = targets.astype(logits.dtype, copy=False)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1,) + logits.shape)
        targets = targets.reshape(1, -1)
    if targets.shape != logits.shape:
        raise ValueError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    sums = targets.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ValueError("soft targets must sum to 1")
    n = logits.shape[0]
    log_probs = T.log_softmax(logits)
    total = T.sum_all(T.mul(log_probs, Tensor(targets)))
    return T.mul_scalar(total, -1.0 / n)


def cosine_lr(epoch: float, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then a cosine arc down to min_lr at T."""
    t = config.total_epochs
    w = config.warmup_epochs
    if not 0 <= epoch <= t:
        raise ValueError(f"epoch {epoch} outside [0, {t}]")
    if epoch < w:
        return config.warmup_lr_init + (config.base_lr - config.warmup_lr_init) * (epoch / w)
    frac = (epoch - w) / (t - w)
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay applied before the moment update."""

    def __init__(
        self,
        params: dict[str, Tensor],
        weight_decay: float = 0.05,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        missing = set(self.params) - set(grads)
        if missing:
            raise ValueError(f"missing gradients for {sorted(missing)}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}"
                )
            g = g.astype(p.data.dtype, copy=False)
            if self.weight_decay != 0.0:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float
    val_macro_f1: float


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_acc", "val_macro_f1")


def save_history(history: list[HistoryRow], path) -> None:
    with open(path, "w") as f:
        f.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            f.write(
                f"{row.epoch},{row.lr!r},{row.train_loss!r},{row.val_acc!r},{row.val_macro_f1!r}\n"
            )


def load_history(path) -> list[HistoryRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != ",".join(HISTORY_COLUMNS):
        raise ValueError("bad history header")
    rows = []
    for line in lines[1:]:
        e, lr, tl, va, vf = line.split(",")
        rows.append(HistoryRow(int(e), float(lr), float(tl), float(va), float(vf)))
    return rows


def _stack_batch(tensors: list[Tensor]) -> Tensor:
    return Tensor(np.stack([t.data for t in tensors]))


def predict_arrays(model: bb.StageModel, images: list, batch_size: int = 32) -> np.ndarray:
    """Argmax class indices for raw H,W,3 images under eval preprocessing."""
    res = model.config.input_resolution
    preds = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        x = _stack_batch([val_transforms(img, res) for img in chunk])
        logits = bb.forward_batch(model, x)
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_model(
    model: bb.StageModel, images: list, labels: list, batch_size: int = 32
) -> M.ClassificationReport:
    """Classification report of the model on raw images, using the stage's
    class names."""
    preds = predict_arrays(model, images, batch_size)
    names = model.class_names
    return M.report(
        [names[i] for i in preds], [names[i] for i in labels], names
    )


def train_stage(
    stage: int,
    arrays: SplitArrays,
    model: bb.StageModel,
    config: TrainConfig,
    augment: AugmentConfig = AugmentConfig(),
) -> tuple[bb.StageModel, list[HistoryRow]]:
    """Mini-batch training with per-epoch validation.

    Returns the model rolled back to its best validation epoch (accuracy
    first, macro-F1 tiebreak, earlier epoch wins remaining ties) plus the
    full per-epoch history.
    """
    if model.stage != stage:
        raise ValueError(f"model is tagged stage {model.stage}, not {stage}")
    if not arrays.train_images or not arrays.val_images:
        raise ValueError("train and val splits must be non-empty")
    for label in list(arrays.train_labels) + list(arrays.val_labels):
        if label not in (0, 1):
            raise ValueError(f"label {label!r} outside {{0, 1}}")

    res = model.config.input_resolution
    eps = config.label_smoothing
    n = len(arrays.train_images)
    opt = AdamW(model.trainable_params(), weight_decay=config.weight_decay)

    # eval preprocessing is deterministic; do it once
    val_x = [val_transforms(img, res) for img in arrays.val_images]
    val_labels = list(arrays.val_labels)

    history: list[HistoryRow] = []
    best = None  # (acc, f1, epoch, param snapshot)

    for epoch in range(config.total_epochs):
        lr = cosine_lr(epoch, config)
        shuffle = np.random.default_rng(
            np.random.SeedSequence([config.seed, stage, epoch, 0x5F0F])
        )
        order = shuffle.permutation(n)

        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            x = _stack_batch(
                [
                    train_transforms(
                        arrays.train_images[i],
                        augment_rng(config.seed, stage, epoch, int(i)),
                        res,
                        augment,
                    )
                    for i in batch
                ]
            )
            targets = np.stack(
                [smooth_targets(arrays.train_labels[i], 2, eps) for i in batch]
            )
            with GradTape() as tape:
                logits = bb.forward_batch(model, x)
                loss = soft_cross_entropy(logits, targets)
            backward(loss, tape)
            grads = {}
            for name, p in opt.params.items():
                if p.grad is None:
                    raise RuntimeError(f"no gradient reached trainable parameter {name}")
                grads[name] = p.grad
                p.grad = None
            opt.step(grads, lr)
            loss_sum += loss.item() * len(batch)

        val_acc, val_f1 = _validate(model, val_x, val_labels, config.batch_size)
        history.append(HistoryRow(epoch, lr, loss_sum / n, val_acc, val_f1))
        if best is None or (val_acc, val_f1) > (best[0], best[1]):
            snapshot = {name: p.data.copy() for name, p in model.params.items()}
            best = (val_acc, val_f1, epoch, snapshot)

    for name, saved in best[3].items():
        model.params[name].data[...] = saved
    return model, history


def _validate(model, val_x: list[Tensor], labels: list, batch_size: int) -> tuple[float, float]:
    preds = []
    for start in range(0, len(val_x), batch_size):
        x = _stack_batch(val_x[start : start + batch_size])
        preds.append(np.argmax(bb.forward_batch(model, x).data, axis=1))
    preds = np.concatenate(preds)
    cm = M.confusion(preds.tolist(), labels, [0, 1])
    rep = M.report_from_confusion(cm)
    return rep.accuracy, rep.macro["f1"]


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: bb.StageModel, history: list[HistoryRow], path) -> None:
    """Single-file container: magic, JSON header, little-endian float32
    payload, whole-file checksum."""
    names = sorted(model.params)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data.astype("<f4"))
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "stage": model.stage,
        "class_order": list(model.class_names),
        "backbone": bb.config_to_dict(model.config),
        "tensors": index,
        "history": [
            [r.epoch, r.lr, r.train_loss, r.val_acc, r.val_macro_f1] for r in history
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(body + digest)


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 40 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    header_len = struct.unpack("<I", body[4:8])[0]
    if len(body) < 8 + header_len:
        raise CheckpointError(f"{path}: header extends past end of file")
    header = json.loads(body[8 : 8 + header_len])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    header["_payload"] = body[8 + header_len :]
    return header


def load_checkpoint(path, expected_stage: int | None = None) -> tuple[bb.StageModel, list[HistoryRow]]:
    header = read_checkpoint_header(path)
    stage = header["stage"]
    if expected_stage is not None and stage != expected_stage:
        raise CheckpointError(
            f"{path}: checkpoint tagged stage {stage}, expected stage {expected_stage}"
        )
    config = bb.config_from_dict(header["backbone"])
    expected_shapes = bb.parameter_shapes(config)
    payload = header["_payload"]
    params: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in expected_shapes:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if shape != expected_shapes[name]:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {shape} != config shape {expected_shapes[name]}"
            )
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.copy())
    missing = set(expected_shapes) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model = bb.StageModel(config, stage, params)
    if list(model.class_names) != header["class_order"]:
        raise CheckpointError(
            f"{path}: class order {header['class_order']} does not match stage {stage}"
        )
    history = [HistoryRow(int(e), lr, tl, va, vf) for e, lr, tl, va, vf in header["history"]]
    return model, history


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
