"""Training: cross-entropy loss, Adam/SGD, finite-difference gradient checks,
and the two-phase schedule (full base training, then head-only fine-tuning).

Phase one trains the backbone at a small learning rate and the linear
classifier at a larger one. Phase two initializes the score-map head from the
trained classifier (exact, by pooling linearity) and updates only the head;
backbone parameters stay bit-identical. Training is single-writer over the
parameters and bit-reproducible for a fixed seed in a single process.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import DatasetManifest
from .model import BaseModel, ToyBackbone, WslHead, WslModel, init_wsl_from_base
from .store import ImageStore

logger = logging.getLogger(__name__)

PHASE_BASE = "base"
PHASE_WSL_HEAD_ONLY = "wsl_head_only"
OPTIMIZER_ADAM = "adam"
OPTIMIZER_SGD = "sgd"

DEFAULT_CHANNELS = (3, 16, 32, 32)

CHECKPOINT_FORMAT = "wsloc-checkpoint-v1"


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    lr_head: float = 1e-3
    lr_backbone: float = 1e-4
    optimizer: str = OPTIMIZER_ADAM
    epochs: int = 10
    phase: str = PHASE_BASE
    seed: int = 0
    # moment decays and epsilon are standard defaults; recorded in checkpoints
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # both default off; gate them explicitly for clean ablations
    weight_decay: float = 0.0
    hflip: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_head <= 0 or self.lr_backbone <= 0:
            raise TrainError("learning rates must be positive")
        if self.epochs < 0:
            raise TrainError(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer not in (OPTIMIZER_ADAM, OPTIMIZER_SGD):
            raise TrainError(f"unknown optimizer {self.optimizer!r}")
        if self.phase not in (PHASE_BASE, PHASE_WSL_HEAD_ONLY):
            raise TrainError(f"unknown phase {self.phase!r}")
        if self.weight_decay < 0:
            raise TrainError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise TrainError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: np.ndarray, label) -> float:
    """-log softmax(logits)[label], stabilized by max subtraction.

    Accepts one (K,) row with an integer label, or a (B, K) batch with a (B,)
    label vector (mean over the batch). Always >= 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise TrainError("non-finite logits in cross_entropy")
    if logits.ndim == 1:
        logits = logits[None]
        labels = np.array([int(label)])
    else:
        labels = np.asarray(label, dtype=int)
        if labels.shape != (logits.shape[0],):
            raise TrainError(f"label shape {labels.shape} mismatches batch {logits.shape[0]}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise TrainError(f"label out of range for K={logits.shape[1]}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    losses = log_norm - z[np.arange(len(labels)), labels]
    return float(losses.mean())


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_with_grad(logits: np.ndarray, labels: np.ndarray):
    """(mean loss, d loss / d logits) for a (B, K) batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    loss = cross_entropy(logits, labels)
    probs = softmax(logits)
    probs[np.arange(len(labels)), labels] -= 1.0
    return loss, probs / len(labels)


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, lr_map: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr_map = dict(lr_map)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            if name not in self.lr_map:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            params[name] -= self.lr_map[name] * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    def __init__(self, lr_map: dict[str, float], weight_decay=0.0):
        self.lr_map = dict(lr_map)
        self.weight_decay = weight_decay

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.lr_map:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            params[name] -= self.lr_map[name] * g


def _make_optimizer(cfg: TrainConfig, lr_map: dict[str, float]):
    if cfg.optimizer == OPTIMIZER_ADAM:
        return Adam(lr_map, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    return Sgd(lr_map, cfg.weight_decay)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    epsilon: float = 1e-4,
    max_backbone_entries: int = 120,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences of the cross-entropy loss.

    Every head/classifier parameter entry is checked; backbone arrays are
    checked on a random subsample of entries. Entries where both gradients
    are below 1e-8 count as zero error.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise TrainError(f"epsilon must be in [1e-6, 1e-3], got {epsilon}")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)

    logits, cache = model.forward_cached(images)
    _, d_logits = cross_entropy_with_grad(logits, labels)
    analytic = model.backward(cache, d_logits, train_backbone=True)

    def loss_now() -> float:
        return cross_entropy(model.forward_cached(images)[0], labels)

    rng = np.random.default_rng(seed)
    params = model.params()
    worst = 0.0
    for name, arr in params.items():
        if name.startswith("conv"):
            count = min(arr.size, max_backbone_entries)
            entries = sorted(rng.choice(arr.size, size=count, replace=False))
        else:
            entries = range(arr.size)
        grad = analytic[name]
        for flat in entries:
            orig = arr.flat[flat]
            arr.flat[flat] = orig + epsilon
            loss_plus = loss_now()
            arr.flat[flat] = orig - epsilon
            loss_minus = loss_now()
            arr.flat[flat] = orig
            numeric = (loss_plus - loss_minus) / (2 * epsilon)
            a = grad.flat[flat]
            scale = max(abs(a), abs(numeric))
            if scale < 1e-8:
                continue
            worst = max(worst, abs(a - numeric) / scale)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Serialized model state: parameter arrays, the architecture that shaped
    them, and the training provenance (config + loss history)."""

    params: dict[str, np.ndarray]
    channels: tuple[int, ...]
    label_space: tuple[str, ...]
    config: TrainConfig
    epoch: int
    history: list[dict] = field(default_factory=list)
    aborted_nan: bool = False

    @property
    def has_head(self) -> bool:
        return "head.w" in self.params

    @property
    def config_hash(self) -> str:
        payload = {
            "config": self.config.to_dict(),
            "channels": list(self.channels),
            "label_space": list(self.label_space),
            "shapes": {k: list(self.params[k].shape) for k in sorted(self.params)},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def params_sha256(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name]).tobytes())
        return digest.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "channels": list(ckpt.channels),
        "label_space": list(ckpt.label_space),
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "aborted_nan": ckpt.aborted_nan,
        "config_hash": ckpt.config_hash,
    }
    arrays = {f"param:{k}": v for k, v in ckpt.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise TrainError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise TrainError(f"unsupported checkpoint format {meta.get('format')!r}")
        params = {
            key[len("param:"):]: data[key] for key in data.files if key.startswith("param:")
        }
    ckpt = Checkpoint(
        params=params,
        channels=tuple(meta["channels"]),
        label_space=tuple(meta["label_space"]),
        config=TrainConfig.from_dict(meta["config"]),
        epoch=int(meta["epoch"]),
        history=list(meta["history"]),
        aborted_nan=bool(meta["aborted_nan"]),
    )
    if ckpt.config_hash != meta["config_hash"]:
        raise TrainError(f"checkpoint {path}: config hash does not match stored parameters")
    return ckpt


def _backbone_from_params(params: dict[str, np.ndarray], channels) -> ToyBackbone:
    n_stages = len(channels) - 1
    weights = [params[f"conv{i}.w"].copy() for i in range(n_stages)]
    biases = [params[f"conv{i}.b"].copy() for i in range(n_stages)]
    return ToyBackbone(weights, biases)


def base_model_from_checkpoint(ckpt: Checkpoint) -> BaseModel:
    backbone = _backbone_from_params(ckpt.params, ckpt.channels)
    return BaseModel(backbone, ckpt.params["fc.w"].copy(), ckpt.params["fc.b"].copy())


def wsl_model_from_checkpoint(ckpt: Checkpoint, derive_from_base: bool = True) -> WslModel:
    """Score-map model from a checkpoint. A checkpoint without a trained head
    can fall back to the exact head copy of its base classifier."""
    backbone = _backbone_from_params(ckpt.params, ckpt.channels)
    if ckpt.has_head:
        head = WslHead(ckpt.params["head.w"].copy(), ckpt.params["head.b"].copy())
    elif derive_from_base:
        logger.info("checkpoint has no trained head; deriving one from the base classifier")
        head = init_wsl_from_base(ckpt.params["fc.w"], ckpt.params["fc.b"])
    else:
        raise TrainError("checkpoint has no score-map head")
    return WslModel(backbone, head)


# ---------------------------------------------------------------------------
# data plumbing


def load_batch(records, store: ImageStore):
    """(B, H, W, 3) float64 images in [0, 1] plus the label vector."""
    images = []
    for rec in records:
        if rec.path not in store:
            raise TrainError(f"unloadable image for record {rec.id!r} (store key {rec.path!r})")
        images.append(store.get_float(rec.path))
    return np.stack(images), np.array([r.label for r in records], dtype=int)


def predict_logits(model, manifest: DatasetManifest, store: ImageStore, batch_size: int = 100):
    """Model logits over a whole manifest, in record order."""
    all_logits = []
    labels = []
    records = manifest.records
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images, chunk_labels = load_batch(chunk, store)
        all_logits.append(model.forward_cached(images)[0])
        labels.append(chunk_labels)
    if not all_logits:
        raise TrainError(f"manifest {manifest.name!r} has no records to evaluate")
    return np.concatenate(all_logits), np.concatenate(labels)


def _evaluate(model, manifest, store, batch_size):
    logits, labels = predict_logits(model, manifest, store, batch_size)
    loss = cross_entropy(logits, labels)
    top1 = float((logits.argmax(axis=1) == labels).mean())
    return loss, top1


def _copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# training loops


def _fit(model, trainable: set[str], data: DatasetManifest, store: ImageStore,
         cfg: TrainConfig, val: DatasetManifest | None):
    """Shared mini-batch loop. Returns (history, selected_epoch, aborted_nan).

    Logs one history row per epoch (train loss, and val loss/top-1 when a
    validation set is given). With validation, the parameters left on the
    model afterwards are the best-val-top-1 epoch's (the untouched epoch-0
    state competes too); without, the final epoch's. A non-finite loss aborts
    immediately and restores the last parameters that produced finite loss.
    """
    records = data.records
    if not records:
        raise TrainError(f"manifest {data.name!r} is empty")
    lr_map = {
        name: (cfg.lr_backbone if name.startswith("conv") else cfg.lr_head)
        for name in model.params()
        if name in trainable
    }
    optimizer = _make_optimizer(cfg, lr_map)
    train_backbone = any(name.startswith("conv") for name in trainable)
    rng = np.random.default_rng(cfg.seed)

    history: list[dict] = []
    # selection key: val top-1 first, val loss as tie-break (top-1 quantizes
    # coarsely on small validation sets), earliest epoch on exact ties
    best: tuple[tuple[float, float], int, dict] | None = None
    if val is not None:
        val_loss, val_top1 = _evaluate(model, val, store, cfg.batch_size)
        history.append({"epoch": 0, "train_loss": None, "val_loss": val_loss, "val_top1": val_top1})
        best = ((val_top1, -val_loss), 0, _copy_params(model.params()))

    params = model.params()  # live references; the optimizer updates in place
    last_good = _copy_params(params)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(records))
        batch_losses = []
        for start in range(0, len(records), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            images, labels = load_batch([records[i] for i in idx], store)
            if cfg.hflip:
                flips = rng.random(len(idx)) < 0.5
                images[flips] = images[flips, :, ::-1, :]
            logits, cache = model.forward_cached(images)
            if not np.isfinite(logits).all():
                model.set_params(last_good)
                logger.warning("non-finite loss at epoch %d; aborting with last good state", epoch)
                return history, epoch - 1, True
            loss, d_logits = cross_entropy_with_grad(logits, labels)
            last_good = _copy_params(params)
            grads = model.backward(cache, d_logits, train_backbone=train_backbone)
            grads = {k: g for k, g in grads.items() if k in trainable}
            optimizer.step(params, grads)
            if any(not np.isfinite(v).all() for v in params.values()):
                model.set_params(last_good)
                logger.warning("non-finite parameters at epoch %d; aborting", epoch)
                return history, epoch - 1, True
            batch_losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(batch_losses))}
        if val is not None:
            val_loss, val_top1 = _evaluate(model, val, store, cfg.batch_size)
            row.update({"val_loss": val_loss, "val_top1": val_top1})
            if best is None or (val_top1, -val_loss) > best[0]:
                best = ((val_top1, -val_loss), epoch, _copy_params(params))
        history.append(row)

    selected = cfg.epochs
    if val is not None and best is not None:
        model.set_params(best[2])
        selected = best[1]
    return history, selected, False


def train_base(
    data: DatasetManifest,
    store: ImageStore,
    cfg: TrainConfig,
    val: DatasetManifest | None = None,
    channels: tuple[int, ...] = DEFAULT_CHANNELS,
    init_model: BaseModel | None = None,
) -> Checkpoint:
    """Phase one: train backbone (lr_backbone) + linear classifier (lr_head)."""
    cfg.validate()
    if cfg.phase != PHASE_BASE:
        raise TrainError(f"train_base requires phase={PHASE_BASE!r}, got {cfg.phase!r}")
    model = init_model.copy() if init_model is not None else BaseModel.create(
        data.num_classes, channels, seed=cfg.seed
    )
    channels = model.backbone.channels
    history, selected, aborted = _fit(model, set(model.params()), data, store, cfg, val)
    return Checkpoint(
        params=_copy_params(model.params()),
        channels=channels,
        label_space=data.label_space,
        config=cfg,
        epoch=selected,
        history=history,
        aborted_nan=aborted,
    )


def train_wsl(
    base: Checkpoint,
    data: DatasetManifest,
    store: ImageStore,
    cfg: TrainConfig,
    val: DatasetManifest | None = None,
) -> Checkpoint:
    """Phase two: head-only fine-tune from an exact copy of the base classifier.

    The backbone is frozen: its parameters are bit-identical before and after.
    At epoch 0 the model's logits equal the base model's on every input.
    """
    cfg.validate()
    if cfg.phase != PHASE_WSL_HEAD_ONLY:
        raise TrainError(f"train_wsl requires phase={PHASE_WSL_HEAD_ONLY!r}, got {cfg.phase!r}")
    if tuple(base.label_space) != tuple(data.label_space):
        raise TrainError(
            f"label space of {data.name!r} does not match the base checkpoint"
        )
    if "fc.w" not in base.params:
        raise TrainError("base checkpoint is missing its classifier parameters")
    backbone = _backbone_from_params(base.params, base.channels)
    head = init_wsl_from_base(base.params["fc.w"], base.params["fc.b"])
    model = WslModel(backbone, head)
    history, selected, aborted = _fit(model, {"head.w", "head.b"}, data, store, cfg, val)
    params = _copy_params(model.params())
    params["fc.w"] = base.params["fc.w"].copy()
    params["fc.b"] = base.params["fc.b"].copy()
    return Checkpoint(
        params=params,
        channels=base.channels,
        label_space=base.label_space,
        config=cfg,
        epoch=selected,
        history=history,
        aborted_nan=aborted,
    )


def export_history_csv(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_top1"])
        for row in ckpt.history:
            writer.writerow(
                [
                    row["epoch"],
                    "" if row.get("train_loss") is None else f"{row['train_loss']:.8f}",
                    "" if row.get("val_loss") is None else f"{row['val_loss']:.8f}",
                    "" if row.get("val_top1") is None else f"{row['val_top1']:.8f}",
                ]
            )
