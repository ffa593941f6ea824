"""Training procedures: global classifier pretraining, one-time calibration
training with the classifier attached, and per-client last-layer fine-tuning.

All three are plain SGD with early stopping on validation accuracy and are
deterministic given (data seed, train seed). Training runs in float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import ClientSet, FeatureRecord, make_labeled_windows
from .errors import ConfigError, FormatError, UsageError
from .evaluation import choose_fallback_threshold, evaluate, fallback_buckets, \
    pooled_accuracy
from .model import IciiaConfig, IciiaParams, iciia_forward, init_params
from .tensor_ops import Param, cross_entropy, linear

CHECKPOINT_MAGIC = b"ICKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    freeze_classifier: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience > self.max_epochs and self.max_epochs > 0:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")


class Sgd:
    """Plain SGD over a parameter list, with optional momentum buffers."""

    def __init__(self, params: list[Param], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._vel = [np.zeros_like(p.value) for p in params] if momentum > 0 else None

    def step(self):
        if self._vel is None:
            for p in self.params:
                p.value -= self.lr * p.grad
        else:
            for p, v in zip(self.params, self._vel):
                v *= self.momentum
                v += p.grad
                p.value -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class Checkpoint:
    """Classifier weights plus (optionally) trained calibration parameters."""

    classifier_w: np.ndarray            # (D, C) float32
    classifier_b: np.ndarray            # (1, C) float32
    iciia: IciiaParams | None = None
    iciia_config: IciiaConfig | None = None
    ablation: str = "none"
    min_history_for_module: int = 1
    best_val_accuracy: float = 0.0
    best_epoch: int = 0
    metrics: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.classifier_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier_w.shape[1]


def _class_mean_init(x: np.ndarray, y: np.ndarray, num_classes: int, dtype=np.float32):
    """Gaussian-discriminant start: per-class mean columns, -||mean||^2/2 bias.

    Plain zero init stalls far below the separability ceiling at the fixed
    learning rate; starting at the discriminant makes the baseline an honest
    reference point for the calibration gains measured against it.
    """
    d = x.shape[1]
    w = np.zeros((d, num_classes), dtype=dtype)
    b = np.zeros((1, num_classes), dtype=dtype)
    for c in range(num_classes):
        rows = x[y == c]
        if len(rows):
            mu = rows.mean(axis=0)
            w[:, c] = mu
            b[0, c] = -0.5 * float(mu @ mu)
    return w, b


class _EarlyStopper:
    """Tracks the best validation accuracy and signals patience exhaustion."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self._since = 0

    def update(self, acc: float, epoch: int) -> bool:
        if acc > self.best:
            self.best = acc
            self.best_epoch = epoch
            self._since = 0
            return True
        self._since += 1
        return False

    @property
    def exhausted(self) -> bool:
        return self._since >= self.patience


def train_global_classifier(train_set: ClientSet, val_set: ClientSet,
                            num_classes: int, cfg: TrainConfig,
                            dtype=np.float32) -> Checkpoint:
    """SGD over the pooled records (client identity ignored), cross-entropy on a
    linear classifier, early stopping on pooled validation accuracy."""
    if train_set.num_records() == 0:
        raise UsageError("train_global_classifier: empty training set")
    x, y = train_set.stacked()
    x = x.astype(dtype)
    if y.size and int(y.max()) >= num_classes:
        raise ConfigError(f"label {int(y.max())} out of range for {num_classes} classes")

    w0, b0 = _class_mean_init(x, y, num_classes, dtype)
    w, b = Param(w0), Param(b0)
    opt = Sgd([w, b], cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)

    stopper = _EarlyStopper(cfg.patience)
    stopper.update(pooled_accuracy(val_set, w.value, b.value), 0)
    best = (w.value.copy(), b.value.copy())
    val_history = [stopper.best]
    epochs_run = 0
    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        order = rng.permutation(len(y))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits, bwd = linear(x[idx], w, b)
            _, dlogits = cross_entropy(logits, y[idx])
            bwd(dlogits)
            opt.step()
            opt.zero_grad()
        acc = pooled_accuracy(val_set, w.value, b.value)
        val_history.append(acc)
        if stopper.update(acc, epoch):
            best = (w.value.copy(), b.value.copy())
        if stopper.exhausted:
            break

    return Checkpoint(
        classifier_w=best[0], classifier_b=best[1],
        best_val_accuracy=float(stopper.best), best_epoch=stopper.best_epoch,
        metrics={"epochs_run": epochs_run, "val_history": val_history,
                 "train_seed": cfg.seed},
    )


VAL_HISTORY = 15  # history size used for model selection, matching training windows


def train_iciia(train_set: ClientSet, val_set: ClientSet, backbone: Checkpoint,
                iciia_cfg: IciiaConfig, cfg: TrainConfig,
                ablation: str = "none", dtype=np.float32) -> Checkpoint:
    """One-time training of the calibration module on top of a pretrained
    classifier (frozen by default), loss over all rows of each client window,
    model selection by validation accuracy under the serving protocol."""
    if backbone.feature_dim != iciia_cfg.feature_dim:
        raise ConfigError(f"checkpoint feature_dim {backbone.feature_dim} != config "
                          f"feature_dim {iciia_cfg.feature_dim}")
    if train_set.num_records() == 0:
        raise UsageError("train_iciia: empty training set")

    params = init_params(iciia_cfg, seed=cfg.seed, dtype=dtype)
    w = Param(backbone.classifier_w.astype(dtype).copy())
    b = Param(backbone.classifier_b.astype(dtype).copy())
    trainable = params.params() if cfg.freeze_classifier else params.params() + [w, b]
    opt = Sgd(trainable, cfg.learning_rate, cfg.momentum)

    val_history_size = min(VAL_HISTORY, iciia_cfg.max_history)

    def val_accuracy(p: IciiaParams) -> float:
        return evaluate(val_set, w.value, b.value, p, iciia_cfg,
                        history=val_history_size, seed=cfg.seed,
                        ablation=ablation).overall_accuracy

    stopper = _EarlyStopper(cfg.patience)
    stopper.update(val_accuracy(params), 0)
    best = (params.copy(), w.value.copy(), b.value.copy())
    val_history = [stopper.best]
    loss_history: list[float] = []
    client_ids = train_set.client_ids()
    clients_skipped = sum(1 for cid in client_ids if not train_set.clients[cid])
    epochs_run = 0
    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        epoch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        batches = []
        for cid in client_ids:
            recs = train_set.clients[cid]
            if not recs:
                continue
            wseed = int(epoch_rng.integers(np.iinfo(np.int64).max))
            batches.extend(make_labeled_windows(recs, cfg.batch_size, wseed))
        epoch_loss = 0.0
        for i in epoch_rng.permutation(len(batches)):
            window, labels = batches[i]
            out, bwd_model, _ = iciia_forward(window, params, iciia_cfg, ablation=ablation)
            logits, bwd_cls = linear(out, w, b)
            loss, dlogits = cross_entropy(logits, labels)
            epoch_loss += loss
            dout = bwd_cls(dlogits)
            bwd_model(dout)
            opt.step()
            opt.zero_grad()
            if cfg.freeze_classifier:
                w.zero_grad()
                b.zero_grad()
        loss_history.append(epoch_loss / max(len(batches), 1))
        acc = val_accuracy(params)
        val_history.append(acc)
        if stopper.update(acc, epoch):
            best = (params.copy(), w.value.copy(), b.value.copy())
        if stopper.exhausted:
            break

    # calibrate the cold-start fallback: serve with the raw classifier until a
    # client has accumulated enough history for the module to win on validation
    counts, module_ok, baseline_ok = fallback_buckets(
        val_set, best[1], best[2], best[0], iciia_cfg, val_history_size,
        seed=cfg.seed, ablation=ablation)
    threshold, calibrated_val = choose_fallback_threshold(counts, module_ok, baseline_ok)

    return Checkpoint(
        classifier_w=best[1], classifier_b=best[2], iciia=best[0],
        iciia_config=iciia_cfg, ablation=ablation,
        min_history_for_module=threshold,
        best_val_accuracy=float(calibrated_val), best_epoch=stopper.best_epoch,
        metrics={"epochs_run": epochs_run, "val_history": val_history,
                 "train_loss_history": loss_history,
                 "best_uncalibrated_val": float(stopper.best),
                 "train_seed": cfg.seed, "val_history_size": val_history_size,
                 "freeze_classifier": cfg.freeze_classifier,
                 "clients_skipped": clients_skipped},
    )


def finetune_last_layer(train_records: list[FeatureRecord], backbone: Checkpoint,
                        cfg: TrainConfig,
                        val_records: list[FeatureRecord] | None = None,
                        dtype=np.float32):
    """Adapt the classifier to one client's labeled records, other layers frozen.

    Returns (w, b). With max_epochs 0 the global classifier is returned
    unchanged. Early stopping uses the client's validation records when given.
    """
    w = Param(backbone.classifier_w.astype(dtype).copy())
    b = Param(backbone.classifier_b.astype(dtype).copy())
    if cfg.max_epochs == 0 or not train_records:
        return w.value, b.value
    x = np.stack([r.features for r in train_records]).astype(dtype)
    y = np.asarray([r.label for r in train_records], dtype=np.int64)
    xv = yv = None
    if val_records:
        xv = np.stack([r.features for r in val_records]).astype(dtype)
        yv = np.asarray([r.label for r in val_records], dtype=np.int64)

    def val_acc():
        if xv is None:
            return None
        pred = np.argmax(xv @ w.value + b.value, axis=1)
        return float((pred == yv).mean())

    opt = Sgd([w, b], cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    stopper = _EarlyStopper(cfg.patience)
    best = (w.value.copy(), b.value.copy())
    acc0 = val_acc()
    if acc0 is not None:
        stopper.update(acc0, 0)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(y))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits, bwd = linear(x[idx], w, b)
            _, dlogits = cross_entropy(logits, y[idx])
            bwd(dlogits)
            opt.step()
            opt.zero_grad()
        acc = val_acc()
        if acc is None:
            best = (w.value.copy(), b.value.copy())
            continue
        if stopper.update(acc, epoch):
            best = (w.value.copy(), b.value.copy())
        if stopper.exhausted:
            break
    return best


def _param_blobs(ckpt: Checkpoint) -> list[np.ndarray]:
    blobs = [ckpt.classifier_w, ckpt.classifier_b]
    if ckpt.iciia is not None:
        blobs.extend(p.value for p in ckpt.iciia.params())
    return blobs


def save_checkpoint(path, ckpt: Checkpoint):
    """Versioned binary: magic, version, JSON config block, little-endian
    float32 parameter blobs in declaration order. Metrics go to a JSON sidecar."""
    path = Path(path)
    header = {
        "feature_dim": ckpt.feature_dim,
        "num_classes": ckpt.num_classes,
        "iciia_config": ckpt.iciia_config.to_dict() if ckpt.iciia_config else None,
        "ablation": ckpt.ablation,
        "min_history_for_module": ckpt.min_history_for_module,
        "best_val_accuracy": ckpt.best_val_accuracy,
        "best_epoch": ckpt.best_epoch,
    }
    head = json.dumps(header).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in _param_blobs(ckpt):
            fh.write(np.ascontiguousarray(blob, dtype="<f4").tobytes())
    sidecar = {"best_val_accuracy": ckpt.best_val_accuracy, "best_epoch": ckpt.best_epoch,
               "metrics": ckpt.metrics}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    head_len, = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + head_len].decode("utf-8"))
    offset = 12 + head_len

    def take(shape) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        return arr.reshape(shape).astype(np.float32)

    d, c = header["feature_dim"], header["num_classes"]
    w = take((d, c))
    b = take((1, c))
    iciia = None
    icfg = None
    if header["iciia_config"] is not None:
        icfg = IciiaConfig.from_dict(header["iciia_config"])
        iciia = init_params(icfg, seed=0)
        for p in iciia.params():
            p.value[...] = take(p.value.shape)
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after parameter blobs")
    metrics = {}
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        metrics = json.loads(sidecar.read_text()).get("metrics", {})
    return Checkpoint(classifier_w=w, classifier_b=b, iciia=iciia, iciia_config=icfg,
                      ablation=header.get("ablation", "none"),
                      min_history_for_module=header.get("min_history_for_module", 1),
                      best_val_accuracy=header["best_val_accuracy"],
                      best_epoch=header["best_epoch"], metrics=metrics)
