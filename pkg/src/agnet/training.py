"""Training loop, optimizer, learning-rate schedule, and metrics.

The recipe: SGD with Nesterov momentum 0.9 and weight decay 1e-4 on
weights only (biases and batch-norm affines are exempt), batch size 64
drawn with the rebalancing sampler, a short low-lr warmup followed by a
step schedule that divides the rate by 10 every 100 epochs.

Every epoch draws its batches and augmentations from its own random
stream, ``default_rng([seed, epoch])``, so a run interrupted at any
epoch boundary and resumed from the checkpoint reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import data as D
from . import tensor as T
from .errors import CheckpointError, NumericalAbort
from .formats import load_checkpoint, save_checkpoint
from .models import Model, aggregate_mean
from .tensor import Tensor


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at_epoch(
    epoch: int,
    base_lr: float = 0.1,
    warmup_lr: float = 0.01,
    warmup_epochs: int = 5,
    decay: float = 0.1,
    decay_every: int = 100,
) -> float:
    """Warmup at a tenth of the base rate, then step decay every 100 epochs."""
    if epoch < warmup_epochs:
        return warmup_lr
    return base_lr * decay ** (epoch // decay_every)


class SGDNesterov:
    """SGD with Nesterov momentum and decoupled-from-schedule weight decay.

    Per parameter: g' = grad + wd * w, v <- mu * v - lr * g',
    w <- w + mu * v - lr * g' (v already updated), the standard
    look-ahead form.
    """

    def __init__(
        self,
        params: Dict[str, Tensor],
        decay_mask: Dict[str, bool],
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
    ):
        self.params = params
        self.decay_mask = decay_mask
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: float) -> None:
        mu = self.momentum
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay and self.decay_mask.get(name, False):
                g = g + self.weight_decay * t.data
            v = self.velocity[name]
            v *= mu
            v -= lr * g
            t.data += mu * v - lr * g

    def state(self) -> Dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.velocity):
            raise CheckpointError("optimizer state does not match parameter set")
        for name, v in state.items():
            self.velocity[name] = np.asarray(v, dtype=self.velocity[name].dtype).copy()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    precision: np.ndarray      # per class
    recall: np.ndarray
    f1: np.ndarray
    confusion: np.ndarray      # [true, predicted]

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())


def compute_metrics(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> Metrics:
    """Confusion-matrix metrics; empty denominators count as zero, so a
    class that is never predicted contributes zero precision."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0).astype(np.float64)
    true_tot = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    acc = float(tp.sum() / max(1, cm.sum()))
    return Metrics(acc, precision, recall, f1, cm)


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class predictions on raw (unwhitened) images."""
    model.train(False)
    preds = []
    with T.no_grad():
        for i in range(0, images.shape[0], batch_size):
            x = Tensor(D.whiten(images[i:i + batch_size]))
            out = model.forward(x)
            preds.append(out.logits.data.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> Metrics:
    preds = predict(model, images, batch_size)
    return compute_metrics(np.asarray(labels), preds, model.spec.num_classes)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def batch_loss(model: Model, x: Tensor, y: np.ndarray) -> Tensor:
    """Cross-entropy matching the model's aggregation strategy.

    Deep supervision adds the mean of the per-scale losses to the loss of
    the aggregated prediction; the other strategies train the aggregate
    alone (the sampler already balances classes, so no class weights).
    """
    out = model.forward(x)
    loss = T.weighted_cross_entropy(out.logits, y)
    if model.spec.variant == "ag" and model.spec.aggregation == "ds":
        per_scale = [T.weighted_cross_entropy(z, y) for z in out.scale_logits]
        acc = per_scale[0]
        for extra in per_scale[1:]:
            acc = T.add(acc, extra)
        loss = T.add(loss, T.mul(acc, 1.0 / len(per_scale)))
    return loss


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 64
    seed: int = 0
    base_lr: float = 0.1
    warmup_lr: float = 0.01
    warmup_epochs: int = 5
    lr_decay: float = 0.1
    lr_decay_every: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    patience: Optional[int] = None     # epochs without val macro-F1 gain
    augment: bool = True
    checkpoint_every: int = 0          # 0: only the final/best checkpoints


HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_acc", "val_macro_p", "val_macro_r", "val_macro_f1")


@dataclass
class TrainResult:
    history: List[dict]
    best_metric: float
    best_epoch: int
    best_state: Dict[str, np.ndarray]
    stopped_early: bool = False


def history_digest(rows: List[dict]) -> str:
    """Stable hash of a training history for determinism checks."""
    text = "\n".join(
        ",".join(repr(float(row[k])) for k in HISTORY_FIELDS) for row in rows
    )
    return hashlib.sha256(text.encode("ascii")).hexdigest()


def write_history_csv(path, rows: List[dict], phase_starts: Optional[Dict[int, str]] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(HISTORY_FIELDS) + "\n")
        for row in rows:
            if phase_starts and int(row["epoch"]) in phase_starts:
                fh.write(f"# phase {phase_starts[int(row['epoch'])]}\n")
            fh.write(",".join(str(row[k]) for k in HISTORY_FIELDS) + "\n")


def read_history_csv(path) -> List[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            values = line.split(",")
            row = dict(zip(header, values))
            rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()})
    return rows


def train(
    model: Model,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    config: TrainConfig,
    out_dir=None,
    config_echo: str = "",
    optimizer: Optional[SGDNesterov] = None,
    start_epoch: int = 0,
    history: Optional[List[dict]] = None,
) -> TrainResult:
    """Run the recipe; returns history plus the best validation state.

    ``start_epoch``, ``optimizer``, and ``history`` allow resuming from a
    checkpoint: epoch e always consumes random stream [seed, e], so the
    continuation is independent of where the run was interrupted.
    """
    num_planes = model.spec.num_classes - 1
    probs = D.sampler_probs(train_labels, num_planes)
    steps_per_epoch = max(1, math.ceil(train_labels.shape[0] / config.batch_size))
    if optimizer is None:
        optimizer = SGDNesterov(
            model.parameters(), model.decay_mask(), config.momentum, config.weight_decay
        )
    history = list(history) if history else []
    best_metric = -1.0
    best_epoch = -1
    best_state: Dict[str, np.ndarray] = {}
    for row in history:
        if row["val_macro_f1"] > best_metric:
            best_metric, best_epoch = row["val_macro_f1"], int(row["epoch"])
    stopped_early = False
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, config.epochs):
        lr = lr_at_epoch(
            epoch, config.base_lr, config.warmup_lr, config.warmup_epochs,
            config.lr_decay, config.lr_decay_every,
        )
        rng = np.random.default_rng([config.seed, epoch])
        model.train(True)
        losses = []
        for _ in range(steps_per_epoch):
            xb, yb = D.sample_batch(rng, train_images, train_labels, probs, config.batch_size)
            if config.augment:
                xb = D.augment_batch(xb, rng)
            x = Tensor(D.whiten(xb))
            model.zero_grad()
            with T.recording() as tape:
                loss = batch_loss(model, x, yb)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise NumericalAbort(
                        f"non-finite training loss {loss_val} at epoch {epoch}"
                    )
                T.backward(loss, tape=tape)
            optimizer.step(lr)
            losses.append(loss_val)

        metrics = evaluate(model, val_images, val_labels, config.batch_size)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_acc": metrics.accuracy,
            "val_macro_p": metrics.macro_precision,
            "val_macro_r": metrics.macro_recall,
            "val_macro_f1": metrics.macro_f1,
        }
        history.append(row)

        if metrics.macro_f1 > best_metric:
            best_metric = metrics.macro_f1
            best_epoch = epoch
            best_state = model.state_dict()
            if out_dir is not None:
                save_training_checkpoint(
                    out_dir / "best.agck", model, optimizer, epoch, config.seed, config_echo
                )
        if out_dir is not None and (
            config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0
        ):
            save_training_checkpoint(
                out_dir / f"epoch{epoch:04d}.agck", model, optimizer, epoch, config.seed, config_echo
            )
        if config.patience is not None and epoch - best_epoch >= config.patience:
            stopped_early = True
            break

    if out_dir is not None:
        save_training_checkpoint(
            out_dir / "last.agck", model, optimizer,
            (history[-1]["epoch"] if history else -1), config.seed, config_echo,
        )
        write_history_csv(out_dir / "history.csv", history)
    if not best_state:
        best_state = model.state_dict()
    return TrainResult(history, best_metric, best_epoch, best_state, stopped_early)


# ---------------------------------------------------------------------------
# two-phase fine-tuned aggregation
# ---------------------------------------------------------------------------

@dataclass
class TwoPhaseResult:
    phase1: TrainResult
    phase2: TrainResult
    ft_initial: Metrics            # validation metrics before any phase-2 step
    boundary_epoch: int
    model: Model                   # FT model holding the overall best state

    @property
    def history(self) -> List[dict]:
        return self.phase1.history + self.phase2.history


def train_two_phase(
    model: Model,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    config: TrainConfig,
    ft_epochs: Optional[int] = None,
    out_dir=None,
    config_echo: str = "",
) -> TwoPhaseResult:
    """Probability-averaging phase, then a learned-aggregation phase.

    Phase 1 trains ``model`` (mean aggregation) for the configured epochs
    and restores its best validation state.  Phase 2 bolts on the
    aggregation head, which starts as exact averaging, so its initial
    decision function (and therefore its initial validation metrics)
    equals what phase 1 handed over.  Epoch numbering and the lr
    schedule continue across the boundary; if fine-tuning never beats
    its own starting point, the starting state is kept.
    """
    from .models import with_aggregation

    if model.spec.variant != "ag" or model.spec.aggregation != "mean":
        raise ValueError("two-phase training expects an AG model with mean aggregation")
    if ft_epochs is None:
        ft_epochs = max(10, config.epochs // 4)
    phase1 = train(
        model, train_images, train_labels, val_images, val_labels, config,
        out_dir=out_dir, config_echo=config_echo,
    )
    model.load_state_dict(phase1.best_state)
    ft = with_aggregation(model, "ft", seed=config.seed)
    ft_init_state = ft.state_dict()
    ft_initial = evaluate(ft, val_images, val_labels, config.batch_size)

    from dataclasses import replace as _replace
    cfg2 = _replace(config, epochs=config.epochs + ft_epochs, patience=None)
    phase2 = train(
        ft, train_images, train_labels, val_images, val_labels, cfg2,
        out_dir=out_dir, config_echo=config_echo, start_epoch=config.epochs,
    )
    if phase2.best_metric < ft_initial.macro_f1:
        ft.load_state_dict(ft_init_state)
        phase2 = TrainResult(
            phase2.history, ft_initial.macro_f1, config.epochs - 1, ft_init_state,
            phase2.stopped_early,
        )
    else:
        ft.load_state_dict(phase2.best_state)
    if out_dir is not None:
        save_training_checkpoint(
            Path(out_dir) / "best.agck", ft, None, phase2.best_epoch, config.seed, config_echo
        )
        write_history_csv(
            Path(out_dir) / "history.csv",
            phase1.history + phase2.history,
            phase_starts={config.epochs: "ft"},
        )
    return TwoPhaseResult(phase1, phase2, ft_initial, config.epochs, ft)


# ---------------------------------------------------------------------------
# checkpoints carrying optimizer and progress state
# ---------------------------------------------------------------------------

def save_training_checkpoint(
    path, model: Model, optimizer: Optional[SGDNesterov], epoch: int, seed: int,
    config_echo: str = "",
) -> None:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            tensors[f"opt/{name}/v"] = v
    tensors["meta/epoch"] = np.asarray(float(epoch), dtype=np.float32)
    tensors["meta/seed"] = np.asarray(float(seed), dtype=np.float32)
    save_checkpoint(path, tensors, config_echo)


def load_training_checkpoint(path, model: Model, optimizer: Optional[SGDNesterov] = None):
    """Restore model (and optionally optimizer) state; returns (epoch, seed, config)."""
    tensors, config_echo = load_checkpoint(path)
    model_state = {}
    opt_state = {}
    meta = {}
    for name, arr in tensors.items():
        if name.startswith("opt/") and name.endswith("/v"):
            opt_state[name[4:-2]] = arr
        elif name.startswith("meta/"):
            meta[name[5:]] = arr
        else:
            model_state[name] = arr
    model.load_state_dict(model_state)
    if optimizer is not None:
        if not opt_state:
            raise CheckpointError(f"{path}: checkpoint has no optimizer state to resume from")
        optimizer.load_state(opt_state)
    if "epoch" not in meta or "seed" not in meta:
        raise CheckpointError(f"{path}: checkpoint is missing progress metadata")
    return int(meta["epoch"].item()), int(meta["seed"].item()), config_echo
