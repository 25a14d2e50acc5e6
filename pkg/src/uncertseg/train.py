"""Training loop: cross-entropy / aleatoric loss, Adam, LR plateau schedule,
validation-Dice model selection, checkpointing. Single-threaded and
bit-reproducible for a fixed config and seed."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import functional as F
from .engine.optim import adam_step
from .inference import deterministic_probability
from .model import (
    BUNET,
    ArchitectureSpec,
    Network,
    aleatoric_loss,
    build_network,
    save_checkpoint,
)
from .postprocess import otsu_threshold
from .rng import RngState

# stream tags for deriving independent sub-streams from the run seed
_INIT = 1 << 40
_SHUFFLE = 2 << 40
_DROPOUT = 3 << 40
_NOISE = 4 << 40


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "u2net"
    lr0: float = 1e-4
    batch_size: int = 2
    weight_decay: float = 5e-4
    max_epochs: int = 160
    plateau_window: int = 15
    plateau_min_improvement: float = 1e-4
    lr_factor: float = 0.5
    seed: int = 0
    noise_samples: int = 10  # aleatoric loss draws per step (bunet only)
    base_channels: int = 64

    def __post_init__(self):
        for name in ("lr0", "batch_size", "weight_decay", "max_epochs", "plateau_window",
                     "plateau_min_improvement", "lr_factor", "noise_samples", "base_channels"):
            if getattr(self, name) < 0 or (name not in ("weight_decay",) and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; argmax of val_dice, first occurrence on ties


class PlateauScheduler:
    """Halve the learning rate when the best validation Dice inside the last
    ``window`` epochs improves on the best before the window by less than
    ``min_improvement``. The window restarts after each reduction."""

    def __init__(self, lr0: float, window: int = 15, min_improvement: float = 1e-4, factor: float = 0.5):
        self.lr = lr0
        self.window = window
        self.min_improvement = min_improvement
        self.factor = factor
        self._history: list[float] = []
        self._last_change = 0

    def step(self, value: float) -> float:
        """Record one epoch's validation Dice; returns the lr for the next epoch."""
        self._history.append(value)
        n = len(self._history)
        if n - self._last_change >= self.window and n > self.window:
            recent = max(self._history[-self.window :])
            earlier = max(self._history[: n - self.window])
            if recent - earlier < self.min_improvement:
                self.lr *= self.factor
                self._last_change = n
        return self.lr


def volume_dice(net: Network, images: np.ndarray, masks: np.ndarray) -> float:
    """Deterministic volume-level Dice: per-B-scan Otsu masks pooled over the volume."""
    probs = deterministic_probability(net, images[:, None])
    inter = 0
    size_pred = 0
    size_truth = 0
    for prob, gt in zip(probs, masks):
        seg = otsu_threshold(prob)
        inter += int(np.logical_and(seg.mask, gt).sum())
        size_pred += int(seg.mask.sum())
        size_truth += int(np.asarray(gt, dtype=bool).sum())
    denom = size_pred + size_truth
    return 1.0 if denom == 0 else 2.0 * inter / denom


def validation_dice(net: Network, val_volumes: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean volume-level Dice over the validation split (eval mode)."""
    if not val_volumes:
        raise ValueError("validation split is empty")
    return float(np.mean([volume_dice(net, imgs, masks) for imgs, masks in val_volumes]))


def train(
    config: TrainConfig,
    train_data: tuple[np.ndarray, np.ndarray],
    val_volumes: list[tuple[np.ndarray, np.ndarray]],
    out_dir: str | Path | None = None,
    log=None,
) -> tuple[Network, Network, TrainHistory]:
    """Train one network; returns (best network, final network, history).

    ``train_data`` is the flattened training split: images (M, H, W) float32
    in [0, 1] and masks (M, H, W). ``val_volumes`` is a list of per-volume
    (images, masks) stacks. When ``out_dir`` is given, writes best.ckpt/,
    final.ckpt/ and history.csv there.
    """
    images, masks = train_data
    if images.shape[0] == 0 or not val_volumes:
        raise ValueError("train and validation splits must be non-empty")
    masks = masks.astype(np.int64)
    root = RngState(config.seed)
    spec = ArchitectureSpec(config.arch, base_channels=config.base_channels)
    net = build_network(spec, root.derive(_INIT))
    scheduler = PlateauScheduler(
        config.lr0, config.plateau_window, config.plateau_min_improvement, config.lr_factor
    )
    history = TrainHistory()
    params = net.parameters()
    best_dice = -1.0
    best_state: dict[str, np.ndarray] = {}
    count = images.shape[0]
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        order = root.derive(_SHUFFLE | epoch).permutation(count)
        forward_rng = root.derive(_DROPOUT | epoch)
        noise_rng = root.derive(_NOISE | epoch)
        lr_used = scheduler.lr
        net.set_mode(F.TRAIN)
        epoch_loss = 0.0
        for start in range(0, count, config.batch_size):
            batch = order[start : start + config.batch_size]
            x = np.ascontiguousarray(images[batch][:, None])
            y = masks[batch]
            logits = net.forward(x, forward_rng)
            if config.arch == BUNET:
                loss, grad = aleatoric_loss(logits, y, config.noise_samples, noise_rng)
            else:
                loss, cache = F.softmax_cross_entropy(logits, y)
                grad = F.softmax_cross_entropy_backward(cache)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss {loss} at epoch {epoch}, step {step + 1}"
                )
            net.backward(grad)
            step += 1
            adam_step(params, lr=lr_used, weight_decay=config.weight_decay, t=step)
            epoch_loss += loss * len(batch)
        epoch_loss /= count
        vd = validation_dice(net, val_volumes)
        history.loss.append(epoch_loss)
        history.val_dice.append(vd)
        history.lr.append(lr_used)
        if vd > best_dice:
            best_dice = vd
            history.best_epoch = epoch
            best_state = {name: arr.copy() for name, arr in net.state_entries()}
        scheduler.step(vd)
        if log:
            log(f"epoch {epoch}: loss={epoch_loss:.5f} val_dice={vd:.4f} lr={lr_used:g}")

    best_net = build_network(spec, RngState(0))
    best_net.load_state(best_state)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best_net, out_dir / "best.ckpt")
        save_checkpoint(net, out_dir / "final.ckpt")
        write_history_csv(history, out_dir / "history.csv")
    return best_net, net, history


def write_history_csv(history: TrainHistory, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_dice", "lr"])
        for i, (loss, vd, lr) in enumerate(zip(history.loss, history.val_dice, history.lr), start=1):
            writer.writerow([i, repr(loss), repr(vd), repr(lr)])
