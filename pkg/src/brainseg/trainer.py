"""Fine-tuning loop: weighted cross-entropy, per-epoch validation, early stopping.

Only the prompt encoder and mask decoder receive gradients; the image
encoder stays frozen. Checkpoint selection returns the epoch with the
lowest validation loss.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .dataset import DatasetManifest, ManifestEntry, read_image_png, read_label_png, read_manifest
from .errors import (
    DivergedLoss,
    EmptyDataset,
    MissingManifest,
    NonFiniteLoss,
    ShapeMismatch,
)
from .model import FULL_IMAGE_BOX, SegModel
from .slicing import PLANES

PLANS = (*PLANES, "unified")

PROMPT_FULL_BOX = "full_box"
PROMPT_TISSUE_BOX = "tissue_box"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    max_epochs: int = 10
    class_weights: tuple[float, float, float] = (0.2, 1.0, 1.0)
    weight_decay: float = 0.01
    early_stop_patience: int = 3
    seed: int = 0
    prompt_mode: str = PROMPT_FULL_BOX

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if len(self.class_weights) != 3 or any(w <= 0 for w in self.class_weights):
            raise ValueError(f"class_weights must be 3 positive reals, got {self.class_weights}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.prompt_mode not in (PROMPT_FULL_BOX, PROMPT_TISSUE_BOX):
            raise ValueError(f"unknown prompt_mode {self.prompt_mode!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time_s: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def weighted_cross_entropy(logits, labels, weights) -> torch.Tensor:
    """Class-weighted cross-entropy, normalized by the summed applied weights.

    With uniform weights this reduces to plain mean cross-entropy, and
    scaling all weights by a constant leaves the value unchanged.
    """
    if logits.ndim != 4 or logits.shape[1] != 3:
        raise ShapeMismatch(f"logits must be (B,3,H,W), got {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ShapeMismatch(
            f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}"
        )
    w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    loss = F.cross_entropy(logits, labels, weight=w, reduction="mean")
    if not torch.isfinite(loss):
        raise NonFiniteLoss("cross-entropy evaluated to NaN/Inf")
    return loss


def tissue_box(label: np.ndarray) -> tuple[float, float, float, float]:
    """Normalized bounding box of the nonzero label region (full box if empty)."""
    ys, xs = np.nonzero(label > 0)
    if ys.size == 0:
        return FULL_IMAGE_BOX
    h, w = label.shape
    return (xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)


class SliceDataset(Dataset):
    """Image/label/prompt triples read from manifest entries."""

    def __init__(self, entries: list[ManifestEntry], root, prompt_mode: str = PROMPT_FULL_BOX):
        self.entries = list(entries)
        self.root = Path(root)
        self.prompt_mode = prompt_mode

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        e = self.entries[i]
        image = read_image_png(self.root / e.image_path)
        label = read_label_png(self.root / e.label_path)
        box = FULL_IMAGE_BOX if self.prompt_mode == PROMPT_FULL_BOX else tissue_box(label)
        return (
            torch.from_numpy(image)[None],
            torch.from_numpy(label),
            torch.tensor(box, dtype=torch.float32),
        )


class EarlyStopTracker:
    """Stop after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _manifest_and_root(manifest, root):
    if isinstance(manifest, (str, Path)):
        path = Path(manifest)
        return read_manifest(path), path.parent
    if root is None:
        raise ValueError("dataset root is required when passing a DatasetManifest object")
    return manifest, Path(root)


def _eval_loss(net, loader, weights) -> float:
    """Weighted-mean validation loss aggregated over all pixels."""
    w = torch.as_tensor(weights, dtype=torch.float32)
    num = 0.0
    den = 0.0
    net.eval()
    with torch.no_grad():
        for images, labels, boxes in loader:
            logits = net(images, boxes)
            per_pixel = F.cross_entropy(logits, labels, weight=w, reduction="sum")
            num += float(per_pixel)
            den += float(w[labels].sum())
    if den == 0:
        raise EmptyDataset("validation set has no pixels")
    return num / den


def train(
    model: SegModel,
    train_manifest,
    val_manifest,
    cfg: TrainConfig,
    root=None,
) -> tuple[dict, TrainHistory]:
    """Fine-tune the prompt encoder and decoder; returns (best state dict, history).

    Manifests may be paths to manifest files (root inferred) or
    DatasetManifest objects with `root` given. The model is left loaded
    with the best-validation-loss weights.
    """
    train_man, train_root = _manifest_and_root(train_manifest, root)
    val_man, val_root = _manifest_and_root(val_manifest, root)
    return train_on_entries(
        model, train_man.entries, val_man.entries, cfg, train_root, val_root
    )


def train_on_entries(
    model: SegModel,
    train_entries: list[ManifestEntry],
    val_entries: list[ManifestEntry],
    cfg: TrainConfig,
    train_root,
    val_root=None,
) -> tuple[dict, TrainHistory]:
    if not train_entries or not val_entries:
        raise EmptyDataset("training and validation manifests must be non-empty")
    val_root = train_root if val_root is None else val_root

    torch.manual_seed(cfg.seed)
    train_ds = SliceDataset(train_entries, train_root, cfg.prompt_mode)
    val_ds = SliceDataset(val_entries, val_root, cfg.prompt_mode)
    gen = torch.Generator().manual_seed(cfg.seed)
    train_loader = DataLoader(
        train_ds, batch_size=cfg.batch_size, shuffle=True, generator=gen, num_workers=0
    )
    val_loader = DataLoader(val_ds, batch_size=cfg.batch_size, shuffle=False, num_workers=0)

    net = model.net
    optimizer = torch.optim.AdamW(
        model.trainable_parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    tracker = EarlyStopTracker(cfg.early_stop_patience)
    history = TrainHistory()
    best_state: dict = {}

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.monotonic()
        net.train()
        batch_losses = []
        for images, labels, boxes in train_loader:
            optimizer.zero_grad()
            logits = net(images, boxes)
            try:
                loss = weighted_cross_entropy(logits, labels, cfg.class_weights)
            except NonFiniteLoss as e:
                raise DivergedLoss(f"loss diverged at epoch {epoch}") from e
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.detach()))
        val_loss = _eval_loss(net, val_loader, cfg.class_weights)
        if not np.isfinite(val_loss):
            raise DivergedLoss(f"validation loss diverged at epoch {epoch}")
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            val_loss=val_loss,
            wall_time_s=time.monotonic() - t0,
        )
        history.epochs.append(record)
        improved = val_loss < tracker.best
        stop = tracker.update(epoch, val_loss)
        if improved:
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        if stop:
            history.stopped_early = True
            break

    history.best_epoch = tracker.best_epoch
    net.load_state_dict(best_state)
    return best_state, history


def select_plan_entries(manifest: DatasetManifest, plan: str) -> list[ManifestEntry]:
    """Entries for one training plan: a single plane, or all planes for 'unified'."""
    if plan not in PLANS:
        raise ValueError(f"unknown plan {plan!r}, expected one of {PLANS}")
    if plan == "unified":
        return list(manifest.entries)
    return [e for e in manifest.entries if e.plane == plan]


def run_experiment(
    model: SegModel,
    plan: str,
    dataset_root,
    cfg: TrainConfig,
    cap: int | None = None,
) -> tuple[dict, TrainHistory, int]:
    """Train one plan from the per-split manifests under dataset_root.

    Returns (best state, history, number of training slices consumed).
    `cap` truncates both splits for desk-scale runs.
    """
    root = Path(dataset_root)
    train_path = root / "manifest_train.jsonl"
    val_path = root / "manifest_val.jsonl"
    for p in (train_path, val_path):
        if not p.is_file():
            raise MissingManifest(f"no manifest at {p}")
    train_entries = select_plan_entries(read_manifest(train_path), plan)
    val_entries = select_plan_entries(read_manifest(val_path), plan)
    if cap is not None:
        train_entries = train_entries[:cap]
        val_entries = val_entries[:cap]
    best_state, history = train_on_entries(model, train_entries, val_entries, cfg, root)
    return best_state, history, len(train_entries)


def write_history_csv(history: TrainHistory, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "wall_time_s"])
        for r in history.epochs:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.wall_time_s:.3f}"])


def write_history_json(history: TrainHistory, path, extra: dict | None = None) -> None:
    payload = {
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "epochs": [asdict(r) for r in history.epochs],
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
