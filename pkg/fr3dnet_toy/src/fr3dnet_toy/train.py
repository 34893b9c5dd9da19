"""Training, feature extraction and gallery fine-tuning.

The recipe: SGD over softmax log-loss, mini-batches of 20, learning rate
0.01 dropped by 10x every 10 epochs, L2 weight decay, 50 epochs, 90/10
train/validation split stratified by identity. Dropout is active only in
training; inference and feature extraction run with it removed.
Fine-tuning freezes everything except a freshly-sized final layer.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import DataTooSmall, ImageDataset, stratified_split
from .net import FEATURE_DIM, GeometryImageNet, NetSpec, build_model, replace_classifier


class DivergedLoss(Exception):
    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


class FrozenViolation(Exception):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 20
    learning_rate: float = 0.01
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    epochs: int = 50
    weight_decay: float = 5e-4
    momentum: float = 0.0
    train_fraction: float = 0.9
    seed: int = 0
    early_stop_train_acc: float | None = None


@dataclass
class TrainResult:
    model: GeometryImageNet
    history: list[dict] = field(default_factory=list)

    def save_metrics(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.history, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@torch.no_grad()
def _accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor,
              batch: int = 64) -> float:
    model.eval()
    hits = 0
    for start in range(0, len(labels), batch):
        logits = model(images[start:start + batch])
        hits += int((logits.argmax(dim=1) == labels[start:start + batch]).sum())
    return hits / len(labels)


def train(dataset: ImageDataset, spec: NetSpec, cfg: TrainConfig) -> TrainResult:
    """Full training run; per-epoch train/val accuracy in the history.

    Raises DataTooSmall below 2 identities or 2 scans per identity, and
    DivergedLoss (carrying the last good checkpoint) on NaN loss.
    """
    labels = dataset.labels
    counts = torch.bincount(labels)
    if len(counts) < 2 or int(counts.min()) < 2:
        raise DataTooSmall("need >= 2 identities and >= 2 scans per identity")
    if spec.n_classes != dataset.n_classes:
        raise ValueError(f"spec has {spec.n_classes} classes, "
                         f"data has {dataset.n_classes}")

    torch.manual_seed(cfg.seed)
    model = build_model(spec, seed=cfg.seed)
    train_idx, val_idx = stratified_split(labels, cfg.train_fraction, cfg.seed)
    x_train, y_train = dataset.images[train_idx], labels[train_idx]
    x_val, y_val = dataset.images[val_idx], labels[val_idx]
    with torch.no_grad():
        model.input_mean.copy_(x_train.mean(dim=(0, 2, 3)).reshape(3, 1, 1))

    loss_fn = nn.CrossEntropyLoss()
    history: list[dict] = []
    rng = np.random.default_rng(cfg.seed)
    last_good = copy.deepcopy(model.state_dict())

    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        optimizer = torch.optim.SGD(model.parameters(), lr=lr,
                                    momentum=cfg.momentum,
                                    weight_decay=cfg.weight_decay)
        model.train()
        order = rng.permutation(len(y_train))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model(x_train[rows]), y_train[rows])
            if not torch.isfinite(loss):
                raise DivergedLoss(f"loss became non-finite in epoch {epoch}",
                                   checkpoint=last_good, history=history)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(rows)

        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_loss / len(y_train),
            "train_acc": _accuracy(model, x_train, y_train),
            "val_acc": _accuracy(model, x_val, y_val) if len(y_val) else None,
            "seed": cfg.seed,
        }
        history.append(record)
        last_good = copy.deepcopy(model.state_dict())
        if (cfg.early_stop_train_acc is not None
                and record["train_acc"] >= cfg.early_stop_train_acc):
            break

    model.eval()
    return TrainResult(model=model, history=history)


@torch.no_grad()
def extract_features(model: GeometryImageNet, images: torch.Tensor,
                     batch: int = 64) -> np.ndarray:
    """(N, 1024) float32 embeddings; dropout disabled, deterministic."""
    model.eval()
    chunks = [model.embed(images[start:start + batch]).numpy()
              for start in range(0, len(images), batch)]
    out = np.concatenate(chunks, axis=0).astype(np.float32)
    assert out.shape[1] == FEATURE_DIM
    return out


def fine_tune(model: GeometryImageNet, gallery: ImageDataset, n_classes: int,
              cfg: TrainConfig) -> GeometryImageNet:
    """New final layer for n_classes, trained with everything else frozen.

    The freeze is verified bit-exactly; any drift in a non-final tensor
    raises FrozenViolation.
    """
    tuned = copy.deepcopy(model)
    replace_classifier(tuned, n_classes, seed=cfg.seed)
    frozen_before = {name: tensor.clone()
                     for name, tensor in tuned.state_dict().items()
                     if not name.startswith("classifier.")}
    for name, param in tuned.named_parameters():
        param.requires_grad_(name.startswith("classifier."))

    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(cfg.seed)
    x, y = gallery.images, gallery.labels
    for epoch in range(cfg.epochs):
        optimizer = torch.optim.SGD(tuned.classifier.parameters(),
                                    lr=_epoch_lr(cfg, epoch),
                                    momentum=cfg.momentum,
                                    weight_decay=cfg.weight_decay)
        tuned.train()
        order = rng.permutation(len(y))
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(tuned(x[rows]), y[rows])
            if not torch.isfinite(loss):
                raise DivergedLoss(f"fine-tune loss non-finite in epoch {epoch}")
            loss.backward()
            optimizer.step()

    tuned.eval()
    verify_frozen(frozen_before, tuned.state_dict())
    return tuned


def verify_frozen(frozen_before: dict, after: dict) -> None:
    """Bit-exact check that no frozen tensor drifted during fine-tuning."""
    for name, before in frozen_before.items():
        if not torch.equal(before, after[name]):
            raise FrozenViolation(f"non-final tensor {name} changed")
