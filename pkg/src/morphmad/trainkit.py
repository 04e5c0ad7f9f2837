"""Shared training loop: Adam, class weighting, early stopping on dev loss."""

from __future__ import annotations

import copy
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 20
    min_delta: float = 0.0
    seed: int = 0
    class_weighting: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_json(cls, d) -> TrainConfig:
        return cls(**d)

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ImageSplit:
    """Preprocessed images of one split. ``labels``: 1 attack, 0 bona fide."""

    images: torch.Tensor
    labels: torch.Tensor
    tag: str
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_apcer: float
    dev_bpcer: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_jsonl(self) -> str:
        lines = []
        for e in self.epochs:
            rec = asdict(e)
            rec["best"] = e.epoch == self.best_epoch
            lines.append(json.dumps(rec, sort_keys=True))
        lines.append(json.dumps({"best_epoch": self.best_epoch, "stopped_early": self.stopped_early}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def compute_class_weights(labels: Sequence) -> tuple[float, float]:
    """(w_attack, w_bonafide), inversely proportional to class frequency, mean 1.

    ``labels`` may hold 0/1 ints, label strings or SampleRecords.
    """
    flags = []
    for y in labels:
        if hasattr(y, "label"):
            y = y.label
        flags.append(y == "attack" if isinstance(y, str) else bool(int(y)))
    n_att = sum(flags)
    n_bf = len(flags) - n_att
    if n_att == 0 or n_bf == 0:
        raise ValueError("class weights need both attacks and bona fides in the training split")
    inv_att, inv_bf = 1.0 / n_att, 1.0 / n_bf
    s = (inv_att + inv_bf) / 2.0
    return inv_att / s, inv_bf / s


def _batches(n, batch_size, generator):
    perm = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


@torch.no_grad()
def evaluate(model, split: ImageSplit, batch_size: int = 64):
    """Mean unweighted loss and scores over a split, in eval mode."""
    model.eval()
    total, scores = 0.0, []
    for i in range(0, len(split), batch_size):
        x = split.images[i : i + batch_size]
        y = split.labels[i : i + batch_size]
        out = model(x)
        total += float(model.compute_loss(out, y)) * len(y)
        scores.append(model.predict_score(out).double().numpy())
    return total / len(split), np.concatenate(scores)


def _error_rates(scores, labels, tau=0.5):
    labels = np.asarray(labels)
    att = scores[labels == 1]
    bf = scores[labels == 0]
    apcer = float(np.mean(att < tau)) if len(att) else float("nan")
    bpcer = float(np.mean(bf >= tau)) if len(bf) else float("nan")
    return apcer, bpcer


def train(
    model,
    train_split: ImageSplit,
    dev_split: ImageSplit,
    config: TrainConfig,
    parameters=None,
    on_batch: Callable[[str, torch.Tensor], None] | None = None,
):
    """Optimise ``model.compute_loss`` on the train split only.

    The model must provide ``forward``, ``compute_loss(output, labels,
    weights)`` and ``predict_score(output)``. Only ``parameters`` (default:
    all trainable ones) are handed to Adam. Returns the best-epoch state dict
    (already loaded into ``model``) and the TrainLog.
    """
    if train_split.tag != "train":
        raise ValueError(f"gradient steps must use the train split, got {train_split.tag!r}")
    if len(dev_split) == 0:
        raise ValueError("dev split is empty")

    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    params = [p for p in (parameters if parameters is not None else model.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)

    if config.class_weighting:
        w_att, w_bf = compute_class_weights(train_split.labels.tolist())
    else:
        w_att = w_bf = 1.0
    sample_w = torch.where(train_split.labels == 1, w_att, w_bf).to(torch.float64)

    log = TrainLog()
    best_loss, best_state, stale = math.inf, None, 0
    for epoch in range(config.max_epochs):
        model.train()
        running, seen = 0.0, 0
        for idx in _batches(len(train_split), config.batch_size, gen):
            if on_batch is not None:
                on_batch(train_split.tag, idx)
            x = train_split.images[idx]
            y = train_split.labels[idx]
            out = model(x)
            loss = model.compute_loss(out, y, sample_w[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch of {len(idx)}: {loss}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)

        dev_loss, dev_scores = evaluate(model, dev_split)
        if not math.isfinite(dev_loss):
            raise TrainingDiverged(f"non-finite dev loss at epoch {epoch}")
        apcer, bpcer = _error_rates(dev_scores, dev_split.labels.numpy())
        log.epochs.append(EpochRecord(epoch, running / seen, dev_loss, apcer, bpcer))
        logger.debug("epoch %d train %.5f dev %.5f", epoch, running / seen, dev_loss)

        if dev_loss < best_loss - config.min_delta:
            best_loss, stale = dev_loss, 0
            log.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                log.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return best_state, log
