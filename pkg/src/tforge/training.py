"""Supervised training, ASR-Inj / benign-accuracy evaluation and checkpoint I/O."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import attacks
from .data import ImageBatch
from .errors import EvaluationError, TrainingError, UsageError
from .models import SplitModel, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True
    # fraction of each batch triggered on the fly for training-controlled attacks
    inject_fraction: float = 0.1

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    state_dict: dict
    arch: str
    num_classes: int
    input_shape: tuple
    split_layer: str
    config_digest: str
    metrics: dict = field(default_factory=dict)
    trigger: str = "clean"

    def meta(self) -> dict:
        return {
            "arch": self.arch,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "split_layer": self.split_layer,
            "config_digest": self.config_digest,
            "metrics": self.metrics,
            "trigger": self.trigger,
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict, directory / "params.pt")
        (directory / "meta.json").write_text(json.dumps(self.meta(), indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        for name in ("params.pt", "meta.json"):
            if not (directory / name).is_file():
                raise UsageError(f"checkpoint file missing: {directory / name}")
        meta = json.loads((directory / "meta.json").read_text())
        state = torch.load(directory / "params.pt", map_location="cpu", weights_only=True)
        return cls(
            state,
            meta["arch"],
            meta["num_classes"],
            tuple(meta["input_shape"]),
            meta["split_layer"],
            meta["config_digest"],
            meta.get("metrics", {}),
            meta.get("trigger", "clean"),
        )

    def model(self) -> SplitModel:
        m = build_model(self.arch, self.num_classes, self.input_shape)
        m.load_state_dict(self.state_dict)
        m.eval()
        return m


def _augment(x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=g) < 0.5
    x = torch.where(flip.view(-1, 1, 1, 1), x.flip(3), x)
    padded = F.pad(x, (4, 4, 4, 4), mode="reflect")
    dy = torch.randint(0, 9, (n,), generator=g)
    dx = torch.randint(0, 9, (n,), generator=g)
    out = torch.empty_like(x)
    for i in range(n):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def train(
    model: SplitModel,
    data: ImageBatch,
    config: TrainConfig,
    spec: attacks.TriggerSpec | None = None,
) -> Checkpoint:
    """Momentum SGD with cosine decay.

    For training-controlled attacks (``spec.training_controlled``) a fraction
    ``config.inject_fraction`` of each batch is replaced on the fly by
    triggered copies relabeled to the target. Statically poisoned data should
    be passed in already poisoned, with ``spec`` given only for bookkeeping.
    """
    torch.manual_seed(config.seed)
    g = torch.Generator().manual_seed(config.seed)
    n = len(data)
    triggered = None
    if spec is not None and spec.training_controlled:
        # the trigger is a pure function of the image, so precomputing is equivalent to on-the-fly
        triggered = attacks.apply(spec, data.pixels)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = max(1, config.epochs * steps_per_epoch)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n, generator=g)
        running, seen = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            x, y = data.pixels[idx], data.labels[idx].clone()
            if triggered is not None:
                pick = torch.rand(len(idx), generator=g) < config.inject_fraction
                if pick.any():
                    x = x.clone()
                    x[pick] = triggered[idx[pick]]
                    y[pick] = spec.target_label
            if config.augment:
                x = _augment(x, g)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(idx)
            seen += len(idx)
        log.info("epoch %d loss %.4f", epoch, running / max(seen, 1))
    model.eval()
    return Checkpoint(
        {k: v.detach().clone() for k, v in model.state_dict().items()},
        model.arch,
        model.num_classes,
        model.input_shape,
        model.split_layer,
        config.digest(),
        {},
        spec.family if spec is not None else "clean",
    )


@torch.no_grad()
def predict(model: nn.Module, pixels: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    model.eval()
    out = [model(pixels[i : i + batch_size]).argmax(1) for i in range(0, len(pixels), batch_size)]
    return torch.cat(out)


def evaluate(model: nn.Module, test: ImageBatch, spec: attacks.TriggerSpec | None = None):
    """Return ``(benign_acc, asr_inj)``; ``asr_inj`` is None without a spec.

    ASR-Inj counts only samples whose true label differs from the target.
    """
    pred = predict(model, test.pixels)
    acc = (pred == test.labels).float().mean().item()
    if spec is None:
        return acc, None
    eligible = test.exclude_label(spec.target_label)
    if eligible is None:
        raise EvaluationError(f"every test sample has the target label {spec.target_label}")
    hit = predict(model, attacks.apply(spec, eligible.pixels)) == spec.target_label
    return acc, hit.float().mean().item()
