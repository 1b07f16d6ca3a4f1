"""Neural Cleanse: pixel-space mask/pattern inversion used as the baseline.

    x~ = (1 - m) * x + m * t,   minimize CE(model(x~), y_t) + cost * |m|_1

with the usual cost schedule: after ``patience`` consecutive steps at or
above the success rate the cost is multiplied by 1.5, after ``patience``
below it the cost is divided by 1.5 ** 1.5.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DefenseSet, ImageBatch, render_png
from .errors import ParameterError, TForgeError
from .inversion import InversionReport, LabelResult, LossLog
from .metrics import compute_asr
from .models import SplitModel, freeze

log = logging.getLogger(__name__)

_EPS = 1e-7


class NCCostSchedule:
    def __init__(self, init_cost: float = 1e-3, patience: int = 5, success: float = 0.99,
                 up: float = 1.5, down: float = 1.5**1.5):
        self.cost = init_cost
        self.patience = patience
        self.success = success
        self.up, self.down = up, down
        self.up_count = 0
        self.down_count = 0
        self.raised = False

    def update(self, asr: float) -> float:
        if asr >= self.success:
            self.up_count += 1
            self.down_count = 0
        else:
            self.down_count += 1
            self.up_count = 0
        if self.up_count >= self.patience:
            self.up_count = 0
            self.cost *= self.up
            self.raised = True
        elif self.down_count >= self.patience:
            self.down_count = 0
            self.cost /= self.down
        return self.cost


@dataclass
class NCConfig:
    steps: int = 1000
    lr: float = 0.1
    init_cost: float = 1e-3
    success: float = 0.99
    patience: int = 5
    early_stop_patience: int = 25
    seed: int = 0


class NCHypothesis(nn.Module):
    def __init__(self, image_shape, target_label: int, generator=None):
        super().__init__()
        c, h, w = image_shape
        self.target_label = int(target_label)
        self.mask_tanh = nn.Parameter(torch.rand(1, h, w, generator=generator) * 2 - 1)
        self.pattern_tanh = nn.Parameter(torch.rand(c, h, w, generator=generator) * 2 - 1)

    @property
    def mask(self):
        return torch.tanh(self.mask_tanh) / (2 + _EPS) + 0.5

    @property
    def pattern(self):
        return torch.tanh(self.pattern_tanh) / (2 + _EPS) + 0.5

    def forward(self, x):
        m = self.mask
        return ((1 - m) * x + m * self.pattern).clamp(0.0, 1.0)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save({"mask": self.mask.detach(), "pattern": self.pattern.detach(),
                    "target_label": self.target_label}, directory / "hypothesis.pt")
        return directory


def nc_invert_for_label(model: SplitModel, defense, y_t: int, config: NCConfig | None = None,
                        eval_set: ImageBatch | None = None, log_path=None):
    """Returns ``(NCHypothesis, LabelResult, LossLog)``; ASR-Inv measured like the unified engine."""
    cfg = config or NCConfig()
    samples = defense.samples if isinstance(defense, DefenseSet) else defense
    x, labels = samples.pixels, samples.labels
    if len(x) < 1:
        raise ParameterError("empty defense set")
    freeze(model)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    hyp = NCHypothesis(model.input_shape, y_t, gen)
    opt = torch.optim.Adam(hyp.parameters(), lr=cfg.lr, betas=(0.5, 0.9))
    cost = NCCostSchedule(cfg.init_cost, cfg.patience, cfg.success)
    y = torch.full((len(x),), y_t, dtype=torch.long)
    others = labels != y_t
    losslog = LossLog(log_path)
    best_norm, best_state, best_step, best_asr = float("inf"), None, -1, 0.0
    fb_asr, fb_state, fb_step, fb_norm = -1.0, None, -1, 0.0
    stale = 0
    t0 = time.time()
    step = 0
    try:
        for step in range(cfg.steps):
            logits = model(hyp(x))
            ce = F.cross_entropy(logits, y)
            norm = hyp.mask.sum()
            total = ce + cost.cost * norm
            asr = (logits.argmax(1)[others] == y_t).float().mean().item() if others.any() else 1.0
            losslog.add({"step": step, "classification": ce.item(), "reconstruction": 0.0, "mask": norm.item(),
                         "ssim": 0.0, "dis": 0.0, "dis_ce": 0.0, "inter_size": 0.0, "w1": 0.0, "w2": cost.cost,
                         "w3": 0.0, "w4": 0.0, "total": total.item(), "asr_defense": asr})
            if asr >= cfg.success and norm.item() < best_norm:
                improved = norm.item() < 0.99 * best_norm
                best_norm, best_state, best_step, best_asr = norm.item(), {k: v.clone() for k, v in hyp.state_dict().items()}, step, asr
                stale = 0 if improved else stale + 1
            elif best_state is not None:
                stale += 1
            if best_state is None and asr > fb_asr:
                fb_asr, fb_state, fb_step, fb_norm = asr, {k: v.clone() for k, v in hyp.state_dict().items()}, step, norm.item()
            if cost.raised and stale >= cfg.early_stop_patience:
                break
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            cost.update(asr)
    finally:
        losslog.close()

    met = best_state is not None
    hyp.load_state_dict(best_state if met else fb_state)
    result = LabelResult(
        label=int(y_t),
        engine="nc",
        asr_defense=best_asr if met else fb_asr,
        residuals={"mask": best_norm if met else fb_norm},
        constraints_unmet=not met,
        best_step=best_step if met else fb_step,
        steps_run=step + 1,
        seconds=time.time() - t0,
    )
    if eval_set is not None:
        with torch.no_grad():
            result.asr_inv = compute_asr(model, hyp, eval_set, y_t)
    log.info("nc label %d: asr_def=%.3f asr_inv=%s mask=%.1f", y_t, result.asr_defense, result.asr_inv,
             result.residuals["mask"])
    return hyp, result, losslog


def _nc_label(args):
    model, defense, label, cfg, eval_set, out_dir = args
    try:
        label_dir = Path(out_dir) / f"label_{label}" if out_dir is not None else None
        hyp, row, _ = nc_invert_for_label(model, defense, label, cfg, eval_set,
                                          log_path=label_dir / "loss.csv" if label_dir else None)
        if label_dir is not None:
            samples = defense.samples if isinstance(defense, DefenseSet) else defense
            hyp.save(label_dir)
            render_png(hyp.mask.detach().expand(hyp.pattern.shape), label_dir / "mask.png", grid=True)
            render_png(hyp.pattern.detach(), label_dir / "pattern.png", grid=True)
            with torch.no_grad():
                render_png(hyp(samples.pixels[:16]), label_dir / "triggered.png", grid=True)
            row.artifacts = str(label_dir)
            (label_dir / "row.json").write_text(json.dumps(asdict(row), indent=2))
        return row
    except (TForgeError, RuntimeError, ValueError) as exc:
        log.error("nc label %d failed: %s", label, exc)
        return LabelResult(label=int(label), engine="nc", error=f"{type(exc).__name__}: {exc}")


def nc_scan(model: SplitModel, defense, config: NCConfig | None = None, eval_set: ImageBatch | None = None,
            labels=None, jobs: int = 1, out_dir=None) -> InversionReport:
    cfg = config or NCConfig()
    labels = list(range(model.num_classes)) if labels is None else list(labels)
    work = [(model, defense, y, cfg, eval_set, out_dir) for y in labels]
    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_nc_label, work))
    else:
        rows = [_nc_label(w) for w in work]
    return InversionReport(rows, "nc", {"nc": asdict(cfg)})
