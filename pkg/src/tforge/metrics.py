"""ASR, SSIM, activation cosine similarity and detection tabulation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .data import ImageBatch
from .errors import EvaluationError, ParameterError, UsageError

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_per_image(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """SSIM of each image pair, channel-averaged. Differentiable.

    Gaussian-weighted statistics over 'valid' windows on a [0, 1] dynamic
    range. Images smaller than ``window`` use the largest odd window that fits.
    """
    if a.shape != b.shape:
        raise ParameterError(f"SSIM shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    n, c, h, w = a.shape
    size = min(window, h, w)
    if size % 2 == 0:
        size -= 1
    kernel = gaussian_window(size, sigma, a.dtype).to(a.device).expand(c, 1, size, size)
    c1, c2 = SSIM_K1**2, SSIM_K2**2

    def filt(z):
        return F.conv2d(z, kernel, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return (num / den).mean(dim=(1, 2, 3))


def compute_ssim(a, b, **kw) -> float:
    """Batch-mean SSIM between two :class:`ImageBatch` (or tensors)."""
    a = a.pixels if isinstance(a, ImageBatch) else a
    b = b.pixels if isinstance(b, ImageBatch) else b
    with torch.no_grad():
        return ssim_per_image(a.double(), b.double(), **kw).mean().item()


@torch.no_grad()
def compute_asr(model, trigger_fn: Callable, eval_set: ImageBatch, y_t: int, batch_size: int = 256) -> float:
    """Fraction of triggered samples (true label != ``y_t``) classified as ``y_t``."""
    eligible = eval_set.exclude_label(y_t)
    if eligible is None:
        raise EvaluationError(f"no evaluation samples outside target label {y_t}")
    model.eval()
    hits = 0
    for i in range(0, len(eligible), batch_size):
        x = trigger_fn(eligible.pixels[i : i + batch_size])
        hits += int((model(x).argmax(1) == y_t).sum())
    return hits / len(eligible)


@torch.no_grad()
def compute_sim(model, injected_fn: Callable, inverted_fn: Callable, eval_set: ImageBatch, batch_size: int = 256) -> float:
    """Mean cosine similarity of split-layer activations under the two triggers."""
    model.eval()
    sims = []
    skipped = 0
    for i in range(0, len(eval_set), batch_size):
        x = eval_set.pixels[i : i + batch_size]
        a = model.h(injected_fn(x)).flatten(1).double()
        b = model.h(inverted_fn(x)).flatten(1).double()
        na, nb = a.norm(dim=1), b.norm(dim=1)
        ok = (na > 0) & (nb > 0)
        skipped += int((~ok).sum())
        sims.append(((a * b).sum(1)[ok] / (na[ok] * nb[ok])))
    if skipped:
        log.warning("compute_sim skipped %d samples with all-zero activations", skipped)
    sims = torch.cat(sims)
    if len(sims) == 0:
        raise EvaluationError("every sample produced an all-zero activation")
    return sims.mean().item()


@dataclass
class ScanSummary:
    verdicts: list
    ground_truth: list
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    asr_inv_means: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self, title: str = "") -> str:
        head = f"{'TP':>4} {'FP':>4} {'FN':>4} {'TN':>4} {'Acc':>7}"
        row = f"{self.tp:>4} {self.fp:>4} {self.fn:>4} {self.tn:>4} {100 * self.accuracy:>6.1f}%"
        lines = [title] if title else []
        lines += [head, row]
        for k, v in sorted(self.asr_inv_means.items()):
            lines.append(f"ASR-Inv[{k}] = {100 * v:.2f}%")
        for k, v in sorted(self.sim.items()):
            lines.append(f"SIM[{k}] = {v:.3f}")
        return "\n".join(lines)


def tabulate_detection(verdicts, ground_truth, asr_inv_means=None, sim=None) -> ScanSummary:
    """Confusion counts for per-model verdicts (True = flagged backdoored)."""
    verdicts, ground_truth = [bool(v) for v in verdicts], [bool(v) for v in ground_truth]
    if len(verdicts) != len(ground_truth):
        raise UsageError(f"{len(verdicts)} verdicts vs {len(ground_truth)} ground-truth labels")
    if not verdicts:
        raise UsageError("nothing to tabulate")
    tp = sum(v and t for v, t in zip(verdicts, ground_truth))
    fp = sum(v and not t for v, t in zip(verdicts, ground_truth))
    fn = sum(t and not v for v, t in zip(verdicts, ground_truth))
    tn = sum(not v and not t for v, t in zip(verdicts, ground_truth))
    return ScanSummary(verdicts, ground_truth, tp, fp, fn, tn, (tp + tn) / len(verdicts), asr_inv_means or {}, sim or {})
