"""Unified trigger inversion.

For a target label the engine jointly learns an image-to-image pair
``P``/``Q`` (a transform into some input space and back), a mask ``m`` and
pattern ``t`` living in that space, and a mask ``m'`` over the model's
split-layer activations. Triggered inputs are

    x~ = Q((1 - m) * P(x) + m * t)

and the optimization drives ``model(x~)`` to the target label while keeping
``Q(P(x))`` close to ``x``, the mask small, ``x~`` structurally similar to
``x``, and the target prediction recoverable from ``m' * h(x~)`` no matter
which clean activations fill the rest. Constraint weights are switched
between a large and a zero value depending on whether each constraint holds.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DefenseSet, ImageBatch, render_png
from .errors import ConfigError, InversionError, ParameterError, TForgeError
from .metrics import compute_asr, ssim_per_image
from .models import SplitModel, freeze

log = logging.getLogger(__name__)

TERMS = ("reconstruction", "mask", "ssim", "dis")
W_LARGE = (200.0, 10.0, 10.0, 1.0)
W_SMALL = (0.0, 0.0, 0.0, 0.0)
DETECTION_THRESHOLD = 0.90


@dataclass
class ConstraintBudget:
    alpha: float = 0.01
    beta_fraction: float = 0.10
    gamma: float = 0.85
    delta: float = 0.5
    inter_mask_fraction: float = 0.10
    # absolute budgets, filled by resolve() once mask shapes are known
    beta_abs: float | None = None
    inter_abs: float | None = None

    def __post_init__(self):
        for name in ("alpha", "beta_fraction", "gamma", "delta", "inter_mask_fraction"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"budget {name} must be positive, got {getattr(self, name)}")
        for name in ("beta_fraction", "inter_mask_fraction"):
            if getattr(self, name) > 1:
                raise ConfigError(f"budget {name} must be in (0, 1], got {getattr(self, name)}")

    def resolve(self, mask_numel: int, inter_numel: int) -> "ConstraintBudget":
        return replace(self, beta_abs=self.beta_fraction * mask_numel, inter_abs=self.inter_mask_fraction * inter_numel)


@dataclass(frozen=True)
class SchedulerState:
    weights: tuple = W_LARGE
    w_large: tuple = W_LARGE
    w_small: tuple = W_SMALL
    satisfied: tuple = (False, False, False, False)
    enabled: tuple = (True, True, True, True)


def violations(residuals, budget: ConstraintBudget) -> tuple[bool, bool, bool, bool]:
    """Which of (reconstruction, mask size, SSIM, disentanglement) are violated."""
    if budget.beta_abs is None:
        raise ParameterError("budget must be resolve()d against the mask shape first")
    rec, msize, ssim, dis = (float(r) for r in residuals)
    return (rec >= budget.alpha, msize >= budget.beta_abs, ssim <= budget.gamma, dis >= budget.delta)


def scheduler_step(sched: SchedulerState, residuals, budget: ConstraintBudget) -> SchedulerState:
    """Large weight for every violated constraint, small weight otherwise. Stateless."""
    bad = violations(residuals, budget)
    weights = tuple(
        (wl if b else ws) if on else 0.0 for b, wl, ws, on in zip(bad, sched.w_large, sched.w_small, sched.enabled)
    )
    return replace(sched, weights=weights, satisfied=tuple(not b for b in bad))


def all_satisfied(sched: SchedulerState) -> bool:
    return all(s or not on for s, on in zip(sched.satisfied, sched.enabled))


def combine_losses(classification, reconstruction, mask, ssim, dis, weights):
    w1, w2, w3, w4 = weights
    return classification + w1 * reconstruction + w2 * mask - w3 * ssim + w4 * dis


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.1, inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.LeakyReLU(0.1, inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a global residual.

    The output convolution starts at zero, so a fresh UNet is the identity map.
    """

    def __init__(self, channels: int = 3, width: int = 16, depth: int = 3):
        super().__init__()
        widths = [width * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        prev = channels
        for w in widths[:-1]:
            self.down.append(_block(prev, w))
            prev = w
        self.mid = _block(prev, widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        prev = widths[-1]
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(prev, w, 2, stride=2))
            self.dec.append(_block(2 * w, w))
            prev = w
        self.out = nn.Conv2d(prev, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.depth = depth

    def forward(self, x):
        skips = []
        z = x
        for blk in self.down:
            z = blk(z)
            skips.append(z)
            z = F.max_pool2d(z, 2)
        z = self.mid(z)
        for up, dec in zip(self.up, self.dec):
            z = dec(torch.cat([up(z), skips.pop()], dim=1))
        return x + self.out(z)


class TransformPair(nn.Module):
    def __init__(self, P: nn.Module, Q: nn.Module):
        super().__init__()
        self.P = P
        self.Q = Q

    @classmethod
    def unet(cls, channels=3, width=16, depth=3) -> "TransformPair":
        return cls(UNet(channels, width, depth), UNet(channels, width, depth))

    @classmethod
    def identity(cls) -> "TransformPair":
        return cls(nn.Identity(), nn.Identity())


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


class InversionHypothesis(nn.Module):
    """Learnable transform pair, input-space mask/pattern and activation mask for one label.

    Masks are sigmoids of free logits; the pattern is a sigmoid too, so all
    three live in [0, 1] without projection.
    """

    def __init__(self, transform: TransformPair, mask_shape, pattern_shape, inter_shape, target_label: int,
                 mask_init: float = 0.05, inter_init: float = 0.10, generator: torch.Generator | None = None):
        super().__init__()
        self.transform = transform
        self.target_label = int(target_label)
        self.mask_logit = nn.Parameter(torch.full(tuple(mask_shape), _logit(mask_init)))
        u = torch.rand(tuple(pattern_shape), generator=generator) * 0.9 + 0.05
        self.pattern_logit = nn.Parameter(torch.log(u / (1 - u)))
        self.inter_logit = nn.Parameter(torch.full(tuple(inter_shape), _logit(inter_init)))

    @property
    def mask(self):
        return torch.sigmoid(self.mask_logit)

    @property
    def pattern(self):
        return torch.sigmoid(self.pattern_logit)

    @property
    def inter_mask(self):
        return torch.sigmoid(self.inter_logit)

    def set_mask(self, value: float):
        with torch.no_grad():
            self.mask_logit.fill_(_logit(value) if 0 < value < 1 else (-math.inf if value <= 0 else math.inf))
        return self

    def net_parameters(self):
        return list(self.transform.parameters())

    def mask_parameters(self):
        return [self.mask_logit, self.pattern_logit, self.inter_logit]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "transform": self.transform.state_dict(),
                "mask": self.mask.detach(),
                "pattern": self.pattern.detach(),
                "inter_mask": self.inter_mask.detach(),
                "target_label": self.target_label,
            },
            directory / "hypothesis.pt",
        )
        return directory

    def load_tensors(self, path) -> "InversionHypothesis":
        """Restore a state written by :meth:`save` into a hypothesis of matching shapes."""
        path = Path(path)
        if not path.is_file():
            raise ParameterError(f"hypothesis file missing: {path}")
        doc = torch.load(path, map_location="cpu", weights_only=True)
        self.transform.load_state_dict(doc["transform"])
        eps = 1e-6
        with torch.no_grad():
            for name, key in (("mask_logit", "mask"), ("pattern_logit", "pattern"), ("inter_logit", "inter_mask")):
                getattr(self, name).copy_(torch.logit(doc[key].clamp(eps, 1 - eps)))
        return self


def synthesize(x, hyp: InversionHypothesis) -> torch.Tensor:
    """Stamp the hypothesised trigger on ``x`` (tensor or ImageBatch); output clamped to [0, 1]."""
    px = x.pixels if isinstance(x, ImageBatch) else x
    return _stamp_in_space(hyp.transform.P(px), hyp)


def _stamp_in_space(p, hyp: InversionHypothesis) -> torch.Tensor:
    m = hyp.mask
    if m.shape[-2:] != p.shape[-2:] or hyp.pattern.shape[-2:] != p.shape[-2:]:
        raise ParameterError(f"mask {tuple(m.shape)} / pattern {tuple(hyp.pattern.shape)} do not fit {tuple(p.shape)}")
    return hyp.transform.Q((1 - m) * p + m * hyp.pattern).clamp(0.0, 1.0)


def loss_reconstruction(x, transform: TransformPair) -> torch.Tensor:
    """Mean absolute error of ``Q(P(x))`` against ``x``."""
    return (transform.Q(transform.P(x)) - x).abs().mean()


def loss_mask(m: torch.Tensor) -> torch.Tensor:
    return m.abs().sum()


loss_mask_inter = loss_mask


def derangement(n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Random permutation of ``range(n)`` with no fixed point (n >= 2)."""
    if n < 2:
        raise ParameterError("a derangement needs at least two samples")
    while True:
        perm = torch.randperm(n, generator=generator)
        if not (perm == torch.arange(n)).any():
            return perm


def disentanglement_terms(x_tilde, x_prime, hyp: InversionHypothesis, model: SplitModel, feats=None):
    """Return ``(classification term, ||m'||)`` for the composite activation."""
    if len(x_prime) < 2:
        raise ParameterError("disentanglement needs at least two samples to pair")
    mp = hyp.inter_mask
    a_c = mp * (model.h(x_tilde) if feats is None else feats)
    # h(x') depends on nothing being optimized unless x' itself carries gradients
    with torch.set_grad_enabled(torch.is_grad_enabled() and x_prime.requires_grad):
        h_prime = model.h(x_prime)
    a_b = (1 - mp) * h_prime
    y = torch.full((len(x_tilde),), hyp.target_label, dtype=torch.long)
    return F.cross_entropy(model.g(a_c + a_b), y), loss_mask_inter(mp)


def loss_disentanglement(x, x_prime, hyp: InversionHypothesis, model: SplitModel, size_scale: float = 1.0):
    px = x.pixels if isinstance(x, ImageBatch) else x
    if len(px) < 2:
        raise ParameterError("disentanglement needs at least two samples to pair")
    ce, size = disentanglement_terms(synthesize(px, hyp), x_prime, hyp, model)
    return ce + size_scale * size


def loss_total(x, x_prime, hyp: InversionHypothesis, model: SplitModel, sched: SchedulerState,
               budget: ConstraintBudget | None = None):
    """Weighted inversion objective. Returns ``(total, diagnostics)``.

    Diagnostics hold every raw term as floats. The activation-mask size is
    measured in units of its budget when ``budget`` is given.
    """
    px = x.pixels if isinstance(x, ImageBatch) else x
    terms = compute_terms(px, x_prime, hyp, model, budget)
    total = combine_losses(terms["classification"], terms["reconstruction"], terms["mask"], terms["ssim"],
                           terms["dis"], sched.weights)
    diag = {k: float(v.detach()) for k, v in terms.items() if k != "logits"}
    for name, value in diag.items():
        if not math.isfinite(value):
            raise InversionError(f"non-finite loss term {name!r} = {value}")
    diag["total"] = float(total.detach())
    return total, diag


def compute_terms(x, x_prime, hyp, model, budget=None) -> dict:
    p = hyp.transform.P(x)
    xt = _stamp_in_space(p, hyp)
    feats = model.h(xt)
    logits = model.g(feats)
    y = torch.full((len(x),), hyp.target_label, dtype=torch.long)
    dis_ce, inter_size = disentanglement_terms(xt, x_prime, hyp, model, feats=feats)
    scale = 1.0 / budget.inter_abs if budget is not None and budget.inter_abs else 1.0
    return {
        "classification": F.cross_entropy(logits, y),
        "reconstruction": (hyp.transform.Q(p) - x).abs().mean(),
        "mask": loss_mask(hyp.mask),
        "ssim": ssim_per_image(xt, x).mean(),
        "dis_ce": dis_ce,
        "inter_size": inter_size,
        "dis": dis_ce + scale * inter_size,
        "logits": logits,
    }


def residuals_of(terms: dict) -> tuple[float, float, float, float]:
    return tuple(float(terms[k].detach()) for k in ("reconstruction", "mask", "ssim", "dis_ce"))


@dataclass
class OptConfig:
    steps: int = 2000
    lr_nets: float = 1e-3
    lr_masks: float = 1e-1
    seed: int = 0
    pretrain_steps: int = 200
    # stop after this many consecutive constraint-satisfying steps without ASR improvement
    patience: int = 200
    unet_width: int = 16
    unet_depth: int = 3
    transform: str = "unet"
    mask_layout: str = "full"
    w_large: tuple = W_LARGE
    disabled_terms: tuple = ()
    weight_policy: str = "threshold"
    nc_init_cost: float = 1e-3
    nc_patience: int = 5
    nc_success: float = 0.99

    def __post_init__(self):
        self.w_large = tuple(float(w) for w in self.w_large)
        self.disabled_terms = tuple(self.disabled_terms)
        if self.transform not in ("unet", "identity"):
            raise ConfigError(f"transform must be 'unet' or 'identity', got {self.transform!r}")
        if self.mask_layout not in ("full", "shared"):
            raise ConfigError(f"mask_layout must be 'full' or 'shared', got {self.mask_layout!r}")
        if self.weight_policy not in ("threshold", "nc"):
            raise ConfigError(f"weight_policy must be 'threshold' or 'nc', got {self.weight_policy!r}")
        unknown = set(self.disabled_terms) - set(TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}; expected among {TERMS}")
        if len(self.w_large) != 4:
            raise ConfigError("w_large needs four weights")


@dataclass
class LabelResult:
    label: int
    engine: str = "unicorn"
    asr_inv: float | None = None
    asr_defense: float = 0.0
    residuals: dict = field(default_factory=dict)
    constraints_unmet: bool = True
    best_step: int = -1
    steps_run: int = 0
    seconds: float = 0.0
    pairing: list | None = None
    error: str | None = None
    artifacts: str | None = None

    @property
    def score(self) -> float:
        if self.error is not None:
            return -1.0
        return self.asr_inv if self.asr_inv is not None else self.asr_defense


@dataclass
class InversionReport:
    rows: list
    engine: str = "unicorn"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.score, reverse=True)

    def to_json(self) -> str:
        return json.dumps({"engine": self.engine, "meta": self.meta, "rows": [asdict(r) for r in self.rows]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "InversionReport":
        doc = json.loads(text)
        return cls([LabelResult(**r) for r in doc["rows"]], doc.get("engine", "unicorn"), doc.get("meta", {}))


@dataclass
class Verdict:
    backdoored: bool
    target_label: int | None
    score: float


def decide_backdoor(report: InversionReport, threshold: float = DETECTION_THRESHOLD) -> Verdict:
    """Backdoored iff some label with met constraints has ASR-Inv strictly above ``threshold``."""
    if not report.rows:
        raise ParameterError("empty inversion report")
    ok = [r for r in report.rows if r.error is None and not r.constraints_unmet]
    if not ok:
        return Verdict(False, None, 0.0)
    best = max(ok, key=lambda r: r.score)
    return Verdict(best.score > threshold, best.label if best.score > threshold else None, best.score)


def pretrain_identity(transform: TransformPair, x: torch.Tensor, steps: int, lr: float, tol: float) -> int:
    """Fit P and Q to the identity on ``x``; returns the steps taken (0 if already within ``tol``)."""
    params = list(transform.parameters())
    if not params:
        return 0
    opt = torch.optim.Adam(params, lr=lr)
    for step in range(steps):
        loss = (transform.P(x) - x).abs().mean() + (transform.Q(x) - x).abs().mean()
        if loss.item() < tol:
            return step
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return steps


def build_hypothesis(model: SplitModel, y_t: int, budget: ConstraintBudget, cfg: OptConfig,
                     generator: torch.Generator) -> InversionHypothesis:
    c, h, w = model.input_shape
    if cfg.transform == "unet":
        transform = TransformPair.unet(c, cfg.unet_width, cfg.unet_depth)
    else:
        transform = TransformPair.identity()
    mask_shape = (c, h, w) if cfg.mask_layout == "full" else (1, h, w)
    return InversionHypothesis(
        transform, mask_shape, (c, h, w), model.intermediate_shape, y_t,
        mask_init=min(0.5, budget.beta_fraction / 2), inter_init=budget.inter_mask_fraction, generator=generator,
    )


class LossLog:
    """Per-step CSV of raw terms and weights, kept in memory as well."""

    FIELDS = ["step", "classification", "reconstruction", "mask", "ssim", "dis", "dis_ce", "inter_size",
              "w1", "w2", "w3", "w4", "total", "asr_defense"]

    def __init__(self, path=None):
        self.rows = []
        self._fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=self.FIELDS)
            self._writer.writeheader()

    def add(self, row: dict):
        row = {k: row[k] for k in self.FIELDS}
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def invert_for_label(model: SplitModel, defense, y_t: int, budget: ConstraintBudget | None = None,
                     opt_config: OptConfig | None = None, eval_set: ImageBatch | None = None,
                     log_path=None):
    """Run the constrained optimization for one target label.

    Returns ``(hypothesis, LabelResult, LossLog)``. The returned hypothesis is
    the state with the best defense-set ASR among steps that satisfied every
    enabled constraint; if no step did, the best-ASR state overall with
    ``constraints_unmet=True``. ASR-Inv is measured on ``eval_set`` when given.
    """
    from .nc import NCCostSchedule

    budget = budget or ConstraintBudget()
    cfg = opt_config or OptConfig()
    samples = defense.samples if isinstance(defense, DefenseSet) else defense
    x, labels = samples.pixels, samples.labels
    n = len(x)
    if n < 2:
        raise ParameterError("inversion needs at least two defense samples")
    freeze(model)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    hyp = build_hypothesis(model, y_t, budget, cfg, gen)
    budget = budget.resolve(hyp.mask.numel(), hyp.inter_mask.numel())
    pretrain_identity(hyp.transform, x, cfg.pretrain_steps, cfg.lr_nets, tol=budget.alpha / 10)

    enabled = tuple(t not in cfg.disabled_terms for t in TERMS)
    if cfg.weight_policy == "nc":
        enabled = (False, True, False, False)
        nc_cost = NCCostSchedule(cfg.nc_init_cost, patience=cfg.nc_patience, success=cfg.nc_success)
    sched = SchedulerState(w_large=cfg.w_large, enabled=enabled)
    opt = torch.optim.Adam(
        [{"params": hyp.net_parameters(), "lr": cfg.lr_nets}, {"params": hyp.mask_parameters(), "lr": cfg.lr_masks}],
        betas=(0.5, 0.9),
    )
    others = labels != y_t
    losslog = LossLog(log_path)
    best = {"key": None, "state": None, "step": -1, "res": None, "asr": 0.0, "perm": None}
    fallback = {"asr": -1.0, "state": None, "step": -1, "res": None, "perm": None}
    stale = 0
    t0 = time.time()
    step = 0
    try:
        for step in range(cfg.steps):
            perm = derangement(n, gen)
            terms = compute_terms(x, x[perm], hyp, model, budget)
            res = residuals_of(terms)
            if cfg.weight_policy == "nc":
                sched = replace(scheduler_step(sched, res, budget), weights=(0.0, nc_cost.cost, 0.0, 0.0))
            else:
                sched = scheduler_step(sched, res, budget)
            total = combine_losses(terms["classification"], terms["reconstruction"], terms["mask"], terms["ssim"],
                                   terms["dis"], sched.weights)
            for name in ("classification", "reconstruction", "mask", "ssim", "dis"):
                if not torch.isfinite(terms[name]):
                    raise InversionError(f"non-finite loss term {name!r} at step {step}")
            pred = terms["logits"].argmax(1)
            asr = (pred[others] == y_t).float().mean().item() if others.any() else 1.0
            losslog.add({
                "step": step, **{k: float(terms[k].detach()) for k in ("classification", "reconstruction", "mask", "ssim",
                                                              "dis", "dis_ce", "inter_size")},
                "w1": sched.weights[0], "w2": sched.weights[1], "w3": sched.weights[2], "w4": sched.weights[3],
                "total": float(total.detach()), "asr_defense": asr,
            })

            if cfg.weight_policy == "nc":
                # NC keeps the smallest mask among steps that reach the success rate
                ok = asr >= cfg.nc_success
                key = (-res[1],)
                improved = ok and (best["key"] is None or res[1] < 0.99 * -best["key"][0])
            else:
                ok = all_satisfied(sched)
                key = (asr, -float(terms["classification"].detach()))
                improved = ok and (best["key"] is None or asr > best["asr"])
            if ok and (best["key"] is None or key > best["key"]):
                best.update(key=key, state=copy.deepcopy(hyp.state_dict()), step=step, res=res, asr=asr,
                            perm=perm.tolist())
            if improved:
                stale = 0
            elif ok or (cfg.weight_policy == "nc" and best["key"] is not None):
                stale += 1
            else:
                stale = 0
            if best["key"] is None and asr > fallback["asr"]:
                fallback.update(asr=asr, state=copy.deepcopy(hyp.state_dict()), step=step, res=res,
                                perm=perm.tolist())
            if stale >= cfg.patience:
                break

            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            if cfg.weight_policy == "nc":
                nc_cost.update(asr)
    finally:
        losslog.close()

    chosen = best if best["key"] is not None else fallback
    hyp.load_state_dict(chosen["state"])
    names = ("reconstruction", "mask", "ssim", "dis_ce")
    result = LabelResult(
        label=int(y_t),
        engine="nc-special" if cfg.weight_policy == "nc" else "unicorn",
        asr_defense=chosen["asr"],
        residuals=dict(zip(names, chosen["res"])),
        constraints_unmet=best["key"] is None,
        best_step=chosen["step"],
        steps_run=step + 1,
        seconds=time.time() - t0,
        pairing=chosen["perm"],
    )
    if eval_set is not None:
        with torch.no_grad():
            result.asr_inv = compute_asr(model, lambda z: synthesize(z, hyp), eval_set, y_t)
    log.info("label %d: asr_def=%.3f asr_inv=%s unmet=%s step=%d/%d", y_t, result.asr_defense,
             result.asr_inv, result.constraints_unmet, result.best_step, result.steps_run)
    return hyp, result, losslog


def write_artifacts(hyp: InversionHypothesis, result: LabelResult, defense_x: torch.Tensor, directory) -> Path:
    """Tensors, PNG renders of mask/pattern/triggered samples, and the report row."""
    directory = Path(directory)
    hyp.save(directory)
    m = hyp.mask.detach()
    render_png(m.expand(hyp.pattern.shape) if m.shape[0] == 1 else m, directory / "mask.png", grid=True)
    render_png(hyp.pattern.detach(), directory / "pattern.png", grid=True)
    with torch.no_grad():
        xt = synthesize(defense_x[:16], hyp)
    render_png(xt, directory / "triggered.png", grid=True)
    render_png(defense_x[:16], directory / "original.png", grid=True)
    (directory / "row.json").write_text(json.dumps(asdict(result), indent=2))
    result.artifacts = str(directory)
    return directory


def _run_label(args):
    model, defense, label, budget, cfg, eval_set, out_dir = args
    try:
        label_dir = Path(out_dir) / f"label_{label}" if out_dir is not None else None
        hyp, row, _ = invert_for_label(model, defense, label, budget, cfg, eval_set,
                                       log_path=label_dir / "loss.csv" if label_dir else None)
        if label_dir is not None:
            samples = defense.samples if isinstance(defense, DefenseSet) else defense
            write_artifacts(hyp, row, samples.pixels, label_dir)
        return row
    except (TForgeError, RuntimeError, ValueError) as exc:
        log.error("label %d failed: %s", label, exc)
        return LabelResult(label=int(label), error=f"{type(exc).__name__}: {exc}")


def scan_model(model: SplitModel, defense, budget: ConstraintBudget | None = None,
               opt_config: OptConfig | None = None, eval_set: ImageBatch | None = None,
               labels=None, jobs: int = 1, out_dir=None) -> InversionReport:
    """Invert every label (or ``labels``); rows come back sorted by ASR-Inv, best first."""
    budget = budget or ConstraintBudget()
    cfg = opt_config or OptConfig()
    labels = list(range(model.num_classes)) if labels is None else list(labels)
    work = [(model, defense, y, budget, cfg, eval_set, out_dir) for y in labels]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_label, work))
    else:
        rows = [_run_label(w) for w in work]
    engine = "nc-special" if cfg.weight_policy == "nc" else "unicorn"
    return InversionReport(rows, engine, {"budget": asdict(budget), "opt": asdict(cfg)})
