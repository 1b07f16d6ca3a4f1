"""Ground-truth trigger injectors and dataset poisoning.

Every injector is a pure function of ``(spec, x)``: any randomness (blend
pattern, warp field) is drawn once in :func:`make_spec` and stored in the
spec, so specs can be persisted and replayed exactly.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .data import ImageBatch
from .errors import ParameterError, UsageError

SPEC_VERSION = 1

SPACES = {
    "patch": "pixel",
    "blend": "pixel",
    "sig": "pixel",
    "filter1977": "signal",
    "filterKelvin": "signal",
    "filterMoon": "signal",
    "wanet": "feature",
    "bpp": "numerical",
}
FAMILIES = tuple(SPACES)
# Families that assume control over training; injected on the fly rather than by static poisoning.
TRAINING_CONTROLLED = ("wanet", "bpp")

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

# Affine color maps standing in for the Instagram looks: out = M @ rgb + b.
FILTERS = {
    "filter1977": (
        np.array([[1.10, 0.06, 0.04], [0.02, 0.96, 0.06], [0.06, 0.04, 0.92]], dtype=np.float32),
        np.array([0.07, 0.00, 0.04], dtype=np.float32),
    ),
    "filterKelvin": (
        np.array([[1.15, 0.05, 0.00], [0.02, 1.00, 0.00], [0.00, 0.00, 0.75]], dtype=np.float32),
        np.array([0.08, 0.03, -0.05], dtype=np.float32),
    ),
    "filterMoon": (
        np.tile(1.15 * _LUMA, (3, 1)),
        np.full(3, -0.04, dtype=np.float32),
    ),
}


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    family: str
    target_label: int
    params: dict = field(default_factory=dict)
    poison_rate: float = 0.05

    def __post_init__(self):
        if self.family not in SPACES:
            raise UsageError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        if not 0.0 < self.poison_rate <= 1.0:
            raise ParameterError(f"poison_rate must be in (0, 1], got {self.poison_rate}")

    @property
    def space(self) -> str:
        return SPACES[self.family]

    @property
    def training_controlled(self) -> bool:
        return self.family in TRAINING_CONTROLLED

    def __eq__(self, other):
        if not isinstance(other, TriggerSpec):
            return NotImplemented
        if (self.family, self.target_label, self.poison_rate) != (
            other.family,
            other.target_label,
            other.poison_rate,
        ):
            return False
        if self.params.keys() != other.params.keys():
            return False
        for k, v in self.params.items():
            w = other.params[k]
            if isinstance(v, np.ndarray) or isinstance(w, np.ndarray):
                if not (isinstance(v, np.ndarray) and isinstance(w, np.ndarray)):
                    return False
                if v.dtype != w.dtype or v.shape != w.shape or not np.array_equal(v, w):
                    return False
            elif v != w:
                return False
        return True

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": SPEC_VERSION,
                "family": self.family,
                "target_label": self.target_label,
                "poison_rate": self.poison_rate,
                "params": {k: _encode(v) for k, v in self.params.items()},
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "TriggerSpec":
        doc = json.loads(text)
        if doc.get("version") != SPEC_VERSION:
            raise ParameterError(f"unsupported trigger spec version {doc.get('version')!r}")
        params = {k: _decode(v) for k, v in doc["params"].items()}
        return cls(doc["family"], int(doc["target_label"]), params, float(doc["poison_rate"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "TriggerSpec":
        return cls.from_json(Path(path).read_text())


def _encode(v):
    if isinstance(v, np.ndarray):
        return {
            "__ndarray__": base64.b64encode(np.ascontiguousarray(v).tobytes()).decode("ascii"),
            "dtype": str(v.dtype),
            "shape": list(v.shape),
        }
    if isinstance(v, tuple):
        return list(v)
    return v


def _decode(v):
    if isinstance(v, dict) and "__ndarray__" in v:
        raw = base64.b64decode(v["__ndarray__"])
        return np.frombuffer(raw, dtype=np.dtype(v["dtype"])).reshape(v["shape"]).copy()
    return v


def make_spec(
    family: str,
    target_label: int,
    image_shape=(3, 32, 32),
    seed: int = 0,
    poison_rate: float | None = None,
    **overrides,
) -> TriggerSpec:
    """Build a spec with the default parameters of ``family``.

    Defaults: 3x3 yellow patch in the upper-right corner; blend ratio 0.2
    with a stored uniform-noise pattern; SIG frequency 6 and magnitude 20;
    WaNet strength 0.5 on a 4x4 control grid; Bpp depth 5 bits.
    """
    if family not in SPACES:
        raise UsageError(f"unknown attack family {family!r}; expected one of {FAMILIES}")
    c, h, w = image_shape
    rng = np.random.default_rng(seed)
    if family == "patch":
        params = {"size": 3, "position": "upper_right", "color": [1.0, 1.0, 0.0]}
    elif family == "blend":
        params = {"ratio": 0.2, "pattern": rng.random((c, h, w), dtype=np.float32)}
    elif family == "sig":
        params = {"frequency": 6.0, "magnitude": 20.0}
    elif family in FILTERS:
        m, b = FILTERS[family]
        params = {"matrix": m.copy(), "offset": b.copy()}
    elif family == "wanet":
        k = int(overrides.pop("grid_size", 4))
        params = {"strength": 0.5, "grid_size": k, "field": wanet_field(k, h, w, rng)}
    else:
        params = {"depth": 5}
    params.update(overrides)
    if poison_rate is None:
        poison_rate = 0.1 if family in TRAINING_CONTROLLED else 0.05
    return TriggerSpec(family, int(target_label), params, float(poison_rate))


def wanet_field(k: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Random k x k flow, normalized by its mean magnitude and upsampled to (h, w, 2)."""
    if k < 2:
        raise ParameterError(f"WaNet grid size must be >= 2, got {k}")
    ins = rng.uniform(-1.0, 1.0, size=(1, 2, k, k)).astype(np.float32)
    ins = ins / np.abs(ins).mean()
    up = F.interpolate(torch.from_numpy(ins), size=(h, w), mode="bicubic", align_corners=True)
    return up[0].permute(1, 2, 0).contiguous().numpy()


def _pixels(x):
    return x.pixels if isinstance(x, ImageBatch) else x


def _wrap(x, out: torch.Tensor):
    out = out.clamp_(0.0, 1.0)
    return x.with_pixels(out) if isinstance(x, ImageBatch) else out


def apply_patch(x, spec: TriggerSpec):
    px = _pixels(x)
    _, c, h, w = px.shape
    size = int(spec.params["size"])
    if size < 1:
        raise ParameterError(f"patch size must be >= 1, got {size}")
    pos = spec.params.get("position", "upper_right")
    if pos == "upper_right":
        top, left = 0, w - size
    elif pos == "lower_right":
        top, left = h - size, w - size
    else:
        top, left = (int(v) for v in pos)
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ParameterError(f"{size}x{size} patch at ({top}, {left}) exceeds {h}x{w} image")
    color = torch.tensor(spec.params["color"], dtype=px.dtype)
    if color.numel() != c:
        raise ParameterError(f"patch color has {color.numel()} channels, image has {c}")
    out = px.clone()
    out[:, :, top : top + size, left : left + size] = color.view(1, c, 1, 1)
    return _wrap(x, out)


def apply_blend(x, spec: TriggerSpec):
    px = _pixels(x)
    ratio = float(spec.params["ratio"])
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"blend ratio must be in [0, 1], got {ratio}")
    pattern = torch.as_tensor(np.asarray(spec.params["pattern"]), dtype=px.dtype)
    if tuple(pattern.shape) != tuple(px.shape[1:]):
        raise ParameterError(f"blend pattern shape {tuple(pattern.shape)} != image shape {tuple(px.shape[1:])}")
    return _wrap(x, (1.0 - ratio) * px + ratio * pattern)


def sig_signal(width: int, frequency: float, magnitude: float) -> torch.Tensor:
    j = torch.arange(width, dtype=torch.float64)
    return (magnitude / 255.0 * torch.sin(2 * math.pi * frequency * j / width)).float()


def apply_sig(x, spec: TriggerSpec):
    px = _pixels(x)
    f, mag = float(spec.params["frequency"]), float(spec.params["magnitude"])
    if f <= 0 or mag < 0:
        raise ParameterError(f"SIG needs frequency > 0 and magnitude >= 0, got {f}, {mag}")
    v = sig_signal(px.shape[-1], f, mag)
    return _wrap(x, px + v.view(1, 1, 1, -1))


def apply_filter(x, spec: TriggerSpec):
    px = _pixels(x)
    m = np.asarray(spec.params["matrix"], dtype=np.float32)
    b = np.asarray(spec.params["offset"], dtype=np.float32)
    if m.shape != (3, 3) or b.shape != (3,):
        raise ParameterError(f"filter needs a 3x3 matrix and 3 offsets, got {m.shape}, {b.shape}")
    if not (np.isfinite(m).all() and np.isfinite(b).all()):
        raise ParameterError("filter coefficients must be finite")
    if px.shape[1] != 3:
        raise ParameterError("color filters need 3-channel images")
    out = torch.einsum("oc,nchw->nohw", torch.from_numpy(m), px) + torch.from_numpy(b).view(1, 3, 1, 1)
    return _wrap(x, out)


def wanet_grid(spec: TriggerSpec, h: int, w: int) -> torch.Tensor:
    field_ = torch.from_numpy(np.asarray(spec.params["field"], dtype=np.float32))
    if tuple(field_.shape) != (h, w, 2):
        raise ParameterError(f"warp field shape {tuple(field_.shape)} does not match image {h}x{w}")
    ys = torch.linspace(-1, 1, h)
    xs = torch.linspace(-1, 1, w)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    identity = torch.stack((gx, gy), dim=2)
    grid = identity + float(spec.params["strength"]) * field_ / h
    return grid.clamp(-1, 1)[None]


def apply_wanet(x, spec: TriggerSpec):
    px = _pixels(x)
    if int(spec.params["grid_size"]) < 2:
        raise ParameterError("WaNet grid size must be >= 2")
    if float(spec.params["strength"]) == 0.0:
        return _wrap(x, px.clone())
    n, _, h, w = px.shape
    grid = wanet_grid(spec, h, w).expand(n, -1, -1, -1)
    out = F.grid_sample(px, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return _wrap(x, out)


def apply_bpp(x, spec: TriggerSpec):
    px = _pixels(x)
    d = int(spec.params["depth"])
    if not 1 <= d <= 8:
        raise ParameterError(f"bit depth must be in [1, 8], got {d}")
    n, c, h, w = px.shape
    planes = px.detach().cpu().double().numpy().reshape(n * c, h, w)
    q = kernels.floyd_steinberg(planes, 2**d)
    return _wrap(x, torch.from_numpy(q.reshape(n, c, h, w)).float())


_APPLY = {
    "patch": apply_patch,
    "blend": apply_blend,
    "sig": apply_sig,
    "filter1977": apply_filter,
    "filterKelvin": apply_filter,
    "filterMoon": apply_filter,
    "wanet": apply_wanet,
    "bpp": apply_bpp,
}


def apply(spec: TriggerSpec, x):
    """Stamp the trigger described by ``spec`` on a tensor or :class:`ImageBatch`."""
    return _APPLY[spec.family](x, spec)


def poison_count(rate: float, n: int) -> int:
    return max(1, int(round(rate * n)))


def poison_dataset(train: ImageBatch, spec: TriggerSpec, seed: int = 0) -> ImageBatch:
    """Replace a random ``poison_rate`` fraction of ``train`` by triggered,
    relabeled copies. Poisoned indices are recorded in ``meta``."""
    n = len(train)
    count = poison_count(spec.poison_rate, n)
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(n, generator=g)[:count].sort().values
    pixels = train.pixels.clone()
    labels = train.labels.clone()
    pixels[idx] = apply(spec, train.pixels[idx])
    labels[idx] = spec.target_label
    meta = dict(train.meta)
    meta["poisoned_indices"] = idx
    meta["trigger_family"] = spec.family
    return ImageBatch(pixels, labels, train.num_classes, meta)
