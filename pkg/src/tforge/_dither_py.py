"""Pure numpy Floyd-Steinberg, vectorized across planes instead of pixels."""
import numpy as np


def floyd_steinberg(planes: np.ndarray, levels: int) -> np.ndarray:
    """Quantize ``planes`` (P, H, W) in place; same contract as the compiled kernel."""
    _, h, w = planes.shape
    scale = levels - 1
    for i in range(h):
        step = 1 if i % 2 == 0 else -1
        cols = range(w) if step == 1 else range(w - 1, -1, -1)
        row = planes[:, i]
        below = planes[:, i + 1] if i + 1 < h else None
        for j in cols:
            old = row[:, j].copy()
            new = np.clip(np.floor(old * scale + 0.5), 0, scale) / scale
            row[:, j] = new
            err = old - new
            if 0 <= j + step < w:
                row[:, j + step] += err * 0.4375
            if below is not None:
                if 0 <= j - step < w:
                    below[:, j - step] += err * 0.1875
                below[:, j] += err * 0.3125
                if 0 <= j + step < w:
                    below[:, j + step] += err * 0.0625
    return planes
