"""Independent reference implementations used as test oracles."""

import numpy as np


def naive_local_variance(img: np.ndarray, k: int) -> np.ndarray:
    """Population variance of every reflect-padded k x k window, one pixel at a time."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    p = k // 2
    out = np.zeros((h, w, c))
    for ch in range(c):
        padded = np.pad(img[:, :, ch], p, mode="reflect")
        for i in range(h):
            for j in range(w):
                out[i, j, ch] = padded[i:i + k, j:j + k].var()
    return out


def naive_variance_loss(pred: np.ndarray, target: np.ndarray, k: int) -> float:
    d = naive_local_variance(pred, k) - naive_local_variance(target, k)
    return float(np.mean(d * d))


def naive_ssim(a: np.ndarray, b: np.ndarray, win: int = 11, sigma: float = 1.5) -> float:
    """Explicit-window SSIM over valid windows for a single 2-D channel in [0, 1]."""
    half = win // 2
    ax = np.arange(win) - half
    g1 = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = np.outer(g1, g1)
    g /= g.sum()
    c1, c2 = (0.01) ** 2, (0.03) ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa, pb = a[i:i + win, j:j + win], b[i:i + win, j:j + win]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * pa * pa).sum() - ma * ma
            vb = (g * pb * pb).sum() - mb * mb
            cov = (g * pa * pb).sum() - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def brute_force_fraction(labels: np.ndarray, marker: np.ndarray, tau: float) -> float:
    ids = [i for i in np.unique(labels) if i > 0]
    positive = 0
    for i in ids:
        vals = [marker[r, c] for r, c in zip(*np.nonzero(labels == i))]
        if sum(vals) / len(vals) > tau:
            positive += 1
    return positive / len(ids)


def naive_pmae(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += abs(float(x) - float(y))
    return total / np.size(a)
