"""Direct, loop-based formula implementations used as independent test oracles."""

import numpy as np

from splatseg.metrics import SSIM_C1, SSIM_C2


def ssim_oracle(a, b):
    """Direct per-window SSIM: explicit 2-D Gaussian weights, one window at a time."""
    x = np.arange(11) - 5.0
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    a = a[..., None] if a.ndim == 2 else a
    b = b[..., None] if b.ndim == 2 else b
    H, W, C = a.shape
    vals = []
    for c in range(C):
        for i in range(H - 10):
            for j in range(W - 10):
                pa, pb = a[i:i + 11, j:j + 11, c], b[i:i + 11, j:j + 11, c]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2)
                            / ((ma ** 2 + mb ** 2 + SSIM_C1) * (va + vb + SSIM_C2)))
    return float(np.mean(vals))


def contrastive_oracle(fm, fn, tau):
    """Double loop over pairs and candidates, no stabilisation tricks."""
    total = 0.0
    for i in range(len(fm)):
        num = np.exp(np.dot(fm[i], fn[i]) / tau)
        den = sum(np.exp(np.dot(fm[i], fn[j]) / tau) for j in range(len(fn)))
        total -= np.log(num / den)
    return total


def smoothed_ce_oracle(logits, mask, eps, ignore=255):
    """Per-pixel loop: soft target (1 - eps) + eps / K, mean over annotated pixels."""
    H, W, K = logits.shape
    total, count = 0.0, 0
    for r in range(H):
        for c in range(W):
            y = mask[r, c]
            if y == ignore:
                continue
            z = logits[r, c]
            logp = z - np.log(np.sum(np.exp(z)))
            total -= sum(((1 - eps) * (k == y) + eps / K) * logp[k] for k in range(K))
            count += 1
    return total / count


def ceco_oracle(pen, mask, weights, ignore=255):
    """Centres by explicit pixel loops, cross-similarity softmax over present classes."""
    present = sorted({int(v) for v in mask.ravel() if v != ignore})
    centres = {}
    for k in present:
        acc, n = np.zeros(pen.shape[-1]), 0
        for r in range(mask.shape[0]):
            for c in range(mask.shape[1]):
                if mask[r, c] == k:
                    acc += pen[r, c]
                    n += 1
        centres[k] = acc / n / np.linalg.norm(acc / n)
    w = {k: weights[k] / np.linalg.norm(weights[k]) for k in present}
    total = 0.0
    for k in present:
        den = sum(np.exp(np.dot(centres[k], w[j])) for j in present)
        total -= np.log(np.exp(np.dot(centres[k], w[k])) / den)
    return total


def psnr_oracle(a, b):
    """10 log10(1 / MSE) with the squared error summed element by element."""
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    sq = 0.0
    for x, y in zip(a, b):
        sq += (x - y) ** 2
    return 10.0 * np.log10(1.0 / (sq / a.size))


def depth_oracle(pred, gt):
    """abs_rel, sq_rel, rmse and the three delta ratios over pixels with valid gt and pred."""
    rows = [(float(d), float(g)) for d, g in zip(np.ravel(pred), np.ravel(gt))
            if np.isfinite(g) and g > 0 and np.isfinite(d) and d > 0]
    n = len(rows)
    abs_rel = sum(abs(d - g) / g for d, g in rows) / n
    sq_rel = sum((d - g) ** 2 / g for d, g in rows) / n
    rmse = (sum((d - g) ** 2 for d, g in rows) / n) ** 0.5
    deltas = [sum(max(d / g, g / d) < 1.25 ** p for d, g in rows) / n for p in (1, 2, 3)]
    return abs_rel, sq_rel, rmse, deltas
