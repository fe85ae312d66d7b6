"""Slow, loop-based reference implementations used only by the tests."""
import math

import numpy as np


def box_blur_direct(img, k):
    img = np.asarray(img, dtype=np.float64)
    r = k // 2
    h, w = img.shape
    out = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    acc += img[ii, jj]
            out[i, j] = acc / (k * k)
    return out


def mse_direct(a, b):
    total = 0.0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += (float(x) - float(y)) ** 2
    return total / np.size(a)


def psnr_direct(a, b):
    return 10.0 * math.log10(1.0 / mse_direct(a, b))


def ssim_direct(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over every valid window, centred moments computed per window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.arange(win) - (win - 1) / 2
    g1 = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa = a[i:i + win, j:j + win]
            pb = b[i:i + win, j:j + win]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)
