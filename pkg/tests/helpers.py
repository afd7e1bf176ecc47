"""Shared test utilities: finite-difference checks and naive metric oracles.

The oracles here deliberately reimplement computations with plain loops and
dense matrices so they stay independent of the library implementations they
verify.
"""

from __future__ import annotations

import numpy as np
import torch


def finite_diff_check(loss_fn, params, rng: np.random.Generator,
                      n_per_tensor: int = 3, eps: float = 1e-5, rtol: float = 1e-2):
    """Compare autograd gradients against central differences.

    loss_fn must recompute the scalar loss from the current parameter values
    on every call. Everything should be double precision for the tolerance
    to be meaningful.
    """
    params = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    failures = []
    for p, g in zip(params, grads):
        flat = p.detach().reshape(-1)
        n = min(n_per_tensor, flat.numel())
        idxs = rng.choice(flat.numel(), size=n, replace=False)
        gflat = None if g is None else g.reshape(-1)
        for i in idxs:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + eps
            lp = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig - eps
            lm = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            an = 0.0 if gflat is None else float(gflat[i])
            denom = max(abs(an), abs(fd))
            if denom < 1e-9:
                continue  # both effectively zero
            if abs(an - fd) / denom >= rtol:
                failures.append((i, an, fd))
    return failures


def naive_ssim(x: np.ndarray, y: np.ndarray, data_range: float = 2.0,
               window: int = 11, sigma: float = 1.5,
               k1: float = 0.01, k2: float = 0.03) -> float:
    """Literal windowed-sum SSIM over one 2D slice (valid windows only)."""
    coords = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-(coords**2) / (2 * sigma**2))
    g /= g.sum()
    kern = np.outer(g, g)
    h, w = x.shape
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            px = x[i : i + window, j : j + window]
            py = y[i : i + window, j : j + window]
            mx = (kern * px).sum()
            my = (kern * py).sum()
            vx = (kern * px * px).sum() - mx * mx
            vy = (kern * py * py).sum() - my * my
            vxy = (kern * px * py).sum() - mx * my
            vals.append(
                ((2 * mx * my + c1) * (2 * vxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(vals))


def haar_matrix(n: int) -> np.ndarray:
    """Orthonormal single-level 1D Haar analysis matrix (n x n, n even).

    First n/2 rows average adjacent pairs, last n/2 rows difference them.
    """
    m = np.zeros((n, n))
    s = 1.0 / np.sqrt(2.0)
    for k in range(n // 2):
        m[k, 2 * k] = s
        m[k, 2 * k + 1] = s
        m[n // 2 + k, 2 * k] = s
        m[n // 2 + k, 2 * k + 1] = -s
    return m


def haar_bands_via_matrix(x: np.ndarray):
    """Sub-bands of a 2D array computed through dense matrix multiplication."""
    h, w = x.shape
    rows = haar_matrix(w)  # acts on the W axis
    cols = haar_matrix(h)  # acts on the H axis
    t = cols @ x @ rows.T
    h2, w2 = h // 2, w // 2
    ll = t[:h2, :w2]
    lh = t[h2:, :w2]  # highpass across rows (vertical detail)
    hl = t[:h2, w2:]  # highpass across columns
    hh = t[h2:, w2:]
    return ll, lh, hl, hh


def conv2d_loops(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, pad: int) -> np.ndarray:
    """Direct O(n^4) 2D convolution, NCHW single image (C_out,C_in,k,k) weight."""
    cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((cout, h, w))
    for co in range(cout):
        for i in range(h):
            for j in range(w):
                out[co, i, j] = (weight[co] * xp[:, i : i + kh, j : j + kw]).sum() + bias[co]
    return out


def conv3d_loops(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, pad) -> np.ndarray:
    """Direct 3D convolution, (C,D,H,W) input, (C_out,C_in,kd,kh,kw) weight."""
    cin, d, h, w = x.shape
    cout, _, kd, kh, kw = weight.shape
    pd, ph, pw = pad
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros((cout, d, h, w))
    for co in range(cout):
        for z in range(d):
            for i in range(h):
                for j in range(w):
                    out[co, z, i, j] = (
                        weight[co] * xp[:, z : z + kd, i : i + kh, j : j + kw]
                    ).sum() + bias[co]
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))
