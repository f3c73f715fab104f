"""Independent oracles used by the tests.

Everything here is written against the underlying definitions (explicit
window loops, hand-rolled finite differences), not against the package
implementation, so agreement between the two is meaningful evidence.
"""

import math

import numpy as np
import torch


def ssim_reference(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Brute-force sliding-window SSIM.

    a, b: numpy arrays shaped (C, H, W). Walks every valid window position
    per channel and evaluates the SSIM formula from weighted sums computed
    in double precision. Deliberately loop-based and conv-free.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape and a.ndim == 3

    half = (window - 1) / 2.0
    coords = np.arange(window, dtype=np.float64) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g1 /= g1.sum()
    w = np.outer(g1, g1)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ch, h, wid = a.shape
    values = []
    for c in range(ch):
        for i in range(h - window + 1):
            for j in range(wid - window + 1):
                pa = a[c, i:i + window, j:j + window]
                pb = b[c, i:i + window, j:j + window]
                mu_a = (w * pa).sum()
                mu_b = (w * pb).sum()
                var_a = (w * pa * pa).sum() - mu_a * mu_a
                var_b = (w * pb * pb).sum() - mu_b * mu_b
                cov = (w * pa * pb).sum() - mu_a * mu_b
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
                values.append(num / den)
    return float(np.mean(values))


def psnr_reference(a, b, max_val=1.0):
    """Straight formula on numpy arrays; no cap handling."""
    err = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    return 10.0 * math.log10(max_val * max_val / err)


def finite_difference_param_grads(module, make_loss, step=1e-5):
    """Central finite differences for every parameter scalar of `module`.

    make_loss: () -> scalar torch value, re-running the forward pass.
    Returns {param_name: numpy array of FD gradients}. The module must be
    in double precision; gradients are exact to O(step^2).
    """
    grads = {}
    with torch.no_grad():
        for name, p in module.named_parameters():
            flat = p.view(-1)
            g = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = make_loss().item()
                flat[i] = orig - step
                lo = make_loss().item()
                flat[i] = orig
                g[i] = (hi - lo) / (2.0 * step)
            grads[name] = g.reshape(tuple(p.shape))
    return grads


def finite_difference_input_grad(fn, x, step=1e-5):
    """Central finite differences of scalar fn(x) w.r.t. every entry of x."""
    x = x.detach().clone()
    flat = x.view(-1)
    g = np.zeros(flat.numel())
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = fn(x).item()
            flat[i] = orig - step
            lo = fn(x).item()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * step)
    return g.reshape(tuple(x.shape))


def check_grads_close(analytic, numeric, rel_tol=1e-3, norm_tol=1e-5):
    """Elementwise |a - n| <= rel_tol*max(|a|,|n|) + norm_tol*max|grad|.

    Returns (ok, worst_ratio, where) for diagnostics.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    diff = np.abs(a - n)
    allowed = rel_tol * np.maximum(np.abs(a), np.abs(n)) + norm_tol * scale
    ratio = diff / allowed
    worst = float(ratio.max(initial=0.0))
    where = np.unravel_index(int(ratio.argmax()), ratio.shape) if a.size else ()
    return worst <= 1.0, worst, where


def dihedral_reference(arr, rot_k, hflip, vflip):
    """numpy mirror of the paired augmentation on (..., H, W) arrays."""
    out = np.rot90(arr, rot_k, axes=(-2, -1))
    if hflip:
        out = out[..., ::-1]
    if vflip:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)
