"""Hot loops of latent-space Langevin sampling.

Each SGLD round runs ``T`` gradient steps of the uncertainty energy through
the upper part of the network, so it dominates training time. Both kernels
exist twice: a numba version with explicit loops and a vectorised numpy
version. They take the same arguments and agree to rounding error;
:mod:`eowsoftmax._backend` picks which one runs.

Arguments shared by the kernels:

``theta``
    flat float64 parameter vector of an :class:`~eowsoftmax.model.EowClassifier`
``layout``
    int64 array, one row ``(w_offset, fan_in, fan_out, b_offset)`` per layer;
    the last row is the logit head (no relu)
``start``
    index of the first layer applied to ``z`` (the stage index)
``sign``
    +1 for the energy ``-log h[K+1]``, -1 for ``+log h[K+1]``
"""

import numpy as np

from . import _backend
from ._backend import njit


@njit
def _energy_grad_nb(z, theta, layout, start, sign):
    n_layers = layout.shape[0]
    nb = z.shape[0]
    acts = [z]
    h = z
    for j in range(start, n_layers):
        w_off, fan_in, fan_out, b_off = layout[j, 0], layout[j, 1], layout[j, 2], layout[j, 3]
        w = theta[w_off : w_off + fan_in * fan_out].reshape((fan_in, fan_out))
        pre = np.dot(h, w)
        for i in range(nb):
            for k in range(fan_out):
                v = pre[i, k] + theta[b_off + k]
                if j < n_layers - 1 and v < 0.0:
                    v = 0.0
                pre[i, k] = v
        h = pre
        if j < n_layers - 1:
            acts.append(h)

    kk = h.shape[1] - 1
    energy = np.empty(nb)
    g = np.empty_like(h)
    for i in range(nb):
        m = h[i, 0]
        for k in range(1, kk + 1):
            if h[i, k] > m:
                m = h[i, k]
        s = 0.0
        for k in range(kk + 1):
            s += np.exp(h[i, k] - m)
        lse = m + np.log(s)
        energy[i] = sign * (lse - h[i, kk])
        for k in range(kk + 1):
            g[i, k] = sign * np.exp(h[i, k] - lse)
        g[i, kk] -= sign

    for j in range(n_layers - 1, start - 1, -1):
        w_off, fan_in, fan_out = layout[j, 0], layout[j, 1], layout[j, 2]
        w = theta[w_off : w_off + fan_in * fan_out].reshape((fan_in, fan_out))
        g = np.dot(g, w.T)
        if j > start:
            a = acts[j - start]
            for i in range(nb):
                for k in range(fan_in):
                    if a[i, k] <= 0.0:
                        g[i, k] = 0.0
    return energy, g


def _energy_grad_np(z, theta, layout, start, sign):
    n_layers = layout.shape[0]
    acts = []
    h = z
    for j in range(start, n_layers):
        w_off, fan_in, fan_out, b_off = layout[j]
        w = theta[w_off : w_off + fan_in * fan_out].reshape(fan_in, fan_out)
        h = h @ w + theta[b_off : b_off + fan_out]
        if j < n_layers - 1:
            h = np.maximum(h, 0.0)
            acts.append(h)
    kk = h.shape[1] - 1
    m = h.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(h - m).sum(axis=1, keepdims=True))
    energy = sign * (lse[:, 0] - h[:, kk])
    g = sign * np.exp(h - lse)
    g[:, kk] -= sign
    for j in range(n_layers - 1, start - 1, -1):
        w_off, fan_in, fan_out, _ = layout[j]
        g = g @ theta[w_off : w_off + fan_in * fan_out].reshape(fan_in, fan_out).T
        if j > start:
            g = np.where(acts[j - start - 1] > 0.0, g, 0.0)
    return energy, g


@njit
def _sgld_nb(z, theta, layout, start, noise, alpha, sigma, clip, sign):
    z = z.copy()
    steps = noise.shape[0]
    nb, d = z.shape
    energy, g = _energy_grad_nb(z, theta, layout, start, sign)
    e_before = energy.copy()
    gsum = 0.0
    gmax = 0.0
    for t in range(steps):
        if t > 0:
            energy, g = _energy_grad_nb(z, theta, layout, start, sign)
        for i in range(nb):
            sq = 0.0
            for k in range(d):
                sq += g[i, k] * g[i, k]
            norm = np.sqrt(sq)
            if not np.isfinite(norm):
                return z, e_before, energy, gsum, gmax, t
            gsum += norm
            if norm > gmax:
                gmax = norm
            scale = 1.0
            if norm > clip:
                scale = clip / norm
            for k in range(d):
                z[i, k] = z[i, k] - 0.5 * alpha * scale * g[i, k] + sigma * noise[t, i, k]
    e_after, _ = _energy_grad_nb(z, theta, layout, start, sign)
    if steps > 0:
        gsum /= steps * nb
    for i in range(nb):
        if not np.isfinite(e_after[i]):
            return z, e_before, e_after, gsum, gmax, steps
    return z, e_before, e_after, gsum, gmax, -1


def _sgld_np(z, theta, layout, start, noise, alpha, sigma, clip, sign):
    z = z.copy()
    steps = noise.shape[0]
    energy, g = _energy_grad_np(z, theta, layout, start, sign)
    e_before = energy.copy()
    gsum = 0.0
    gmax = 0.0
    for t in range(steps):
        if t > 0:
            energy, g = _energy_grad_np(z, theta, layout, start, sign)
        norm = np.sqrt((g * g).sum(axis=1))
        if not np.all(np.isfinite(norm)):
            return z, e_before, energy, gsum, gmax, t
        gsum += norm.sum()
        gmax = max(gmax, norm.max())
        scale = np.where(norm > clip, clip / np.where(norm > 0, norm, 1.0), 1.0)
        z = z - 0.5 * alpha * scale[:, None] * g + sigma * noise[t]
    e_after, _ = _energy_grad_np(z, theta, layout, start, sign)
    if steps > 0:
        gsum /= steps * z.shape[0]
    if not np.all(np.isfinite(e_after)):
        return z, e_before, e_after, gsum, gmax, steps
    return z, e_before, e_after, gsum, gmax, -1


def _prep(z, theta, layout):
    return (
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(theta, dtype=np.float64),
        np.ascontiguousarray(layout, dtype=np.int64),
    )


def energy_grad(z, theta, layout, start, sign=1.0, backend=None):
    """Per-sample energy ``(B,)`` and its gradient w.r.t. ``z`` ``(B, d)``."""
    z, theta, layout = _prep(z, theta, layout)
    if _backend.resolve(backend) == "numba":
        return _energy_grad_nb(z, theta, layout, int(start), float(sign))
    return _energy_grad_np(z, theta, layout, int(start), float(sign))


def sgld_run(z, theta, layout, start, noise, alpha, sigma, clip=np.inf, sign=1.0, backend=None):
    """Run ``len(noise)`` Langevin steps from ``z``.

    Each step moves every row by ``-(alpha/2) * clipped_grad + sigma * noise[t]``,
    where the gradient row is rescaled to L2 norm ``clip`` if it is longer.

    Returns ``(z, energy_before, energy_after, mean_grad_norm, max_grad_norm,
    failed_step)``; ``failed_step`` is -1 unless a gradient went non-finite,
    in which case it is the step index where the round stopped.
    """
    z, theta, layout = _prep(z, theta, layout)
    noise = np.ascontiguousarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[1:] != z.shape:
        raise ValueError(f"noise shape {noise.shape} does not match latents {z.shape}")
    args = (z, theta, layout, int(start), noise, float(alpha), float(sigma), float(clip), float(sign))
    if _backend.resolve(backend) == "numba":
        out = _sgld_nb(*args)
    else:
        out = _sgld_np(*args)
    z, e0, e1, gmean, gmax, failed = out
    return z, e0, e1, float(gmean), float(gmax), int(failed)
