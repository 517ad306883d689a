"""Independent reference implementations used to derive expected values.

Nothing here imports the package under test: every oracle is a plain loop,
a closed form, or a finite difference.
"""

from __future__ import annotations

import math

import numpy as np

FD_STEP = 1e-5


def central_diff(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


# ------------------------------------------------------------ convolution loops


def conv2d_loop(x, w, b, stride=1, padding=0):
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for i in range(n):
        for o in range(c_out):
            for r in range(ho):
                for c in range(wo):
                    acc = b[o]
                    for ci in range(c_in):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, ci, u, v] * xp[i, ci, r * stride + u, c * stride + v]
                    out[i, o, r, c] = acc
    return out


def conv_transpose2d_loop(x, w, b, stride=1, padding=0):
    """Scatter form: each input pixel stamps a weighted kernel into the output."""
    n, c_in, h, wd = x.shape
    _, c_out, k, _ = w.shape
    full = np.zeros((n, c_out, (h - 1) * stride + k, (wd - 1) * stride + k))
    for i in range(n):
        for ci in range(c_in):
            for r in range(h):
                for c in range(wd):
                    full[i, :, r * stride:r * stride + k, c * stride:c * stride + k] += x[i, ci, r, c] * w[ci]
    ho, wo = full.shape[2] - 2 * padding, full.shape[3] - 2 * padding
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    return out + np.asarray(b).reshape(1, -1, 1, 1)


# ------------------------------------------------------------ channel loops


def steering_loop(nx, ny, nz, az, el, psi=math.pi):
    """Array response built element by element; index = iz*(ny*nx) + iy*nx + ix."""
    out = np.zeros(nx * ny * nz, dtype=complex)
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                phase = psi * (ix * math.sin(el) * math.cos(az) + iy * math.sin(el) * math.sin(az)
                               + iz * math.cos(el))
                out[iz * ny * nx + iy * nx + ix] = complex(math.cos(phase), math.sin(phase))
    return out


def subcarrier_loop(paths, n, n_c, bandwidth, nx, ny=1, nz=1, psi=math.pi, literal=False):
    """Channel vector on (1-based) subcarrier n as an explicit sum over paths."""
    h = np.zeros(nx * ny * nz, dtype=complex)
    for power, phase, delay, az, el in paths:
        arg = phase + 2 * math.pi * n * delay * bandwidth / n_c
        coef = math.sqrt(power / n_c) * complex(math.cos(arg), math.sin(arg))
        a = steering_loop(nx, ny, nz, az, el, psi * n if literal else psi)
        for i in range(h.size):
            h[i] += coef * a[i]
    return h


# ------------------------------------------------------------ metrics


def nmse_db_loop(H, H_hat):
    """10 log10 of the mean over samples of ||H_hat - H||^2 / ||H||^2."""
    ratios = []
    for x, y in zip(H, H_hat):
        num = sum(float(v) ** 2 for v in np.ravel(y - x))
        den = sum(float(v) ** 2 for v in np.ravel(x))
        ratios.append(num / den)
    m = sum(ratios) / len(ratios)
    return -math.inf if m == 0 else 10 * math.log10(m)
