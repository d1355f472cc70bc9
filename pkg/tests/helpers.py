"""Shared test utilities: finite-difference gradient checks and brute-force oracles."""

import numpy as np

from frsp.tensor import Tensor, parameter


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(*arrays)
            a[i] = old - h
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)), np.max(np.abs(b))))


def gradcheck(build, arrays, h=1e-5):
    """Max relative error between autodiff and central differences.

    ``build(*tensors)`` returns a scalar Tensor.
    """
    params = [parameter(a.copy()) for a in arrays]
    loss = build(*params)
    loss.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def f(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    numeric = numeric_grad(f, [a.copy() for a in arrays], h)
    return max(rel_err(x, y) for x, y in zip(analytic, numeric))


def conv_loop(x, w, b):
    """Quadruple-loop same-padded cross-correlation, ``x`` is ``Cin x H x W``."""
    cout, cin, k, _ = w.shape
    _, hh, ww = x.shape
    p = k // 2
    out = np.zeros((cout, hh, ww))
    for o in range(cout):
        for i in range(hh):
            for j in range(ww):
                s = 0.0 if b is None else b[o]
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            y, xx = i + di - p, j + dj - p
                            if 0 <= y < hh and 0 <= xx < ww:
                                s += w[o, c, di, dj] * x[c, y, xx]
                out[o, i, j] = s
    return out


def guidance_scalar(f, n):
    """One FMAP value to its class, read directly off the interval definition."""
    if f == 1.0:
        return n
    for l in range(1, n + 1):
        if (l - 1) / n <= f < l / n:
            return l - 1
    raise AssertionError(f)


def hard_mask_scalar(f, n, c):
    """Dense mask column for one pixel (index 0 is channel 1)."""
    g = guidance_scalar(f, n)
    cpc = c // n
    return np.array([1.0 if k <= g * cpc else 0.0 for k in range(1, c + 1)])


def hard_grad_scalar(f, n, c):
    """Surrogate d mask_k / d FMAP for one pixel: n on the inclusive band, else 0."""
    g = guidance_scalar(f, n)
    cpc = c // n
    return np.array([float(n) if (g - 1) * cpc <= k <= g * cpc else 0.0 for k in range(1, c + 1)])
