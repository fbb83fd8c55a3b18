"""Shared test oracles: finite differences and naive reference kernels.

Everything here is deliberately independent of the library's fast paths:
plain loops and two-sided difference quotients only.
"""

import numpy as np

from mcdenoise.tensor import Tensor, backward, zero_grads


def finite_difference_grads(fn, tensors, eps=1e-5):
    """Central-difference gradient of ``fn(*tensors)`` w.r.t. each tensor.

    ``fn`` must return a scalar Tensor and must not cache tensor data
    between calls; the data buffers are perturbed in place.
    """
    grads = []
    for t in tensors:
        g = np.zeros(t.data.shape)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            up = fn().item()
            flat[i] = original - eps
            down = fn().item()
            flat[i] = original
            g.reshape(-1)[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(a, b):
    na = np.linalg.norm(np.asarray(a).ravel())
    nb = np.linalg.norm(np.asarray(b).ravel())
    denom = max(na, nb, 1e-12)
    return np.linalg.norm((np.asarray(a) - np.asarray(b)).ravel()) / denom


def check_gradients(fn, tensors, eps=1e-5, tol=1e-4):
    """Assert analytic gradients match central differences for every input."""
    zero_grads(tensors)
    loss = fn()
    backward(loss)
    numeric = finite_difference_grads(fn, tensors, eps=eps)
    for t, num in zip(tensors, numeric):
        err = relative_error(t.grad, num)
        assert err < tol, f"gradient mismatch: relative error {err:.3e}"


def conv3d_loops(x, w, b, stride, padding):
    """Six-nested-loop cross-correlation over one padded volume."""
    batch, c_in, h, wd, d = x.shape
    c_out, _, kh, kw, kd = w.shape
    sh, sw, sd = stride
    ph, pw, pd = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw), (pd, pd)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    od = (d + 2 * pd - kd) // sd + 1
    out = np.zeros((batch, c_out, oh, ow, od))
    for n in range(batch):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    for k in range(od):
                        acc = 0.0
                        for ci in range(c_in):
                            for a in range(kh):
                                for bb in range(kw):
                                    for c in range(kd):
                                        acc += (
                                            xp[n, ci, i * sh + a, j * sw + bb, k * sd + c]
                                            * w[co, ci, a, bb, c]
                                        )
                        out[n, co, i, j, k] = acc + b[co]
    return out


def instance_norm_loops(x, scale, shift, eps):
    """Two-pass per-instance-channel standardization."""
    out = np.zeros_like(x)
    batch, channels = x.shape[:2]
    for n in range(batch):
        for c in range(channels):
            slab = x[n, c]
            mu = slab.mean()
            var = ((slab - mu) ** 2).mean()
            out[n, c] = scale[c] * (slab - mu) / np.sqrt(var + eps) + shift[c]
    return out


def trilinear_loops(x):
    """Explicit eight-neighbour weighted average for factor-2 upsampling."""
    batch, channels, h, w, d = x.shape
    out = np.zeros((batch, channels, 2 * h, 2 * w, 2 * d))

    def src(o, n):
        c = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(c))
        f = c - i0
        return max(0, min(i0, n - 1)), max(0, min(i0 + 1, n - 1)), f

    for n in range(batch):
        for c in range(channels):
            for i in range(2 * h):
                i0, i1, fi = src(i, h)
                for j in range(2 * w):
                    j0, j1, fj = src(j, w)
                    for k in range(2 * d):
                        k0, k1, fk = src(k, d)
                        acc = 0.0
                        for (ii, wi) in ((i0, 1 - fi), (i1, fi)):
                            for (jj, wj) in ((j0, 1 - fj), (j1, fj)):
                                for (kk, wk) in ((k0, 1 - fk), (k1, fk)):
                                    acc += wi * wj * wk * x[n, c, ii, jj, kk]
                        out[n, c, i, j, k] = acc
    return out


def dvh_loops(values, mask, bins, max_dose):
    """Counting-loop cumulative DVH."""
    doses = values[mask]
    n = doses.size
    width = max_dose / bins
    edges = np.array([i * width for i in range(bins)])
    frac = np.array([(doses >= e).sum() / n for e in edges])
    return edges, frac


def d_number_loops(values, mask, percent):
    """Sort-and-count reference for the minimum dose to percent% coverage."""
    doses = sorted(values[mask].tolist())
    n = len(doses)
    best = None
    for d in doses:
        covered = sum(1 for v in doses if v >= d)
        if covered * 100.0 >= percent * n:
            best = d if best is None else max(best, d)
    return best


def dice_loops(a, b, threshold):
    ma = a >= threshold
    mb = b >= threshold
    na, nb = ma.sum(), mb.sum()
    if na + nb == 0:
        return 1.0
    return 2.0 * (ma & mb).sum() / (na + nb)
