"""Fused per-pixel loss/adjoint pass, compiled with numba when available."""

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def _pixel_pass_numpy(p, target, scale, floor, l1, weight):
    T = p.shape[0]
    inten = np.mean(p.real ** 2 + p.imag ** 2, axis=0)
    root = np.sqrt(np.maximum(inten, floor))
    r = root / scale - target
    acc = np.sum(np.abs(r)) if l1 else np.sum(r * r)
    d_amp = weight * (np.sign(r) if l1 else 2.0 * r)
    coef = np.where(inten > floor, d_amp / (2.0 * scale * root), 0.0) / T
    p *= coef.astype(p.real.dtype)
    return acc / r.size


if numba is not None:
    @numba.njit(cache=True, fastmath=False)
    def _pixel_pass_numba(p, target, scale, floor, l1, weight):  # pragma: no cover - compiled
        T, H, W = p.shape
        inv_t = 1.0 / T
        # frame-major sweeps keep memory access contiguous
        inten = np.zeros((H, W), dtype=np.float64)
        for t in range(T):
            for i in range(H):
                for j in range(W):
                    v = p[t, i, j]
                    inten[i, j] += v.real * v.real + v.imag * v.imag
        acc = 0.0
        coef = np.empty((H, W), dtype=p.real.dtype)
        for i in range(H):
            for j in range(W):
                s = inten[i, j] * inv_t
                root = np.sqrt(max(s, floor))
                r = root / scale - target[i, j]
                if l1:
                    acc += abs(r)
                    d_amp = weight * (1.0 if r > 0 else (-1.0 if r < 0 else 0.0))
                else:
                    acc += r * r
                    d_amp = weight * 2.0 * r
                coef[i, j] = d_amp / (2.0 * scale * root) * inv_t if s > floor else 0.0
        for t in range(T):
            for i in range(H):
                for j in range(W):
                    p[t, i, j] = p[t, i, j] * coef[i, j]
        return acc / (H * W)


def pixel_pass(p, target, scale, floor, l1, weight):
    """Residual of one (plane, pupil) pair; overwrites ``p`` with the field adjoint.

    ``p`` holds the ``(T, H, W)`` reconstructed fields. On return it holds
    ``dL/dconj(p)`` for a loss weighted by ``weight`` per pixel-sum term.
    Returns the mean per-pixel residual (squared or absolute).
    """
    if numba is not None:
        return float(_pixel_pass_numba(p, target, float(scale), float(floor), bool(l1), float(weight)))
    return float(_pixel_pass_numpy(p, target, scale, floor, l1, weight))
