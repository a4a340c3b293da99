"""Independent oracles the tests check the library against.

Everything here is deliberately naive (nested loops, brute force,
finite differences, dense eigensolvers) and shares no code with the
implementation paths it verifies.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import nnls

from aegem import autodiff as ad


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                 padding: str = "valid") -> np.ndarray:
    """Nested-loop cross-correlation: out[i,j] = sum w[u,v] x[i+u, j+v]."""
    n, cin, hin, win = x.shape
    cout, _, kh, kw = w.shape
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        hin, win = hin + 2 * ph, win + 2 * pw
    hout, wout = hin - kh + 1, win - kw + 1
    out = np.zeros((n, cout, hout, wout))
    for bi in range(n):
        for o in range(cout):
            for i in range(hout):
                for j in range(wout):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * x[bi, c, i + u, j + v]
                    out[bi, o, i, j] = acc
            if b is not None:
                out[bi, o] += b[o]
    return out


def finite_diff_grads(f, arrays: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of scalar f(*arrays) w.r.t. each array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """|a - n| relative to max(1, |a|, |n|), elementwise maximum."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(make_loss, arrays: list[np.ndarray], tol: float = 1e-6,
              h: float = 1e-6) -> float:
    """Compare reverse-mode gradients of make_loss(*tensors) to central FD.

    make_loss receives one Tensor per input array and must return a
    scalar Tensor.  Returns the worst relative error (and asserts tol).
    """
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    grads = ad.backward(make_loss(*tensors))
    analytic = [grads[t] for t in tensors]

    def value(*arrs):
        return make_loss(*[ad.Tensor(a) for a in arrs]).item()

    numeric = finite_diff_grads(value, arrays, h)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst <= tol, f"gradient mismatch: max relative error {worst:.3e} > {tol}"
    return worst


def adam_scalar_reference(grad_fn, w0: float, lr: float, steps: int,
                          beta1: float = 0.9, beta2: float = 0.999,
                          eps: float = 1e-8) -> list[float]:
    """Textbook scalar Adam trajectory, independent of the Tensor engine."""
    w, m, v = w0, 0.0, 0.0
    path = [w]
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        w -= lr * m_hat / (np.sqrt(v_hat) + eps)
        path.append(w)
    return path


def ellipse_offsets_bruteforce(a: int, b: int) -> set[tuple[int, int]]:
    """Scan the full bounding box for integer points inside the ellipse."""
    out = set()
    for dr in range(-a, a + 1):
        for dc in range(-b, b + 1):
            if dr * dr * b * b + dc * dc * a * a <= a * a * b * b:
                out.add((dr, dc))
    return out


def fcls_abundances(spectra: np.ndarray, endmembers: np.ndarray,
                    weight: float = 1e3) -> np.ndarray:
    """Fully constrained least squares via NNLS with a sum-to-one row.

    Reference solver for scene solvability; independent of the pipeline.
    """
    l, p = endmembers.shape
    m_aug = np.vstack([endmembers, weight * np.ones(p)])
    out = np.zeros((spectra.shape[0], p))
    for i, y in enumerate(spectra):
        out[i], _ = nnls(m_aug, np.concatenate([y, [weight]]))
    return out
