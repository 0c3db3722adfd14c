"""Independent numerical oracles used by the test suite.

Each oracle takes the dumbest correct route (explicit loops, high-precision
series, finite differences, LAPACK determinants) so that agreement with the
library is evidence, not tautology.
"""

import numpy as np


def matmul_loops(a, b):
    """Triple-loop matrix product."""
    n, m = a.shape
    m2, p = b.shape
    assert m == m2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for k in range(m):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def conv2d_loops(x, kernel):
    """Direct 6-loop same-padded cross-correlation for a single image."""
    h, w, cin = x.shape
    kh, kw, cin2, cout = kernel.shape
    assert cin == cin2
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for co in range(cout):
                acc = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        ii, jj = i + di - ph, j + dj - pw
                        if 0 <= ii < h and 0 <= jj < w:
                            for ci in range(cin):
                                acc += x[ii, jj, ci] * kernel[di, dj, ci, co]
                out[i, j, co] = acc
    return out


def expm_reference(w, eps=1e-15):
    """High-precision matrix exponential: strong scaling (norm < 1/16), tiny eps."""
    w = np.asarray(w, dtype=np.float64)
    norm = np.abs(w).sum(axis=0).max()
    s = 0
    while norm / (2.0**s) >= 1.0 / 16.0:
        s += 1
    ws = w / (2.0**s)
    x = np.eye(w.shape[0])
    y = ws.copy()
    k = 2
    while np.abs(y).sum(axis=0).max() > eps:
        x = x + y
        y = ws @ y / k
        k += 1
    for _ in range(s):
        x = x @ x
    return x


def taylor_partial_sum(w, k):
    """T_k(W) = sum_{i=0..k} W^i / i!, evaluated term by term."""
    x = np.eye(w.shape[0])
    term = np.eye(w.shape[0])
    for i in range(1, k + 1):
        term = term @ w / i
        x = x + term
    return x


def phi_partial_sum(v, k):
    """sum_{i=0..k} V^i / (i+1)!, the low-rank inner series truncated at k."""
    x = np.eye(v.shape[0])
    term = np.eye(v.shape[0])
    for i in range(1, k + 1):
        term = term @ v / (i + 1)
        x = x + term
    return x


def phi_reference(v, eps=1e-16):
    """High-precision inner series sum_{i>=0} V^i/(i+1)!."""
    x = np.eye(v.shape[0])
    term = np.eye(v.shape[0])
    i = 1
    while np.abs(term).sum(axis=0).max() > eps:
        term = term @ v / (i + 1)
        x = x + term
        i += 1
    return x


def taylor_tail_norm(w, k, extra=60):
    """1-norm of sum_{i>k} W^i/i!, summed directly from the (k+1)-th term.

    This is the truncation error of T_k(W) measured without the cancellation
    noise of subtracting two nearly equal float64 matrices.
    """
    term = np.eye(w.shape[0])
    for i in range(1, k + 1):
        term = term @ w / i
    tail = np.zeros_like(term)
    for i in range(k + 1, k + 1 + extra):
        term = term @ w / i
        tail = tail + term
    return np.abs(tail).sum(axis=0).max()


def phi_tail_norm(v, k, extra=60):
    """1-norm of sum_{i>k} V^i/(i+1)!, the low-rank inner-series tail."""
    term = np.eye(v.shape[0])
    for i in range(1, k + 1):
        term = term @ v / (i + 1)
    tail = np.zeros_like(term)
    for i in range(k + 1, k + 1 + extra):
        term = term @ v / (i + 1)
        tail = tail + term
    return np.abs(tail).sum(axis=0).max()


def lu_slogdet(a):
    """(sign, log|det|) through LAPACK, independent of the package's LU."""
    sign, logdet = np.linalg.slogdet(np.asarray(a, dtype=np.float64))
    return float(sign), float(logdet)


def fd_gradient(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def fd_jacobian(f, x, h=1e-6):
    """Central finite-difference Jacobian of vector f at flat vector x."""
    x = np.asarray(x, dtype=np.float64).copy()
    f0 = np.asarray(f(x))
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = np.asarray(f(x)).reshape(-1)
        x[i] = orig - h
        fm = np.asarray(f(x)).reshape(-1)
        x[i] = orig
        jac[:, i] = (fp - fm) / (2 * h)
    return jac


def rel_err(got, want, floor=1e-12):
    got, want = np.asarray(got), np.asarray(want)
    return np.abs(got - want).max() / max(np.abs(want).max(), floor)
