"""Matrix exponentials by scaling-and-squaring over a truncated Taylor series.

The series and the squaring steps are built from ordinary tape operations, so
gradients differentiate exactly the truncated computation that produced the
forward value. A stacked variant serves the per-site couplings; the low-rank
variant evaluates e^(A1 A2) through the t x t inner series.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor
from .rng import Rng
from .tensor import Tensor

DEFAULT_EPS = 1e-8

_MAX_TERMS = 10_000  # far beyond any reachable truncation index; loop guard only


def one_norm(a: np.ndarray) -> float:
    """Matrix 1-norm: maximum absolute column sum. Stacks reduce with max."""
    a = np.asarray(a)
    return float(np.abs(a).sum(axis=-2).max()) if a.size else 0.0


@dataclass
class ExpmReport:
    """Result of one matrix exponential with its cost accounting."""

    result: Tensor
    s: int  # squaring count
    k: int  # truncation counter at loop exit (k >= 2)

    @property
    def m(self) -> int:
        return self.s + self.k - 1


def _validate_square(w: Tensor, eps: float):
    if eps <= 0:
        raise ValueError(f"tolerance must be positive, got {eps}")
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise tensor.ShapeError(f"square matrix required, got {w.shape}")
    if not np.all(np.isfinite(w.data)):
        raise ValueError("matrix has non-finite entries")


def _scaling_count(norm: float) -> int:
    s = 0
    while norm / (2.0**s) >= 0.5:
        s += 1
    return s


def _tracked(*ts) -> bool:
    return tensor._active() is not None and any(t.requires_grad for t in ts)


def _series(w: Tensor, x: Tensor, y: Tensor, k: int, eps: float):
    """Shared accumulation loop: X += Y; Y := W Y / k until ||Y||_1 <= eps."""
    while one_norm(y.data) > eps:
        x = tensor.add(x, y)
        y = tensor.mul(tensor.matmul(w, y), 1.0 / k)
        k += 1
        if k > _MAX_TERMS:
            raise RuntimeError("matrix exponential series failed to converge")
    return x, k


def _series_np(w: np.ndarray, x: np.ndarray, y: np.ndarray, k: int, eps: float):
    # fast path for untracked inputs; same loop on raw arrays
    while one_norm(y) > eps:
        x = x + y
        y = (w @ y) * (1.0 / k)
        k += 1
        if k > _MAX_TERMS:
            raise RuntimeError("matrix exponential series failed to converge")
    return x, k


def matexp(w, eps: float = DEFAULT_EPS) -> ExpmReport:
    """e^W for a single square matrix, reporting s, k and m = s + k - 1."""
    w = w if isinstance(w, Tensor) else Tensor(w)
    _validate_square(w, eps)
    n = w.shape[0]
    s = _scaling_count(one_norm(w.data))
    if not _tracked(w):
        ws = w.data * 2.0**-s if s else w.data
        x, k = _series_np(ws, np.eye(n), ws.copy(), 2, eps)
        for _ in range(s):
            x = x @ x
        return ExpmReport(result=Tensor(x), s=s, k=k)
    ws = tensor.mul(w, 2.0**-s) if s else w
    x, k = _series(ws, Tensor(np.eye(n)), ws, 2, eps)
    for _ in range(s):
        x = tensor.matmul(x, x)
    return ExpmReport(result=x, s=s, k=k)


def matexp_stack(w, eps: float = DEFAULT_EPS):
    """e^W for a stack (B, n, n); one scaling count shared across the stack.

    Returns (result, s, k). The loop runs until every member's running term
    is below eps, so accuracy matches the single-matrix kernel.
    """
    w = w if isinstance(w, Tensor) else Tensor(w)
    if eps <= 0:
        raise ValueError(f"tolerance must be positive, got {eps}")
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise tensor.ShapeError(f"stack of square matrices required, got {w.shape}")
    b, n, _ = w.shape
    s = _scaling_count(one_norm(w.data))
    if not _tracked(w):
        ws = w.data * 2.0**-s if s else w.data
        eye = np.broadcast_to(np.eye(n), (b, n, n)).copy()
        x, k = _series_np(ws, eye, ws.copy(), 2, eps)
        for _ in range(s):
            x = x @ x
        return Tensor(x), s, k
    ws = tensor.mul(w, 2.0**-s) if s else w
    eye = Tensor(np.broadcast_to(np.eye(n), (b, n, n)).copy())
    x, k = _series(ws, eye, ws, 2, eps)
    for _ in range(s):
        x = tensor.matmul(x, x)
    return x, s, k


def _phi_series(v: Tensor, eps: float) -> Tensor:
    """Sum_{i>=0} V^i / (i+1)!  (inner series of the low-rank form)."""
    n = v.shape[-1]
    if v.ndim == 2:
        eye = np.eye(n)
    else:
        eye = np.broadcast_to(np.eye(n), (v.shape[0], n, n)).copy()
    if not _tracked(v):
        x, _ = _series_np(v.data, eye, v.data * 0.5, 3, eps)
        return Tensor(x)
    x, _ = _series(v, Tensor(eye), tensor.mul(v, 0.5), 3, eps)
    return x


def matexp_lowrank(a1, a2, eps: float = DEFAULT_EPS) -> Tensor:
    """e^(A1 A2) = I + A1 (sum_i V^i/(i+1)!) A2 with V = A2 A1.

    Accepts single factors (n,t), (t,n) or stacks (B,n,t), (B,t,n); the inner
    series costs O(t^3) instead of O(n^3).
    """
    a1 = a1 if isinstance(a1, Tensor) else Tensor(a1)
    a2 = a2 if isinstance(a2, Tensor) else Tensor(a2)
    if eps <= 0:
        raise ValueError(f"tolerance must be positive, got {eps}")
    if a1.ndim != a2.ndim or a1.ndim not in (2, 3):
        raise tensor.ShapeError(f"factor ranks disagree: {a1.shape} vs {a2.shape}")
    if a1.shape[-1] != a2.shape[-2] or a1.shape[-2] != a2.shape[-1]:
        raise tensor.ShapeError(f"factor shapes disagree: {a1.shape} vs {a2.shape}")
    n = a1.shape[-2]
    v = tensor.matmul(a2, a1)
    phi = _phi_series(v, eps)
    if a1.ndim == 2:
        eye = Tensor(np.eye(n))
    else:
        eye = Tensor(np.broadcast_to(np.eye(n), (a1.shape[0], n, n)).copy())
    return tensor.add(eye, tensor.matmul(a1, tensor.matmul(phi, a2)))


def truncation_bound(norm1: float, k: int, lowrank: bool = False) -> float:
    """Upper bound on the 1-norm error of truncating the series at index k.

    Full series: norm^(k+1)/(k+1)! * 1/(1 - norm/(k+2)), valid for norm < k+2.
    Low-rank inner series: norm^(k+1)/(k+2)! * 1/(1 - norm/(k+3)), norm < k+3.
    """
    if norm1 < 0:
        raise ValueError(f"1-norm must be nonnegative, got {norm1}")
    limit = k + 3 if lowrank else k + 2
    if norm1 >= limit:
        raise ValueError(f"bound undefined: 1-norm {norm1} outside validity region (< {limit})")
    fact = math.factorial(k + 2) if lowrank else math.factorial(k + 1)
    return (norm1 ** (k + 1) / fact) / (1.0 - norm1 / limit)


def logdet_trace(w) -> float:
    """log det(e^W) = Tr(W); exact and O(n)."""
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise tensor.ShapeError(f"square matrix required, got {w.shape}")
    return float(np.trace(w))


def skew_symmetric_init(n: int, rng: Rng, scale: float = 1.0) -> np.ndarray:
    """W = scale * (B - B^T)/2 with standard-normal B; exactly skew, trace 0."""
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    b = rng.normal((n, n))
    return scale * (b - b.T) / 2.0


def random_with_norm(n: int, target_norm: float, rng: Rng) -> np.ndarray:
    """Random dense matrix rescaled to a target 1-norm."""
    w = rng.normal((n, n))
    norm = one_norm(w)
    return w * (target_norm / norm) if norm else w


def expm_bench(norm_grid, trials: int, eps: float = DEFAULT_EPS, n: int = 8, seed: int = 0, writer=None):
    """Run matexp over random matrices at each target 1-norm; aggregate m.

    Emits CSV rows (norm1, trial, s, k, m) through `writer` when given and
    returns summary statistics of the cost coefficient m.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = Rng(seed, stream=77)
    ms = []
    if writer is not None:
        writer.writerow(["norm1", "trial", "s", "k", "m"])
    for norm1 in norm_grid:
        batch = rng.normal((trials, n, n))
        norms = np.abs(batch).sum(axis=1).max(axis=1)
        scale = np.where(norms > 0, float(norm1) / np.where(norms > 0, norms, 1.0), 1.0)
        batch *= scale[:, None, None]
        for trial in range(trials):
            rep = matexp(batch[trial], eps)
            ms.append(rep.m)
            if writer is not None:
                writer.writerow([f"{float(norm1):g}", trial, rep.s, rep.k, rep.m])
    ms = np.array(ms, dtype=np.float64)
    return {
        "mean": float(ms.mean()),
        "std": float(ms.std()),
        "max": int(ms.max()),
        "min": int(ms.min()),
        "count": int(ms.size),
    }


def write_bench_csv(path, norm_grid, trials, eps=DEFAULT_EPS, n=8, seed=0, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        stats = expm_bench(norm_grid, trials, eps=eps, n=n, seed=seed, writer=csv.writer(fh))
    return stats
