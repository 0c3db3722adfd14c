"""Invertible flow layers: actnorm, couplings, 1x1 convolutions, squeeze, split.

Every layer follows the same contract: `forward(x) -> (y, logdet)` with x of
shape (N, h, w, c) and logdet of shape (N,), and `inverse(y) -> x` the exact
algebraic inverse. Forward passes run through the tape and are differentiable;
inverse passes work on plain values (sampling needs no gradients).
"""

from __future__ import annotations

import numpy as np

from . import linalg, matexp, tensor
from .rng import Rng
from .tensor import ShapeError, Tensor

ACTNORM_SCALE_FLOOR = 1e-12


class NonInvertibleError(RuntimeError):
    """A layer's parameters make it non-invertible at apply time."""


class NotInitializedError(RuntimeError):
    """Data-dependent parameters used before initialization."""


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_image(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be (N, h, w, c), got {x.shape}")


def _batch_scalar(value, n):
    """Broadcast a scalar tensor to a per-sample (N,) logdet."""
    return tensor.mul(Tensor(np.ones(n)), value)


class Stabilizer:
    """Learnable scalars (u1, v1, u2, v2) bounding the effective log-scale.

    Applied elementwise: u1 * tanh(u2 * t + v2) + v1. Initialized with
    v1 = v2 = 0; u1, u2 start at the configured value and are re-seeded by
    the divergence-retry schedule.
    """

    def __init__(self, u1=1.0, u2=1.0):
        self.u1 = Tensor(float(u1), requires_grad=True)
        self.v1 = Tensor(0.0, requires_grad=True)
        self.u2 = Tensor(float(u2), requires_grad=True)
        self.v2 = Tensor(0.0, requires_grad=True)

    def __call__(self, t):
        squashed = tensor.tanh(tensor.add(tensor.mul(self.u2, t), self.v2))
        return tensor.add(tensor.mul(self.u1, squashed), self.v1)

    def reset(self, u1, u2):
        self.u1.data = np.asarray(float(u1))
        self.u2.data = np.asarray(float(u2))
        self.v1.data = np.asarray(0.0)
        self.v2.data = np.asarray(0.0)

    def parameters(self):
        return {"u1": self.u1, "v1": self.v1, "u2": self.u2, "v2": self.v2}


class FlowLayer:
    """Contract: forward(x) -> (y, logdet per sample); inverse(y) -> x."""

    name = "flow"

    def parameters(self) -> dict:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError


class ActNorm(FlowLayer):
    """Per-channel scale and bias; first forward standardizes the init batch."""

    def __init__(self, channels: int):
        self.channels = channels
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.initialized = False

    def parameters(self):
        return {"scale": self.scale, "bias": self.bias}

    def _init_from(self, x):
        mean = x.data.mean(axis=(0, 1, 2))
        std = x.data.std(axis=(0, 1, 2))
        std = np.maximum(std, ACTNORM_SCALE_FLOOR)
        self.scale.data = 1.0 / std
        self.bias.data = -mean / std
        self.initialized = True

    def clamp_scale(self) -> bool:
        """Keep |scale| away from zero after optimizer updates; True if clamped."""
        mag = np.abs(self.scale.data)
        if np.all(mag >= ACTNORM_SCALE_FLOOR):
            return False
        sign = np.where(self.scale.data >= 0, 1.0, -1.0)
        self.scale.data = sign * np.maximum(mag, ACTNORM_SCALE_FLOOR)
        return True

    def forward(self, x):
        x = _as_tensor(x)
        _check_image(x)
        if not self.initialized:
            self._init_from(x)
        if np.any(self.scale.data == 0.0):
            raise NonInvertibleError(f"{self.name}: zero scale entry")
        n, h, w, _ = x.shape
        y = tensor.add(tensor.mul(x, self.scale), self.bias)
        logdet = tensor.mul(tensor.reduce_sum(tensor.log_abs(self.scale)), float(h * w))
        return y, _batch_scalar(logdet, n)

    def inverse(self, y):
        y = _as_tensor(y)
        _check_image(y)
        if not self.initialized:
            raise NotInitializedError(f"{self.name}: inverse before data-dependent init")
        if np.any(self.scale.data == 0.0):
            raise NonInvertibleError(f"{self.name}: zero scale entry")
        return Tensor((y.data - self.bias.data) / self.scale.data)


def _split_halves(x):
    c = x.shape[3]
    if c % 2:
        raise ShapeError(f"coupling needs an even channel count, got {c}")
    return tensor.narrow(x, 3, 0, c // 2), tensor.narrow(x, 3, c // 2, c // 2)


class AffineCoupling(FlowLayer):
    """Half the channels rescaled elementwise, conditioned on the other half."""

    def __init__(self, channels, conditioner, stabilizer: Stabilizer | None = None):
        self.channels = channels
        self.conditioner = conditioner
        self.stabilizer = stabilizer or Stabilizer()

    def parameters(self):
        out = {f"cond.{k}": v for k, v in self.conditioner.parameters().items()}
        out.update({f"stab.{k}": v for k, v in self.stabilizer.parameters().items()})
        return out

    def _params_for(self, x1, like):
        s_raw, b = self.conditioner(x1)
        if s_raw.shape != like.shape or b.shape != like.shape:
            raise ShapeError(
                f"conditioner emitted {s_raw.shape}/{b.shape}, expected {like.shape}"
            )
        return self.stabilizer(s_raw), b

    def forward(self, x):
        x = _as_tensor(x)
        _check_image(x)
        x1, x2 = _split_halves(x)
        s_eff, b = self._params_for(x1, x2)
        y2 = tensor.add(tensor.mul(tensor.exp(s_eff), x2), b)
        logdet = tensor.reduce_sum(s_eff, axes=(1, 2, 3))
        return tensor.concat([x1, y2], 3), logdet

    def inverse(self, y):
        y = _as_tensor(y)
        _check_image(y)
        y1, y2 = _split_halves(y)
        s_eff, b = self._params_for(y1, y2)
        x2 = np.exp(-s_eff.data) * (y2.data - b.data)
        return Tensor(np.concatenate([y1.data, x2], axis=3))


class MatExpCoupling(FlowLayer):
    """Coupling whose second half is mapped by a matrix exponential.

    form = "dense":    one p x p matrix over the flattened second half
    form = "location": a c x c matrix per spatial site
    form = "lowrank":  per-site factors A1 (c x t), A2 (t x c)

    The stabilizer squashes the matrix entries elementwise. For the lowrank
    form it applies to the product A1 A2 by default (the documented equation),
    which costs the O(t^3) shortcut; `stabilize_factors=True` squashes the
    factors instead and keeps the inner-series path.
    """

    def __init__(self, channels, conditioner, form, stabilizer=None,
                 eps=matexp.DEFAULT_EPS, stabilize_factors=False):
        if form not in ("dense", "location", "lowrank"):
            raise ValueError(f"unknown coupling form {form!r}")
        self.channels = channels
        self.conditioner = conditioner
        self.form = form
        self.stabilizer = stabilizer or Stabilizer()
        self.eps = eps
        self.stabilize_factors = stabilize_factors

    def parameters(self):
        out = {f"cond.{k}": v for k, v in self.conditioner.parameters().items()}
        out.update({f"stab.{k}": v for k, v in self.stabilizer.parameters().items()})
        return out

    def _emit(self, x1, n, h, w, cx):
        """Run the conditioner and return (S_tilde or factors, b, sites)."""
        if self.form == "dense":
            s_raw, b = self.conditioner(x1)
            p = h * w * cx
            if s_raw.shape != (n, p, p) or b.shape != (n, p):
                raise ShapeError(
                    f"conditioner emitted {s_raw.shape}/{b.shape}, expected {(n, p, p)}/{(n, p)}"
                )
            return self.stabilizer(s_raw), b
        if self.form == "location":
            s_raw, b = self.conditioner(x1)
            sites = n * h * w
            if s_raw.shape != (sites, cx, cx) or b.shape != (n, h, w, cx):
                raise ShapeError(
                    f"conditioner emitted {s_raw.shape}/{b.shape}, "
                    f"expected {(sites, cx, cx)}/{(n, h, w, cx)}"
                )
            return self.stabilizer(s_raw), b
        a1, a2, b = self.conditioner(x1)
        sites = n * h * w
        t = a1.shape[-1]
        if a1.shape != (sites, cx, t) or a2.shape != (sites, t, cx) or b.shape != (n, h, w, cx):
            raise ShapeError(
                f"conditioner emitted {a1.shape}/{a2.shape}/{b.shape} for lowrank form"
            )
        if self.stabilize_factors:
            return (self.stabilizer(a1), self.stabilizer(a2)), b
        return self.stabilizer(tensor.matmul(a1, a2)), b

    def _apply(self, x2, emitted, b, n, h, w, cx, sign):
        """Map x2 through e^(sign * S) and add sign-adjusted bias; return (y2, logdet)."""
        lowrank_factors = isinstance(emitted, tuple)
        if self.form == "dense":
            p = h * w * cx
            s_t = emitted if sign > 0 else tensor.neg(emitted)
            e, _, _ = matexp.matexp_stack(s_t, self.eps)
            vec = tensor.reshape(x2, (n, p, 1))
            out = tensor.reshape(tensor.matmul(e, vec), (n, p))
            logdet = tensor.trace(emitted)
            return out, logdet
        sites = n * h * w
        vec = tensor.reshape(x2, (sites, cx, 1))
        if lowrank_factors:
            a1, a2 = emitted
            if sign < 0:
                a1 = tensor.neg(a1)
            e = matexp.matexp_lowrank(a1, a2, self.eps)
            # Tr(A1 A2) = sum of A1 * A2^T without forming the product
            prod = tensor.mul(a1 if sign > 0 else tensor.neg(a1), tensor.transpose(a2, (0, 2, 1)))
            logdet_sites = tensor.reduce_sum(prod, axes=(1, 2))
        else:
            s_t = emitted if sign > 0 else tensor.neg(emitted)
            e, _, _ = matexp.matexp_stack(s_t, self.eps)
            logdet_sites = tensor.trace(emitted)
        out = tensor.reshape(tensor.matmul(e, vec), (sites, cx))
        logdet = tensor.reduce_sum(tensor.reshape(logdet_sites, (n, h * w)), axes=(1,))
        return out, logdet

    def forward(self, x):
        x = _as_tensor(x)
        _check_image(x)
        x1, x2 = _split_halves(x)
        n, h, w, cx = x2.shape
        emitted, b = self._emit(x1, n, h, w, cx)
        if self.form == "dense":
            flat = tensor.reshape(x2, (n, h * w * cx))
            out, logdet = self._apply(flat, emitted, b, n, h, w, cx, +1)
            y2 = tensor.reshape(tensor.add(out, b), (n, h, w, cx))
        else:
            out, logdet = self._apply(x2, emitted, b, n, h, w, cx, +1)
            y2 = tensor.add(tensor.reshape(out, (n, h, w, cx)), b)
        return tensor.concat([x1, y2], 3), logdet

    def inverse(self, y):
        y = _as_tensor(y)
        _check_image(y)
        y1, y2 = _split_halves(y)
        n, h, w, cx = y2.shape
        emitted, b = self._emit(y1, n, h, w, cx)
        if self.form == "dense":
            resid = tensor.reshape(tensor.sub(y2, tensor.reshape(b, (n, h, w, cx))), (n, h * w * cx))
            out, _ = self._apply(resid, emitted, b, n, h, w, cx, -1)
            x2 = tensor.reshape(out, (n, h, w, cx))
        else:
            resid = tensor.sub(y2, b)
            out, _ = self._apply(resid, emitted, b, n, h, w, cx, -1)
            x2 = tensor.reshape(out, (n, h, w, cx))
        return Tensor(np.concatenate([y1.data, x2.data], axis=3))


class Conv1x1(FlowLayer):
    """Channel-mixing linear map shared across spatial sites.

    variant "matexp":   E = e^W, always invertible, logdet = h*w*Tr(W)
    variant "standard": free matrix M, logdet via LU, invertible only as a
                        runtime property
    variant "plu":      fixed permutation, unit lower L, upper U with
                        sign-frozen nonzero diagonal
    """

    def __init__(self, channels, variant, rng: Rng, eps=matexp.DEFAULT_EPS, init_scale=1.0):
        if variant not in ("matexp", "standard", "plu"):
            raise ValueError(f"unknown conv1x1 variant {variant!r}")
        self.channels = channels
        self.variant = variant
        self.eps = eps
        c = channels
        # all three variants start from a random rotation for comparable budgets
        skew = matexp.skew_symmetric_init(c, rng, scale=init_scale)
        if variant == "matexp":
            self.weight = Tensor(skew, requires_grad=True)
        else:
            rotation = matexp.matexp(skew, eps=1e-13).result.data
            if variant == "standard":
                self.weight = Tensor(rotation, requires_grad=True)
            else:
                perm, lower, upper = linalg.plu_decompose(rotation)
                diag = np.diag(upper).copy()
                self.perm = perm
                self.sign = np.sign(diag)
                self.lower_raw = Tensor(np.tril(lower, -1), requires_grad=True)
                self.upper_raw = Tensor(np.triu(upper, 1), requires_grad=True)
                self.log_diag = Tensor(np.log(np.abs(diag)), requires_grad=True)
                self._mask_low = np.tril(np.ones((c, c)), -1)
                self._mask_up = np.triu(np.ones((c, c)), 1)

    def parameters(self):
        if self.variant == "plu":
            return {"lower": self.lower_raw, "upper": self.upper_raw, "log_diag": self.log_diag}
        return {"weight": self.weight}

    def _plu_matrices(self):
        c = self.channels
        lower = tensor.add(tensor.mul(self.lower_raw, Tensor(self._mask_low)), Tensor(np.eye(c)))
        diag = tensor.mul(tensor.exp(self.log_diag), Tensor(self.sign))
        upper = tensor.add(tensor.mul(self.upper_raw, Tensor(self._mask_up)),
                           tensor.mul(Tensor(np.eye(c)), diag))
        return lower, upper

    def _mixing_matrix(self):
        """(E, logdet_per_site) as tensors."""
        if self.variant == "matexp":
            return matexp.matexp(self.weight, self.eps).result, tensor.trace(self.weight)
        if self.variant == "standard":
            try:
                logdet = tensor.logabsdet(self.weight)
            except linalg.SingularMatrixError as exc:
                raise NonInvertibleError(f"{self.name}: singular weight ({exc})") from exc
            return self.weight, logdet
        lower, upper = self._plu_matrices()
        e = tensor.matmul(Tensor(self.perm), tensor.matmul(lower, upper))
        return e, tensor.reduce_sum(self.log_diag)

    def forward(self, x):
        x = _as_tensor(x)
        _check_image(x)
        n, h, w, c = x.shape
        if c != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {c}")
        e, logdet_site = self._mixing_matrix()
        flat = tensor.reshape(x, (n * h * w, c))
        y = tensor.reshape(tensor.matmul(flat, tensor.transpose(e, (1, 0))), (n, h, w, c))
        logdet = tensor.mul(logdet_site, float(h * w))
        return y, _batch_scalar(logdet, n)

    def inverse(self, y):
        y = _as_tensor(y)
        _check_image(y)
        n, h, w, c = y.shape
        cols = y.data.reshape(n * h * w, c).T
        if self.variant == "matexp":
            e_inv = matexp.matexp(tensor.neg(self.weight), self.eps).result.data
            x = e_inv @ cols
        elif self.variant == "standard":
            try:
                x = linalg.solve(self.weight.data, cols)
            except linalg.SingularMatrixError as exc:
                raise NonInvertibleError(f"{self.name}: singular weight ({exc})") from exc
            x = np.asarray(x)
        else:
            lower, upper = self._plu_matrices()
            z = self.perm.T @ cols
            z = linalg.solve_triangular(lower.data, z, lower=True, unit_diagonal=True)
            x = linalg.solve_triangular(upper.data, z, lower=False)
        return Tensor(x.T.reshape(n, h, w, c))


# --- volume-preserving rearrangements ---------------------------------------


def squeeze(x):
    """(N, h, w, c) -> (N, h/2, w/2, 4c); 2x2 blocks to channels, logdet 0."""
    return tensor.space_to_channels(_as_tensor(x))


def unsqueeze(x):
    return tensor.channels_to_space(_as_tensor(x))


def split_channels(x):
    """First half of channels kept for further flow, second half factored out."""
    x = _as_tensor(x)
    _check_image(x)
    c = x.shape[3]
    if c % 2:
        raise ShapeError(f"split needs an even channel count, got {c}")
    return tensor.narrow(x, 3, 0, c // 2), tensor.narrow(x, 3, c // 2, c // 2)


def unsplit_channels(kept, factored):
    return tensor.concat([_as_tensor(kept), _as_tensor(factored)], 3)
