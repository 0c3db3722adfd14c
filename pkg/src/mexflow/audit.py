"""Invertibility and log-determinant audit over a whole model.

Walks the flow layer by layer at in-distribution activations, measuring
round-trip reconstruction error everywhere and, when the dimension is small
enough to afford a full Jacobian, checking each reported log-determinant
against central finite differences plus an LU determinant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as layers_mod
from .model import FlowModel
from .rng import Rng
from .tensor import Tensor

ROUNDTRIP_TOL = 1e-5
LOGDET_TOL = 1e-3
LOGDET_DIM_CAP = 128
FD_STEP = 1e-5


@dataclass
class LayerAudit:
    name: str
    roundtrip_err: float
    logdet_err: float | None = None
    failure: str | None = None

    @property
    def ok(self):
        if self.failure:
            return False
        if self.roundtrip_err > ROUNDTRIP_TOL:
            return False
        return self.logdet_err is None or self.logdet_err <= LOGDET_TOL

    def describe(self):
        ld = f"{self.logdet_err:.3e}" if self.logdet_err is not None else "skipped"
        tail = f"  FAILED ({self.failure})" if self.failure else ("" if self.ok else "  FAILED")
        return f"{self.name}: roundtrip={self.roundtrip_err:.3e} logdet={ld}{tail}"


@dataclass
class AuditReport:
    layers: list = field(default_factory=list)
    model_roundtrip: float = float("nan")
    model_logdet_err: float | None = None
    failure: str | None = None

    @property
    def ok(self):
        if self.failure:
            return False
        if not all(row.ok for row in self.layers):
            return False
        if self.model_roundtrip > ROUNDTRIP_TOL:
            return False
        return self.model_logdet_err is None or self.model_logdet_err <= LOGDET_TOL

    def offenders(self):
        out = [row.name for row in self.layers if not row.ok]
        if self.failure:
            out.append(self.failure)
        if self.model_roundtrip > ROUNDTRIP_TOL:
            out.append("model roundtrip")
        if self.model_logdet_err is not None and self.model_logdet_err > LOGDET_TOL:
            out.append("model logdet")
        return out


def _fd_jacobian(f, x0, h=FD_STEP):
    x0 = np.asarray(x0, dtype=np.float64).copy()
    f0 = f(x0)
    jac = np.zeros((f0.size, x0.size))
    for i in range(x0.size):
        orig = x0[i]
        x0[i] = orig + h
        fp = f(x0)
        x0[i] = orig - h
        fm = f(x0)
        x0[i] = orig
        jac[:, i] = (fp - fm) / (2 * h)
    return jac


def _layer_logdet_err(layer, x_single):
    shape = x_single.shape

    def f(flat):
        y, _ = layer.forward(Tensor(flat.reshape(shape)))
        return y.data.reshape(-1)

    jac = _fd_jacobian(f, x_single.reshape(-1))
    sign, ld_fd = np.linalg.slogdet(jac)
    if sign <= 0:
        return float("inf")
    _, ld = layer.forward(Tensor(x_single))
    reported = float(ld.data[0])
    return abs(reported - ld_fd) / max(1.0, abs(reported))


def audit_model(model: FlowModel, rng: Rng, batch: int = 8,
                logdet_dim_cap: int = LOGDET_DIM_CAP) -> AuditReport:
    """Round-trip and finite-difference log-det suites at real activations."""
    cfg = model.cfg
    if cfg.kind == "vector":
        x = rng.normal((batch, cfg.dim))
    else:
        x = rng.uniform((batch, cfg.height, cfg.width, cfg.channels))
    if not all(a.initialized for a in model.actnorms()):
        model.init_actnorm(Tensor(x))
    report = AuditReport()

    h = model._wrap(Tensor(x))
    image = cfg.kind == "image"
    for steps, split in zip(model.steps_per_level, model._splits):
        if image:
            h = layers_mod.squeeze(h)
        for step in steps:
            for layer in step:
                try:
                    y, _ = layer.forward(h)
                    back = layer.inverse(y)
                    rt = float(np.abs(back.data - h.data).max())
                    ld_err = None
                    per_sample = int(np.prod(h.shape[1:]))
                    if per_sample <= logdet_dim_cap:
                        ld_err = _layer_logdet_err(layer, h.data[:1].copy())
                    report.layers.append(LayerAudit(layer.name, rt, ld_err))
                    h = y
                except (layers_mod.NonInvertibleError, layers_mod.NotInitializedError) as exc:
                    report.layers.append(
                        LayerAudit(layer.name, float("inf"), failure=str(exc))
                    )
                    return report
        if split:
            h, _ = layers_mod.split_channels(h)

    try:
        parts, logdet = model.forward(Tensor(x))
        back = model.inverse([p.data for p in parts])
        report.model_roundtrip = float(np.abs(back.data - x).max())
        if model.total_dim <= logdet_dim_cap:
            def f(flat):
                ps, _ = model.forward(Tensor(flat.reshape((1,) + x.shape[1:])))
                return np.concatenate([p.data.reshape(-1) for p in ps])

            jac = _fd_jacobian(f, x[:1].reshape(-1).copy())
            sign, ld_fd = np.linalg.slogdet(jac)
            reported = float(logdet.data[0])
            if sign <= 0:
                report.model_logdet_err = float("inf")
            else:
                report.model_logdet_err = abs(reported - ld_fd) / max(1.0, abs(reported))
    except (layers_mod.NonInvertibleError, layers_mod.NotInitializedError) as exc:
        report.failure = f"model pass failed: {exc}"
    return report
