"""Training harness: NLL objective, Adamax/Adam, divergence retry, metrics.

On divergence (non-finite loss or gradient, or per-dim NLL above the
configured ceiling) the harness restores the last checkpoint, re-seeds every
stabilizer's u1/u2 at initial * 2^-r after r retries, and restarts the epoch,
up to the retry budget.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields

import numpy as np

from . import checkpoint, data, optim, tensor
from .data import Dataset, DatasetSpec
from .model import FlowModel, ModelConfig
from .rng import Rng
from .tensor import Tape, Tensor

# rng stream ids (offsets keep epochs and purposes apart)
STREAM_SHUFFLE = 500
STREAM_DEQUANT = 300
STREAM_TEST_DEQUANT = 299

METRICS_COLUMNS = "epoch,step,nll_nats,bpd,grad_norm,retries,wall_ms"


class TrainingAbortedError(RuntimeError):
    """Retry budget exhausted; .result carries the full metrics so far."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


class ConfigMismatchError(ValueError):
    """Checkpoint config does not match what the loader expects."""


class _Diverged(Exception):
    pass


@dataclass
class RunConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    seed: int = 0
    optimizer: str = "adamax"
    max_retries: int = 5
    divergence_nll_per_dim: float = 20.0
    clip_norm: float = 50.0  # 0 disables clipping
    checkpoint_every: int = 1
    test_fraction: float = 0.1
    deterministic: bool = False

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.optimizer not in ("adamax", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return self

    def to_lines(self):
        return [f"run.{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        for f in fields(cls):
            key = f"run.{f.name}"
            if key not in mapping:
                continue
            raw = mapping[key]
            if f.type == "int":
                kwargs[f.name] = int(raw)
            elif f.type == "float":
                kwargs[f.name] = float(raw)
            elif f.type == "bool":
                kwargs[f.name] = str(raw).lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = raw
        return cls(**kwargs).validate()


@dataclass
class TrainResult:
    out_dir: str
    metrics_path: str
    checkpoint_path: str
    epochs_run: int
    global_step: int
    retries: int
    init_test_nll: float
    final_test_nll: float
    final_test_bpd: float | None
    history: list
    epoch_wall_ms: list


def config_echo(run: RunConfig, model_cfg: ModelConfig, spec: DatasetSpec | None):
    lines = run.to_lines() + model_cfg.to_lines()
    if spec is not None:
        lines += spec.to_lines()
    return lines


def parse_mapping(config_text: str) -> dict:
    mapping = {}
    for line in config_text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {line!r}")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def _checkpoint_arrays(model: FlowModel, optimizer, global_step, epoch, retries):
    arrays = {f"param/{k}": p.data for k, p in model.parameters().items()}
    arrays.update(optimizer.state_arrays())
    arrays["meta/step"] = np.array([float(global_step)])
    arrays["meta/epoch"] = np.array([float(epoch)])
    arrays["meta/retries"] = np.array([float(retries)])
    return arrays


def _restore(path, model: FlowModel, optimizer):
    _, arrays = checkpoint.load(path)
    for name, p in model.parameters().items():
        p.data = arrays[f"param/{name}"].reshape(p.shape).copy()
    optimizer.load_state(arrays)
    return arrays


def evaluate_nll(model: FlowModel, xs: np.ndarray, batch_size: int = 512):
    """(mean, std) of per-sample negative log likelihood in nats."""
    vals = []
    for lo in range(0, xs.shape[0], batch_size):
        lp = model.log_prob(Tensor(xs[lo : lo + batch_size]))
        vals.append(-lp.data)
    vals = np.concatenate(vals)
    return float(vals.mean()), float(vals.std())


def _prepare_splits(ds: Dataset, run: RunConfig):
    train_x, test_x = data.train_test_split(ds.x, seed=run.seed, test_fraction=run.test_fraction)
    if ds.is_image:
        test_eval = data.dequantize(
            test_x, Rng(run.seed, stream=STREAM_TEST_DEQUANT), ds.discrete_levels
        )
    else:
        test_eval = test_x
    return train_x, test_eval


class _MetricsWriter:
    def __init__(self, path, header_lines):
        self.path = path
        self._fh = open(path, "w")
        for line in header_lines:
            self._fh.write(f"# {line}\n")
        self._fh.write(METRICS_COLUMNS + "\n")
        self._fh.flush()

    def comment(self, text):
        self._fh.write(f"# {text}\n")
        self._fh.flush()

    def row(self, epoch, step, nll, bpd, grad_norm, retries, wall_ms):
        bpd_txt = f"{bpd:.6g}" if bpd is not None else ""
        self._fh.write(
            f"{epoch},{step},{nll:.10g},{bpd_txt},{grad_norm:.6g},{retries},{wall_ms}\n"
        )
        self._fh.flush()

    def close(self):
        self._fh.close()


def train(run: RunConfig, model_cfg: ModelConfig, spec: DatasetSpec, out_dir,
          inject_inf_at_step: int | None = None) -> TrainResult:
    """Minimize mean NLL; returns metrics and the final checkpoint path.

    `inject_inf_at_step` is a test hook: the loss at that global step reads as
    +inf once (first attempt only), forcing one pass of the retry protocol.
    """
    import os

    run.validate()
    model_cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    restore_path = os.path.join(out_dir, "checkpoint.mef")
    final_path = os.path.join(out_dir, "final.mef")

    ds = data.load(spec)
    train_x, test_eval = _prepare_splits(ds, run)
    model = FlowModel(model_cfg, seed=run.seed)
    params = model.parameters()
    optimizer = optim.make_optimizer(run.optimizer, params, run.lr)
    echo = config_echo(run, model_cfg, spec)
    config_text = "\n".join(echo) + "\n"
    writer = _MetricsWriter(metrics_path, echo)

    n_train = train_x.shape[0]
    batch = min(run.batch_size, n_train)
    steps_per_epoch = max(1, n_train // batch)

    def batch_at(epoch, i, perm, epoch_rng):
        idx = perm[i * batch : (i + 1) * batch]
        xb = train_x[idx]
        if ds.is_image:
            xb = data.dequantize(xb, epoch_rng, ds.discrete_levels)
        return xb

    # actnorm init on the designated first batch
    first_perm = Rng(run.seed, stream=STREAM_SHUFFLE).permutation(n_train)
    init_rng = Rng(run.seed, stream=STREAM_DEQUANT)
    model.init_actnorm(Tensor(batch_at(0, 0, first_perm, init_rng)))
    init_test_nll, _ = evaluate_nll(model, test_eval)
    writer.comment(f"init_test_nll={init_test_nll:.10g}")

    global_step = 0
    retries = 0
    history = []
    epoch_wall = []
    checkpoint.save(restore_path, config_text,
                    _checkpoint_arrays(model, optimizer, global_step, 0, retries))

    def run_epoch(epoch):
        nonlocal global_step
        perm = Rng(run.seed, stream=STREAM_SHUFFLE + 1 + epoch).permutation(n_train)
        epoch_rng = Rng(run.seed, stream=STREAM_DEQUANT + 1 + epoch)
        nlls, norms = [], []
        clamped = 0
        start_step = global_step
        t0 = time.perf_counter()
        for i in range(steps_per_epoch):
            xb = batch_at(epoch, i, perm, epoch_rng)
            try:
                with Tape() as tape:
                    lp = model.log_prob(Tensor(xb))
                    loss = tensor.mul(tensor.reduce_mean(lp), -1.0)
                loss_val = loss.item()
                if inject_inf_at_step is not None and retries == 0 and global_step == inject_inf_at_step:
                    loss_val = math.inf
                if not math.isfinite(loss_val):
                    raise _Diverged(f"non-finite loss at step {global_step}")
                if loss_val / model.total_dim > run.divergence_nll_per_dim:
                    raise _Diverged(
                        f"per-dim NLL {loss_val / model.total_dim:.3g} above ceiling "
                        f"at step {global_step}"
                    )
                tape.backward(loss, np.ones(()))
                grads = {
                    k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    for k, p in params.items()
                }
                norm = optim.clip_by_global_norm(grads, run.clip_norm)
                if not math.isfinite(norm):
                    raise _Diverged(f"non-finite gradient at step {global_step}")
                optimizer.step(grads)
            except FloatingPointError as exc:  # non-finite activations or gradients
                raise _Diverged(str(exc)) from exc
            for a in model.actnorms():
                clamped += a.clamp_scale()
            global_step = start_step + i + 1
            nlls.append(loss_val)
            norms.append(norm)
        wall = (time.perf_counter() - t0) * 1000.0
        if clamped:
            writer.comment(f"actnorm scale clamped {clamped} times in epoch {epoch}")
        return float(np.mean(nlls)), float(np.mean(norms)), wall

    epoch = 0
    while epoch < run.epochs:
        step_before = global_step
        try:
            nll, grad_norm, wall = run_epoch(epoch)
        except _Diverged as diverged:
            retries += 1
            global_step = step_before
            if retries > run.max_retries:
                writer.comment(f"aborted: retries exhausted ({diverged})")
                writer.close()
                result = TrainResult(
                    out_dir=str(out_dir), metrics_path=metrics_path,
                    checkpoint_path=final_path, epochs_run=epoch,
                    global_step=global_step, retries=retries,
                    init_test_nll=init_test_nll, final_test_nll=math.nan,
                    final_test_bpd=None, history=history, epoch_wall_ms=epoch_wall,
                )
                raise TrainingAbortedError(str(diverged), result) from diverged
            arrays = _restore(restore_path, model, optimizer)
            global_step = int(arrays["meta/step"][0])
            scale = 2.0**-retries
            u1, u2 = model_cfg.u1_init * scale, model_cfg.u2_init * scale
            for stab in model.stabilizers():
                stab.reset(u1, u2)
            writer.comment(
                f"retry {retries} epoch={epoch} u1={u1:g} u2={u2:g} ({diverged})"
            )
            continue
        bpd = None
        if ds.is_image:
            bpd = nll / (model.total_dim * math.log(2)) + math.log2(ds.discrete_levels)
        wall_out = 0 if run.deterministic else int(round(wall))
        writer.row(epoch, global_step, nll, bpd, grad_norm, retries, wall_out)
        history.append(
            {"epoch": epoch, "step": global_step, "nll_nats": nll, "bpd": bpd,
             "grad_norm": grad_norm, "retries": retries, "wall_ms": wall_out}
        )
        epoch_wall.append(wall)
        epoch += 1
        if epoch % run.checkpoint_every == 0:
            checkpoint.save(restore_path, config_text,
                            _checkpoint_arrays(model, optimizer, global_step, epoch, retries))

    final_test_nll, _ = evaluate_nll(model, test_eval)
    final_bpd = None
    if ds.is_image:
        final_bpd = final_test_nll / (model.total_dim * math.log(2)) + math.log2(ds.discrete_levels)
    writer.comment(f"final_test_nll={final_test_nll:.10g}")
    writer.close()
    checkpoint.save(final_path, config_text,
                    _checkpoint_arrays(model, optimizer, global_step, epoch, retries))
    return TrainResult(
        out_dir=str(out_dir), metrics_path=metrics_path, checkpoint_path=final_path,
        epochs_run=epoch, global_step=global_step, retries=retries,
        init_test_nll=init_test_nll, final_test_nll=final_test_nll,
        final_test_bpd=final_bpd, history=history, epoch_wall_ms=epoch_wall,
    )


@dataclass
class CheckpointBundle:
    model: FlowModel
    optimizer: object
    run: RunConfig
    spec: DatasetSpec | None
    mapping: dict
    meta: dict


def load_checkpoint(path, expect: dict | None = None) -> CheckpointBundle:
    """Rebuild (model, optimizer, run config) from a checkpoint file.

    `expect` maps config keys to required values; mismatches are rejected with
    a report naming every offending key.
    """
    config_text, arrays = checkpoint.load(path)
    mapping = parse_mapping(config_text)
    if expect:
        bad = [
            f"{key}: checkpoint has {mapping.get(key)!r}, expected {value!r}"
            for key, value in expect.items()
            if str(mapping.get(key)) != str(value)
        ]
        if bad:
            raise ConfigMismatchError("config mismatch: " + "; ".join(bad))
    run = RunConfig.from_mapping(mapping)
    model_cfg = ModelConfig.from_mapping(mapping)
    spec = DatasetSpec.from_mapping(mapping) if "data.kind" in mapping else None
    model = FlowModel(model_cfg, seed=run.seed)
    for name, p in model.parameters().items():
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != p.shape:
            raise ConfigMismatchError(f"checkpoint parameter {key!r} missing or misshapen")
        p.data = arrays[key].copy()
    for a in model.actnorms():
        a.initialized = True  # checkpoints are only written after init
    optimizer = optim.make_optimizer(run.optimizer, model.parameters(), run.lr)
    if "optim/t" in arrays:
        optimizer.load_state(arrays)
    meta = {k: v for k, v in arrays.items() if k.startswith("meta/")}
    return CheckpointBundle(model, optimizer, run, spec, mapping, meta)
