"""Finite-difference training of the tiny focusing network on azimuth strips.

Gradients are central differences over the full parameter vector. A
perturbation inside one layer only changes the network from that layer on,
so the activations entering each layer are cached once per batch and reused.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .loss import (
    DEFAULT_SCALE,
    KdWeights,
    LossWeights,
    TERMS,
    af_loss,
    informativeness_weights,
    kd_loss,
    metrics,
)
from .sarcore import NormalizationSpec
from .ssm import CHAIN, TinyModel, range_positions, strip_inputs


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_good: TinyModel | None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 3
    clip: float = 0.5
    max_epochs: int = 300
    patience: int = 40
    min_delta: float = 1e-5
    strip_len: int = 1000
    batch_strips: int = 61
    grad_accum: int = 2
    seed: int = 42
    fd_step: float = 1e-4
    val_fraction: float = 0.0

    def __post_init__(self):
        for name in ("lr", "clip", "max_epochs", "strip_len", "batch_strips", "grad_accum", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.warmup_epochs < 0 or self.patience < 1:
            raise ValueError("warmup_epochs must be >= 0 and patience >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def from_mapping(cls, d) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise KeyError(f"unknown training keys: {', '.join(sorted(unknown))}")
        return cls(**{k: (int(v) if types[k] == "int" else float(v)) for k, v in d.items()})


class TeacherKind(enum.Enum):
    DSP_ORACLE = "dsp_oracle"
    SSM_TEACHER = "ssm_teacher"


@dataclass(frozen=True)
class TeacherRef:
    kind: TeacherKind = TeacherKind.DSP_ORACLE
    model: TinyModel | None = None

    def __post_init__(self):
        if self.kind is TeacherKind.SSM_TEACHER and self.model is None:
            raise ValueError("an SSM teacher needs a model")

    def predict(self, data: "StripDataset") -> np.ndarray:
        if self.kind is TeacherKind.DSP_ORACLE:
            return data.targets
        out = self.model.forward_strip(strip_inputs(data.inputs, data.p_r))
        return out[..., 0] + 1j * out[..., 1]


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StripDataset:
    inputs: np.ndarray      # (S, L) complex, normalised range-compressed strips
    targets: np.ndarray     # (S, L) complex, normalised focused strips
    p_r: np.ndarray         # (S,) range position feature
    origin: np.ndarray      # (S, 2) range bin and first pulse of each strip
    scale: float = DEFAULT_SCALE

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def strip_len(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "StripDataset":
        idx = np.asarray(idx)
        return StripDataset(self.inputs[idx], self.targets[idx], self.p_r[idx], self.origin[idx], self.scale)

    def split(self, val_fraction: float) -> tuple["StripDataset", "StripDataset | None"]:
        n_val = int(round(len(self) * val_fraction))
        if n_val == 0:
            return self, None
        return self.subset(np.arange(n_val, len(self))), self.subset(np.arange(n_val))


def strip_dataset(rc, az, cfg: TrainConfig = TrainConfig(),
                  norm: NormalizationSpec = NormalizationSpec()) -> StripDataset:
    """Cut aligned range-compressed / focused rasters into single-bin azimuth strips.

    Strips are ``strip_len`` pulses long with stride ``strip_len`` along azimuth;
    their order is a seeded permutation.
    """
    rc = np.asarray(getattr(rc, "data", rc))
    az = np.asarray(getattr(az, "data", az))
    if rc.shape != az.shape:
        raise ValueError(f"input and target rasters differ in shape: {rc.shape} vs {az.shape}")
    n_a, n_r = rc.shape
    L = cfg.strip_len
    if n_a < L:
        raise ValueError(f"raster has {n_a} pulses, fewer than the strip length {L}")
    starts = np.arange(0, n_a - L + 1, L)
    origin = np.array([(r, s) for r in range(n_r) for s in starts])
    origin = origin[np.random.default_rng(cfg.seed).permutation(len(origin))]
    cols = origin[:, 1, None] + np.arange(L)
    inputs = rc[cols, origin[:, 0, None]] / norm.scale
    targets = az[cols, origin[:, 0, None]] / norm.scale
    p_r = range_positions(n_r)[origin[:, 0]]
    return StripDataset(inputs.astype(np.complex128), targets.astype(np.complex128), p_r, origin, norm.scale)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

def fd_steps(theta: np.ndarray, fd_step: float) -> np.ndarray:
    return np.maximum(np.abs(theta), 1.0) * fd_step


def fd_gradient(loss_fn: Callable[[np.ndarray], float], theta, fd_step: float = 1e-4,
                coords=None) -> np.ndarray:
    """Central-difference gradient; ``coords`` limits the coordinates evaluated."""
    theta = np.asarray(theta, dtype=np.float64)
    h = fd_steps(theta, fd_step)
    idx = range(theta.size) if coords is None else coords
    g = np.zeros(theta.size)
    for i in idx:
        e = np.zeros(theta.size)
        e[i] = h[i]
        up, down = loss_fn(theta + e), loss_fn(theta - e)
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError(f"non-finite loss while differentiating coordinate {i}")
        g[i] = (up - down) / (2 * h[i])
    return g


class BatchObjective:
    """Student loss on one batch, with cached layer inputs for fast FD gradients."""

    def __init__(self, model: TinyModel, data: StripDataset, w: LossWeights,
                 kw: KdWeights, teacher_pred: np.ndarray | None = None):
        self.model = model
        self.data = data
        self.w, self.kw = w, kw
        self.teacher = teacher_pred
        self.weights = informativeness_weights(data.targets, data.scale, w.eps, w.psd_band)
        self.x = strip_inputs(data.inputs, data.p_r)

    def _value(self, out: np.ndarray) -> float:
        pred = out[..., 0] + 1j * out[..., 1]
        per_strip, _ = af_loss(pred, self.data.targets, self.w, self.data.scale)
        total = float(np.mean(self.weights * per_strip))
        if self.kw.lambda_kd and self.teacher is not None:
            total += self.kw.lambda_kd * float(np.mean(kd_loss(pred, self.teacher, self.kw,
                                                               self.data.scale, self.w.eps)))
        return total

    def value(self, theta=None) -> float:
        model = self.model if theta is None else self.model.with_params(theta)
        return self._value(model.run_chain(self.x))

    def gradient(self, fd_step: float) -> tuple[float, np.ndarray]:
        """Loss and central-difference gradient at the current model parameters."""
        model = self.model
        trace: list[np.ndarray] = []
        base = self._value(model.run_chain(self.x, trace=trace))
        theta = model.param_vector()
        h = fd_steps(theta, fd_step)
        g = np.zeros(theta.size)
        for ci, name, start, stop in model.param_slices():
            vec = theta[start:stop]
            for j in range(stop - start):
                vals = []
                for sign in (1.0, -1.0):
                    v = vec.copy()
                    v[j] += sign * h[start + j]
                    layer = model.layer_from_vector(name, v)
                    out = model.run_chain(trace[ci], start=ci, override={name: layer})
                    vals.append(self._value(out))
                if not all(map(math.isfinite, vals)):
                    raise FloatingPointError(f"non-finite loss perturbing {name}[{j}]")
                g[start + j] = (vals[0] - vals[1]) / (2 * h[start + j])
        return base, g


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``lr`` over ``warmup_epochs``, then cosine decay to zero."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    span = max(cfg.max_epochs - cfg.warmup_epochs, 1)
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


def clip_by_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


@dataclass
class Adam:
    beta1: float
    beta2: float
    eps: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_size(cls, n: int, cfg: TrainConfig) -> "Adam":
        return cls(cfg.beta1, cfg.beta2, cfg.adam_eps, np.zeros(n), np.zeros(n))

    def step(self, theta: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def batches(n: int, size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def dataset_loss(model: TinyModel, data: StripDataset, w: LossWeights = LossWeights(),
                 kw: KdWeights = KdWeights(lambda_kd=0.0), teacher_pred=None,
                 batch_strips: int = 61) -> float:
    """Mean batch objective over fixed, unshuffled mini-batches."""
    vals = []
    for idx in batches(len(data), batch_strips, None):
        tp = None if teacher_pred is None else teacher_pred[idx]
        vals.append(BatchObjective(model, data.subset(idx), w, kw, tp).value())
    return float(np.mean(vals))


def eval_run(model: TinyModel, data: StripDataset) -> dict[str, float]:
    """Metrics of the model's predictions over every strip, in physical units."""
    out = model.forward_strip(strip_inputs(data.inputs, data.p_r))
    pred = (out[..., 0] + 1j * out[..., 1]) * data.scale
    return metrics(pred, data.targets * data.scale)


@dataclass
class TrainResult:
    model: TinyModel             # parameters with the best validation (or training) loss
    final: TinyModel             # parameters after the last completed epoch
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    def write_history(self, path) -> None:
        write_history(self.history, path)


def write_history(history: list[dict], path) -> None:
    if not history:
        return
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(history[0]))
        wr.writeheader()
        for row in history:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train_student(student: TinyModel, data: StripDataset, cfg: TrainConfig = TrainConfig(),
                  teacher: TeacherRef = TeacherRef(), w: LossWeights = LossWeights(),
                  kw: KdWeights = KdWeights(), val: StripDataset | None = None,
                  progress: Callable[[dict, TinyModel], None] | None = None) -> TrainResult:
    """Adam on finite-difference gradients with warm-up, cosine decay, clipping and early stopping."""
    if len(data) == 0:
        raise ValueError("empty training set")
    if val is None and cfg.val_fraction > 0:
        data, val = data.split(cfg.val_fraction)
    teacher_pred = teacher.predict(data) if kw.lambda_kd else None
    rng = np.random.default_rng(cfg.seed)
    model = student
    theta = model.param_vector()
    opt = Adam.for_size(theta.size, cfg)
    monitor = val if val is not None else data
    best_loss, best_model, wait = math.inf, model, 0
    history: list[dict] = []
    stopped = False
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        acc, n_acc, losses = np.zeros_like(theta), 0, []
        for idx in batches(len(data), cfg.batch_strips, rng):
            tp = None if teacher_pred is None else teacher_pred[idx]
            obj = BatchObjective(model, data.subset(idx), w, kw, tp)
            try:
                loss, g = obj.gradient(cfg.fd_step)
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), best_model) from exc
            losses.append(loss)
            acc += g
            n_acc += 1
            if n_acc == cfg.grad_accum:
                theta = opt.step(theta, clip_by_norm(acc / n_acc, cfg.clip), lr)
                model = model.with_params(theta)
                acc, n_acc = np.zeros_like(theta), 0
        if n_acc:
            theta = opt.step(theta, clip_by_norm(acc / n_acc, cfg.clip), lr)
            model = model.with_params(theta)
        if not np.isfinite(theta).all():
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", best_model)

        try:
            preds = model.forward_strip(strip_inputs(data.inputs, data.p_r))
        except FloatingPointError as exc:
            raise TrainingDiverged(str(exc), best_model) from exc
        pred = preds[..., 0] + 1j * preds[..., 1]
        _, terms = af_loss(pred, data.targets, w, data.scale)
        mon_loss = dataset_loss(model, monitor, w, KdWeights(lambda_kd=0.0), None, cfg.batch_strips)
        if not math.isfinite(mon_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", best_model)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
        row.update({f"train_{n}": float(np.mean(v)) for n, v in terms.items()})
        row["val_loss"] = mon_loss
        mt = eval_run(model, monitor)
        row["val_rmse"], row["val_amp_corr"] = mt["rmse"], mt["amp_corr"]
        history.append(row)
        if progress:
            progress(row, model)

        if mon_loss < best_loss - cfg.min_delta:
            best_loss, best_model, wait = mon_loss, model, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                stopped = True
                break
    return TrainResult(best_model, model, history, stopped)


def gradcheck(model: TinyModel, data: StripDataset, w: LossWeights = LossWeights.student(),
              coords=None, fd_step: float = 1e-4) -> list[dict]:
    """Central vs fourth-order differences of the focusing loss on selected coordinates."""
    w = replace(w, w_fw=0.0)
    obj = BatchObjective(model, data, w, KdWeights(lambda_kd=0.0))
    theta = model.param_vector()
    h = fd_steps(theta, fd_step)
    coords = range(theta.size) if coords is None else coords
    names = {}
    for _, name, start, stop in model.param_slices():
        for i in range(start, stop):
            names[i] = f"{name}[{i - start}]"
    rows = []
    central = fd_gradient(obj.value, theta, fd_step, coords)
    for i in coords:
        f = lambda s: obj.value(theta + s * h[i] * np.eye(1, theta.size, i)[0])
        fourth = (-f(2) + 8 * f(1) - 8 * f(-1) + f(-2)) / (12 * h[i])
        rel = abs(central[i] - fourth) / max(abs(fourth), 1e-12)
        rows.append({"coord": i, "param": names[i], "central": float(central[i]),
                     "fourth_order": float(fourth), "rel_err": float(rel)})
    return rows
