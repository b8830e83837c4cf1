"""Teacher training and temperature-softened distillation into an RGB student.

    soften(z, t) = softmax(z / t)
    L_KD = -sum_i soften(z_T, t)_i log soften(z_S, t)_i
    L_S  = (1 - alpha) L_BCE + alpha t^2 L_KD
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import DistillConfig, EncoderConfig, FusionConfig
from .fusion import bce_loss
from .model import Model
from .observations import ObservationStore
from .tensor import Tensor


@dataclass(frozen=True)
class LossTerms:
    l_bce: float
    l_kd: float
    l_total: float


def soften(logits, t: float) -> Tensor:
    """Temperature softmax over the last axis."""
    if t <= 0:
        raise ValueError(f"temperature must be > 0, got {t}")
    z = T.as_tensor(logits)
    return T.softmax(z if t == 1 else T.scale(z, 1.0 / t))


def kd_loss(student_logits, teacher_logits, t: float) -> Tensor:
    """Soft-target cross-entropy, averaged over the batch when batched."""
    zt = soften(T.as_tensor(teacher_logits).data, t)
    log_s = T.log(T.clip(soften(student_logits, t), 1e-300, 1.0))
    ce = T.scale(T.sum_(T.mul(Tensor(zt.data), log_s), axis=-1), -1.0)
    return ce if ce.data.ndim == 0 else T.mean(ce)


def kd_weight(alpha: float, t: float) -> float:
    """Weight of L_KD in the student loss."""
    return alpha * t * t


def p_brake(logits: Tensor) -> Tensor:
    p = T.softmax(T.as_tensor(logits))
    return T.slice_(p, (slice(None), 1)) if p.data.ndim == 2 else T.slice_(p, 1)


def student_loss_tensors(student_logits, teacher_logits, y, cfg: DistillConfig):
    """(l_total, l_bce, l_kd) as graph nodes."""
    l_bce = bce_loss(p_brake(student_logits), y)
    l_kd = kd_loss(student_logits, teacher_logits, cfg.temperature)
    total = T.add(T.scale(l_bce, 1.0 - cfg.alpha), T.scale(l_kd, kd_weight(cfg.alpha, cfg.temperature)))
    return total, l_bce, l_kd


def student_loss(student_logits, teacher_logits, y, cfg: DistillConfig) -> LossTerms:
    total, l_bce, l_kd = student_loss_tensors(student_logits, teacher_logits, y, cfg)
    return LossTerms(float(l_bce.data), float(l_kd.data), float(total.data))


# --- training ---------------------------------------------------------------

def epoch_order(rng: np.random.Generator, n: int) -> np.ndarray:
    """Fisher-Yates permutation of range(n) driven by ``rng``."""
    order = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


LossFn = Callable[[Tensor, dict], tuple[Tensor, Tensor, Tensor]]


def _fit(model: Model, data: ObservationStore, cfg: DistillConfig, loss_fn: LossFn,
         log_path: str | Path | None = None, batch_modalities: Sequence[str] | None = None) -> list[dict]:
    if len(data) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = T.Adam(model.store, lr=cfg.lr)
    mods = tuple(batch_modalities or model.modalities)
    history = []
    for epoch in range(cfg.epochs):
        order = epoch_order(rng, len(data))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = data.batch(idx, mods)
            leaves = model.store.leaves()
            logits = model.forward(leaves, batch)
            total, l_bce, l_kd = loss_fn(logits, batch)
            T.backward(total)
            opt.step(model.store.flat_grad(leaves))
            sums += len(idx) * np.array([float(l_bce.data), float(l_kd.data), float(total.data)])
        means = sums / len(data)
        row = {"epoch": epoch, "l_bce": float(means[0]), "l_kd": float(means[1]), "l_total": float(means[2])}
        history.append(row)
    if log_path is not None:
        write_run_log(log_path, history)
    return history


def write_run_log(path: str | Path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in history:
            fh.write(json.dumps({k: (round(v, 9) if isinstance(v, float) else v) for k, v in row.items()},
                                sort_keys=True) + "\n")


def train_bce(data: ObservationStore, modalities: Sequence[str], cfg: DistillConfig,
              encoder: EncoderConfig = EncoderConfig(), fusion: FusionConfig = FusionConfig(),
              log_path=None) -> tuple[Model, list[dict]]:
    """Plain BCE training on the given modalities (Cases A, B, C)."""
    model = Model(modalities, encoder, fusion, seed=cfg.seed)

    def loss_fn(logits, batch):
        l_bce = bce_loss(p_brake(logits), batch["labels"])
        return l_bce, l_bce, Tensor(np.zeros(()))

    return model, _fit(model, data, cfg, loss_fn, log_path)


def train_teacher(data: ObservationStore, cfg: DistillConfig, encoder: EncoderConfig = EncoderConfig(),
                  fusion: FusionConfig = FusionConfig(), log_path=None) -> tuple[Model, list[dict]]:
    return train_bce(data, ("rgb", "lidar"), cfg, encoder, fusion, log_path)


def teacher_logits(teacher: Model, data: ObservationStore, idx) -> np.ndarray:
    """Frozen-teacher forward pass; parameters are wrapped without gradients."""
    params = {k: Tensor(v) for k, v in teacher.store.arrays.items()}
    return teacher.forward(params, data.batch(idx, teacher.modalities)).data


def train_student(data: ObservationStore, teacher: Model, cfg: DistillConfig,
                  modalities: Sequence[str] = ("rgb",), init: Model | None = None,
                  log_path=None) -> tuple[Model, list[dict]]:
    """Minimize (1 - alpha) BCE + alpha t^2 KD against a frozen teacher.

    ``init`` starts from a copy of an existing student's parameters.
    """
    student = Model(modalities, teacher.encoder, teacher.fusion, seed=cfg.seed)
    if not set(student.modalities) < set(teacher.modalities):
        raise ValueError("student modalities must be a strict subset of the teacher's")
    if init is not None:
        student.store.flat[...] = init.store.flat
    cache: dict[int, np.ndarray] = {}
    if cfg.cache_teacher:
        all_idx = np.arange(len(data))
        for s in range(0, len(data), 256):
            chunk = all_idx[s:s + 256]
            for i, row in zip(chunk, teacher_logits(teacher, data, chunk)):
                cache[int(i)] = row
    idx_holder = {}

    def loss_fn(logits, batch):
        idx = idx_holder["idx"]
        if cfg.cache_teacher:
            zt = np.stack([cache[int(i)] for i in idx])
        else:
            zt = teacher_logits(teacher, data, idx)
        return student_loss_tensors(logits, zt, batch["labels"], cfg)

    class _Tap:
        # forwards batch requests while remembering the sample indices for the teacher
        def __init__(self, inner):
            self.inner = inner

        def __len__(self):
            return len(self.inner)

        def batch(self, idx, mods):
            idx_holder["idx"] = idx
            return self.inner.batch(idx, mods)

    return student, _fit(student, _Tap(data), cfg, loss_fn, log_path)


def predict(model: Model, data: ObservationStore, batch_size: int = 256) -> np.ndarray:
    """p_brake for every sample, reading only the model's modalities."""
    params = {k: Tensor(v) for k, v in model.store.arrays.items()}
    out = []
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        logits = model.forward(params, data.batch(idx, model.modalities))
        out.append(p_brake(logits).data)
    return np.concatenate(out) if out else np.zeros(0)


def with_seed(cfg: DistillConfig, seed: int) -> DistillConfig:
    return replace(cfg, seed=seed)
