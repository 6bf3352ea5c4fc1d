"""Per-stage flow-matching training.

Each step draws a local time and one noise sample per cloud, builds the
stage endpoints from the aligned (coarse, fine) pair, and regresses the
model at the interpolated state onto ``x_e - x_s``.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_generator
from .exceptions import TrainingDivergedError
from .model import init_model
from .schedule import make_endpoints

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainReport",
    "sample_training_time",
    "new_train_state",
    "fm_step",
    "train_stage",
]

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    lr_decay: float = 0.998
    ema_decay: float = 0.9999
    grad_clip: float = None
    batch_size: int = 32
    epochs: int = 10
    time_warp: str = "sqrt"
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError(f"grad_clip must be positive or None, got {self.grad_clip}")
        if self.time_warp not in ("sqrt", "uniform"):
            raise ValueError(f"time_warp must be 'sqrt' or 'uniform', got {self.time_warp!r}")


@dataclass
class TrainState:
    model: object
    ema: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    def ema_model(self):
        return self.model.copy(self.ema)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    model: object = None
    ema_model: object = None
    steps: int = 0


def sample_training_time(rng, warp="sqrt", size=None):
    """Local training time: ``u`` for the uniform warp, ``sqrt(u)`` for the sqrt warp."""
    u = as_generator(rng).random(size)
    if warp == "uniform":
        return u
    if warp == "sqrt":
        return np.sqrt(u)
    raise ValueError(f"unknown time warp {warp!r}")


def new_train_state(model):
    zeros = np.zeros_like(model.params)
    return TrainState(model=model, ema=model.params.copy(), m=zeros, v=zeros.copy())


def _clip(grad, max_norm):
    norm = float(np.sqrt(np.sum(grad.astype(np.float64) ** 2)))
    if max_norm is not None and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def fm_step(state, coarse, fine, stage, schedule, config, rng, *, lr=None, labels=None, noise=None):
    """One optimisation step on a batch of aligned pairs; returns the pre-update loss.

    ``coarse`` and ``fine`` have shapes (B, N_k / D, 3) and (B, N_k, 3).
    ``noise`` overrides the standard-normal draw (same shape as ``fine``).
    Updates ``state`` in place: Adam on the live parameters, then the EMA.
    """
    rng = as_generator(rng)
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    if fine.ndim != 3 or len(fine) == 0:
        raise ValueError(f"expected a non-empty batch of shape (B, N, 3), got {fine.shape}")
    bsz = len(fine)
    t = sample_training_time(rng, config.time_warp, size=bsz)
    if noise is None:
        noise = rng.standard_normal(fine.shape)
    ends = make_endpoints(coarse, fine, stage, schedule, noise)
    tt = t[:, None, None]
    x_t = (1.0 - tt) * ends.x_s + tt * ends.x_e
    target = ends.x_e - ends.x_s

    model = state.model
    loss, grad = model.loss_and_grad(t, x_t, target, labels)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise TrainingDivergedError(state.step, loss)
    grad, _ = _clip(grad, config.grad_clip)

    lr = config.lr if lr is None else lr
    b1, b2 = config.betas
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    update = lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    model.params = (model.params - update).astype(model.dtype)
    d = config.ema_decay
    state.ema = (d * state.ema + (1.0 - d) * model.params).astype(model.dtype)
    return loss


def train_stage(pairs, stage, schedule, arch, config, *, labels=None, on_epoch=None):
    """Train a fresh model for ``stage`` on aligned pairs.

    Parameters
    ----------
    pairs : tuple of arrays
        ``(coarse, fine)`` with shapes (n, N_k / D, 3) and (n, N_k, 3),
        e.g. from :meth:`msflow.dataset.HierarchyStore.stage_pairs`.
    labels : array of int, optional
        Class ids, used only when ``arch.n_classes > 0``.
    on_epoch : callable, optional
        Called as ``on_epoch(epoch, state, report)`` after every epoch.
    """
    coarse, fine = (np.asarray(a) for a in pairs)
    n_points = schedule.stage_points(stage)
    if fine.ndim != 3 or fine.shape[1] != n_points or coarse.shape[1] * schedule.ratio != n_points:
        raise ValueError(
            f"stage {stage} needs fine clouds of {n_points} points, got arrays {fine.shape} / {coarse.shape}"
        )
    if len(coarse) != len(fine):
        raise ValueError("coarse and fine arrays hold different numbers of clouds")
    if arch.n_classes and labels is not None:
        labels = np.asarray(labels, dtype=np.intp)
    else:
        labels = None

    rng = as_generator(config.seed)
    model = init_model(arch, rng)
    state = new_train_state(model)
    report = TrainReport()
    n = len(fine)
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay**epoch
        tic = time.perf_counter()
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            batch_labels = None if labels is None else labels[idx]
            loss = fm_step(state, coarse[idx], fine[idx], stage, schedule, config, rng,
                           lr=lr, labels=batch_labels)
            total += loss * len(idx)
            count += len(idx)
        report.losses.append(total / count)
        report.epoch_seconds.append(time.perf_counter() - tic)
        logger.debug("stage %d epoch %d loss %.5f", stage, epoch, report.losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, state, report)
    report.model = state.model
    report.ema_model = state.ema_model()
    report.steps = state.step
    return report
