"""Coarse-to-fine generation: Euler integration per stage, lifts in between."""

from dataclasses import dataclass

import numpy as np

from ._validation import as_generator, check_positive_int
from .bridge import lift
from .exceptions import TrajectoryDivergedError

__all__ = ["SamplerConfig", "integrate_stage", "generate"]


@dataclass
class SamplerConfig:
    """Sampling settings.

    ``nfe_per_stage[k]`` is the number of Euler steps for stage ``k``
    (finest first). ``prior_variance`` is ``"scaled"`` (the noise variance
    the coarsest stage was trained with) or ``"unit"``.
    """

    nfe_per_stage: tuple = (400, 1000)
    prior_variance: str = "scaled"
    seed: int = 0

    def __post_init__(self):
        self.nfe_per_stage = tuple(int(n) for n in self.nfe_per_stage)
        if any(n < 1 for n in self.nfe_per_stage):
            raise ValueError(f"every nfe must be >= 1, got {self.nfe_per_stage}")
        if self.prior_variance not in ("scaled", "unit"):
            raise ValueError(f"prior_variance must be 'scaled' or 'unit', got {self.prior_variance!r}")


def integrate_stage(field, x_s, stage, schedule, nfe, condition=None):
    """Explicit Euler from local time 0 to 1 in ``nfe`` equal steps.

    ``field(t, x, condition)`` may be a :class:`~msflow.model.VelocityField`
    or any callable with that signature.
    """
    nfe = check_positive_int(nfe, "nfe")
    x = np.array(x_s, dtype=np.float64)
    expected = schedule.stage_points(stage)
    if x.shape[-2] != expected:
        raise ValueError(f"stage {stage} expects {expected} points, got {x.shape[-2]}")
    dt = 1.0 / nfe
    for i in range(nfe):
        x = x + dt * np.asarray(field(i * dt, x, condition), dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise TrajectoryDivergedError(i, stage)
    return x


def generate(fields, schedule, config=None, rng=None, *, n_samples=None, condition=None,
             condition_stages="coarsest", return_stages=False):
    """Run the cascade from the prior at the coarsest stage down to stage 0.

    Parameters
    ----------
    fields : sequence
        One velocity field per stage, finest first.
    n_samples : int, optional
        Batch size; the result then has shape (n_samples, N, 3) instead of (N, 3).
    condition : int or array of int, optional
        Class id(s), passed to the stages selected by ``condition_stages``
        (``"coarsest"`` or ``"all"``).
    return_stages : bool
        Also return the terminal state of every stage, coarsest first.
    """
    config = config or SamplerConfig()
    rng = as_generator(config.seed if rng is None else rng)
    n_stages = schedule.n_stages
    if len(fields) != n_stages:
        raise ValueError(f"schedule has {n_stages} stages but {len(fields)} models were given")
    if len(config.nfe_per_stage) != n_stages:
        raise ValueError(f"need {n_stages} NFE values, got {len(config.nfe_per_stage)}")
    top = schedule.coarsest
    if schedule.start(top) != 0.0:
        raise ValueError(
            f"the coarsest stage must start at s_{top}=0 to begin from the prior, got {schedule.start(top)}"
        )
    if condition_stages not in ("coarsest", "all"):
        raise ValueError(f"condition_stages must be 'coarsest' or 'all', got {condition_stages!r}")

    variance = schedule.ratio ** (-top) if config.prior_variance == "scaled" else 1.0
    shape = (schedule.stage_points(top), 3)
    if n_samples is not None:
        shape = (check_positive_int(n_samples, "n_samples"),) + shape
    x = np.sqrt(variance) * rng.standard_normal(shape)

    stages = []
    for k in range(top, -1, -1):
        if k < top:
            x = lift(x, k, schedule, rng)
        cond = condition if (k == top or condition_stages == "all") else None
        x = integrate_stage(fields[k], x, k, schedule, config.nfe_per_stage[k], cond)
        stages.append(x)
    return (x, stages) if return_stages else x
