"""Stage bookkeeping: time intervals, noise scales and per-stage endpoints.

Stage ``k = 0`` is the finest. Stage ``k`` operates on ``N / D**k`` points
over the global time interval ``[s_k, e_k]``; its noise has variance
``1 / D**k`` per coordinate.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import upsample_replicate

__all__ = [
    "StageSchedule",
    "EndpointPair",
    "InterpolantState",
    "new_schedule",
    "make_endpoints",
    "interpolate",
    "regression_target",
]


@dataclass(frozen=True)
class StageSchedule:
    """Validated multi-stage schedule.

    Parameters
    ----------
    n_stages : int
        Number of stages ``K``.
    ratio : int
        Downsampling ratio ``D``.
    intervals : tuple of (start, end)
        One interval per stage, finest first.
    n_points : int
        Points at the finest resolution; must be divisible by ``D**K``.
    """

    n_stages: int
    ratio: int
    intervals: tuple
    n_points: int

    def __post_init__(self):
        intervals = tuple((float(s), float(e)) for s, e in self.intervals)
        object.__setattr__(self, "intervals", intervals)
        if int(self.n_stages) != self.n_stages or self.n_stages < 1:
            raise ValueError(f"n_stages must be a positive integer, got {self.n_stages!r}")
        if int(self.ratio) != self.ratio or self.ratio < 2:
            raise ValueError(f"ratio must be an integer >= 2, got {self.ratio!r}")
        if len(intervals) != self.n_stages:
            raise ValueError(
                f"expected {self.n_stages} intervals (one per stage), got {len(intervals)}"
            )
        for k, (s, e) in enumerate(intervals):
            if not 0.0 <= s < e <= 1.0:
                raise ValueError(f"interval constraint 0 <= s_{k} < e_{k} <= 1 violated by ({s}, {e})")
        for k in range(self.n_stages - 1):
            s_k, e_next = intervals[k][0], intervals[k + 1][1]
            if s_k > e_next:
                raise ValueError(
                    f"PSD condition s_{k} <= e_{k + 1} violated: s_{k}={s_k} > e_{k + 1}={e_next}"
                )
        if int(self.n_points) != self.n_points or self.n_points < 1:
            raise ValueError(f"n_points must be a positive integer, got {self.n_points!r}")
        if self.n_points % self.ratio**self.n_stages:
            raise ValueError(
                f"n_points={self.n_points} is not divisible by ratio**n_stages="
                f"{self.ratio ** self.n_stages}"
            )

    def start(self, k):
        return self.intervals[k][0]

    def end(self, k):
        return self.intervals[k][1]

    def stage_points(self, k):
        """Number of points handled by stage ``k``."""
        return self.n_points // self.ratio**k

    def noise_std(self, k):
        return self.ratio ** (-k / 2)

    @property
    def coarsest(self):
        return self.n_stages - 1


def new_schedule(n_stages, ratio, intervals, n_points):
    """Build a :class:`StageSchedule`, raising ``ValueError`` on any violated constraint."""
    return StageSchedule(n_stages, ratio, tuple(intervals), n_points)


@dataclass
class EndpointPair:
    x_s: np.ndarray
    x_e: np.ndarray
    stage: int


@dataclass
class InterpolantState:
    x_t: np.ndarray
    t_local: float
    t_global: float


def make_endpoints(coarse, fine, stage, schedule, noise):
    """Initial and terminal states of ``stage`` sharing one noise draw.

    ``noise`` is a standard-normal array shaped like ``fine``; it is scaled
    to variance ``1 / D**stage`` here. Leading batch axes are allowed.
    """
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    noise = np.asarray(noise)
    n_fine = schedule.stage_points(stage)
    if fine.shape[-2] != n_fine or coarse.shape[-2] * schedule.ratio != n_fine:
        raise ValueError(
            f"stage {stage} expects {n_fine} fine and {n_fine // schedule.ratio} coarse points, "
            f"got {fine.shape[-2]} and {coarse.shape[-2]}"
        )
    if noise.shape != fine.shape:
        raise ValueError(f"noise shape {noise.shape} does not match fine shape {fine.shape}")
    s, e = schedule.intervals[stage]
    n = noise * schedule.noise_std(stage)
    x_s = s * upsample_replicate(coarse, schedule.ratio) + (1.0 - s) * n
    x_e = e * fine + (1.0 - e) * n
    return EndpointPair(x_s=x_s, x_e=x_e, stage=stage)


def interpolate(endpoints, t_global, schedule):
    """Point on the straight path between the endpoints at global time ``t_global``."""
    s, e = schedule.intervals[endpoints.stage]
    if not s <= t_global <= e:
        raise ValueError(f"t_global={t_global} outside stage interval [{s}, {e}]")
    t_local = (t_global - s) / (e - s)
    x_t = (1.0 - t_local) * endpoints.x_s + t_local * endpoints.x_e
    return InterpolantState(x_t=x_t, t_local=t_local, t_global=t_global)


def regression_target(endpoints):
    """Velocity the stage model is trained to predict, ``x_e - x_s``."""
    return endpoints.x_e - endpoints.x_s
