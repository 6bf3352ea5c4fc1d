"""Ablation harness on the toy task.

* :func:`boundary_sweep` retrains the finest stage for several values of
  its start time ``s_0`` (the coarser stages are shared) and reports
  1-NNA for each.
* :func:`random_pair_levels` builds hierarchies with the random-pairing
  baseline instead of balanced clustering.
* :func:`nfe_study` measures sampling time and quality against the
  number of Euler steps.
"""

import time
from dataclasses import dataclass

import numpy as np

from ._validation import as_generator
from .geometry import build_hierarchy, random_pair_downsample
from .inference import SamplerConfig, generate
from .metrics import one_nna_from_matrix, pairwise_distances
from .schedule import new_schedule
from .training import train_stage

__all__ = ["AblationRow", "stack_levels", "random_pair_levels", "train_cascade", "boundary_sweep",
           "nfe_study", "format_table"]


@dataclass
class AblationRow:
    setting: str
    value: object
    cd_1nna: float
    final_loss: float
    seconds: float


def stack_levels(clouds, ratio, n_levels, downsampler=None, **kwargs):
    """Hierarchies of every cloud stacked per level, finest first."""
    hiers = [build_hierarchy(c, ratio, n_levels - 1, downsampler=downsampler, **kwargs) for c in clouds]
    return [np.stack([h.levels[k] for h in hiers]) for k in range(n_levels)]


def random_pair_levels(clouds, ratio, n_levels, rng=None):
    """Like :func:`stack_levels` but grouping points at random."""
    rng = as_generator(rng)
    return stack_levels(clouds, ratio, n_levels, downsampler=lambda x, d: random_pair_downsample(x, d, rng))


def _stage_data(levels, k, ratio):
    fine = levels[k]
    if k + 1 < len(levels):
        return levels[k + 1], fine
    return np.zeros((len(fine), fine.shape[1] // ratio, 3)), fine


def train_cascade(levels, schedule, arch, configs, stages=None, fields=None):
    """Train the listed ``stages`` (default all); ``fields`` supplies already trained ones.

    ``configs[k]`` is the :class:`TrainConfig` for stage ``k``. Returns the
    per-stage EMA fields and final losses.
    """
    fields = list(fields) if fields is not None else [None] * schedule.n_stages
    losses = [np.nan] * schedule.n_stages
    for k in (range(schedule.n_stages) if stages is None else stages):
        report = train_stage(_stage_data(levels, k, schedule.ratio), k, schedule, arch, configs[k])
        fields[k] = report.ema_model
        losses[k] = report.losses[-1]
    return fields, losses


def _one_nna(gen, ref):
    return one_nna_from_matrix(pairwise_distances(list(gen) + list(ref)), len(gen))


def boundary_sweep(levels, held_out, arch, configs, boundaries=(0.0, 0.3, 0.6, 0.9), *,
                   coarse_intervals=((0.0, 1.0),), nfe=(100, 100), n_samples=None, seed=0):
    """1-NNA(CD) as a function of the finest stage's start time.

    The coarser stages keep ``coarse_intervals`` and are trained once; the
    finest stage is retrained for each boundary value.
    """
    ratio = levels[0].shape[1] // levels[1].shape[1]
    n_points = levels[0].shape[1]
    n_samples = n_samples or len(held_out)
    n_stages = 1 + len(coarse_intervals)
    base = new_schedule(n_stages, ratio, [(boundaries[0], 1.0)] + list(coarse_intervals), n_points)
    shared, _ = train_cascade(levels, base, arch, configs, stages=range(1, n_stages))
    rows = []
    for s0 in boundaries:
        start = time.perf_counter()
        schedule = new_schedule(n_stages, ratio, [(s0, 1.0)] + list(coarse_intervals), n_points)
        fields, losses = train_cascade(levels, schedule, arch, configs, stages=[0], fields=shared)
        gen = generate(fields, schedule, SamplerConfig(nfe), as_generator(seed), n_samples=n_samples)
        rows.append(AblationRow("s_0", s0, _one_nna(gen, held_out), float(losses[0]),
                                time.perf_counter() - start))
    return rows


def nfe_study(fields, schedule, held_out, nfe_grid, *, n_samples=None, seed=0):
    """Sampling wall time and 1-NNA(CD) for each NFE tuple in ``nfe_grid``."""
    n_samples = n_samples or len(held_out)
    rows = []
    for nfe in nfe_grid:
        start = time.perf_counter()
        gen = generate(fields, schedule, SamplerConfig(tuple(nfe)), as_generator(seed), n_samples=n_samples)
        elapsed = time.perf_counter() - start
        rows.append(AblationRow("nfe", tuple(nfe), _one_nna(gen, held_out), np.nan, elapsed))
    return rows


def format_table(rows):
    """Plain-text table, one line per row."""
    if not rows:
        return ""
    header = f"{rows[0].setting:>12}  {'1-NNA(CD) %':>11}  {'final loss':>10}  {'seconds':>8}"
    lines = [header]
    for r in rows:
        value = ",".join(map(str, r.value)) if isinstance(r.value, tuple) else f"{r.value:g}"
        loss = "-" if np.isnan(r.final_loss) else f"{r.final_loss:.5f}"
        lines.append(f"{value:>12}  {r.cd_1nna:>11.2f}  {loss:>10}  {r.seconds:>8.2f}")
    return "\n".join(lines) + "\n"
