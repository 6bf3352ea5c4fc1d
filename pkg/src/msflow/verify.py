"""Statistical checks of the cross-stage lift for a given schedule.

For every stage boundary the suite checks that

* the closed-form eigenvalues of the lift covariance block agree with a
  dense eigensolver and are non-negative,
* the structured sampler reproduces that block empirically,
* a stage initial state built directly from data and one obtained by
  lifting the coarser terminal state have the same first two moments.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import as_generator
from .bridge import BridgeCovariance, block_covariance, lift, sample_bridge_noise
from .dataset import toy_shapes
from .geometry import downsample, upsample_replicate
from .schedule import new_schedule

__all__ = [
    "CheckResult",
    "raw_block_covariance",
    "check_eigenvalues",
    "check_sampler",
    "check_two_path",
    "run_checks",
]

EIG_TOL = 1e-10
PSD_TOL = 1e-12
SAMPLER_TOL = 3e-2
MEAN_TOL = 3e-2
COV_TOL = 5e-2


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def raw_block_covariance(s_k, e_next, ratio, stage):
    """Block parameters from raw interval values, without schedule validation."""
    a = (1.0 - s_k) ** 2 / ratio**stage
    b = s_k**2 * (1.0 - e_next) ** 2 / (e_next**2 * ratio ** (stage + 1))
    return BridgeCovariance(a=a, b=b, ratio=ratio)


def check_eigenvalues(cov, name="eigenvalues"):
    dense = np.linalg.eigvalsh(cov.dense())
    analytic = np.sort([cov.eigen_ones] + [cov.eigen_perp] * (cov.ratio - 1))
    err = float(np.max(np.abs(dense - analytic)))
    min_eig = float(dense.min())
    ok = err <= EIG_TOL and min_eig >= -PSD_TOL
    return CheckResult(name, ok, f"max |analytic - dense| = {err:.2e}, min eigenvalue = {min_eig:.3e}")


def empirical_block_cov(cov, n_draws, rng):
    """Covariance of one sampled block, pooling the three coordinate axes."""
    noise = sample_bridge_noise(1, cov, rng, size=n_draws)  # (n, D, 3)
    samples = np.moveaxis(noise, -1, 1).reshape(-1, cov.ratio)
    return samples.T @ samples / len(samples)


def check_sampler(cov, n_draws, rng, name="sampler"):
    emp = empirical_block_cov(cov, n_draws, rng)
    err = float(np.max(np.abs(emp - cov.dense())))
    return CheckResult(name, err <= SAMPLER_TOL, f"max entry error = {err:.3e} over {n_draws} draws")


def two_path_moments(fine, coarse, stage, schedule, n_draws, rng):
    """Sample the stage initial state directly and via the lift; return both sample sets."""
    ratio = schedule.ratio
    s_k = schedule.start(stage)
    e_next = schedule.end(stage + 1)
    noise = rng.standard_normal((n_draws,) + fine.shape) * schedule.noise_std(stage)
    direct = s_k * upsample_replicate(coarse, ratio) + (1.0 - s_k) * noise
    coarse_noise = rng.standard_normal((n_draws,) + coarse.shape) * schedule.noise_std(stage + 1)
    terminal = e_next * coarse + (1.0 - e_next) * coarse_noise
    lifted = lift(terminal, stage, schedule, rng)
    return direct, lifted


def _block_covs(samples, ratio):
    # (n, M*D, 3) -> per block and axis covariance, averaged over axes: (M, D, D)
    n, rows, _ = samples.shape
    centered = samples - samples.mean(axis=0)
    blocks = centered.reshape(n, rows // ratio, ratio, 3)
    return np.einsum("nmia,nmja->mij", blocks, blocks) / (3 * (n - 1))


def check_two_path(stage, schedule, n_draws, rng, cloud=None, name="two_path"):
    """Compare both constructions of the stage initial state.

    The moments are per block, so the check runs on a reduced schedule with
    the same intervals and ratio but only two coarsest-level points, unless
    ``cloud`` (with ``schedule.stage_points(stage)`` rows) is given.
    """
    ratio = schedule.ratio
    if cloud is None:
        schedule = new_schedule(schedule.n_stages, ratio, schedule.intervals, 2 * ratio**schedule.n_stages)
        cloud = toy_shapes("sphere", schedule.stage_points(stage), 1, rng)[0]
    pair = downsample(cloud, ratio)
    direct, lifted = two_path_moments(pair.fine, pair.coarse, stage, schedule, n_draws, rng)
    mean_err = float(np.max(np.abs(direct.mean(axis=0) - lifted.mean(axis=0))))
    cov_err = float(np.max(np.abs(_block_covs(direct, ratio) - _block_covs(lifted, ratio))))
    ok = mean_err <= MEAN_TOL and cov_err <= COV_TOL
    return CheckResult(name, ok, f"mean error = {mean_err:.3e}, block covariance error = {cov_err:.3e}")


def run_checks(schedule, rng=None, sampler_draws=100_000, two_path_draws=10_000):
    """All checks for every stage boundary of ``schedule``."""
    rng = as_generator(rng)
    results = []
    for k in range(schedule.n_stages - 1):
        cov = block_covariance(k, schedule)
        results.append(check_eigenvalues(cov, f"eigenvalues[stage {k}]"))
        results.append(check_sampler(cov, sampler_draws, rng, f"sampler[stage {k}]"))
        results.append(check_two_path(k, schedule, two_path_draws, rng, name=f"two_path[stage {k}]"))
    return results
