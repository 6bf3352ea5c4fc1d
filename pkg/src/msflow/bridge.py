"""Cross-stage lift from a coarse terminal state to the next finer initial state.

Given the terminal state ``Y`` of stage ``k+1``, the initial state of stage
``k`` has the same distribution as

    (s_k / e_{k+1}) * Up(Y) + n',   n' ~ N(0, blockdiag(a I - b 11^T))

with ``a = (1 - s_k)^2 / D^k`` and
``b = s_k^2 (1 - e_{k+1})^2 / (e_{k+1}^2 D^(k+1))``, one ``D x D`` block per
cluster and independent coordinate axes. The block has eigenvalue ``a`` on
the complement of the ones vector and ``a - b D`` along it, so it is PSD
exactly when ``s_k <= e_{k+1}``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import as_generator, check_positive_int
from .exceptions import PSDViolationError
from .geometry import upsample_replicate

__all__ = ["BridgeCovariance", "block_covariance", "sample_bridge_noise", "lift"]

_EIG_CLAMP = 1e-12


@dataclass(frozen=True)
class BridgeCovariance:
    a: float
    b: float
    ratio: int

    @property
    def eigen_perp(self):
        return self.a

    @property
    def eigen_ones(self):
        return self.a - self.b * self.ratio

    def dense(self):
        """The ``D x D`` block ``a I - b 11^T``."""
        d = self.ratio
        return self.a * np.eye(d) - self.b * np.ones((d, d))


def block_covariance(stage, schedule):
    """Covariance block of the lift noise into ``stage`` (from ``stage + 1``)."""
    if not 0 <= stage < schedule.n_stages - 1:
        raise ValueError(f"stage {stage} has no coarser stage in a {schedule.n_stages}-stage schedule")
    d = schedule.ratio
    s_k = schedule.start(stage)
    e_next = schedule.end(stage + 1)
    if e_next <= 0.0:
        raise ValueError(f"e_{stage + 1} must be positive to lift into stage {stage}")
    a = (1.0 - s_k) ** 2 / d**stage
    b = s_k**2 * (1.0 - e_next) ** 2 / (e_next**2 * d ** (stage + 1))
    return BridgeCovariance(a=a, b=b, ratio=d)


def sample_bridge_noise(n_clusters, cov, rng=None, size=()):
    """Draw ``n_clusters * D`` rows of 3-D noise with block covariance ``cov``.

    Per cluster and axis: take ``D`` iid standard normals, split them into
    their mean and the residual, and scale the two parts by the square
    roots of the two eigenvalues. ``size`` prepends batch axes.
    """
    n_clusters = check_positive_int(n_clusters, "n_clusters")
    eig_ones = cov.eigen_ones
    if eig_ones < 0.0:
        if eig_ones < -_EIG_CLAMP:
            raise PSDViolationError(
                f"bridge covariance has negative eigenvalue {eig_ones:.3g} along the ones direction"
            )
        eig_ones = 0.0
    if cov.a < 0.0:
        raise PSDViolationError(f"bridge covariance has negative eigenvalue {cov.a:.3g}")
    rng = as_generator(rng)
    if np.isscalar(size):
        size = (size,)
    size = tuple(int(s) for s in size)
    eps = rng.standard_normal(size + (n_clusters, cov.ratio, 3))
    mean = eps.mean(axis=-2, keepdims=True)
    noise = np.sqrt(cov.a) * (eps - mean) + np.sqrt(eig_ones) * mean
    return noise.reshape(size + (n_clusters * cov.ratio, 3))


def lift(coarse_terminal, stage, schedule, rng=None):
    """Map the terminal state of ``stage + 1`` to an initial state of ``stage``.

    Accepts ``(M, 3)`` or batched ``(B, M, 3)`` input.
    """
    coarse_terminal = np.asarray(coarse_terminal, dtype=np.float64)
    expected = schedule.stage_points(stage + 1)
    if coarse_terminal.shape[-2] != expected:
        raise ValueError(
            f"lift into stage {stage} expects {expected} coarse points, got {coarse_terminal.shape[-2]}"
        )
    cov = block_covariance(stage, schedule)
    scale = schedule.start(stage) / schedule.end(stage + 1)
    noise = sample_bridge_noise(expected, cov, rng, size=coarse_terminal.shape[:-2])
    return scale * upsample_replicate(coarse_terminal, schedule.ratio) + noise
