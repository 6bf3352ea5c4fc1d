"""Chamfer distance, Earth Mover's distance and 1-NNA between sets of clouds.

Chamfer uses squared distances, averaged per direction and summed over the
two directions. EMD is the mean Euclidean distance under the optimal
one-to-one matching.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from ._validation import check_cloud

__all__ = [
    "chamfer",
    "emd",
    "emd_mode",
    "pairwise_distances",
    "one_nna",
    "one_nna_from_matrix",
    "MetricReport",
    "evaluate",
]

EMD_EXACT_MAX = 1024
SINKHORN_EPS = 1e-3


def _sq_dist_matrix(a, b):
    d2 = np.sum(a**2, -1)[..., :, None] + np.sum(b**2, -1)[..., None, :] - 2.0 * a @ np.swapaxes(b, -1, -2)
    return np.maximum(d2, 0.0)


def chamfer(a, b):
    a = check_cloud(a, name="a")
    b = check_cloud(b, name="b")
    d2 = _sq_dist_matrix(a, b)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def emd_mode(n_points):
    if n_points <= EMD_EXACT_MAX:
        return "exact"
    return f"sinkhorn(eps={SINKHORN_EPS:g})"


def _sinkhorn_cost(cost, eps, n_iter=500):
    # log-domain Sinkhorn with uniform marginals; eps is relative to the mean cost
    n = len(cost)
    reg = eps * float(cost.mean())
    log_k = -cost / reg
    f = np.zeros(n)
    g = np.zeros(n)
    log_mu = -np.log(n)
    for _ in range(n_iter):
        f = log_mu - logsumexp(log_k + g[None, :], axis=1)
        g = log_mu - logsumexp(log_k + f[:, None], axis=0)
    plan = np.exp(log_k + f[:, None] + g[None, :])
    return float(np.sum(plan * cost))


def emd(a, b):
    """Mean matched Euclidean distance; exact up to ``EMD_EXACT_MAX`` points, entropic above."""
    a = check_cloud(a, name="a")
    b = check_cloud(b, name="b")
    if len(a) != len(b):
        raise ValueError(f"EMD needs equally sized clouds, got {len(a)} and {len(b)}")
    cost = np.sqrt(_sq_dist_matrix(a, b))
    if len(a) <= EMD_EXACT_MAX:
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    return _sinkhorn_cost(cost, SINKHORN_EPS)


def pairwise_distances(first, second=None, metric="chamfer"):
    """Matrix of ``metric`` between every cloud of ``first`` and of ``second``.

    With ``second=None`` the symmetric matrix of ``first`` against itself is
    returned.
    """
    symmetric = second is None
    if symmetric:
        second = first
    out = np.empty((len(first), len(second)))
    if metric in ("cd", "chamfer"):
        first = np.asarray(first, dtype=np.float64)
        second = np.asarray(second, dtype=np.float64)
        for i, a in enumerate(first):
            d2 = _sq_dist_matrix(a[None], second)
            out[i] = d2.min(axis=2).mean(axis=1) + d2.min(axis=1).mean(axis=1)
        return out
    if metric == "emd":
        for i, a in enumerate(first):
            for j, b in enumerate(second):
                if symmetric and j < i:
                    out[i, j] = out[j, i]
                else:
                    out[i, j] = emd(a, b)
        return out
    raise ValueError(f"unknown metric {metric!r}")


def one_nna_from_matrix(dist, n_gen):
    """Leave-one-out 1-NN accuracy (in percent) from a full distance matrix.

    Rows/columns ``0 .. n_gen-1`` are generated clouds, the rest reference
    clouds. Ties go to the lowest index.
    """
    dist = np.array(dist, dtype=np.float64)
    n = len(dist)
    if n < 2:
        raise ValueError("1-NNA needs at least two clouds in total")
    labels = np.arange(n) < n_gen
    np.fill_diagonal(dist, np.inf)
    nearest = np.argmin(dist, axis=1)
    return 100.0 * float(np.mean(labels[nearest] == labels))


def one_nna(gen, ref, metric="chamfer"):
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("1-NNA needs non-empty generated and reference sets")
    clouds = list(gen) + list(ref)
    if len(clouds) < 2:
        raise ValueError("1-NNA needs at least two clouds in total")
    dist = pairwise_distances(clouds, None, metric)
    return one_nna_from_matrix(dist, len(gen))


@dataclass
class MetricReport:
    cd_1nna: float = None
    emd_1nna: float = None
    n_gen: int = 0
    n_ref: int = 0
    emd_mode: str = ""
    matrices: dict = field(default_factory=dict, repr=False)

    def to_text(self):
        lines = []
        for key in ("cd_1nna", "emd_1nna", "n_gen", "n_ref", "emd_mode"):
            value = getattr(self, key)
            if value is None or value == "":
                continue
            if isinstance(value, float):
                value = f"{value:.2f}"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["metric", "value"])
        for key in ("cd_1nna", "emd_1nna"):
            if getattr(self, key) is not None:
                writer.writerow([key, f"{getattr(self, key):.4f}"])
        return buf.getvalue()


def evaluate(gen, ref, metrics=("cd", "emd"), keep_matrices=False):
    """1-NNA of ``gen`` against ``ref`` under each requested distance."""
    report = MetricReport(n_gen=len(gen), n_ref=len(ref))
    clouds = list(gen) + list(ref)
    for metric in metrics:
        dist = pairwise_distances(clouds, None, metric)
        value = one_nna_from_matrix(dist, len(gen))
        if metric in ("cd", "chamfer"):
            report.cd_1nna = value
        elif metric == "emd":
            report.emd_1nna = value
            report.emd_mode = emd_mode(np.asarray(clouds[0]).shape[0])
        if keep_matrices:
            report.matrices[metric] = dist
    return report
