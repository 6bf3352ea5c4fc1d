"""Estimator-style wrappers around the pipeline."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_generator, check_clouds
from .config import COARSE_GRAD_CLIP, stage_seed
from .geometry import build_hierarchy, downsample, upsample_replicate
from .inference import SamplerConfig, generate
from .model import Architecture
from .schedule import new_schedule
from .training import TrainConfig, train_stage

__all__ = ["BalancedDownsampler", "MultiScaleFlowMatching"]


class BalancedDownsampler(TransformerMixin, BaseEstimator):
    """Equal-size clustering of each cloud into groups of ``ratio`` points.

    ``transform`` returns the cluster centers; ``inverse_transform``
    replicates every center ``ratio`` times. The fine cloud reordered into
    cluster-contiguous rows is available from :meth:`reorder`.

    Parameters
    ----------
    ratio : int
        Points per cluster.
    max_iter : int
        Lloyd iterations per restart.
    n_init : int
        Number of restarts.
    method : {"exact", "greedy"}
        Assignment step.
    """

    def __init__(self, ratio=4, max_iter=25, n_init=4, method="exact"):
        self.ratio = ratio
        self.max_iter = max_iter
        self.n_init = n_init
        self.method = method

    def fit(self, X, y=None):
        check_clouds(_as_batch(X), name="X")
        self.n_features_in_ = 3
        return self

    def _pairs(self, X):
        batch, single = _as_batch(X), np.ndim(X) == 2
        clouds = check_clouds(batch, name="X")
        pairs = [downsample(c, self.ratio, self.max_iter, n_init=self.n_init, method=self.method)
                 for c in clouds]
        return pairs, single

    def transform(self, X):
        pairs, single = self._pairs(X)
        out = np.stack([p.coarse for p in pairs])
        return out[0] if single else out

    def reorder(self, X):
        """Input clouds with rows sorted into cluster-contiguous order."""
        pairs, single = self._pairs(X)
        out = np.stack([p.fine for p in pairs])
        return out[0] if single else out

    def inverse_transform(self, X):
        return upsample_replicate(np.asarray(X, dtype=np.float64), self.ratio)


def _as_batch(X):
    X = np.asarray(X, dtype=np.float64)
    return X[None] if X.ndim == 2 else X


class MultiScaleFlowMatching(BaseEstimator):
    """Coarse-to-fine flow-matching generator for fixed-size point clouds.

    Parameters
    ----------
    n_stages : int
        Number of resolution stages K; the coarsest has ``N / ratio**(K-1)`` points.
    ratio : int
        Downsampling ratio between consecutive stages.
    intervals : sequence of (float, float)
        Time interval per stage, finest first.
    hidden, time_dim : int
        Width of the velocity network and of its time embedding.
    lr, lr_decay, ema_decay, batch_size, epochs : training settings shared by all stages.
    grad_clip : float or None
        Gradient-norm clip for the finer stages.
    coarse_grad_clip : float or None
        Gradient-norm clip for the coarsest stage.
    nfe : sequence of int
        Euler steps per stage at sampling time, finest first.
    random_state : int
        Seed from which every stage's random stream is derived.

    Attributes
    ----------
    schedule_ : StageSchedule
    fields_ : list of VelocityField
        EMA weights per stage, finest first; used by :meth:`sample`.
    live_fields_ : list of VelocityField
    losses_ : list of list of float
        Per-epoch mean loss for every stage.
    classes_ : ndarray or None
        Class labels when fitted with ``y``.
    """

    def __init__(self, n_stages=2, ratio=4, intervals=((0.6, 1.0), (0.0, 1.0)), hidden=64, time_dim=32,
                 lr=1e-3, lr_decay=0.995, ema_decay=0.999, batch_size=32, epochs=100, grad_clip=None,
                 coarse_grad_clip=COARSE_GRAD_CLIP, nfe=(100, 100), n_init=4, random_state=0):
        self.n_stages = n_stages
        self.ratio = ratio
        self.intervals = intervals
        self.hidden = hidden
        self.time_dim = time_dim
        self.lr = lr
        self.lr_decay = lr_decay
        self.ema_decay = ema_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.grad_clip = grad_clip
        self.coarse_grad_clip = coarse_grad_clip
        self.nfe = nfe
        self.n_init = n_init
        self.random_state = random_state

    def _stage_config(self, stage):
        clip = self.coarse_grad_clip if stage == self.n_stages - 1 and self.n_stages > 1 else self.grad_clip
        return TrainConfig(lr=self.lr, lr_decay=self.lr_decay, ema_decay=self.ema_decay, grad_clip=clip,
                           batch_size=self.batch_size, epochs=self.epochs,
                           seed=stage_seed(self.random_state, stage))

    def build_levels(self, X):
        """Multi-level hierarchies of ``X`` stacked per level, finest first."""
        X = check_clouds(X, name="X")
        levels = [[] for _ in range(self.n_stages)]
        for cloud in X:
            hier = build_hierarchy(cloud, self.ratio, self.n_stages - 1, n_init=self.n_init)
            for k, level in enumerate(hier.levels):
                levels[k].append(level)
        return [np.stack(lv) for lv in levels]

    def fit(self, X, y=None):
        """Fit on clouds ``X`` of shape (n_clouds, N, 3); ``y`` optional class labels."""
        X = check_clouds(X, name="X")
        return self.fit_levels(self.build_levels(X), y)

    def fit_levels(self, levels, y=None):
        """Fit on precomputed cluster-contiguous levels (finest first), skipping the clustering."""
        levels = [np.asarray(lv, dtype=np.float64) for lv in levels]
        if len(levels) != self.n_stages:
            raise ValueError(f"expected {self.n_stages} levels, got {len(levels)}")
        n_points = levels[0].shape[1]
        self.schedule_ = new_schedule(self.n_stages, self.ratio, list(self.intervals), n_points)
        if self.schedule_.start(self.schedule_.coarsest) != 0.0:
            raise ValueError("the coarsest stage must start at 0 to be trained from noise alone")
        labels = None
        self.classes_ = None
        if y is not None:
            y = np.asarray(y)
            if len(y) != len(levels[0]):
                raise ValueError(f"y has {len(y)} labels for {len(levels[0])} clouds")
            self.classes_, labels = np.unique(y, return_inverse=True)
        arch = Architecture(hidden=self.hidden, time_dim=self.time_dim,
                            n_classes=0 if self.classes_ is None else len(self.classes_))
        self.fields_, self.live_fields_, self.losses_ = [], [], []
        for k in range(self.n_stages):
            fine = levels[k]
            coarse = levels[k + 1] if k + 1 < self.n_stages else _coarsest_partner(fine, self.ratio)
            report = train_stage((coarse, fine), k, self.schedule_, arch, self._stage_config(k), labels=labels)
            self.fields_.append(report.ema_model)
            self.live_fields_.append(report.model)
            self.losses_.append(list(report.losses))
        self.n_points_ = n_points
        return self

    def sample(self, n_samples=1, y=None, random_state=None, use_ema=True):
        """Generate ``n_samples`` clouds of shape (N, 3); ``y`` selects a class when conditional."""
        check_is_fitted(self, "fields_")
        condition = None
        if y is not None:
            if self.classes_ is None:
                raise ValueError("estimator was fitted without labels")
            matches = np.flatnonzero(self.classes_ == y)
            if matches.size == 0:
                raise ValueError(f"unknown class {y!r}")
            condition = int(matches[0])
        seed = stage_seed(self.random_state, -1 % 2**31) if random_state is None else random_state
        fields = self.fields_ if use_ema else self.live_fields_
        config = SamplerConfig(nfe_per_stage=tuple(self.nfe), seed=0)
        return generate(fields, self.schedule_, config, as_generator(seed), n_samples=n_samples,
                        condition=condition)


def _coarsest_partner(fine, ratio):
    # The coarsest stage starts from pure noise (s = 0), so its coarse endpoint
    # is multiplied by zero; any array of the right shape will do.
    return np.zeros((fine.shape[0], fine.shape[1] // ratio, 3))
