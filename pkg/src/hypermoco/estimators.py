"""scikit-learn style wrappers around the reconstruction and correction code.

Each estimator consumes a list of :class:`~hypermoco.sim.SimRecord` (or
anything with ``y``, ``coils``, ``pattern`` and, where needed, motion) and
returns a stack of magnitude images ``(n, H, W)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .classical import DEFAULT_MB_ITERS, DEFAULT_MB_TOL, arc_interp, model_based_gt, rss_recon
from .exceptions import ParameterError
from .moco import (
    DEFAULT_ITERS,
    DEFAULT_REJECT_THRESHOLD,
    DEFAULT_SCHEDULE,
    DEFAULT_TRIALS,
    HypernetBackend,
    ModelBasedBackend,
    Schedule,
    estimate_motion,
)
from .network import ReconNetwork
from .training import TrainConfig, train


def check_records(records, *, need_motion=False):
    """Validate a non-empty sequence of records sharing one geometry."""
    if records is None:
        raise ParameterError("expected a sequence of records, got None")
    records = list(records)
    if not records:
        raise ParameterError("expected at least one record")
    for r in records:
        for attr in ("y", "coils", "pattern"):
            if not hasattr(r, attr):
                raise ParameterError(f"record lacks attribute {attr!r}")
        if need_motion and getattr(r, "m_true", None) is None:
            raise ParameterError("record lacks ground-truth motion")
    shapes = {np.shape(r.y) for r in records}
    if len(shapes) != 1:
        raise ParameterError(f"records have mixed k-space shapes {sorted(shapes)}")
    return records


class ARCRecon(BaseEstimator, TransformerMixin):
    """Autocalibrated k-space interpolation followed by RSS (motion-naive)."""

    def __init__(self, kernel=(2, 3), ridge=1e-4):
        self.kernel = kernel
        self.ridge = ridge

    def fit(self, records=None, y=None):
        # kernels are calibrated per record from its own ACS rows
        return self

    def transform(self, records):
        records = check_records(records)
        return np.stack([rss_recon(arc_interp(r.y, r.pattern, self.kernel, self.ridge)) for r in records])


class ModelBasedGT(BaseEstimator, TransformerMixin):
    """Known-motion least-squares correction (upper-bound baseline)."""

    def __init__(self, lam=None, iters=DEFAULT_MB_ITERS, tol=DEFAULT_MB_TOL, operator="image"):
        self.lam = lam
        self.iters = iters
        self.tol = tol
        self.operator = operator

    def fit(self, records=None, y=None):
        return self

    def transform(self, records):
        records = check_records(records, need_motion=True)
        return np.stack(
            [
                model_based_gt(r.y, r.coils, r.pattern, r.m_true, self.lam, self.iters, self.tol, operator=self.operator)
                for r in records
            ]
        )


class NeuralRecon(BaseEstimator):
    """Motion-conditioned network (``mode="hypernet"``) or plain ablation
    (``mode="conv"``) trained with the SSIM loss.

    ``predict`` evaluates at each record's ground-truth motion relative to the
    reference pose unless ``motion`` is given.
    """

    def __init__(
        self,
        mode="hypernet",
        iters=500,
        batch_size=6,
        lr=1e-3,
        features=8,
        domains=("k", "i"),
        hidden=(64, 64, 64),
        seed=0,
    ):
        self.mode = mode
        self.iters = iters
        self.batch_size = batch_size
        self.lr = lr
        self.features = features
        self.domains = domains
        self.hidden = hidden
        self.seed = seed

    def fit(self, records, y=None):
        records = check_records(records, need_motion=True)
        config = TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            iters=self.iters,
            seed=self.seed,
            features=self.features,
            domains=tuple(self.domains),
            hidden=tuple(self.hidden),
            log_every=0,
        )
        result = train(records, records[0].pattern, records[0].coils.shape[0], config, self.mode)
        self.network_ = result.network
        self.loss_curve_ = result.losses
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("NeuralRecon is not fitted; call fit first")

    def predict(self, records, motion=None):
        self._check_fitted()
        records = check_records(records)
        if motion is None:
            motion = [r.m_ref for r in records]
        return np.stack([self.network_.reconstruct(r.y, m) for r, m in zip(records, motion)])

    @classmethod
    def from_network(cls, network: ReconNetwork) -> "NeuralRecon":
        est = cls(mode=network.mode)
        est.network_ = network
        est.loss_curve_ = []
        return est


class MotionCorrector(BaseEstimator):
    """Test-time motion estimation with rejection.

    ``backend="hypernet"`` needs a fitted ``network``; ``"model-based"``
    reconstructs by least squares and needs none. After ``predict`` the
    per-record outcomes are in ``outcomes_``.
    """

    def __init__(
        self,
        backend="model-based",
        network=None,
        trials=DEFAULT_TRIALS,
        iters=DEFAULT_ITERS,
        schedule=DEFAULT_SCHEDULE,
        reject_threshold=DEFAULT_REJECT_THRESHOLD,
        cg_iters=10,
        seed=0,
    ):
        self.backend = backend
        self.network = network
        self.trials = trials
        self.iters = iters
        self.schedule = schedule
        self.reject_threshold = reject_threshold
        self.cg_iters = cg_iters
        self.seed = seed

    def fit(self, records=None, y=None):
        if self.backend not in ("hypernet", "model-based"):
            raise ParameterError(f"unknown backend {self.backend!r}")
        if self.backend == "hypernet" and self.network is None:
            raise ParameterError("the hypernet backend needs a trained network")
        return self

    def _make_backend(self, rec):
        if self.backend == "hypernet":
            net = self.network.network_ if isinstance(self.network, NeuralRecon) else self.network
            return HypernetBackend(net, rec.coils, rec.pattern)
        return ModelBasedBackend(rec.coils, rec.pattern, lam=0.0, cg_iters=self.cg_iters)

    def correct(self, rec):
        self.fit()
        sched = self.schedule if isinstance(self.schedule, Schedule) else Schedule(*self.schedule)
        return estimate_motion(
            rec.y,
            self._make_backend(rec),
            self.trials,
            self.iters,
            sched,
            seed=self.seed,
            reject_threshold=self.reject_threshold,
            pixel_spacing=getattr(getattr(rec, "m_true", None), "pixel_spacing", 260.0 / 64),
        )

    def predict(self, records):
        records = check_records(records)
        self.outcomes_ = [self.correct(r) for r in records]
        return np.stack([o.x_hat for o in self.outcomes_])
