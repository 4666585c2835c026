"""Scikit-learn style front end for training the debiased classifier.

DecorreClassifier wraps model construction, the dual-stream training loop,
checkpointing and correlation recording behind the familiar
fit/decision_function/predict surface, so the mechanism composes with the
wider ecosystem (cross-validation utilities, metric functions, cloning).
The control-region images enter as a fit parameter because they are a
training-time-only input: inference never needs them.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import augment_batch
from .decorrelation import CorrelationRecord, DecorreConfig
from .engine import bce_with_logits, seeded_rng, sgd_step
from .models import ARCHITECTURES, ArchitectureSpec, Model, build_model

EVAL_CHUNK = 256


def validate_images(x, name: str = "X") -> np.ndarray:
    """Coerce to a float32 [N, 1, H, W] stack of finite single-channel images."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"{name} must be [N,H,W] or [N,1,H,W], got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


def validate_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labels must be a vector of length {n}, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    return y.astype(np.int64)


class DecorreClassifier(BaseEstimator, ClassifierMixin):
    """Binary CNN classifier with correlation-driven feature suppression.

    Parameters mirror the filter-unit modes: ``mode`` selects factor,
    sigmoid or dropout filtering with its scalar hyperparameters; ``decorre``
    switches the filtering off entirely (correlations can still be recorded
    for analysis via ``record_every``). ``checkpoint_epoch`` restores the
    weights captured at that epoch once training finishes, mirroring
    evaluation after half of an over-allocated training budget.

    Requires ``cr`` (control-region images, same shape as X) in fit whenever
    filtering or recording is active. Inference is identical to the plain
    architecture: ``decision_function`` returns logits from the ROI alone.
    """

    def __init__(self, arch="small", decorre: bool = True, mode: str = "dropout",
                 threshold: float = 0.3, low_factor: float = 0.01,
                 midpoint: float = 0.3, floor: float = 0.01, steepness: float = 50.0,
                 guarantee: float = 0.3, insertion_points=None,
                 epochs: int = 60, batch_size: int = 32, lr: float = 0.05,
                 seed: int = 0, checkpoint_epoch=None, record_every: int = 0,
                 record_batches: int = 8, augment: bool = True):
        self.arch = arch
        self.decorre = decorre
        self.mode = mode
        self.threshold = threshold
        self.low_factor = low_factor
        self.midpoint = midpoint
        self.floor = floor
        self.steepness = steepness
        self.guarantee = guarantee
        self.insertion_points = insertion_points
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.checkpoint_epoch = checkpoint_epoch
        self.record_every = record_every
        self.record_batches = record_batches
        self.augment = augment

    # -- configuration -------------------------------------------------------

    def decorre_config(self) -> DecorreConfig:
        return DecorreConfig(mode=self.mode, threshold=self.threshold,
                             low_factor=self.low_factor, midpoint=self.midpoint,
                             floor=self.floor, steepness=self.steepness,
                             guarantee=self.guarantee)

    def _build_spec(self, with_decorre: bool) -> ArchitectureSpec:
        if isinstance(self.arch, ArchitectureSpec):
            spec = self.arch
            if not with_decorre:
                from .models import plain_spec
                return plain_spec(spec)
            if spec.decorre_cfg is None:
                raise ValueError("ArchitectureSpec has no decorre_cfg but decorrelation is active")
            return spec
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; options: {sorted(ARCHITECTURES)}")
        factory = ARCHITECTURES[self.arch]
        if with_decorre:
            return factory(decorre_cfg=self.decorre_config(),
                           insertion_points=self.insertion_points)
        return factory()

    # -- training --------------------------------------------------------------

    def fit(self, X, y, cr=None):
        X = validate_images(X)
        y = validate_labels(y, X.shape[0])
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2 and self.decorre:
            raise ValueError("batch_size must be >= 2 when decorrelation is active")
        monitoring = self.record_every > 0
        needs_cr = self.decorre or monitoring
        if needs_cr:
            if cr is None:
                raise ValueError("fit needs cr= control-region images when "
                                 "decorrelation or correlation recording is active")
            cr = validate_images(cr, name="cr")
            if cr.shape != X.shape:
                raise ValueError(f"cr shape {cr.shape} != X shape {X.shape}")

        spec = self._build_spec(with_decorre=needs_cr)
        model = build_model(spec, seeded_rng(self.seed, "init"))
        rng_order = seeded_rng(self.seed, "order")
        rng_aug = seeded_rng(self.seed, "augment")
        rng_drop = seeded_rng(self.seed, "dropout")

        n = X.shape[0]
        has_layers = bool(model.decorre_layers())
        checkpoint = self.checkpoint_epoch
        if checkpoint is not None and not 1 <= checkpoint <= self.epochs:
            raise ValueError(f"checkpoint_epoch must be in [1, {self.epochs}], got {checkpoint}")

        records: list[CorrelationRecord] = []
        loss_curve: list[float] = []
        checkpoint_state = None
        diverged = False
        y_float = y.astype(np.float32)

        for epoch in range(1, self.epochs + 1):
            record_epoch = monitoring and (epoch % self.record_every == 0 or epoch == checkpoint)
            order = rng_order.permutation(n)
            epoch_losses = []
            for bi, start in enumerate(range(0, n, self.batch_size)):
                idx = order[start:start + self.batch_size]
                if idx.size < 2:
                    continue  # correlation over a single sample is undefined
                xb = X[idx]
                crb = cr[idx] if cr is not None else None
                if self.augment:
                    xb, crb = augment_batch(xb, crb, rng_aug) if crb is not None \
                        else (augment_batch(xb, xb, rng_aug)[0], None)
                use_dual = has_layers and (self.decorre or record_epoch)
                if use_dual:
                    logits, recs = model.forward_dual(
                        xb, crb, rng=rng_drop, epoch=epoch, filter_enabled=self.decorre)
                    if record_epoch and bi < self.record_batches:
                        records.extend(recs)
                else:
                    logits = model.forward(xb, training=True)
                loss, grad = bce_with_logits(logits, y_float[idx])
                if not np.isfinite(loss):
                    diverged = True
                    break
                model.backward(grad)
                sgd_step(model.parameters(), self.lr)
                epoch_losses.append(loss)
            if epoch_losses:
                loss_curve.append(float(np.mean(epoch_losses)))
            if diverged:
                break
            if checkpoint is not None and epoch == checkpoint:
                checkpoint_state = model.state_dict()

        if checkpoint_state is not None:
            model.load_state_dict(checkpoint_state)

        self.model_: Model = model
        self.classes_ = np.array([0, 1], dtype=np.int64)
        self.records_ = records
        self.loss_curve_ = loss_curve
        self.diverged_ = diverged
        return self

    # -- inference ---------------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this classifier is not fitted yet; call fit first")

    def decision_function(self, X) -> np.ndarray:
        """Logits of the positive class; control regions are not needed."""
        self._check_fitted()
        X = validate_images(X)
        chunks = [self.model_.forward(X[i:i + EVAL_CHUNK], training=False)
                  for i in range(0, X.shape[0], EVAL_CHUNK)]
        return np.concatenate(chunks)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        p = 1.0 / (1.0 + np.exp(-z))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return self.classes_[(self.decision_function(X) >= 0).astype(int)]
