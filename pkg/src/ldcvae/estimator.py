"""scikit-learn style wrapper around training and prediction."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import PatientRecord
from .encoders import N_CATEGORIES
from .errors import EmptyInputError, SchemaError
from .model import LdCvaeModel, ModelConfig
from .pipeline import TrainConfig, evaluate, train_fold
from .survival import SurvivalLabel, label_arrays


def check_records(records, *, require_genomics: bool = False, d_path: int | None = None,
                  genomic_dims: Sequence[int] | None = None) -> list[PatientRecord]:
    """Validate a sequence of patient records and return it as a list.

    Bags must be finite, non-empty 2-d arrays; genomic vectors (when present)
    must match ``genomic_dims``.
    """
    if isinstance(records, PatientRecord):
        raise TypeError("expected a sequence of PatientRecord, got a single record")
    records = list(records)
    if not records:
        raise EmptyInputError("no patient records")
    for rec in records:
        if not isinstance(rec, PatientRecord):
            raise TypeError(f"expected PatientRecord, got {type(rec).__name__}")
        bag = check_array(rec.bag, ensure_2d=True, dtype=np.float64)
        if d_path is not None and bag.shape[1] != d_path:
            raise SchemaError(f"patient {rec.id}: bag width {bag.shape[1]} != {d_path}")
        if rec.genomics is None:
            if require_genomics:
                raise SchemaError(f"patient {rec.id}: genomic data required")
            continue
        if len(rec.genomics) != N_CATEGORIES:
            raise SchemaError(f"patient {rec.id}: {len(rec.genomics)} genomic categories, need {N_CATEGORIES}")
        if genomic_dims is not None:
            for k, (vec, n) in enumerate(zip(rec.genomics, genomic_dims)):
                check_array(np.reshape(vec, (1, -1)), dtype=np.float64)
                if np.size(vec) != n:
                    raise SchemaError(f"patient {rec.id}: category {k} has length {np.size(vec)}, expected {n}")
    return records


def check_survival_target(y, n: int) -> list[SurvivalLabel]:
    """``y`` as an ``(n, 2)`` array of (time in months, censored flag)."""
    y = check_array(y, ensure_2d=True, dtype=np.float64)
    if y.shape != (n, 2):
        raise ValueError(f"survival target must have shape ({n}, 2), got {y.shape}")
    return [SurvivalLabel(float(t), bool(c)) for t, c in y]


class LdCvaeSurvival(BaseEstimator):
    """Multimodal survival model that tolerates missing genomics at prediction time.

    ``fit`` takes a list of :class:`PatientRecord` with complete genomics;
    ``y`` optionally overrides their labels.  ``predict`` returns risk
    scores (higher means shorter expected survival); ``transform`` returns
    the joint latent posterior means.
    """

    def __init__(self, epochs: int = 30, lr: float = 2e-4, weight_decay: float = 1e-5,
                 accumulation_steps: int = 32, alpha: float = 0.1, warmup_steps: int | None = None,
                 d_model: int = 64, d_latent: int = 32, n_layers: int = 2, n_heads: int = 4, n_bins: int = 4,
                 alignment: str = "printed", genomic_branch: bool = True, seed: int = 0):
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.accumulation_steps = accumulation_steps
        self.alpha = alpha
        self.warmup_steps = warmup_steps
        self.d_model = d_model
        self.d_latent = d_latent
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.n_bins = n_bins
        self.alignment = alignment
        self.genomic_branch = genomic_branch
        self.seed = seed

    def _train_config(self, d_path: int, genomic_dims: tuple[int, ...]) -> TrainConfig:
        model = ModelConfig(d_path=d_path, genomic_dims=genomic_dims, d_model=self.d_model,
                            d_latent=self.d_latent, n_layers=self.n_layers, n_heads=self.n_heads,
                            n_bins=self.n_bins, alignment=self.alignment, genomic_branch=self.genomic_branch)
        return TrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                           accumulation_steps=self.accumulation_steps, alpha=self.alpha,
                           warmup_steps=self.warmup_steps, seed=self.seed, model=model)

    def fit(self, X, y=None, log_path=None) -> "LdCvaeSurvival":
        records = check_records(X, require_genomics=self.genomic_branch)
        if y is not None:
            labels = check_survival_target(y, len(records))
            records = [replace(r, label=lab) for r, lab in zip(records, labels)]
        d_path = records[0].bag.shape[1]
        dims = tuple(np.size(v) for v in records[0].genomics) if records[0].genomics else ModelConfig().genomic_dims
        check_records(records, d_path=d_path, genomic_dims=dims)
        result = train_fold(records, self._train_config(d_path, dims), log_path=log_path)
        self.model_ = result.model
        self.bin_edges_ = result.edges
        self.loss_trace_ = result.trace
        self.n_features_in_ = d_path
        return self

    def _checked(self, X) -> list[PatientRecord]:
        check_is_fitted(self, "model_")
        c = self.model_.config
        return check_records(X, d_path=c.d_path, genomic_dims=c.genomic_dims)

    def predict(self, X, missing: bool = False) -> np.ndarray:
        records = self._checked(X)
        if missing:
            records = [r.without_genomics() for r in records]
        return np.array([self.model_.predict(r).risk for r in records])

    def predict_survival(self, X, missing: bool = False) -> np.ndarray:
        """Per-bin survival probabilities, shape ``(n, n_bins)``."""
        records = self._checked(X)
        if missing:
            records = [r.without_genomics() for r in records]
        return np.stack([self.model_.predict(r).output.survival.data for r in records])

    def transform(self, X, missing: bool = False) -> np.ndarray:
        """Joint latent posterior means, shape ``(n, d_latent)``; patients
        without genomics (or all, when ``missing``) use the pathology-only joint."""
        records = self._checked(X)
        rows = []
        for r in records:
            post = self.model_.posteriors(r)
            q = post["joint"] if "joint" in post and not missing else post["joint_missing"]
            rows.append(q.mean.data.reshape(-1))
        return np.stack(rows)

    def score(self, X, y=None, missing: bool = False) -> float:
        """Concordance index of the predicted risks."""
        records = self._checked(X)
        if y is not None:
            labels = check_survival_target(y, len(records))
            records = [replace(r, label=lab) for r, lab in zip(records, labels)]
        return evaluate(self.model_, records, missing=missing).c_index

    @classmethod
    def from_model(cls, model: LdCvaeModel, edges=None) -> "LdCvaeSurvival":
        c = model.config
        est = cls(d_model=c.d_model, d_latent=c.d_latent, n_layers=c.n_layers, n_heads=c.n_heads,
                  n_bins=c.n_bins, alignment=c.alignment, genomic_branch=c.genomic_branch, seed=model.seed)
        est.model_ = model
        est.bin_edges_ = None if edges is None else np.asarray(edges)
        est.loss_trace_ = []
        est.n_features_in_ = c.d_path
        return est


def survival_target(records: Sequence[PatientRecord]) -> np.ndarray:
    times, censored = label_arrays([r.label for r in records])
    return np.column_stack([times, censored.astype(float)])

