"""Multimodal survival prediction with conditional generation of missing genomics."""

from .data import CohortSpec, PatientRecord, generate_cohort, mask_genomics, read_cohort, write_cohort
from .estimator import LdCvaeSurvival
from .gaussian import DiagGaussian, NoiseSource, poe_combine
from .model import LdCvaeModel, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import TrainConfig, beta_at, evaluate, run_cv, train_fold
from .survival import SurvivalLabel, c_index, km_curve, logrank_test

__version__ = "0.1.0"

__all__ = [
    "CohortSpec", "PatientRecord", "generate_cohort", "mask_genomics", "read_cohort", "write_cohort",
    "LdCvaeSurvival", "DiagGaussian", "NoiseSource", "poe_combine", "LdCvaeModel", "ModelConfig",
    "load_checkpoint", "save_checkpoint", "TrainConfig", "beta_at", "evaluate", "run_cv", "train_fold",
    "SurvivalLabel", "c_index", "km_curve", "logrank_test",
]
