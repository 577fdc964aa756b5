"""Preprocessing: bias correction, brain extraction, registration, intensity."""

from .bias import correct_bias
from .brain import extract_brain, otsu_threshold
from .intensity import match_histogram, normalize_intensity
from .pipeline import (
    STAGES,
    PipelineError,
    PreprocessedCase,
    load_preprocessed_cohort,
    preprocess_cases,
    preprocess_cohort,
    reorient,
    run_pipeline,
)
from .registration import RegistrationError, ncc, register_affine
from .transforms import AffineTransform, Grid, resample, resample_mask

__all__ = [
    "AffineTransform",
    "Grid",
    "PipelineError",
    "PreprocessedCase",
    "RegistrationError",
    "STAGES",
    "correct_bias",
    "extract_brain",
    "load_preprocessed_cohort",
    "match_histogram",
    "ncc",
    "normalize_intensity",
    "otsu_threshold",
    "preprocess_cases",
    "preprocess_cohort",
    "register_affine",
    "reorient",
    "resample",
    "resample_mask",
    "run_pipeline",
]
