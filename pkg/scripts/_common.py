"""Shared cohort builder for the experiment scripts."""

import os
from pathlib import Path

from onsetlab.dataset import build_samples, make_splits, split_ids
from onsetlab.preprocess import preprocess_cases
from onsetlab.synthgen import CohortSpec, generate_case, make_atlas


def build_cohort(n: int, seed: int, workers: int = 1, **spec_kw):
    """(splits, hemisphere samples) for an in-memory synthetic cohort, through the preprocessing cache."""
    os.environ.setdefault("ONSETLAB_CACHE", str(Path.home() / ".cache" / "onsetlab"))
    spec = CohortSpec(n_cases=n, seed=seed, **spec_kw)
    cases = [generate_case(spec, i) for i in range(n)]
    man = {"cases": [{"case_id": c.case_id, "lesion_side": c.lesion_side, "tss_minutes": c.tss_minutes} for c in cases]}
    splits = make_splits(man, seed=seed)
    done, failures, _ = preprocess_cases(cases, make_atlas(spec), split_ids(splits, "train")[0], workers)
    if failures:
        raise RuntimeError(f"preprocessing failed for {failures}")
    return splits, build_samples(done)
