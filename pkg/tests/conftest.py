import os

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_spec():
    from onsetlab.synthgen import CohortSpec

    return CohortSpec(n_cases=8, seed=11)


@pytest.fixture(scope="session")
def atlas(small_spec):
    from onsetlab.synthgen import make_atlas

    return make_atlas(small_spec)


@pytest.fixture(scope="session")
def small_cases(small_spec):
    from onsetlab.synthgen import generate_case

    return [generate_case(small_spec, i) for i in range(small_spec.n_cases)]


@pytest.fixture(scope="session")
def preprocessed(small_cases, atlas):
    from onsetlab.preprocess import preprocess_cases

    done, failures, ref = preprocess_cases(small_cases, atlas)
    assert not failures
    return done


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _no_cache(monkeypatch, request):
    # unit tests never touch a shared preprocessing cache
    if "acceptance" not in request.keywords:
        monkeypatch.delenv("ONSETLAB_CACHE", raising=False)
    yield


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        key = lambda k: (int("".join(c for c in k if c.isdigit())), k)
        for k in sorted(results, key=key):
            terminalreporter.write_line(results[k])
