"""
Shared fixtures: seeded streams, small Hölder classes and hand-built prompts.
"""

import numpy as np
import pytest

from app_config import ExperimentConfig
from modules.datagen import CovariateSpec, HolderSpec, NoiseSpec, Prompt, RegressionTask


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture
def holder_1d():
    return HolderSpec(d=1, alpha=2.0, M=1.0)


@pytest.fixture
def specs_1d(holder_1d):
    return holder_1d, CovariateSpec.uniform(1), NoiseSpec(half_width=0.5)


def make_prompt(rng, n, d, fn=None, noise=0.0, task=None):
    """Uniform covariates with ys = fn(xs) + uniform noise; no task sampling involved."""
    xs = rng.random((n, d))
    query = rng.random(d)
    fn = fn or (lambda x: np.zeros(x.shape[:-1]))
    ys = fn(xs) + (rng.uniform(-noise, noise, n) if noise > 0 else 0.0)
    truth = float(fn(query[None, :])[0])
    response = truth + (float(rng.uniform(-noise, noise)) if noise > 0 else 0.0)
    return Prompt(xs=xs, ys=ys, query=query, truth_at_query=truth, query_response=response, task=task)


@pytest.fixture
def prompt_factory(rng):
    def factory(n, d=1, fn=None, noise=0.0, task=None):
        return make_prompt(rng, n, d, fn, noise, task)
    return factory


@pytest.fixture
def small_config(tmp_path):
    return ExperimentConfig(kind="rates", n_grid=[64, 128, 256, 512], tasks=100, n_prompts=20,
                            out_dir=str(tmp_path / "results"), task_family="constant", workers=1)


@pytest.fixture
def constant_task(holder_1d):
    return RegressionTask.constant(holder_1d, 0.6)
