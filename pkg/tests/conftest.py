import numpy as np
import pytest
import torch

from regen_mfg.measure import StateSample
from regen_mfg.models import MetricsSettings, NetworkSettings, RunConfig, TrainerConfig
from regen_mfg.problem import BucketStats, make_problem


@pytest.fixture
def lq1_problem():
    return make_problem("lq1", 1)


@pytest.fixture
def zero_mean_stats(lq1_problem):
    return BucketStats.from_means(torch.zeros(lq1_problem.N + 1, lq1_problem.d, dtype=torch.float64))


@pytest.fixture
def small_config():
    return RunConfig(
        variant="lq1",
        d=1,
        seed=3,
        trainer=TrainerConfig(iterations=3, ensemble_size=400, batch_size=50, metrics_every=1,
                              checkpoint_every=0),
        network=NetworkSettings(width=16, depth=3, test_width=8, scale_c=0.5),
        metrics=MetricsSettings(rc_points=32, re_points=64, paths=32),
    )


@pytest.fixture
def make_sample():
    def _make(time_index, z, dtype=torch.float64):
        z = torch.as_tensor(np.asarray(z, dtype=np.float64), dtype=dtype)
        if z.dim() == 1:
            z = z.unsqueeze(-1)
        return StateSample(torch.as_tensor(time_index, dtype=torch.long), z)
    return _make
