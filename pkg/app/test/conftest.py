import numpy as np
import pandas as pd
import pytest

from app.estimation import simulation
from app.estimation.data_model import DiscreteMeasure, Sample, Subject, validate_sample
from app.estimation.simulation import SimulationConfig, generate_sample
from app.estimation.survival import kaplan_meier_censoring
from app.resources.published_tables import PUBLISHED_TABLES


@pytest.fixture
def hand_sample() -> Sample:
    """观测 {(1,δ=1),(2,δ=0),(3,δ=1)}，第三个个体的事件在 1.5 与 2.5"""
    return validate_sample(
        Sample(
            (
                Subject(1.0, True, (1.0, 2.0), (0.5,)),
                Subject(2.0, False, (1.5, 1.0), (0.7, 1.2)),
                Subject(3.0, True, (2.0, 1.5), (1.5, 2.5)),
            )
        )
    )


@pytest.fixture
def hand_fit(hand_sample):
    return kaplan_meier_censoring(hand_sample)


@pytest.fixture
def design_config() -> SimulationConfig:
    return SimulationConfig(n=100, reps=1, seed=20240611)


@pytest.fixture
def design_sample(design_config) -> Sample:
    return generate_sample(design_config, 1).sample


@pytest.fixture
def small_sample() -> Sample:
    return generate_sample(SimulationConfig(n=60, seed=11), 1).sample


@pytest.fixture
def uncensored_sample() -> Sample:
    return generate_sample(SimulationConfig(n=200, seed=5, censoring_scale=1e6), 1).sample


@pytest.fixture
def unit_weights() -> DiscreteMeasure:
    return DiscreteMeasure.uniform(np.round(np.arange(1, 13) * 0.1, 10))


@pytest.fixture
def published_replications(monkeypatch):
    """
    用发表值代替重复模拟，返回记录收到的设置的列表

    bias_shift 加到偏差向量上，用于构造未通过验收的结果
    """
    seen: list[SimulationConfig] = []

    def install(bias_shift: float = 0.0):
        def fake(config, jobs=1):
            seen.append(config)
            table, row = next(
                (t, r)
                for t in PUBLISHED_TABLES.values()
                for r in t.estimators
                if r.pipeline == config.pipeline and r.censoring == round(100 * config.target_censoring)
            )
            masses = table.mean_masses.get(row.censoring, (0.0, 0.0, 0.0, 0.0))
            summary = simulation.ReplicationSummary(
                bias=np.asarray(row.bias) + bias_shift,
                variance=np.asarray(row.covariance),
                mse=row.mse,
                mean_selected_masses=dict(zip(("0.9", "1", "1.1", "1.2"), masses)),
                mean_events_per_subject=10.0,
                censoring_fraction=row.censoring / 100.0,
                replications=config.reps,
            )
            records = pd.DataFrame({"replication": np.arange(1, config.reps + 1)})
            return simulation.ReplicationResult(config, summary, records)

        monkeypatch.setattr(simulation, "run_replications", fake)
        return seen

    return install
