import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Shared default-benchmark artifacts; pretraining is the slow step, so it runs once per session.

@pytest.fixture(scope="session")
def bench():
    from xsface.synthdata import BenchmarkConfig, benchmark_splits, generate_benchmark

    cfg = BenchmarkConfig()
    pre, adapt, evl = benchmark_splits(cfg)
    return {"config": cfg, "dataset": generate_benchmark(cfg), "pretrain": pre, "adapt": adapt, "eval": evl}


@pytest.fixture(scope="session")
def pretrained(bench):
    from xsface.backbone import BackboneConfig, build_backbone
    from xsface.trainer import PretrainConfig, pretrain

    return pretrain(build_backbone(BackboneConfig()), bench["dataset"], bench["pretrain"], PretrainConfig())


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
