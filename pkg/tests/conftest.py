import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def golden_dir():
    return GOLDEN


@pytest.fixture(scope="session")
def benchmark_hierarchy():
    """Small trained benchmark hierarchy shared by the slower tests."""
    from hnh.core import sample
    from hnh.models import BenchmarkModel
    from hnh.surrogate import TrainOptions, build_hierarchy, make_training_set

    model = BenchmarkModel()
    batch = sample(model.distribution, 400, 100)
    data = make_training_set(batch.values, model.evaluate_batch(batch.values), 0.2, seed=100)
    opts = TrainOptions(epochs=60, weight_decay=1e-2, cv_folds=0, seed=3)
    return model, build_hierarchy(data, [1, 2, 3], 16, opts)


def pytest_terminal_summary(terminalreporter):
    import gate

    if gate.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(gate.LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
