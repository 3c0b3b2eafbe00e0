import pytest

from fishai import dataset
from fishai.promptgen import MockTextClient, describe_all, description_map

SMALL_COUNTS = (30, 12, 6, 3, 1)


@pytest.fixture
def small_toy(tmp_path):
    """Unsplit 5-class toy dataset written under tmp_path."""
    cfg = dataset.ToyDatasetConfig(SMALL_COUNTS, image_size=32, prototype_noise=0.3, seed=7)
    manifest, paths = dataset.make_toy_dataset(cfg, tmp_path)
    return cfg, manifest, tmp_path


@pytest.fixture
def small_split(small_toy):
    cfg, manifest, root = small_toy
    return cfg, dataset.split(manifest, 0.8, seed=3), root


@pytest.fixture
def species_descriptions(small_split):
    _, manifest, _ = small_split
    return description_map(describe_all(MockTextClient(), manifest.label_space("species")))


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion.

    Usage: ``with acceptance(3, "split correctness") as note: ...``; ``note``
    collects measured values that go on the summary line.
    """
    lines = request.config.stash[ACCEPTANCE_KEY]

    class _Criterion:
        def __init__(self, number, title):
            self.number, self.title, self.notes = number, title, []

        def __call__(self, text):
            self.notes.append(str(text))

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            detail = "; ".join(self.notes)
            if exc is not None:
                detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {exc}".splitlines()[0]
            line = f"[{status}] criterion {self.number}: {self.title}" + (f" ({detail})" if detail else "")
            lines.append((self.number, line))
            print(line)
            return False

    return _Criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
