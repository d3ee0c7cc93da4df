import warnings

import numpy as np
import pytest
from PIL import Image

from endoscopy_xai.data import ImageRecord, make_splits, scan_corpus
from endoscopy_xai.synthetic import make_color_corpus


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return make_color_corpus(tmp_path_factory.mktemp("toy") / "corpus", num_classes=3, per_class=20, seed=0)


@pytest.fixture(scope="session")
def toy_manifest(toy_root):
    return make_splits(scan_corpus(toy_root).records, (0.8, 0.1, 0.1), seed=0)


def synthetic_records(per_class=1000, classes=8):
    return [
        ImageRecord(f"/kvasir/class_{c}/img_{i:04d}.jpg", f"class_{c}", c)
        for c in range(classes)
        for i in range(per_class)
    ]


def write_image(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    skipped = [r for r in terminalreporter.stats.get("skipped", []) if "test_acceptance" in r.nodeid]
    if not test_acceptance.RESULTS and not skipped:
        return
    terminalreporter.section("acceptance criteria")
    for line in test_acceptance.RESULTS:
        terminalreporter.write_line(line)
    for report in terminalreporter.stats.get("skipped", []):
        if report.nodeid.endswith("test_full_scale_reproduction"):
            terminalreporter.write_line("SKIP full-scale reproduction (optional): set KVASIR_ROOT on a GPU host to run")
