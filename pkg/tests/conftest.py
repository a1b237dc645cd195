import numpy as np
import pytest

from audsr.datapipe import FaceDataset, Geometry, SynthSpec, synth_dataset
from audsr.netblocks import BlockConfig

TINY = BlockConfig(widths=(2, 4, 4, 4, 4), in_channels=1, reduction=2, n_land=49, n_au=6,
                   resolution=32, fc_hidden=8, cbam_kernel=3)


@pytest.fixture(scope="session")
def tiny_block():
    return TINY


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A small two-domain synthetic set at 36 px, cropped to 32 px."""
    spec = SynthSpec(image_size=36, n_source_train=12, n_source_val=4, n_target_train=12,
                     n_target_val=6, n_target_test=6)
    out = tmp_path_factory.mktemp("tiny_synth")
    man = synth_dataset(spec, seed=5, out_dir=out)
    return FaceDataset(man, Geometry.for_crop(32))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
