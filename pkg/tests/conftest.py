import pytest
import torch

from distillkit.data import SplitConfig, split_dataset, synth_dataset
from distillkit.trainer import SplitData, TrainConfig, train

SMALL = 32  # input side for fast unit tests


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_synth")
    return split_dataset(synth_dataset(3, 10, seed=3, out_root=root, size=SMALL), SplitConfig(seed=3))


@pytest.fixture(scope="session")
def tiny_data(tiny_manifest):
    return SplitData(tiny_manifest, SMALL)


@pytest.fixture(scope="session")
def toy_teacher_ckpts(tiny_data, tmp_path_factory):
    """Two briefly trained toy teachers (offline phase) for KD-mode tests."""
    out = tmp_path_factory.mktemp("teachers")
    paths = []
    for k in range(2):
        cfg = TrainConfig(mode="finetune_teacher", teacher_ids=["TOY"], epochs=1, batch_size=8,
                          image_size=SMALL, seed=k + 1, name=f"T{k + 1}")
        rec = train(cfg, tiny_data, out / f"T{k + 1}")
        paths.append(rec.artifacts["checkpoint"])
    return paths


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
