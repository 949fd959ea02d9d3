import warnings

import pytest
import torch

from tpgan.core import RandomStream, ResolutionProfile, TrainConfig
from tpgan.data import generate_sprite_corpus

warnings.filterwarnings("ignore", message=".*requires_grad=True to a scalar.*")

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def prof():
    return ResolutionProfile.desk()


@pytest.fixture(scope="session")
def small_corpus(prof):
    # 4 identities x 10 images: 8 train / 1 val / 1 test per identity
    return generate_sprite_corpus(4, 10, prof, RandomStream(0))


@pytest.fixture
def tiny_cfg():
    return TrainConfig(gen_channels=32, disc_channels=8, disc_pair_channels=16, head_channels=8,
                       feat_dim=16, teacher_channels=8, embed_dim=16, cond_dim=16, noise_dim=8,
                       batch_size=8, epochs=1, teacher_epochs=1, eval_interval=1, eval_captions=8)
