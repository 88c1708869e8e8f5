import sys
from pathlib import Path

import pytest
import torch

from avrank.discriminator import DiscriminatorConfig, init_discriminator
from avrank.generator import GeneratorConfig, init_generator

sys.path.insert(0, str(Path(__file__).parent))

TINY_GEN = GeneratorConfig(encoder_stages=2, base_width=4, blocks_per_stage=1, stem_kernel=3)
TINY_DISC = DiscriminatorConfig(base_width=1, max_width=2)

# one line per acceptance criterion, echoed in the terminal summary
RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_generator():
    return init_generator(TINY_GEN).double()


@pytest.fixture
def tiny_discriminator():
    return init_discriminator(TINY_DISC).double()


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)
