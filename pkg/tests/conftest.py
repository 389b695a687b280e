import pytest

from radiofield.config import DESK
from radiofield.dataset import GenerationConfig, Room, generate_dataset
from radiofield.physics import itu_material

TOY_FC = 2.4e9


def toy_config(**updates):
    """The desk preset shrunk so that an iteration takes milliseconds."""
    base = {
        "sampler.m": 8,
        "network.trunk_width": 24,
        "network.head_width": 24,
        "network.feature_width": 12,
        "trainer.receivers_per_iter": 6,
        "trainer.eval_every": 10,
        "trainer.val_receivers": 6,
        "trainer.warmup_iters": 10,
        "trainer.block_size": 20,
        "trainer.checkpoint_every": 10,
        "trainer.dtype": "float64",
    }
    base.update(updates)
    return DESK.with_updates(base)


@pytest.fixture(scope="session")
def toy_dataset():
    room = Room.uniform((4.0, 3.0, 2.5), itu_material("gypsum", TOY_FC), TOY_FC)
    return generate_dataset(room, (1.0, 1.2, 1.4), 50, seed=5,
                            cfg=GenerationConfig(n_negatives=4, min_relative_power_db=20.0))


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the PASS/FAIL line of an acceptance criterion (printed in the terminal summary)."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
