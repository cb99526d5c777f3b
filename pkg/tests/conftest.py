import numpy as np
import pytest

from mmrec.codec import Payload, build_task_instance, build_user_sentence
from mmrec.datagen import SplitSpec, WorldConfig, generate_world, make_splits, world_vocabulary
from mmrec.model import FusionLM, ModelConfig


def tiny_world_config(**kw) -> WorldConfig:
    base = dict(seed=3, num_users=60, num_items=30, num_categories=3, brands_per_category=2, max_history=8)
    base.update(kw)
    return WorldConfig(**base)


def tiny_model_config(vocab_size: int, **kw) -> ModelConfig:
    base = dict(
        vocab_size=vocab_size, d=16, heads=2, layers=2, cross_every=1, slots=2,
        d_v=8, vision_layers=1, vision_heads=2, max_len=256, seed=0,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(tiny_world_config())


@pytest.fixture(scope="session")
def tiny_vocab(tiny_world):
    return world_vocabulary(tiny_world, num_codes=16)


@pytest.fixture(scope="session")
def tiny_splits(tiny_world):
    return make_splits(tiny_world, SplitSpec(seed=0))


@pytest.fixture
def tiny_model(tiny_vocab):
    return FusionLM(tiny_model_config(len(tiny_vocab)))


def rec_sequences(world, vocab, n=4, rng=None, items=3):
    """``n`` rec prompts over random histories of ``items`` catalog items."""
    rng = rng or np.random.default_rng(0)
    out = []
    for _ in range(n):
        pick = rng.choice(len(world.items), size=items + 1, replace=False)
        hist = [world.items[i] for i in pick[:-1]]
        seq = build_user_sentence(hist, vocab)
        inst = build_task_instance(seq, "rec", Payload(target_item=world.items[pick[-1]]), vocab)
        out.append(inst.training_sequence(vocab))
    return out


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
