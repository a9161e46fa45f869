import pytest
import torch

from disentangle.batch import PromptFactory
from disentangle.lm import LanguageModel, LmConfig
from disentangle.planted import build_planted_model
from disentangle.tokenizer import Tokenizer
from disentangle.world import AttributeSpec, WorldSpec, generate_world, make_splits

torch.set_num_threads(1)


def small_spec(**kw) -> WorldSpec:
    base = dict(
        n_entities=80,
        attributes=(
            AttributeSpec("country", 6),
            AttributeSpec("continent", 3, "function", "country"),
            AttributeSpec("language", 4, "noisy", "country", 0.2),
            AttributeSpec("climate", 4),
        ),
        n_attribute_templates=4,
        n_entity_templates=4,
        seed=11,
    )
    base.update(kw)
    return WorldSpec(**base)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(small_spec())


@pytest.fixture(scope="session")
def small_tok(small_world):
    return Tokenizer.from_world(small_world)


@pytest.fixture(scope="session")
def small_split(small_world):
    return make_splits(small_world, "entity")


@pytest.fixture(scope="session")
def tiny_lm(small_tok):
    """Untrained 2-layer model: enough for identities that hold for any weights."""
    cfg = LmConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=len(small_tok), seed=3)
    model = LanguageModel(cfg, small_tok.piece_ids())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture(scope="session")
def planted(small_world, small_tok):
    return build_planted_model(small_world, small_tok)


@pytest.fixture(scope="session")
def factory(small_world, small_tok):
    return PromptFactory(small_world, small_tok)


# acceptance criteria report one line each at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
