import pytest
import torch

from commcl.synth import WorldSpec, build_world
from commcl.towers import Backbone, EncoderConfig, pretrain_backbone

torch.set_num_threads(1)

TINY_ENCODER = dict(num_layers=2, d_model=8, num_heads=2, prompt_depth=1, prompt_len=2,
                    vocab_size=16, max_tokens=4, text_len=3, mlp_ratio=2, head_rank=2)
TINY_WORLD = dict(d_model=8, spatial_len=4, cl_classes=4, pretrain_classes=2, train_per_class=6,
                  test_per_class=3, pretrain_per_class=8, pretrain_heldout=2, subsets=2,
                  vocab_size=16, text_len=3)


def tiny_encoder(**kw) -> EncoderConfig:
    return EncoderConfig(**{**TINY_ENCODER, **kw})


def tiny_spec(**kw) -> WorldSpec:
    return WorldSpec(**{**TINY_WORLD, **kw})


@pytest.fixture(scope="session")
def tiny_world():
    return build_world(tiny_spec())


@pytest.fixture
def tiny_backbone():
    return Backbone(tiny_encoder(), seed=3).freeze()


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_world):
    backbone, report = pretrain_backbone(tiny_world.pretrain_corpus(), tiny_encoder(), seed=0,
                                         steps=200, learning_rate=1e-2, min_retrieval=0.0)
    return backbone, report


@pytest.fixture(scope="session")
def default_world():
    return build_world(WorldSpec())


@pytest.fixture(scope="session")
def default_backbone(default_world, tmp_path_factory):
    """Backbone pretrained with the default configuration, cached as a checkpoint."""
    from commcl.checkpoint import save_backbone

    backbone, report = pretrain_backbone(default_world.pretrain_corpus(), EncoderConfig(), seed=0)
    ckpt = tmp_path_factory.mktemp("default_backbone")
    save_backbone(backbone, ckpt, {"world_seed": default_world.spec.seed, "retrieval": report.retrieval})
    return backbone, report, ckpt


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[1].rstrip("abcd")), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
