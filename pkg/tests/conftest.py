import numpy as np
import pytest

from pseg.image_encoder import EncoderConfig
from pseg.mask_decoder import DecoderConfig
from pseg.pipeline import ModelBundle, ModelConfig
from pseg.prompt_encoder import PromptEncoderConfig


def toy_model_config(C=8):
    """G = 4, C = 8: 64x64 input, 16x16 logits."""
    return ModelConfig(
        EncoderConfig(input_size=64, patch_size=16, embed_dim=8, num_blocks=2, num_heads=2,
                      window_size=2, global_block_indices=(1,), neck_channels=C),
        PromptEncoderConfig(embed_dim=C, input_size=64, mask_channels=(2, 4)),
        DecoderConfig(token_dim=C, num_heads=2),
    )


@pytest.fixture
def toy_config():
    return toy_model_config()


@pytest.fixture
def toy_bundle():
    return ModelBundle.initialise(toy_model_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ----------------------------------------------------------------

_CRITERIA = {}


class Criterion:
    """Context manager recording one acceptance criterion's verdict for the summary."""

    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        _CRITERIA[self.number] = ("FAIL", self.title, "did not complete")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            _CRITERIA[self.number] = ("PASS", self.title, self.detail)
        else:
            why = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
            _CRITERIA[self.number] = ("FAIL", self.title, f"{self.detail} [{why}]".strip())
        return False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}: {detail}")
