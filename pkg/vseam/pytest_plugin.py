import typing

import _pytest.config
import _pytest.config.argparsing
import _pytest.fixtures
import _pytest.terminal
import numpy as np
import pytest

from vseam import fixtures
from vseam import model as _model

DEFAULT_SEED = 7

PROBE_QUESTION = "Is the object red?"


class VSeamPlugin:
    seed: int = DEFAULT_SEED

    def pytest_configure(self, config: _pytest.config.Config) -> None:
        config.addinivalue_line(
            "markers",
            "vseam_slow: end-to-end runs over the synthetic benchmark. "
            "Deselect with '-m \"not vseam_slow\"'.",
        )
        self.seed = int(config.getoption("--vseam-seed"))

    def pytest_terminal_summary(
        self, terminalreporter: _pytest.terminal.TerminalReporter
    ) -> None:
        terminalreporter.section("🔬 V-SEAM")
        terminalreporter.write_line(f"Toy model seed: {self.seed}")


def pytest_addoption(parser: _pytest.config.argparsing.Parser) -> None:
    group = parser.getgroup("vseam", "Toy vision-language model fixtures")
    group.addoption(
        "--vseam-seed",
        type=int,
        default=DEFAULT_SEED,
        help=f"Seed of the random toy model fixtures (default: {DEFAULT_SEED})",
    )


def pytest_configure(config: _pytest.config.Config) -> None:
    for plugin in config.pluginmanager.get_plugins():
        if isinstance(plugin, VSeamPlugin):
            return

    config.pluginmanager.register(VSeamPlugin(), name="VSeamPlugin")


def _seed(request: _pytest.fixtures.FixtureRequest) -> int:
    return int(request.config.getoption("--vseam-seed"))


@pytest.fixture(scope="session")
def vseam_toy_model(request: _pytest.fixtures.FixtureRequest) -> _model.ModelHandle:
    """Randomly initialised toy model seeded by `--vseam-seed`."""
    return _model.build_toy_vlm(seed=_seed(request))


@pytest.fixture
def vseam_probe_sequence(
    request: _pytest.fixtures.FixtureRequest, vseam_toy_model: _model.ModelHandle
) -> _model.TokenSequence:
    rng = np.random.default_rng(_seed(request))
    image_ids = rng.integers(
        0, vseam_toy_model.vocab_size, vseam_toy_model.image_token_count
    )
    return vseam_toy_model.sequence([int(i) for i in image_ids], PROBE_QUESTION)


@pytest.fixture(scope="session")
def vseam_color_probe() -> _model.ModelHandle:
    """The hand-built colour-probe model with one signal and one noise head."""
    return fixtures.build_color_probe_vlm()


__all__: typing.List[str] = [
    "pytest_addoption",
    "pytest_configure",
    "vseam_color_probe",
    "vseam_probe_sequence",
    "vseam_toy_model",
]
