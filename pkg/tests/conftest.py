import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ovfield import cli  # noqa: E402
from ovfield.scene_oracle import generate_scene  # noqa: E402

# Filled by test_acceptance; printed at the end of the session.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

TWO_OBJECT_SPEC = """\
resolution=16 16 16
bounds=-1 -1 -1 1 1 1
embed_dim=8
object.1.shape=box
object.1.min=-0.7 -0.6 -0.5
object.1.max=-0.05 0.3 0.4
object.1.color=0.9 0.2 0.2
object.2.shape=sphere
object.2.center=0.45 0.2 0.0
object.2.radius=0.35
object.2.color=0.2 0.3 0.9
"""


@pytest.fixture(scope="session")
def toy_spec_text():
    return cli.default_spec_text()


@pytest.fixture(scope="session")
def toy_scene(toy_spec_text):
    return generate_scene(toy_spec_text, 0)


@pytest.fixture(scope="session")
def two_object_scene():
    return generate_scene(TWO_OBJECT_SPEC, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def run_clean_pipeline(root: Path, seed: int = 0) -> Path:
    """generate -> extract -> train -> eval through the CLI entry point."""
    steps = [
        ["generate", "toy", "--views", "8", "--seed", str(seed), "--out", str(root / "scene")],
        ["extract", str(root / "scene"), "--seed", str(seed), "--out", str(root / "proposals")],
        ["train", str(root / "scene"), str(root / "proposals"), "--seed", str(seed),
         "--out", str(root / "train")],
        ["eval", str(root / "train" / "field.ofck"), str(root / "scene"),
         "--out", str(root / "eval")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return root


@pytest.fixture(scope="session")
def clean_run(tmp_path_factory):
    """The standard toy-scene pipeline with zero corruption (about a minute)."""
    return run_clean_pipeline(tmp_path_factory.mktemp("clean"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
