from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from binpick.pose import load_or_generate_templates  # noqa: E402
from binpick.scene import make_block, make_l_prism  # noqa: E402


@pytest.fixture(scope="session")
def block():
    return make_block()


@pytest.fixture(scope="session")
def l_prism():
    return make_l_prism()


@pytest.fixture(scope="session")
def template_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("templates")


@pytest.fixture(scope="session")
def block_templates(block, template_cache):
    return load_or_generate_templates(template_cache / "block", block)


@pytest.fixture(scope="session")
def l_prism_templates(l_prism, template_cache):
    return load_or_generate_templates(template_cache / "l_prism", l_prism)


@pytest.fixture(scope="session")
def block_template_dir(block_templates, template_cache):
    """Directory holding the cached block templates, for configs that name a cache."""
    return str(template_cache / "block")


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
