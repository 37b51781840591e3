import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scenariolib import straight_net  # noqa: E402


@pytest.fixture(scope="session")
def net():
    return straight_net()
