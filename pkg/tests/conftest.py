import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from duograder.corpus import csee_rubric


@pytest.fixture
def rubric():
    return csee_rubric()
