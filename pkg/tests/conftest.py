import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for `helpers`

FIXTURES = Path(__file__).parent / "fixtures"

MIB = 1024 * 1024


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def net_config(tmp_path) -> Path:
    """Standard alpha-beta config: 1 us latency, 1 GB/s links, free compute."""
    path = tmp_path / "net.json"
    path.write_text(
        '{"topology": {"kind": "ring", "n": 4}, "alpha_s": 1e-06, '
        '"bandwidth_Bps": 1e9, "reduce_bandwidth_Bps": null}\n'
    )
    return path
