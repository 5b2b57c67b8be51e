import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402
from spatialcodec.corpus import make_corpus  # noqa: E402
from spatialcodec.roomsim import RoomSimConfig, generate_dataset  # noqa: E402
from spatialcodec.signal import read_audio  # noqa: E402

DESK_SEED = 2024
DESK_SIZE = 20


@dataclass
class DeskSet:
    manifest: Path
    records: list
    signals: list


@pytest.fixture(scope="session")
def desk_set(tmp_path_factory) -> DeskSet:
    """20 reverberant 8-channel utterances, RT60 in [0.2, 0.5] s, default 8-mic array."""
    root = tmp_path_factory.mktemp("desk")
    make_corpus(root / "corpus", DESK_SIZE, seed=DESK_SEED, duration=(2.5, 3.5))
    cfg = RoomSimConfig(rt60_min=0.2, rt60_max=0.5, max_duration=3.0)
    records = generate_dataset(root / "corpus", DESK_SIZE, cfg, seed=DESK_SEED, out_dir=root / "data")
    signals = [read_audio(root / "data" / r.mixture) for r in records]
    return DeskSet(root / "data" / "manifest.tsv", records, signals)


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
