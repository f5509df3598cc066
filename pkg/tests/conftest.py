import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))          # shared oracle helpers


@pytest.fixture(scope="session")
def synth_small():
    from subact.synth import standard_dataset
    return standard_dataset(0, duration=30)


@pytest.fixture(scope="session")
def detector(synth_small):
    from subact.config import load_config
    from subact.pipeline import train_detector
    return train_detector(synth_small, load_config())


@pytest.fixture(scope="session")
def detector_data(synth_small):
    """HOG windows from the first eight scenes for training, the rest held out."""
    from subact.person_detection import training_windows

    def windows(items, seed):
        frames, boxes = [], []
        for seq, recs in items:
            for t in range(0, len(seq), 3):
                frames.append(seq[t].pixels)
                boxes.append([r.box for r in recs if r.frame == t])
        return training_windows(frames, boxes, np.random.default_rng(seed))

    return windows(synth_small[:8], 0), windows(synth_small[8:], 1)


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory, synth_small, detector):
    """Level CNNs trained briefly on the small synthetic set, plus the detector."""
    from subact.config import load_config
    from subact.person_detection import save_svm
    from subact.pipeline import run_train
    out = tmp_path_factory.mktemp("models")
    cfg = load_config(None, ["train.iterations=600", "train.batch_size=64",
                             "train.detector=false", "train.phrase=true"])
    run_train(cfg, synth_small, out)
    save_svm(detector, out / "detector.bin")
    return out


_ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion (None = skipped)."""
    def record(number: int, ok: bool | None, detail: str) -> None:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        _ACCEPTANCE[number] = (status, detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
