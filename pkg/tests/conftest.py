import hashlib
import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("CANNYEDIT_CACHE", ROOT / ".cache"))

# The trained toy model behind the end-to-end checks: clipped SGD run in stages,
# each continuing from the previous one with its own seed and step size.
# Training is deterministic, so the cached files only save time; delete them
# to retrain from scratch.
REFERENCE_DATA = dict(samples=1000, data_seed=0)
REFERENCE_STAGES = (
    dict(steps=8000, batch_size=8, learning_rate=0.3, seed=0),
    dict(steps=8000, batch_size=8, learning_rate=0.3, seed=1),
    dict(steps=8000, batch_size=8, learning_rate=0.15, seed=2),
    dict(steps=8000, batch_size=8, learning_rate=0.075, seed=3),
)


def shape_image(seed: int, size: int = 64) -> np.ndarray:
    """1-3 random renderer shapes on a random gray level."""
    from cannyedit.text import COLORS, SHAPES
    from cannyedit.train import ShapeRecord, random_bbox, render
    rng = np.random.default_rng(seed)
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        box = random_bbox(rng, [s.bbox for s in shapes], size=size)
        if box is not None:
            shapes.append(ShapeRecord(SHAPES[int(rng.integers(3))], COLORS[int(rng.integers(6))], box))
    return render(shapes, float(rng.uniform(0, 0.3)), size)


def _stage_path(k: int) -> Path:
    tag = "-".join(f"{key}{v}" for key, v in REFERENCE_DATA.items())
    tag += "".join("_" + "-".join(f"{key}{v}" for key, v in st.items()) for st in REFERENCE_STAGES[:k + 1])
    return CACHE / f"reference-{hashlib.sha256(tag.encode()).hexdigest()[:16]}.npz"


def load_reference_model(stages: int = len(REFERENCE_STAGES)):
    """The model after the first ``stages`` training stages, trained on demand."""
    from cannyedit.mmdit import Model, load_checkpoint, save_checkpoint
    from cannyedit.train import TrainConfig, load_or_gen_dataset, train
    done = max((k + 1 for k in range(stages) if _stage_path(k).exists()), default=0)
    model = load_checkpoint(_stage_path(done - 1))[0] if done else Model.create()
    if done < stages:
        CACHE.mkdir(parents=True, exist_ok=True)
        data = load_or_gen_dataset(REFERENCE_DATA["samples"], REFERENCE_DATA["data_seed"], CACHE)
        for k in range(done, stages):
            model = train(model, data, TrainConfig(**REFERENCE_STAGES[k], log_every=0)).model
            save_checkpoint(model, _stage_path(k), {"data": REFERENCE_DATA, "stages": REFERENCE_STAGES[:k + 1]})
    return model


@pytest.fixture(scope="session")
def reference_model():
    return load_reference_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance bookkeeping: one summary line per criterion, printed at the end of the run
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE.setdefault(number, []).append((bool(ok), detail))
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  " + "; ".join(d for _, d in parts))
