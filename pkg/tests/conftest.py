import numpy as np
import pytest
from PIL import Image

from shiftkd.core import Domain, ImageRecord, build_manifest


def make_record(i, class_name="Aglais io", domain=Domain.SOURCE, **kw):
    d = dict(record_id=f"r{i:05d}", class_id=0, class_name=class_name, domain=domain,
             uri=f"/data/{i}.jpg", width_px=64, height_px=48)
    d.update(kw)
    return ImageRecord(**d)


def make_manifest(n_per_class, classes=("a", "b"), domains=(Domain.SOURCE,), **kw):
    recs = []
    for c in classes:
        for dom in domains:
            for i in range(n_per_class):
                recs.append(make_record(len(recs), class_name=c, domain=dom))
    return build_manifest(recs, **kw)


def write_png(path, seed=0, size=(16, 16)):
    a = np.random.default_rng(seed).integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a, "RGB").save(path)
    return path


@pytest.fixture
def rgb_image():
    a = np.random.default_rng(7).integers(0, 256, (96, 128, 3), dtype=np.uint8)
    return Image.fromarray(a, "RGB")


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
