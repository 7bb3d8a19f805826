import json

import numpy as np
import pytest

from twinmap.scene import scene_from_dict


def rect(x0, x1, y0, y1, h=10.0, eps=5.0):
    return {"footprint": [[x0, y0], [x1, y0], [x1, y1], [x0, y1]], "height": h, "nominal_permittivity": eps}


def scene_dict(obstacles=(), ap=(0.0, 0.0, 27.0), extent=(50.0, 50.0), spacing=5.0, origin=(0.0, 0.0),
               bandwidth=2e6, scs=2e5):
    return {
        "ap_position": list(ap),
        "obstacles": list(obstacles),
        "grid": {"origin": list(origin), "extent": list(extent), "spacing": spacing, "height": 1.5},
        "rf": {"carrier_hz": 6e9, "bandwidth_hz": bandwidth, "subcarrier_spacing_hz": scs},
    }


@pytest.fixture
def write_scene(tmp_path):
    def _write(data, name="scene.json"):
        p = tmp_path / name
        p.write_text(json.dumps(data))
        return p

    return _write


@pytest.fixture
def small_scene():
    return scene_from_dict(scene_dict([rect(12.5, 22.5, 12.5, 22.5, h=40.0)], ap=(40.0, 40.0, 27.0)))


def random_spd(rng, m, rank=None):
    rank = m if rank is None else rank
    B = rng.normal(size=(m, rank))
    return B @ B.T + 1e-3 * np.eye(m)


# Acceptance criteria report one line each; collected here and echoed in the summary.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
