"""Scene geometry, candidate grids and randomized scene parameters.

Scenes are 2.5-D: every obstacle is a vertical prism standing on a planar
polygonal footprint.  The uncertain part of a scene (per-obstacle relative
permittivity and horizontal position error) is drawn by :func:`sample_beta`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import shapely

EPS_R_LOW = 1.5
EPS_R_HIGH = 30.0


class SceneError(ValueError):
    """Raised for malformed scene files or invalid scene geometry."""


@dataclass(frozen=True, eq=False)
class Obstacle:
    """Vertical prism over a simple polygon.

    The footprint is stored counter-clockwise so that the right-hand normal
    of every edge points out of the obstacle.
    """

    footprint: np.ndarray
    height: float
    nominal_permittivity: float = 5.0

    def __post_init__(self):
        fp = np.asarray(self.footprint, dtype=float)
        if fp.ndim != 2 or fp.shape[1] != 2 or len(fp) < 3:
            raise SceneError("obstacle footprint must be a list of at least three 2-D vertices")
        if np.allclose(fp[0], fp[-1]):
            fp = fp[:-1]
        area = _signed_area(fp)
        if not abs(area) > 0.0:
            raise SceneError("obstacle footprint has zero area")
        if area < 0:
            fp = fp[::-1]
        fp = np.ascontiguousarray(fp)
        fp.setflags(write=False)
        object.__setattr__(self, "footprint", fp)
        if not self.height > 0:
            raise SceneError("obstacle height must be positive")

    @property
    def area(self) -> float:
        return _signed_area(self.footprint)

    def polygon(self, shift=(0.0, 0.0)) -> shapely.Polygon:
        return shapely.Polygon(self.footprint + np.asarray(shift[:2], dtype=float))


def _signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float]
    extent: tuple[float, float]
    spacing: float
    height: float

    def __post_init__(self):
        if not self.spacing > 0:
            raise SceneError("grid spacing must be positive")
        if min(self.extent) < 0:
            raise SceneError("grid extent must be non-negative")

    def axis_counts(self) -> tuple[int, int]:
        # Closed extent: both end points belong to the lattice.
        nx = int(math.floor(self.extent[0] / self.spacing + 1e-9)) + 1
        ny = int(math.floor(self.extent[1] / self.spacing + 1e-9)) + 1
        return nx, ny

    def lattice(self) -> np.ndarray:
        """All lattice points of the closed extent, row-major from the origin."""
        nx, ny = self.axis_counts()
        xs = self.origin[0] + self.spacing * np.arange(nx)
        ys = self.origin[1] + self.spacing * np.arange(ny)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), np.full(nx * ny, float(self.height))])


@dataclass(frozen=True, eq=False)
class Scene:
    obstacles: tuple[Obstacle, ...]
    ap_position: np.ndarray
    grid_spec: GridSpec
    carrier_frequency: float = 6e9
    bandwidth: float = 200e6
    subcarrier_spacing: float = 200e3
    n_subcarriers: int = 0

    def __post_init__(self):
        ap = np.asarray(self.ap_position, dtype=float).reshape(-1)
        if ap.shape != (3,):
            raise SceneError("ap_position must be a 3-vector")
        ap.setflags(write=False)
        object.__setattr__(self, "ap_position", ap)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if not (self.carrier_frequency > 0 and self.bandwidth >= 0 and self.subcarrier_spacing > 0):
            raise SceneError("rf settings must be positive")
        derived = int(round(self.bandwidth / self.subcarrier_spacing)) + 1
        if self.n_subcarriers == 0:
            object.__setattr__(self, "n_subcarriers", derived)
        elif self.n_subcarriers != derived:
            raise SceneError(
                f"n_subcarriers={self.n_subcarriers} inconsistent with bandwidth/spacing (+1 = {derived})"
            )
        for i, ob in enumerate(self.obstacles):
            if shapely.contains_xy(ob.polygon(), ap[0], ap[1]):
                raise SceneError(f"AP inside obstacle {i}")

    @property
    def frequencies(self) -> np.ndarray:
        """Subcarrier centre frequencies spanning the band around the carrier."""
        n = self.n_subcarriers
        if n == 1:
            return np.array([float(self.carrier_frequency)])
        return self.carrier_frequency + np.linspace(-self.bandwidth / 2, self.bandwidth / 2, n)

    def to_dict(self) -> dict:
        return {
            "ap_position": [float(v) for v in self.ap_position],
            "obstacles": [
                {
                    "footprint": ob.footprint.tolist(),
                    "height": float(ob.height),
                    "nominal_permittivity": float(ob.nominal_permittivity),
                }
                for ob in self.obstacles
            ],
            "grid": {
                "origin": list(self.grid_spec.origin),
                "extent": list(self.grid_spec.extent),
                "spacing": self.grid_spec.spacing,
                "height": self.grid_spec.height,
            },
            "rf": {
                "carrier_hz": self.carrier_frequency,
                "bandwidth_hz": self.bandwidth,
                "subcarrier_spacing_hz": self.subcarrier_spacing,
            },
        }

    def digest(self) -> str:
        """Stable hash of the scene content, used to key caches."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class CandidateGrid:
    points: np.ndarray
    lattice_index: np.ndarray
    index: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if not self.index:
            object.__setattr__(
                self, "index", {tuple(np.round(p, 9)): i for i, p in enumerate(pts)}
            )

    def __len__(self) -> int:
        return len(self.points)

    @property
    def size(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class BetaDraw:
    permittivities: np.ndarray
    position_shifts: np.ndarray
    seed: object = None

    def __post_init__(self):
        for name in ("permittivities", "position_shifts"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def _vec(value, n: int, name: str) -> tuple[float, ...]:
    if np.isscalar(value):
        return (float(value),) * n
    out = tuple(float(v) for v in value)
    if len(out) != n:
        raise SceneError(f"{name} must have {n} components")
    return out


def _require(d: dict, key: str, where: str = "scene"):
    if key not in d:
        raise SceneError(f"missing field '{key}' in {where}")
    return d[key]


def scene_from_dict(data: dict) -> Scene:
    ap = _require(data, "ap_position")
    grid = _require(data, "grid")
    spec = GridSpec(
        origin=_vec(grid.get("origin", (0.0, 0.0)), 2, "grid.origin"),
        extent=_vec(_require(grid, "extent", "grid"), 2, "grid.extent"),
        spacing=float(_require(grid, "spacing", "grid")),
        height=float(grid.get("height", 1.5)),
    )
    obstacles = []
    for i, ob in enumerate(data.get("obstacles", [])):
        obstacles.append(
            Obstacle(
                footprint=np.asarray(_require(ob, "footprint", f"obstacle {i}"), dtype=float),
                height=float(_require(ob, "height", f"obstacle {i}")),
                nominal_permittivity=float(ob.get("nominal_permittivity", 5.0)),
            )
        )
    rf = data.get("rf", {})
    return Scene(
        obstacles=tuple(obstacles),
        ap_position=np.asarray(ap, dtype=float),
        grid_spec=spec,
        carrier_frequency=float(rf.get("carrier_hz", 6e9)),
        bandwidth=float(rf.get("bandwidth_hz", 200e6)),
        subcarrier_spacing=float(rf.get("subcarrier_spacing_hz", 200e3)),
        n_subcarriers=int(rf.get("n_subcarriers", 0)),
    )


def load_scene(path) -> Scene:
    """Read a JSON scene file (schema in ``docs/scene_format.md``)."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"cannot parse scene file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise SceneError("scene file must hold a JSON object")
    return scene_from_dict(data)


def build_grid(scene: Scene) -> CandidateGrid:
    """Regular lattice at sensor height with points strictly inside footprints removed."""
    lattice = scene.grid_spec.lattice()
    keep = np.ones(len(lattice), dtype=bool)
    for ob in scene.obstacles:
        keep &= ~shapely.contains_xy(ob.polygon(), lattice[:, 0], lattice[:, 1])
    if not keep.any():
        raise SceneError("empty grid after pruning")
    return CandidateGrid(points=lattice[keep], lattice_index=np.flatnonzero(keep))


def sample_beta(scene: Scene, seed, pos_bound: float = 2.0) -> BetaDraw:
    """Draw per-obstacle permittivities ~ U(1.5, 30) and horizontal shifts ~ U([-b, b]^2)."""
    if pos_bound < 0:
        raise ValueError("pos_bound must be non-negative")
    rng = np.random.default_rng(seed)
    n = len(scene.obstacles)
    eps_r = rng.uniform(EPS_R_LOW, EPS_R_HIGH, size=n)
    shifts = np.zeros((n, 3))
    shifts[:, :2] = rng.uniform(-pos_bound, pos_bound, size=(n, 2))
    return BetaDraw(permittivities=eps_r, position_shifts=shifts, seed=seed)


def nominal_beta(scene: Scene) -> BetaDraw:
    """The un-randomized scene: nominal materials, no position error."""
    n = len(scene.obstacles)
    return BetaDraw(
        permittivities=np.array([ob.nominal_permittivity for ob in scene.obstacles]),
        position_shifts=np.zeros((n, 3)),
        seed=None,
    )


def shifted_footprints(scene: Scene, beta: BetaDraw) -> list[np.ndarray]:
    return [ob.footprint + beta.position_shifts[i, :2] for i, ob in enumerate(scene.obstacles)]


def grid_distances(grid: CandidateGrid, position: Sequence[float]) -> np.ndarray:
    return np.linalg.norm(grid.points - np.asarray(position, dtype=float), axis=1)
