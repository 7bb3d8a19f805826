"""Image-method multipath engine mapping a scene draw to channel powers.

Obstacles are vertical prisms, so specular reflections off their walls can
be unfolded in the horizontal plane; the vertical coordinate then varies
linearly along the unfolded path.  A path is valid when every reflection
point lies on its wall segment below the wall top and every leg clears all
prisms.  No diffraction or diffuse scattering is modelled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np

from twinmap.scene import BetaDraw, CandidateGrid, Scene, shifted_footprints

SPEED_OF_LIGHT = 299_792_458.0
POWER_FLOOR = 1e-30

_SIDE_TOL = 1e-9
_LEG_TOL = 1e-7


@dataclass(frozen=True)
class Path:
    kind: str
    order: int
    total_length: float
    interactions: tuple[tuple[int, float], ...] = ()
    blocked: bool = False
    walls: tuple[int, ...] = ()

    @property
    def delay(self) -> float:
        return self.total_length / SPEED_OF_LIGHT


@dataclass(frozen=True, eq=False)
class PowerMatrix:
    values: np.ndarray
    beta_seed: object = None
    empty_columns: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class _Walls:
    a: np.ndarray
    b: np.ndarray
    normal: np.ndarray
    obstacle: np.ndarray
    height: np.ndarray

    def __len__(self):
        return len(self.a)


def _walls(scene: Scene, beta: BetaDraw) -> _Walls:
    a, b, owner, height = [], [], [], []
    for i, fp in enumerate(shifted_footprints(scene, beta)):
        a.append(fp)
        b.append(np.roll(fp, -1, axis=0))
        owner.extend([i] * len(fp))
        height.extend([scene.obstacles[i].height] * len(fp))
    if not a:
        empty = np.zeros((0, 2))
        return _Walls(empty, empty, empty, np.zeros(0, dtype=int), np.zeros(0))
    a = np.concatenate(a)
    b = np.concatenate(b)
    t = b - a
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    # Footprints are counter-clockwise, so the right-hand normal points outward.
    normal = np.column_stack([t[:, 1], -t[:, 0]])
    return _Walls(a, b, normal, np.asarray(owner), np.asarray(height, dtype=float))


def _signed_distance(points: np.ndarray, walls: _Walls, w: int) -> np.ndarray:
    return (points - walls.a[w]) @ walls.normal[w]


def _mirror(point: np.ndarray, walls: _Walls, w: int) -> np.ndarray:
    n = walls.normal[w]
    return point - 2.0 * np.dot(point - walls.a[w], n) * n


def _leg_blocked(p0, p1, z0, z1, walls: _Walls) -> np.ndarray:
    """True where the leg p0->p1 (heights z0->z1) crosses a wall below its top."""
    if len(walls) == 0:
        return np.zeros(len(p0), dtype=bool)
    d = p1 - p0                      # (R, 2)
    e = walls.b - walls.a            # (W, 2)
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    diff = walls.a[None, :, :] - p0[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (diff[..., 0] * e[None, :, 1] - diff[..., 1] * e[None, :, 0]) / denom
        u = (diff[..., 0] * d[:, None, 1] - diff[..., 1] * d[:, None, 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (t > _LEG_TOL) & (t < 1 - _LEG_TOL) & (u >= 0) & (u <= 1)
    z = z0[:, None] + t * (z1 - z0)[:, None]
    return np.any(hit & (z < walls.height[None, :]), axis=1)


def _sequences(walls: _Walls, tx_h: np.ndarray, max_order: int):
    """Wall sequences whose image chain has every source on the wall's outer side."""
    yield (), [tx_h]
    frontier = [((), [tx_h])]
    for _ in range(max_order):
        nxt = []
        for seq, images in frontier:
            src = images[-1]
            for w in range(len(walls)):
                if seq and seq[-1] == w:
                    continue
                if _signed_distance(src[None, :], walls, w)[0] <= _SIDE_TOL:
                    continue
                item = (seq + (w,), images + [_mirror(src, walls, w)])
                nxt.append(item)
                yield item
        frontier = nxt


@dataclass
class _TraceResult:
    rx: np.ndarray          # receiver index per path
    seq_id: np.ndarray      # enumeration index of the wall sequence
    length: np.ndarray      # 3-D path length
    blocked: np.ndarray
    sequences: list         # wall sequence per seq_id
    obstacles: list         # per path: obstacle ids of the bounces
    cos_inc: list           # per path: cosine of incidence per bounce


def _trace(scene: Scene, beta: BetaDraw, tx: np.ndarray, rx: np.ndarray, max_order: int,
           keep_blocked: bool = False) -> _TraceResult:
    if max_order < 0:
        raise ValueError("max_order must be non-negative")
    walls = _walls(scene, beta)
    tx = np.asarray(tx, dtype=float)
    rx = np.atleast_2d(np.asarray(rx, dtype=float))
    tx_h, z_tx = tx[:2], tx[2]
    rx_h, z_rx = rx[:, :2], rx[:, 2]

    out_rx, out_seq, out_len, out_blk, out_obs, out_cos, seqs = [], [], [], [], [], [], []
    for seq, images in _sequences(walls, tx_h, max_order):
        k = len(seq)
        pts = [None] * (k + 2)       # pts[j]: real vertex j, 0 = tx, k+1 = rx
        pts[k + 1] = rx_h
        ok = np.ones(len(rx), dtype=bool)
        if k:
            ok &= _signed_distance(rx_h, walls, seq[-1]) > _SIDE_TOL
        for j in range(k, 0, -1):
            w = seq[j - 1]
            src = images[j]
            nxt = pts[j + 1]
            if j < k:
                ok &= _signed_distance(nxt, walls, w) > _SIDE_TOL
            d = nxt - src
            e = walls.b[w] - walls.a[w]
            denom = d[:, 0] * e[1] - d[:, 1] * e[0]
            diff = walls.a[w] - src
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (diff[0] * e[1] - diff[1] * e[0]) / denom
                u = (diff[0] * d[:, 1] - diff[1] * d[:, 0]) / denom
            ok &= (np.abs(denom) > 1e-12) & (s > 0) & (s < 1) & (u >= 0) & (u <= 1)
            pts[j] = src + np.where(ok, s, 0.0)[:, None] * d
        if not ok.any():
            continue
        active = np.flatnonzero(ok)
        pts = [np.broadcast_to(tx_h, (len(active), 2))] + [p[active] for p in pts[1:]]
        zr = z_rx[active]
        legs = np.stack([np.linalg.norm(pts[j + 1] - pts[j], axis=1) for j in range(k + 1)])
        horiz = legs.sum(axis=0)
        cum = np.cumsum(legs, axis=0)
        slope = np.divide(zr - z_tx, horiz, out=np.zeros_like(horiz), where=horiz > 0)
        z = [np.full(len(active), z_tx)] + [z_tx + slope * cum[j] for j in range(k)] + [zr]

        valid = np.ones(len(active), dtype=bool)
        for j in range(1, k + 1):
            valid &= z[j] <= walls.height[seq[j - 1]]
        blocked = np.zeros(len(active), dtype=bool)
        for j in range(k + 1):
            blocked |= _leg_blocked(pts[j], pts[j + 1], z[j], z[j + 1], walls)
        keep = valid if keep_blocked else valid & ~blocked
        if not keep.any():
            continue

        cos_inc = []
        inv_tilt = 1.0 / np.sqrt(1.0 + slope**2)
        for j in range(1, k + 1):
            dh = (pts[j] - pts[j - 1]) / legs[j - 1][:, None]
            cos_inc.append(np.abs(dh @ walls.normal[seq[j - 1]]) * inv_tilt)
        cos_inc = np.array(cos_inc).reshape(k, len(active))
        length = np.sqrt(horiz**2 + (zr - z_tx) ** 2)

        sid = len(seqs)
        seqs.append(seq)
        idx = np.flatnonzero(keep)
        out_rx.append(active[idx])
        out_seq.append(np.full(len(idx), sid))
        out_len.append(length[idx])
        out_blk.append(blocked[idx])
        owners = tuple(int(walls.obstacle[w]) for w in seq)
        for i in idx:
            out_obs.append(owners)
            out_cos.append(tuple(float(c) for c in cos_inc[:, i]))

    if not out_rx:
        empty = np.zeros(0)
        return _TraceResult(empty.astype(int), empty.astype(int), empty, empty.astype(bool), seqs, [], [])
    rxi = np.concatenate(out_rx)
    order = np.lexsort((np.concatenate(out_seq), rxi))
    return _TraceResult(
        rx=rxi[order],
        seq_id=np.concatenate(out_seq)[order],
        length=np.concatenate(out_len)[order],
        blocked=np.concatenate(out_blk)[order],
        sequences=seqs,
        obstacles=[out_obs[i] for i in order],
        cos_inc=[out_cos[i] for i in order],
    )


def trace_paths(scene: Scene, beta: BetaDraw, rx, max_order: int = 2, tx=None,
                keep_blocked: bool = False) -> list[Path]:
    """All LOS and specular paths from the AP (or ``tx``) to one receiver.

    Obstacles are placed at their nominal footprint plus the horizontal
    shift in ``beta``.  Obstructed paths are dropped unless ``keep_blocked``.
    """
    tx = scene.ap_position if tx is None else np.asarray(tx, dtype=float)
    res = _trace(scene, beta, tx, np.asarray(rx, dtype=float)[None, :], max_order, keep_blocked)
    paths = []
    for p in range(len(res.length)):
        seq = res.sequences[res.seq_id[p]]
        paths.append(
            Path(
                kind="los" if not seq else "reflected",
                order=len(seq),
                total_length=float(res.length[p]),
                interactions=tuple(
                    (ob, float(np.arccos(np.clip(c, -1.0, 1.0))))
                    for ob, c in zip(res.obstacles[p], res.cos_inc[p])
                ),
                blocked=bool(res.blocked[p]),
                walls=tuple(int(w) for w in seq),
            )
        )
    return paths


def fresnel_te(cos_theta, eps_r):
    """TE (perpendicular) reflection coefficient of a lossless dielectric half-space."""
    cos_theta = np.asarray(cos_theta, dtype=float)
    # eps_r - sin^2 written as (eps_r - 1) + cos^2 to keep precision near grazing
    arg = (np.asarray(eps_r, dtype=float) - 1.0) + cos_theta**2
    root = np.sqrt(arg) if np.all(arg >= 0) else np.sqrt(arg.astype(complex))
    den = cos_theta + root
    # eps_r = 1 at exact grazing is 0/0; no interface means no reflection.
    out = np.where(den != 0, (cos_theta - root) / np.where(den != 0, den, 1.0), 0.0)
    return out.astype(complex)


def path_amplitude(path: Path, beta: BetaDraw, frequency: float) -> complex:
    if path.blocked:
        raise ValueError("blocked path has no amplitude")
    if not path.total_length > 0:
        raise ValueError("degenerate path: zero length")
    gain = complex(1.0)
    for obstacle, angle in path.interactions:
        gain *= complex(fresnel_te(np.cos(angle), beta.permittivities[obstacle]))
    wavelength = SPEED_OF_LIGHT / frequency
    phase = np.exp(-2j * np.pi * frequency * path.total_length / SPEED_OF_LIGHT)
    return complex(wavelength / (4 * np.pi * path.total_length) * gain * phase)


def channel_power_matrix(scene: Scene, grid: CandidateGrid, beta: BetaDraw,
                         max_order: int = 2, tx=None) -> PowerMatrix:
    """Per-subcarrier channel power ``|h(f_n)|^2`` at every candidate location."""
    tx = scene.ap_position if tx is None else tx
    res = _trace(scene, beta, tx, grid.points, max_order)
    freqs = scene.frequencies
    m = len(grid)
    values = np.zeros((len(freqs), m))
    if len(res.length):
        gamma = np.ones(len(res.length), dtype=complex)
        for p, (obs, cos) in enumerate(zip(res.obstacles, res.cos_inc)):
            for ob, c in zip(obs, cos):
                gamma[p] *= fresnel_te(c, beta.permittivities[ob])
        starts = np.flatnonzero(np.r_[True, res.rx[1:] != res.rx[:-1]])
        bounds = np.r_[starts, len(res.rx)]
        wave = SPEED_OF_LIGHT / (4 * np.pi * freqs)
        # Column groups bounded to keep the (N x paths) work array small.
        chunk = max(1, 200_000 // len(freqs))
        g = 0
        while g < len(starts):
            h_end = g + 1
            while h_end < len(starts) and bounds[h_end + 1] - bounds[g] <= chunk:
                h_end += 1
            lo, hi = bounds[g], bounds[h_end]
            length = res.length[lo:hi]
            field = (wave[:, None] / length[None, :]) * gamma[None, lo:hi] * np.exp(
                -2j * np.pi * freqs[:, None] * (length[None, :] / SPEED_OF_LIGHT)
            )
            h = np.add.reduceat(field, starts[g:h_end] - lo, axis=1)
            values[:, res.rx[starts[g:h_end]]] = np.abs(h) ** 2
            g = h_end
    empty = m - len(np.unique(res.rx))
    return PowerMatrix(values=values, beta_seed=beta.seed, empty_columns=int(empty))


def save_power_matrix(path, pm: PowerMatrix) -> None:
    """CSV dump: one row per subcarrier, one column per location."""
    np.savetxt(path, pm.values, delimiter=",", fmt="%.17g")


def load_power_matrix(path, beta_seed=None) -> PowerMatrix:
    values = np.loadtxt(path, delimiter=",", ndmin=2)
    return PowerMatrix(values=values, beta_seed=beta_seed, empty_columns=int(np.sum(~values.any(axis=0))))


class PowerCache:
    """On-disk ``.npy`` cache keyed by (scene hash, beta seed, max_order)."""

    def __init__(self, directory):
        self.directory = FsPath(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _file(self, scene: Scene, beta: BetaDraw, max_order: int, pos_bound: float) -> FsPath:
        key = f"{scene.digest()}|{beta.seed!r}|{max_order}|{pos_bound!r}"
        return self.directory / (hashlib.sha256(key.encode()).hexdigest()[:24] + ".npy")

    def get_or_compute(self, scene, grid, beta, max_order, pos_bound) -> PowerMatrix:
        f = self._file(scene, beta, max_order, pos_bound)
        if f.exists():
            values = np.load(f)
            return PowerMatrix(values, beta.seed, int(np.sum(~values.any(axis=0))))
        pm = channel_power_matrix(scene, grid, beta, max_order)
        tmp = f.with_suffix(".tmp.npy")
        np.save(tmp, pm.values)
        tmp.replace(f)
        return pm

