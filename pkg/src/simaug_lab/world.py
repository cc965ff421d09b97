"""Synthetic multi-view pedestrian data.

A world is a flat semantic ground plane. Agents walk on it along piecewise
straight paths, and a rig of calibrated pinhole cameras renders every path as
per-frame segmentation grids plus pixel trajectories. Each camera sees the
same physical trajectory, so pixel locations differ across views while the
motion is shared.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grid import GridSpec
from .tensor import decode_array, encode_array

CLASSES = (
    "void",
    "sidewalk",
    "road",
    "grass",
    "vehicle",
    "pedestrian",
    "building",
    "vegetation",
    "pole",
    "fence",
    "water",
    "bench",
    "sign",
)
K = len(CLASSES)
CLS = {name: i for i, name in enumerate(CLASSES)}
WALKABLE = (CLS["sidewalk"], CLS["road"], CLS["grass"])
TEMPLATES = ("street-corner", "plaza", "parking-lot", "corridor")

DT = 0.4
SPEED_RANGE = (0.5, 2.5)
FORMAT_VERSION = 1


class WorldError(ValueError):
    """A scene cannot host walking agents."""


class PathError(RuntimeError):
    """No valid path could be simulated within the retry budget."""


class SampleRejected(ValueError):
    """A path leaves the image or passes behind some camera."""


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; order of use elsewhere is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), *map(int, keys)]))


# ---------------------------------------------------------------------------
# worlds


@dataclass
class World:
    """Semantic ground plane centred on the origin.

    ``semantic[row, col]`` is the class of the ground cell whose lower-left
    corner is ``(-width/2 + col*res, -depth/2 + row*res)``.
    """

    template: str
    semantic: np.ndarray
    resolution: float
    activity: tuple[float, float, float, float]

    @property
    def extent(self) -> tuple[float, float]:
        return self.semantic.shape[1] * self.resolution, self.semantic.shape[0] * self.resolution

    @property
    def walkable(self) -> np.ndarray:
        return np.isin(self.semantic, WALKABLE)

    @property
    def obstacles(self) -> np.ndarray:
        return ~self.walkable

    def walkable_fraction(self) -> float:
        return float(self.walkable.mean())

    def _cells(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        w, d = self.extent
        col = np.floor((xy[..., 0] + w / 2) / self.resolution).astype(np.int64)
        row = np.floor((xy[..., 1] + d / 2) / self.resolution).astype(np.int64)
        inside = (col >= 0) & (col < self.semantic.shape[1]) & (row >= 0) & (row < self.semantic.shape[0])
        return row, col, inside

    def class_at(self, xy) -> np.ndarray:
        """Class id at ground points; ``void`` outside the world."""
        row, col, inside = self._cells(xy)
        out = np.full(row.shape, CLS["void"], dtype=np.int64)
        out[inside] = self.semantic[row[inside], col[inside]]
        return out

    def in_activity(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        x0, x1, y0, y1 = self.activity
        return (xy[..., 0] >= x0) & (xy[..., 0] <= x1) & (xy[..., 1] >= y0) & (xy[..., 1] <= y1)

    def is_walkable(self, xy) -> np.ndarray:
        return np.isin(self.class_at(xy), WALKABLE)

    def can_stand(self, xy) -> np.ndarray:
        return self.is_walkable(xy) & self.in_activity(xy)

    def digest(self) -> str:
        return hashlib.sha256(self.semantic.tobytes()).hexdigest()


def _rect(sem, res, w, d, x0, x1, y0, y1, cls):
    c0 = int(round((x0 + w / 2) / res))
    c1 = int(round((x1 + w / 2) / res))
    r0 = int(round((y0 + d / 2) / res))
    r1 = int(round((y1 + d / 2) / res))
    sem[max(r0, 0) : max(r1, 0), max(c0, 0) : max(c1, 0)] = cls


def _disc(sem, res, w, d, cx, cy, radius, cls):
    rows, cols = sem.shape
    yy = (np.arange(rows) + 0.5) * res - d / 2
    xx = (np.arange(cols) + 0.5) * res - w / 2
    mask = (xx[None, :] - cx) ** 2 + (yy[:, None] - cy) ** 2 <= radius**2
    sem[mask] = cls


def _street_corner(sem, res, w, d, rng):
    sem[:] = CLS["building"]
    rx, ry = rng.uniform(-4, 4), rng.uniform(-3, 3)
    road = rng.uniform(5.0, 7.0)
    walk = rng.uniform(2.0, 3.5)
    lawn = walk + rng.uniform(1.5, 3.0)
    for cls, half in (("grass", road / 2 + lawn), ("sidewalk", road / 2 + walk), ("road", road / 2)):
        _rect(sem, res, w, d, -w, w, ry - half, ry + half, CLS[cls])
        _rect(sem, res, w, d, rx - half, rx + half, -d, d, CLS[cls])
    for _ in range(rng.integers(2, 5)):
        x = rng.uniform(-w / 2, w / 2)
        y = ry + rng.choice([-1, 1]) * (road / 2 - 1.2)
        if abs(x - rx) > road:
            _rect(sem, res, w, d, x - 2.2, x + 2.2, y - 0.9, y + 0.9, CLS["vehicle"])
    for _ in range(rng.integers(3, 7)):
        x, y = rng.uniform(-w / 2, w / 2), rng.uniform(-d / 2, d / 2)
        if sem[_rowcol(x, y, res, w, d)] == CLS["grass"]:
            _disc(sem, res, w, d, x, y, rng.uniform(0.5, 1.0), CLS["vegetation"])
    for _ in range(rng.integers(2, 5)):
        _disc(sem, res, w, d, rng.uniform(-w / 2, w / 2), ry + road / 2 + walk - 0.3, 0.3, CLS["pole"])


def _plaza(sem, res, w, d, rng):
    sem[:] = CLS["building"]
    mx, my = rng.uniform(3, 5), rng.uniform(3, 5)
    _rect(sem, res, w, d, -w / 2 + mx, w / 2 - mx, -d / 2 + my, d / 2 - my, CLS["sidewalk"])
    for _ in range(rng.integers(2, 4)):
        cx, cy = rng.uniform(-12, 12), rng.uniform(-7, 7)
        gw, gd = rng.uniform(3, 7), rng.uniform(2, 5)
        _rect(sem, res, w, d, cx - gw, cx + gw, cy - gd, cy + gd, CLS["grass"])
    _disc(sem, res, w, d, rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(1.5, 3.0), CLS["water"])
    for _ in range(rng.integers(3, 7)):
        _disc(sem, res, w, d, rng.uniform(-15, 15), rng.uniform(-9, 9), rng.uniform(0.6, 1.2), CLS["vegetation"])
    for _ in range(rng.integers(2, 5)):
        x, y = rng.uniform(-14, 14), rng.uniform(-8, 8)
        _rect(sem, res, w, d, x - 1.0, x + 1.0, y - 0.3, y + 0.3, CLS["bench"])
    for _ in range(rng.integers(1, 3)):
        _disc(sem, res, w, d, rng.uniform(-15, 15), rng.uniform(-9, 9), 0.3, CLS["sign"])


def _parking_lot(sem, res, w, d, rng):
    sem[:] = CLS["road"]
    top = rng.uniform(7, 10)
    _rect(sem, res, w, d, -w, w, d / 2 - top, d, CLS["building"])
    _rect(sem, res, w, d, -w, w, d / 2 - top - 3.0, d / 2 - top, CLS["sidewalk"])
    _rect(sem, res, w, d, -w, w, -d, -d / 2 + 3.0, CLS["grass"])
    lane = rng.uniform(5.0, 6.5)
    y = -d / 2 + 4.0
    while y + 5.0 < d / 2 - top - 3.0:
        x = -w / 2 + rng.uniform(1, 3)
        while x + 2.2 < w / 2:
            if rng.random() < 0.7:
                _rect(sem, res, w, d, x, x + 2.0, y, y + 4.5, CLS["vehicle"])
            x += 2.6
        y += 4.5 + lane
    for _ in range(rng.integers(2, 5)):
        _disc(sem, res, w, d, rng.uniform(-18, 18), rng.uniform(-12, 8), 0.3, CLS["pole"])
    _rect(sem, res, w, d, rng.uniform(-15, 10), rng.uniform(12, 16), -d / 2 + 3.0, -d / 2 + 3.6, CLS["fence"])


def _corridor(sem, res, w, d, rng, width=1.0):
    sem[:] = CLS["building"]
    _rect(sem, res, w, d, -w, w, -width / 2, width / 2, CLS["sidewalk"])


def _rowcol(x, y, res, w, d):
    return int((y + d / 2) // res), int((x + w / 2) // res)


_BUILDERS = {
    "street-corner": _street_corner,
    "plaza": _plaza,
    "parking-lot": _parking_lot,
    "corridor": _corridor,
}


def build_world(scene_config: dict, rng: np.random.Generator) -> World:
    """Lay out a semantic ground plane from a template.

    ``scene_config`` keys: ``template`` (one of :data:`TEMPLATES`), ``extent``
    ``[width, depth]`` in metres (default 40x30), ``resolution`` (0.5 m),
    ``activity`` half-extents ``[ax, ay]`` of the central region agents walk
    in (default 12x7 m).
    """
    template = scene_config.get("template", "plaza")
    if template not in _BUILDERS:
        raise WorldError(f"unknown scene template {template!r}; choose from {TEMPLATES}")
    w, d = (float(v) for v in scene_config.get("extent", (40.0, 30.0)))
    res = float(scene_config.get("resolution", 0.5))
    if w <= 0 or d <= 0 or res <= 0:
        raise WorldError(f"world extent {w}x{d} at resolution {res} is empty")
    cols, rows = int(round(w / res)), int(round(d / res))
    if cols < 1 or rows < 1:
        raise WorldError(f"world extent {w}x{d} is smaller than one cell")
    sem = np.zeros((rows, cols), dtype=np.uint8)
    _BUILDERS[template](sem, res, w, d, rng)

    walk = np.isin(sem, WALKABLE)
    labels, n = ndimage.label(walk)
    if n == 0:
        raise WorldError(f"template {template!r} produced no walkable ground")
    sizes = ndimage.sum_labels(walk, labels, index=np.arange(1, n + 1))
    keep = 1 + int(np.argmax(sizes))
    sem[(labels != keep) & walk] = CLS["vegetation"]

    ax, ay = (float(v) for v in scene_config.get("activity", (min(12.0, w / 2), min(7.0, d / 2))))
    return World(template, sem, res, (-ax, ax, -ay, ay))


# ---------------------------------------------------------------------------
# agents


@dataclass
class GroundPath:
    points: np.ndarray
    dt: float = DT

    def __len__(self):
        return len(self.points)

    @property
    def speeds(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1) / self.dt


_HEADINGS = np.deg2rad(np.arange(0, 360, 45))


def _clear(world: World, p: np.ndarray, heading: float, length: float) -> bool:
    n = max(2, int(math.ceil(length / 0.2)) + 1)
    s = np.linspace(0.0, length, n)
    pts = p[None, :] + s[:, None] * np.array([math.cos(heading), math.sin(heading)])[None, :]
    return bool(np.all(world.can_stand(pts)))


def simulate_agent(
    world: World,
    rng: np.random.Generator,
    T: int = 20,
    dt: float = DT,
    turn_prob: float = 0.04,
    lookahead: float = 2.0,
    max_retries: int = 200,
) -> GroundPath:
    """Waypoint-following walk: straight legs at a steady speed with occasional turns.

    Headings are multiples of 45 degrees and a turn is only taken when the
    next ``lookahead`` metres along the new heading are walkable, so paths
    never leave walkable ground or the activity region.
    """
    free = np.argwhere(world.walkable)
    if free.size == 0:
        raise WorldError("world has no walkable cells")
    w, d = world.extent
    turns = np.deg2rad([45, -45, 90, -90])
    escapes = np.deg2rad([45, -45, 90, -90, 135, -135, 180])
    for _ in range(max_retries):
        r, c = free[rng.integers(len(free))]
        p = np.array([-w / 2 + (c + rng.uniform(0.25, 0.75)) * world.resolution,
                      -d / 2 + (r + rng.uniform(0.25, 0.75)) * world.resolution])
        if not world.can_stand(p):
            continue
        options = [hd for hd in rng.permutation(_HEADINGS) if _clear(world, p, hd, lookahead)]
        if not options:
            continue
        heading = float(options[0])
        speed = rng.uniform(*SPEED_RANGE)
        pts = [p]
        ok = True
        for _t in range(1, T):
            if rng.random() < turn_prob:
                for dh in rng.permutation(turns):
                    if _clear(world, p, heading + dh, lookahead):
                        heading += float(dh)
                        break
            v = float(np.clip(speed * (1.0 + 0.05 * rng.standard_normal()), *SPEED_RANGE))
            step = v * dt
            if not _clear(world, p, heading, step):
                for dh in rng.permutation(escapes):
                    if _clear(world, p, heading + dh, max(step, lookahead)):
                        heading += float(dh)
                        break
                else:
                    ok = False
                    break
            p = p + step * np.array([math.cos(heading), math.sin(heading)])
            pts.append(p)
        if ok:
            return GroundPath(np.array(pts), dt)
    raise PathError(f"no valid {T}-step path after {max_retries} attempts")


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``yaw`` is the heading of the optical axis in the ground
    plane, ``pitch`` its elevation (negative looks down), ``roll`` a rotation
    about the optical axis; angles in radians, image axes x right / y down."""

    camera_id: str
    position: tuple[float, float, float]
    yaw: float
    pitch: float
    roll: float
    focal: tuple[float, float]
    principal: tuple[float, float]
    image_size: tuple[int, int]

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation; columns are the camera x, y, z axes."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        fwd = np.array([cp * cy, cp * sy, sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(fwd, right)
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        r2 = cr * right + sr * down
        d2 = -sr * right + cr * down
        return np.stack([r2, d2, fwd], axis=1)

    def to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.position)) @ self.rotation()

    def project(self, points) -> np.ndarray:
        """Pixel coordinates of 3-D world points, shape ``(..., 2)``.

        Raises
        ------
        ValueError
            If any point has non-positive depth.
        """
        pc = self.to_camera(points)
        z = pc[..., 2]
        if np.any(z <= 0):
            raise ValueError(f"camera {self.camera_id}: point behind the camera (depth {float(np.min(z)):.3g})")
        u = self.focal[0] * pc[..., 0] / z + self.principal[0]
        v = self.focal[1] * pc[..., 1] / z + self.principal[1]
        return np.stack([u, v], axis=-1)

    def back_project(self, pixels, z: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Intersect pixel rays with the plane at height ``z``.

        Returns ground points ``(..., 3)`` and a mask of rays that hit the plane
        in front of the camera.
        """
        px = np.asarray(pixels, dtype=np.float64)
        ray = np.stack(
            [
                (px[..., 0] - self.principal[0]) / self.focal[0],
                (px[..., 1] - self.principal[1]) / self.focal[1],
                np.ones(px.shape[:-1]),
            ],
            axis=-1,
        ) @ self.rotation().T
        origin = np.asarray(self.position)
        dz = ray[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (z - origin[2]) / dz
        hit = np.isfinite(t) & (t > 0)
        t = np.where(hit, t, 0.0)
        return origin + t[..., None] * ray, hit

    def in_image(self, pixels) -> np.ndarray:
        px = np.asarray(pixels)
        w, h = self.image_size
        return (px[..., 0] >= 0) & (px[..., 0] <= w) & (px[..., 1] >= 0) & (px[..., 1] <= h)

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "position": list(self.position),
            "yaw": self.yaw,
            "pitch": self.pitch,
            "roll": self.roll,
            "focal": list(self.focal),
            "principal": list(self.principal),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            d["camera_id"],
            tuple(d["position"]),
            d["yaw"],
            d["pitch"],
            d["roll"],
            tuple(d["focal"]),
            tuple(d["principal"]),
            tuple(d["image_size"]),
        )


def look_at_camera(
    camera_id: str,
    azimuth_deg: float,
    elevation_deg: float,
    distance: float,
    region: tuple[float, float, float, float],
    image_size=(480, 240),
    roll_deg: float = 0.0,
    yaw_deg: float | None = None,
    margin: float = 0.06,
) -> Camera:
    """Camera on a sphere around the region centre, looking at it.

    The focal length is the largest one that keeps the whole ``region``
    (``x0, x1, y0, y1`` on the ground) inside the image with a relative
    ``margin`` on every side.
    """
    if not 0 < elevation_deg <= 90:
        raise ValueError(f"elevation must be in (0, 90] degrees, got {elevation_deg}")
    x0, x1, y0, y1 = region
    target = np.array([(x0 + x1) / 2, (y0 + y1) / 2, 0.0])
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    pos = target + distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    if yaw_deg is None:
        yaw = az + math.pi
    else:
        yaw = math.radians(yaw_deg)
    w, h = image_size
    probe = Camera(camera_id, tuple(pos), yaw, -el, math.radians(roll_deg), (1.0, 1.0), (0.0, 0.0), (w, h))
    corners = np.array([[x0, y0, 0], [x1, y0, 0], [x0, y1, 0], [x1, y1, 0]], dtype=np.float64)
    edge = np.concatenate([np.linspace(corners[i], corners[j], 9) for i, j in ((0, 1), (1, 3), (3, 2), (2, 0))])
    norm = probe.project(edge)
    f = min((w / 2) * (1 - 2 * margin) / np.max(np.abs(norm[:, 0])), (h / 2) * (1 - 2 * margin) / np.max(np.abs(norm[:, 1])))
    return Camera(camera_id, tuple(float(v) for v in pos), yaw, -el, math.radians(roll_deg), (float(f), float(f)),
                  (w / 2.0, h / 2.0), (int(w), int(h)))


def render_segmentation(camera: Camera, world: World, grid: GridSpec) -> np.ndarray:
    """One-hot class map ``(rows, cols, K)`` seen through ``camera`` at the grid cell centres.

    Cell-centre rays that miss the ground, or land outside the world, are void.
    """
    ground, hit = camera.back_project(grid.centers)
    cls = world.class_at(ground[:, :2])
    cls[~hit] = CLS["void"]
    out = np.zeros((grid.n_cells, K), dtype=np.float32)
    out[np.arange(grid.n_cells), cls] = 1.0
    return out.reshape(grid.rows, grid.cols, K)


# ---------------------------------------------------------------------------
# multi-view samples


@dataclass
class View:
    camera_id: str
    features: np.ndarray  # (T, rows, cols, K) float32
    pixels: np.ndarray  # (T, 2) float64


@dataclass
class MultiViewTrajectory:
    """One ground path rendered under several cameras."""

    record_id: int
    scene_id: str
    views: list[View]
    ground_path: np.ndarray
    h: int = 8
    original_view_index: int = 0

    @property
    def T(self) -> int:
        return len(self.ground_path)

    @property
    def camera_ids(self) -> list[str]:
        return [v.camera_id for v in self.views]

    def select_views(self, keep: list[str]) -> "MultiViewTrajectory":
        views = [v for v in self.views if v.camera_id in keep]
        anchor = self.views[self.original_view_index].camera_id
        idx = next((i for i, v in enumerate(views) if v.camera_id == anchor), 0)
        return MultiViewTrajectory(self.record_id, self.scene_id, views, self.ground_path, self.h, idx)


def generate_multiview_sample(
    world: World,
    cameras: list[Camera],
    path: GroundPath,
    grid: GridSpec,
    h: int = 8,
    record_id: int = 0,
    scene_id: str = "scene",
    original_view_index: int = 0,
    base_frames: dict[str, np.ndarray] | None = None,
) -> MultiViewTrajectory:
    """Render ``path`` under every camera.

    The static scene is rendered once per camera; each frame then stamps the
    pedestrian class on the cell holding the agent.

    Raises
    ------
    SampleRejected
        If a path point lies behind a camera or outside its image.
    """
    if len(cameras) < 2:
        raise ValueError(f"need at least 2 cameras, got {len(cameras)}")
    pts3 = np.concatenate([path.points, np.zeros((len(path), 1))], axis=1)
    views = []
    for cam in cameras:
        try:
            pix = cam.project(pts3)
        except ValueError as exc:
            raise SampleRejected(str(exc)) from None
        if not np.all(cam.in_image(pix)):
            raise SampleRejected(f"camera {cam.camera_id}: path leaves the image")
        if base_frames is not None and cam.camera_id in base_frames:
            base = base_frames[cam.camera_id]
        else:
            base = render_segmentation(cam, world, grid)
        frames = np.repeat(base[None], len(path), axis=0)
        cells = grid.cell_index(pix)
        rr, cc = np.divmod(cells, grid.cols)
        t = np.arange(len(path))
        frames[t, rr, cc, :] = 0.0
        frames[t, rr, cc, CLS["pedestrian"]] = 1.0
        views.append(View(cam.camera_id, frames, pix))
    return MultiViewTrajectory(record_id, scene_id, views, path.points.copy(), h, original_view_index)


# ---------------------------------------------------------------------------
# dataset generation and files

DEFAULT_CAMERAS = {
    "train": [
        {"id": "c45-sw", "azimuth_deg": 215.0, "elevation_deg": 45.0, "distance": 30.0},
        {"id": "c45-nw", "azimuth_deg": 125.0, "elevation_deg": 45.0, "distance": 30.0},
        {"id": "c45-e", "azimuth_deg": 345.0, "elevation_deg": 45.0, "distance": 30.0},
        {"id": "top", "azimuth_deg": 0.0, "elevation_deg": 90.0, "distance": 40.0, "yaw_deg": 90.0},
    ],
    "test": [
        {"id": "n30-s", "azimuth_deg": 260.0, "elevation_deg": 32.0, "distance": 32.0},
        {"id": "n65-ne", "azimuth_deg": 50.0, "elevation_deg": 65.0, "distance": 36.0, "roll_deg": 4.0},
    ],
}

DEFAULT_CONFIG = {
    "grid": [12, 6],
    "image_size": [480, 240],
    "h": 8,
    "T": 20,
    "activity": [12.0, 7.0],
    "require_disjoint_cameras": True,
    "train": {
        "n": 500,
        "scenes": [{"template": "plaza"}, {"template": "street-corner"}, {"template": "parking-lot"}],
        "cameras": "train",
    },
    "test": {"n": 200, "scenes": [{"template": "street-corner"}], "cameras": "test"},
    "cameras": DEFAULT_CAMERAS,
}

_SPLIT_KEY = {"train": 1, "test": 2}


@dataclass
class Dataset:
    """Records of one split plus everything needed to interpret them."""

    split: str
    records: list[MultiViewTrajectory]
    grid: GridSpec
    cameras: dict[str, Camera]
    h: int
    T: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def build_cameras(specs: list[dict], region, image_size) -> list[Camera]:
    return [
        look_at_camera(
            s["id"],
            s.get("azimuth_deg", 0.0),
            s.get("elevation_deg", 45.0),
            s.get("distance", 30.0),
            region,
            image_size=tuple(image_size),
            roll_deg=s.get("roll_deg", 0.0),
            yaw_deg=s.get("yaw_deg"),
        )
        for s in specs
    ]


def merge_config(config: dict | None) -> dict:
    out = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, value in (config or {}).items():
        if key not in out:
            raise KeyError(f"unknown dataset config key {key!r}")
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


def generate_dataset(config: dict | None, seed: int) -> dict[str, Dataset]:
    """Generate the ``train`` and ``test`` splits described by ``config``.

    Every scene and every record draws from its own stream derived from
    ``(seed, split, index)``, so the output does not depend on generation
    order.
    """
    cfg = merge_config(config)
    grid = GridSpec(int(cfg["grid"][0]), int(cfg["grid"][1]), tuple(cfg["image_size"]))
    h, T = int(cfg["h"]), int(cfg["T"])
    if not 0 < h < T:
        raise ValueError(f"need 0 < h < T, got h={h}, T={T}")
    ax, ay = cfg["activity"]
    region = (-ax, ax, -ay, ay)
    rigs = {name: build_cameras(specs, region, cfg["image_size"]) for name, specs in cfg["cameras"].items()}
    if cfg.get("require_disjoint_cameras", True):
        tr = {c.camera_id for c in rigs[cfg["train"]["cameras"]]}
        te = {c.camera_id for c in rigs[cfg["test"]["cameras"]]}
        if tr & te:
            raise ValueError(f"train and test cameras overlap: {sorted(tr & te)}")
    out = {}
    for split in ("train", "test"):
        scfg = cfg[split]
        cams = rigs[scfg["cameras"]]
        scenes = []
        for j, sc in enumerate(scfg["scenes"]):
            sc = {"activity": [ax, ay], **sc}
            world = build_world(sc, derive_rng(seed, _SPLIT_KEY[split], 0, j))
            sid = f"{split}-{j}-{sc['template']}"
            base = {c.camera_id: render_segmentation(c, world, grid) for c in cams}
            scenes.append((sid, world, base))
        records = []
        for i in range(int(scfg["n"])):
            sid, world, base = scenes[i % len(scenes)]
            rng = derive_rng(seed, _SPLIT_KEY[split], 1, i)
            for _attempt in range(100):
                path = simulate_agent(world, rng, T=T)
                try:
                    rec = generate_multiview_sample(world, cams, path, grid, h, i, sid, 0, base)
                except SampleRejected:
                    continue
                break
            else:
                raise PathError(f"{split} record {i}: every path left some camera view")
            records.append(rec)
        out[split] = Dataset(split, records, grid, {c.camera_id: c for c in cams}, h, T,
                             {"seed": int(seed), "config": cfg})
    return out


def _meta(ds: Dataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "split": ds.split,
        "grid": ds.grid.to_dict(),
        "h": ds.h,
        "T": ds.T,
        "classes": list(CLASSES),
        "cameras": [c.to_dict() for c in ds.cameras.values()],
        "seed": ds.meta.get("seed"),
        "config": ds.meta.get("config"),
    }


def save_dataset(ds: Dataset, directory) -> Path:
    """Write ``meta.json``, ``index.jsonl`` and one feature blob per record."""
    root = Path(directory)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(json.dumps(_meta(ds), indent=2, sort_keys=True) + "\n")
    lines = []
    for rec in ds.records:
        blob = f"blobs/{rec.record_id:06d}.bin"
        feats = np.stack([v.features for v in rec.views])
        (root / blob).write_bytes(encode_array(feats))
        lines.append(
            json.dumps(
                {
                    "record_id": rec.record_id,
                    "scene_id": rec.scene_id,
                    "camera_ids": rec.camera_ids,
                    "original_view_index": rec.original_view_index,
                    "h": rec.h,
                    "T": rec.T,
                    "pixels": [v.pixels.tolist() for v in rec.views],
                    "ground_path": rec.ground_path.tolist(),
                    "blob": blob,
                },
                sort_keys=True,
            )
        )
    (root / "index.jsonl").write_text("\n".join(lines) + "\n")
    return root


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{root}: dataset format {meta.get('format_version')} != {FORMAT_VERSION}")
    grid = GridSpec.from_dict(meta["grid"])
    cams = {c["camera_id"]: Camera.from_dict(c) for c in meta["cameras"]}
    records = []
    for line in (root / "index.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        feats, _ = decode_array((root / r["blob"]).read_bytes())
        views = [View(cid, feats[k], np.asarray(r["pixels"][k], dtype=np.float64)) for k, cid in enumerate(r["camera_ids"])]
        records.append(MultiViewTrajectory(r["record_id"], r["scene_id"], views, np.asarray(r["ground_path"]),
                                           r["h"], r["original_view_index"]))
    return Dataset(meta["split"], records, grid, cams, meta["h"], meta["T"],
                   {"seed": meta.get("seed"), "config": meta.get("config")})


def directory_digest(directory) -> str:
    """SHA-256 over all files below ``directory`` (sorted relative paths and bytes)."""
    root = Path(directory)
    hasher = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        hasher.update(str(p.relative_to(root)).encode())
        hasher.update(p.read_bytes())
    return hasher.hexdigest()
