"""Synthetic multi-traversal worlds built from geometric primitives, and their on-disk layout.

Every location owns a persistent scene (buildings, walls, poles).  Each
traversal revisits every location from a slightly perturbed pose, with its own
transient clutter, point dropout and sensor noise (an occluded sector is
optional), and normalizes the observed points into [-1, 1]^3.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFile, CorruptManifest, InvalidConfig, MissingCloudFile
from .geometry import PointCloud, decode_pcv, encode_pcv

POSITIVE_RADIUS = 10.0
NEGATIVE_RADIUS = 50.0


@dataclass(frozen=True)
class WorldConfig:
    n_locations: int = 70
    n_traversals: int = 4
    n_test_locations: int = 20
    location_spacing: float = 60.0
    scene_primitive_count: int = 10
    traversal_noise: float = 2.0
    dropout: float = 0.15
    occlusion: float = 0.0
    points_per_cloud: int = 1500
    clutter_count: int = 8
    view_radius: float = 25.0
    view_height: float = 10.0
    sensor_noise: float = 0.05
    max_yaw_deg: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.n_locations < 1 or self.n_traversals < 1:
            raise InvalidConfig("need at least one location and one traversal")
        if not 0 <= self.n_test_locations <= self.n_locations:
            raise InvalidConfig("n_test_locations must be within [0, n_locations]")
        if self.location_spacing <= NEGATIVE_RADIUS:
            raise InvalidConfig("location_spacing must exceed 50 m so distinct locations are negatives")
        if not 0 <= self.traversal_noise < POSITIVE_RADIUS / 3:
            raise InvalidConfig("traversal_noise must be in [0, 10/3) m so revisits stay positives")
        if not 0 <= self.dropout < 1 or not 0 <= self.occlusion < 1:
            raise InvalidConfig("dropout and occlusion must be in [0, 1)")
        if self.points_per_cloud < 1 or self.scene_primitive_count < 1:
            raise InvalidConfig("points_per_cloud and scene_primitive_count must be positive")

    @property
    def max_revisit_offset(self) -> float:
        # keeps revisit pairs <= 10 m apart and cross-location pairs >= 50 m apart
        return min(POSITIVE_RADIUS / 2, (self.location_spacing - NEGATIVE_RADIUS) / 2)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


PRESETS = {
    "toy-oxford": WorldConfig(),
    "tiny": WorldConfig(n_locations=12, n_traversals=3, n_test_locations=4, points_per_cloud=600),
}


@dataclass(eq=False)
class Dataset:
    clouds: list[PointCloud]
    location_index: np.ndarray
    location_centers: np.ndarray
    splits: list[str]
    config: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self):
        self.location_index = np.asarray(self.location_index, dtype=np.int64)
        self.location_centers = np.asarray(self.location_centers, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.clouds)

    def traversals(self) -> list[str]:
        return sorted({c.traversal_id for c in self.clouds})

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, loc in enumerate(self.location_index) if self.splits[loc] == split],
                        dtype=np.int64)

    def locations(self) -> np.ndarray:
        return np.array([c.location for c in self.clouds], dtype=np.float64).reshape(-1, 2)


def label_pair(a: PointCloud, b: PointCloud) -> str:
    """'positive' within 10 m, 'negative' from 50 m on, otherwise 'indeterminate'."""
    d = float(np.hypot(a.location[0] - b.location[0], a.location[1] - b.location[1]))
    if d <= POSITIVE_RADIUS:
        return "positive"
    if d >= NEGATIVE_RADIUS:
        return "negative"
    return "indeterminate"


# ---- scene primitives -------------------------------------------------------

def _box(rng):
    w, l, h = rng.uniform(3, 12), rng.uniform(3, 12), rng.uniform(3, 9)
    return {"kind": "box", "size": (w, l, h), "yaw": rng.uniform(0, np.pi)}


def _wall(rng):
    return {"kind": "wall", "size": (rng.uniform(4, 18), 0.0, rng.uniform(2, 7)), "yaw": rng.uniform(0, np.pi)}


def _pole(rng):
    return {"kind": "pole", "size": (rng.uniform(0.15, 0.4), 0.0, rng.uniform(3, 9)), "yaw": 0.0}


def _car(rng):
    return {"kind": "box", "size": (rng.uniform(1.6, 2.0), rng.uniform(3.8, 4.8), rng.uniform(1.3, 1.7)),
            "yaw": rng.uniform(0, np.pi)}


def _area(prim) -> float:
    w, l, h = prim["size"]
    if prim["kind"] == "box":
        return 2 * (w + l) * h + w * l
    if prim["kind"] == "wall":
        return w * h
    return 2 * np.pi * w * h


def _sample_surface(prim, n, rng) -> np.ndarray:
    w, l, h = prim["size"]
    if prim["kind"] == "pole":
        ang = rng.uniform(0, 2 * np.pi, n)
        local = np.stack([w * np.cos(ang), w * np.sin(ang), rng.uniform(0, h, n)], axis=1)
    elif prim["kind"] == "wall":
        local = np.stack([rng.uniform(-w / 2, w / 2, n), np.zeros(n), rng.uniform(0, h, n)], axis=1)
    else:
        faces = np.array([l * h, l * h, w * h, w * h, w * l])
        face = rng.choice(5, size=n, p=faces / faces.sum())
        u, v = rng.uniform(-0.5, 0.5, n), rng.uniform(0, 1, n)
        local = np.empty((n, 3))
        for f, (x, y, z) in enumerate([
            (np.full(n, w / 2), u * l, v * h),
            (np.full(n, -w / 2), u * l, v * h),
            (u * w, np.full(n, l / 2), v * h),
            (u * w, np.full(n, -l / 2), v * h),
            (u * w, (v - 0.5) * l, np.full(n, h)),
        ]):
            sel = face == f
            local[sel] = np.stack([x[sel], y[sel], z[sel]], axis=1)
    c, s = np.cos(prim["yaw"]), np.sin(prim["yaw"])
    xy = local[:, :2] @ np.array([[c, s], [-s, c]])
    return np.column_stack([xy + prim["center"], local[:, 2]])


def _place(prims, rng, radius):
    for p in prims:
        r = radius * np.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * np.pi)
        p["center"] = np.array([r * np.cos(a), r * np.sin(a)])
    return prims


def make_scene(rng: np.random.Generator, cfg: WorldConfig) -> list[dict]:
    makers = [_box, _wall, _pole]
    prims = [makers[rng.choice(3, p=[0.4, 0.35, 0.25])](rng) for _ in range(cfg.scene_primitive_count)]
    return _place(prims, rng, cfg.view_radius)


def observe(scene: list[dict], offset: np.ndarray, rng: np.random.Generator,
            cfg: WorldConfig) -> np.ndarray:
    """Points of one visit, in normalized sensor coordinates."""
    clutter = _place([_car(rng) for _ in range(rng.poisson(cfg.clutter_count))], rng, cfg.view_radius)
    prims = scene + clutter
    areas = np.array([_area(p) for p in prims])
    budget = int(cfg.points_per_cloud / ((1 - cfg.dropout) * (1 - cfg.occlusion)) * 1.6) + 16
    counts = rng.multinomial(budget, areas / areas.sum())
    pts = np.concatenate([_sample_surface(p, c, rng) for p, c in zip(prims, counts) if c > 0])
    if cfg.dropout > 0:
        pts = pts[rng.random(len(pts)) >= cfg.dropout]
    if cfg.occlusion > 0:
        # one random angular sector around the sensor is hidden on this visit
        rel_ang = np.arctan2(pts[:, 1] - offset[1], pts[:, 0] - offset[0])
        start = rng.uniform(-np.pi, np.pi)
        pts = pts[np.mod(rel_ang - start, 2 * np.pi) > 2 * np.pi * cfg.occlusion]
    yaw = np.deg2rad(rng.uniform(-cfg.max_yaw_deg, cfg.max_yaw_deg))
    c, s = np.cos(yaw), np.sin(yaw)
    xy = (pts[:, :2] - offset) @ np.array([[c, -s], [s, c]])
    local = np.column_stack([xy / cfg.view_radius, pts[:, 2] / (cfg.view_height / 2) - 1.0])
    local += rng.normal(0, cfg.sensor_noise / cfg.view_radius, size=local.shape)
    local = local[np.all(np.abs(local) <= 1.0, axis=1)]
    if len(local) > cfg.points_per_cloud:
        local = local[rng.choice(len(local), cfg.points_per_cloud, replace=False)]
    if len(local) == 0:
        local = np.zeros((1, 3))
    return np.clip(local.astype(np.float32).astype(np.float64), -1.0, 1.0)


def _revisit_offset(rng: np.random.Generator, cfg: WorldConfig) -> np.ndarray:
    off = rng.normal(0, cfg.traversal_noise, size=2)
    norm = np.hypot(*off)
    cap = cfg.max_revisit_offset
    if norm > cap:
        off *= cap / norm
    return off


def generate_world(cfg: WorldConfig) -> Dataset:
    """Deterministic synthetic world: every location observed once per traversal."""
    if not isinstance(cfg, WorldConfig):
        raise InvalidConfig("cfg must be a WorldConfig")
    side = int(np.ceil(np.sqrt(cfg.n_locations)))
    grid = np.array([(i % side, i // side) for i in range(cfg.n_locations)], dtype=np.float64)
    centers = grid * cfg.location_spacing
    n_train = cfg.n_locations - cfg.n_test_locations
    splits = ["train"] * n_train + ["test"] * cfg.n_test_locations
    clouds, loc_index = [], []
    for loc in range(cfg.n_locations):
        scene = make_scene(np.random.default_rng([cfg.seed, loc, 0xC0FFEE]), cfg)
        for t in range(cfg.n_traversals):
            rng = np.random.default_rng([cfg.seed, loc, t])
            offset = _revisit_offset(rng, cfg)
            pts = observe(scene, offset, rng, cfg)
            where = centers[loc] + offset
            clouds.append(PointCloud(pts, (float(where[0]), float(where[1])), str(t), f"t{t}_l{loc:04d}"))
            loc_index.append(loc)
    return Dataset(clouds, np.array(loc_index), centers, splits, cfg)


# ---- persistence -----------------------------------------------------------

def _cloud_relpath(c: PointCloud) -> str:
    return f"clouds/{c.traversal_id}/{c.cloud_id}.pcv"


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    root = Path(directory)
    entries = []
    for c, loc in zip(ds.clouds, ds.location_index):
        rel = _cloud_relpath(c)
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = encode_pcv(c)
        path.write_bytes(blob)
        entries.append({"cloud_id": c.cloud_id, "traversal": c.traversal_id, "location": int(loc),
                        "file": rel, "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "format": "placerec-dataset-1",
        "config": asdict(ds.config),
        "config_hash": ds.config.hash(),
        "seed": ds.config.seed,
        "traversals": ds.traversals(),
        "locations": [{"index": i, "easting": float(e), "northing": float(n), "split": s}
                      for i, ((e, n), s) in enumerate(zip(ds.location_centers, ds.splits))],
        "clouds": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        cfg = WorldConfig(**manifest["config"])
        if cfg.hash() != manifest["config_hash"]:
            raise CorruptManifest("config hash does not match the stored config")
        locs = manifest["locations"]
        centers = [(l["easting"], l["northing"]) for l in locs]
        splits = [l["split"] for l in locs]
        entries = manifest["clouds"]
    except FileNotFoundError as exc:
        raise CorruptManifest(f"no manifest in {root}") from exc
    except (ValueError, KeyError, TypeError, InvalidConfig) as exc:
        raise CorruptManifest(f"unreadable manifest: {exc}") from exc
    clouds, loc_index = [], []
    for e in entries:
        path = root / e["file"]
        if not path.is_file():
            raise MissingCloudFile(str(path))
        blob = path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CorruptManifest(f"{path} does not match its manifest digest")
        try:
            clouds.append(decode_pcv(blob))
        except CorruptFile as exc:
            raise CorruptManifest(str(exc)) from exc
        loc_index.append(e["location"])
    return Dataset(clouds, np.array(loc_index), np.array(centers), splits, cfg)
