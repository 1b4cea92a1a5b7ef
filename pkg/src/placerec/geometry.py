"""Point clouds, voxel quantization and training-time augmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFile, DegenerateResult, EmptyCloud, OutOfRange

PCV_MAGIC = b"PCV1"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Normalized points in [-1, 1]^3 plus the planar world position they were taken at."""

    points: np.ndarray
    location: tuple[float, float] = (0.0, 0.0)
    traversal_id: str = "0"
    cloud_id: str = "0"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if len(pts) == 0:
            raise EmptyCloud("point cloud has no points")
        if not np.all(np.isfinite(pts)) or np.abs(pts).max() > 1.0:
            raise OutOfRange("point coordinates must lie in [-1, 1]")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))
        object.__setattr__(self, "traversal_id", str(self.traversal_id))
        object.__setattr__(self, "cloud_id", str(self.cloud_id))

    def __len__(self):
        return len(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.location, self.traversal_id, self.cloud_id)


@dataclass(frozen=True, eq=False)
class VoxelizedCloud:
    """Unique occupied voxel indices, sorted lexicographically."""

    coords: np.ndarray
    step: float

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        c = np.unique(c, axis=0)
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    def __len__(self):
        return len(self.coords)

    def as_set(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in row) for row in self.coords}


@dataclass(frozen=True)
class AugmentConfig:
    jitter_sigma: float = 0.001
    translation_max: float = 0.01
    max_removal_fraction: float = 0.10
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.jitter_sigma, self.translation_max, self.max_removal_fraction) < 0:
            raise ValueError("augmentation magnitudes must be non-negative")
        if self.max_removal_fraction >= 1:
            raise ValueError("max_removal_fraction must be < 1")


def quantize(cloud: PointCloud | np.ndarray, step: float) -> VoxelizedCloud:
    """Map every point to ``floor(coord / step)`` per axis and collapse duplicates."""
    if step <= 0:
        raise ValueError("step must be positive")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise EmptyCloud("cannot quantize an empty cloud")
    if np.abs(pts).max() > 1.0:
        raise OutOfRange("point coordinates must lie in [-1, 1]")
    return VoxelizedCloud(np.floor(pts / step).astype(np.int64), step)


def augment(cloud: PointCloud, cfg: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    """Jitter, shared random translation and random point removal, clamped to [-1, 1]."""
    pts = np.array(cloud.points)
    n = len(pts)
    frac = rng.uniform(0.0, cfg.max_removal_fraction)
    n_remove = int(np.floor(frac * n + 0.5))
    if n_remove >= n:
        raise DegenerateResult("augmentation would remove every point")
    keep = np.ones(n, dtype=bool)
    if n_remove:
        keep[rng.choice(n, size=n_remove, replace=False)] = False
    pts = pts[keep]
    if cfg.jitter_sigma > 0:
        pts = pts + rng.normal(0.0, cfg.jitter_sigma, size=pts.shape)
    if cfg.translation_max > 0:
        pts = pts + rng.uniform(0.0, cfg.translation_max, size=3)
    np.clip(pts, -1.0, 1.0, out=pts)
    return cloud.with_points(pts)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_pcv(cloud: PointCloud) -> bytes:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    return b"".join([
        PCV_MAGIC,
        struct.pack("<I", len(pts)),
        pts.tobytes(),
        struct.pack("<dd", *cloud.location),
        _pack_str(cloud.traversal_id),
        _pack_str(cloud.cloud_id),
    ])


def decode_pcv(buf: bytes) -> PointCloud:
    try:
        if buf[:4] != PCV_MAGIC:
            raise CorruptFile("bad magic")
        (n,) = struct.unpack_from("<I", buf, 4)
        off = 8
        pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
        off += 12 * n
        east, north = struct.unpack_from("<dd", buf, off)
        off += 16
        strings = []
        for _ in range(2):
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            raw = buf[off:off + ln]
            if len(raw) != ln:
                raise CorruptFile("truncated string field")
            strings.append(raw.decode("utf-8"))
            off += ln
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"cannot decode point cloud: {exc}") from exc
    return PointCloud(pts.astype(np.float64), (east, north), strings[0], strings[1])


def write_pcv(cloud: PointCloud, path: str | Path) -> None:
    Path(path).write_bytes(encode_pcv(cloud))


def read_pcv(path: str | Path) -> PointCloud:
    return decode_pcv(Path(path).read_bytes())
