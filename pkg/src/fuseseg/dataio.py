"""Dataset layout IO, synthetic day/night scene generation, split manifests.

Sequence directory layout (one directory per recorded sequence):

    calib/<camera>.txt     intrinsics (fx fy cx cy width height), then the
                           3x3 rotation row-major, then the translation that
                           map LIDAR-frame points into that camera frame
    rgb/NNNNNN.jpg         8-bit color, JPEG quality 95
    thermal/NNNNNN.png     16-bit grayscale, values / 65535 -> [0, 1]
    lidar/NNNNNN.bin       point records, see write_point_records
    radar/NNNNNN.bin       point records with arity 5 (x, y, z, speed, rcs)
    labels/NNNNNN.png      16-bit grayscale class ids
    gps.csv                frame, latitude, longitude, altitude, roll, pitch, yaw
    timestamps.csv         sensor_id, frame, microseconds
    meta.csv               frame, timeofday, difficult[, location]

Split manifests live under <dataset root>/splits/<kind>/{train,val,test}.txt
with one frame id ("<sequence>/<NNNNNN>") per line.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .geometry import (CameraModel, Extrinsics, PointCloud, backproject,
                       lidar_input_image, project_points)

# Class ids of the annotation scheme. Ignored pixels take part in neither
# the loss nor the metrics.
SKY = 0
WATER = 1
STATIC_OBSTACLE = 2
DYNAMIC_OBSTACLE = 3
IGNORE = 255
NUM_CLASSES = 4
CLASS_NAMES = ("sky", "water", "static_obstacle", "dynamic_obstacle")

MODALITIES = ("rgb", "thermal", "lidar")
SPLIT_KINDS = ("day-night", "geography", "saltwater", "difficult")

JPEG_QUALITY = 95
LIDAR_RANGE_M = 50.0       # normalizer for the lidar input channel
DEPTH_SCALE_MM = 1000.0    # dense depth PNGs store millimeters as uint16

# Fixed per-sensor phase offsets (us) written to timestamps.csv so that the
# synchronization tooling has something non-trivial to chew on.
_SENSOR_OFFSETS_US = {"rgb": 0, "thermal": 7_000, "lidar": -11_000}
_SENSOR_PERIODS_US = {"rgb": 100_000, "thermal": 100_000, "lidar": 100_000}
FRAME_PERIOD_US = 100_000


class DataError(ValueError):
    """Malformed dataset directory, file, or split request."""


# ---------------------------------------------------------------------------
# Core records


@dataclass(eq=False)
class FrameBundle:
    """One synchronized multimodal sample.

    rgb is (h, w, 3) in [0, 1]; thermal and lidar are (h, w) in [0, 1];
    labels is (h, w) uint8 class ids. lidar_cloud holds the raw returns the
    lidar channel was splatted from, so sequences can be re-serialized.
    """

    rgb: np.ndarray
    thermal: np.ndarray
    lidar: np.ndarray
    labels: np.ndarray
    valid: dict[str, bool]
    timestamp: int
    frame_id: str = ""
    lidar_cloud: PointCloud | None = None
    tags: dict[str, str] = field(default_factory=dict)

    def validate(self) -> "FrameBundle":
        h, w = self.labels.shape
        if self.rgb.shape != (h, w, 3) or self.thermal.shape != (h, w) \
                or self.lidar.shape != (h, w):
            raise DataError(f"frame {self.frame_id or '?'}: inconsistent channel shapes")
        for name, chan in (("rgb", self.rgb), ("thermal", self.thermal),
                           ("lidar", self.lidar)):
            if not np.all(np.isfinite(chan)):
                raise DataError(f"frame {self.frame_id or '?'}: non-finite {name} values")
            if chan.size and (chan.min() < 0.0 or chan.max() > 1.0):
                raise DataError(f"frame {self.frame_id or '?'}: {name} outside [0, 1]")
        bad = ~np.isin(self.labels, (SKY, WATER, STATIC_OBSTACLE, DYNAMIC_OBSTACLE, IGNORE))
        if bad.any():
            raise DataError(f"frame {self.frame_id or '?'}: unknown label ids "
                            f"{sorted(np.unique(self.labels[bad]).tolist())}")
        return self


@dataclass(eq=False)
class FrameInfo:
    frame_id: str
    sequence: str
    stem: str
    paths: dict[str, Path]
    available: dict[str, bool]
    timestamp: int
    tags: dict[str, str]


@dataclass(eq=False)
class SequenceInfo:
    name: str
    directory: Path
    cameras: dict[str, CameraModel]
    extrinsics: dict[str, Extrinsics]
    frames: list[FrameInfo]
    timestamps: dict[str, list[tuple[str, int]]]  # sensor -> [(stem, us)]


@dataclass(eq=False)
class DatasetManifest:
    root: Path
    sequences: dict[str, SequenceInfo]

    def frames(self) -> list[FrameInfo]:
        out = []
        for name in sorted(self.sequences):
            out.extend(self.sequences[name].frames)
        return out

    def frame(self, frame_id: str) -> FrameInfo:
        seq, _, stem = frame_id.partition("/")
        if seq not in self.sequences:
            raise DataError(f"unknown sequence in frame id {frame_id!r}")
        for info in self.sequences[seq].frames:
            if info.stem == stem:
                return info
        raise DataError(f"unknown frame id {frame_id!r}")


@dataclass(frozen=True)
class SplitSpec:
    kind: str
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(s) for s in sets)
        if len(set.union(*sets)) != total:
            raise DataError(f"{self.kind} split subsets overlap")


# ---------------------------------------------------------------------------
# Low-level encoders


def write_point_records(path: Path, records: np.ndarray) -> None:
    """Write (N, K) float32 point records with a (count, arity) header."""
    arr = np.ascontiguousarray(np.asarray(records, dtype="<f4"))
    if arr.ndim != 2:
        raise DataError(f"point records must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_point_records(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise DataError(f"{path}: truncated point record header")
        count, arity = struct.unpack("<II", header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != count * arity:
        raise DataError(f"{path}: expected {count}x{arity} records, got {data.size} values")
    return data.reshape(count, arity)


def _write_png16(path: Path, values: np.ndarray) -> None:
    if not cv2.imwrite(str(path), values.astype(np.uint16)):
        raise DataError(f"failed to write {path}")


def _read_png16(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"failed to read {path}")
    return img


def write_unit_png(path: Path, values01: np.ndarray) -> None:
    """Store a [0, 1] channel as 16-bit PNG (lossless on the 1/65535 grid)."""
    _write_png16(path, np.round(np.clip(values01, 0.0, 1.0) * 65535.0))


def read_unit_png(path: Path) -> np.ndarray:
    return _read_png16(path).astype(np.float64) / 65535.0


def write_depth_png(path: Path, depth_m: np.ndarray) -> None:
    """Store depth in millimeters as uint16 (clipped to the encodable range)."""
    _write_png16(path, np.clip(np.round(depth_m * DEPTH_SCALE_MM), 0, 65535))


def read_depth_png(path: Path) -> np.ndarray:
    return _read_png16(path).astype(np.float64) / DEPTH_SCALE_MM


def write_label_png(path: Path, labels: np.ndarray) -> None:
    _write_png16(path, labels)


def read_label_png(path: Path) -> np.ndarray:
    return _read_png16(path).astype(np.uint8)


def write_rgb_jpeg(path: Path, rgb01: np.ndarray) -> None:
    # 4:4:4 sampling: chroma subsampling produces large artifacts at the
    # hard color edges of small synthetic frames.
    bgr = cv2.cvtColor(np.round(np.clip(rgb01, 0, 1) * 255).astype(np.uint8),
                       cv2.COLOR_RGB2BGR)
    flags = [cv2.IMWRITE_JPEG_QUALITY, JPEG_QUALITY,
             cv2.IMWRITE_JPEG_SAMPLING_FACTOR, cv2.IMWRITE_JPEG_SAMPLING_FACTOR_444]
    if not cv2.imwrite(str(path), bgr, flags):
        raise DataError(f"failed to write {path}")


def read_rgb_jpeg(path: Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DataError(f"failed to read {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_camera_file(path: Path, cam: CameraModel, ext: Extrinsics) -> None:
    lines = [
        f"# camera calibration: {path.stem}",
        f"{float(cam.fx)!r} {float(cam.fy)!r} {float(cam.cx)!r} {float(cam.cy)!r} "
        f"{cam.width} {cam.height}",
    ]
    for row in ext.R:
        lines.append(" ".join(repr(float(x)) for x in row))
    lines.append(" ".join(repr(float(x)) for x in ext.t))
    path.write_text("\n".join(lines) + "\n")


def read_camera_file(path: Path) -> tuple[CameraModel, Extrinsics]:
    numbers = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            numbers.extend(line.split())
    if len(numbers) != 18:
        raise DataError(f"{path}: expected 18 calibration numbers, found {len(numbers)}")
    try:
        vals = [float(x) for x in numbers]
    except ValueError as err:
        raise DataError(f"{path}: unparsable calibration value: {err}") from err
    cam = CameraModel(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
    ext = Extrinsics(np.array(vals[6:15]).reshape(3, 3), np.array(vals[15:18]))
    return cam, ext


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneParams:
    """Controls for the procedural shoreline scene generator."""

    height: int = 64
    width: int = 64
    obstacle_count: tuple[int, int] = (1, 4)
    horizon_range: tuple[float, float] = (0.25, 0.45)
    night: bool = False
    alpha: float = 0.05        # night attenuation of the RGB channel
    sigma: float = 0.03        # night additive noise level
    seed: int = 0
    location: str = "river"
    difficult_fraction: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise DataError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.sigma < 0.0:
            raise DataError(f"sigma must be >= 0, got {self.sigma}")
        if self.seed < 0:
            raise DataError("seed must be non-negative")
        lo, hi = self.obstacle_count
        if lo < 0 or hi < lo:
            raise DataError(f"bad obstacle count range {self.obstacle_count}")
        flo, fhi = self.horizon_range
        if not (0.0 < flo <= fhi < 1.0):
            raise DataError(f"bad horizon range {self.horizon_range}")


def synthetic_calibration(height: int, width: int) -> dict[str, tuple[CameraModel, Extrinsics]]:
    """Cameras and LIDAR extrinsics used for synthetic sequences.

    The thermal camera shares the reference camera plane, so its channel is
    pixel-aligned by construction.
    """
    cam = CameraModel(fx=1.2 * width, fy=1.2 * width,
                      cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)
    ang = math.radians(0.5)
    rot = np.array([[math.cos(ang), 0.0, math.sin(ang)],
                    [0.0, 1.0, 0.0],
                    [-math.sin(ang), 0.0, math.cos(ang)]])
    ext = Extrinsics(rot, np.array([0.03, -0.08, 0.05]))
    return {"rgb": (cam, ext), "thermal": (cam, ext)}


def _smooth_noise(rng: np.random.Generator, n: int, width: int) -> np.ndarray:
    raw = rng.standard_normal(n + width)
    kernel = np.ones(width) / width
    sm = np.convolve(raw, kernel, mode="valid")[:n]
    peak = np.max(np.abs(sm))
    return sm / peak if peak > 0 else sm


def synthesize_frame(params: SyntheticSceneParams, frame_index: int) -> FrameBundle:
    """Render one procedural shoreline frame with exact labels.

    The scene is a sky band above the horizon, a shore band (static
    obstacle) below it, open water at the bottom, and a few floating
    obstacles. LIDAR returns exist only on shore and obstacles, never on
    water or sky. Night mode attenuates and noises the RGB channel only.
    """
    if frame_index < 0:
        raise DataError("frame_index must be non-negative")
    seeds = np.random.SeedSequence([params.seed, frame_index]).spawn(5)
    rng_geom, rng_rgb, rng_thermal, rng_lidar, rng_night = \
        (np.random.default_rng(s) for s in seeds)

    h, w = params.height, params.width
    labels = np.full((h, w), WATER, dtype=np.uint8)

    frac = rng_geom.uniform(*params.horizon_range)
    horizon = int(np.clip(round(frac * h), 2, h - 8))
    band = max(3, round(0.18 * h))
    wobble = _smooth_noise(rng_geom, w, max(3, w // 8)) * 0.05 * h
    shore_bottom = np.clip(horizon + band + np.round(wobble).astype(int),
                           horizon + 1, int(0.72 * h))
    rows = np.arange(h)[:, None]
    labels[:horizon, :] = SKY
    shore_mask = (rows >= horizon) & (rows < shore_bottom[None, :])
    labels[shore_mask] = STATIC_OBSTACLE

    water_top = int(shore_bottom.max())
    n_obstacles = int(rng_geom.integers(params.obstacle_count[0],
                                        params.obstacle_count[1] + 1))
    obstacle_ids = np.full((h, w), -1, dtype=np.int64)
    obstacle_depths = []
    for k in range(n_obstacles):
        oy = rng_geom.uniform(min(water_top + 2, h - 4), h - 2)
        ox = rng_geom.uniform(2, w - 3)
        ry = rng_geom.uniform(1.5, max(2.0, 0.07 * h))
        rx = rng_geom.uniform(1.5, max(2.0, 0.09 * w))
        yy, xx = np.mgrid[0:h, 0:w]
        inside = ((yy - oy) / ry) ** 2 + ((xx - ox) / rx) ** 2 <= 1.0
        paint = inside & (labels == WATER)
        labels[paint] = DYNAMIC_OBSTACLE
        obstacle_ids[paint] = k
        closeness = (oy - water_top) / max(1, h - water_top)
        obstacle_depths.append(15.0 - 11.0 * float(np.clip(closeness, 0, 1)))

    # Scene depth for every pixel that can produce a LIDAR return.
    depth = np.zeros((h, w))
    if water_top > horizon:
        shore_rows = (rows - horizon) / max(1, water_top - horizon)
        depth = np.where(shore_mask, 45.0 - 27.0 * np.clip(shore_rows, 0, 1), depth)
    for k, d in enumerate(obstacle_depths):
        depth[obstacle_ids == k] = d

    calib = synthetic_calibration(h, w)
    cam, ext = calib["rgb"]
    vv, uu = np.nonzero(((labels == STATIC_OBSTACLE) | (labels == DYNAMIC_OBSTACLE))
                        & (np.arange(h)[:, None] % 2 == 0))
    if vv.size:
        d = depth[vv, uu] * (1.0 + 0.02 * rng_lidar.uniform(-1, 1, vv.size))
        cam_pts = backproject(uu.astype(np.float64), vv.astype(np.float64), d, cam)
        lidar_pts = (cam_pts - ext.t) @ ext.R  # inverse transform into the LIDAR frame
        refl = rng_lidar.uniform(0.2, 1.0, vv.size)
        records = np.column_stack((lidar_pts, refl)).astype(np.float32)
    else:
        records = np.zeros((0, 4), dtype=np.float32)
    cloud = PointCloud(records)
    lidar = lidar_input_image(project_points(cloud, ext, cam), cam, LIDAR_RANGE_M)

    # Day appearance: high-contrast colors so the RGB channel is the
    # easiest modality to learn from.
    rgb = np.zeros((h, w, 3))
    sky_t = np.clip(rows / max(1, horizon), 0, 1)
    sky_col = (np.array([0.45, 0.65, 0.85]) * (1 - sky_t[..., None])
               + np.array([0.75, 0.85, 0.95]) * sky_t[..., None])
    rgb = np.where((labels == SKY)[..., None], sky_col, rgb)
    wave = 0.03 * np.sin(2 * np.pi * (0.35 * rows + rng_rgb.uniform(0, 1)))
    water_col = np.array([0.10, 0.17, 0.24]) + wave[..., None]
    rgb = np.where((labels == WATER)[..., None], water_col, rgb)
    shore_base = np.array([0.26, 0.34, 0.15])
    rgb = np.where((labels == STATIC_OBSTACLE)[..., None], shore_base, rgb)
    palette = np.array([[0.85, 0.15, 0.10], [0.95, 0.60, 0.10],
                        [0.90, 0.90, 0.85], [0.85, 0.80, 0.20]])
    for k in range(n_obstacles):
        rgb[obstacle_ids == k] = palette[k % len(palette)]
    rgb = np.clip(rgb + 0.02 * rng_rgb.standard_normal((h, w, 3)), 0.0, 1.0)

    # Thermal contrast is independent of the time of day.
    base = {SKY: 0.08, WATER: 0.36, STATIC_OBSTACLE: 0.66, DYNAMIC_OBSTACLE: 0.88}
    thermal = np.zeros((h, w))
    for cls, val in base.items():
        thermal[labels == cls] = val + rng_thermal.uniform(-0.03, 0.03)
    thermal = np.clip(thermal + 0.015 * rng_thermal.standard_normal((h, w)), 0.0, 1.0)
    thermal = np.round(thermal * 65535.0) / 65535.0  # align with 16-bit storage

    if params.night:
        noise = rng_night.standard_normal((h, w, 3))
        rgb = np.clip(params.alpha * rgb + params.sigma * noise, 0.0, 1.0)

    difficult = "1" if rng_geom.uniform() < params.difficult_fraction else "0"
    tags = {"timeofday": "night" if params.night else "day",
            "difficult": difficult, "location": params.location}
    return FrameBundle(
        rgb=rgb, thermal=thermal, lidar=lidar, labels=labels,
        valid={"rgb": True, "thermal": True, "lidar": True},
        timestamp=frame_index * FRAME_PERIOD_US,
        frame_id=f"{frame_index:06d}", lidar_cloud=cloud, tags=tags,
    ).validate()


# ---------------------------------------------------------------------------
# Sequence serialization


def save_sequence(bundles: list[FrameBundle], directory: Path,
                  calib: dict[str, tuple[CameraModel, Extrinsics]] | None = None,
                  gps: list[dict] | None = None) -> None:
    """Materialize bundles into the sequence directory layout.

    calib defaults to the synthetic rig for the bundles' resolution. An
    empty bundle list still produces valid (empty) sequence metadata.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "calib").mkdir(exist_ok=True)
        for sub in ("rgb", "thermal", "lidar", "labels"):
            (directory / sub).mkdir(exist_ok=True)
    except OSError as err:
        raise DataError(f"cannot create sequence directory {directory}: {err}") from err

    if calib is None:
        if bundles:
            h, w = bundles[0].labels.shape
        else:
            h, w = 64, 64
        calib = synthetic_calibration(h, w)
    for name, (cam, ext) in calib.items():
        write_camera_file(directory / "calib" / f"{name}.txt", cam, ext)

    ts_rows, meta_rows = [], []
    for i, b in enumerate(bundles):
        stem = f"{i:06d}"
        # rgb is the reference modality and is always written; auxiliary
        # channels are skipped when invalid so availability round-trips.
        write_rgb_jpeg(directory / "rgb" / f"{stem}.jpg", b.rgb)
        write_label_png(directory / "labels" / f"{stem}.png", b.labels)
        if b.valid.get("thermal", True):
            write_unit_png(directory / "thermal" / f"{stem}.png", b.thermal)
        if b.valid.get("lidar", True):
            if b.lidar_cloud is None:
                if np.any(b.lidar > 0):
                    raise DataError(f"frame {stem}: non-empty lidar channel but "
                                    f"no point cloud to serialize")
                write_point_records(directory / "lidar" / f"{stem}.bin",
                                    np.zeros((0, 4), dtype=np.float32))
            else:
                write_point_records(directory / "lidar" / f"{stem}.bin",
                                    b.lidar_cloud.points.astype(np.float32))
        for sensor in MODALITIES:
            ts_rows.append((sensor, stem, b.timestamp + _SENSOR_OFFSETS_US[sensor]))
        meta_rows.append((stem,
                          b.tags.get("timeofday", "day"),
                          b.tags.get("difficult", "0"),
                          b.tags.get("location", "")))

    with open(directory / "timestamps.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_id", "frame", "microseconds"])
        writer.writerows(ts_rows)
    with open(directory / "meta.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "timeofday", "difficult", "location"])
        writer.writerows(meta_rows)
    if gps is not None:
        with open(directory / "gps.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "latitude", "longitude", "altitude",
                             "roll", "pitch", "yaw"])
            for row in gps:
                writer.writerow([row["frame"]] + [repr(row[k]) for k in
                                ("latitude", "longitude", "altitude",
                                 "roll", "pitch", "yaw")])


def parse_gps(path: Path) -> list[dict]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append({
                "frame": row["frame"],
                **{k: float(row[k]) for k in ("latitude", "longitude", "altitude",
                                              "roll", "pitch", "yaw")},
            })
    return records


def _is_sequence_dir(directory: Path) -> bool:
    return (directory / "timestamps.csv").exists() or (directory / "rgb").is_dir()


def _load_one_sequence(directory: Path, name: str) -> SequenceInfo:
    cameras, extrinsics = {}, {}
    calib_dir = directory / "calib"
    if calib_dir.is_dir():
        for path in sorted(calib_dir.glob("*.txt")):
            try:
                cam, ext = read_camera_file(path)
            except DataError:
                raise
            except Exception as err:
                raise DataError(f"malformed calibration file {path}: {err}") from err
            cameras[path.stem] = cam
            extrinsics[path.stem] = ext

    timestamps: dict[str, list[tuple[str, int]]] = {}
    ts_by_frame: dict[str, dict[str, int]] = {}
    ts_path = directory / "timestamps.csv"
    if ts_path.exists():
        with open(ts_path, newline="") as fh:
            for row in csv.DictReader(fh):
                sensor, stem = row["sensor_id"], row["frame"]
                us = int(row["microseconds"])
                timestamps.setdefault(sensor, []).append((stem, us))
                ts_by_frame.setdefault(stem, {})[sensor] = us

    tags_by_frame: dict[str, dict[str, str]] = {}
    meta_path = directory / "meta.csv"
    if meta_path.exists():
        with open(meta_path, newline="") as fh:
            for row in csv.DictReader(fh):
                tags = {k: v for k, v in row.items() if k != "frame" and v not in (None, "")}
                tags_by_frame[row["frame"]] = tags

    rgb_dir = directory / "rgb"
    stems = sorted(p.stem for p in rgb_dir.glob("*.jpg")) if rgb_dir.is_dir() else []
    referenced = set(ts_by_frame) | set(tags_by_frame)
    missing = referenced - set(stems)
    if missing:
        raise DataError(f"{directory}: metadata references missing frames: "
                        f"{sorted(missing)[:5]}")

    frames = []
    for stem in stems:
        paths = {
            "rgb": directory / "rgb" / f"{stem}.jpg",
            "thermal": directory / "thermal" / f"{stem}.png",
            "lidar": directory / "lidar" / f"{stem}.bin",
            "radar": directory / "radar" / f"{stem}.bin",
            "labels": directory / "labels" / f"{stem}.png",
        }
        available = {mod: paths[mod].exists() for mod in paths}
        frames.append(FrameInfo(
            frame_id=f"{name}/{stem}", sequence=name, stem=stem,
            paths=paths, available=available,
            timestamp=ts_by_frame.get(stem, {}).get("rgb", 0),
            tags=tags_by_frame.get(stem, {}),
        ))
    return SequenceInfo(name=name, directory=directory, cameras=cameras,
                        extrinsics=extrinsics, frames=frames, timestamps=timestamps)


def load_sequence(directory: Path) -> DatasetManifest:
    """Build a manifest from a sequence directory or a root of sequences."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    if _is_sequence_dir(directory):
        seq = _load_one_sequence(directory, directory.name)
        return DatasetManifest(root=directory.parent, sequences={seq.name: seq})
    sequences = {}
    for child in sorted(directory.iterdir()):
        if child.is_dir() and _is_sequence_dir(child):
            sequences[child.name] = _load_one_sequence(child, child.name)
    if not sequences:
        raise DataError(f"{directory}: no sequence metadata found")
    return DatasetManifest(root=directory, sequences=sequences)


def load_bundle(manifest: DatasetManifest, frame_id: str) -> FrameBundle:
    """Decode one frame's channels; unavailable modalities come back zeroed."""
    info = manifest.frame(frame_id)
    seq = manifest.sequences[info.sequence]
    labels = read_label_png(info.paths["labels"]) if info.available["labels"] else None
    rgb = read_rgb_jpeg(info.paths["rgb"]) if info.available["rgb"] else None
    thermal = read_unit_png(info.paths["thermal"]) if info.available["thermal"] else None

    for ref in (rgb, thermal, labels):
        if ref is not None:
            h, w = ref.shape[:2]
            break
    else:
        raise DataError(f"{frame_id}: no decodable channels")
    if labels is None:
        labels = np.full((h, w), IGNORE, dtype=np.uint8)
    if rgb is None:
        rgb = np.zeros((h, w, 3))
    if thermal is None:
        thermal = np.zeros((h, w))

    cloud = None
    lidar = np.zeros((h, w))
    if info.available["lidar"]:
        cloud = PointCloud(read_point_records(info.paths["lidar"]))
        if "rgb" not in seq.cameras:
            raise DataError(f"{info.sequence}: missing rgb camera calibration "
                            f"required to project LIDAR returns")
        cam, ext = seq.cameras["rgb"], seq.extrinsics["rgb"]
        lidar = lidar_input_image(project_points(cloud, ext, cam), cam, LIDAR_RANGE_M)

    return FrameBundle(
        rgb=rgb, thermal=thermal, lidar=lidar, labels=labels,
        valid={mod: bool(info.available[mod]) for mod in MODALITIES},
        timestamp=info.timestamp, frame_id=frame_id,
        lidar_cloud=cloud, tags=dict(info.tags),
    ).validate()


def load_bundles(manifest: DatasetManifest, frame_ids) -> list[FrameBundle]:
    return [load_bundle(manifest, fid) for fid in frame_ids]


# ---------------------------------------------------------------------------
# Splits


def _uniform_val_split(pool: list[str], val_ratio: float,
                       rng: np.random.Generator) -> tuple[list[str], list[str]]:
    n_val = int(round(val_ratio * len(pool)))
    perm = rng.permutation(len(pool))
    val_idx = set(perm[:n_val].tolist())
    val = sorted(pool[i] for i in val_idx)
    train = sorted(pool[i] for i in range(len(pool)) if i not in val_idx)
    return train, val


def make_splits(manifest: DatasetManifest, kind: str, val_ratio: float = 0.1,
                seed: int = 0) -> SplitSpec:
    """Partition manifest frames into train/val/test for the given kind."""
    if kind not in SPLIT_KINDS:
        raise DataError(f"unknown split kind {kind!r}; expected one of {SPLIT_KINDS}")
    if not (0.0 <= val_ratio < 1.0):
        raise DataError(f"val_ratio must be in [0, 1), got {val_ratio}")
    frames = manifest.frames()
    if not frames:
        raise DataError("manifest has no frames to split")
    rng = np.random.default_rng(seed)

    def require_tag(tag: str):
        missing = [f.frame_id for f in frames if tag not in f.tags]
        if missing:
            raise DataError(f"{kind} split requires the {tag!r} tag on every frame; "
                            f"missing for {missing[0]} and {len(missing) - 1} others")

    if kind == "day-night":
        require_tag("timeofday")
        test = sorted(f.frame_id for f in frames if f.tags["timeofday"] == "night")
        pool = sorted(f.frame_id for f in frames if f.tags["timeofday"] != "night")
        if not test:
            raise DataError("day-night split requires night-tagged frames")
    elif kind == "geography":
        require_tag("location")
        test = sorted(f.frame_id for f in frames if f.tags["location"] != "river")
        pool = sorted(f.frame_id for f in frames if f.tags["location"] == "river")
        if not test:
            raise DataError("geography split requires non-river frames")
    elif kind == "saltwater":
        require_tag("location")
        test = sorted(f.frame_id for f in frames if f.tags["location"] == "sea")
        pool = sorted(f.frame_id for f in frames if f.tags["location"] != "sea")
        if not test:
            raise DataError("saltwater split requires sea-tagged frames")
    else:  # difficult
        require_tag("difficult")
        test = sorted(f.frame_id for f in frames if f.tags["difficult"] == "1")
        pool = sorted(f.frame_id for f in frames if f.tags["difficult"] != "1")
        if not test:
            raise DataError("difficult split requires difficult-tagged frames")
    if not pool:
        raise DataError(f"{kind} split leaves no frames for training")

    train, val = _uniform_val_split(pool, val_ratio, rng)
    return SplitSpec(kind=kind, train=tuple(train), val=tuple(val), test=tuple(test))


def save_splits(spec: SplitSpec, root: Path) -> None:
    out = Path(root) / "splits" / spec.kind
    out.mkdir(parents=True, exist_ok=True)
    for subset in ("train", "val", "test"):
        ids = getattr(spec, subset)
        (out / f"{subset}.txt").write_text("".join(f"{fid}\n" for fid in ids))


def load_splits(root: Path, kind: str) -> SplitSpec:
    base = Path(root) / "splits" / kind
    if not base.is_dir():
        raise DataError(f"no {kind!r} split manifests under {base}")
    subsets = {}
    for subset in ("train", "val", "test"):
        path = base / f"{subset}.txt"
        if not path.exists():
            raise DataError(f"missing split file {path}")
        subsets[subset] = tuple(line.strip() for line in path.read_text().splitlines()
                                if line.strip())
    return SplitSpec(kind=kind, **subsets)
