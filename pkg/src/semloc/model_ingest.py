"""Loaders for all on-disk inputs.

A dataset directory looks like:

    data/
      model/cameras.txt images.txt points3D.txt   (COLMAP text, PINHOLE only)
      db/<image>.labels.pgm .ldsc .gdsc            (per database image)
      queries/<query>.kpts .ldsc .gdsc .labels.pgm
      queries.txt        # <query-name> PINHOLE <w> <h> <fx> <fy> <cx> <cy>
      conditions.txt     # <image-name> day|night   (database and query images)
      classes.txt        # <id> <name> <dynamic:0|1>
      ground_truth.txt   # <query-name> qw qx qy qz tx ty tz  (optional)

Label rasters are 8-bit binary PGM (P5) holding class ids in the Cityscapes
train-id convention, void = 255. Binary sidecar formats are little-endian:
.ldsc = "LDSC" u32-count u32-dim f32[count*dim]; .kpts = "KPTS" u32-count
f32[count*2]; .gdsc = "GDSC" u32-dim f32[dim].

Nothing here repairs data silently except the unit renormalization of
global descriptors; every other deviation raises or lands in the
validation report.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ConsistencyError,
    DimensionMismatch,
    ParseError,
    TruncatedFile,
    UnknownLabel,
)
from .geometry import CameraIntrinsics, PoseEstimate

VOID_ID = 255
NO_POINT = -1

DB_SUBDIR = "db"
QUERY_SUBDIR = "queries"
MODEL_SUBDIR = "model"


@dataclass(frozen=True)
class ClassTable:
    """Semantic class catalogue: index = class id."""

    names: tuple[str, ...]
    dynamic_ids: frozenset[int]
    void_id: int = VOID_ID

    def is_dynamic(self, label: int) -> bool:
        return label in self.dynamic_ids

    def is_valid(self, label: int) -> bool:
        return label == self.void_id or 0 <= label < len(self.names)

    def static_ids(self) -> tuple[int, ...]:
        return tuple(i for i in range(len(self.names)) if i not in self.dynamic_ids)


@dataclass(frozen=True, eq=False)
class LabelRaster:
    """Row-major 8-bit class-id image."""

    width: int
    height: int
    labels: np.ndarray  # (height, width) uint8

    def at(self, px) -> int:
        """Label at the nearest pixel (round-half-up); raises IndexError
        outside the raster."""
        x = int(np.floor(px[0] + 0.5))
        y = int(np.floor(px[1] + 0.5))
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise IndexError(f"pixel ({px[0]}, {px[1]}) outside {self.width}x{self.height}")
        return int(self.labels[y, x])


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Per-keypoint local descriptors, row i belongs to keypoint i."""

    dim: int
    data: np.ndarray  # (rows, dim) float32

    @property
    def rows(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class GlobalDescriptor:
    """Whole-image retrieval descriptor, unit L2 norm."""

    dim: int
    values: np.ndarray  # (dim,) float32


@dataclass(eq=False)
class DbImageRecord:
    name: str
    camera_id: int
    pose: PoseEstimate
    keypoints: np.ndarray  # (n, 2) float64 pixels
    point3d_ids: np.ndarray  # (n,) int64, NO_POINT when untracked
    condition_tag: str | None = None


@dataclass(eq=False)
class RawPoint3D:
    position: np.ndarray  # (3,) float64, world frame
    track: list[tuple[int, int]]  # (image-id, keypoint-index)


@dataclass(eq=False)
class SfmModel:
    cameras: dict[int, CameraIntrinsics]
    images: dict[int, DbImageRecord]
    points: dict[int, RawPoint3D]


@dataclass(eq=False)
class QueryRecord:
    name: str
    camera: CameraIntrinsics
    keypoints: np.ndarray  # (n, 2) float64
    descriptors: DescriptorSet
    global_desc: GlobalDescriptor
    labels: LabelRaster
    condition: str | None = None


@dataclass(eq=False)
class Dataset:
    """Everything a localization run needs, fully loaded and immutable."""

    root: Path
    model: SfmModel
    class_table: ClassTable
    conditions: dict[str, str]
    db_rasters: dict[int, LabelRaster]
    db_descriptors: dict[int, DescriptorSet]
    db_global: dict[int, GlobalDescriptor]
    queries: list[QueryRecord]


@dataclass
class ValidationReport:
    ok: bool = True
    findings: list[str] = field(default_factory=list)

    def add(self, finding: str) -> None:
        self.ok = False
        self.findings.append(finding)


def _data_lines(path: Path):
    """Yield (line_number, stripped_line) skipping blanks and # comments."""
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, stripped


def load_cameras(path: Path) -> dict[int, CameraIntrinsics]:
    cameras: dict[int, CameraIntrinsics] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}:{lineno}: bad camera line: {exc}") from exc
        if model != "PINHOLE":
            raise ParseError(f"{path}:{lineno}: unsupported camera model {model!r}")
        if len(params) != 4:
            raise ParseError(f"{path}:{lineno}: PINHOLE needs 4 params, got {len(params)}")
        fx, fy, cx, cy = params
        if fx <= 0 or fy <= 0 or not (0 < cx < width) or not (0 < cy < height):
            raise ParseError(f"{path}:{lineno}: intrinsics out of range")
        if cam_id in cameras:
            raise ParseError(f"{path}:{lineno}: duplicate camera id {cam_id}")
        cameras[cam_id] = CameraIntrinsics(fx, fy, cx, cy, width, height)
    return cameras


def load_images(path: Path) -> dict[int, DbImageRecord]:
    images: dict[int, DbImageRecord] = {}
    pending = None  # header parsed, observation line expected next
    with open(path, "r") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if pending is None:
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 10:
                    raise ParseError(
                        f"{path}:{lineno}: image header needs 10 fields, got {len(parts)}"
                    )
                try:
                    image_id = int(parts[0])
                    q = np.array([float(v) for v in parts[1:5]])
                    t = np.array([float(v) for v in parts[5:8]])
                    camera_id = int(parts[8])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad image header: {exc}") from exc
                name = parts[9]
                if image_id in images:
                    raise ParseError(f"{path}:{lineno}: duplicate image id {image_id}")
                pending = (image_id, name, camera_id, PoseEstimate.from_quaternion(q, t))
            else:
                # the observation line follows its header and may be empty
                parts = line.split()
                if len(parts) % 3 != 0:
                    raise ParseError(f"{path}:{lineno}: keypoint line length not a multiple of 3")
                try:
                    vals = [float(v) for v in parts]
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad keypoint line: {exc}") from exc
                n = len(parts) // 3
                kps = np.array(vals, dtype=float).reshape(n, 3)[:, :2] if n else np.zeros((0, 2))
                ids = np.array([int(parts[3 * i + 2]) for i in range(n)], dtype=np.int64)
                image_id, name, camera_id, pose = pending
                images[image_id] = DbImageRecord(name, camera_id, pose, kps, ids)
                pending = None
    if pending is not None:
        raise ParseError(f"{path}: missing keypoint line for image id {pending[0]}")
    return images


def load_points(path: Path) -> dict[int, RawPoint3D]:
    points: dict[int, RawPoint3D] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 8 or (len(parts) - 8) % 2 != 0:
            raise ParseError(f"{path}:{lineno}: bad point3D line length {len(parts)}")
        try:
            point_id = int(parts[0])
            position = np.array([float(v) for v in parts[1:4]])
            track = [
                (int(parts[8 + 2 * i]), int(parts[9 + 2 * i]))
                for i in range((len(parts) - 8) // 2)
            ]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad point3D line: {exc}") from exc
        if point_id in points:
            raise ParseError(f"{path}:{lineno}: duplicate point id {point_id}")
        if len(track) < 2:
            raise ConsistencyError(f"{path}:{lineno}: point {point_id} tracked in < 2 views")
        points[point_id] = RawPoint3D(position, track)
    return points


def _check_model_consistency(model: SfmModel) -> None:
    track_entries = {
        pid: set(point.track) for pid, point in model.points.items()
    }
    for image_id, image in model.images.items():
        cam = model.cameras.get(image.camera_id)
        if cam is None:
            raise ConsistencyError(f"image {image_id} references missing camera {image.camera_id}")
        if len(image.keypoints) != len(image.point3d_ids):
            raise ConsistencyError(f"image {image_id}: keypoint/point3d_id length mismatch")
        if len(image.keypoints):
            x, y = image.keypoints[:, 0], image.keypoints[:, 1]
            if np.any((x < 0) | (x >= cam.width) | (y < 0) | (y >= cam.height)):
                raise ConsistencyError(f"image {image_id} has keypoints outside the frame")
        for kp_idx, pid in enumerate(image.point3d_ids):
            if pid == NO_POINT:
                continue
            if pid not in model.points:
                raise ConsistencyError(
                    f"image {image_id} keypoint {kp_idx} references missing point {pid}"
                )
            if (image_id, kp_idx) not in track_entries[pid]:
                raise ConsistencyError(
                    f"asymmetric track: image {image_id} keypoint {kp_idx} links to point "
                    f"{pid}, whose track omits it"
                )
    for point_id, point in model.points.items():
        for image_id, kp_idx in point.track:
            image = model.images.get(image_id)
            if image is None:
                raise ConsistencyError(f"point {point_id} track references missing image {image_id}")
            if not (0 <= kp_idx < len(image.point3d_ids)):
                raise ConsistencyError(
                    f"point {point_id} track references keypoint {kp_idx} out of range "
                    f"for image {image_id}"
                )
            if image.point3d_ids[kp_idx] != point_id:
                raise ConsistencyError(
                    f"asymmetric track: point {point_id} claims image {image_id} keypoint "
                    f"{kp_idx}, which links to {image.point3d_ids[kp_idx]}"
                )


def load_sfm_model(model_dir: Path) -> SfmModel:
    """Parse and cross-check the three COLMAP-format text files."""
    model_dir = Path(model_dir)
    model = SfmModel(
        cameras=load_cameras(model_dir / "cameras.txt"),
        images=load_images(model_dir / "images.txt"),
        points=load_points(model_dir / "points3D.txt"),
    )
    _check_model_consistency(model)
    return model


def load_label_raster(
    path: Path, expected_dims: tuple[int, int], class_table: ClassTable
) -> LabelRaster:
    """Read a P5 PGM of class ids; expected_dims is (width, height)."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(raw):
        # PGM header tokens are whitespace separated, '#' starts a comment
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ParseError(f"{path}: bad PGM header: {exc}") from exc
    if maxval != 255:
        raise ParseError(f"{path}: PGM maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = raw[pos : pos + width * height]
    if len(data) < width * height:
        raise TruncatedFile(f"{path}: expected {width * height} pixels, got {len(data)}")
    if (width, height) != tuple(expected_dims):
        raise DimensionMismatch(
            f"{path}: raster is {width}x{height}, expected {expected_dims[0]}x{expected_dims[1]}"
        )
    labels = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    bad = labels[(labels >= len(class_table.names)) & (labels != class_table.void_id)]
    if bad.size:
        raise UnknownLabel(f"{path}: label id {int(bad[0])} outside the class table")
    return LabelRaster(width, height, labels)


def _read_binary(path: Path, magic: bytes, header_fields: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}")
    header_size = 4 + 4 * header_fields
    if len(raw) < header_size:
        raise TruncatedFile(f"{path}: header truncated")
    header = struct.unpack(f"<{header_fields}I", raw[4:header_size])
    return header, raw[header_size:]


def load_descriptors(path: Path) -> DescriptorSet:
    (count, dim), payload = _read_binary(path, b"LDSC", 2)
    expected = count * dim * 4
    if len(payload) < expected:
        raise TruncatedFile(f"{path}: expected {count * dim} floats, payload holds {len(payload) // 4}")
    if len(payload) > expected:
        raise ParseError(f"{path}: {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return DescriptorSet(dim=dim, data=data)


def load_keypoints(path: Path) -> np.ndarray:
    (count,), payload = _read_binary(path, b"KPTS", 1)
    expected = count * 2 * 4
    if len(payload) < expected:
        raise TruncatedFile(f"{path}: expected {count * 2} floats, payload holds {len(payload) // 4}")
    if len(payload) > expected:
        raise ParseError(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(count, 2).astype(np.float64)


def load_global_descriptor(path: Path) -> GlobalDescriptor:
    (dim,), payload = _read_binary(path, b"GDSC", 1)
    expected = dim * 4
    if len(payload) < expected:
        raise TruncatedFile(f"{path}: expected {dim} floats, payload holds {len(payload) // 4}")
    if len(payload) > expected:
        raise ParseError(f"{path}: {len(payload) - expected} trailing bytes")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    norm = np.linalg.norm(values)
    if norm < 1e-12:
        raise ParseError(f"{path}: zero-norm global descriptor")
    return GlobalDescriptor(dim=dim, values=(values / norm).astype(np.float32))


def load_class_table(path: Path) -> ClassTable:
    entries: dict[int, tuple[str, bool]] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise ParseError(f"{path}:{lineno}: expected '<id> <name> <0|1>'")
        try:
            class_id = int(parts[0])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad class id") from exc
        if class_id in entries:
            raise ParseError(f"{path}:{lineno}: duplicate class id {class_id}")
        entries[class_id] = (parts[1], parts[2] == "1")
    if sorted(entries) != list(range(len(entries))):
        raise ParseError(f"{path}: class ids must be contiguous from 0")
    names = tuple(entries[i][0] for i in range(len(entries)))
    dynamic = frozenset(i for i in range(len(entries)) if entries[i][1])
    return ClassTable(names=names, dynamic_ids=dynamic)


def load_conditions(path: Path) -> dict[str, str]:
    conditions: dict[str, str] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("day", "night"):
            raise ParseError(f"{path}:{lineno}: expected '<image-name> day|night'")
        conditions[parts[0]] = parts[1]
    return conditions


def load_query_cameras(path: Path) -> dict[str, CameraIntrinsics]:
    cameras: dict[str, CameraIntrinsics] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 8 or parts[1] != "PINHOLE":
            raise ParseError(f"{path}:{lineno}: expected '<name> PINHOLE w h fx fy cx cy'")
        try:
            width, height = int(parts[2]), int(parts[3])
            fx, fy, cx, cy = (float(v) for v in parts[4:8])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad query camera line: {exc}") from exc
        if fx <= 0 or fy <= 0 or not (0 < cx < width) or not (0 < cy < height):
            raise ParseError(f"{path}:{lineno}: intrinsics out of range")
        cameras[parts[0]] = CameraIntrinsics(fx, fy, cx, cy, width, height)
    return cameras


def load_ground_truth(path: Path) -> dict[str, PoseEstimate]:
    poses: dict[str, PoseEstimate] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"{path}:{lineno}: expected '<name> qw qx qy qz tx ty tz'")
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad pose line: {exc}") from exc
        poses[parts[0]] = PoseEstimate.from_quaternion(np.array(vals[:4]), np.array(vals[4:]))
    return poses


def load_dataset(root: Path) -> Dataset:
    """Strict loading of a complete dataset; raises on the first problem.

    Run validate_dataset first for a full report instead of a single error.
    """
    root = Path(root)
    model = load_sfm_model(root / MODEL_SUBDIR)
    class_table = load_class_table(root / "classes.txt")
    conditions = load_conditions(root / "conditions.txt")

    db_rasters, db_descriptors, db_global = {}, {}, {}
    for image_id, image in model.images.items():
        cam = model.cameras[image.camera_id]
        base = root / DB_SUBDIR / image.name
        db_rasters[image_id] = load_label_raster(
            base.with_name(base.name + ".labels.pgm"), (cam.width, cam.height), class_table
        )
        descs = load_descriptors(base.with_name(base.name + ".ldsc"))
        if descs.rows != len(image.keypoints):
            raise ConsistencyError(
                f"{image.name}: {descs.rows} descriptors for {len(image.keypoints)} keypoints"
            )
        db_descriptors[image_id] = descs
        db_global[image_id] = load_global_descriptor(base.with_name(base.name + ".gdsc"))
        image.condition_tag = conditions.get(image.name)

    queries = []
    for name, cam in sorted(load_query_cameras(root / "queries.txt").items()):
        base = root / QUERY_SUBDIR / name
        kps = load_keypoints(base.with_name(base.name + ".kpts"))
        if len(kps) and (
            np.any(kps[:, 0] < 0)
            or np.any(kps[:, 0] >= cam.width)
            or np.any(kps[:, 1] < 0)
            or np.any(kps[:, 1] >= cam.height)
        ):
            raise ConsistencyError(f"{name}: keypoints outside the frame")
        descs = load_descriptors(base.with_name(base.name + ".ldsc"))
        if descs.rows != len(kps):
            raise ConsistencyError(f"{name}: {descs.rows} descriptors for {len(kps)} keypoints")
        queries.append(
            QueryRecord(
                name=name,
                camera=cam,
                keypoints=kps,
                descriptors=descs,
                global_desc=load_global_descriptor(base.with_name(base.name + ".gdsc")),
                labels=load_label_raster(
                    base.with_name(base.name + ".labels.pgm"), (cam.width, cam.height), class_table
                ),
                condition=conditions.get(name),
            )
        )
    return Dataset(
        root=root,
        model=model,
        class_table=class_table,
        conditions=conditions,
        db_rasters=db_rasters,
        db_descriptors=db_descriptors,
        db_global=db_global,
        queries=queries,
    )


def validate_dataset(root: Path) -> ValidationReport:
    """Check a dataset directory end to end and report every finding."""
    root = Path(root)
    report = ValidationReport()

    try:
        model = load_sfm_model(root / MODEL_SUBDIR)
    except Exception as exc:
        report.add(f"model: {exc}")
        return report
    try:
        class_table = load_class_table(root / "classes.txt")
    except Exception as exc:
        report.add(f"classes.txt: {exc}")
        return report
    try:
        conditions = load_conditions(root / "conditions.txt")
    except Exception as exc:
        report.add(f"conditions.txt: {exc}")
        conditions = {}

    local_dims: dict[str, int] = {}
    global_dims: dict[str, int] = {}

    for image_id in sorted(model.images):
        image = model.images[image_id]
        cam = model.cameras[image.camera_id]
        base = root / DB_SUBDIR / image.name
        raster_path = base.with_name(base.name + ".labels.pgm")
        if not raster_path.exists():
            report.add(f"{image.name}: missing label raster")
        else:
            try:
                load_label_raster(raster_path, (cam.width, cam.height), class_table)
            except Exception as exc:
                report.add(f"{image.name}: {exc}")
        ldsc_path = base.with_name(base.name + ".ldsc")
        if not ldsc_path.exists():
            report.add(f"{image.name}: missing local descriptors")
        else:
            try:
                descs = load_descriptors(ldsc_path)
                if descs.rows != len(image.keypoints):
                    report.add(
                        f"{image.name}: {descs.rows} descriptors for "
                        f"{len(image.keypoints)} keypoints"
                    )
                local_dims[image.name] = descs.dim
            except Exception as exc:
                report.add(f"{image.name}: {exc}")
        gdsc_path = base.with_name(base.name + ".gdsc")
        if not gdsc_path.exists():
            report.add(f"{image.name}: missing global descriptor")
        else:
            try:
                global_dims[image.name] = load_global_descriptor(gdsc_path).dim
            except Exception as exc:
                report.add(f"{image.name}: {exc}")
        if image.name not in conditions:
            report.add(f"{image.name}: missing condition tag")

    try:
        query_cams = load_query_cameras(root / "queries.txt")
    except Exception as exc:
        report.add(f"queries.txt: {exc}")
        query_cams = {}
    for name in sorted(query_cams):
        cam = query_cams[name]
        base = root / QUERY_SUBDIR / name
        kp_count = None
        for ext, label in ((".kpts", "keypoints"), (".ldsc", "local descriptors"),
                           (".gdsc", "global descriptor"), (".labels.pgm", "label raster")):
            path = base.with_name(base.name + ext)
            if not path.exists():
                report.add(f"{name}: missing {label}")
                continue
            try:
                if ext == ".kpts":
                    kp_count = len(load_keypoints(path))
                elif ext == ".ldsc":
                    descs = load_descriptors(path)
                    local_dims[name] = descs.dim
                    if kp_count is not None and descs.rows != kp_count:
                        report.add(f"{name}: {descs.rows} descriptors for {kp_count} keypoints")
                elif ext == ".gdsc":
                    global_dims[name] = load_global_descriptor(path).dim
                else:
                    load_label_raster(path, (cam.width, cam.height), class_table)
            except Exception as exc:
                report.add(f"{name}: {exc}")
        if name not in conditions:
            report.add(f"{name}: missing condition tag")

    for dims, kind in ((local_dims, "local"), (global_dims, "global")):
        if len(set(dims.values())) > 1:
            counts: dict[int, int] = {}
            for d in dims.values():
                counts[d] = counts.get(d, 0) + 1
            majority = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
            for name in sorted(dims):
                if dims[name] != majority:
                    report.add(
                        f"{name}: {kind} descriptor dim {dims[name]} != majority {majority}"
                    )
    return report
