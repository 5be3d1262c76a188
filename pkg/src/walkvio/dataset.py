"""Line-oriented ASCII dataset shared by the simulator and the estimator.

Layout: a leading ``# key = value`` header block, then one record per line,
globally time-sorted with tie order GT < IMU < JNT < CAM < OBS::

    GT  t px py pz qw qx qy qz vx vy vz
    IMU t ax ay az gx gy gz
    JNT t leg_id q1 q2 q3 contact
    CAM t frame_id
    OBS frame_id feature_id u v

OBS records carry no timestamp; they inherit the time of their CAM record and
must follow it. Floats are written as shortest round-trip decimals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, UnitQuaternion
from .legs import LEG_IDS, LegModel
from .vision import CameraModel

FORMAT_VERSION = 1
TAG_RANK = {"GT": 0, "IMU": 1, "JNT": 2, "CAM": 3, "OBS": 4}
ARITY = {"GT": 12, "IMU": 8, "JNT": 7, "CAM": 3, "OBS": 5}  # tokens including the tag
GRAMMAR = {
    "GT": "GT t px py pz qw qx qy qz vx vy vz",
    "IMU": "IMU t ax ay az gx gy gz",
    "JNT": "JNT t leg_id q1 q2 q3 contact",
    "CAM": "CAM t frame_id",
    "OBS": "OBS frame_id feature_id u v",
}
NOISE_KEYS = ("accel", "gyro", "accel_bias_walk", "gyro_bias_walk", "encoder", "pixel")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


def fmt(x: float) -> str:
    return repr(float(x))


@dataclass(eq=False)
class DatasetHeader:
    camera: CameraModel = field(default_factory=CameraModel)
    legs: dict = field(default_factory=dict)
    noise: dict = field(default_factory=lambda: dict.fromkeys(NOISE_KEYS, 0.0))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    rates: dict = field(default_factory=lambda: {"imu": 100.0, "camera": 10.0, "encoder": 100.0})
    version: int = FORMAT_VERSION
    extras: dict = field(default_factory=dict)

    def to_items(self) -> list[tuple[str, str]]:
        cam = self.camera
        T = cam.body_T_cam
        items = [
            ("format_version", str(self.version)),
            ("gravity", " ".join(fmt(g) for g in self.gravity)),
            ("rate.imu", fmt(self.rates["imu"])),
            ("rate.camera", fmt(self.rates["camera"])),
            ("rate.encoder", fmt(self.rates["encoder"])),
            ("camera.intrinsics", " ".join(fmt(v) for v in (cam.fx, cam.fy, cam.cx, cam.cy))),
            ("camera.image_size", f"{int(cam.width)} {int(cam.height)}"),
            ("camera.extrinsic", " ".join(fmt(v) for v in (*T.rotation.as_array(), *T.translation))),
        ]
        items += [(f"noise.{k}", fmt(self.noise[k])) for k in NOISE_KEYS]
        for leg_id in LEG_IDS:
            leg = self.legs[leg_id]
            items.append((f"leg.{leg_id}.hip_offset", " ".join(fmt(v) for v in leg.hip_offset)))
            items.append(
                (f"leg.{leg_id}.links", " ".join(fmt(v) for v in (leg.hip_length, leg.thigh_length, leg.shank_length)))
            )
            items.append((f"leg.{leg_id}.joint_limits", " ".join(fmt(v) for v in leg.joint_limits.ravel())))
        items += [(k, str(v)) for k, v in self.extras.items()]
        return items


def required_header_keys() -> list[str]:
    keys = [
        "format_version",
        "gravity",
        "rate.imu",
        "rate.camera",
        "rate.encoder",
        "camera.intrinsics",
        "camera.image_size",
        "camera.extrinsic",
    ]
    keys += [f"noise.{k}" for k in NOISE_KEYS]
    for leg_id in LEG_IDS:
        keys += [f"leg.{leg_id}.hip_offset", f"leg.{leg_id}.links", f"leg.{leg_id}.joint_limits"]
    return keys


def _floats(kv: dict, key: str, count: int, lines: dict) -> list[float]:
    parts = kv[key].split()
    if len(parts) != count:
        raise DatasetFormatError(f"header key {key!r} expects {count} values, got {len(parts)}", lines.get(key))
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise DatasetFormatError(f"header key {key!r} has a non-numeric value", lines.get(key)) from None


def header_from_items(kv: dict, lines: dict | None = None) -> DatasetHeader:
    lines = lines or {}
    missing = [k for k in required_header_keys() if k not in kv]
    if missing:
        raise DatasetFormatError(f"missing header keys: {', '.join(missing)}")
    version = kv["format_version"].strip()
    if version != str(FORMAT_VERSION):
        raise DatasetFormatError(f"unrecognized format version {version!r}", lines.get("format_version"))
    fx, fy, cx, cy = _floats(kv, "camera.intrinsics", 4, lines)
    w, h = _floats(kv, "camera.image_size", 2, lines)
    ext = _floats(kv, "camera.extrinsic", 7, lines)
    noise = {k: _floats(kv, f"noise.{k}", 1, lines)[0] for k in NOISE_KEYS}
    camera = CameraModel(
        fx, fy, cx, cy, int(w), int(h), Pose(UnitQuaternion(*ext[:4]), np.array(ext[4:])), pixel_std=noise["pixel"]
    )
    legs = {}
    for leg_id in LEG_IDS:
        hip = _floats(kv, f"leg.{leg_id}.hip_offset", 3, lines)
        links = _floats(kv, f"leg.{leg_id}.links", 3, lines)
        limits = _floats(kv, f"leg.{leg_id}.joint_limits", 6, lines)
        legs[leg_id] = LegModel(leg_id, np.array(hip), *links, joint_limits=np.array(limits).reshape(3, 2))
    known = set(required_header_keys())
    return DatasetHeader(
        camera=camera,
        legs=legs,
        noise=noise,
        gravity=np.array(_floats(kv, "gravity", 3, lines)),
        rates={
            "imu": _floats(kv, "rate.imu", 1, lines)[0],
            "camera": _floats(kv, "rate.camera", 1, lines)[0],
            "encoder": _floats(kv, "rate.encoder", 1, lines)[0],
        },
        version=FORMAT_VERSION,
        extras={k: v for k, v in kv.items() if k not in known},
    )


@dataclass(eq=False)
class Dataset:
    header: DatasetHeader
    gt: np.ndarray = field(default_factory=lambda: np.zeros((0, 11)))
    imu: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    jnt_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jnt_leg: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    jnt_q: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    jnt_contact: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    cam_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cam_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    obs_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    obs_feature: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    obs_uv: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def record_count(self) -> int:
        return len(self.gt) + len(self.imu) + len(self.jnt_t) + len(self.cam_t) + len(self.obs_frame)

    def frame_observations(self) -> dict[int, dict[int, tuple[float, float]]]:
        out: dict[int, dict[int, tuple[float, float]]] = {int(f): {} for f in self.cam_id}
        for f, k, uv in zip(self.obs_frame.tolist(), self.obs_feature.tolist(), self.obs_uv.tolist()):
            out[f][k] = (uv[0], uv[1])
        return out

    def equals(self, other: "Dataset") -> bool:
        names = ("gt", "imu", "jnt_t", "jnt_leg", "jnt_q", "jnt_contact", "cam_t", "cam_id", "obs_frame", "obs_feature", "obs_uv")
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names) and (
            self.header.to_items() == other.header.to_items()
        )


def _check_sorted(times: np.ndarray, name: str) -> None:
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise ValueError(f"{name} stream is not time-sorted")


def format_dataset(ds: Dataset) -> str:
    """Serialize to the text format; refuses unsorted streams."""
    _check_sorted(ds.gt[:, 0] if len(ds.gt) else np.zeros(0), "GT")
    _check_sorted(ds.imu[:, 0] if len(ds.imu) else np.zeros(0), "IMU")
    _check_sorted(ds.jnt_t, "JNT")
    _check_sorted(ds.cam_t, "CAM")
    frame_time = dict(zip(ds.cam_id.tolist(), ds.cam_t.tolist()))
    missing = set(ds.obs_frame.tolist()) - frame_time.keys()
    if missing:
        raise ValueError(f"OBS records reference unknown frames {sorted(missing)[:5]}")
    obs_t = np.array([frame_time[f] for f in ds.obs_frame.tolist()], dtype=float)
    cam_pos = {f: i for i, f in enumerate(ds.cam_id.tolist())}
    obs_cam = np.array([cam_pos[f] for f in ds.obs_frame.tolist()], dtype=int)
    if obs_cam.size > 1 and np.any(np.diff(obs_cam) < 0):
        raise ValueError("OBS stream is not sorted by frame")

    lines = [f"# {k} = {v}" for k, v in ds.header.to_items()]

    def rows(a):
        return [" ".join(map(fmt, r)) for r in a.tolist()]

    gt_lines = ["GT " + s for s in rows(ds.gt)]
    imu_lines = ["IMU " + s for s in rows(ds.imu)]
    jnt_lines = [
        f"JNT {fmt(t)} {LEG_IDS[leg]} {fmt(q[0])} {fmt(q[1])} {fmt(q[2])} {int(c)}"
        for t, leg, q, c in zip(ds.jnt_t.tolist(), ds.jnt_leg.tolist(), ds.jnt_q.tolist(), ds.jnt_contact.tolist())
    ]
    cam_lines = [f"CAM {fmt(t)} {int(f)}" for t, f in zip(ds.cam_t.tolist(), ds.cam_id.tolist())]
    obs_lines = [
        f"OBS {int(f)} {int(k)} {fmt(uv[0])} {fmt(uv[1])}"
        for f, k, uv in zip(ds.obs_frame.tolist(), ds.obs_feature.tolist(), ds.obs_uv.tolist())
    ]
    all_lines = gt_lines + imu_lines + jnt_lines + cam_lines + obs_lines
    times = np.concatenate(
        [
            ds.gt[:, 0] if len(ds.gt) else np.zeros(0),
            ds.imu[:, 0] if len(ds.imu) else np.zeros(0),
            ds.jnt_t,
            ds.cam_t,
            obs_t,
        ]
    ).astype(float)
    ranks = np.concatenate(
        [np.full(len(x), r) for x, r in ((gt_lines, 0), (imu_lines, 1), (jnt_lines, 2), (cam_lines, 3), (obs_lines, 4))]
    )
    # OBS lines follow their own CAM line even when two frames share a timestamp
    group = np.concatenate(
        [np.zeros(len(gt_lines) + len(imu_lines) + len(jnt_lines)), np.arange(len(cam_lines)), obs_cam]
    )
    order = np.lexsort((np.arange(len(all_lines)), ranks, group, times)) if all_lines else []
    lines.extend(all_lines[i] for i in order)
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(format_dataset(ds))
    return path


def _col(line: str, index: int) -> int:
    """1-based character column of whitespace token ``index``."""
    pos = 0
    for k, tok in enumerate(line.split()):
        pos = line.index(tok, pos)
        if k == index:
            return pos + 1
        pos += len(tok)
    return len(line) + 1


def parse_dataset(text: str) -> Dataset:
    kv: dict[str, str] = {}
    key_lines: dict[str, int] = {}
    gt, imu, jnt_t, jnt_leg, jnt_q, jnt_c = [], [], [], [], [], []
    cam_t, cam_id, obs_f, obs_k, obs_uv = [], [], [], [], []
    seen_frames: set[int] = set()
    in_header = True
    last_key = (-math.inf, -1)
    last_cam = None
    leg_index = {k: i for i, k in enumerate(LEG_IDS)}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if in_header and "=" in line:
                key, _, value = line[1:].partition("=")
                key = key.strip()
                if key in kv:
                    raise DatasetFormatError(f"duplicate header key {key!r}", lineno)
                kv[key] = value.strip()
                key_lines[key] = lineno
            continue
        in_header = False
        parts = line.split()
        tag = parts[0]
        if tag not in ARITY:
            raise DatasetFormatError(f"unknown record tag {tag!r}", lineno, 1)
        if len(parts) != ARITY[tag]:
            raise DatasetFormatError(
                f"{tag} record expects {ARITY[tag]} fields ({GRAMMAR[tag]}), got {len(parts)}", lineno, _col(raw, len(parts) - 1)
            )
        col = 1
        try:
            if tag == "OBS":
                col = 1
                f = int(parts[1])
                col = 2
                k = int(parts[2])
                col = 3
                u = float(parts[3])
                col = 4
                v = float(parts[4])
                if last_cam is None or f != last_cam:
                    raise DatasetFormatError(f"OBS for frame {f} does not follow its CAM record", lineno, _col(raw, 1))
                if not (math.isfinite(u) and math.isfinite(v)):
                    raise ValueError
                obs_f.append(f)
                obs_k.append(k)
                obs_uv.append((u, v))
                continue
            t = float(parts[1])
            if not math.isfinite(t):
                raise ValueError
            key = (t, TAG_RANK[tag])
            if key < last_key:
                raise DatasetFormatError(f"non-monotonic timestamp {parts[1]} (previous {last_key[0]!r})", lineno, _col(raw, 1))
            last_key = key
            last_cam = None
            if tag == "GT":
                col = 2
                vals = [float(p) for p in parts[1:]]
                gt.append(vals)
            elif tag == "IMU":
                col = 2
                imu.append([float(p) for p in parts[1:]])
            elif tag == "JNT":
                col = 2
                if parts[2] not in leg_index:
                    raise DatasetFormatError(f"unknown leg id {parts[2]!r}", lineno, _col(raw, 2))
                col = 3
                q = (float(parts[3]), float(parts[4]), float(parts[5]))
                col = 5
                if parts[6] not in ("0", "1"):
                    raise DatasetFormatError("contact flag must be 0 or 1", lineno, _col(raw, 6))
                jnt_t.append(t)
                jnt_leg.append(leg_index[parts[2]])
                jnt_q.append(q)
                jnt_c.append(parts[6] == "1")
            else:  # CAM
                col = 2
                fid = int(parts[2])
                if fid in seen_frames:
                    raise DatasetFormatError(f"duplicate frame id {fid}", lineno, _col(raw, 2))
                cam_t.append(t)
                cam_id.append(fid)
                seen_frames.add(fid)
                last_cam = fid
        except DatasetFormatError:
            raise
        except ValueError:
            raise DatasetFormatError(f"malformed {tag} field", lineno, _col(raw, col)) from None

    header = header_from_items(kv, key_lines)
    return Dataset(
        header=header,
        gt=np.array(gt, dtype=float).reshape(-1, 11),
        imu=np.array(imu, dtype=float).reshape(-1, 7),
        jnt_t=np.array(jnt_t, dtype=float),
        jnt_leg=np.array(jnt_leg, dtype=int),
        jnt_q=np.array(jnt_q, dtype=float).reshape(-1, 3),
        jnt_contact=np.array(jnt_c, dtype=bool),
        cam_t=np.array(cam_t, dtype=float),
        cam_id=np.array(cam_id, dtype=int),
        obs_frame=np.array(obs_f, dtype=int),
        obs_feature=np.array(obs_k, dtype=int),
        obs_uv=np.array(obs_uv, dtype=float).reshape(-1, 2),
    )


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read {path}: {exc.strerror}") from None
    return parse_dataset(text)


# -- estimated trajectories ------------------------------------------------------------

EST_GRAMMAR = "EST t px py pz qw qx qy qz vx vy vz"


@dataclass(eq=False)
class Trajectory:
    """Timestamped states in the GT column layout ``t p(3) q(4) v(3)``; ``meta`` becomes the header."""

    rows: np.ndarray = field(default_factory=lambda: np.zeros((0, 11)))
    meta: dict = field(default_factory=dict)

    @property
    def t(self) -> np.ndarray:
        return self.rows[:, 0]

    @property
    def positions(self) -> np.ndarray:
        return self.rows[:, 1:4]

    def __len__(self) -> int:
        return len(self.rows)


def format_trajectory(traj: Trajectory, tag: str = "EST") -> str:
    rows = np.asarray(traj.rows, dtype=float).reshape(-1, 11)
    _check_sorted(rows[:, 0], tag)
    lines = [f"# {k} = {v}" for k, v in traj.meta.items()]
    lines.extend(f"{tag} " + " ".join(map(fmt, r)) for r in rows.tolist())
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str, tag: str = "EST") -> Trajectory:
    meta, rows = {}, []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        parts = line.split()
        if parts[0] != tag:
            raise DatasetFormatError(f"expected {tag} record, got {parts[0]!r}", n, 1)
        if len(parts) != 12:
            raise DatasetFormatError(f"{tag} record expects 12 fields ({EST_GRAMMAR}), got {len(parts)}", n)
        try:
            rows.append([float(x) for x in parts[1:]])
        except ValueError as exc:
            raise DatasetFormatError(f"bad number: {exc}", n) from None
    a = np.array(rows, dtype=float).reshape(-1, 11)
    if len(a) > 1 and np.any(np.diff(a[:, 0]) < 0):
        raise DatasetFormatError(f"{tag} records are not time-sorted")
    return Trajectory(a, meta)


def write_trajectory(traj: Trajectory, path, tag: str = "EST") -> Path:
    path = Path(path)
    path.write_text(format_trajectory(traj, tag))
    return path


def read_trajectory(path, tag: str = "EST") -> Trajectory:
    return parse_trajectory(Path(path).read_text(), tag)
