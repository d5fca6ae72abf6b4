"""Synthetic synchronized multi-view pose capture and the NDJSON dataset format."""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import geometry as geo
from .errors import ConfigError, DataIOError, ParseError, ValidationError

FORMAT_VERSION = 1

# Rest-pose bone offsets (mm) from each joint's parent, body facing +X, left = +Y.
REST_OFFSETS = np.array([
    [0, 0, 0],
    [0, 130, 0], [0, 0, -450], [0, 0, -440],
    [0, -130, 0], [0, 0, -450], [0, 0, -440],
    [0, 0, 240], [0, 0, 260], [40, 0, 180],
    [0, 170, -10], [0, 0, -290], [0, 0, -260],
    [0, -170, -10], [0, 0, -290], [0, 0, -260],
], dtype=np.float64)

LIMB_JOINTS = (1, 4, 10, 13)      # hips and shoulders, 3 DOF
TORSO_JOINTS = (7, 8)             # spine and neck, 3 DOF
HINGE_JOINTS = {2: 1.0, 5: 1.0, 11: -1.0, 14: -1.0}  # knees, elbows: flexion about local Y


@dataclass(frozen=True)
class GenConfig:
    n_subjects: int = 2
    n_views: int = 4
    n_frames: int = 2000
    stride: int = 1
    noise_sigma: float = 0.0
    angle_step: float = 0.04
    reversion: float = 0.02
    limb_range: float = 1.2
    torso_range: float = 0.35
    hinge_max: float = 2.0
    root_tilt: float = 0.15
    yaw_step: float = 0.03
    camera_distance: float = 4500.0
    camera_elevation: float = 0.15
    camera_azimuth_offset: float = math.pi / 4
    projection: str = "perspective"
    focal: float = 0.0  # 0 = derived from camera distance

    def validate(self):
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if self.n_views < 2:
            raise ConfigError("n_views must be >= 2 (metric learning needs two views)")
        if self.n_frames < 1 or self.stride < 1:
            raise ConfigError("n_frames and stride must be >= 1")
        if self.noise_sigma < 0 or self.angle_step < 0 or self.yaw_step < 0:
            raise ConfigError("noise and step sizes must be non-negative")
        if not 0 <= self.reversion < 1:
            raise ConfigError("reversion must lie in [0, 1)")
        if self.projection not in ("perspective", "orthographic"):
            raise ConfigError(f"unknown projection {self.projection!r}")

    def cameras(self) -> list[geo.Camera]:
        focal = self.focal if self.focal > 0 else None
        return [
            geo.Camera(self.camera_azimuth_offset + 2 * math.pi * v / self.n_views,
                       self.camera_elevation, self.camera_distance, self.projection,
                       focal if self.projection == "perspective" else None)
            for v in range(self.n_views)
        ]


@dataclass(frozen=True)
class FrameRecord:
    subject_id: int
    view_id: int
    frame_index: int
    pose_global: np.ndarray
    observation: np.ndarray


def default_skeleton_meta() -> dict:
    return {"joint_names": list(geo.JOINT_NAMES), "parents": list(geo.PARENTS),
            "lh_index": geo.LEFT_HIP}


class Dataset:
    """Column-oriented record store. Arrays are read-only after construction."""

    def __init__(self, subject, view, frame, pose, obs, subjects=None, cameras=None,
                 skeleton_meta=None):
        self.subject = np.asarray(subject, dtype=np.int64)
        self.view = np.asarray(view, dtype=np.int64)
        self.frame = np.asarray(frame, dtype=np.int64)
        self.pose = np.asarray(pose, dtype=np.float64).reshape(-1, geo.N_JOINTS, 3)
        self.obs = np.asarray(obs, dtype=np.float64).reshape(-1, 2 * geo.N_JOINTS)
        for a in (self.subject, self.view, self.frame, self.pose, self.obs):
            a.flags.writeable = False
        self.subjects = list(subjects or [])
        self.cameras = list(cameras or [])
        self.skeleton_meta = skeleton_meta or default_skeleton_meta()

    def __len__(self):
        return len(self.subject)

    def __iter__(self) -> Iterator[FrameRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def records(self) -> list[FrameRecord]:
        return list(self)

    def record(self, i) -> FrameRecord:
        return FrameRecord(int(self.subject[i]), int(self.view[i]), int(self.frame[i]),
                           self.pose[i], self.obs[i])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.subject, other.subject) and np.array_equal(self.view, other.view)
                and np.array_equal(self.frame, other.frame) and np.array_equal(self.pose, other.pose)
                and np.array_equal(self.obs, other.obs)
                and _subjects_equal(self.subjects, other.subjects)
                and self.cameras == other.cameras and self.skeleton_meta == other.skeleton_meta)

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Dataset(self.subject[idx], self.view[idx], self.frame[idx], self.pose[idx],
                       self.obs[idx], self.subjects, self.cameras, self.skeleton_meta)

    @property
    def subject_ids(self) -> list[int]:
        return sorted(set(self.subject.tolist()))

    @property
    def view_ids(self) -> list[int]:
        return sorted(set(self.view.tolist()))

    def frames_of(self, subject_id) -> np.ndarray:
        return np.unique(self.frame[self.subject == subject_id])

    def validate(self):
        lh = self.skeleton_meta.get("lh_index", geo.LEFT_HIP)
        if lh != geo.LEFT_HIP:
            raise ValidationError(f"unsupported left-hip index {lh}")
        if np.any(self.pose[:, geo.ROOT] != 0.0):
            i = int(np.argmax(np.any(self.pose[:, geo.ROOT] != 0.0, axis=1)))
            raise ValidationError(f"record {i}: pose is not root-relative")
        if self.cameras and len(self) and self.view.max() >= len(self.cameras):
            raise ValidationError("record view id outside the camera list")
        if self.subjects and len(self):
            known = {s["id"] for s in self.subjects}
            missing = set(self.subject.tolist()) - known
            if missing:
                raise ValidationError(f"records reference unknown subjects {sorted(missing)}")
        # frame indices strictly increasing per (subject, view)
        for s in self.subject_ids:
            for v in set(self.view[self.subject == s].tolist()):
                f = self.frame[(self.subject == s) & (self.view == v)]
                if np.any(np.diff(f) <= 0):
                    raise ValidationError(f"frames of subject {s}, view {v} are not strictly increasing")
        # time synchronisation: every view of (subject, frame) carries the same pose
        order = np.lexsort((self.view, self.frame, self.subject))
        s, f, p = self.subject[order], self.frame[order], self.pose[order]
        same = (s[1:] == s[:-1]) & (f[1:] == f[:-1])
        diff = np.any(p[1:] != p[:-1], axis=(1, 2))
        bad = np.flatnonzero(same & diff)
        if bad.size:
            k = bad[0] + 1
            raise ValidationError(
                f"views of subject {int(s[k])} frame {int(f[k])} disagree on pose_global")


def _subjects_equal(a, b):
    if len(a) != len(b):
        return False
    return all(x["id"] == y["id"] and np.array_equal(x["bone_scales"], y["bone_scales"])
               for x, y in zip(a, b))


# -- generation ---------------------------------------------------------------

def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _bounded_walk(rng, n, lo, hi, step, reversion, n_steps):
    """Mean-reverting random walks, reflected into [lo, hi]. Shape (n_steps, n)."""
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (n,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (n,))
    mid = 0.5 * (lo + hi)
    x = rng.uniform(lo, hi)
    out = np.empty((n_steps, n))
    noise = rng.standard_normal((n_steps, n)) * step
    for t in range(n_steps):
        out[t] = x
        x = x + noise[t] - reversion * (x - mid)
        x = np.where(x > hi, 2 * hi - x, x)
        x = np.where(x < lo, 2 * lo - x, x)
        x = np.clip(x, lo, hi)
    return out


def forward_kinematics(local_rot, root_rot, bone_scales):
    """Root-relative joint positions from per-joint local rotations.

    ``local_rot``: (T, 16, 3, 3); ``root_rot``: (T, 3, 3); ``bone_scales``: (16,).
    """
    T = local_rot.shape[0]
    offsets = REST_OFFSETS * bone_scales[:, None]
    glob = np.empty((T, geo.N_JOINTS, 3, 3))
    pos = np.zeros((T, geo.N_JOINTS, 3))
    glob[:, 0] = root_rot @ local_rot[:, 0]
    for j in range(1, geo.N_JOINTS):
        par = geo.PARENTS[j]
        pos[:, j] = pos[:, par] + glob[:, par] @ offsets[j]
        glob[:, j] = glob[:, par] @ local_rot[:, j]
    return pos


def _subject_motion(cfg: GenConfig, rng, n_steps):
    local = np.broadcast_to(np.eye(3), (n_steps, geo.N_JOINTS, 3, 3)).copy()
    r = cfg.limb_range
    limb = _bounded_walk(rng, 3 * len(LIMB_JOINTS), np.tile([-r, -r, -0.5 * r], len(LIMB_JOINTS)),
                         np.tile([r, r, 0.5 * r], len(LIMB_JOINTS)), cfg.angle_step, cfg.reversion, n_steps)
    torso = _bounded_walk(rng, 3 * len(TORSO_JOINTS), -cfg.torso_range, cfg.torso_range,
                          cfg.angle_step, cfg.reversion, n_steps)
    hinge = _bounded_walk(rng, len(HINGE_JOINTS), 0.0, cfg.hinge_max, cfg.angle_step,
                          cfg.reversion, n_steps)
    angles = np.concatenate([limb, torso], axis=1)
    for k, j in enumerate(LIMB_JOINTS + TORSO_JOINTS):
        a = angles[:, 3 * k:3 * k + 3]
        local[:, j] = _rz(a[:, 2]) @ _ry(a[:, 1]) @ _rx(a[:, 0])
    for k, (j, sign) in enumerate(HINGE_JOINTS.items()):
        local[:, j] = _ry(sign * hinge[:, k])
    tilt = _bounded_walk(rng, 2, -cfg.root_tilt, cfg.root_tilt, 0.5 * cfg.angle_step, cfg.reversion, n_steps)
    yaw = rng.uniform(0, 2 * np.pi) + np.cumsum(rng.standard_normal(n_steps) * cfg.yaw_step)
    root = _rz(yaw) @ _ry(tilt[:, 1]) @ _rx(tilt[:, 0])
    return local, root


def generate(config: GenConfig, seed: int) -> Dataset:
    config.validate()
    rng = np.random.default_rng(seed)
    cameras = config.cameras()
    n_steps = config.n_frames * config.stride
    subjects, cols = [], {"subject": [], "view": [], "frame": [], "pose": [], "obs": []}
    V = config.n_views
    for sid in range(1, config.n_subjects + 1):
        scales = rng.uniform(0.9, 1.1, size=geo.N_JOINTS)
        scales[0] = 1.0
        subjects.append({"id": sid, "bone_scales": scales})
        local, root = _subject_motion(config, rng, n_steps)
        poses = forward_kinematics(local, root, scales)[::config.stride]
        poses[:, geo.ROOT] = 0.0
        frames = np.arange(n_steps)[::config.stride]
        T = len(frames)
        obs = np.empty((T, V, 2 * geo.N_JOINTS))
        for v, cam in enumerate(cameras):
            obs[:, v] = geo.project_batch(poses, cam)
            if config.noise_sigma > 0:
                obs[:, v] += config.noise_sigma * rng.standard_normal((T, 2 * geo.N_JOINTS))
        cols["subject"].append(np.full(T * V, sid))
        cols["view"].append(np.tile(np.arange(V), T))
        cols["frame"].append(np.repeat(frames, V))
        cols["pose"].append(np.repeat(poses, V, axis=0))
        cols["obs"].append(obs.reshape(T * V, -1))
    ds = Dataset(*(np.concatenate(cols[k]) for k in ("subject", "view", "frame", "pose", "obs")),
                 subjects=subjects, cameras=cameras)
    return ds


# -- NDJSON I/O ---------------------------------------------------------------

def _num_list(values) -> str:
    return "[" + ",".join(format(float(x), ".17g") for x in values) + "]"


def dataset_lines(ds: Dataset) -> Iterator[str]:
    header = {
        "version": FORMAT_VERSION,
        "skeleton": ds.skeleton_meta,
        "cameras": [c.to_dict() for c in ds.cameras],
        "subjects": [{"id": s["id"], "bone_scales": [float(x) for x in s["bone_scales"]]}
                     for s in ds.subjects],
    }
    yield json.dumps(header)
    for i in range(len(ds)):
        yield (f'{{"subject":{int(ds.subject[i])},"view":{int(ds.view[i])},"frame":{int(ds.frame[i])},'
               f'"pose":{_num_list(ds.pose[i].ravel())},"obs":{_num_list(ds.obs[i])}}}')


def write_dataset(ds: Dataset, path):
    d = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            for line in dataset_lines(ds):
                f.write(line)
                f.write("\n")
        os.replace(tmp, path)
    except OSError as e:
        raise DataIOError(f"cannot write dataset {path}: {e}") from e


def _parse_camera(d, lineno):
    try:
        return geo.Camera(float(d["azimuth"]), float(d["elevation"]), float(d["distance"]),
                          d.get("mode", "perspective"),
                          None if d.get("focal") is None else float(d["focal"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad camera entry: {e}", lineno) from e


def _numbers(rec, key, n, lineno):
    vals = rec.get(key)
    if not isinstance(vals, list) or len(vals) != n:
        got = len(vals) if isinstance(vals, list) else type(vals).__name__
        raise ParseError(f'"{key}" must be an array of {n} numbers, got {got}', lineno)
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in vals):
        raise ParseError(f'"{key}" contains non-numeric values', lineno)
    arr = np.array(vals, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f'"{key}" contains non-finite values', lineno)
    return arr


def read_dataset(path) -> Dataset:
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot read dataset {path}: {e}") from e
    with f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise ParseError(f"header is not valid JSON: {e.msg}", 1) from e
        if not isinstance(header, dict) or header.get("version") != FORMAT_VERSION:
            raise ParseError("unsupported or missing format version", 1)
        skeleton = header.get("skeleton") or default_skeleton_meta()
        if len(skeleton.get("parents", [])) != geo.N_JOINTS:
            raise ParseError(f"skeleton must describe {geo.N_JOINTS} joints", 1)
        cameras = [_parse_camera(c, 1) for c in header.get("cameras", [])]
        subjects = []
        for s in header.get("subjects", []):
            try:
                subjects.append({"id": int(s["id"]), "bone_scales": np.array(s["bone_scales"], dtype=np.float64)})
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"bad subject entry: {e}", 1) from e
        cols = {"subject": [], "view": [], "frame": [], "pose": [], "obs": []}
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", lineno) from e
            if not isinstance(rec, dict):
                raise ParseError("record must be a JSON object", lineno)
            for key in ("subject", "view", "frame"):
                if not isinstance(rec.get(key), int) or isinstance(rec.get(key), bool):
                    raise ParseError(f'"{key}" must be an integer', lineno)
                cols[key].append(rec[key])
            pose = _numbers(rec, "pose", 3 * geo.N_JOINTS, lineno)
            cols["pose"].append(pose.reshape(geo.N_JOINTS, 3))
            cols["obs"].append(_numbers(rec, "obs", 2 * geo.N_JOINTS, lineno))
    n = len(cols["subject"])
    ds = Dataset(cols["subject"], cols["view"], cols["frame"],
                 np.array(cols["pose"]).reshape(n, geo.N_JOINTS, 3),
                 np.array(cols["obs"]).reshape(n, 2 * geo.N_JOINTS),
                 subjects, cameras, skeleton)
    ds.validate()
    return ds


# -- splits -------------------------------------------------------------------

def split_supervision(ds: Dataset, fraction: float, subjects_supervised=None, seed: int = 0):
    """Pick labelled (subject, frame) units; returns ``(labeled, unlabeled)`` datasets.

    Frames of each supervised subject are thinned with a uniform stride whose
    phase is drawn from ``seed``. All views of a chosen frame are labelled.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"supervision fraction {fraction} outside [0, 1]")
    rng = np.random.default_rng(seed)
    pool = ds.subject_ids if subjects_supervised is None else sorted(subjects_supervised)
    labeled = np.zeros(len(ds), dtype=bool)
    for sid in pool:
        frames = ds.frames_of(sid)
        n = len(frames)
        if n == 0 or fraction == 0.0:
            continue
        keep = math.ceil(fraction * n)
        step = n / keep
        phase = rng.uniform(0.0, step) if keep < n else 0.0
        picks = np.minimum(np.floor(phase + step * np.arange(keep)).astype(np.int64), n - 1)
        labeled |= (ds.subject == sid) & np.isin(ds.frame, frames[picks])
    if fraction > 0 and not labeled.any():
        raise ConfigError("supervision selection is empty")
    return ds.subset(labeled), ds.subset(~labeled)


def holdout_split(ds: Dataset, val_fraction: float):
    """Hold out the last ``val_fraction`` of each subject's frames. Returns ``(train, val)``."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"validation fraction {val_fraction} outside [0, 1)")
    val = np.zeros(len(ds), dtype=bool)
    if val_fraction > 0:
        for sid in ds.subject_ids:
            frames = ds.frames_of(sid)
            n_val = math.ceil(val_fraction * len(frames))
            if n_val:
                val |= (ds.subject == sid) & (ds.frame >= frames[len(frames) - n_val])
    return ds.subset(~val), ds.subset(val)


def view_table(ds: Dataset, subject_id: int):
    """``(frames, idx)`` for one subject: sorted frame indices and an
    ``(n_frames, n_views)`` matrix of record indices (-1 where a view is missing)."""
    cache = ds.__dict__.setdefault("_view_tables", {})
    if subject_id not in cache:
        sel = np.flatnonzero(ds.subject == subject_id)
        frames = np.unique(ds.frame[sel])
        n_views = int(ds.view.max()) + 1 if len(ds) else 0
        idx = np.full((len(frames), n_views), -1, dtype=np.int64)
        idx[np.searchsorted(frames, ds.frame[sel]), ds.view[sel]] = sel
        cache[subject_id] = (frames, idx)
    return cache[subject_id]
