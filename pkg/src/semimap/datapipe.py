"""Dataset container, preprocessing, augmentation and four-set batches.

Container layout (all integers unsigned 32-bit little-endian, floats
32-bit little-endian, arrays row-major)::

    header  magic "MRDS" | version | count | resolution | joints | views | domain flags
    record  id | split | label rank | pose[J][3] | synthetic[V][H][W] | real[V][H][W]

``split`` is 0 for train, 1 for test.  ``label rank`` is the position of
the id in a seeded shuffle of its split, fixed at creation; a run with
``n`` labeled samples treats train ids of rank < n as labeled.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .toyhand import BACKGROUND

MAGIC = b"MRDS"
VERSION = 1
HEADER = struct.Struct("<4s6I")
FLAG_SYNTH, FLAG_REAL = 1, 2
TRAIN, TEST = 0, 1
ALL = -1


class ContainerError(ValueError):
    pass


class DataError(ValueError):
    pass


class LabelAccessError(RuntimeError):
    pass


def record_dtype(resolution: int, joints: int, views: int) -> np.dtype:
    img = (views, resolution, resolution)
    return np.dtype(
        [
            ("id", "<u4"),
            ("split", "<u4"),
            ("rank", "<u4"),
            ("pose", "<f4", (joints, 3)),
            ("synth", "<f4", img),
            ("real", "<f4", img),
        ]
    )


def encode_container(records: np.ndarray, flags: int = FLAG_SYNTH | FLAG_REAL) -> bytes:
    joints = records.dtype["pose"].shape[0]
    views, res, _ = records.dtype["synth"].shape
    head = HEADER.pack(MAGIC, VERSION, len(records), res, joints, views, flags)
    return head + records.tobytes()


def decode_container(blob: bytes) -> tuple[dict, np.ndarray]:
    if len(blob) < HEADER.size:
        raise ContainerError("file shorter than header")
    magic, version, count, res, joints, views, flags = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    dt = record_dtype(res, joints, views)
    payload = len(blob) - HEADER.size
    if payload != count * dt.itemsize:
        raise ContainerError(f"header declares {count} records, payload holds {payload / dt.itemsize:g}")
    recs = np.frombuffer(blob, dtype=dt, count=count, offset=HEADER.size)
    header = dict(version=version, count=count, resolution=res, joints=joints, views=views, flags=flags)
    return header, recs


def write_container(path, records: np.ndarray, flags: int = FLAG_SYNTH | FLAG_REAL) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_container(records, flags))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


# --------------------------------------------------------------------------


class LabelGuard:
    """Counts pose reads per correspondence id and blocks unlabeled ones."""

    def __init__(self, labeled_ids):
        self.labeled = frozenset(int(i) for i in labeled_ids)
        self.read_ids: set[int] = set()
        self.reads = 0

    def check(self, ids) -> None:
        ids = [int(i) for i in np.atleast_1d(ids)]
        bad = [i for i in ids if i not in self.labeled]
        if bad:
            raise LabelAccessError(f"pose label read on unlabeled id(s) {bad[:5]}")
        self.read_ids.update(ids)
        self.reads += len(ids)

    @property
    def distinct(self) -> int:
        return len(self.read_ids)


class Dataset:
    """Read-only view over a container with a per-run labeled subset.

    Training code reads poses only through :meth:`labels`, which consults
    the guard.  :meth:`eval_poses` is the analysis-time bypass and refuses
    train-split ids.
    """

    def __init__(self, header: dict, records: np.ndarray, n_labeled: int = ALL):
        self.header = header
        self.records = records
        self.resolution = header["resolution"]
        self.joints = header["joints"]
        self.views = header["views"]
        split = records["split"]
        self.train_idx = np.flatnonzero(split == TRAIN)
        self.test_idx = np.flatnonzero(split == TEST)
        self._row = {int(i): r for r, i in enumerate(records["id"])}
        self.set_labeled(n_labeled)

    @classmethod
    def load(cls, path, n_labeled: int = ALL) -> "Dataset":
        return cls(*read_container(path), n_labeled=n_labeled)

    def set_labeled(self, n_labeled: int) -> None:
        ranks = self.records["rank"][self.train_idx]
        ids = self.records["id"][self.train_idx]
        n_train = len(self.train_idx)
        if n_labeled == ALL or n_labeled >= n_train:
            n_labeled = n_train
        if n_labeled < 0:
            raise DataError(f"n_labeled must be >= 0, got {n_labeled}")
        self.n_labeled = n_labeled
        order = np.argsort(ranks, kind="stable")
        self.labeled_ids = ids[order[:n_labeled]].astype(np.int64)
        self.unlabeled_ids = ids[order[n_labeled:]].astype(np.int64)
        self.train_ids = ids.astype(np.int64)
        self.test_ids = self.records["id"][self.test_idx].astype(np.int64)
        self.guard = LabelGuard(self.labeled_ids)
        # synthetic labels are always available
        self.synth_guard = LabelGuard(self.train_ids)

    def rows(self, ids) -> np.ndarray:
        return np.array([self._row[int(i)] for i in np.atleast_1d(ids)], dtype=np.int64)

    def images(self, ids, domain: str, view: int = 0) -> np.ndarray:
        field = "real" if domain == "real" else "synth"
        return self.records[field][self.rows(ids), view].astype(np.float64)

    def labels(self, ids, domain: str) -> np.ndarray:
        """Pose labels for training; real-domain reads go through the guard."""
        if domain == "real":
            self.guard.check(ids)
        else:
            self.synth_guard.check(ids)
        return self.records["pose"][self.rows(ids)].astype(np.float64)

    def eval_poses(self, ids) -> np.ndarray:
        rows = self.rows(ids)
        if (self.records["split"][rows] == TRAIN).any():
            raise LabelAccessError("eval_poses is restricted to the test split")
        return self.records["pose"][rows].astype(np.float64)

    def iterations_per_epoch(self, batch: int) -> int:
        return math.ceil(len(self.train_idx) / batch)

    def validation_ids(self, fraction: float = 0.25, seed: int = 0) -> np.ndarray:
        """Seeded fixed subset of test ids used for latent analyses."""
        rng = np.random.default_rng(seed)
        k = max(1, int(round(fraction * len(self.test_ids))))
        return np.sort(rng.choice(self.test_ids, size=k, replace=False))


# --------------------------------------------------------------------------
# preprocessing


def preprocess(raw: np.ndarray, hand_uv, hand_depth: float, crop_px: int, resolution: int, depth_range: float, background: float = 0.0) -> np.ndarray:
    """Square crop around ``hand_uv`` (col, row), resize, normalise to [-1, 1].

    ``raw`` is a depth map in mm where ``background`` marks missing
    measurements.
    """
    raw = np.asarray(raw, dtype=np.float64)
    u, v = hand_uv
    h, w = raw.shape
    if not (0 <= u < w and 0 <= v < h):
        raise DataError(f"hand location {hand_uv} outside the {w}x{h} frame")
    half = crop_px / 2
    r0, c0 = int(round(v - half)), int(round(u - half))
    pad = np.full((crop_px, crop_px), background)
    rs, re_ = max(r0, 0), min(r0 + crop_px, h)
    cs, ce = max(c0, 0), min(c0 + crop_px, w)
    pad[rs - r0 : re_ - r0, cs - c0 : ce - c0] = raw[rs:re_, cs:ce]
    fg = pad != background
    if not fg.any():
        raise DataError("empty crop: no foreground around the hand location")
    zoom = resolution / crop_px
    if zoom != 1:
        filled = np.where(fg, pad, hand_depth)
        fg = ndimage.zoom(fg.astype(np.float64), zoom, order=0) > 0.5
        pad = ndimage.zoom(filled, zoom, order=1)
    out = np.clip((pad - hand_depth) / depth_range, -1.0, 1.0)
    return np.where(fg, out, BACKGROUND)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    """One draw of online augmentation parameters."""

    angle_deg: float = 0.0
    offset_mm: tuple = (0.0, 0.0)
    noise_seed: int = 0
    noise_mm: float = 0.0

    @staticmethod
    def draw(rng: np.random.Generator, max_angle: float = 60.0, offset_sigma: float = 5.0, noise_sigma: float = 5.0) -> "AugmentParams":
        return AugmentParams(
            angle_deg=float(rng.uniform(-max_angle, max_angle)),
            offset_mm=tuple(float(x) for x in rng.normal(0.0, offset_sigma, size=2)),
            noise_seed=int(rng.integers(2**32)),
            noise_mm=noise_sigma,
        )


def _warp_matrix(angle_deg: float, offset_px) -> tuple[np.ndarray, np.ndarray]:
    """Label-space map p' = R p - t in (x, y); returns it and its inverse."""
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return rot, np.asarray(offset_px, dtype=np.float64)


def warp_image(img: np.ndarray, angle_deg: float, offset_px=(0.0, 0.0)) -> np.ndarray:
    """Rotate content about the image centre by ``angle_deg`` and shift by ``-offset``.

    Smooth regions are bilinearly resampled; the silhouette follows
    nearest-neighbour sampling so background never bleeds into depth.
    """
    img = np.asarray(img, dtype=np.float64)
    if angle_deg == 0 and not np.any(offset_px):
        return img.copy()
    rot, off = _warp_matrix(angle_deg, offset_px)
    c = (img.shape[0] - 1) / 2.0
    # output p' samples input R^-1 (p' + t); arrays index (row=y, col=x)
    inv = rot.T
    m_rc = inv[::-1, ::-1]
    center = np.array([c, c])
    offset_rc = center - m_rc @ center + (inv @ off)[::-1]
    fg = img < BACKGROUND
    fill = np.where(fg, img, np.median(img[fg]) if fg.any() else BACKGROUND)
    vals = ndimage.affine_transform(fill, m_rc, offset=offset_rc, order=1, mode="nearest")
    mask = ndimage.affine_transform(fg.astype(np.float64), m_rc, offset=offset_rc, order=0, mode="constant", cval=0.0) > 0.5
    return np.where(mask, vals, BACKGROUND)


def warp_pose(pose_mm: np.ndarray, angle_deg: float, offset_mm=(0.0, 0.0)) -> np.ndarray:
    rot, off = _warp_matrix(angle_deg, offset_mm)
    out = np.array(pose_mm, dtype=np.float64, copy=True)
    out[:, :2] = out[:, :2] @ rot.T - off
    return out


def augment(image: np.ndarray, params: AugmentParams, mm_per_pixel: float, depth_range: float, pose_mm: np.ndarray | None = None):
    """Apply one augmentation draw to an input view (and its label, if readable).

    Returns ``(image, pose)``; ``pose`` is None when none was given.
    """
    off_px = np.asarray(params.offset_mm) / mm_per_pixel
    out = warp_image(image, params.angle_deg, off_px)
    if params.noise_mm > 0:
        rng = np.random.default_rng(params.noise_seed)
        fg = out < BACKGROUND
        noise = rng.normal(0.0, params.noise_mm / depth_range, size=out.shape)
        out = np.where(fg, np.clip(out + noise, -1.0, 1.0), BACKGROUND)
    pose = None if pose_mm is None else warp_pose(pose_mm, params.angle_deg, params.offset_mm)
    return out, pose


# --------------------------------------------------------------------------
# four-set batches


@dataclass
class BatchComposition:
    corresponding: np.ndarray   # C: labeled real + synthetic pairs
    real: np.ndarray            # R: labeled real
    synthetic: np.ndarray       # S: labeled synthetic
    unlabeled: np.ndarray       # U: unlabeled real

    def sizes(self) -> tuple:
        return tuple(len(s) for s in (self.corresponding, self.real, self.synthetic, self.unlabeled))


def _draw(pool: np.ndarray, k: int, rng: np.random.Generator, name: str) -> np.ndarray:
    if len(pool) == 0:
        raise DataError(f"insufficient pool for set {name}: empty")
    replace = len(pool) < k
    return rng.choice(pool, size=k, replace=replace)


def compose_batch(dataset: Dataset, rng: np.random.Generator, batch: int = 64, use_unlabeled: bool = True) -> BatchComposition:
    """Independently draw the four equal-size sets of one mini-batch.

    Pools smaller than the set size are drawn with replacement.  When every
    train id is labeled, the unlabeled role is filled from all real train ids
    (their labels are simply not read).
    """
    if batch % 4:
        raise DataError(f"batch {batch} is not divisible by 4")
    k = batch // 4
    labeled = dataset.labeled_ids
    c = _draw(labeled, k, rng, "C")
    r = _draw(labeled, k, rng, "R")
    s = _draw(dataset.train_ids, k, rng, "S")
    if use_unlabeled:
        upool = dataset.unlabeled_ids if len(dataset.unlabeled_ids) else dataset.train_ids
        u = _draw(upool, k, rng, "U")
    else:
        u = np.zeros(0, dtype=np.int64)
    return BatchComposition(c, r, s, u)
