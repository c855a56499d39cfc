"""Procedural "toy hand": an articulated capsule chain rendered orthographically.

The synthetic domain is the clean render.  The "real" domain is the same
render passed through :func:`corrupt`, so both domains share poses exactly
and correspondences come for free.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels

BACKGROUND = 1.0


class AngleRangeError(ValueError):
    pass


class FootprintError(ValueError):
    pass


def rot_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def rot_euler(rx: float, ry: float, rz: float) -> np.ndarray:
    """Extrinsic x, then y, then z."""
    return rot_axis((0, 0, 1), rz) @ rot_axis((0, 1, 0), ry) @ rot_axis((1, 0, 0), rx)


@dataclass
class KinematicChain:
    """Palm sphere plus ``F`` fingers of ``S`` capsule segments each.

    Segment ``s`` of finger ``f`` points along the finger's base direction
    (``spread`` about z) rotated by the cumulative flexion angles about the
    finger's ``axes`` row.
    """

    lengths: np.ndarray                 # (F, S) mm
    angles: np.ndarray                  # (F, S) rad
    spread: np.ndarray                  # (F,) rad about z
    axes: np.ndarray                    # (F, 3) local flexion axis
    limits: np.ndarray                  # (F, S, 2) rad
    base: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 4.5
    palm_radius: float = 9.0

    def __post_init__(self):
        self.lengths = np.atleast_2d(np.asarray(self.lengths, dtype=np.float64))
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(self.lengths.shape)
        self.spread = np.asarray(self.spread, dtype=np.float64).reshape(self.lengths.shape[0])
        self.axes = np.asarray(self.axes, dtype=np.float64).reshape(self.lengths.shape[0], 3)
        self.limits = np.asarray(self.limits, dtype=np.float64).reshape(self.lengths.shape + (2,))
        self.base = np.asarray(self.base, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(3)

    @property
    def n_joints(self) -> int:
        return 1 + self.lengths.size

    @classmethod
    def straight(cls, lengths, axis=(0, 0, 1), spread=None, limits=(-np.pi, np.pi), **kw) -> "KinematicChain":
        lengths = np.atleast_2d(np.asarray(lengths, dtype=np.float64))
        f, s = lengths.shape
        return cls(
            lengths=lengths,
            angles=np.zeros((f, s)),
            spread=np.zeros(f) if spread is None else spread,
            axes=np.tile(np.asarray(axis, dtype=np.float64), (f, 1)),
            limits=np.broadcast_to(np.asarray(limits, dtype=np.float64), (f, s, 2)).copy(),
            **kw,
        )


def forward_kinematics(chain: KinematicChain) -> np.ndarray:
    """Joint positions (J, 3) in mm: palm first, then each finger's segment ends."""
    lo, hi = chain.limits[..., 0], chain.limits[..., 1]
    bad = (chain.angles < lo - 1e-12) | (chain.angles > hi + 1e-12)
    if bad.any():
        f, s = np.argwhere(bad)[0]
        raise AngleRangeError(
            f"finger {f} segment {s}: angle {chain.angles[f, s]:.4f} outside [{lo[f, s]:.4f}, {hi[f, s]:.4f}]"
        )
    glob = rot_euler(*chain.orientation)
    joints = [chain.base.copy()]
    for f in range(chain.lengths.shape[0]):
        frame = glob @ rot_axis((0, 0, 1), chain.spread[f])
        pos = chain.base.copy()
        for s in range(chain.lengths.shape[1]):
            frame = frame @ rot_axis(chain.axes[f], chain.angles[f, s])
            pos = pos + frame @ np.array([chain.lengths[f, s], 0.0, 0.0])
            joints.append(pos)
    return np.stack(joints)


def chain_capsules(chain: KinematicChain, joints: np.ndarray | None = None) -> np.ndarray:
    """Capsule rows (ax, ay, az, bx, by, bz, r) for palm and segments."""
    if joints is None:
        joints = forward_kinematics(chain)
    caps = [np.r_[joints[0], joints[0], chain.palm_radius]]
    s = chain.lengths.shape[1]
    for f in range(chain.lengths.shape[0]):
        prev = joints[0]
        for k in range(s):
            cur = joints[1 + f * s + k]
            caps.append(np.r_[prev, cur, chain.radius])
            prev = cur
    return np.stack(caps)


@dataclass
class CameraView:
    """Rigid world-to-camera transform plus orthographic pixel pitch."""

    index: int
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mm_per_pixel: float = 2.5

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if abs(abs(np.linalg.det(self.rotation)) - 1.0) > 1e-9:
            raise ValueError(f"view {self.index}: rotation is not orthonormal")

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation


def default_views(n: int = 2, separation_deg: float = 60.0, mm_per_pixel: float = 2.5) -> list[CameraView]:
    if n < 2:
        raise ValueError("at least two views are required")
    return [
        CameraView(i, rot_axis((0, 1, 0), np.deg2rad(separation_deg * i)), mm_per_pixel=mm_per_pixel)
        for i in range(n)
    ]


def normalize_depth(depth_mm: np.ndarray, center: float, depth_range: float, background=np.inf) -> np.ndarray:
    """Affine map to [-1, 1] around ``center``; background pixels become +1."""
    out = np.clip((depth_mm - center) / depth_range, -1.0, 1.0)
    return np.where(depth_mm >= background, BACKGROUND, out)


def pixel_centers(resolution: int, mm_per_pixel: float) -> np.ndarray:
    return (np.arange(resolution) + 0.5 - resolution / 2) * mm_per_pixel


def render_capsules(caps: np.ndarray, resolution: int, mm_per_pixel: float, center=(0.0, 0.0, 0.0), depth_range: float = 50.0) -> np.ndarray:
    """Rasterise camera-frame capsules into a normalised crop centred on ``center``."""
    caps = np.asarray(caps, dtype=np.float64).reshape(-1, 7)
    if resolution < 16 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 16, got {resolution}")
    cx, cy, cz = center
    half = resolution * mm_per_pixel / 2
    if len(caps):
        lo = np.minimum(caps[:, [0, 1]], caps[:, [3, 4]]) - caps[:, [6, 6]]
        hi = np.maximum(caps[:, [0, 1]], caps[:, [3, 4]]) + caps[:, [6, 6]]
        if (lo < [cx - half, cy - half]).any() or (hi > [cx + half, cy + half]).any():
            raise FootprintError(f"geometry exceeds the {2 * half:.1f} mm camera footprint")
    xs = pixel_centers(resolution, mm_per_pixel) + cx
    ys = pixel_centers(resolution, mm_per_pixel) + cy
    depth = kernels.raster_capsules(xs, ys, caps, np.inf)
    return normalize_depth(depth, cz, depth_range)


def hand_center(joints: np.ndarray) -> np.ndarray:
    """Crop centre used for every view: the joint centroid."""
    return np.asarray(joints).mean(axis=0)


def render_depth(chain: KinematicChain, view: CameraView, resolution: int = 32, depth_range: float = 50.0) -> np.ndarray:
    """Render ``chain`` in ``view``, cropped around the joint centroid."""
    joints = forward_kinematics(chain)
    caps = chain_capsules(chain, joints)
    cam = caps.copy()
    cam[:, 0:3] = view.to_camera(caps[:, 0:3])
    cam[:, 3:6] = view.to_camera(caps[:, 3:6])
    center = view.to_camera(hand_center(joints))
    return render_capsules(cam, resolution, view.mm_per_pixel, center, depth_range)


# --------------------------------------------------------------------------
# domain gap


@dataclass(frozen=True)
class CorruptionParams:
    noise_mm: float = 0.0
    quant_mm: float = 0.0
    dropout: float = 0.0
    erosion: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_mm", "quant_mm", "dropout", "erosion", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dropout > 0.5:
            raise ValueError(f"dropout probability {self.dropout} exceeds 0.5")


def corrupt(img: np.ndarray, params: CorruptionParams, sample_seed, depth_range: float = 50.0) -> np.ndarray:
    """Sensor-style degradation of a normalised depth image.

    Quantise, add Gaussian noise, drop pixels to background, erode the
    silhouette outline, clamp.  Deterministic in ``(params.seed, sample_seed)``.
    """
    img = np.asarray(img, dtype=np.float64)
    fg = img < BACKGROUND
    out = img.copy()
    rng = np.random.default_rng([params.seed] + list(np.atleast_1d(sample_seed)))
    if params.quant_mm > 0:
        step = params.quant_mm / depth_range
        out = np.where(fg, np.round(out / step) * step, out)
    if params.noise_mm > 0:
        noise = rng.normal(0.0, params.noise_mm / depth_range, size=img.shape)
        out = np.where(fg, out + noise, out)
    keep = rng.random(img.shape) >= params.dropout if params.dropout > 0 else True
    if params.erosion > 0:
        # erode the object outline only; dropout holes are not widened
        fg = ndimage.binary_erosion(fg, structure=np.ones((3, 3), bool), iterations=params.erosion)
    fg = fg & keep
    out = np.where(fg, out, BACKGROUND)
    return np.clip(out, -1.0, 1.0)


# --------------------------------------------------------------------------
# pose sampling


@dataclass
class SamplerConfig:
    fingers: int = 3
    segments: int = 2
    lengths: tuple = (14.0, 11.0)
    spread_deg: tuple = (-35.0, 0.0, 35.0)
    flex_limits: tuple = (-0.3, 1.4)
    orientation_deg: tuple = (30.0, 30.0, 60.0)
    radius: float = 4.5
    palm_radius: float = 9.0

    @property
    def n_joints(self) -> int:
        return 1 + self.fingers * self.segments


def sample_chain(cfg: SamplerConfig, rng: np.random.Generator) -> KinematicChain:
    """Uniform draw over flexion limits and global-orientation box."""
    f, s = cfg.fingers, cfg.segments
    lo, hi = cfg.flex_limits
    lengths = np.tile(np.asarray(cfg.lengths, dtype=np.float64)[:s], (f, 1))
    spread = np.deg2rad(np.asarray(cfg.spread_deg, dtype=np.float64)[:f])
    orient = rng.uniform(-1.0, 1.0, size=3) * np.deg2rad(cfg.orientation_deg)
    angles = rng.uniform(lo, hi, size=(f, s))
    return KinematicChain(
        lengths=lengths,
        angles=angles,
        spread=spread,
        axes=np.tile([0.0, 1.0, 0.0], (f, 1)),
        limits=np.broadcast_to([lo, hi], (f, s, 2)).copy(),
        orientation=orient,
        radius=cfg.radius,
        palm_radius=cfg.palm_radius,
    )


# --------------------------------------------------------------------------
# dataset generation


@dataclass
class GenConfig:
    count: int = 2000
    train_fraction: float = 0.8
    resolution: int = 32
    views: int = 2
    separation_deg: float = 60.0
    footprint_mm: float = 64.0
    cube_mm: float = 32.0
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    corruption: CorruptionParams = field(default_factory=lambda: CorruptionParams(noise_mm=3.0, quant_mm=4.0, dropout=0.15, erosion=0))

    @property
    def mm_per_pixel(self) -> float:
        return self.footprint_mm / self.resolution

    def split_counts(self) -> tuple[int, int]:
        n_train = int(round(self.train_fraction * self.count))
        return n_train, self.count - n_train


def generate_sample(sample_id: int, cfg: GenConfig, views: list[CameraView] | None = None, max_tries: int = 100):
    """Pose (J, 3) in view-0 camera mm relative to the crop centre, plus both domains' views."""
    views = views or default_views(cfg.views, cfg.separation_deg, cfg.mm_per_pixel)
    rng = np.random.default_rng([cfg.seed, sample_id])
    for _ in range(max_tries):
        chain = sample_chain(cfg.sampler, rng)
        try:
            synth = np.stack([render_depth(chain, v, cfg.resolution, cfg.cube_mm) for v in views])
        except FootprintError:
            continue
        break
    else:
        raise FootprintError(f"sample {sample_id}: no pose fitting the footprint in {max_tries} draws")
    joints = forward_kinematics(chain)
    cam0 = views[0].to_camera(joints)
    pose = cam0 - views[0].to_camera(hand_center(joints))
    real = np.stack([corrupt(img, cfg.corruption, (cfg.seed, sample_id, v), cfg.cube_mm) for v, img in enumerate(synth)])
    return pose, synth, real


def generate_records(cfg: GenConfig) -> np.ndarray:
    from .datapipe import TEST, TRAIN, record_dtype

    if cfg.count < 10:
        raise ValueError(f"count must be >= 10, got {cfg.count}")
    if not 0.0 < cfg.train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {cfg.train_fraction}")
    n_train, n_test = cfg.split_counts()
    views = default_views(cfg.views, cfg.separation_deg, cfg.mm_per_pixel)
    recs = np.zeros(cfg.count, dtype=record_dtype(cfg.resolution, cfg.sampler.n_joints, cfg.views))
    shuffle = np.random.default_rng([cfg.seed, 0x5EED])
    rank = np.empty(cfg.count, dtype=np.int64)
    rank[:n_train] = shuffle.permutation(n_train)
    rank[n_train:] = shuffle.permutation(n_test)
    for i in range(cfg.count):
        pose, synth, real = generate_sample(i, cfg, views)
        rec = recs[i]
        rec["id"] = i
        rec["split"] = TRAIN if i < n_train else TEST
        rec["rank"] = rank[i]
        rec["pose"] = pose
        rec["synth"] = synth
        rec["real"] = real
    return recs


def generate_dataset(path, cfg: GenConfig) -> dict:
    """Render ``cfg.count`` samples and write them as one container file."""
    from .datapipe import write_container

    recs = generate_records(cfg)
    write_container(path, recs)
    n_train, n_test = cfg.split_counts()
    return dict(count=cfg.count, train=n_train, test=n_test, resolution=cfg.resolution, joints=cfg.sampler.n_joints, views=cfg.views)
