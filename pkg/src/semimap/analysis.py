"""Evaluation metrics and latent-space analyses.

Every CSV written here uses 9 significant digits for floats.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import REAL, SYNTH, Model

FLOAT_FMT = ".9g"
HIST_BINS = 50


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), FLOAT_FMT)
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# --------------------------------------------------------------------------
# batched inference


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield s, min(n, s + size)


def _as_input(images: np.ndarray) -> ad.Tensor:
    return ad.constant(np.asarray(images)[..., None])


def latents(model: Model, images: np.ndarray, domain: str, batch: int = 256) -> np.ndarray:
    """Shared-space codes of ``images`` (N, H, W) in evaluation mode."""
    was = model.f.training
    model.eval()
    try:
        out = [model.latent(_as_input(images[a:b]), domain).data for a, b in _batches(len(images), batch)]
    finally:
        model.train(was)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, model.cfg.latent))


def predict_poses(model: Model, images: np.ndarray, domain: str, scale_mm: float, batch: int = 256) -> np.ndarray:
    """Joint positions in mm, shape (N, J, 3)."""
    z = latents(model, images, domain, batch)
    was = model.p.training
    model.eval()
    try:
        y = np.concatenate([model.p(ad.constant(z[a:b])).data for a, b in _batches(len(z), batch)])
    finally:
        model.train(was)
    return y.astype(np.float64).reshape(len(z), -1, 3) * scale_mm


def predict_views(model: Model, images: np.ndarray, domain: str, batch: int = 256) -> np.ndarray:
    z = latents(model, images, domain, batch)
    model.eval()
    try:
        v = np.concatenate([model.g(ad.constant(z[a:b])).data for a, b in _batches(len(z), batch)])
    finally:
        model.train()
    return v[..., 0].astype(np.float64)


# --------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    mean_error: float
    per_joint: np.ndarray
    per_frame_max: np.ndarray
    per_frame_mean: np.ndarray

    @property
    def frames(self) -> int:
        return len(self.per_frame_max)

    def rows(self):
        yield ("mean", "all", self.mean_error)
        for j, e in enumerate(self.per_joint):
            yield ("joint", j, float(e))
        for i, (mu, mx) in enumerate(zip(self.per_frame_mean, self.per_frame_max)):
            yield ("frame_mean", i, float(mu))
            yield ("frame_max", i, float(mx))

    def write(self, path) -> None:
        write_csv(path, ("kind", "index", "error_mm"), self.rows())


def mean_joint_error(pred, truth, joints=None) -> EvalReport:
    """Mean Euclidean joint error over frames and (optionally selected) joints."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[2] != 3:
        raise ValueError(f"pose arrays must both be (N, J, 3), got {pred.shape} and {truth.shape}")
    if joints is not None:
        pred, truth = pred[:, joints], truth[:, joints]
    d = np.linalg.norm(pred - truth, axis=2)
    return EvalReport(float(d.mean()), d.mean(axis=0), d.max(axis=1), d.mean(axis=1))


def view_prediction_mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"view shapes differ: {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean())


# --------------------------------------------------------------------------
# latent analyses


@dataclass
class DistanceDistribution:
    ids: np.ndarray
    distances: np.ndarray
    edges: np.ndarray
    counts: np.ndarray

    @property
    def median(self) -> float:
        return float(np.median(self.distances))

    def write(self, path) -> None:
        rows = [("pair", int(i), float(d)) for i, d in zip(self.ids, self.distances)]
        rows += [("bin", f"{self.edges[k]:.9g}:{self.edges[k + 1]:.9g}", int(c)) for k, c in enumerate(self.counts)]
        rows.append(("median", "", self.median))
        write_csv(path, ("kind", "key", "value"), rows)


def histogram(distances, upper: float | None = None, bins: int = HIST_BINS):
    """Uniform bins on [0, upper]; ``upper`` defaults to the 99th percentile.

    Pass a shared ``upper`` to compare several distributions on one axis.
    Values above ``upper`` are not counted.
    """
    d = np.asarray(distances, dtype=np.float64)
    if upper is None:
        upper = float(np.percentile(d, 99)) if len(d) else 1.0
    upper = upper if upper > 0 else 1.0
    counts, edges = np.histogram(d, bins=bins, range=(0.0, upper))
    return edges, counts


def pair_distances(model: Model, real_images: np.ndarray, synth_images: np.ndarray) -> np.ndarray:
    """||m(f(real)) - f(synth)|| for each corresponding pair."""
    zr = latents(model, real_images, REAL)
    zs = latents(model, synth_images, SYNTH)
    return np.linalg.norm(zr - zs, axis=1)


def latent_distance_distribution(model: Model, dataset, ids, upper: float | None = None) -> DistanceDistribution:
    ids = np.asarray(ids)
    d = pair_distances(model, dataset.images(ids, REAL), dataset.images(ids, SYNTH))
    edges, counts = histogram(d, upper)
    return DistanceDistribution(ids, d, edges, counts)


def pooled_upper(*dists) -> float:
    """Common histogram support: 99th percentile of all distances pooled."""
    return float(np.percentile(np.concatenate([np.asarray(d) for d in dists]), 99))


def rebin(dist: DistanceDistribution, upper: float) -> DistanceDistribution:
    edges, counts = histogram(dist.distances, upper)
    return DistanceDistribution(dist.ids, dist.distances, edges, counts)


def export_embeddings(model: Model, dataset, ids, path=None):
    """Rows ``(id, domain, pair index, latent..., pose...)``, two per pair.

    Poses are read through the evaluation path, so only test ids are
    accepted.
    """
    ids = np.asarray(ids)
    poses = dataset.eval_poses(ids).reshape(len(ids), -1)
    zr = latents(model, dataset.images(ids, REAL), REAL)
    zs = latents(model, dataset.images(ids, SYNTH), SYNTH)
    d = zr.shape[1]
    header = ["id", "domain", "index"] + [f"z{k}" for k in range(d)] + [f"y{k}" for k in range(poses.shape[1])]
    rows = []
    for k, i in enumerate(ids):
        rows.append([int(i), REAL, k, *zr[k], *poses[k]])
        rows.append([int(i), SYNTH, k, *zs[k], *poses[k]])
    if path is not None:
        write_csv(path, header, rows)
    return header, rows


def centered(poses) -> np.ndarray:
    p = np.asarray(poses, dtype=np.float64)
    return p - p.mean(axis=-2, keepdims=True)


def pose_distance_matrix(a, b) -> np.ndarray:
    """Average joint distance between origin-shifted poses, (len(a), len(b))."""
    a, b = centered(a), centered(b)
    diff = a[:, None] - b[None]
    return np.linalg.norm(diff, axis=3).mean(axis=2)


@dataclass
class NeighbourReport:
    test_ids: np.ndarray       # worst-k test frames, worst first
    test_errors: np.ndarray
    neighbour_ids: np.ndarray  # (k, n_neighbours), nearest first
    distances: np.ndarray

    def rows(self):
        for t, e, nbrs, ds in zip(self.test_ids, self.test_errors, self.neighbour_ids, self.distances):
            for rank, (n, d) in enumerate(zip(nbrs, ds)):
                yield int(t), float(e), rank, int(n), float(d)

    def write(self, path) -> None:
        write_csv(path, ("test_id", "test_error_mm", "rank", "train_id", "pose_distance_mm"), self.rows())


def nn_error_analysis(test_ids, test_errors, test_poses, train_ids, train_poses, worst: int = 10, neighbours: int = 5) -> NeighbourReport:
    """Nearest train poses of the worst test frames (ties broken by train order)."""
    test_errors = np.asarray(test_errors, dtype=np.float64)
    order = np.argsort(-test_errors, kind="stable")[:worst]
    dist = pose_distance_matrix(np.asarray(test_poses)[order], train_poses)
    k = min(neighbours, dist.shape[1])
    nn = np.argsort(dist, axis=1, kind="stable")[:, :k]
    train_ids = np.asarray(train_ids)
    return NeighbourReport(
        np.asarray(test_ids)[order],
        test_errors[order],
        train_ids[nn],
        np.take_along_axis(dist, nn, axis=1),
    )
