"""Two-phase training: synthetic pretraining of f and p, then joint training
of every network with the adversarial step interleaved 1:1.

Batch draws are derived from ``(seed, phase, iteration)`` alone, so a run
resumed from a checkpoint follows the same trajectory as an uninterrupted
one.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .analysis import fmt, mean_joint_error, predict_poses, write_csv
from .autodiff import Tape, Tensor
from .config import ABLATION_VARIANTS, RunConfig
from .datapipe import AugmentParams, Dataset, augment, compose_batch, warp_pose
from .nets import REAL, SYNTH, Model, load_checkpoint, save_checkpoint
from .objectives import (
    LossParts,
    LossWeights,
    batch_scale,
    composite_loss,
    correspondence_loss,
    discriminator_loss,
    mapper_adversarial_loss,
    pose_loss,
    view_loss,
)
from .optim import Adam, NonFiniteError, lr_at

METRIC_COLUMNS = ("iter", "l_p", "l_c", "l_g", "l_m", "l_h", "total")
PRETRAIN, JOINT = 1, 2
PHASE_NAMES = {PRETRAIN: "pretrain", JOINT: "joint"}


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class VariantMask:
    pretrain: bool
    joint: bool
    synthetic: bool     # synthetic samples take part in the joint phase
    unlabeled: bool     # U set drawn
    l_c: bool
    l_g: bool
    adversarial: bool   # l_m in the generator step plus the discriminator step


VARIANT_MASKS = {
    "baseline": VariantMask(True, True, True, False, True, False, False),
    "view-pred": VariantMask(True, True, True, True, True, True, False),
    "distr-match": VariantMask(True, True, True, True, True, False, True),
    "full": VariantMask(True, True, True, True, True, True, True),
    "real-only": VariantMask(False, True, False, False, False, False, False),
    "synth-only": VariantMask(True, False, True, False, False, False, False),
}


def effective_weights(cfg: RunConfig) -> LossWeights:
    mask = VARIANT_MASKS[cfg.variant]
    w = cfg.weights()
    return LossWeights(
        w.lambda_c if mask.l_c else 0.0,
        w.lambda_g if mask.l_g else 0.0,
        w.lambda_m if mask.adversarial else 0.0,
    )


def content_hash(path) -> str:
    """Git blob hash of a file's bytes."""
    data = Path(path).read_bytes()
    h = hashlib.sha1(f"blob {len(data)}\0".encode())
    h.update(data)
    return h.hexdigest()


def params_digest(params) -> str:
    h = hashlib.sha256()
    for t in params:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


@dataclass
class RunResult:
    variant: str
    n_labeled: int
    seed: int
    real_test_me: float
    checkpoint: str | None
    seconds: float


class Trainer:
    """Owns the model, the three optimisers and the per-iteration logic."""

    def __init__(self, cfg: RunConfig, dataset: Dataset | None = None):
        ad.set_precision(cfg.precision)
        self.cfg = cfg
        self.mask = VARIANT_MASKS[cfg.variant]
        self.ds = dataset if dataset is not None else Dataset.load(cfg.data, cfg.n_labeled)
        self.ds.set_labeled(cfg.n_labeled)
        self.model = Model(cfg.arch(self.ds.resolution, self.ds.joints), seed=cfg.seed)
        self.weights = effective_weights(cfg)
        self.ocfg = cfg.optim()
        self.scale = batch_scale(cfg.batch)
        self.mm_per_pixel = cfg.gen_footprint_mm / self.ds.resolution
        self.cube = cfg.gen_cube_mm
        self.ipe = self.ds.iterations_per_epoch(cfg.batch)
        m = self.model
        gen_nets = [m.f, m.m, m.g] + ([] if cfg.freeze_pose else [m.p])
        self.opt_pre = Adam(self._named(m.f, m.p), self.ocfg)
        self.opt_gen = Adam(self._named(*gen_nets), self.ocfg)
        self.opt_disc = Adam(self._named(m.h), self.ocfg)
        self.phase = PRETRAIN
        self.iteration = 0
        self.metrics: dict[int, list] = {PRETRAIN: [], JOINT: []}
        self.check_isolation = False

    @staticmethod
    def _named(*nets) -> dict:
        return {t.name: t for net in nets for t in net.params.values()}

    def _all_params(self):
        return [t for net in self.model.nets.values() for t in net.params.values()]

    def _zero_grads(self) -> None:
        for t in self._all_params():
            t.grad = None

    # -- data ----------------------------------------------------------------
    def _rng(self, phase: int, it: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, phase, it])

    def _draw_aug(self, rng, n: int):
        c = self.cfg
        if not c.augment:
            return [None] * n
        return [AugmentParams.draw(rng, c.aug_max_angle, c.aug_offset_mm, c.aug_noise_mm) for _ in range(n)]

    def _inputs(self, ids, domain: str, augs) -> Tensor:
        x = self.ds.images(ids, domain, 0)
        for k, a in enumerate(augs):
            if a is not None:
                x[k] = augment(x[k], a, self.mm_per_pixel, self.cube)[0]
        return ad.constant(x[..., None])

    def _targets(self, ids, domain: str, augs) -> Tensor:
        y = self.ds.labels(ids, domain)
        for k, a in enumerate(augs):
            if a is not None:
                y[k] = warp_pose(y[k], a.angle_deg, a.offset_mm)
        return ad.constant(y.reshape(len(ids), -1) / self.cube)

    def _second_views(self, ids, domain: str) -> np.ndarray:
        return self.ds.images(ids, domain, 1)[..., None]

    # -- steps -----------------------------------------------------------------
    def _check_loss(self, value: Tensor, what: str) -> None:
        if not np.all(np.isfinite(value.data)):
            raise NonFiniteError(what)

    def pretrain_step(self, it: int) -> dict:
        rng = self._rng(PRETRAIN, it)
        ids = rng.choice(self.ds.train_ids, size=self.cfg.batch, replace=len(self.ds.train_ids) < self.cfg.batch)
        augs = self._draw_aug(rng, len(ids))
        x = self._inputs(ids, SYNTH, augs)
        y = self._targets(ids, SYNTH, augs)
        m = self.model
        self._zero_grads()
        with Tape() as tape:
            l_p = pose_loss(m.p(m.latent(x, SYNTH)), y)
            total = ad.scalar_mul(l_p, self.scale) if self.scale != 1.0 else l_p
            self._check_loss(total, "pretrain loss")
            tape.backward(total)
        self.opt_pre.step(lr_at(it // self.ipe, self.ocfg))
        return dict(l_p=l_p.item(), total=total.item())

    def joint_step(self, it: int) -> dict:
        cfg, mask, m = self.cfg, self.mask, self.model
        rng = self._rng(JOINT, it)
        comp = compose_batch(self.ds, rng, cfg.batch, use_unlabeled=mask.unlabeled)
        k = len(comp.corresponding)
        aug_c = self._draw_aug(rng, k)
        aug_r = self._draw_aug(rng, k)
        aug_s = self._draw_aug(rng, k)
        aug_u = self._draw_aug(rng, len(comp.unlabeled))
        real_ids = np.concatenate([comp.corresponding, comp.real, comp.unlabeled])
        x_real = self._inputs(real_ids, REAL, aug_c + aug_r + aug_u)
        y_real = self._targets(real_ids[: 2 * k], REAL, aug_c + aug_r)
        if mask.synthetic:
            synth_ids = np.concatenate([comp.corresponding, comp.synthetic])
            x_synth = self._inputs(synth_ids, SYNTH, aug_c + aug_s)
            y_synth = self._targets(synth_ids, SYNTH, aug_c + aug_s)
        lr = lr_at(it // self.ipe, self.ocfg)
        w = self.weights
        parts = LossParts()
        self._zero_grads()
        with Tape() as tape:
            f_real = m.f(x_real)
            z_real = m.m(f_real)
            if m.tracer is not None:
                m.tracer.log(REAL, ("f", "m"))
            z_synth = m.latent(x_synth, SYNTH) if mask.synthetic else None

            if mask.adversarial:
                parts.l_h = self._discriminator_step(z_real, z_synth, lr)

            parts.l_p = pose_loss(m.p(ad.slice_rows(z_real, 0, 2 * k)), y_real)
            if mask.synthetic:
                parts.l_p = ad.add(parts.l_p, pose_loss(m.p(z_synth), y_synth))
            if w.lambda_c > 0:
                parts.l_c = correspondence_loss(ad.slice_rows(z_real, 0, k), ad.slice_rows(z_synth, 0, k), cfg.detach_correspondence)
            if w.lambda_g > 0:
                zs = [z_real] + ([z_synth] if mask.synthetic else [])
                target = [self._second_views(real_ids, REAL)]
                if mask.synthetic:
                    target.append(self._second_views(synth_ids, SYNTH))
                parts.l_g = view_loss(m.g(ad.concat(zs)), np.concatenate(target))
            if w.lambda_m > 0:
                z_adv = m.m(ad.constant(f_real.data)) if cfg.adversarial_mapper_only else z_real
                parts.l_m = mapper_adversarial_loss(m.h(z_adv))
            total = composite_loss(parts, w, self.scale)
            self._check_loss(total, "joint loss")
            h_before = params_digest(m.h.params.values()) if self.check_isolation else None
            tape.backward(total)
        self.opt_gen.step(lr)
        if self.check_isolation and params_digest(m.h.params.values()) != h_before:
            raise AssertionError("generator step changed discriminator parameters")
        out = parts.values()
        out["total"] = total.item()
        return out

    def _discriminator_step(self, z_real: Tensor, z_synth: Tensor, lr: float) -> Tensor:
        m = self.model
        others = [t for n, net in m.nets.items() if n != "h" for t in net.params.values()]
        before = params_digest(others) if self.check_isolation else None
        with Tape() as dtape:
            l_h = discriminator_loss(m.h(ad.constant(z_real.data)), m.h(ad.constant(z_synth.data)))
            l_h_scaled = ad.scalar_mul(l_h, self.scale) if self.scale != 1.0 else l_h
            self._check_loss(l_h_scaled, "discriminator loss")
            dtape.backward(l_h_scaled)
        self.opt_disc.step(lr)
        for t in m.h.params.values():
            t.grad = None
        if self.check_isolation and params_digest(others) != before:
            raise AssertionError("discriminator step changed non-discriminator parameters")
        return ad.constant(l_h.data)

    # -- loops -----------------------------------------------------------------
    def _run_phase(self, phase: int, iters: int, step, ckpt_dir=None) -> None:
        if self.phase != phase:
            self.phase, self.iteration = phase, 0
        rows = self.metrics[phase]
        while self.iteration < iters:
            it = self.iteration
            try:
                vals = step(it)
            except NonFiniteError as e:
                path = None
                if ckpt_dir is not None:
                    path = Path(ckpt_dir) / f"{PHASE_NAMES[phase]}_last_finite.ckpt"
                    self.save(path)
                raise DivergenceError(f"{PHASE_NAMES[phase]} iteration {it}: {e}", path) from e
            self.iteration = it + 1
            if self.cfg.log_every and it % self.cfg.log_every == 0:
                rows.append([it] + [vals.get(c, 0.0) for c in METRIC_COLUMNS[1:]])
            every = self.cfg.checkpoint_every
            if ckpt_dir is not None and every and self.iteration % every == 0 and self.iteration < iters:
                self.save(Path(ckpt_dir) / f"{PHASE_NAMES[phase]}_{self.iteration:07d}.ckpt")

    def pretrain(self, ckpt_dir=None) -> None:
        self.model.train()
        self._run_phase(PRETRAIN, self.cfg.pretrain_iters, self.pretrain_step, ckpt_dir)

    def train_joint(self, ckpt_dir=None) -> None:
        self.model.train()
        self._run_phase(JOINT, self.cfg.joint_iters, self.joint_step, ckpt_dir)

    # -- persistence -----------------------------------------------------------
    def state_entries(self):
        yield from self.model.state_entries()
        yield from self.opt_pre.state_entries("opt.pre")
        yield from self.opt_gen.state_entries("opt.gen")
        yield from self.opt_disc.state_entries("opt.disc")
        yield "run", "phase", np.array([self.phase, self.iteration], dtype=np.float64)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_entries())

    def load(self, path) -> None:
        entries = load_checkpoint(path)
        self.model.load_entries(entries)
        groups = {"opt.pre": [], "opt.gen": [], "opt.disc": []}
        for n, layer, arr in entries:
            if n in groups:
                groups[n].append((n, layer, arr))
            elif n == "run" and layer == "phase":
                self.phase, self.iteration = int(arr[0]), int(arr[1])
        self.opt_pre.load_entries(groups["opt.pre"])
        self.opt_gen.load_entries(groups["opt.gen"])
        self.opt_disc.load_entries(groups["opt.disc"])

    def load_pretrained(self, path) -> None:
        """Take f and p from a pretraining checkpoint; optimiser state starts fresh."""
        entries = [e for e in load_checkpoint(path) if e[0] in ("f", "p")]
        if not entries:
            raise ValueError(f"{path} holds no encoder or pose-head weights")
        self.model.load_entries(entries)
        self.phase, self.iteration = JOINT, 0

    def write_metrics(self, path, phase: int) -> None:
        write_csv(path, METRIC_COLUMNS, self.metrics[phase])

    # -- evaluation ------------------------------------------------------------
    def evaluate(self, ids=None, domain: str = REAL):
        ids = self.ds.test_ids if ids is None else ids
        pred = predict_poses(self.model, self.ds.images(ids, domain), domain, self.cube)
        return mean_joint_error(pred, self.ds.eval_poses(ids))

    def synthetic_validation_error(self, ids=None) -> float:
        return self.evaluate(ids, SYNTH).mean_error


# --------------------------------------------------------------------------
# run orchestration


def write_manifest(path, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = {"config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}}
    if os.path.exists(cfg.data):
        doc["dataset_hash"] = content_hash(cfg.data)
    doc.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> tuple[RunConfig, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    vals = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc["config"].items()}
    return RunConfig(**vals), doc


def run_pretrain(cfg: RunConfig, out_dir, dataset: Dataset | None = None) -> Trainer:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = Trainer(cfg, dataset)
    tr.pretrain(out)
    tr.save(out / "pretrain.ckpt")
    tr.write_metrics(out / "pretrain_metrics.csv", PRETRAIN)
    write_manifest(out / "pretrain_manifest.json", cfg, {"phase": "pretrain", "iterations": tr.iteration})
    return tr


def run(cfg: RunConfig, out_dir, pretrained=None, dataset: Dataset | None = None) -> RunResult:
    """Complete run for ``cfg.variant``; reuses ``pretrained`` when given."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mask = VARIANT_MASKS[cfg.variant]
    tr = Trainer(cfg, dataset)
    if mask.pretrain:
        if pretrained is None:
            tr.pretrain(out)
            tr.save(out / "pretrain.ckpt")
            tr.write_metrics(out / "pretrain_metrics.csv", PRETRAIN)
            pretrained = out / "pretrain.ckpt"
        tr.load_pretrained(pretrained)
    if mask.joint:
        tr.train_joint(out)
        tr.write_metrics(out / "metrics.csv", JOINT)
    final = out / "final.ckpt"
    tr.save(final)
    report = tr.evaluate()
    report.write(out / "eval.csv")
    seconds = time.perf_counter() - t0
    write_manifest(
        out / "manifest.json",
        cfg,
        {
            "variant": cfg.variant,
            "n_labeled": tr.ds.n_labeled,
            "label_reads_distinct": tr.ds.guard.distinct,
            "real_test_me_mm": fmt(report.mean_error),
            "pretrained_from": None if pretrained is None else str(pretrained),
        },
    )
    return RunResult(cfg.variant, cfg.n_labeled, cfg.seed, report.mean_error, str(final), seconds)


# --------------------------------------------------------------------------
# ablation suite

SUITE_COLUMNS = ("variant", "n_labeled", "seed", "real_test_me_mm", "seconds", "checkpoint")


def _n_label(n: int) -> str:
    return "all" if n < 0 else str(n)


def _cell(args) -> RunResult:
    cfg, out_dir, pretrained = args
    return run(cfg, out_dir, pretrained)


def run_ablation_suite(base: RunConfig, n_grid, seeds: int, out_dir, variants=ABLATION_VARIANTS, workers: int = 1, progress=None) -> list[RunResult]:
    """Every (variant, n, seed) cell; pretraining is shared per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = Dataset.load(base.data)
    n_train = len(ds.train_ids)
    for n in n_grid:
        if n > n_train:
            raise ValueError(f"n-labeled {n} exceeds the {n_train} train samples")
    seed_list = [base.seed + s for s in range(seeds)]
    pre = {}
    for s in seed_list:
        cfg = base.replace(seed=s, variant="synth-only")
        path = out / f"pretrain_seed{s}"
        run_pretrain(cfg, path, ds)
        pre[s] = path / "pretrain.ckpt"
        if progress:
            progress(f"pretrain seed {s} done")
    jobs = []
    for v in variants:
        for n in n_grid:
            for s in seed_list:
                cfg = base.replace(variant=v, n_labeled=n, seed=s)
                cell = out / f"{v}_n{_n_label(n)}_seed{s}"
                jobs.append((cfg, cell, pre[s] if VARIANT_MASKS[v].pretrain else None))
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for r in ex.map(_cell, jobs):
                results.append(r)
                if progress:
                    progress(f"{r.variant} n={_n_label(r.n_labeled)} seed={r.seed}: {r.real_test_me:.3f} mm")
    else:
        for job in jobs:
            r = _cell((job[0], job[1], job[2]))
            results.append(r)
            if progress:
                progress(f"{r.variant} n={_n_label(r.n_labeled)} seed={r.seed}: {r.real_test_me:.3f} mm")
    write_suite(out / "ablation.csv", results)
    return results


def write_suite(path, results) -> None:
    rows = [(r.variant, _n_label(r.n_labeled), r.seed, r.real_test_me, r.seconds, r.checkpoint) for r in results]
    write_csv(path, SUITE_COLUMNS, rows)


def suite_medians(results) -> dict:
    """Median ME over seeds keyed by (variant, n)."""
    groups: dict = {}
    for r in results:
        groups.setdefault((r.variant, r.n_labeled), []).append(r.real_test_me)
    return {k: float(np.median(v)) for k, v in groups.items()}
