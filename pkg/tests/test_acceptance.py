"""Acceptance criteria 1-8.

Each test records one PASS/FAIL line, printed in the terminal summary.
Criteria 4-6 share one ablation suite run on the profile in
``configs/acceptance.cfg``; set ``SEMIMAP_ACCEPTANCE_DIR`` to keep (and
reuse) its outputs between sessions.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from semimap import analysis as an
from semimap import autodiff as ad
from semimap import config as cf
from semimap import datapipe as dp
from semimap import nets
from semimap import objectives as ob
from semimap import trainer as tr
from semimap.optim import lr_at
from semimap.toyhand import generate_dataset

from fd import numeric_grad, rel_error

PROFILE = Path(__file__).resolve().parents[1] / "configs" / "acceptance.cfg"
SUITE_BUDGET_S = 45 * 60
N_GRID = (10, 100, dp.ALL)
SEEDS = 3

pytestmark = pytest.mark.acceptance


def record(acceptance_log, k, ok, detail):
    acceptance_log.append((k, bool(ok), detail))
    return ok


# --------------------------------------------------------------------------
# 1. gradient suite


def _loss_builders():
    def composite(x, y):
        parts = ob.LossParts(
            l_p=ob.pose_loss(x, y),
            l_c=ob.correspondence_loss(x, y, detach_target=False),
            l_g=ob.view_loss(x, y),
            l_m=ob.mapper_adversarial_loss(ad.reshape(x, (x.shape[0] * x.shape[1], 1))),
        )
        return ob.composite_loss(parts, ob.LossWeights(), scale=64 / 48)

    return {
        "pose": ob.pose_loss,
        "correspondence": lambda x, y: ob.correspondence_loss(x, y, detach_target=False),
        "view": ob.view_loss,
        "discriminator": ob.discriminator_loss,
        "mapper": lambda x, y: ad.add(ob.mapper_adversarial_loss(x), ad.scalar_mul(ad.sum_(y), 0.0)),
        "composite": composite,
    }


def test_criterion_1_gradient_suite(f64, acceptance_log):
    t0 = time.perf_counter()
    builders = _loss_builders()
    rng = np.random.default_rng(2024)
    worst, trials = 0.0, 0
    for trial in range(20):
        for name, build in builders.items():
            shape = (int(rng.integers(1, 5)), int(rng.integers(1, 7)))
            if name in ("discriminator", "mapper"):
                shape = (shape[0], 1)
            a, b = rng.normal(size=shape), rng.normal(size=shape)
            ta, tb = ad.tensor(a.copy(), requires_grad=True), ad.tensor(b.copy(), requires_grad=True)
            with ad.Tape() as tape:
                tape.backward(build(ta, tb))
            num = numeric_grad(lambda x, y: float(build(ad.constant(x), ad.constant(y)).data.reshape(-1)[0]), [a, b])
            for got, want in zip((ta.grad, tb.grad), num):
                worst = max(worst, rel_error(got, want))
            trials += 1
    seconds = time.perf_counter() - t0
    ok = worst < 1e-4 and trials >= 100 and seconds < 120
    record(acceptance_log, 1, ok, f"{trials} trials, worst rel err {worst:.2e}, {seconds:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 2. schedule oracle


def test_criterion_2_schedule_oracle(acceptance_log):
    import math

    t0 = time.perf_counter()

    def oracle(e):
        eta = 0.33 ** (2 - math.floor(e / 2)) if e < 4 else math.exp(-0.04 * e)
        return 3.3e-4 * eta

    mismatches = [e for e in range(51) if lr_at(e) != oracle(e)]
    jump = (lr_at(3) / 3.3e-4, lr_at(4) / 3.3e-4)
    seconds = time.perf_counter() - t0
    ok = not mismatches and jump[0] == pytest.approx(0.33) and jump[1] == pytest.approx(math.exp(-0.16)) and seconds < 1
    record(acceptance_log, 2, ok, f"mismatches {mismatches}, eta(3)={jump[0]:.4f}, eta(4)={jump[1]:.4f}")
    assert ok


# --------------------------------------------------------------------------
# 3. batch composition and label guard


def test_criterion_3_batch_composition(tiny_data, acceptance_log):
    t0 = time.perf_counter()
    bad = 0
    reads = {}
    for n in (10, 20):
        ds = dp.Dataset.load(tiny_data, n)
        rng = np.random.default_rng(n)
        for _ in range(5000):
            b = dp.compose_batch(ds, rng, 64)
            bad += b.sizes() != (16, 16, 16, 16)
            ds.labels(np.concatenate([b.corresponding, b.real]), "real")
        reads[n] = ds.guard.distinct
    seconds = time.perf_counter() - t0
    ok = bad == 0 and all(v <= n for n, v in reads.items()) and seconds < 60
    record(acceptance_log, 3, ok, f"10000 batches, {bad} malformed, distinct label reads {reads}, {seconds:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 4-6. ablation suite on the desk profile


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    root = os.environ.get("SEMIMAP_ACCEPTANCE_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    base = cf.resolve(PROFILE, {"data": str(root / "toy.mrds")}, environ={})
    if not (root / "toy.mrds").exists():
        generate_dataset(root / "toy.mrds", base.gen())
    suite_dir = root / "suite"
    cached = suite_dir / "ablation.csv"
    if cached.exists() and (root / "profile.cfg").exists() and (root / "profile.cfg").read_text() == base.to_text():
        results = _read_suite(cached)
        seconds = float((root / "suite_seconds").read_text())
    else:
        t0 = time.perf_counter()
        results = tr.run_ablation_suite(base, N_GRID, SEEDS, suite_dir)
        seconds = time.perf_counter() - t0
        (root / "suite_seconds").write_text(f"{seconds:.3f}\n")
        (root / "profile.cfg").write_text(base.to_text())
    return base, suite_dir, results, seconds


def _read_suite(path):
    import csv

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(tr.RunResult(row["variant"], cf.parse_n_labeled(row["n_labeled"]), int(row["seed"]), float(row["real_test_me_mm"]), row["checkpoint"], float(row["seconds"])))
    return out


def test_criterion_4_ablation_ordering(suite, acceptance_log):
    base, _, results, seconds = suite
    med = tr.suite_medians(results)
    checks = {}
    for n in (10, 100):
        full, vp, dm, bl = (med[(v, n)] for v in ("full", "view-pred", "distr-match", "baseline"))
        checks[f"n={n} full<view-pred"] = full < vp
        checks[f"n={n} full<distr-match"] = full < dm
        checks[f"n={n} view-pred<baseline"] = vp < bl
        checks[f"n={n} distr-match<baseline"] = dm < bl
    gap10 = med[("baseline", 10)] - med[("full", 10)]
    gap_all = med[("baseline", dp.ALL)] - med[("full", dp.ALL)]
    checks["gap n=10 > gap n=all"] = gap10 > gap_all
    checks["within 45 min"] = seconds <= SUITE_BUDGET_S
    table = "; ".join(
        f"{v}: " + "/".join(f"{med[(v, n)]:.3f}" for n in N_GRID) for v in ("baseline", "view-pred", "distr-match", "full")
    )
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    record(acceptance_log, 4, ok, f"medians mm (n=10/100/all) {table}; suite {seconds / 60:.1f} min; failed: {failed or 'none'}")
    assert ok, failed


def _median_distance(base, checkpoints, ds, ids):
    vals = []
    for path in checkpoints:
        model = nets.Model(base.arch(ds.resolution, ds.joints))
        model.load_entries(nets.load_checkpoint(path))
        vals.append(an.latent_distance_distribution(model, ds, ids).median)
    return float(np.median(vals)), vals


def test_criterion_5_latent_alignment(suite, acceptance_log):
    base, suite_dir, results, _ = suite
    t0 = time.perf_counter()
    ad.set_precision(base.precision)
    ds = dp.Dataset.load(base.data)
    by = {(r.variant, r.n_labeled, r.seed): r.checkpoint for r in results}
    seeds = sorted({r.seed for r in results})
    medians = {}
    for v in ("full", "baseline"):
        medians[v], _ = _median_distance(base, [by[(v, 100, s)] for s in seeds], ds, ds.validation_ids(seed=base.seed))
    seconds = time.perf_counter() - t0
    ok = medians["full"] < medians["baseline"] and seconds < 60
    record(acceptance_log, 5, ok, f"median pair distance n=100: full {medians['full']:.4f}, baseline {medians['baseline']:.4f}; {seconds:.1f}s")
    assert ok


def test_criterion_6_synthetic_only_worst(suite, acceptance_log):
    base, suite_dir, results, _ = suite
    ad.set_precision(base.precision)
    ds = dp.Dataset.load(base.data)
    seeds = sorted({r.seed for r in results})
    synth = []
    for s in seeds:
        t = tr.Trainer(base.replace(variant="synth-only", seed=s), ds)
        t.load(suite_dir / f"pretrain_seed{s}" / "pretrain.ckpt")
        synth.append(t.evaluate().mean_error)
    med = tr.suite_medians(results)
    synth_med = float(np.median(synth))
    baseline = med[("baseline", dp.ALL)]
    corrupted = base.gen_noise_mm > 0 or base.gen_dropout > 0 or base.gen_erosion > 0
    ok = corrupted and synth_med > baseline
    record(acceptance_log, 6, ok, f"real-test ME synth-only {synth_med:.3f} mm vs real+synth baseline (n=all) {baseline:.3f} mm")
    assert ok


# --------------------------------------------------------------------------
# 7. determinism


def test_criterion_7_determinism(tmp_path, acceptance_log):
    t0 = time.perf_counter()
    base = cf.resolve(PROFILE, {"data": str(tmp_path / "d.mrds"), "gen_count": 300, "pretrain_iters": 60, "joint_iters": 60}, environ={})
    generate_dataset(base.data, base.gen())
    cfg = base.replace(variant="full", n_labeled=10, seed=11)
    tr.run(cfg, tmp_path / "a")
    tr.run(cfg, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.suffix in (".ckpt", ".csv"))
    differ = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    seconds = time.perf_counter() - t0
    ok = not differ and "final.ckpt" in names and seconds < 600
    record(acceptance_log, 7, ok, f"compared {len(names)} files, differing {differ or 'none'}, {seconds:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 8. round-trip fidelity


def test_criterion_8_round_trip(tmp_path, acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    failures = 0
    for i in range(100):
        res = int(rng.choice([16, 32]))
        joints, views, count = int(rng.integers(1, 10)), int(rng.integers(2, 4)), int(rng.integers(1, 8))
        recs = np.zeros(count, dtype=dp.record_dtype(res, joints, views))
        recs["id"] = rng.permutation(count)
        recs["split"] = rng.integers(0, 2, count)
        recs["rank"] = rng.integers(0, count, count)
        recs["pose"] = rng.normal(size=recs["pose"].shape) * 30
        recs["synth"] = rng.uniform(-1, 1, size=recs["synth"].shape)
        recs["real"] = rng.uniform(-1, 1, size=recs["real"].shape)
        a, b = tmp_path / "a.mrds", tmp_path / "b.mrds"
        dp.write_container(a, recs)
        dp.write_container(b, dp.read_container(a)[1])
        failures += a.read_bytes() != b.read_bytes()

        entries = [
            (str(rng.choice(list(nets.NETWORKS))), f"layer{k}", rng.normal(size=tuple(rng.integers(1, 5, size=int(rng.integers(0, 4))))))
            for k in range(int(rng.integers(1, 6)))
        ]
        ca, cb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nets.save_checkpoint(ca, entries)
        nets.save_checkpoint(cb, nets.load_checkpoint(ca))
        failures += ca.read_bytes() != cb.read_bytes()
    seconds = time.perf_counter() - t0
    ok = failures == 0 and seconds < 60
    record(acceptance_log, 8, ok, f"100 container + 100 checkpoint instances, {failures} mismatches, {seconds:.1f}s")
    assert ok
