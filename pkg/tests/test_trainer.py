import json

import numpy as np
import pytest

from semimap import trainer as tr
from semimap.datapipe import Dataset
from semimap.trainer import VARIANT_MASKS, Trainer


def test_variant_truth_table():
    cols = ("pretrain", "joint", "synthetic", "unlabeled", "l_c", "l_g", "adversarial")
    table = {
        "baseline": (1, 1, 1, 0, 1, 0, 0),
        "view-pred": (1, 1, 1, 1, 1, 1, 0),
        "distr-match": (1, 1, 1, 1, 1, 0, 1),
        "full": (1, 1, 1, 1, 1, 1, 1),
        "real-only": (0, 1, 0, 0, 0, 0, 0),
        "synth-only": (1, 0, 1, 0, 0, 0, 0),
    }
    assert set(VARIANT_MASKS) == set(table)
    for name, row in table.items():
        assert tuple(int(getattr(VARIANT_MASKS[name], c)) for c in cols) == row, name


def test_effective_weights(tiny_cfg):
    w = tr.effective_weights(tiny_cfg.replace(variant="baseline"))
    assert (w.lambda_c, w.lambda_g, w.lambda_m) == (tiny_cfg.lambda_c, 0.0, 0.0)
    w = tr.effective_weights(tiny_cfg.replace(variant="full"))
    assert (w.lambda_c, w.lambda_g, w.lambda_m) == (tiny_cfg.lambda_c, tiny_cfg.lambda_g, tiny_cfg.lambda_m)
    w = tr.effective_weights(tiny_cfg.replace(variant="real-only"))
    assert (w.lambda_c, w.lambda_g, w.lambda_m) == (0.0, 0.0, 0.0)


def test_parameter_isolation_between_steps(tiny_cfg):
    t = Trainer(tiny_cfg.replace(variant="full", n_labeled=10))
    t.check_isolation = True
    t.train_joint()  # raises if either step touches the other side's weights
    assert t.iteration == tiny_cfg.joint_iters


def test_discriminator_moves_only_in_adversarial_variants(tiny_cfg):
    for variant, moves in (("view-pred", False), ("distr-match", True)):
        t = Trainer(tiny_cfg.replace(variant=variant, n_labeled=10))
        before = tr.params_digest(t.model.h.params.values())
        t.train_joint()
        assert (tr.params_digest(t.model.h.params.values()) != before) == moves


@pytest.mark.parametrize("variant", ["baseline", "full"])
def test_label_guard_bounded_by_n(tiny_cfg, variant):
    t = Trainer(tiny_cfg.replace(variant=variant, n_labeled=10, joint_iters=8))
    t.train_joint()
    assert 0 < t.ds.guard.distinct <= 10


def test_baseline_ignores_unlabeled(tiny_cfg, monkeypatch):
    seen = []
    real = tr.compose_batch

    def spy(ds, rng, batch, use_unlabeled=True):
        b = real(ds, rng, batch, use_unlabeled)
        seen.append(len(b.unlabeled))
        return b

    monkeypatch.setattr(tr, "compose_batch", spy)
    t = Trainer(tiny_cfg.replace(variant="baseline", n_labeled=10))
    vals = t.joint_step(0)
    assert seen == [0]
    assert vals["l_g"] == 0.0 and vals["l_m"] == 0.0 and vals["l_h"] == 0.0


def test_all_terms_logged_for_full(tiny_cfg):
    t = Trainer(tiny_cfg.replace(variant="full", n_labeled=10))
    vals = t.joint_step(0)
    assert set(vals) == set(tr.METRIC_COLUMNS[1:])
    assert all(np.isfinite(v) for v in vals.values())
    assert vals["l_g"] > 0 and vals["l_h"] > 0 and vals["l_p"] > 0


def test_real_only_skips_synthetic(tiny_cfg):
    t = Trainer(tiny_cfg.replace(variant="real-only", n_labeled=-1))
    vals = t.joint_step(0)
    assert vals["l_c"] == 0.0 and vals["l_p"] > 0


def test_pretraining_reduces_synthetic_error(tiny_cfg):
    t = Trainer(tiny_cfg.replace(pretrain_iters=40, augment=False))
    ids = t.ds.validation_ids()
    before = t.synthetic_validation_error(ids)
    t.pretrain()
    assert t.synthetic_validation_error(ids) < before


@pytest.mark.parametrize("phase", ["pretrain", "joint"])
def test_resume_bit_identical(tiny_cfg, tmp_path, phase):
    cfg = tiny_cfg.replace(variant="full", n_labeled=10, pretrain_iters=6, joint_iters=6)
    run = "pretrain" if phase == "pretrain" else "train_joint"

    a = Trainer(cfg)
    getattr(a, run)()

    b = Trainer(cfg.replace(pretrain_iters=3, joint_iters=3))
    getattr(b, run)()
    b.save(tmp_path / "mid.ckpt")
    c = Trainer(cfg)
    c.load(tmp_path / "mid.ckpt")
    assert c.iteration == 3
    getattr(c, run)()
    for (n1, l1, x1), (n2, l2, x2) in zip(a.state_entries(), c.state_entries()):
        assert (n1, l1) == (n2, l2)
        assert x1.tobytes() == x2.tobytes(), (n1, l1)


def test_load_pretrained_takes_encoder_and_head(tiny_cfg, tmp_path):
    a = Trainer(tiny_cfg)
    a.pretrain()
    a.save(tmp_path / "p.ckpt")
    b = Trainer(tiny_cfg.replace(seed=5))
    b.load_pretrained(tmp_path / "p.ckpt")
    assert tr.params_digest(b.model.f.params.values()) == tr.params_digest(a.model.f.params.values())
    assert tr.params_digest(b.model.h.params.values()) != tr.params_digest(a.model.h.params.values())
    assert (b.phase, b.iteration) == (tr.JOINT, 0)


def test_divergence_saves_last_finite(tiny_cfg, tmp_path):
    loaded = Dataset.load(tiny_cfg.data)
    recs = loaded.records.copy()
    recs["real"][:] = np.nan
    ds = Dataset(loaded.header, recs)
    t = Trainer(tiny_cfg.replace(variant="full", n_labeled=10), ds)
    with pytest.raises(tr.DivergenceError) as info:
        t.train_joint(tmp_path)
    assert "joint iteration 0" in str(info.value)
    assert info.value.checkpoint is not None and info.value.checkpoint.exists()


def test_runs_deterministic(tiny_cfg, tmp_path):
    cfg = tiny_cfg.replace(variant="full", n_labeled=10)
    tr.run(cfg, tmp_path / "a")
    tr.run(cfg, tmp_path / "b")
    for name in ("pretrain.ckpt", "final.ckpt", "metrics.csv", "pretrain_metrics.csv", "eval.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_manifest_contents(tiny_cfg, tmp_path):
    res = tr.run(tiny_cfg.replace(variant="baseline", n_labeled=10), tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["variant"] == "baseline" and doc["n_labeled"] == 10
    assert doc["label_reads_distinct"] <= 10
    assert doc["dataset_hash"] == tr.content_hash(tiny_cfg.data)
    assert float(doc["real_test_me_mm"]) == pytest.approx(res.real_test_me, rel=1e-8)
    cfg, _ = tr.read_manifest(tmp_path / "manifest.json")
    assert cfg == tiny_cfg.replace(variant="baseline", n_labeled=10)


def test_synth_only_has_no_joint_phase(tiny_cfg, tmp_path):
    tr.run(tiny_cfg.replace(variant="synth-only"), tmp_path)
    assert (tmp_path / "pretrain.ckpt").exists() and not (tmp_path / "metrics.csv").exists()


def test_checkpoint_every(tiny_cfg, tmp_path):
    t = Trainer(tiny_cfg.replace(pretrain_iters=5, checkpoint_every=2))
    t.pretrain(tmp_path)
    assert sorted(p.name for p in tmp_path.glob("pretrain_*.ckpt")) == ["pretrain_0000002.ckpt", "pretrain_0000004.ckpt"]


def test_ablation_suite_grid(tiny_cfg, tmp_path):
    cfg = tiny_cfg.replace(pretrain_iters=1, joint_iters=1)
    res = tr.run_ablation_suite(cfg, [10, 20, -1], 3, tmp_path)
    assert len(res) == 36
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == ",".join(tr.SUITE_COLUMNS) and len(lines) == 37
    assert len(list(tmp_path.glob("pretrain_seed*/pretrain.ckpt"))) == 3
    with pytest.raises(ValueError):
        tr.run_ablation_suite(cfg, [10_000], 1, tmp_path / "x")
