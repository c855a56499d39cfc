import json
import string

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from semimap import cli
from semimap import config as cf
from semimap.config import ConfigError, RunConfig

from conftest import TINY


def tiny_sets(**extra):
    vals = dict(TINY, **extra)
    out = []
    for k, v in vals.items():
        out += ["--set", f"{k}={cf.format_value(v)}"]
    return out


def test_text_round_trip():
    cfg = RunConfig(variant="view-pred", n_labeled=10, lambda_g=3e-3, arch_stages=(8, 16), augment=False)
    assert cf.from_text(cfg.to_text()) == cfg
    assert cf.from_text(RunConfig().to_text()) == RunConfig()


def test_resolution_order(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 3\nbatch = 32  # comment\nvariant = baseline\n")
    cfg = cf.resolve(path, {"seed": "9"}, environ={"SEMIMAP_BATCH": "16", "OTHER": "x"})
    assert (cfg.seed, cfg.batch, cfg.variant) == (9, 16, "baseline")


@pytest.mark.parametrize(
    "text",
    ["nosuchkey = 1\n", "seed = abc\n", "just words\n", "variant = best\n", "batch = 30\n", "lambda_c = -1\n", "augment = maybe\n"],
)
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        cf.from_text(text)


def test_n_labeled_all():
    assert cf.parse_n_labeled("all") == -1
    assert cf.from_text("n_labeled = all\n").n_labeled == -1
    assert cf.from_text("n_labeled = 10\n").n_labeled == 10


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for key in cf.FIELD_TYPES:
        assert f"  {key} = " in text


KEYS = st.text(alphabet=string.ascii_lowercase + "_", min_size=1, max_size=20).filter(lambda k: k not in cf.FIELD_TYPES)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(key=KEYS, value=st.text(alphabet=string.ascii_letters + string.digits, max_size=8))
def test_unknown_keys_exit_1(key, value, tmp_path, capsys):
    code = cli.main(["train", "--out", str(tmp_path / "r"), "--set", f"{key}={value}"])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and err["code"] == 1


@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(key=KEYS)
def test_unknown_keys_in_file_exit_1(key, tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text(f"{key} = 1\n")
    assert cli.main(["gen", "--config", str(path), "--out", str(tmp_path / "d.mrds")]) == 1


def test_bad_flag_and_missing_data(tmp_path, capsys):
    assert cli.main(["train", "--bogus"]) == 1
    code = cli.main(["train", "--out", str(tmp_path / "r"), "--data", str(tmp_path / "none.mrds")])
    assert code == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "data"


def test_corrupt_container_exit_2(tmp_path):
    bad = tmp_path / "bad.mrds"
    bad.write_bytes(b"not a container")
    assert cli.main(["train", "--out", str(tmp_path / "r"), "--data", str(bad)]) == 2


def test_gen_twice_identical(tmp_path, capsys):
    a, b = tmp_path / "a.mrds", tmp_path / "b.mrds"
    for out in (a, b):
        assert cli.main(["gen", "--seed", "7", "--count", "40", *tiny_sets(gen_count=40), "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    info = json.loads(capsys.readouterr().out.splitlines()[0])
    assert info["count"] == 40 and info["train"] == 32


def test_train_eval_analyze(tiny_data, tmp_path, capsys):
    run = tmp_path / "run"
    args = ["train", "--variant", "full", "--n-labeled", "10", "--data", tiny_data, "--out", str(run), *tiny_sets()]
    assert cli.main(args) == 0
    doc = json.loads((run / "manifest.json").read_text())
    assert doc["variant"] == "full" and doc["n_labeled"] == 10
    assert doc["config"]["variant"] == "full" and doc["config"]["n_labeled"] == 10
    # the manifest alone reconstructs the run configuration
    again = tmp_path / "again"
    assert cli.main(["train", "--config", str(run / "manifest.json"), "--out", str(again)]) == 0
    assert (again / "final.ckpt").read_bytes() == (run / "final.ckpt").read_bytes()

    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(run / "final.ckpt"), "--out", str(tmp_path / "e.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert float(out["mean_error_mm"]) == pytest.approx(float(doc["real_test_me_mm"]), rel=1e-6)

    base = tmp_path / "base"
    assert cli.main(["train", "--config", str(run / "manifest.json"), "--variant", "baseline", "--out", str(base)]) == 0
    ana = tmp_path / "ana"
    code = cli.main(["analyze", "--checkpoint", str(run / "final.ckpt"), "--reference", str(base / "final.ckpt"), "--out", str(ana), "--worst", "3"])
    assert code == 0
    for name in ("distances.csv", "distances_reference.csv", "embeddings.csv", "neighbours.csv"):
        assert (ana / name).exists()
    assert len((ana / "neighbours.csv").read_text().splitlines()) == 1 + 3 * 5


def test_pretrain_then_train(tiny_data, tmp_path):
    pre = tmp_path / "pre"
    assert cli.main(["pretrain", "--data", tiny_data, "--out", str(pre), *tiny_sets()]) == 0
    assert (pre / "pretrain.ckpt").exists()
    run = tmp_path / "run"
    code = cli.main(["train", "--data", tiny_data, "--variant", "baseline", "--pretrained", str(pre / "pretrain.ckpt"), "--out", str(run), *tiny_sets()])
    assert code == 0
    assert not (run / "pretrain.ckpt").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tiny_data, tmp_path, capsys):
    code = cli.main(["train", "--data", tiny_data, "--variant", "real-only", "--out", str(tmp_path / "r"), *tiny_sets(lr=1e30, joint_iters=20)])
    assert code == 3
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "divergence"


def test_ablate_36_rows(tiny_data, tmp_path, capsys):
    out = tmp_path / "suite"
    code = cli.main(["ablate", "--data", tiny_data, "--n-grid", "10,20,all", "--seeds", "3", "--out", str(out), *tiny_sets(pretrain_iters=1, joint_iters=1)])
    assert code == 0
    assert len((out / "ablation.csv").read_text().splitlines()) == 37
    assert json.loads(capsys.readouterr().out)["rows"] == 36
    assert cli.main(["ablate", "--data", tiny_data, "--variants", "nope", "--out", str(out)]) == 1
