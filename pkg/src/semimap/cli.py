"""Command-line entry point: ``semimap gen|pretrain|train|eval|analyze|ablate``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
divergence.  Failures also print one JSON object on standard error, e.g.
``{"error": "config", "code": 1, "message": "..."}``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from .config import ABLATION_VARIANTS, ENV_PREFIX, VARIANTS, ConfigError, RunConfig, describe_keys, parse_n_labeled, resolve
from .datapipe import ContainerError, DataError, Dataset, LabelAccessError
from .nets import REAL, SYNTH, CheckpointError, Model, load_checkpoint
from .toyhand import FootprintError, generate_dataset
from .trainer import DivergenceError, read_manifest, run, run_ablation_suite, run_pretrain, suite_medians

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file, or a run manifest (.json)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset container path")


def build_parser() -> argparse.ArgumentParser:
    epilog = f"config keys (defaults shown; environment overrides use {ENV_PREFIX}<KEY>):\n{describe_keys()}"
    p = _Parser(prog="semimap", description=__doc__, epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render a toy dataset", epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(g)
    g.add_argument("--count", type=int)
    g.add_argument("--out", required=True, help="container file to write")

    for name, helptext in (("pretrain", "synthetic pretraining of encoder and pose head"), ("train", "full run of one variant")):
        t = sub.add_parser(name, help=helptext, epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(t)
        t.add_argument("--out", required=True, help="run directory")
        if name == "train":
            t.add_argument("--variant", choices=VARIANTS)
            t.add_argument("--n-labeled", dest="n_labeled")
            t.add_argument("--pretrained", help="pretraining checkpoint to start from")

    e = sub.add_parser("eval", help="pose error of a checkpoint on the test split")
    _common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--domain", choices=(REAL, SYNTH), default=REAL)
    e.add_argument("--out", required=True, help="report CSV")

    a = sub.add_parser("analyze", help="latent distances, embeddings and nearest-neighbour report")
    _common(a)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--reference", help="second checkpoint sharing the histogram support")
    a.add_argument("--worst", type=int, default=10)
    a.add_argument("--out", required=True, help="output directory")

    b = sub.add_parser("ablate", help="variant x labeled-count x seed grid", epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(b)
    b.add_argument("--n-grid", dest="n_grid", default="10,100,all")
    b.add_argument("--seeds", type=int, default=3)
    b.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", required=True, help="suite directory")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("data", "data"), ("count", "gen_count"), ("variant", "variant")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    if getattr(args, "n_labeled", None) is not None:
        out["n_labeled"] = parse_n_labeled(args.n_labeled)
    return out


def _config(args, checkpoint=None) -> RunConfig:
    path = args.config
    if path is None and checkpoint is not None:
        manifest = Path(checkpoint).with_name("manifest.json")
        if manifest.exists():
            path = str(manifest)
    base = None
    if path is not None and path.endswith(".json"):
        try:
            base, _ = read_manifest(path)
        except (OSError, KeyError, ValueError) as e:
            raise ConfigError(f"cannot read manifest {path}: {e}") from None
        path = None
    return resolve(path, _overrides(args), base=base)


def _load_model(cfg: RunConfig, ds: Dataset, checkpoint) -> Model:
    model = Model(cfg.arch(ds.resolution, ds.joints), seed=cfg.seed)
    model.load_entries(load_checkpoint(checkpoint))
    return model


def cmd_gen(args) -> None:
    cfg = _config(args)
    info = generate_dataset(args.out, cfg.gen())
    print(json.dumps({"out": args.out, **info}))


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    tr = run_pretrain(cfg, args.out)
    print(json.dumps({"out": args.out, "synthetic_test_me_mm": an.fmt(tr.synthetic_validation_error())}))


def cmd_train(args) -> None:
    cfg = _config(args)
    r = run(cfg, args.out, args.pretrained)
    print(json.dumps({"out": args.out, "variant": r.variant, "n_labeled": r.n_labeled, "real_test_me_mm": an.fmt(r.real_test_me)}))


def cmd_eval(args) -> None:
    cfg = _config(args, args.checkpoint)
    ds = Dataset.load(cfg.data)
    model = _load_model(cfg, ds, args.checkpoint)
    pred = an.predict_poses(model, ds.images(ds.test_ids, args.domain), args.domain, cfg.gen_cube_mm)
    report = an.mean_joint_error(pred, ds.eval_poses(ds.test_ids))
    report.write(args.out)
    print(json.dumps({"out": args.out, "mean_error_mm": an.fmt(report.mean_error), "frames": report.frames}))


def cmd_analyze(args) -> None:
    cfg = _config(args, args.checkpoint)
    ds = Dataset.load(cfg.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    val = ds.validation_ids(seed=cfg.seed)
    model = _load_model(cfg, ds, args.checkpoint)
    dist = an.latent_distance_distribution(model, ds, val)
    summary = {"out": str(out), "pairs": len(val), "median_distance": an.fmt(dist.median)}
    if args.reference:
        ref_model = _load_model(cfg, ds, args.reference)
        ref = an.latent_distance_distribution(ref_model, ds, val)
        upper = an.pooled_upper(dist.distances, ref.distances)
        dist, ref = an.rebin(dist, upper), an.rebin(ref, upper)
        ref.write(out / "distances_reference.csv")
        summary["reference_median_distance"] = an.fmt(ref.median)
    dist.write(out / "distances.csv")
    an.export_embeddings(model, ds, val, out / "embeddings.csv")
    test = ds.test_ids
    truth = ds.eval_poses(test)
    pred = an.predict_poses(model, ds.images(test, REAL), REAL, cfg.gen_cube_mm)
    errors = an.mean_joint_error(pred, truth).per_frame_mean
    # analysis-time access to train poses; no training happens here
    train_poses = ds.records["pose"][ds.rows(ds.train_ids)].astype(np.float64)
    an.nn_error_analysis(test, errors, truth, ds.train_ids, train_poses, worst=args.worst).write(out / "neighbours.csv")
    print(json.dumps(summary))


def cmd_ablate(args) -> None:
    cfg = _config(args)
    grid = [parse_n_labeled(s) for s in args.n_grid.split(",") if s.strip()]
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    bad = [v for v in variants if v not in VARIANTS]
    if bad or args.seeds < 1 or not grid:
        raise ConfigError(f"bad ablation grid: variants {bad or variants}, seeds {args.seeds}, n-grid {args.n_grid}")
    results = run_ablation_suite(cfg, grid, args.seeds, args.out, variants, args.workers, progress=lambda s: print(s, file=sys.stderr))
    med = {f"{v}@{'all' if n < 0 else n}": an.fmt(m) for (v, n), m in suite_medians(results).items()}
    print(json.dumps({"out": str(Path(args.out) / "ablation.csv"), "rows": len(results), "median_me_mm": med}))


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "ablate": cmd_ablate}


def _fail(kind: str, code: int, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "code": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.cmd](args)
    except ConfigError as e:
        return _fail("config", EXIT_CONFIG, e)
    except DivergenceError as e:
        return _fail("divergence", EXIT_DIVERGED, e)
    except (DataError, ContainerError, CheckpointError, LabelAccessError, FootprintError, FileNotFoundError) as e:
        return _fail("data", EXIT_DATA, e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
