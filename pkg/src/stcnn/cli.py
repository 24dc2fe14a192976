"""Command-line entry point: ``stcnn <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .dictionary import dict_learn, load_model, save_model, select_target
from .evaluation import EvalReport, EvalRow, compare_baseline, emit_report, validate_supervised
from .gradcheck import run_suite
from .joint import STCNN, Subject, TrainConfig, TrainTrace
from .metrics import jaccard, temporal_similarity
from .synthetic import NetworkSpec, SyntheticSpec, make_cohort, synthesize, template_map
from .volume import (normalize, parse_keyvalue, read_map, read_series, read_volume4d,
                     write_map, write_series, write_volume4d)

log = logging.getLogger("stcnn")


def _volumes(path: Path) -> list[Path]:
    """A single ``.vol4`` file, or the subject volumes in a directory."""
    path = Path(path)
    if path.is_file():
        return [path]
    return sorted(p for p in path.glob("*.vol4") if not p.name.endswith(".mask.vol4")
                  and p.name != "template.vol4")


def _stem(path: Path) -> str:
    return path.name.removesuffix(".vol4")


# ---------------------------------------------------------------- synth


def parse_synth_spec(text: str):
    """Either an explicit single-subject spec (``network.N.*`` keys) or a cohort."""
    kv = parse_keyvalue(text)
    dims = tuple(int(v) for v in kv.get("dims", "64 16 16 16").split())
    sigma = float(kv.get("sigma", 0.8))
    seed = int(kv.get("seed", 0))
    net_ids = sorted({int(k.split(".")[1]) for k in kv if k.startswith("network.")})
    if not net_ids:
        n = int(kv.get("subjects", 1))
        return make_cohort(n, seed, dims, sigma, shift=int(kv.get("shift", 1)),
                           n_distractors=int(kv.get("distractors", 2)))
    networks = []
    for g in net_ids:
        blobs = []
        for chunk in kv[f"network.{g}.blobs"].split(";"):
            x, y, z, r = (float(v) for v in chunk.split())
            blobs.append(((x, y, z), r))
        onsets = [int(v) for v in kv.get(f"network.{g}.onsets", "").split()]
        durations = [int(v) for v in kv.get(f"network.{g}.durations", "").split()]
        networks.append(NetworkSpec(blobs, onsets, durations,
                                    float(kv.get(f"network.{g}.amplitude", 1.0))))
    return [SyntheticSpec(dims, networks, sigma, seed)]


def cmd_synth(args) -> int:
    specs = parse_synth_spec(Path(args.spec).read_text())
    out = Path(args.out)
    write_map(template_map(specs[0].dims[1:]), out / "template.vol4")
    for i, spec in enumerate(specs):
        vol, truth = synthesize(spec)
        name = f"sub-{i:03d}"
        write_volume4d(vol, out / f"{name}.vol4")
        for g, (m, course) in enumerate(truth):
            write_map(m, out / "truth" / name / f"net{g}.map.vol4")
            write_series(course, out / "truth" / name / f"net{g}.series.csv")
    print(f"wrote {len(specs)} subject(s) to {out}")
    return 0


# ---------------------------------------------------------------- dictlearn


def cmd_dictlearn(args) -> int:
    template = read_map(args.template)
    files = _volumes(args.data)
    for path in files:
        vol = normalize(read_volume4d(path))
        model = dict_learn(vol, args.k, args.lam, args.iters, args.seed)
        match = select_target(model, template)
        dest = Path(args.out) / _stem(path) if len(files) > 1 or Path(args.data).is_dir() else Path(args.out)
        save_model(model, dest, match)
        print(f"{path.name}: target atom {match.best_index} jaccard {match.jaccard:.3f}")
    return 0


# ---------------------------------------------------------------- train / infer


def load_training_set(data_dir, labels_dir) -> list[Subject]:
    subjects = []
    for path in _volumes(data_dir):
        lab = Path(labels_dir) / _stem(path)
        if not (lab / "match.txt").exists():
            log.warning("no labels for %s, skipped", path.name)
            continue
        meta = parse_keyvalue((lab / "match.txt").read_text())
        k = int(meta["best_index"])
        atoms = np.loadtxt(lab / "atoms.csv", delimiter=",", ndmin=2)
        subjects.append(Subject(_stem(path), normalize(read_volume4d(path)),
                                read_map(lab / f"coef_{k:02d}.vol4"), atoms[k]))
    if not subjects:
        raise SystemExit(f"no labelled volumes found in {data_dir}")
    return subjects


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    data = load_training_set(args.data, args.labels)
    out = Path(args.out)
    stages = (1, 2, 3) if args.stage is None else (args.stage,)
    if args.stage in (2, 3):
        est = STCNN.load(out / "model")
        est.set_params(**STCNN.from_config(cfg).get_params())
    else:
        est = STCNN.from_config(cfg)
    est.fit(data, checkpoint_dir=out / "checkpoints", stages=stages)
    est.save(out / "model")
    trace_file = out / "trace.csv"
    trace = est.trace_
    if args.stage in (2, 3) and trace_file.exists():
        earlier = TrainTrace.from_csv(trace_file.read_text())
        earlier.extend(trace)
        trace = earlier
    trace_file.write_text(trace.to_csv())
    print(f"trained stages {stages} on {len(data)} subjects; model in {out / 'model'}")
    return 0


def cmd_infer(args) -> int:
    est = STCNN.load(args.ckpt)
    for path in _volumes(args.data):
        net_map, series = est.predict_one(normalize(read_volume4d(path)))
        dest = Path(args.out) / _stem(path)
        write_map(net_map, dest / "map.vol4")
        write_series(series, dest / "series.csv")
        print(f"{path.name}: wrote {dest}")
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    template = read_map(args.template)
    rows, plots = [], {}
    for pred_dir in sorted(p for p in Path(args.pred).iterdir() if (p / "map.vol4").exists()):
        name = pred_dir.name
        net_map = read_map(pred_dir / "map.vol4")
        series = read_series(pred_dir / "series.csv")
        planted = None
        tdir = Path(args.truth) / name if args.truth else None
        if tdir is not None and (tdir / "net0.map.vol4").exists():
            planted = (read_map(tdir / "net0.map.vol4"), read_series(tdir / "net0.series.csv"))
        if args.baseline and (Path(args.baseline) / name / "atoms.csv").exists():
            model = load_model(Path(args.baseline) / name)
            row = compare_baseline(name, net_map, series, model, template, planted)
        else:
            row = EvalRow(name, jaccard_stcnn=jaccard(net_map, template))
            if planted is not None:
                row.jaccard_stcnn_truth = jaccard(net_map, planted[0])
                row.pearson_truth = temporal_similarity(series, planted[1])
        if args.data:
            vol_path = Path(args.data) / f"{name}.vol4"
            if vol_path.exists():
                vol = normalize(read_volume4d(vol_path))
                row.supervised_sr_jaccard = validate_supervised(series, net_map, vol, args.lam, args.k)
        rows.append(row)
        plots[name] = {"map": net_map, "series": series}
        if planted is not None:
            plots[name].update(truth_map=planted[0], truth_series=planted[1])
    if not rows:
        raise SystemExit(f"no predictions found under {args.pred}")
    report = EvalReport(rows)
    path = emit_report(report, args.out, plots)
    for col, v in report.means().items():
        print(f"mean {col}: {v:.4f}")
    print(f"report written to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    results, seconds = run_suite(args.seed, args.instances)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name:<18} max rel err {r.max_rel_error:.2e} (tol {r.tolerance:.0e}, "
              f"{r.instances} instances)")
    print(f"{len(results) - failed}/{len(results)} checks passed in {seconds:.1f}s")
    return 1 if failed else 0


def cmd_experiment(args) -> int:
    from .pipeline import ExperimentConfig, run_experiment

    cfg = ExperimentConfig(n_train=args.train, n_test=args.test, seed=args.seed, sigma=args.sigma)
    if args.config:
        cfg.train = TrainConfig.from_file(args.config)
    res = run_experiment(cfg, out_dir=args.out)
    for col, v in res.report.means().items():
        print(f"mean {col}: {v:.4f}")
    print(f"null-control supervised jaccard: {np.mean(res.null_scores):.4f}")
    print("timings: " + ", ".join(f"{k} {v:.0f}s" for k, v in res.timings.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stcnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic volumes with planted networks")
    p.add_argument("--spec", required=True, help="key = value spec file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dictlearn", help="dictionary decomposition and target selection")
    p.add_argument("--data", required=True, help=".vol4 file or directory of them")
    p.add_argument("--template", required=True, help="single-frame .vol4 template map")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--lambda", dest="lam", type=float, default=0.15)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dictlearn)

    p = sub.add_parser("train", help="three-stage training")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True, help="dictlearn output directory")
    p.add_argument("--config", help="key = value training config")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2, 3))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict map and series for new volumes")
    p.add_argument("--ckpt", required=True, help="model directory written by train")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions and write a CSV report")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", help="synth output truth/ directory")
    p.add_argument("--template", required=True)
    p.add_argument("--baseline", help="dictlearn output directory for the same subjects")
    p.add_argument("--data", help="volume directory, enables supervised validation")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--lambda", dest="lam", type=float, default=0.15)
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="full synthetic train/test run")
    p.add_argument("--train", type=int, default=40)
    p.add_argument("--test", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.8)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
