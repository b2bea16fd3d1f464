"""Command-line experiment runner.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import tensor as T
from .checks import run_suite
from .data import MODALITIES
from .evaluation import (
    DataError,
    UndefinedCorrelation,
    across_tasks,
    export_traces,
    heads_ablation,
    mae_metric,
    run_cross_validation,
    spearman_scc,
)
from .formats import (
    FormatError,
    diff_checkpoints,
    dump_config,
    load_checkpoint,
    load_config,
    load_dataset,
    save_checkpoint,
    save_dataset,
    tree_digest,
)
from .fusion import SurgFusionNet
from .synthdata import generate_dataset
from .training import LabelScaler, RangeError, TrainingDiverged, predict, train_fusion, train_unimodal

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("surgfusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class NumericalFailure(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser, data: bool = False) -> None:
    p.add_argument("--config", help="INI config file (sections experiment/model/train/phase1/phase2/synth)")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk", help="default settings to start from")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--d", type=int, help="feature dimension")
    p.add_argument("--fusion-nets", type=int, help="number of FusionNets K")
    p.add_argument("--epochs1", type=int, help="phase-1 epochs")
    p.add_argument("--epochs2", type=int, help="phase-2 epochs")
    p.add_argument("--batch", type=int, help="batch size for both phases")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--data", help="dataset index CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surgfusion", description="Multimodal skill-assessment experiments")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--mode", help="joint | split | single:<rgb|flow|mask>")
    p.add_argument("--sigma", type=float, help="feature noise")
    p.add_argument("--n", type=int, help="number of videos")
    p.add_argument("--T", type=int, help="segments per video")

    p = sub.add_parser("train", help="two-phase training on a whole dataset")
    _common(p, data=True)
    p.add_argument("--heads", type=int)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    _common(p, data=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    p.add_argument("--ids", help="comma-separated video ids to evaluate (default: all)")
    p.add_argument("--heads", type=int)

    p = sub.add_parser("cv", help="cross-validation report")
    _common(p, data=True)
    p.add_argument("--scheme", help="loso | louo | kfold:<k>")
    p.add_argument("--heads", help="head count, or a comma list (e.g. 1,2,4,8) for an ablation table")
    p.add_argument("--jobs", type=int, help="folds run in parallel")
    p.add_argument("--eval-every", type=int, help="score the test fold every N phase-2 epochs (best-epoch report)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=100, help="number of seeds")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", help="write gradcheck.json here")

    p = sub.add_parser("trace", help="export per-window modality attention CSVs")
    _common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ids", help="comma-separated video ids (default: all)")
    p.add_argument("--heads", type=int)
    return parser


def _experiment(args):
    cfg = load_config(args.config, args.profile)
    for attr, target, key in (("seed", cfg, "seed"), ("out", cfg, "out"), ("d", cfg.model, "d"),
                              ("fusion_nets", cfg.model, "fusion_nets"), ("data", cfg, "dataset"),
                              ("scheme", cfg, "scheme"), ("jobs", cfg, "jobs"), ("eval_every", cfg, "eval_every")):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(target, key, v)
    if getattr(args, "d", None) is not None:
        cfg.synth.d = args.d
    for attr, key in (("epochs1", "phase1"), ("epochs2", "phase2")):
        v = getattr(args, attr, None)
        if v is not None:
            getattr(cfg.train, key).epochs = v
    if getattr(args, "batch", None) is not None:
        cfg.train.phase1.batch_size = cfg.train.phase2.batch_size = args.batch
    heads = getattr(args, "heads", None)
    if isinstance(heads, int):
        cfg.model.heads = heads
    cfg.train.seed = cfg.seed
    return cfg


def _records(cfg):
    if not cfg.dataset:
        raise DataError("dataset: no dataset index given (use --data or set 'dataset' in [experiment])")
    return load_dataset(cfg.dataset)


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def cmd_gen(args) -> int:
    cfg = _experiment(args)
    s = cfg.synth
    s.seed = cfg.seed
    for attr, key in (("mode", "mode"), ("sigma", "sigma"), ("n", "n_videos"), ("T", "T")):
        v = getattr(args, attr)
        if v is not None:
            setattr(s, key, v)
    records, _ = generate_dataset(s)
    index = save_dataset(records, cfg.out)
    digest = tree_digest(cfg.out)
    print(f"wrote {len(records)} videos to {index}")
    print(f"digest {digest}")
    return EXIT_OK


def _train_model(cfg, records):
    cfg.validate()
    model = SurgFusionNet(cfg.model, seed=cfg.seed)
    scaler = LabelScaler(cfg.model.y_min, cfg.model.y_max)
    logbook = []
    train_unimodal(model, records, cfg.train, logbook, scaler)
    for m in MODALITIES:
        save_checkpoint(model.branch(m), os.path.join(cfg.out, "phase1", m))
    train_fusion(model, records, cfg.train, logbook, scaler)
    changed = []
    for m in MODALITIES:
        after = os.path.join(cfg.out, "phase2_branches", m)
        save_checkpoint(model.branch(m), after)
        changed += [f"{m}.{n}" for n in diff_checkpoints(os.path.join(cfg.out, "phase1", m), after)]
    if changed:
        raise T.ContractError(f"frozen unimodal parameters changed in phase 2: {changed}")
    return model, logbook


def cmd_train(args) -> int:
    cfg = _experiment(args)
    records = _records(cfg)
    model, logbook = _train_model(cfg, records)
    save_checkpoint(model, os.path.join(cfg.out, "checkpoint"))
    _write(os.path.join(cfg.out, "train_log.jsonl"), "".join(json.dumps(r) + "\n" for r in logbook))
    _write(os.path.join(cfg.out, "config.ini"), dump_config(cfg))
    print(f"trained on {len(records)} videos; checkpoint in {os.path.join(cfg.out, 'checkpoint')}")
    print("final losses: " + ", ".join(f"{r['phase']}={r['loss']:.5f}" for r in logbook
                                         if r["epoch"] == max(x["epoch"] for x in logbook if x["phase"] == r["phase"])))
    return EXIT_OK


def _load_model(cfg, ckpt):
    cfg.validate()
    model = SurgFusionNet(cfg.model, seed=cfg.seed)
    load_checkpoint(model, ckpt)
    for m in MODALITIES:
        model.branch(m).freeze()
    model.eval()
    return model


def _select(records, ids):
    if not ids:
        return records
    wanted = ids.split(",")
    by_id = {r.video_id: r for r in records}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise DataError(f"ids: unknown video ids {missing}")
    return [by_id[i] for i in wanted]


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    records = _select(_records(cfg), args.ids)
    model = _load_model(cfg, args.checkpoint)
    preds = predict(model, records)
    labels = np.array([r.raw_label for r in records])
    rows = []
    for b, p in preds.items():
        try:
            scc = spearman_scc(p, labels)
        except UndefinedCorrelation as e:
            scc, err = None, str(e)
        else:
            err = None
        rows.append({"branch": b, "scc": scc, "mae": mae_metric(p, labels), "error": err, "n": len(records)})
    for r in rows:
        scc = "n/a" if r["scc"] is None else f"{r['scc']:.4f}"
        print(f"{r['branch']:<8} SCC {scc:>8}  MAE {r['mae']:.4f}" + (f"  ({r['error']})" if r["error"] else ""))
    if cfg.out:
        _write(os.path.join(cfg.out, "metrics.jsonl"), "".join(json.dumps(r) + "\n" for r in rows))
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _experiment(args)
    records = _records(cfg)
    heads = [int(h) for h in args.heads.split(",")] if args.heads else None
    if heads and len(heads) == 1:
        cfg.model.heads = heads[0]
        heads = None
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    if heads:
        table, results = heads_ablation(records, cfg.scheme, cfg.train, cfg.model, heads, cfg.seed, cfg.jobs)
        lines = "".join(json.dumps({"heads": h, **rec}, sort_keys=True) + "\n"
                        for h, r in results.items() for rec in r.records())
        text = "head ablation (fusion branch)\n" + table + "\n"
    else:
        by_task: dict = {}
        for r in records:
            by_task.setdefault(r.task, []).append(r)
        results = {t: run_cross_validation(rs, cfg.scheme, cfg.train, cfg.model, cfg.seed, cfg.jobs,
                                           eval_every=cfg.eval_every) for t, rs in sorted(by_task.items())}
        text = "".join(f"task {t}\n{r.table()}\n\n" for t, r in results.items())
        lines = "".join(json.dumps({"task": t, **rec}, sort_keys=True) + "\n"
                        for t, r in results.items() for rec in r.records())
        if len(results) > 1:
            agg = across_tasks(results)
            text += "across tasks (Fisher z for SCC, mean MAE)\n" + "".join(
                f"{b:<8} {'n/a' if v['scc'] is None else format(v['scc'], '.4f'):>9} {v['mae']:>9.4f}\n"
                for b, v in agg.items())
            lines += "".join(json.dumps({"kind": "across_tasks", "branch": b, **v}, sort_keys=True) + "\n"
                             for b, v in agg.items())
    digest = hashlib.sha256(lines.encode()).hexdigest()
    _write(os.path.join(cfg.out, "report.txt"), text)
    _write(os.path.join(cfg.out, "report.jsonl"), lines)
    _write(os.path.join(cfg.out, "digest.txt"), digest + "\n")
    print(text, end="")
    print(f"digest {digest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seeds, args.seed, args.tol)
    ok = True
    for r in results:
        ok &= r.passed
        status = "PASS" if r.passed else f"FAIL ({len(r.failures)} seeds)"
        print(f"{r.name:<26} max rel err {r.worst:.2e}  {status}")
    if args.out:
        _write(os.path.join(args.out, "gradcheck.json"), json.dumps(
            [{"name": r.name, "worst": r.worst, "failed_seeds": [s for s, _ in r.failures]} for r in results],
            indent=1))
    if not ok:
        raise NumericalFailure("gradient check failed")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = _experiment(args)
    records = _select(_records(cfg), args.ids)
    model = _load_model(cfg, args.checkpoint)
    paths = export_traces(model, records, os.path.join(cfg.out, "traces"))
    print(f"wrote {len(paths)} trace files to {os.path.join(cfg.out, 'traces')}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "cv": cmd_cv, "gradcheck": cmd_gradcheck,
            "trace": cmd_trace}


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TrainingDiverged, T.DegenerateRowError, T.ContractError, NumericalFailure, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (T.ConfigError, DataError, RangeError, FormatError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run_command())
