"""Command line entry points.

Subcommands: gradcheck (finite-difference validation of every backward
pass), synth (write a synthetic dataset), train (one protocol stage),
eval (predictions, JSON report, and score figures), score (compare a
predictions file against labels).

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    Sample,
    SynthSpec,
    au_label_matrix,
    expr_label_array,
    feature_matrix,
    load_dataset,
    load_labels,
    load_predictions,
    save_dataset,
    synth_generate,
    va_label_matrix,
    write_predictions,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InsufficientDataError,
    LabelError,
    MtaffectError,
    NumericalError,
    ShapeError,
)
from .gradcheck import DEFAULT_H, DEFAULT_TOL, run_suite
from .graph import build_facial_graph, dot_export, node_features
from .metrics import evaluate_predictions
from .model import Model, ModelDims, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_stage

MODEL_KEYS = ("node_dim", "d_att", "k", "use_attention", "va_use_bn")
TRAIN_KEYS = ("epochs", "lr0", "lr_min", "batch_size", "weight_decay", "sam_rho",
              "momentum", "seed", "freeze", "unfreeze_anfl", "val_fraction")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this project reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, h=args.eps)
    failed = []
    for name, err in results.items():
        status = "PASS" if err < args.tol else "FAIL"
        print(f"{name:<24} max rel err {err:.3e}  {status}")
        if err >= args.tol:
            failed.append(name)
    if failed:
        print(f"gradcheck: {len(failed)} module(s) above tolerance {args.tol:g}")
        return 3
    print(f"gradcheck: all {len(results)} modules below tolerance {args.tol:g}")
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    spec = SynthSpec(n_samples=args.n, dim=args.d, seed=args.seed,
                     noise_scale=args.noise)
    ds = synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fpath = out / "features.csv"
    lpath = out / "labels.csv"
    save_dataset(ds, fpath, lpath)
    print(f"wrote {len(ds)} samples to {fpath} and {lpath}")
    return 0


# ---------------------------------------------------------------------------
# train


def _load_run_config(path, stage: str):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - set(MODEL_KEYS) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {unknown}")
    train_kwargs = {k: doc[k] for k in TRAIN_KEYS if k in doc}
    if "freeze" in train_kwargs:
        if not isinstance(train_kwargs["freeze"], list):
            raise ConfigError(f"{path}: freeze must be a list of group names")
        train_kwargs["freeze"] = tuple(train_kwargs["freeze"])
    try:
        cfg = TrainConfig(stage=stage, **train_kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    model_kwargs = {k: doc[k] for k in MODEL_KEYS if k in doc}
    return cfg, model_kwargs


def _data_paths(data_dir):
    data_dir = Path(data_dir)
    fpath = data_dir / "features.csv"
    lpath = data_dir / "labels.csv"
    for p in (fpath, lpath):
        if not p.is_file():
            raise DataError(f"data file {p} does not exist")
    return fpath, lpath


def _write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr", "p_task"])
        for row in history:
            p = row["p_task"]
            w.writerow([row["epoch"], _fmt(row["loss"]), _fmt(row["lr"]),
                        _fmt(p) if p is not None else "nan"])


def cmd_train(args) -> int:
    config, model_kwargs = _load_run_config(args.config, args.task)
    fpath, lpath = _data_paths(args.data)
    if args.init is not None and not Path(args.init).is_file():
        raise ConfigError(f"init checkpoint {args.init} does not exist")

    ds = load_dataset(fpath, lpath)

    if args.task == "ex" and args.init is None:
        raise ConfigError(
            "the ex stage refines a trained AU branch: pass --init with an "
            "au-stage checkpoint")

    if args.init is not None:
        model = load_checkpoint(args.init)
        if model.dims.feat_dim != ds.dim:
            raise CheckpointError(
                f"checkpoint expects feature dim {model.dims.feat_dim}, "
                f"data has {ds.dim}")
        for key, value in model_kwargs.items():
            have = getattr(model.dims, key)
            if have != value:
                raise ConfigError(
                    f"config {key}={value!r} conflicts with checkpoint {key}={have!r}")
        if args.task == "ex" and "au" not in model.stages_completed:
            raise ConfigError(
                f"--init checkpoint has completed stages {model.stages_completed}, "
                "but the ex stage needs a trained AU branch ('au')")
    else:
        dims = ModelDims(feat_dim=ds.dim, **model_kwargs)
        model = Model.init(dims, seed=config.seed)

    history = train_stage(ds, model, config)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, config_echo=config.to_dict())
    history_path = out.parent / f"{out.stem}_history.csv"
    _write_history(history, history_path)
    written = [str(out), str(history_path)]
    if history:
        from .report import save_history_figure

        figure_path = out.parent / f"{out.stem}_history.png"
        save_history_figure(history, figure_path)
        written.append(str(figure_path))
        last = history[-1]
        p = last["p_task"]
        score = f"{p:.6f}" if p is not None else "nan"
        print(f"stage {args.task}: {len(history)} epoch(s), "
              f"final loss {last['loss']:.6f}, final score {score}")
    print("wrote " + ", ".join(written))
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    fpath, lpath = _data_paths(args.data)
    ds = load_dataset(fpath, lpath)
    if len(ds) == 0:
        raise InsufficientDataError("eval: dataset has no samples")
    if model.dims.feat_dim != ds.dim:
        raise CheckpointError(
            f"checkpoint expects feature dim {model.dims.feat_dim}, data has {ds.dim}")

    x = feature_matrix(ds.samples)
    chunks = [model.predict(x[i:i + 4096]) for i in range(0, len(ds), 4096)]
    au_probs = np.concatenate([c[0] for c in chunks])
    expr_pred = np.concatenate([c[1] for c in chunks])
    va_pred = np.concatenate([c[2] for c in chunks])

    ids = [s.id for s in ds.samples]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, ids, au_probs, expr_pred, va_pred)

    au_labels = au_label_matrix(ds.samples)
    expr_labels = expr_label_array(ds.samples)
    va_labels = va_label_matrix(ds.samples)
    report = evaluate_predictions(au_probs, expr_pred, va_pred,
                                  au_labels, expr_labels, va_labels,
                                  threshold=args.threshold)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json())
    written = [str(out), str(report_path)]

    if not args.no_figures:
        from .report import render_report_figures

        written += [str(p) for p in
                    render_report_figures(report, va_pred, va_labels, report_path)]

    if args.dump_graph is not None:
        v = node_features(ds.samples[0].feature, model.anfl)
        graph = build_facial_graph(v, model.anfl.k)
        Path(args.dump_graph).write_text(dot_export(graph))
        written.append(str(args.dump_graph))

    for name in ("p_au", "p_ex", "p_va", "p_mtl"):
        value = getattr(report, name)
        print(f"{name.upper()} {value:.6f}" if value is not None
              else f"{name.upper()} nan")
    print("wrote " + ", ".join(written))
    return 0


# ---------------------------------------------------------------------------
# score


def cmd_score(args) -> int:
    ids, au_probs, expr_pred, va_pred = load_predictions(args.preds)
    label_ids, labels = load_labels(args.labels)
    extra = [sid for sid in ids if sid not in labels]
    if extra:
        raise DataError(f"{args.preds}: id {extra[0]!r} has no row in the labels file")
    missing = [sid for sid in label_ids if sid not in set(ids)]
    if missing:
        raise DataError(f"{args.labels}: id {missing[0]!r} has no prediction row")

    au_labels = np.stack([labels[sid][0] for sid in ids])
    expr_labels = np.array([labels[sid][1] for sid in ids], dtype=np.int64)
    va_labels = np.stack([labels[sid][2] for sid in ids])
    report = evaluate_predictions(au_probs, expr_pred, va_pred,
                                  au_labels, expr_labels, va_labels,
                                  threshold=args.threshold)
    for name in ("p_au", "p_ex", "p_va", "p_mtl"):
        value = getattr(report, name)
        print(f"{name.upper()} {value:.6f}" if value is not None
              else f"{name.upper()} nan")
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtaffect",
                     description="Multi-task facial affect heads on precomputed features")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="validate analytic gradients against "
                                         "central finite differences")
    p.add_argument("--eps", type=float, default=DEFAULT_H,
                   help="finite-difference step (default 1e-5)")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL,
                   help="relative error tolerance (default 1e-4)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--d", type=int, required=True, help="feature dimension (>= 22)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.1, help="feature noise scale")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one stage of the training protocol")
    p.add_argument("--task", required=True, choices=("au", "ex", "va"))
    p.add_argument("--data", required=True, help="directory with features.csv and labels.csv")
    p.add_argument("--config", required=True, help="JSON train configuration")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--init", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="write predictions, a JSON report, and figures")
    p.add_argument("--data", required=True, help="directory with features.csv and labels.csv")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="AU binarization threshold (default 0.5)")
    p.add_argument("--dump-graph", default=None, metavar="PATH",
                   help="write the first sample's facial graph as DOT text")
    p.add_argument("--no-figures", action="store_true",
                   help="skip rendering score figures next to the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score a predictions file against labels")
    p.add_argument("--preds", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, LabelError, CheckpointError, InsufficientDataError,
            ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
