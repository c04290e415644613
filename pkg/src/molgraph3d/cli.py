"""Batch command-line interface.

Subcommands: featurize, train, evaluate, rotate-eval, contrib.  Every
command writes a ``manifest.json`` into its output directory recording
the command, the effective configuration, seeds, SHA-256 digests of the
inputs, and the produced files, so a run can be reproduced exactly.

Randomness flows from one ``--seed`` S through fixed stream labels:
fold assignment uses entropy (S, 0), training of fold k uses (S, 1, k),
and rotation sampling uses (S, 2).  Any sub-run can therefore be
reproduced in isolation.  ``--threads`` caps worker parallelism; the
current pipeline executes work sequentially (one worker), which also
makes runs bit-reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import analyze, chemper, gcn3d, molio, train
from .chemper import FEATURE_BLOCKS, FeatureConfig, build_graph_tensors
from .gcn3d import ModelConfig
from .train import TrainConfig

MANIFEST_VERSION = 1

_MODEL_KEYS = {f for f in ModelConfig.__dataclass_fields__}
_TRAIN_KEYS = {f for f in TrainConfig.__dataclass_fields__}


def _utcnow():
    return datetime.now(timezone.utc).isoformat()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, config, seeds, inputs, outputs, started):
    doc = {
        "format_version": MANIFEST_VERSION,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "started_at": started,
        "finished_at": _utcnow(),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    return path


def _ensure_out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _feature_config(args):
    explicit = bool(getattr(args, "explicit_h", False))
    if getattr(args, "elements", None):
        elements = tuple(s.strip() for s in args.elements.split(",") if s.strip())
        return FeatureConfig(elements=elements, explicit_hydrogens=explicit)
    return FeatureConfig(explicit_hydrogens=explicit)


def _label_map(arg):
    if not arg:
        return None
    out = {}
    for part in arg.split(","):
        key, _, val = part.partition("=")
        if not _ or val not in ("0", "1"):
            raise argparse.ArgumentTypeError(
                f"label map entries look like NAME=0 or NAME=1, got {part!r}")
        out[key.strip()] = int(val)
    return out


def _load_records(args, task):
    return molio.load_dataset(
        args.sdf, args.targets, args.id_column, args.target_column, task,
        id_field=args.id_field, label_map=getattr(args, "label_map", None),
    )


def _read_config_file(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise molio.LoadError("config file must be a flat JSON object")
    unknown = set(doc) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise molio.LoadError(f"unknown config keys: {sorted(unknown)}")
    return doc


# ---------------------------------------------------------------------------
# subcommands


def cmd_featurize(args):
    started = _utcnow()
    out_dir = _ensure_out(args)
    fc = _feature_config(args)
    with open(args.sdf, "rb") as fh:
        molecules, errors = molio.parse_sdf_lenient(fh.read())
    dump = []
    for mol in molecules:
        try:
            g = build_graph_tensors(mol, fc)
        except (chemper.EmptyMoleculeError, ValueError) as exc:
            errors.append(f"{mol.id!r}: {exc}")
            continue
        dump.append({
            "id": mol.id,
            "n_atoms": g.n_atoms,
            "feature_blocks": [{"name": name, "width": width} for name, width in FEATURE_BLOCKS],
            "features": g.features.tolist(),
            "adjacency": g.adjacency.tolist(),
            "rel_pos": g.rel_pos.tolist(),
        })
    out_path = os.path.join(out_dir, "graph_tensors.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(dump, fh, indent=1)
    _write_manifest(out_dir, "featurize",
                    {"explicit_hydrogens": fc.explicit_hydrogens, "elements": list(fc.elements)},
                    {}, [args.sdf], [out_path], started)
    for err in errors:
        print(f"featurize: {err}", file=sys.stderr)
    return 2 if errors else 0


def _split_config(args):
    file_cfg = _read_config_file(args.config)
    model_kwargs = {k: v for k, v in file_cfg.items() if k in _MODEL_KEYS}
    train_kwargs = {k: v for k, v in file_cfg.items() if k in _TRAIN_KEYS}
    # flags override file values
    model_kwargs["task"] = args.task
    model_kwargs["aggregation"] = args.agg
    train_kwargs["folds"] = args.folds
    if args.batch_size is not None:
        train_kwargs["batch_size"] = args.batch_size
    if args.max_epochs is not None:
        train_kwargs["max_epochs"] = args.max_epochs
    return model_kwargs, train_kwargs


def cmd_train(args):
    started = _utcnow()
    out_dir = _ensure_out(args)
    model_kwargs, train_kwargs = _split_config(args)
    model_config = ModelConfig(**model_kwargs)
    fc = _feature_config(args)
    records = _load_records(args, model_config.task)
    folds = train.stratified_folds(records, k=args.folds, seed=(args.seed, 0),
                                   task=model_config.task)
    outputs = []
    folds_path = os.path.join(out_dir, "fold_assignments.json")
    train.write_fold_assignments(folds, records, args.seed, folds_path)
    outputs.append(folds_path)

    wanted = range(len(folds)) if args.fold is None else [args.fold]
    per_fold = []
    for k in wanted:
        if not 0 <= k < len(folds):
            raise molio.LoadError(f"--fold {k} outside 0..{len(folds) - 1}")
        split = folds[k]
        train_config = TrainConfig(**{**train_kwargs, "seed": (args.seed, 1, k)})
        result = train.fit(
            [records[i] for i in split.train],
            [records[i] for i in split.val],
            model_config, train_config, feature_config=fc,
        )
        ckpt = os.path.join(out_dir, f"fold{k}.checkpoint.json")
        train.save_checkpoint(result.params, ckpt, scaler=result.scaler, feature_config=fc)
        log_path = os.path.join(out_dir, f"fold{k}.log.csv")
        train.write_training_log(result.log, log_path)
        outputs.extend([ckpt, log_path])

        test_records = [records[i] for i in split.test]
        preds = train.predict(result.params, test_records, result.scaler, fc)
        fold_metrics = train.metrics(preds, [r.target for r in test_records],
                                     model_config.task)
        per_fold.append({"fold": k, **fold_metrics})
        pred_path = os.path.join(out_dir, f"fold{k}.predictions.csv")
        molio.write_predictions(test_records, preds, pred_path)
        outputs.append(pred_path)

    metrics_path = os.path.join(out_dir, "metrics.json")
    train.write_metric_report(per_fold, metrics_path)
    outputs.append(metrics_path)
    _write_manifest(out_dir, "train",
                    {"model": model_kwargs, "train": train_kwargs},
                    {"root": args.seed}, [args.sdf, args.targets], outputs, started)
    return 0


def cmd_evaluate(args):
    started = _utcnow()
    out_dir = _ensure_out(args)
    params, scaler, fc = train.load_checkpoint(args.model)
    records = _load_records(args, params.config.task)
    if not records:
        raise molio.LoadError("evaluation set is empty")
    preds = train.predict(params, records, scaler, fc)
    result = train.metrics(preds, [r.target for r in records], params.config.task)
    metrics_path = os.path.join(out_dir, "metrics.json")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
    pred_path = os.path.join(out_dir, "predictions.csv")
    molio.write_predictions(records, preds, pred_path)
    _write_manifest(out_dir, "evaluate", {"model": args.model}, {},
                    [args.model, args.sdf, args.targets],
                    [metrics_path, pred_path], started)
    return 0


def cmd_rotate_eval(args):
    started = _utcnow()
    out_dir = _ensure_out(args)
    params, scaler, fc = train.load_checkpoint(args.model)
    records = _load_records(args, params.config.task)
    if not records:
        raise molio.LoadError("evaluation set is empty")
    outputs = []
    if args.mode == "fine":
        if args.molecule_id is not None:
            picks = [r for r in records if r.molecule.id == args.molecule_id]
            if not picks:
                raise molio.LoadError(f"molecule id {args.molecule_id!r} not in dataset")
            mol = picks[0].molecule
        else:
            rng = np.random.default_rng((args.seed, 2))
            mol = records[int(rng.integers(len(records)))].molecule
        series = analyze.fine_sweep(params, mol, scaler, axis=args.axis,
                                    step=args.step if args.step else 5.0,
                                    feature_config=fc)
        path = os.path.join(out_dir, "fine_sweep.csv")
        analyze.write_fine_csv(series, path)
        outputs.append(path)
    else:
        fold = analyze.FoldEval(params=params, scaler=scaler, records=records)
        mode = "stepwise" if args.mode == "sweep" else "random"
        spec = analyze.RotationSpec(mode=mode, step=args.step or 45.0,
                                    seed=(args.seed, 2))
        rows = analyze.rotation_sweep(fold, spec, feature_config=fc)
        path = os.path.join(out_dir, "sweep.csv")
        analyze.write_sweep_csv(rows, path)
        outputs.append(path)
    _write_manifest(out_dir, "rotate-eval",
                    {"mode": args.mode, "axis": args.axis, "step": args.step},
                    {"root": args.seed}, [args.model, args.sdf, args.targets],
                    outputs, started)
    return 0


def cmd_contrib(args):
    started = _utcnow()
    out_dir = _ensure_out(args)
    params, scaler, fc = train.load_checkpoint(args.model)
    if args.agg != params.config.aggregation:
        raise molio.LoadError(
            f"--agg {args.agg} does not match checkpoint aggregation "
            f"{params.config.aggregation!r}")
    with open(args.sdf, "rb") as fh:
        molecules = molio.parse_sdf(fh.read())
    maps = []
    for mol in molecules:
        res = gcn3d.forward(build_graph_tensors(mol, fc), params)
        maps.append(analyze.contribution_map(res, molecule_id=mol.id))
    path = os.path.join(out_dir, "contributions.json")
    analyze.write_contributions(maps, path)
    _write_manifest(out_dir, "contrib", {"agg": args.agg}, {},
                    [args.model, args.sdf], [path], started)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_dataset_flags(p):
    p.add_argument("--sdf", required=True, help="structure file (SDF V2000, 3D coordinates)")
    p.add_argument("--targets", required=True, help="target CSV with a header row")
    p.add_argument("--id-column", default="id")
    p.add_argument("--target-column", default="target")
    p.add_argument("--id-field", default=None,
                   help="SDF data field holding the record id (default: title line)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="molgraph3d",
        description="3D molecular-graph convolution: featurize, train, evaluate, "
                    "rotation analysis, contribution maps.",
    )
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("MOLGRAPH3D_THREADS", "1")),
                        help="worker cap; 1 (the default) guarantees bit-reproducible runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="dump X / normalized adjacency / relative positions")
    p.add_argument("--sdf", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--explicit-h", action="store_true",
                   help="keep hydrogens as graph nodes")
    p.add_argument("--elements", default=None,
                   help="comma-separated 14-symbol vocabulary override")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train with stratified cross-validation")
    _add_dataset_flags(p)
    p.add_argument("--task", required=True, choices=["regression", "classification"])
    p.add_argument("--agg", default="sum", choices=["sum", "max"])
    p.add_argument("--config", default=None, help="flat JSON config file; flags win")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--fold", type=int, default=None, help="run exactly one fold")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--label-map", type=_label_map, default=None,
                   help='e.g. "CA=1,CM=1,CI=0" to merge raw labels into 0/1')
    p.add_argument("--explicit-h", action="store_true")
    p.add_argument("--elements", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics + predictions for a trained model")
    p.add_argument("--model", required=True)
    _add_dataset_flags(p)
    p.add_argument("--label-map", type=_label_map, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rotate-eval", help="rotation sweeps of a trained model")
    p.add_argument("--model", required=True)
    _add_dataset_flags(p)
    p.add_argument("--label-map", type=_label_map, default=None)
    p.add_argument("--mode", required=True, choices=["sweep", "random", "fine"])
    p.add_argument("--axis", default="z", choices=["x", "y", "z"])
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--molecule-id", default=None, help="fine mode: molecule to rotate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rotate_eval)

    p = sub.add_parser("contrib", help="atomic contribution maps")
    p.add_argument("--model", required=True)
    p.add_argument("--sdf", required=True)
    p.add_argument("--agg", required=True, choices=["sum", "max"],
                   help="must match the checkpoint's aggregation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_contrib)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (molio.ParseError, molio.LoadError, molio.WriteError,
            gcn3d.CheckpointError, chemper.EmptyMoleculeError,
            OSError, ValueError) as exc:
        print(f"molgraph3d: {exc}", file=sys.stderr)
        return 2
    except (train.TrainingError, ArithmeticError, RuntimeError) as exc:
        print(f"molgraph3d: computation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
