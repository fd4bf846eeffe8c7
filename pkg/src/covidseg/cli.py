"""Command-line front end: phantom, train, infer, eval, roc, pipeline.

Configuration comes from an optional ``key = value`` file (``#`` comments,
keys namespaced by module, unknown keys rejected) with command-line flags
taking precedence. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.

numpy is imported lazily inside the command handlers so that ``--threads``
can pin the BLAS thread count (OPENBLAS/OMP/MKL_NUM_THREADS) first; use
``--threads 1`` for bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing
from pathlib import Path

from .errors import DataError, NumericError

_PATH_KEYS = {"lesion.external_lung_mask"}
_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


# ---------------------------------------------------------------------------
# configuration file handling


def _config_registry() -> dict[str, type]:
    """Known config keys -> resolved type hints, derived from the dataclasses."""
    from .lesions import LesionConfig
    from .phantom import PhantomConfig
    from .preprocess import PreprocessConfig
    from .training import TrainConfig

    sections = {
        "preprocess": PreprocessConfig,
        "training": TrainConfig,
        "lesion": LesionConfig,
        "phantom": PhantomConfig,
    }
    registry: dict[str, type] = {}
    for prefix, cls in sections.items():
        hints = typing.get_type_hints(cls)
        for field in dataclasses.fields(cls):
            registry[f"{prefix}.{field.name}"] = hints[field.name]
    return registry


def _parse_value(key: str, text: str, hint, base_dir: Path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:  # Optional[...]
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        hint, origin = args[0], typing.get_origin(args[0])
    if origin is tuple:
        item_types = typing.get_args(hint)
        parts = text.replace(",", " ").split()
        if len(item_types) == 2 and item_types[1] is Ellipsis:
            item_types = (item_types[0],) * len(parts)
        if len(parts) != len(item_types):
            raise DataError(f"config key {key}: expected {len(item_types)} values, got {text!r}")
        return tuple(t(p) for t, p in zip(item_types, parts))
    if hint is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise DataError(f"config key {key}: expected a boolean, got {text!r}")
    if hint in (int, float):
        try:
            return hint(text)
        except ValueError:
            raise DataError(f"config key {key}: expected {hint.__name__}, got {text!r}") from None
    if key in _PATH_KEYS:
        return str((base_dir / text).resolve())
    return text


def load_config(path: str | None) -> dict[str, object]:
    """Parse a key = value config file against the known-key registry."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    registry = _config_registry()
    values: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        if key not in registry:
            raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, text, registry[key], path.parent)
    return values


def _section(config: dict[str, object], prefix: str, **overrides):
    """Materialize a config dataclass from file values plus non-None overrides."""
    from .lesions import LesionConfig
    from .phantom import PhantomConfig
    from .preprocess import PreprocessConfig
    from .training import TrainConfig

    cls = {
        "preprocess": PreprocessConfig,
        "training": TrainConfig,
        "lesion": LesionConfig,
        "phantom": PhantomConfig,
    }[prefix]
    kwargs = {
        key.split(".", 1)[1]: value
        for key, value in config.items()
        if key.startswith(prefix + ".")
    }
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# shared helpers


def _index_path(data: str) -> Path:
    path = Path(data)
    return path / "index.txt" if path.is_dir() else path


def _load_ct(path: Path):
    from .volumes import Volume, read_volume

    grid = read_volume(path)
    if not isinstance(grid, Volume):
        raise DataError(f"{path}: expected an int16 CT volume")
    return grid


def _load_mask(path: Path):
    from .volumes import BinaryMask, read_volume

    grid = read_volume(path)
    if not isinstance(grid, BinaryMask):
        raise DataError(f"{path}: expected a uint8 mask")
    return grid


def _pred_path(pred_dir: Path, case_id: str, kind: str) -> Path:
    path = pred_dir / f"{case_id}_{kind}.vhdr"
    if not path.is_file():
        raise DataError(f"missing prediction file: {path}")
    return path


def _write_lesion_outputs(result, out_dir: Path, stem: str) -> None:
    from .volumes import write_volume

    out_dir.mkdir(parents=True, exist_ok=True)
    write_volume(result.lesion_prob, out_dir / f"{stem}_lesion_prob.vhdr")
    write_volume(result.lesion_mask, out_dir / f"{stem}_lesion_mask.vhdr")
    write_volume(result.lung_mask, out_dir / f"{stem}_lung_mask.vhdr")
    write_volume(result.prob_covid, out_dir / f"{stem}_prob_covid.vhdr")
    write_volume(result.prob_norm, out_dir / f"{stem}_prob_norm.vhdr")


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    from .phantom import generate_dataset

    config = load_config(args.config)
    cfg = _section(config, "phantom")
    index = generate_dataset(cfg, args.normal, args.covid, args.seed, args.out)
    print(f"wrote {args.normal + args.covid} cases to {index}")
    return 0


def _train_one(role, data, out, report_path, config, epochs, seed, batch_size):
    from .network import save_params
    from .phantom import read_index
    from .training import train_model

    cases_meta = [c for c in read_index(_index_path(data)) if c.label == role]
    if not cases_meta:
        raise DataError(f"dataset has no cases labeled {role!r}")
    cases = [(c.load_ct(), c.load_lung()) for c in cases_meta]
    train_cfg = _section(
        config,
        "training",
        dataset_role=role,
        epochs=epochs,
        seed=seed,
        batch_size=batch_size,
    )
    pre_cfg = _section(config, "preprocess")
    params, report = train_model(cases, train_cfg, pre_cfg)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(params, out)
    report.checkpoint_path = str(out)
    report.to_csv(report_path)
    return report


def cmd_train(args) -> int:
    config = load_config(args.config)
    report_path = args.report or f"{args.out}.csv"
    report = _train_one(
        args.role, args.data, args.out, report_path, config, args.epochs, args.seed, None
    )
    best = report.epochs[report.best_epoch]
    print(
        f"trained {args.role} model: {args.out} "
        f"(best epoch {report.best_epoch}, val dice {best.val_dice:.4f})"
    )
    return 0


def cmd_infer(args) -> int:
    from .lesions import LesionConfig, infer_lesions
    from .network import load_params

    config = load_config(args.config)
    restrict = None if not args.no_restrict_lung else False
    lesion_cfg = _section(
        config,
        "lesion",
        tau_lesion=args.tau_lesion,
        tau_lung=args.tau_lung,
        restrict_to_lung=restrict,
        external_lung_mask=args.lung_mask,
    )
    pre_cfg = _section(config, "preprocess")
    ct_path = Path(args.ct)
    ct = _load_ct(ct_path)
    dl_covid = load_params(args.covid_model)
    dl_norm = load_params(args.norm_model)
    result = infer_lesions(ct, dl_covid, dl_norm, lesion_cfg, pre_cfg)
    stem = ct_path.stem.removesuffix("_ct")
    _write_lesion_outputs(result, Path(args.out_dir), stem)
    print(f"wrote lesion outputs for {stem} to {args.out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import (
        LESION_COLUMNS,
        LUNG_COLUMNS,
        aggregate,
        evaluate_lesion_case,
        evaluate_lung_case,
        write_report_csv,
    )
    from .phantom import read_index

    cases = read_index(_index_path(args.data))
    if args.label != "all":
        cases = [c for c in cases if c.label == args.label]
    if not cases:
        raise DataError(f"no cases to evaluate (label filter {args.label!r})")
    pred_dir = Path(args.pred)
    reports = []
    for case in cases:
        if args.mode == "lung":
            pred = _load_mask(_pred_path(pred_dir, case.case_id, "lung_mask"))
            reports.append(
                evaluate_lung_case(case.case_id, case.load_ct(), case.load_lung(), pred)
            )
        else:
            pred = _load_mask(_pred_path(pred_dir, case.case_id, "lesion_mask"))
            reports.append(
                evaluate_lesion_case(case.case_id, case.load_lesion(), pred, case.load_lung())
            )
    columns = LUNG_COLUMNS if args.mode == "lung" else LESION_COLUMNS
    write_report_csv(reports, args.out, columns)
    stats = aggregate(reports, columns)
    dice_stats = stats["dice"]
    print(
        f"evaluated {len(reports)} cases ({args.mode}): "
        f"dice {dice_stats.mean:.4f} +- {dice_stats.sd:.4f} -> {args.out}"
    )
    return 0


def cmd_roc(args) -> int:
    from .metrics import roc_curve_pooled, write_roc_csv
    from .phantom import read_index
    from .preprocess import bounding_box
    from .volumes import BinaryMask, read_volume

    import numpy as np

    cases = [c for c in read_index(_index_path(args.data)) if c.label == "covid"]
    if not cases:
        raise DataError("no covid cases for ROC")
    pred_dir = Path(args.pred)
    pooled = []
    for case in cases:
        prob = read_volume(_pred_path(pred_dir, case.case_id, "lesion_prob"))
        lung_pred = _load_mask(_pred_path(pred_dir, case.case_id, "lung_mask"))
        box = bounding_box(lung_pred, 0)
        region_voxels = np.zeros(lung_pred.geometry.shape_zyx, dtype=bool)
        region_voxels[box.slices_zyx()] = True
        region = BinaryMask(lung_pred.geometry, region_voxels)
        pooled.append((prob, case.load_lesion(), region))
    curve = roc_curve_pooled(pooled, args.n_thresholds)
    write_roc_csv(curve, args.out)
    print(f"pooled ROC over {len(pooled)} cases: AUC {curve.auc:.4f} -> {args.out}")
    return 0


def _write_subindex(path: Path, cases) -> None:
    lines = [
        f"{c.case_id} {c.label} {c.ct_path.name} {c.lung_path.name} {c.lesion_path.name}"
        for c in cases
    ]
    path.write_text("\n".join(lines) + "\n")


# Phantom-scale preprocessing for the end-to-end pipeline; a config file
# can still override any of these.
_PIPELINE_PRE_DEFAULTS = {
    "preprocess.target_rows": 48,
    "preprocess.target_cols": 80,
    "preprocess.crop_margin": 4,
}


def cmd_pipeline(args) -> int:
    import numpy as np

    from .lesions import infer_lesions, infer_lung, mean_prob_gap
    from .metrics import (
        LESION_COLUMNS,
        LUNG_COLUMNS,
        aggregate,
        evaluate_lesion_case,
        evaluate_lung_case,
        roc_curve_pooled,
        write_report_csv,
        write_roc_csv,
    )
    from .network import load_params
    from .phantom import generate_dataset, read_index
    from .preprocess import bounding_box
    from .volumes import BinaryMask, read_volume, write_volume

    config = {**_PIPELINE_PRE_DEFAULTS, **load_config(args.config)}
    pre_cfg = _section(config, "preprocess")
    phantom_cfg = _section(config, "phantom")
    lesion_cfg = _section(config, "lesion")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    # 1. synthetic dataset: training cases plus per-class held-out cases
    data_dir = out / "data"
    index = generate_dataset(
        phantom_cfg, args.normal + args.heldout, args.covid + args.heldout, args.seed, data_dir
    )
    cases = read_index(index)
    normals = [c for c in cases if c.label == "normal"]
    covids = [c for c in cases if c.label == "covid"]
    train_cases = normals[: args.normal] + covids[: args.covid]
    heldout_cases = normals[args.normal :] + covids[args.covid :]
    _write_subindex(data_dir / "train_index.txt", train_cases)
    _write_subindex(data_dir / "heldout_index.txt", heldout_cases)
    print(f"[pipeline] dataset: {len(train_cases)} training / {len(heldout_cases)} held-out cases")

    # 2. one model per role
    weights = {}
    for offset, role in enumerate(("normal", "covid")):
        weights[role] = out / f"dl{role}.w"
        report = _train_one(
            role,
            data_dir / "train_index.txt",
            weights[role],
            out / f"train_{role}.csv",
            config,
            args.epochs,
            args.seed + offset,
            None,
        )
        best = report.epochs[report.best_epoch]
        print(
            f"[pipeline] trained dl{role}: best epoch {report.best_epoch}, "
            f"val dice {best.val_dice:.4f}"
        )
    dl_norm = load_params(weights["normal"])
    dl_covid = load_params(weights["covid"])

    # 3. inference on every held-out case
    preds = out / "preds"
    gaps = {}
    for case in heldout_cases:
        ct = case.load_ct()
        result = infer_lesions(ct, dl_covid, dl_norm, lesion_cfg, pre_cfg)
        _write_lesion_outputs(result, preds, case.case_id)
        if case.label == "covid":
            gaps[case.case_id] = mean_prob_gap(
                result.prob_covid, result.prob_norm, case.load_lesion()
            )
        else:
            # lung evaluation for normal cases uses the normal-trained model
            _, lung_mask, _ = infer_lung(ct, dl_norm, pre_cfg, lesion_cfg.tau_lung)
            write_volume(lung_mask, preds / f"{case.case_id}_lung_mask.vhdr")
    print(f"[pipeline] inference done for {len(heldout_cases)} held-out cases")

    # 4. metric reports per label and mode
    summary: dict = {
        "seed": args.seed,
        "epochs": args.epochs,
        "mean_prob_gap": gaps,
        "mean_prob_gap_mean": float(np.mean(list(gaps.values()))),
    }
    for label in ("normal", "covid"):
        subset = [c for c in heldout_cases if c.label == label]
        lung_reports = []
        lesion_reports = []
        for case in subset:
            pred_lung = _load_mask(_pred_path(preds, case.case_id, "lung_mask"))
            lung_reports.append(
                evaluate_lung_case(case.case_id, case.load_ct(), case.load_lung(), pred_lung)
            )
            pred_lesion = _load_mask(_pred_path(preds, case.case_id, "lesion_mask"))
            lesion_reports.append(
                evaluate_lesion_case(case.case_id, case.load_lesion(), pred_lesion, case.load_lung())
            )
        write_report_csv(lung_reports, out / f"report_lung_{label}.csv", LUNG_COLUMNS)
        write_report_csv(lesion_reports, out / f"report_lesion_{label}.csv", LESION_COLUMNS)
        lung_stats = aggregate(lung_reports, LUNG_COLUMNS)
        summary[f"lung_dice_{label}"] = lung_stats["dice"].mean
        summary[f"lung_dice_{label}_sd"] = lung_stats["dice"].sd
        if label == "covid":
            lesion_stats = aggregate(lesion_reports, LESION_COLUMNS)
            summary["lesion_dice_mean"] = lesion_stats["dice"].mean
            summary["lesion_dice_sd"] = lesion_stats["dice"].sd
            summary["lesion_dice_cases"] = {r.case_id: r.dice for r in lesion_reports}
        else:
            summary["fp_lesion_lung_ratio"] = {
                r.case_id: r.lesion_lung_ratio_pred for r in lesion_reports
            }

    # 5. pooled ROC over the held-out covid cases
    pooled = []
    for case in heldout_cases:
        if case.label != "covid":
            continue
        prob = read_volume(_pred_path(preds, case.case_id, "lesion_prob"))
        lung_pred = _load_mask(_pred_path(preds, case.case_id, "lung_mask"))
        box = bounding_box(lung_pred, 0)
        region_voxels = np.zeros(lung_pred.geometry.shape_zyx, dtype=bool)
        region_voxels[box.slices_zyx()] = True
        pooled.append((prob, case.load_lesion(), BinaryMask(lung_pred.geometry, region_voxels)))
    curve = roc_curve_pooled(pooled, n_thresholds=512)
    write_roc_csv(curve, out / "roc.csv")
    summary["auc"] = roc_curve_pooled(pooled, n_thresholds=None).auc  # exact sweep

    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"[pipeline] lung dice normal {summary['lung_dice_normal']:.4f} / "
        f"covid {summary['lung_dice_covid']:.4f}; "
        f"lesion dice {summary['lesion_dice_mean']:.4f}; "
        f"gap {summary['mean_prob_gap_mean']:.4f}; AUC {summary['auc']:.4f}"
    )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covidseg",
        description="Unsupervised Covid lesion segmentation by dual lung-model subtraction.",
    )
    parser.add_argument("--threads", type=int, help="pin BLAS thread count (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--normal", type=int, required=True, help="number of normal cases")
    p.add_argument("--covid", type=int, required=True, help="number of covid cases")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one lung model (DL-Norm or DL-Covid)")
    p.add_argument("--role", choices=("normal", "covid"), required=True)
    p.add_argument("--data", required=True, help="dataset directory or index file")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--report", help="training report CSV (default: <out>.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="lesion inference on one CT")
    p.add_argument("--ct", required=True)
    p.add_argument("--covid-model", required=True)
    p.add_argument("--norm-model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tau-lesion", type=float)
    p.add_argument("--tau-lung", type=float)
    p.add_argument("--no-restrict-lung", action="store_true")
    p.add_argument("--lung-mask", help="external lung mask for the crop box")
    p.add_argument("--config")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="per-case metric report against reference masks")
    p.add_argument("--mode", choices=("lung", "lesion"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--label", choices=("normal", "covid", "all"), default="all")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", help="pooled ROC over predicted lesion probability maps")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-thresholds", type=int)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("pipeline", help="phantom -> train x2 -> infer -> eval -> roc")
    p.add_argument("--out", required=True, help="working directory for all artifacts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normal", type=int, default=40, help="training normal cases")
    p.add_argument("--covid", type=int, default=40, help="training covid cases")
    p.add_argument("--heldout", type=int, default=10, help="held-out cases per class")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--config")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.threads:
        if "numpy" in sys.modules:
            print("warning: numpy already imported; --threads may be ineffective", file=sys.stderr)
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # contract: one-line diagnostic, never a half-written run
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
