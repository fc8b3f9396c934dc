"""Command-line pipeline: synth, preprocess, train, select, predict, evaluate.

Every subcommand takes an optional ``--config`` JSON file. Its top-level keys
and the keys of a section named after the subcommand supply option values;
flags given on the command line win over both.

Work directory layout::

    work/preprocessed/{images,masks,records}/   plan.json
    work/checkpoints/fold{F}_{loss}.ckpt|.json|_log.csv   ensemble.json
    work/predictions/*.nii.gz
    work/metrics/metrics.csv   summary.json

Exit codes: 0 success, 2 configuration or usage error, 3 missing input
artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import nifti
from .inference import EnsembleSpec, MemberLoadError, ensemble_probabilities, load_members, threshold
from .losses import LossSpec
from .metrics import aggregate, evaluate_case, write_metrics_csv, write_summary_json
from .postprocess import remove_small_components
from .preprocess import median_spacing, preprocess_case, restore_to_original
from .segnet import CheckpointError, NetConfig, save_checkpoint
from .synthgen import SynthSpec, dataset_jobs, make_case, write_dataset
from .training import LOSS_GROUPS, Case, TrainConfig, make_folds, select_best_per_fold, train_fold, write_log_csv

logger = logging.getLogger("imbseg")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
N_FOLDS = 5


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map; results are identical for any ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _json_dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _json_load(path, what: str):
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {what}: {path}")
    with open(path) as fh:
        return json.load(fh)


def _case_id(path: str) -> str:
    name = os.path.basename(path)
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return name


def _nifti_files(directory: str) -> Dict[str, str]:
    if not os.path.isdir(directory):
        raise MissingArtifact(f"missing directory: {directory}")
    files = sorted(glob.glob(os.path.join(directory, "*.nii")) + glob.glob(os.path.join(directory, "*.nii.gz")))
    return {_case_id(f): f for f in files}


def _images_dir(path: str) -> str:
    sub = os.path.join(path, "images")
    return sub if os.path.isdir(sub) else path


def _triple(value, name: str):
    if isinstance(value, (int, float)):
        value = [value] * 3
    value = [float(v) for v in value]
    if len(value) != 3 or any(v <= 0 for v in value):
        raise ConfigError(f"{name} needs three positive values, got {value}")
    return tuple(value)


def _int_triple(value, name: str):
    if isinstance(value, int):
        value = [value] * 3
    if len(value) != 3 or any(int(v) != v or v < 1 for v in value):
        raise ConfigError(f"{name} needs three positive integers, got {value}")
    return tuple(int(v) for v in value)


# ---------------------------------------------------------------- synth


def _synth_job(args):
    spec, job = args
    return make_case(spec, *job)


def cmd_synth(o: dict) -> None:
    if o["cases"] < 1:
        raise ConfigError("cases must be ≥ 1")
    try:
        spec = SynthSpec(dims=_int_triple(o["dims"], "dims"), seed=o["seed"])
        jobs = dataset_jobs(spec, o["cases"], o["aneurysm_free_fraction"], prefix=o["prefix"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cases = _map(_synth_job, [(spec, j) for j in jobs], o["jobs"])
    write_dataset(cases, o["out"], spec)
    logger.info("wrote %d cases to %s", len(cases), o["out"])


# ---------------------------------------------------------------- preprocess


def _preprocess_job(args):
    image_path, mask_path, target, out = args
    image, header = nifti.read_nifti(image_path)
    mask = nifti.read_mask(mask_path) if mask_path else None
    img, m, rec = preprocess_case(image, mask, target)
    cid = _case_id(image_path)
    nifti.write_volume(img, os.path.join(out, "images", cid + ".nii.gz"))
    if m is not None:
        nifti.write_mask(m, os.path.join(out, "masks", cid + ".nii.gz"))
    with open(os.path.join(out, "records", cid + ".json"), "w") as fh:
        fh.write(rec.to_json() + "\n")
    return cid


def cmd_preprocess(o: dict) -> None:
    images = _nifti_files(_images_dir(o["data"]))
    if not images:
        raise MissingArtifact(f"no NIfTI images found under {o['data']}")
    mask_dir = os.path.join(o["data"], "masks")
    masks = _nifti_files(mask_dir) if os.path.isdir(mask_dir) else {}
    if o["target_spacing"] is None:
        target = median_spacing([nifti.read_volume(p).spacing for p in images.values()])
    else:
        target = _triple(o["target_spacing"], "target_spacing")
    out = os.path.join(o["work"], "preprocessed")
    for sub in ("images", "masks", "records"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    jobs = [(p, masks.get(cid), target, out) for cid, p in images.items()]
    ids = _map(_preprocess_job, jobs, o["jobs"])
    _json_dump({"target_spacing": list(target), "case_ids": ids, "labelled": sorted(set(ids) & set(masks))},
               os.path.join(out, "plan.json"))
    logger.info("preprocessed %d cases at spacing %s", len(ids), target)


# ---------------------------------------------------------------- train


def _load_training_set(work: str) -> Dict[str, Case]:
    pre = os.path.join(work, "preprocessed")
    plan = _json_load(os.path.join(pre, "plan.json"), "preprocessing plan (run preprocess first)")
    data = {}
    for cid in plan["labelled"]:
        img = nifti.read_volume(os.path.join(pre, "images", cid + ".nii.gz"))
        mask_path = os.path.join(pre, "masks", cid + ".nii.gz")
        if not os.path.exists(mask_path):
            raise MissingArtifact(f"missing preprocessed mask: {mask_path}")
        data[cid] = Case(cid, img, nifti.read_mask(mask_path))
    if len(data) < N_FOLDS:
        raise ConfigError(f"need at least {N_FOLDS} labelled cases for {N_FOLDS} folds, got {len(data)}")
    return data


def _member_stem(fold: int, loss: str) -> str:
    return f"fold{fold}_{loss}"


def cmd_train(o: dict) -> None:
    fold = o["fold"]
    if not isinstance(fold, int) or not 0 <= fold < N_FOLDS:
        raise ConfigError(f"fold must be one of 0..{N_FOLDS - 1}, got {fold}")
    if o["loss"] not in LOSS_GROUPS:
        raise ConfigError(f"loss must be one of {', '.join(LOSS_GROUPS)}, got {o['loss']}")
    if o["iterations"] < 1:
        raise ConfigError("iterations must be ≥ 1")
    try:
        net = NetConfig(base_channels=o["base_channels"], levels=o["levels"])
        tc = TrainConfig(
            loss=LossSpec(o["loss"], topk_fraction=o["topk_fraction"]),
            patch_size=_int_triple(o["patch_size"], "patch_size"),
            batch_size=o["batch_size"],
            iterations=o["iterations"],
            lr0=o["lr0"],
            val_interval=o["val_interval"],
            seed=o["seed"] + fold,
        )
        if any(p % 2**net.levels for p in tc.patch_size):
            raise ConfigError(f"patch_size {tc.patch_size} must be divisible by {2**net.levels}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    data = _load_training_set(o["work"])
    split = make_folds(sorted(data), N_FOLDS, o["fold_seed"])[fold]
    result = train_fold(data, split, net, tc)
    out = os.path.join(o["work"], "checkpoints")
    os.makedirs(out, exist_ok=True)
    stem = _member_stem(fold, o["loss"])
    save_checkpoint(os.path.join(out, stem + ".ckpt"), result.best_params, net)
    write_log_csv(result.log, os.path.join(out, stem + "_log.csv"))
    _json_dump(
        {
            "fold": fold,
            "loss": o["loss"],
            "val_dsc": result.best_val_dsc,
            "train_case_ids": list(split.train_case_ids),
            "val_case_ids": list(split.val_case_ids),
            "net": json.loads(net.to_json()),
            "train": tc.to_dict(),
        },
        os.path.join(out, stem + ".json"),
    )
    logger.info("fold %d %s: best validation DSC %s", fold, o["loss"], result.best_val_dsc)


# ---------------------------------------------------------------- select


def cmd_select(o: dict) -> None:
    ckdir = os.path.join(o["work"], "checkpoints")
    table, patch = {}, None
    for fold in range(N_FOLDS):
        for loss in LOSS_GROUPS:
            path = os.path.join(ckdir, _member_stem(fold, loss) + ".json")
            if os.path.exists(path):
                meta = _json_load(path, "training summary")
                table[(fold, loss)] = meta["val_dsc"]
                patch = meta["train"]["patch_size"]
    if not table:
        raise MissingArtifact(f"no training summaries under {ckdir}")
    groups = [g for g in LOSS_GROUPS if any(k[1] == g for k in table)]
    missing = [os.path.join(ckdir, _member_stem(f, g) + ".json") for f in range(N_FOLDS) for g in groups if (f, g) not in table]
    if missing:
        raise MissingArtifact(f"missing training summary: {missing[0]}")
    picks = select_best_per_fold(table, groups, N_FOLDS)
    members = [
        {"fold": f, "loss": g, "val_dsc": table[(f, g)], "checkpoint": _member_stem(f, g) + ".ckpt"} for f, g in picks
    ]
    table_rows = [{"fold": f, "loss": g, "val_dsc": v} for (f, g), v in sorted(table.items())]
    _json_dump({"members": members, "patch_size": patch, "threshold": 0.5, "table": table_rows},
               os.path.join(ckdir, "ensemble.json"))
    logger.info("selected %s", ", ".join(f"fold{f}:{g}" for f, g in picks))


# ---------------------------------------------------------------- predict


def _predict_job(args):
    image_path, members, patch, level, target, post, out = args
    models = load_members(EnsembleSpec(members, tuple(patch), level))
    image, header = nifti.read_nifti(image_path)
    img, _, rec = preprocess_case(image, None, target)
    probs = ensemble_probabilities(models, img, patch)
    mask = restore_to_original(threshold(probs, level), rec)
    removed = 0
    if post is not None:
        mask, removed = remove_small_components(mask, post[0], post[1])
    cid = _case_id(image_path)
    nifti.write_mask(mask, os.path.join(out, cid + ".nii.gz"), reference=header)
    return cid, removed


def cmd_predict(o: dict) -> None:
    manifest_path = o["ensemble"] or os.path.join(o["work"], "checkpoints", "ensemble.json")
    manifest = _json_load(manifest_path, "ensemble manifest (run select first)")
    base = os.path.dirname(os.path.abspath(manifest_path))
    members = [os.path.join(base, m["checkpoint"]) for m in manifest["members"]]
    for m in members:
        if not os.path.exists(m):
            raise MissingArtifact(f"missing checkpoint: {m}")
    plan = _json_load(os.path.join(o["work"], "preprocessed", "plan.json"), "preprocessing plan (run preprocess first)")
    images = _nifti_files(_images_dir(o["input"]))
    if not images:
        raise MissingArtifact(f"no NIfTI images found under {o['input']}")
    out = os.path.join(o["work"], "predictions")
    os.makedirs(out, exist_ok=True)
    post = None if o["no_postprocess"] else (o["min_size"], o["connectivity"])
    if o["connectivity"] not in (6, 18, 26):
        raise ConfigError(f"connectivity must be 6, 18 or 26, got {o['connectivity']}")
    jobs = [
        (p, members, manifest["patch_size"], manifest.get("threshold", 0.5), tuple(plan["target_spacing"]), post, out)
        for p in images.values()
    ]
    for cid, removed in _map(_predict_job, jobs, o["jobs"]):
        logger.info("%s: removed %d small components", cid, removed)


# ---------------------------------------------------------------- evaluate


def _evaluate_job(args):
    cid, pred_path, ref_path, conn = args
    return evaluate_case(nifti.read_mask(pred_path), nifti.read_mask(ref_path), cid, conn)


def cmd_evaluate(o: dict) -> None:
    if o["work"] is None and (o["pred"] is None or o["out"] is None):
        raise ConfigError("evaluate: give --work, or both --pred and --out")
    pred_dir = o["pred"] or os.path.join(o["work"], "predictions")
    refs = _nifti_files(o["ref"] if not os.path.isdir(os.path.join(o["ref"], "masks")) else os.path.join(o["ref"], "masks"))
    preds = _nifti_files(pred_dir)
    if not refs:
        raise MissingArtifact(f"no reference masks found under {o['ref']}")
    missing = [cid for cid in refs if cid not in preds]
    if missing:
        raise MissingArtifact(f"missing prediction for {missing[0]} in {pred_dir}")
    jobs = [(cid, preds[cid], refs[cid], o["connectivity"]) for cid in refs]
    cases = _map(_evaluate_job, jobs, o["jobs"])
    out = o["out"] or os.path.join(o["work"], "metrics")
    os.makedirs(out, exist_ok=True)
    write_metrics_csv(cases, os.path.join(out, "metrics.csv"))
    summary = aggregate(cases)
    write_summary_json(summary, os.path.join(out, "summary.json"))
    logger.info("mean DSC %.4f over %d cases", summary["mean_dsc"], summary["n_cases"])


# ---------------------------------------------------------------- parsing

COMMON = {"jobs": 1}

DEFAULTS: Dict[str, dict] = {
    "synth": {"cases": 30, "seed": 0, "out": None, "dims": [64, 64, 64], "aneurysm_free_fraction": 0.18, "prefix": "case"},
    "preprocess": {"data": None, "work": None, "target_spacing": None},
    "train": {
        "work": None,
        "fold": None,
        "loss": None,
        "iterations": 300,
        "patch_size": [32, 32, 32],
        "batch_size": 2,
        "lr0": 0.01,
        "val_interval": 100,
        "topk_fraction": 0.1,
        "base_channels": 8,
        "levels": 2,
        "seed": 0,
        "fold_seed": 0,
    },
    "select": {"work": None},
    "predict": {
        "work": None,
        "input": None,
        "ensemble": None,
        "no_postprocess": False,
        "min_size": 11,
        "connectivity": 26,
    },
    "evaluate": {"work": None, "pred": None, "ref": None, "out": None, "connectivity": 26},
}

REQUIRED = {
    "synth": ["out"],
    "preprocess": ["data", "work"],
    "train": ["work", "fold", "loss"],
    "select": ["work"],
    "predict": ["work", "input"],
    "evaluate": ["ref"],
}

COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "select": cmd_select,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = _Parser(prog="imbseg", description="Loss-ensemble segmentation pipeline for extremely imbalanced 3D data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, argument_default=S)
        sp.add_argument("--config", help="JSON config; flags override its values")
        sp.add_argument("--jobs", type=int, help="worker processes for per-case work; results do not depend on it")
        return sp

    sp = add("synth", "generate a synthetic dataset")
    sp.add_argument("--cases", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--dims", type=int, nargs=3)
    sp.add_argument("--aneurysm-free-fraction", type=float)
    sp.add_argument("--prefix")

    sp = add("preprocess", "crop, resample and normalize a dataset into the work dir")
    sp.add_argument("--data")
    sp.add_argument("--work")
    sp.add_argument("--target-spacing", type=float, nargs=3)

    sp = add("train", "train one fold of one loss group")
    sp.add_argument("--work")
    sp.add_argument("--fold", type=int)
    sp.add_argument("--loss")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--patch-size", type=int, nargs=3)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr0", type=float)
    sp.add_argument("--val-interval", type=int)
    sp.add_argument("--topk-fraction", type=float)
    sp.add_argument("--base-channels", type=int)
    sp.add_argument("--levels", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--fold-seed", type=int)

    sp = add("select", "pick the best loss group per fold and write the ensemble manifest")
    sp.add_argument("--work")

    sp = add("predict", "ensemble prediction, restoration and small-component removal")
    sp.add_argument("--work")
    sp.add_argument("--input")
    sp.add_argument("--ensemble")
    sp.add_argument("--no-postprocess", action="store_true")
    sp.add_argument("--min-size", type=int)
    sp.add_argument("--connectivity", type=int)

    sp = add("evaluate", "DSC, HD95 and volumetric similarity against reference masks")
    sp.add_argument("--work")
    sp.add_argument("--pred")
    sp.add_argument("--ref")
    sp.add_argument("--out")
    sp.add_argument("--connectivity", type=int)
    return p


def resolve_options(command: str, flags: dict) -> dict:
    """Defaults, then config file (top level, then the command's section), then flags."""
    opts = {**COMMON, **DEFAULTS[command]}
    cfg_path = flags.pop("config", None)
    if cfg_path:
        if not os.path.exists(cfg_path):
            raise MissingArtifact(f"missing config file: {cfg_path}")
        try:
            with open(cfg_path) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg_path}: invalid JSON ({exc})") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"{cfg_path}: top level must be an object")
        section = cfg.get(command, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{cfg_path}: section {command!r} must be an object")
        unknown = [k for k in section if k not in opts]
        if unknown:
            raise ConfigError(f"{cfg_path}: unknown option(s) for {command}: {', '.join(sorted(unknown))}")
        opts.update({k: v for k, v in cfg.items() if k in opts})
        opts.update(section)
    opts.update(flags)
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise ConfigError(f"{command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    if not isinstance(opts["jobs"], int) or opts["jobs"] < 1:
        raise ConfigError("jobs must be ≥ 1")
    return opts


def main(argv: Optional[List[str]] = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        flags = vars(ns)
        command = flags.pop("command")
        verbose = flags.pop("verbose")
        logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(message)s")
        opts = resolve_options(command, flags)
        COMMANDS[command](opts)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, MemberLoadError, CheckpointError, nifti.NiftiError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
