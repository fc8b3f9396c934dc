import hashlib
import json
import os

import pytest

from imbseg.cli import main

TINY_TRAIN = {"train": {"iterations": 2, "patch_size": [16, 16, 16], "base_channels": 2, "val_interval": 0}}


def run_cli_pipeline(root, jobs):
    """synth -> preprocess -> train x10 -> select -> predict -> evaluate at toy size."""
    root = str(root)
    os.makedirs(root, exist_ok=True)
    cfg = os.path.join(root, "cfg.json")
    with open(cfg, "w") as fh:
        json.dump(TINY_TRAIN, fh)
    data, work = os.path.join(root, "data"), os.path.join(root, "work")
    j = ["--jobs", str(jobs)]
    codes = {}
    codes["synth"] = main(["synth", "--cases", "5", "--seed", "3", "--out", data] + j)
    codes["preprocess"] = main(["preprocess", "--data", data, "--work", work] + j)
    train = []
    for fold in range(5):
        for loss in ("dice_ce", "dice_topk"):
            train.append(main(["train", "--config", cfg, "--work", work, "--fold", str(fold), "--loss", loss] + j))
    codes["train"] = max(train)
    codes["select"] = main(["select", "--work", work] + j)
    codes["predict"] = main(["predict", "--work", work, "--input", data] + j)
    codes["evaluate"] = main(["evaluate", "--work", work, "--ref", data] + j)
    return codes


def tree_digest(root):
    """{relative path: sha256} for every file under ``root`` except the config."""
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root)
            if rel == "cfg.json":
                continue
            with open(path, "rb") as fh:
                out[rel] = hashlib.sha256(fh.read()).hexdigest()
    return out


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """The toy pipeline run twice: serially and with four workers."""
    base = tmp_path_factory.mktemp("cli")
    serial, parallel = base / "serial", base / "parallel"
    return {
        "serial": (serial, run_cli_pipeline(serial, 1)),
        "parallel": (parallel, run_cli_pipeline(parallel, 4)),
    }
