"""The whole pipeline through the command-line entry point on a tiny dataset."""
import json
import os
import tempfile

from imbseg.cli import main

tiny = ["--iterations", "5", "--patch-size", "16", "16", "16", "--base-channels", "2", "--val-interval", "0"]
with tempfile.TemporaryDirectory() as d:
    data, work = os.path.join(d, "data"), os.path.join(d, "work")
    codes = [main(["synth", "--cases", "5", "--seed", "3", "--out", data])]
    codes.append(main(["preprocess", "--data", data, "--work", work]))
    for fold in range(5):
        for loss in ("dice_ce", "dice_topk"):
            codes.append(main(["train", "--work", work, "--fold", str(fold), "--loss", loss, *tiny]))
    codes.append(main(["select", "--work", work]))
    codes.append(main(["predict", "--work", work, "--input", data, "--jobs", "2"]))
    codes.append(main(["evaluate", "--work", work, "--ref", data]))
    print("exit codes:", codes)
    print("ensemble:", [(m["fold"], m["loss"]) for m in json.load(open(os.path.join(work, "checkpoints", "ensemble.json")))["members"]])
    print("summary:", json.load(open(os.path.join(work, "metrics", "summary.json"))))
    print("missing work dir ->", main(["select", "--work", os.path.join(d, "nope")]))
