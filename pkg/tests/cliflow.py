"""Drive every CLI command once inside a working directory."""
from __future__ import annotations

import os
from pathlib import Path

from moe_absa.cli import main

TRAIN_FLAGS = ["--lr", "1e-3", "--epochs", "1", "--hidden", "16", "--dim", "64"]


def run_all(workdir: Path) -> dict[str, bytes]:
    """Run synth, preprocess, train (three stages), eval and route-stats with
    relative paths, then return every produced file keyed by relative path."""
    old = os.getcwd()
    os.chdir(workdir)
    try:
        steps = [
            ["synth", "--n", "150", "--out", "raw.csv", "--seed", "3"],
            ["preprocess", "raw.csv", "clean.csv"],
            ["train", "sentiment", "--data", "clean.csv", "--out-dir", "sent", "--seed", "3", *TRAIN_FLAGS],
            ["train", "acd", "--data", "clean.csv", "--out-dir", "acd", "--seed", "3", *TRAIN_FLAGS],
            ["train", "absa", "--data", "clean.csv", "--out-dir", "absa", "--seed", "3", *TRAIN_FLAGS],
            ["eval", "--checkpoint", "absa/model.ckpt", "--data", "clean.csv", "--out-dir", "absa_eval", "--stage", "absa"],
            ["eval", "--checkpoint", "sent/model.ckpt", "--data", "clean.csv", "--out-dir", "sent_eval"],
            ["route-stats", "--trace", "absa/routing_trace.csv", "--out-dir", "routes"],
        ]
        for argv in steps:
            code = main(argv)
            if code != 0:
                raise RuntimeError(f"{argv[0]} exited {code}")
        return {str(p.relative_to(workdir)): p.read_bytes() for p in sorted(workdir.rglob("*")) if p.is_file()}
    finally:
        os.chdir(old)
