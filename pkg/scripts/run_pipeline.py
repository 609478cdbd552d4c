#!/usr/bin/env python3
"""End-to-end pipeline demo on synthetic data.

Simulates a full-scale exam population, runs the transactional grading
pipeline against the simulated backend, fits the IRT model, composes the
three confidence filters, and emits every report table into one directory.
"""
import argparse
import sys
from pathlib import Path

from gradekit.cli import main


def run(args):
    out = Path(args.out)
    sim = out / "sim"
    steps = [
        ["simulate", "--students", str(args.students), "--seed", str(args.seed),
         "--out-dir", str(sim)],
        ["grade", "--spec", str(sim / "spec.json"), "--truth", str(sim / "truth.csv"),
         "--seed", str(args.seed), "--parallelism", str(args.parallelism),
         "--out-dir", str(out / "grade")],
        ["fit-irt", "--spec", str(sim / "spec.json"), "--ai", str(out / "grade" / "ai.csv"),
         "--out", str(out / "model.json")],
        ["filter", "--spec", str(sim / "spec.json"), "--ai", str(out / "grade" / "ai.csv"),
         "--model", str(out / "model.json"), "--threshold", "0.5", "--risk", "0.5",
         "--exclude-types", "drawing,graphing", "--out", str(out / "manifest.csv")],
        ["metrics", "--spec", str(sim / "spec.json"), "--ai", str(out / "grade" / "ai.csv"),
         "--truth", str(sim / "truth.csv"), "--manifest", str(out / "manifest.csv"),
         "--threshold", "0.5", "--out-dir", str(out / "metrics")],
        ["sweep", "--spec", str(sim / "spec.json"), "--ai", str(out / "grade" / "ai.csv"),
         "--truth", str(sim / "truth.csv"), "--kind", "partial-credit",
         "--thresholds", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
         "--out", str(out / "sweep_credit.csv")],
        ["sweep", "--spec", str(sim / "spec.json"), "--ai", str(out / "grade" / "ai.csv"),
         "--truth", str(sim / "truth.csv"), "--kind", "risk", "--model", str(out / "model.json"),
         "--thresholds", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
         "--out", str(out / "sweep_risk.csv")],
        ["heatmap", "--spec", str(sim / "spec.json"), "--ai", str(out / "grade" / "ai.csv"),
         "--model", str(out / "model.json"), "--out", str(out / "heatmap.csv")],
    ]
    for argv in steps:
        print(f"$ gradekit {' '.join(argv)}")
        code = main(argv)
        if code != 0:
            return code
    print(f"\nall stages complete under {out}/")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--students", type=int, default=296)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--parallelism", type=int, default=30)
    parser.add_argument("--out", default="out/pipeline")
    sys.exit(run(parser.parse_args()))
