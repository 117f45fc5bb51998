#!/usr/bin/env python3
"""
Run the whole lab pipeline on a trace corpus, one stage per process:
calibrate -> fit-dist -> gen-traces -> train -> eval -> plot.
Works on Windows, macOS, and Linux.
"""

import argparse
import subprocess
import sys
import time
from pathlib import Path

LAB_MAIN = Path(__file__).parent / "lab" / "main.py"


def print_header():
    print("=" * 60)
    print("🚀 metarate pipeline")
    print("=" * 60)
    print()


def check_requirements():
    """Check that the lab's Python dependencies import"""
    print("🔍 Checking requirements...")
    missing = []
    for module in ("numpy", "scipy", "pandas", "matplotlib", "pydantic", "dotenv", "psutil", "tqdm"):
        try:
            __import__(module)
        except ImportError:
            missing.append(module)
    if missing:
        print(f"❌ Missing packages: {', '.join(missing)}")
        print("   Install them with: pip install -r requirements.txt")
        return False
    print(f"✅ Python {sys.version_info.major}.{sys.version_info.minor} with all packages")
    return True


def run_stage(name, args, common):
    """Run one CLI subcommand; returns its exit code"""
    print(f"\n▶️  {name}...")
    start = time.time()
    result = subprocess.run([sys.executable, str(LAB_MAIN), *args, *common])
    elapsed = time.time() - start
    if result.returncode == 0:
        print(f"✅ {name} finished in {elapsed:.1f}s")
    else:
        print(f"❌ {name} failed with exit code {result.returncode}")
    return result.returncode


def main():
    parser = argparse.ArgumentParser(description="Run every pipeline stage on a trace corpus")
    parser.add_argument("corpus", type=Path, help="directory of trace CSVs")
    parser.add_argument("--out", type=Path, default=Path("runs/pipeline"))
    parser.add_argument("--config", type=Path, help="KEY=VALUE configuration file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--count", type=int, default=20, help="synthetic evaluation traces")
    parser.add_argument("--skip-calibrate", action="store_true")
    args = parser.parse_args()

    print_header()
    if not check_requirements():
        return 1

    out = args.out
    config = args.config or (out / "metarate.env")
    if args.config is None:
        config.parent.mkdir(parents=True, exist_ok=True)
        config.touch()
    common = ["--config", str(config), "--seed", str(args.seed)]
    checkpoint = out / "train" / "checkpoints" / "theta0.bin"

    stages = [
        ("Calibrating d_prop estimator", ["calibrate", "--corpus", str(args.corpus)]),
        ("Fitting network-state distribution", ["fit-dist", "--corpus", str(args.corpus), "--out", str(out / "dist")]),
        ("Generating evaluation traces", ["gen-traces", "--dist", str(out / "dist" / "distribution.json"),
                                          "--count", str(args.count), "--out", str(out / "gen")]),
        ("Meta-training", ["train", "--dist", str(out / "dist" / "distribution.json"),
                           "--corpus", str(args.corpus), "--out", str(out / "train")]),
        ("Evaluating controllers", ["eval", "--traces", str(out / "gen" / "traces"),
                                    "--checkpoint", str(checkpoint), "--out", str(out / "eval")]),
        ("Plotting", ["plot", "--summary", str(out / "eval" / "summary.csv"), "--out", str(out / "eval")]),
    ]
    if args.skip_calibrate:
        stages = stages[1:]

    for name, stage_args in stages:
        code = run_stage(name, stage_args, common)
        if code != 0:
            return code

    print("\n" + "=" * 60)
    print("✅ Pipeline complete!")
    print("=" * 60)
    print(f"📋 Summary table: {out / 'eval' / 'summary.csv'}")
    print(f"🖼️  Figures:       {out / 'eval' / 'figures'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
