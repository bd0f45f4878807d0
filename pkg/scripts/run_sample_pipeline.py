"""Run every CLI stage on the bundled 100-trajectory sample and time it.

Each stage is a separate ``trajsim`` process, as a user would run it, so the
total includes interpreter and import start-up.

    python scripts/run_sample_pipeline.py [--workdir DIR]
"""
import argparse
import subprocess
import sys
import tempfile
import time
from pathlib import Path

STAGES = [
    ["clean"], ["grid"], ["features"], ["distances"], ["graph"], ["node2vec"], ["visual-synth"],
    ["train"], ["embed"], ["evaluate", "--baselines"], ["search", "--query-id", "0", "-k", "5"],
    ["export-geojson", "--query-id", "0"],
]


def run(workdir: Path) -> float:
    total = 0.0
    for stage in STAGES:
        t0 = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "trajsim.cli", *stage, "--config", "sample"],
                              cwd=workdir, capture_output=True, text=True)
        dt = time.perf_counter() - t0
        total += dt
        print(f"{stage[0]:<15} {dt:6.2f} s  exit {proc.returncode}")
        if proc.returncode:
            sys.stderr.write(proc.stderr)
            raise SystemExit(proc.returncode)
    print(f"{'total':<15} {total:6.2f} s")
    print((workdir / "artifacts" / "metrics.txt").read_text(), end="")
    return total


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path)
    args = ap.parse_args()
    if args.workdir:
        args.workdir.mkdir(parents=True, exist_ok=True)
        run(args.workdir)
    else:
        with tempfile.TemporaryDirectory() as d:
            run(Path(d))


if __name__ == "__main__":
    main()
