"""Run every config in configs/ through the gnda CLI.

    python3 scripts/run_all.py                  # all configs into ./out/<name>
    python3 scripts/run_all.py noisy_l63 param  # only names containing these words
"""
import argparse
import sys
import time
from pathlib import Path

from gnda import cli
from gnda.experiments import load_config

ROOT = Path(__file__).resolve().parents[1]
COMMAND = {"noisefree": "run", "noisy": "run", "param": "param", "compare_wc": "compare"}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("only", nargs="*", help="substrings of config names to run")
    p.add_argument("--out", default="out", help="parent output directory")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args(argv)

    status = 0
    for path in sorted((ROOT / "configs").glob("*.toml")):
        name = path.stem
        if args.only and not any(s in name for s in args.only):
            continue
        mode = load_config(path)[0].mode
        cmd = COMMAND.get(mode, "sweep")
        t0 = time.perf_counter()
        code = cli.main([cmd, "--config", str(path), "--out", str(Path(args.out) / name),
                         "--workers", str(args.workers)])
        print(f"== {name}: exit {code}, {time.perf_counter() - t0:.0f}s\n", flush=True)
        status = status or code
    return status


if __name__ == "__main__":
    sys.exit(main())
