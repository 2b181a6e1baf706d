"""Run every CLI stage for one config: synth, graph, train, annotate, evaluate, replicate, diagnose, report.

    python scripts/run_pipeline.py configs/synthetic.toml [--threads 4] [--set lam=1.0 ...]
"""

import argparse
import sys
import time

from mrsae.cli import COMMANDS, main


def run(config, extra):
    for cmd in COMMANDS:
        t0 = time.perf_counter()
        code = main([cmd, "--config", config, *extra])
        print(f"[{cmd}] exit {code} in {time.perf_counter() - t0:.1f}s", flush=True)
        if code:
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--threads")
    ap.add_argument("--seed")
    ap.add_argument("--out")
    ap.add_argument("--set", action="append", default=[])
    a = ap.parse_args()
    extra = []
    for flag in ("threads", "seed", "out"):
        if getattr(a, flag) is not None:
            extra += [f"--{flag}", getattr(a, flag)]
    for s in a.set:
        extra += ["--set", s]
    sys.exit(run(a.config, extra))
