"""Run one experiment end to end: reference MC, training, estimation, cost comparison, diagnostic.

    python3 scripts/run_pipeline.py scripts/configs/diffusion_33.json
    python3 scripts/run_pipeline.py scripts/configs/benchmark.json --skip mc-reference

Outputs land in the config's ``out`` directory; a one-screen summary is
printed at the end.
"""
import argparse
import csv
import json
import sys
import time
from pathlib import Path

from hnh import cli
from hnh.config import load_config

STAGES = ["mc-reference", "train", "estimate", "compare", "diagnose"]


def summarize(out: Path) -> None:
    ref = out / "reference.json"
    if ref.exists():
        e = json.loads(ref.read_text())["estimate"]
        print(f"MC reference   p = {e['p_hat']:.4g} +- {e['std_err']:.2g}  (M = {e['samples']})")
    man = out / "manifest.json"
    if man.exists():
        m = json.loads(man.read_text())
        e = m["result"]["estimate"]
        total = m["ledgers"]["total"]["true_solves"]
        print(f"HNH            p = {e['p_hat']:.4g} +- {e['std_err']:.2g}  (M = {e['samples']}, "
              f"{total} true solves incl. training, {m['result']['trace']['stop_reason']})")
    cmp_csv = out / "compare.csv"
    if cmp_csv.exists():
        with open(cmp_csv, newline="") as fh:
            for r in csv.DictReader(fh):
                print(f"cost M={int(r['M']):>8}  HNH/NH online {float(r['ratio_online']):.3f}  "
                      f"with training {float(r['ratio_with_training']):.3f}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--skip", action="append", default=[], choices=STAGES)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    out = Path(args.out or load_config(args.config).out)
    for stage in STAGES:
        if stage in args.skip:
            continue
        t0 = time.perf_counter()
        code = cli.main([stage, "--config", args.config, "--out", str(out)])
        print(f"[{stage}] exit {code} in {time.perf_counter() - t0:.1f} s", flush=True)
        if code:
            return code
    summarize(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
