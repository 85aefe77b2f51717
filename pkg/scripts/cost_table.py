"""Surrogate-phase cost of HNH against the finest net alone (NH), in counted layer units and wall clock.

    python3 scripts/cost_table.py                       # full-size 6/15/30 x 500 nets, M = 1e4, 1e5
    python3 scripts/cost_table.py --depths 2 4 6 --width 32 --samples 10000 100000 1000000

The nets are trained only briefly: the table is about cost accounting, not
accuracy.  Counted units are asserted equal to the closed form; wall-clock
numbers depend on the machine and are only printed.
"""
import argparse

from hnh.cli import compare_costs
from hnh.config import ModelSpec, build_model
from hnh.core import HybridConfig, sample
from hnh.surrogate import TrainOptions, build_hierarchy, make_training_set


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depths", type=int, nargs="+", default=[6, 15, 30])
    ap.add_argument("--width", type=int, default=500)
    ap.add_argument("--samples", type=int, nargs="+", default=[10**4, 10**5])
    ap.add_argument("--train-size", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args(argv)

    model = build_model(ModelSpec())
    tb = sample(model.distribution, args.train_size, 1000)
    data = make_training_set(tb.values, model.evaluate_batch(tb.values), 0.2, seed=1000)
    hier = build_hierarchy(data, args.depths, args.width, TrainOptions(epochs=args.epochs, cv_folds=0))
    led = hier.training_ledger()
    led.add_true(args.train_size)
    rows = compare_costs(hier, {"ledger": led.to_dict()}, model, args.samples, args.seed, HybridConfig())

    print(f"depths {args.depths}, width {args.width}")
    print(f"{'M':>9} {'xi':>3} {'HNH units':>16} {'NH units':>16} {'online':>7} {'w/ train':>8} "
          f"{'HNH s':>7} {'NH s':>7}")
    for M, m, xi, hc, hp, nc, np_, ro, _, _, rt, wh, wn in rows:
        print(f"{M:>9} {xi:>3} {hc:>16} {nc:>16} {ro:>7.3f} {rt:>8.3f} {wh:>7.2f} {wn:>7.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
