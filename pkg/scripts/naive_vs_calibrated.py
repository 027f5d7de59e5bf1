"""Output error of naive vs calibrated INT8 on both weight presets."""

import argparse

from qgraph.calibration import CalibrationMode, calibrate
from qgraph.model import ToyConfig, build_toy_transformer, toy_feeds
from qgraph.rewriter import naive_quantize_pass, run_passes, verify_equivalence


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--calib", type=int, default=60)
    ap.add_argument("--eval", type=int, default=20)
    ap.add_argument("--mode", choices=[m.value for m in CalibrationMode], default="Symmetric")
    args = ap.parse_args()

    print(f"{'preset':<12} {'seed':>4} {'naive':>8} {'calibrated':>11}")
    for preset in ("gaussian", "long_tailed"):
        for seed in args.seeds:
            cfg = ToyConfig(weights=preset, seed=seed)
            g = build_toy_transformer(cfg)
            table = calibrate(g, toy_feeds(cfg, args.calib, seed=1), mode=CalibrationMode(args.mode))
            feeds = toy_feeds(cfg, args.eval, seed=7)
            cal = run_passes(g, ["calibrated", "gathernd"], table)[0]
            naive = naive_quantize_pass(g)[0]
            e_n = verify_equivalence(g, naive, feeds, tol=1.0).worst_rel_l2
            e_c = verify_equivalence(g, cal, feeds, tol=1.0).worst_rel_l2
            print(f"{preset:<12} {seed:>4} {e_n:>8.4f} {e_c:>11.4f}")


if __name__ == "__main__":
    main()
