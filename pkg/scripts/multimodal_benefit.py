"""Paired versus noise (and optionally self) auxiliary input over several seeds.

    python scripts/multimodal_benefit.py --config configs/toy.cfg --seeds 0 1 2 3 4 --lr 0.01 --out runs/benefit
"""
import argparse
import json
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

import mtrans.train as T
from mtrans.metrics import paired_t_test


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy.cfg")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--lr", type=float, default=None, help="overrides the config rate")
    ap.add_argument("--modes", nargs="+", default=["paired", "noise"], choices=["paired", "noise", "self"])
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    base = T.load_config(args.config)
    if args.lr is not None:
        base = base.replace(lr=args.lr)
    psnr = {m: [] for m in args.modes}
    seed_means = {m: [] for m in args.modes}
    for s in args.seeds:
        for mode in args.modes:
            rep, _ = T.train(base.replace(seed=s, aux_mode=mode))
            psnr[mode] += rep.metrics["psnr"]["values"]
            seed_means[mode].append(rep.metrics["psnr"]["mean"])
            print(f"seed {s} {mode:6s} loss {rep.initial_train_loss:.4f} -> {rep.final_train_loss:.4f} "
                  f"PSNR {rep.metrics['psnr']['mean']:.3f}", flush=True)

    ref = args.modes[0]
    result = {"config": base.flat(), "seeds": args.seeds, "psnr": psnr, "seed_means": seed_means, "tests": {}}
    print(f"\n{'mode':8s} {'mean PSNR':>10s} {'diff':>8s} {'p(sample)':>10s} {'p(seed)':>9s}")
    for mode in args.modes:
        row = f"{mode:8s} {np.mean(psnr[mode]):10.3f}"
        if mode != ref:
            a = paired_t_test(psnr[ref], psnr[mode])
            b = paired_t_test(seed_means[ref], seed_means[mode])
            result["tests"][mode] = {"mean_diff": a.mean_diff, "p_sample": a.p, "p_seed": b.p}
            row += f" {a.mean_diff:8.3f} {a.p:10.3g} {b.p:9.3g}"
        print(row)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "benefit.json").write_text(json.dumps(result, indent=1) + "\n")


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
