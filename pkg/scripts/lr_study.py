"""Loss reduction over the step budget for several learning rates and seeds.

    python scripts/lr_study.py --config configs/toy.cfg --lrs 1e-4 1e-3 1e-2 --seeds 0 1 2 3 4
"""
import argparse
import json
from pathlib import Path

from threadpoolctl import threadpool_limits

import mtrans.train as T


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy.cfg")
    ap.add_argument("--lrs", type=float, nargs="+", default=[1e-4, 1e-3, 1e-2])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--out", default=None, help="JSON file for the full loss curves")
    args = ap.parse_args()

    base = T.load_config(args.config)
    if args.steps is not None:
        base = base.replace(steps=args.steps)
    rows = []
    print(f"{'lr':>8s} {'seed':>4s} {'initial':>9s} {'final':>9s} {'ratio':>7s} {'psnr':>7s}")
    for lr in args.lrs:
        for s in args.seeds:
            rep, _ = T.train(base.replace(lr=lr, seed=s))
            ratio = rep.final_train_loss / rep.initial_train_loss
            rows.append({"lr": lr, "seed": s, "ratio": ratio, "losses": rep.losses,
                         "initial": rep.initial_train_loss, "final": rep.final_train_loss,
                         "psnr": rep.metrics["psnr"]["mean"]})
            print(f"{lr:8.0e} {s:4d} {rep.initial_train_loss:9.4f} {rep.final_train_loss:9.4f} "
                  f"{ratio:7.3f} {rep.metrics['psnr']['mean']:7.3f}", flush=True)
        hits = sum(r["ratio"] <= 0.5 for r in rows if r["lr"] == lr)
        print(f"lr {lr:g}: {hits}/{len(args.seeds)} seeds halve the loss")
    if args.out:
        Path(args.out).write_text(json.dumps(rows) + "\n")


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
