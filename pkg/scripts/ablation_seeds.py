"""Run an ablation matrix for several seeds and pool the per-sample comparisons.

    python scripts/ablation_seeds.py --matrix configs/fusion_ablation.matrix --seeds 0 1 2 --out runs/fusion
    python scripts/ablation_seeds.py --matrix configs/alpha_sweep.matrix --seeds 0 1 2 --out runs/alpha
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
    ap.add_argument("--matrix", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--reference", default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    path = Path(args.matrix)
    cells = T.parse_matrix(path.read_text(), str(path))
    ref = args.reference or next(iter(cells))
    values = {name: {"psnr": [], "ssim": [], "nmse": []} for name in cells}
    for s in args.seeds:
        sub = Path(args.out) / f"seed{s}" if args.out else None
        res = T.run_ablation({k: c.replace(seed=s) for k, c in cells.items()}, sub, ref)
        print(f"-- seed {s}\n{res.table()}", flush=True)
        for name, rep in res.reports.items():
            for metric in values[name]:
                values[name][metric] += rep.metrics[metric]["values"]

    pooled = {}
    print(f"pooled over seeds {args.seeds} (reference {ref})")
    print(f"{'cell':<24s} {'psnr':>9s} {'ssim':>8s} {'nmse':>9s} {'dpsnr':>8s} {'p':>9s}")
    for name, v in values.items():
        t = paired_t_test(v["psnr"], values[ref]["psnr"]) if name != ref else None
        pooled[name] = {m: float(np.mean(x)) for m, x in v.items()}
        if t is not None:
            pooled[name].update(dpsnr=t.mean_diff, p=t.p)
        print(f"{name:<24s} {np.mean(v['psnr']):9.3f} {np.mean(v['ssim']):8.4f} {np.mean(v['nmse']):9.5f}"
              + (f" {t.mean_diff:8.3f} {t.p:9.3g}" if t else ""))
    if args.out:
        Path(args.out, "pooled.json").write_text(json.dumps(pooled, indent=1) + "\n")


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
