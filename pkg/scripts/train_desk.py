"""Train (or reuse) the desk-scale checkpoints used by the acceptance suite.

    python scripts/train_desk.py --kappas 3,2,1,0

Each run lands in ``$MARKPLUGGER_WEIGHTS/runs/desk_k<kappa>_<hash>`` and is
resumed from ``last.pt`` if interrupted.
"""

import argparse
import json
import time

from markplugger.train import desk_recipe, train_or_load


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kappas", default="3,2,1,0", help="comma-separated carrier channels")
    ap.add_argument("--every", type=int, default=200, help="print a progress line every N steps")
    args = ap.parse_args()
    for kappa in (int(k) for k in args.kappas.split(",")):
        cfg = desk_recipe(kappa)
        t0 = time.time()

        def progress(rec):
            if rec.step % args.every == 0:
                print(f"kappa={kappa} step {rec.step} total {rec.total:.4f} wm_mse {rec.raw['wm_mse']:.4f} "
                      f"{time.time() - t0:.0f}s", flush=True)

        _, _, manifest = train_or_load(cfg, progress=progress)
        print(json.dumps({"kappa": kappa, "out_dir": cfg.out_dir, **manifest["final_eval"]}), flush=True)


if __name__ == "__main__":
    main()
