"""Run the attack matrix (MORE, PGD, EOS_ONLY, ablations, two budgets) on held-out utterances.

usage: python3 scripts/run_trends.py CHECKPOINT OUT_DIR [--n 50] [--K 150]
"""
import argparse
import json
import time

from more_asr import harness
from more_asr.attacks import AttackConfig
from more_asr.model import load_checkpoint


def matrix(K: int, K_a: int) -> list[harness.Cell]:
    return [
        harness.Cell("MORE", AttackConfig("MORE", K=K, K_a=K_a)),
        harness.Cell("PGD", AttackConfig("PGD", K=K, K_a=K_a)),
        harness.Cell("EOS_ONLY", AttackConfig("EOS_ONLY", K=K, K_a=K_a)),
        harness.Cell("MORE-Lacc", AttackConfig("MORE", K=K, K_a=0)),
        harness.Cell("MORE-Leff", AttackConfig("MORE", K=K, K_a=K)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint")
    ap.add_argument("out")
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--K", type=int, default=150)
    ap.add_argument("--K-a", type=int, default=50)
    ap.add_argument("--budgets", default="35,30")
    ap.add_argument("--methods", default=None)
    args = ap.parse_args()
    harness.configure_threads()
    cells = matrix(args.K, args.K_a)
    if args.methods:
        keep = args.methods.split(",")
        cells = [c for c in cells if c.name in keep]
    cfg = harness.ExperimentConfig(checkpoint=args.checkpoint, cells=cells, n_eval=args.n, out_dir=args.out,
                                   budgets_db=[float(b) for b in args.budgets.split(",")])
    bundle = load_checkpoint(args.checkpoint)
    t = time.time()
    res = harness.cmd_attack(cfg, bundle=bundle)
    print(json.dumps(res.clean))
    for c in res.cells:
        print(json.dumps(c))
    print(f"elapsed {time.time() - t:.1f}s")


if __name__ == "__main__":
    main()
