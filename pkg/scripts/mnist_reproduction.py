"""Desk-scale MNIST run of the certified-training protocol.

    python3 scripts/mnist_reproduction.py --data-dir ~/mnist --out runs/mnist

Trains the weighted and (optionally) unweighted dual-SDP networks, then
reports clean, PGD and certified test error at eps = 0.1. Expect hours per
network on a single CPU; ``--epochs`` and ``--limit`` shrink the run for
a smoke test.
"""
import argparse
import json
import logging
from pathlib import Path

from sdpcert.experiments import certification_protocol, load_mnist, mnist_config

TARGETS = {"clean_error": 0.06, "pgd_error": 0.22, "certified_error": 0.45}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", default="runs/mnist")
    p.add_argument("--schemes", default="weighted,unweighted")
    p.add_argument("--epochs", type=int, default=90)
    p.add_argument("--hidden", type=int, default=500)
    p.add_argument("--limit", type=int, default=None, help="use the first N training images")
    p.add_argument("--post-hoc-steps", type=int, default=2000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train_set, test_set = load_mnist(args.data_dir)
    if args.limit:
        train_set = train_set.subset(slice(0, args.limit))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for scheme in args.schemes.split(","):
        cfg = mnist_config(scheme, epochs=args.epochs, hidden=args.hidden, seed=args.seed,
                           workers=args.workers)
        res = certification_protocol(cfg, train_set, test_set, epsilon=0.1,
                                     post_hoc_steps=args.post_hoc_steps, workers=args.workers)
        res.net.save(out / f"{scheme}.certnet")
        summary[scheme] = {
            "clean_error": res.clean_error,
            "pgd_error": res.pgd_error,
            "certified_error": res.certified_error,
            "post_hoc_certified_error": res.post_hoc_error,
            "max_training_over_post_hoc_dual": float((res.training_duals
                                                      / res.post_hoc_duals).max()),
        }
        row = summary[scheme]
        verdict = ", ".join(f"{k} {row[k]:.4f} ({'ok' if row[k] <= t else 'MISSED'} <= {t})"
                            for k, t in TARGETS.items())
        print(f"{scheme}: {verdict}")
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")


if __name__ == "__main__":
    main()
