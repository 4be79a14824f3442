"""Upper bounds on adversarial error versus eps for each training objective.

    python3 scripts/bounds_sweep.py --out runs/sweep.csv
    python3 scripts/bounds_sweep.py --data-dir ~/mnist --hidden 500 --epochs 90

Trains one network per objective (synthetic blobs unless ``--data-dir``
points at MNIST) and writes the SDP, spectral and Frobenius bound errors on
held-out data, one row per (objective, eps). Plotting is left to the reader.
"""
import argparse
import csv
import logging

from sdpcert import bounds
from sdpcert.data import synth_blobs
from sdpcert.experiments import BOUND_COLUMNS, bounds_table, load_mnist
from sdpcert.train import OBJECTIVES, TrainConfig, train

# strengths that train well on the default synthetic task
SYNTH_LAMBDA = {"normal": 0.0, "frobenius": 0.01, "spectral": 0.01, "adversarial": 0.5,
                "sdp_dual": 0.003}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data-dir", default=None)
    p.add_argument("--out", default="bounds_sweep.csv")
    p.add_argument("--epsilons", default="0,0.01,0.02,0.05,0.1,0.15,0.2")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--dual-steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    eps_grid = [float(e) for e in args.epsilons.split(",")]

    if args.data_dir:
        train_set, test_set = load_mnist(args.data_dir)
        lams = {}
    else:
        train_set, test_set = synth_blobs(3, 20, 600, seed=args.seed).split(400)
        lams = SYNTH_LAMBDA
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("objective",) + BOUND_COLUMNS)
        for objective in OBJECTIVES:
            cfg = TrainConfig(objective=objective, lam=lams.get(objective), hidden=args.hidden,
                              epochs=args.epochs, lr=args.lr, seed=args.seed,
                              log_certificate=False)
            net = train(cfg, train_set).net
            cert = bounds.certify_network(net, steps=args.dual_steps, epsilon=eps_grid)
            for row in bounds_table(net, test_set.inputs, test_set.labels, eps_grid, cert):
                w.writerow([objective] + [repr(row[c]) for c in BOUND_COLUMNS])
                logging.info("%s %s", objective, row)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
