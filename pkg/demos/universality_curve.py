"""Training loss and test error of ERM on random-features data versus its equivalent Gaussian mixture."""
import argparse

from ulab.harness import ExperimentConfig, run_experiment, universality_gaps


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--loss", default="logistic-binary", choices=["logistic-binary", "squared"])
    ap.add_argument("--d", type=int, default=60)
    ap.add_argument("--p", type=int, default=90)
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = ExperimentConfig.from_json({
        "kind": "universality-curve",
        "data": {"type": "features", "d": args.d, "p": args.p, "activation": "tanh-centered"},
        "problem": {"loss": args.loss, "lam": 1e-4}, "alpha_grid": [0.5, 1, 2, 4],
        "n_test": 5000, "seeds": args.seeds, "moments_n": 50_000})
    tab = run_experiment(cfg, seed=args.seed)
    print(f"{'quantity':<12} {'alpha':>5} {'data':>9} {'gmm':>9} {'gap':>9} {'3 SE':>9}")
    for q in ("train_error", "test_error"):
        for g in universality_gaps(tab, q):
            print(f"{q:<12} {g['alpha']:>5g} {g['data']:>9.4f} {g['gmm']:>9.4f} {g['gap']:>9.4f} {g['tolerance']:>9.4f}")


if __name__ == "__main__":
    main()
