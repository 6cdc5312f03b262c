"""Replica prediction of the logistic test error on a symmetric two-cluster mixture, next to finite-size ERM."""
import argparse

from ulab.harness import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, default=400)
    ap.add_argument("--lam", type=float, default=0.01)
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    alphas = [0.5, 1.0, 2.0, 4.0]
    cfg = ExperimentConfig.from_json({
        "kind": "replica-validation",
        "data": {"type": "mixture", "generator": "symmetric", "d": args.d, "mean_norm": 1.0, "var": 0.5},
        "problem": {"loss": "logistic-binary", "lam": args.lam}, "alpha_grid": alphas, "n_test": 5000,
        "seeds": args.seeds, "options": {"variants": ["data"]}})
    tab = run_experiment(cfg, seed=0)
    print(f"{'alpha':>5} {'replica':>9} {'erm':>9} {'se':>7} {'train(rep)':>11} {'train(erm)':>11}")
    for a in alphas:
        r = tab.cell(a, "replica", "test_error")[0]
        e, se, _ = tab.cell(a, "data", "test_error")
        tr = tab.cell(a, "replica", "train_error")[0]
        te = tab.cell(a, "data", "train_error")[0]
        print(f"{a:>5g} {r:>9.4f} {e:>9.4f} {se:>7.4f} {tr:>11.4f} {te:>11.4f}")


if __name__ == "__main__":
    main()
