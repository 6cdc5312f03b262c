"""Sup-W1 between feature projections and the equivalent mixture as p grows, with the sign/spike contrast."""
import argparse

from ulab.harness import ExperimentConfig, decay_table, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=int, nargs="+", default=[100, 200, 400])
    ap.add_argument("--seeds", type=int, default=2)
    ap.add_argument("--n-per-p", type=int, default=60)
    args = ap.parse_args()
    cfg = ExperimentConfig.from_json({
        "kind": "clt-decay", "data": {"type": "features", "d": 1, "p": 1, "activation": "tanh-centered"},
        "seeds": args.seeds, "options": {"p_grid": args.p, "n_per_p": args.n_per_p}})
    tab = run_experiment(cfg, seed=0)
    dt = decay_table(tab, "sup_w1")
    spike = decay_table(tab, "contrast_sup_w1_spike").mean
    rand = decay_table(tab, "contrast_sup_w1_random").mean
    print(f"{'p':>5} {'sup W1':>8} {'se':>7} {'sign spike':>11} {'sign random':>12}")
    for p, m, s, a, b in zip(dt.p, dt.mean, dt.se, spike, rand):
        print(f"{p:>5} {m:>8.4f} {s:>7.4f} {a:>11.4f} {b:>12.4f}")
    print(f"log-log slope {dt.slope:.2f}; monotone within 1 SE: {dt.monotone_decreasing(1.0)}")


if __name__ == "__main__":
    main()
