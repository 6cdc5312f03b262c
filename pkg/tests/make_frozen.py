"""Regenerate tests/data/frozen_oracles.json from the independent oracles.

Run once by hand; the tests read the frozen file and never call this.
"""
import json
from pathlib import Path

import numpy as np

import oracles as o

OUT = Path(__file__).parent / "data" / "frozen_oracles.json"


def main():
    rng = np.random.default_rng(20261014)
    doc = {}

    d = 400
    sigma = np.linspace(0.5, 1.5, d)
    w_star = np.cos(np.arange(d))
    doc["ridge_de"] = {"sigma": sigma.tolist(), "w_star": w_star.tolist(), "noise_var": 0.25, "lam": 0.1,
                       "alpha": 2.0,
                       "test_mse": o.ridge_asymptotic_mse(sigma, w_star / np.sqrt(d), 0.25, 0.1, int(2 * d))}

    cases = []
    for loss in ("squared", "logistic-binary"):
        for y in (-1.0, 1.0):
            for V in (0.05, 1.0, 7.5):
                for om in (-4.0, -0.3, 0.0, 2.2):
                    cases.append({"loss": loss, "y": y, "V": V, "omega": om, "prox": o.prox_scalar(loss, y, V, om)})
    doc["prox"] = cases

    X = rng.standard_normal((60, 2)) + np.array([0.7, -0.4])
    y = np.where(rng.random(60) < 0.5 * (1 + np.tanh(X @ np.array([1.2, 0.8]))), 1.0, -1.0)
    th, h = o.logistic_grid_minimizer(X, y, 0.05)
    doc["logistic_grid"] = {"X": X.tolist(), "y": y.tolist(), "lam": 0.05, "theta": th.tolist(), "spacing": h}

    Xr = rng.standard_normal((30, 10))
    yr = Xr @ rng.standard_normal(10) / np.sqrt(10) + 0.5 * rng.standard_normal(30)
    m, C = o.gaussian_posterior(Xr, yr, 0.1, 2.0, 1.0)
    doc["ridge_posterior"] = {"X": Xr.tolist(), "y": yr.tolist(), "lam": 0.1, "beta": 2.0, "tau": 1.0,
                              "mean": m.tolist(), "cov_diag": np.diag(C).tolist(),
                              "log_z": o.ridge_log_partition(Xr, yr, 0.1, 2.0, 1.0)}

    Xl = rng.standard_normal((4, 2))
    yl = np.array([1.0, -1.0, 1.0, 1.0])
    doc["logistic_partition"] = {"X": Xl.tolist(), "y": yl.tolist(), "lam": 0.01, "beta": 1.0, "tau": 1.0,
                                 "log_z": o.logistic_log_partition_grid(Xl, yl, 0.01, 1.0, 1.0)}

    doc["shift_ks"] = {"delta": 0.5, "ks": o.shift_ks(0.5)}
    doc["tanh_mean"] = [{"m": m_, "s": s_, "value": o.gaussian_feature_mean(np.tanh, m_, s_)}
                        for m_, s_ in ((0.0, 1.0), (0.4, 0.7), (-1.1, 1.9))]

    OUT.parent.mkdir(exist_ok=True)
    OUT.write_text(json.dumps(doc, indent=1))
    print("wrote", OUT)


if __name__ == "__main__":
    main()
