"""Command-line entry point: ``ulab gen|moments|erm|gibbs|replica|clt|experiment``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
log = logging.getLogger("ulab")


def _read_config(path) -> dict:
    from .errors import ConfigError
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _write_json(out: Path, name: str, doc) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(doc, indent=1))
    log.info("wrote %s", path)
    return path


def _need(cfg: dict, key: str):
    from .errors import ConfigError
    if key not in cfg:
        raise ConfigError(f"config lacks {key!r}")
    return cfg[key]


def cmd_gen(cfg: dict, seed: int, out: Path) -> None:
    """Draw ``n`` labelled samples from a data source and save them as UMDS."""
    from .rng import stream
    from .sources import MixtureSource, make_source
    from .umds import save_external_dataset
    src = make_source(_need(cfg, "data"), seed)
    ds = src.sample(int(_need(cfg, "n")), stream(seed, "gen"))
    save_external_dataset(ds, out / "data")
    if isinstance(src, MixtureSource):
        src.spec.save(out / "mixture.json")


def cmd_moments(cfg: dict, seed: int, out: Path) -> None:
    """Per-cluster moments of a UMDS dataset and the corresponding equivalent GMM."""
    from .moments import build_equivalent_gmm, estimate_class_moments
    from .umds import load_external_dataset
    ds = load_external_dataset(Path(_need(cfg, "input")))
    m = estimate_class_moments(ds, diagonal=bool(cfg.get("diagonal", False)))
    out.mkdir(parents=True, exist_ok=True)
    m.save(out / "moments.json")
    build_equivalent_gmm(m).save(out / "equivalent_gmm.json")


def cmd_erm(cfg: dict, seed: int, out: Path) -> None:
    from .erm import ErmProblem, empirical_risk, fit, test_error
    from .harness import test_metric
    from .umds import load_external_dataset
    train = load_external_dataset(Path(_need(cfg, "train")))
    prob = ErmProblem.from_json(_need(cfg, "problem"))
    est = fit(train, prob)
    out.mkdir(parents=True, exist_ok=True)
    est.save(out / "estimator.json")
    summary = {"problem": prob.to_json(), "train_loss": empirical_risk(est, train, prob, with_reg=False),
               "objective": empirical_risk(est, train, prob), "report": est.report}
    if "test" in cfg:
        test = load_external_dataset(Path(cfg["test"]))
        summary["test_error"] = test_error(est, test, cfg.get("metric", test_metric(prob, test)))
    _write_json(out, "erm_summary.json", summary)


def cmd_gibbs(cfg: dict, seed: int, out: Path) -> None:
    import numpy as np
    from .erm import ErmProblem
    from .gibbs import free_energy, free_energy_ti, gibbs_chains, merge_chains
    from .harness import gibbs_config_from
    from .rng import stream
    from .umds import load_external_dataset
    train = load_external_dataset(Path(_need(cfg, "train")))
    prob = ErmProblem.from_json(_need(cfg, "problem"))
    gcfg = gibbs_config_from(_need(cfg, "gibbs"))
    chain = merge_chains(gibbs_chains(prob, train, gcfg, stream(seed, "chain"), int(cfg.get("n_chains", 4))))
    S = chain.samples.reshape(len(chain), -1)
    summary = {"beta": gcfg.beta, "n_samples": len(chain), "acceptance_rate": chain.acceptance_rate,
               "step_size": chain.step_size, "shape": list(chain.samples.shape[1:]),
               "mean": S.mean(axis=0).tolist(), "cov_diag": S.var(axis=0, ddof=1).tolist()}
    fe = cfg.get("free_energy")
    if fe:
        methods = [fe] if isinstance(fe, str) else list(fe)
        summary["free_energy"] = {}
        for m in methods:
            r = stream(seed, "free-energy", m)
            if m == "ti":
                est = free_energy_ti(prob, train, gcfg.beta, gcfg.prior, r)
                summary["free_energy"][m] = {"value": est.value, "se": est.se}
            else:
                summary["free_energy"][m] = {"value": free_energy(prob, train, gcfg.beta, gcfg.prior, m, r),
                                             "se": 0.0}
    out.mkdir(parents=True, exist_ok=True)
    if cfg.get("dump_chain"):
        np.ascontiguousarray(S, dtype="<f8").tofile(out / "chain.f64")
        _write_json(out, "chain.json", {"dtype": "float64", "byte_order": "little", "layout": "row-major",
                                        "rows": int(S.shape[0]), "cols": int(S.shape[1]),
                                        "param_shape": list(chain.samples.shape[1:])})
    _write_json(out, "chain_summary.json", summary)


def cmd_replica(cfg: dict, seed: int, out: Path) -> None:
    from .moments import ClassMoments
    from .replica import ReplicaProblem, predict_errors, replica_fixed_point, replica_lambda
    if "moments" in cfg:
        m = ClassMoments.load(cfg["moments"])
        alpha = float(_need(cfg, "alpha"))
        rp = ReplicaProblem.from_moments(m, alpha, _need(cfg, "loss"),
                                         replica_lambda(float(_need(cfg, "lam")), alpha, m.p,
                                                        cfg.get("scaling", "none")),
                                         fit_bias=bool(cfg.get("fit_bias", False)))
    else:
        rp = ReplicaProblem.from_json(_need(cfg, "problem"))
    o = cfg.get("solver", {})
    st = replica_fixed_point(rp, damping=float(o.get("damping", 0.5)), tol=float(o.get("tol", 1e-8)),
                             max_iter=int(o.get("max_iter", 500)), rng=seed)
    out.mkdir(parents=True, exist_ok=True)
    st.save(out / "replica_state.json")
    pred = predict_errors(st, rp, rng=seed) if st.converged else {"converged": False,
                                                                   "residual": st.residual}
    _write_json(out, "replica_prediction.json", pred)


def cmd_clt(cfg: dict, seed: int, out: Path) -> None:
    import numpy as np
    from .clt import coordinate_spikes, clt_report, null_band, random_unit, trained_rows, user_directions
    from .erm import Estimator
    from .rng import stream
    from .umds import load_external_dataset
    data = load_external_dataset(Path(_need(cfg, "data")))
    gmm = load_external_dataset(Path(_need(cfg, "gmm")))
    dc = cfg.get("directions", {})
    parts = [random_unit(data.p, int(dc.get("random", 64)), stream(seed, "directions"))]
    if dc.get("estimator"):
        parts.append(trained_rows(Estimator.load(dc["estimator"])))
    if int(dc.get("spikes", 8)) > 0:
        parts.append(coordinate_spikes(data.p, int(dc.get("spikes", 8)), stream(seed, "spikes")))
    if dc.get("user"):
        parts.append(user_directions(np.asarray(dc["user"], dtype=np.float64)))
    dirs = parts[0]
    for p in parts[1:]:
        dirs = dirs + p
    meta = {"seed": seed}
    if int(cfg.get("null_permutations", 0)) > 0:
        band = null_band(data, gmm, dirs, stream(seed, "null"), int(cfg["null_permutations"]))
        meta["null_band_w1"] = {str(k): v for k, v in band.items()}
    rep = clt_report(data, gmm, dirs, min_count=int(cfg.get("min_count", 1000)), metadata=meta)
    rep.write(out)


def cmd_experiment(cfg: dict, seed: int, out: Path, threads: int) -> None:
    from .harness import ExperimentConfig, run_experiment
    ec = ExperimentConfig.from_json(cfg)
    run_experiment(ec, seed, out=out, threads=threads)


COMMANDS = {"gen": cmd_gen, "moments": cmd_moments, "erm": cmd_erm, "gibbs": cmd_gibbs,
            "replica": cmd_replica, "clt": cmd_clt, "experiment": cmd_experiment}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ulab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=0, help="master seed (u64)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker threads and BLAS threads")
        sp.add_argument("--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not 0 <= args.seed < 2 ** 64:
        print("ulab: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("ulab: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import ConfigError, FormatError, NumericalError
    out = Path(args.out)
    try:
        cfg = _read_config(args.config)
        if args.command == "experiment":
            cmd_experiment(cfg, args.seed, out, args.threads)
        else:
            COMMANDS[args.command](cfg, args.seed, out)
    except ConfigError as exc:
        print(f"ulab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"ulab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"ulab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
