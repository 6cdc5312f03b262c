"""Experiment orchestration: configs, per-seed runners, result tables and emission."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from .errors import ConfigError, FormatError, NumericalError, UlabError
from .erm import ErmProblem, Estimator, empirical_risk, fit, test_error
from .gibbs import (CoupledProblem, GibbsConfig, Metric, Prior, gibbs_chains, merge_chains, q_of_s)
from .mixture import Dataset
from .replica import (ReplicaProblem, empirical_measure_compare, predict_errors, replica_fixed_point, replica_lambda,
                      uniqueness_check)
from .rng import stream
from .sources import FeatureSource, MixtureSource, PoolSource, make_source

KINDS = ("universality-curve", "replica-validation", "gibbs-overlap", "ensemble", "clt-decay")
VARIANTS = ("data", "gmm", "replica")
COLUMNS = ("kind", "alpha", "seed", "variant", "train_error", "test_error", "metric_name", "metric_value")
AGG_COLUMNS = ("alpha", "variant", "p", "quantity", "mean", "se", "count")


def _schema(name: str) -> dict:
    return json.loads(resources.files("ulab").joinpath("schemas").joinpath(name).read_text())


def validate_doc(doc, schema_name: str) -> None:
    try:
        jsonschema.validate(doc, _schema(schema_name))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{schema_name}: {exc.message}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    data: dict
    problem: ErmProblem | None = None
    alpha_grid: tuple[float, ...] = ()
    n_test: int = 10_000
    seeds: int = 10
    output: str | None = None
    moments_n: int = 100_000
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.seeds < 1:
            raise ConfigError("seeds must be at least 1")
        if any(not a > 0 for a in self.alpha_grid):
            raise ConfigError("alpha_grid must be positive")
        if self.kind != "clt-decay":
            if not self.alpha_grid:
                raise ConfigError(f"{self.kind} needs a nonempty alpha_grid")
            if self.problem is None:
                raise ConfigError(f"{self.kind} needs a problem")
        if self.kind == "gibbs-overlap" and "gibbs" not in self.options:
            raise ConfigError("gibbs-overlap needs options.gibbs")
        if self.kind == "gibbs-overlap" and self.problem.loss == "multiclass-cross-entropy":
            raise ConfigError("gibbs-overlap needs a binary or scalar problem")
        if self.kind == "replica-validation" and self.data.get("type") != "mixture":
            raise ConfigError("replica-validation needs a mixture data source")
        if self.kind in ("ensemble", "clt-decay") and self.data.get("type") != "features":
            raise ConfigError(f"{self.kind} needs a features data source")
        if self.kind == "clt-decay" and not self.options.get("p_grid"):
            raise ConfigError("clt-decay needs options.p_grid")

    def to_json(self) -> dict:
        return {"kind": self.kind, "data": self.data,
                "problem": None if self.problem is None else self.problem.to_json(),
                "alpha_grid": list(self.alpha_grid), "n_test": self.n_test, "seeds": self.seeds,
                "output": self.output, "moments_n": self.moments_n, "options": self.options}

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        validate_doc(doc, "experiment_config.schema.json")
        prob = doc.get("problem")
        return cls(kind=doc["kind"], data=doc["data"],
                   problem=None if prob is None else ErmProblem.from_json(prob),
                   alpha_grid=tuple(float(a) for a in doc.get("alpha_grid", ())),
                   n_test=int(doc.get("n_test", 10_000)), seeds=int(doc.get("seeds", 10)),
                   output=doc.get("output"), moments_n=int(doc.get("moments_n", 100_000)),
                   options=dict(doc.get("options", {})))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_json(doc)


@dataclass(frozen=True)
class ResultRow:
    kind: str
    alpha: float
    seed: int
    variant: str
    train_error: float
    test_error: float
    metrics: dict = field(default_factory=dict)

    def sort_key(self):
        return (self.metrics.get("p", 0), self.alpha, self.seed, VARIANTS.index(self.variant))

    def to_json(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "seed": self.seed, "variant": self.variant,
                "train_error": _finite_or_none(self.train_error), "test_error": _finite_or_none(self.test_error),
                "metrics": {k: _finite_or_none(v) for k, v in sorted(self.metrics.items())}}

    @classmethod
    def from_json(cls, d: dict) -> "ResultRow":
        nan = float("nan")
        return cls(d["kind"], float(d["alpha"]), int(d["seed"]), d["variant"],
                   nan if d["train_error"] is None else float(d["train_error"]),
                   nan if d["test_error"] is None else float(d["test_error"]),
                   {k: nan if v is None else float(v) for k, v in d.get("metrics", {}).items()})


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _mean_se(vals: Sequence[float]) -> tuple[float, float, int]:
    v = [float(x) for x in vals if math.isfinite(x)]
    n = len(v)
    if n == 0:
        return float("nan"), float("nan"), 0
    m = math.fsum(v) / n
    if n == 1:
        return m, 0.0, 1
    var = math.fsum((x - m) ** 2 for x in v) / (n - 1)
    return m, math.sqrt(var / n), n


@dataclass
class ResultTable:
    kind: str
    rows: list[ResultRow] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def sort(self) -> "ResultTable":
        self.rows.sort(key=ResultRow.sort_key)
        self.failures.sort(key=lambda f: json.dumps(f, sort_keys=True))
        return self

    def select(self, variant: str | None = None, alpha: float | None = None, p: int | None = None):
        return [r for r in self.rows
                if (variant is None or r.variant == variant) and (alpha is None or r.alpha == alpha)
                and (p is None or r.metrics.get("p") == p)]

    def cell(self, alpha: float, variant: str, quantity: str, p: int | None = None) -> tuple[float, float, int]:
        """Mean, SE and count of a quantity over seeds."""
        rows = self.select(variant, alpha, p)
        if quantity in ("train_error", "test_error"):
            vals = [getattr(r, quantity) for r in rows]
        else:
            vals = [r.metrics.get(quantity, float("nan")) for r in rows]
        return _mean_se(vals)

    def aggregates(self) -> list[dict]:
        keys = sorted({(r.alpha, VARIANTS.index(r.variant), r.metrics.get("p")) for r in self.rows},
                      key=lambda k: (k[2] or 0, k[0], k[1]))
        out = []
        for alpha, vi, p in keys:
            variant = VARIANTS[vi]
            rows = self.select(variant, alpha, p)
            names = ["train_error", "test_error"] + sorted({m for r in rows for m in r.metrics if m != "p"})
            for q in names:
                m, se, n = self.cell(alpha, variant, q, p)
                out.append({"alpha": alpha, "variant": variant, "p": p, "quantity": q,
                            "mean": _finite_or_none(m), "se": _finite_or_none(se), "count": n})
        return out

    def to_json(self) -> dict:
        return {"kind": self.kind, "columns": list(COLUMNS), "rows": [r.to_json() for r in self.rows],
                "aggregates": self.aggregates(), "failures": self.failures, "meta": self.meta}

    @classmethod
    def from_json(cls, doc: dict) -> "ResultTable":
        validate_doc(doc, "result_table.schema.json")
        return cls(doc["kind"], [ResultRow.from_json(r) for r in doc["rows"]], list(doc.get("failures", [])),
                   dict(doc.get("meta", {})))


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x)) if math.isfinite(float(x)) else ""


def emit_results(table: ResultTable, out_dir, formats: Sequence[str] = ("csv", "json")) -> list[Path]:
    """Write ``results.csv`` / ``results.json`` and ``aggregates.csv``; returns the paths written."""
    for f in formats:
        if f not in ("csv", "json"):
            raise ConfigError(f"unknown result format {f!r}")
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            path = out / "results.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(COLUMNS)
                for r in table.rows:
                    base = [r.kind, _fmt(r.alpha), r.seed, r.variant, _fmt(r.train_error), _fmt(r.test_error)]
                    if not r.metrics:
                        w.writerow(base + ["", ""])
                    for name in sorted(r.metrics):
                        w.writerow(base + [name, _fmt(r.metrics[name])])
            written.append(path)
            path = out / "aggregates.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(AGG_COLUMNS)
                for a in table.aggregates():
                    w.writerow([_fmt(a[c]) if c != "variant" and c != "quantity" else a[c] for c in AGG_COLUMNS])
            written.append(path)
        if "json" in formats:
            doc = table.to_json()
            validate_doc(doc, "result_table.schema.json")
            path = out / "results.json"
            path.write_text(json.dumps(doc, indent=1))
            written.append(path)
        if table.failures:
            path = out / "failure_manifest.json"
            path.write_text(json.dumps({"kind": table.kind, "failures": table.failures}, indent=1))
            written.append(path)
    except OSError as exc:
        raise FormatError(f"cannot write results to {out}: {exc}") from exc
    return written


# ----------------------------------------------------------------------------- shared pieces

def test_metric(prob: ErmProblem, ds: Dataset) -> str:
    if prob.loss == "multiclass-cross-entropy":
        return "zero-one-argmax"
    if ds.y_kind == "real":
        return "mse"
    return "zero-one-sign"


test_metric.__test__ = False


def _n_train(alpha: float, p: int) -> int:
    n = int(round(alpha * p))
    if n < 1:
        raise ConfigError(f"alpha={alpha} gives no training samples at p={p}")
    return n


def _draws(src, sizes, seed: int, *names) -> list[Dataset]:
    """Independent draws of the given sizes (disjoint row sets for a finite pool)."""
    if isinstance(src, PoolSource):
        return src.split(sizes, stream(seed, *names))
    return [src.sample(n, stream(seed, *names, i)) for i, n in enumerate(sizes)]


def _variant_sources(cfg: ExperimentConfig, src, master: int, s: int):
    """The source itself and its equivalent GMM built from an independent moment stream."""
    m = src.moments(cfg.moments_n, stream(master, "moments", s))
    return (("data", src), ("gmm", src.equivalent(m)))


def _seed_key(master: int, *names) -> int:
    return int(stream(master, *names).integers(2 ** 63))


def _fit_row(prob, train, test):
    est = fit(train, prob)
    tr = empirical_risk(est, train, prob, with_reg=False)
    te = test_error(est, test, test_metric(prob, test))
    return est, tr, te


def _run_pool(tasks: list[Callable[[], list[ResultRow]]], threads: int, table: ResultTable) -> ResultTable:
    """Run per-seed tasks; completed rows are kept in ``table`` even when a task fails."""
    errors = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(t) for t in tasks]
            for f in futs:
                try:
                    table.rows.extend(f.result())
                except UlabError as exc:
                    errors.append(exc)
    else:
        for t in tasks:
            try:
                table.rows.extend(t())
            except UlabError as exc:
                errors.append(exc)
    table.sort()
    if errors:
        for e in errors:
            table.failures.append({"error": type(e).__name__, "message": str(e)})
        raise errors[0]
    return table


def _order(cfg: ExperimentConfig, seed_order):
    order = list(range(cfg.seeds)) if seed_order is None else list(seed_order)
    if sorted(order) != list(range(cfg.seeds)):
        raise ConfigError("seed_order must be a permutation of range(seeds)")
    return order


# ----------------------------------------------------------------------------- runners

def run_universality_curve(cfg: ExperimentConfig, seed: int = 0, threads: int = 1, seed_order=None,
                           table: ResultTable | None = None) -> ResultTable:
    """Data versus equivalent-GMM training loss and test error along the alpha grid."""
    src = make_source(cfg.data, seed)
    table = table if table is not None else ResultTable(cfg.kind)
    prob = cfg.problem

    def task(s):
        def run():
            rows = []
            for variant, S in _variant_sources(cfg, src, seed, s):
                for ia, a in enumerate(cfg.alpha_grid):
                    train, test = _draws(S, [_n_train(a, src.p), cfg.n_test], seed, variant, s, ia)
                    _, tr, te = _fit_row(prob, train, test)
                    rows.append(ResultRow(cfg.kind, a, s, variant, tr, te))
            return rows
        return run

    table.meta.update({"p": src.p, "problem": prob.to_json(), "master_seed": seed})
    return _run_pool([task(s) for s in _order(cfg, seed_order)], threads, table)


def replica_problem_for(src: MixtureSource, prob: ErmProblem, alpha: float) -> ReplicaProblem:
    """The asymptotic instance matching a diagonal mixture source and an ERM problem."""
    spec = src.spec
    if not all(c.diagonal for c in spec.clusters):
        raise ConfigError("replica validation needs diagonal covariances")
    if prob.regularizer != "l2":
        raise ConfigError("replica validation supports the l2 regularizer only")
    p = spec.p
    kw = {}
    lab = src.labeler
    if lab.kind == "teacher":
        if lab.teacher.rule != "linear-regression" or prob.loss != "squared":
            raise ConfigError("replica teachers are linear-regression teachers with the squared loss")
        kw = {"w_star": np.sqrt(p) * lab.teacher.theta_star[0], "noise_var": lab.teacher.noise_scale ** 2}
    elif lab.kind == "cluster-index" and prob.loss != "multiclass-cross-entropy":
        kw = {"labels": np.arange(spec.k, dtype=np.float64)[:, None]}
    return ReplicaProblem(weights=spec.weights, mu_tilde=np.sqrt(p) * spec.means,
                          sigma=np.stack([c.cov for c in spec.clusters]), alpha=alpha, loss=prob.loss,
                          lam=replica_lambda(prob.lam, alpha, p, prob.scaling), fit_bias=prob.fit_bias, **kw)


def run_replica_validation(cfg: ExperimentConfig, seed: int = 0, threads: int = 1, seed_order=None,
                           table: ResultTable | None = None) -> ResultTable:
    """Finite-size ERM rows (data and gmm) next to the replica prediction at each alpha."""
    src = make_source(cfg.data, seed)
    table = table if table is not None else ResultTable(cfg.kind)
    prob = cfg.problem
    opts = cfg.options
    variants = tuple(opts.get("variants", ("data", "gmm")))
    test_fns = tuple(opts.get("test_functions", ("one", "w2", "clipped-w")))
    states = {}
    for a in cfg.alpha_grid:
        rp = replica_problem_for(src, prob, a)
        try:
            st = replica_fixed_point(rp, tol=float(opts.get("replica_tol", 1e-8)),
                                     max_iter=int(opts.get("replica_max_iter", 500)))
        except NumericalError as exc:
            table.failures.append({"alpha": a, "variant": "replica", "error": "NumericalError", "message": str(exc)})
            table.rows.append(ResultRow(cfg.kind, a, 0, "replica", float("nan"), float("nan"), {"converged": 0.0}))
            continue
        met = {"converged": float(st.converged), "residual": float(st.residual), "iterations": float(st.iterations)}
        if st.converged and int(opts.get("uniqueness_restarts", 0)) > 0:
            u = uniqueness_check(rp, st, int(opts["uniqueness_restarts"]),
                                 tol=float(opts.get("replica_tol", 1e-8)),
                                 max_iter=int(opts.get("replica_max_iter", 500)))
            met["restart_deviation"] = u["max_deviation"]
            met["multiple_fixed_points"] = float(u["multiple"])
        if st.converged:
            pe = predict_errors(st, rp)
            states[a] = (st, rp)
            if "test_mse" in pe:
                met["test_mse"] = pe["test_mse"]
            table.rows.append(ResultRow(cfg.kind, a, 0, "replica", pe["train_loss"], pe["test_error"], met))
        else:
            table.failures.append({"alpha": a, "variant": "replica", "error": "not converged",
                                   "message": f"residual {st.residual:.3g} after {st.iterations} sweeps"})
            table.rows.append(ResultRow(cfg.kind, a, 0, "replica", float("nan"), float("nan"), met))

    def task(s):
        def run():
            rows = []
            pairs = _variant_sources(cfg, src, seed, s) if "gmm" in variants else (("data", src),)
            for variant, S in pairs:
                if variant not in variants:
                    continue
                for ia, a in enumerate(cfg.alpha_grid):
                    train, test = _draws(S, [_n_train(a, src.p), cfg.n_test], seed, variant, s, ia)
                    est, tr, te = _fit_row(prob, train, test)
                    met = {}
                    if prob.loss == "squared" and test.y_kind != "onehot":
                        met["test_mse"] = test_error(est, test, "mse")
                    if a in states and prob.loss != "multiclass-cross-entropy":
                        st, rp = states[a]
                        cmp = empirical_measure_compare(est, st, rp, test_fns, rng=stream(seed, "measure", s, ia))
                        for name, v in cmp.items():
                            met[f"phi_{name}"] = v["discrepancy"]
                    rows.append(ResultRow(cfg.kind, a, s, variant, tr, te, met))
            return rows
        return run

    table.meta.update({"p": src.p, "problem": prob.to_json(), "master_seed": seed})
    return _run_pool([task(s) for s in _order(cfg, seed_order)], threads, table)


def gibbs_config_from(doc: dict) -> GibbsConfig:
    try:
        prior = Prior(**doc.get("prior", {}))
        return GibbsConfig(beta=float(doc["beta"]), n_steps=int(doc.get("n_steps", 6000)),
                           burn_in=int(doc.get("burn_in", 2000)), thinning=int(doc.get("thinning", 1)),
                           step_size=doc.get("step_size"), prior=prior)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad gibbs config: {exc}") from exc


def run_gibbs_overlap(cfg: ExperimentConfig, seed: int = 0, threads: int = 1, seed_order=None,
                      table: ResultTable | None = None) -> ResultTable:
    """ERM-versus-posterior-mean overlaps, optionally with coupling-curve diagnostics."""
    src = make_source(cfg.data, seed)
    table = table if table is not None else ResultTable(cfg.kind)
    prob = cfg.problem
    gcfg = gibbs_config_from(cfg.options["gibbs"])
    n_chains = int(cfg.options.get("n_chains", 4))
    s_grid = cfg.options.get("s_grid")

    def task(s):
        def run():
            rows = []
            for variant, S in _variant_sources(cfg, src, seed, s):
                for ia, a in enumerate(cfg.alpha_grid):
                    train, test = _draws(S, [_n_train(a, src.p), cfg.n_test], seed, variant, s, ia)
                    est, tr, te = _fit_row(prob, train, test)
                    try:
                        chain = merge_chains(gibbs_chains(prob, train, gcfg, stream(seed, "chain", variant, s, ia),
                                                          n_chains))
                    except UlabError as exc:
                        table.failures.append({"alpha": a, "seed": s, "variant": variant,
                                               "error": type(exc).__name__, "message": str(exc)})
                        rows.append(ResultRow(cfg.kind, a, s, variant, tr, te, {"chain_failed": 1.0}))
                        continue
                    p = train.p
                    th = est.theta[0]
                    mean = chain.samples.mean(axis=0)[0]
                    bayes = Estimator(chain.samples.mean(axis=0), chain.bias.mean(axis=0), chain.scaling)
                    met = {"overlap": float(th @ mean) / p, "erm_self_overlap": float(th @ th) / p,
                           "bayes_self_overlap": float(np.mean(np.sum(chain.samples[:, 0] ** 2, axis=1))) / p,
                           "acceptance_rate": chain.acceptance_rate,
                           "bayes_test_error": test_error(bayes, test, test_metric(prob, test))}
                    if s_grid:
                        cp = CoupledProblem(((prob, train), (prob, train)), 1, (gcfg.beta,),
                                            Metric("pairwise-overlap"), gibbs=gcfg, n_chains=n_chains)
                        qc = q_of_s(cp, s_grid, stream(seed, "coupling", variant, s, ia))
                        d2, _ = qc.second_differences()
                        met["q_second_difference_max"] = float(np.max(d2))
                        met["q_slope_at_zero"] = qc.slope_at_zero()[0]
                        met["q_direct_h"] = float(qc.direct_h[0])
                    rows.append(ResultRow(cfg.kind, a, s, variant, tr, te, met))
            return rows
        return run

    table.meta.update({"p": src.p, "problem": prob.to_json(), "beta": gcfg.beta, "master_seed": seed})
    return _run_pool([task(s) for s in _order(cfg, seed_order)], threads, table)


def _view(ds: Dataset, m: int, p: int) -> Dataset:
    from dataclasses import replace
    return replace(ds, X=np.ascontiguousarray(ds.X[:, m * p:(m + 1) * p]))


def run_ensemble(cfg: ExperimentConfig, seed: int = 0, threads: int = 1, seed_order=None,
                 table: ResultTable | None = None) -> ResultTable:
    """M learners on M feature views of shared latents; ensemble error is the averaged-output error."""
    src = make_source(cfg.data, seed)
    if not isinstance(src, FeatureSource):
        raise ConfigError("ensembles need a features source")
    table = table if table is not None else ResultTable(cfg.kind)
    prob = cfg.problem
    M = src.views
    pv = src.fms[0].p

    def task(s):
        def run():
            rows = []
            for variant, S in _variant_sources(cfg, src, seed, s):
                for ia, a in enumerate(cfg.alpha_grid):
                    train, test = _draws(S, [_n_train(a, pv), cfg.n_test], seed, variant, s, ia)
                    ests, trs, tes = [], [], []
                    for m in range(M):
                        est, tr, te = _fit_row(prob, _view(train, m, pv), _view(test, m, pv))
                        ests.append(est)
                        trs.append(tr)
                        tes.append(te)
                    U = sum(e.predict(_view(test, m, pv).X) for m, e in enumerate(ests)) / M
                    avg = Estimator(np.eye(U.shape[1]), np.zeros(U.shape[1]), "none")
                    ens = test_error(avg, Dataset(U, test.y, test.c, test.k, test.y_kind), test_metric(prob, test))
                    met = {"individual_test_error": float(np.mean(tes))}
                    for m in range(M):
                        met[f"member_{m}_test_error"] = tes[m]
                    for i in range(M):
                        for j in range(i + 1, M):
                            met[f"overlap_{i}_{j}"] = float(np.sum(ests[i].theta * ests[j].theta)) / pv
                    rows.append(ResultRow(cfg.kind, a, s, variant, float(np.mean(trs)), ens, met))
            return rows
        return run

    table.meta.update({"p": pv, "views": M, "problem": prob.to_json(), "master_seed": seed})
    return _run_pool([task(s) for s in _order(cfg, seed_order)], threads, table)


def run_clt_decay(cfg: ExperimentConfig, seed: int = 0, threads: int = 1, seed_order=None,
                  table: ResultTable | None = None) -> ResultTable:
    """Sup-distances between feature projections and the equivalent GMM along a p grid,
    with a sign-activation coordinate-spike contrast."""
    from .clt import clt_report, coordinate_spikes, random_features_pair, random_unit, trained_rows
    from .erm import fit_logistic
    from .mixture import binary_labels_from_clusters

    table = table if table is not None else ResultTable(cfg.kind)
    o = cfg.options
    p_grid = [int(p) for p in o["p_grid"]]
    if any(b <= a for a, b in zip(p_grid, p_grid[1:])):
        raise ConfigError("p_grid must be increasing")
    ratio = float(o.get("p_over_d", 1.5))
    n_per_p = int(o.get("n_per_p", 100))
    n_random = int(o.get("n_random", 64))
    n_spikes = int(o.get("n_spikes", 8))
    act = cfg.data.get("activation", "tanh-centered")
    contrast = o.get("contrast_activation", "sign")
    lam = float(o.get("trained_lambda", 1e-3))

    def one(p, s):
        d = max(1, int(round(p / ratio)))
        key = _seed_key(seed, "clt", p, s)
        n = n_per_p * p
        fp = random_features_pair(d, p, n, act, key, n_train=2 * p)
        est = fit_logistic(binary_labels_from_clusters(fp.train), lam)
        dirs = random_unit(p, n_random, stream(key, "directions")) + trained_rows(est)
        r = clt_report(fp.data, fp.gmm, dirs)
        del fp
        met = {"p": float(p), "d": float(d), "sup_w1": r.sup("w1"), "sup_ks": r.sup("ks"),
               "sup_w1_trained": r.sup("w1", ["trained-rows"])}
        if contrast:
            fc = random_features_pair(d, p, n, contrast, key)
            cd = random_unit(p, n_random, stream(key, "directions")) + coordinate_spikes(p, n_spikes, stream(key, "spikes"))
            rc = clt_report(fc.data, fc.gmm, cd)
            met["contrast_sup_w1_random"] = rc.sup("w1", ["random-unit"])
            met["contrast_sup_w1_spike"] = rc.sup("w1", ["coordinate-spike"])
            met["spike_ratio"] = met["contrast_sup_w1_spike"] / met["contrast_sup_w1_random"]
        return ResultRow(cfg.kind, float(n_per_p), s, "data", float("nan"), float("nan"), met)

    tasks = [(lambda p=p, s=s: [one(p, s)]) for p in p_grid for s in _order(cfg, seed_order)]
    table.meta.update({"p_grid": p_grid, "p_over_d": ratio, "n_per_p": n_per_p, "activation": act,
                       "master_seed": seed})
    return _run_pool(tasks, threads, table)


def decay_table(table: ResultTable, quantity: str = "sup_w1"):
    """Per-p mean and SE of a clt-decay quantity as a :class:`DecayTable`."""
    from .clt import DecayTable
    ps = sorted({int(r.metrics["p"]) for r in table.rows})
    vals = np.array([[r.metrics[quantity] for r in sorted(table.select(p=p), key=lambda r: r.seed)] for p in ps])
    mean = vals.mean(axis=1)
    se = vals.std(axis=1, ddof=1) / np.sqrt(vals.shape[1]) if vals.shape[1] > 1 else np.zeros(len(ps))
    slope = float(np.polyfit(np.log(ps), np.log(mean), 1)[0]) if len(ps) > 1 else 0.0
    return DecayTable(np.array(ps), mean, se, vals, slope)


RUNNERS = {"universality-curve": run_universality_curve, "replica-validation": run_replica_validation,
           "gibbs-overlap": run_gibbs_overlap, "ensemble": run_ensemble, "clt-decay": run_clt_decay}


def run_experiment(cfg: ExperimentConfig, seed: int = 0, out=None, threads: int = 1, seed_order=None) -> ResultTable:
    """Run the configured experiment; on failure, flush partial rows and a failure manifest to ``out``."""
    table = ResultTable(cfg.kind)
    out = out if out is not None else cfg.output
    try:
        RUNNERS[cfg.kind](cfg, seed, threads, seed_order, table)
    except UlabError:
        if out is not None:
            table.sort()
            emit_results(table, out)
        raise
    if out is not None:
        emit_results(table, out)
    return table


def universality_gaps(table: ResultTable, quantity: str, n_se: float = 3.0) -> list[dict]:
    """Per-alpha |data - gmm| against ``n_se`` combined standard errors."""
    out = []
    for a in sorted({r.alpha for r in table.rows if r.variant == "data"}):
        md, sd, _ = table.cell(a, "data", quantity)
        mg, sg, _ = table.cell(a, "gmm", quantity)
        gap, tol = abs(md - mg), n_se * math.hypot(sd, sg)
        out.append({"alpha": a, "data": md, "gmm": mg, "gap": gap, "tolerance": tol, "ok": gap <= tol})
    return out


@dataclass(frozen=True)
class CouplingInstance:
    """A shipped M=2 (M1=1) coupled problem: ``factory(rng)`` draws a fresh data replica."""

    name: str
    factory: Callable
    s_grid: tuple[float, ...]
    n_replicas: int
    rng: int

    def run(self, gtol: float = 1e-11):
        return q_of_s(self.factory, self.s_grid, self.rng, self.n_replicas, gtol)


def coupling_instance(name: str = "coupling-m2") -> CouplingInstance:
    try:
        doc = json.loads(resources.files("ulab").joinpath("instances").joinpath(f"{name}.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no shipped instance {name!r}") from exc
    src = make_source(doc["data"], int(doc["seed"]))
    prob = ErmProblem.from_json(doc["problem"])
    gcfg = gibbs_config_from(doc["gibbs"])
    n, beta, chains = int(doc["n"]), float(doc["beta"]), int(doc["n_chains"])
    metric = Metric(doc["metric"])

    def factory(rng):
        ds = src.sample(n, rng)
        return CoupledProblem(((prob, ds), (prob, ds)), 1, (beta,), metric, gibbs=gcfg, n_chains=chains)

    return CouplingInstance(name, factory, tuple(doc["s_grid"]), int(doc["n_replicas"]), int(doc["rng"]))
