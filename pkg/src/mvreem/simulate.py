"""Scenario generators and the Monte Carlo benchmarking harness.

Four scenarios share the predictor design (five continuous uniforms, one
rounded-to-integer uniform, and one two-point variable with matching
variance) and differ in the true tree and random-effect setup. Train and
test sets share objects and their random effects; predictors and noise
are redrawn for the test rows.
"""

from __future__ import annotations

import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import DataError, LongitudinalDataset
from .metrics import EvaluationReport, emse_fixed, pmse, re_pmse, sigma12_emse
from .reem import ReemOptions, fit_baseline, fit_reem
from .tree import MultivariateTree, Node, SplitRule, structure_equal

SCENARIOS = ("simple_bivariate", "complex_bivariate", "five_response",
             "no_random_effect")

METHOD_LABELS = ("multiREEM_min_marg", "multiREEM_1se_marg",
                 "multiREEM_min_cov", "multiREEM_1se_cov",
                 "uniREEM", "multitree", "unilme", "multilme")

N_PREDICTORS = 7
TWO_POINT_HIGH = 5.77     # matches the variance of a Unif(0, 10) draw

GRID_COLUMNS = ["scenario", "I", "T", "sigma_re", "sigma_eps2"]
METRIC_COLUMNS = ["pmse", "emse_fixed", "re_pmse", "sigma12_emse", "recovered"]


@dataclass
class SimulationConfig:
    scenario: str = "simple_bivariate"
    n_objects: int = 100           # I
    n_times: int = 5               # T_i, identical for every object
    sigma_re: float = 0.5          # off-diagonal of D (unit diagonal)
    sigma_eps2: float = 1.0        # residual variance per response
    t_test: int = 20

    @property
    def n_responses(self) -> int:
        return 5 if self.scenario == "five_response" else 2

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise DataError(f"unknown scenario '{self.scenario}'")
        if self.n_objects < 1 or self.n_times < 1 or self.t_test < 1:
            raise DataError("I, T and t_test must be positive")
        if self.sigma_eps2 < 0:
            raise DataError("sigma_eps2 must be nonnegative")
        J = self.n_responses
        if self.scenario != "no_random_effect":
            if self.sigma_re > 1.0 or self.sigma_re <= -1.0 / (J - 1):
                raise DataError(
                    f"off-diagonal {self.sigma_re} makes D non-psd for J={J}")

    def grid_values(self) -> dict:
        return {"scenario": self.scenario, "I": self.n_objects,
                "T": self.n_times, "sigma_re": self.sigma_re,
                "sigma_eps2": self.sigma_eps2}


@dataclass
class SimulationTruth:
    tree: MultivariateTree
    D: np.ndarray                 # (J, J), q = 1
    sigma: np.ndarray             # (J, J)
    blups: dict                   # object id -> (J, 1)


@dataclass
class SimulatedPair:
    train: LongitudinalDataset
    test: LongitudinalDataset
    truth: SimulationTruth


# ---------------------------------------------------------------------------
# generators


def generate_predictors(n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 7) predictor rows: x1..x5 ~ Unif(0,10), x6 rounded to integer,
    x7 two-point on {0, 5.77} with equal probability."""
    if n < 1:
        raise ValueError("need at least one row")
    X = np.empty((n, N_PREDICTORS))
    X[:, :6] = rng.uniform(0.0, 10.0, size=(n, 6))
    X[:, 5] = np.round(X[:, 5])
    X[:, 6] = np.where(rng.random(n) < 0.5, 0.0, TWO_POINT_HIGH)
    return X


def _leaf(mean) -> Node:
    return Node(n=0, mean=np.asarray(mean, dtype=float), impurity=0.0)


def _branch(var: int, left: Node, right: Node) -> Node:
    mean = (np.asarray(left.mean) + np.asarray(right.mean)) / 2.0
    return Node(n=0, mean=mean, impurity=0.0,
                split=SplitRule(predictor=var, threshold=5.0),
                left=left, right=right)


def true_tree(scenario: str) -> MultivariateTree:
    """The data-generating tree of a scenario, with all splits at 5."""
    names = [f"x{j + 1}" for j in range(N_PREDICTORS)]
    if scenario in ("simple_bivariate", "no_random_effect"):
        root = _branch(0,
                       _branch(1, _leaf([10.0, 6.0]), _leaf([11.0, 7.0])),
                       _branch(2, _leaf([12.0, 8.0]), _leaf([13.0, 9.0])))
        return MultivariateTree(root, 2, names)
    if scenario == "complex_bivariate":
        left = _branch(1,
                       _branch(3, _leaf([6.0, 4.5]), _leaf([8.0, 6.5])),
                       _branch(4, _leaf([10.0, 8.5]), _leaf([12.0, 10.5])))
        right = _branch(2,
                        _leaf([14.0, 10.5]),
                        _branch(5, _leaf([16.0, 12.5]), _leaf([18.0, 14.5])))
        return MultivariateTree(_branch(0, left, right), 2, names)
    if scenario == "five_response":
        root = _branch(0,
                       _branch(1, _leaf([10.0, 9.0, 8.0, 4.0, 6.0]),
                               _leaf([11.0, 10.0, 9.0, 5.0, 7.0])),
                       _branch(2, _leaf([12.0, 11.0, 10.0, 6.0, 8.0]),
                               _leaf([13.0, 12.0, 11.0, 7.0, 9.0])))
        return MultivariateTree(root, 5, names)
    raise DataError(f"unknown scenario '{scenario}'")


def _panel(ids_per_object, n_times, X, Y, J, names):
    n = X.shape[0]
    object_ids = np.repeat(ids_per_object, n_times)
    times = np.tile(np.arange(1, n_times + 1, dtype=float), len(ids_per_object))
    return LongitudinalDataset(object_ids, times, Y, X, np.ones((n, 1)),
                               [f"y{j + 1}" for j in range(J)], names,
                               ["intercept"])


def generate_pair(cfg: SimulationConfig, rng: np.random.Generator) -> SimulatedPair:
    """Train/test pair with shared objects and random effects; test rows
    redraw predictors and noise from the training distributions."""
    cfg.validate()
    J = cfg.n_responses
    I = cfg.n_objects
    tree = true_tree(cfg.scenario)
    names = list(tree.predictor_names)
    sigma = cfg.sigma_eps2 * np.eye(J)

    if cfg.scenario == "no_random_effect":
        D = np.zeros((J, J))
        B = np.zeros((I, J))
    else:
        D = np.full((J, J), cfg.sigma_re)
        np.fill_diagonal(D, 1.0)
        B = rng.standard_normal((I, J)) @ np.linalg.cholesky(D).T

    ids = np.array([f"obj{i:05d}" for i in range(I)], dtype=object)
    sd = np.sqrt(cfg.sigma_eps2)

    def draw(n_times):
        n = I * n_times
        X = generate_predictors(n, rng)
        eps = sd * rng.standard_normal((n, J))
        Y = tree.predict(X) + np.repeat(B, n_times, axis=0) + eps
        return _panel(ids, n_times, X, Y, J, names)

    train = draw(cfg.n_times)
    test = draw(cfg.t_test)
    truth = SimulationTruth(tree=tree, D=D, sigma=sigma,
                            blups={ids[i]: B[i].reshape(J, 1) for i in range(I)})
    return SimulatedPair(train, test, truth)


# ---------------------------------------------------------------------------
# harness


def options_for_method(label: str, seed: int) -> ReemOptions:
    if label.startswith("multiREEM_"):
        _, sel, std = label.split("_")
        return ReemOptions(standardization=std,
                           selection="one_se" if sel == "1se" else sel,
                           seed=seed)
    if label in ("uniREEM", "multitree"):
        return ReemOptions(standardization="none", selection="min", seed=seed)
    if label in ("unilme", "multilme"):
        return ReemOptions(seed=seed)
    raise DataError(f"unknown method label '{label}'; valid labels: "
                    + ", ".join(METHOD_LABELS))


def fit_method(ds: LongitudinalDataset, label: str, seed: int):
    opts = options_for_method(label, seed)
    if label.startswith("multiREEM_"):
        return fit_reem(ds, opts)
    return fit_baseline(ds, label, opts)


def _fit_seed(master_seed: int, grid_idx: int, rep: int, label: str) -> int:
    entropy = [master_seed, grid_idx, rep, 1, zlib.crc32(label.encode())]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _data_rng(master_seed: int, grid_idx: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [master_seed, grid_idx, rep, 0]))


def score_method(predictor, pair: SimulatedPair, cfg: SimulationConfig,
                 label: str, replication: int = 0) -> list:
    """Evaluation reports for one fitted method on one replication;
    single-tree methods carry their recovery flag inline, per-response
    trees get one supplementary report each."""
    test, truth = pair.test, pair.truth
    ids = list(test.object_ids)
    pred = predictor.predict_matrix(test.X, test.Z, ids)
    fixed = predictor.fixed_predict_matrix(test.X)
    report = EvaluationReport(
        method=label,
        pmse=pmse(pred, test.Y, cfg.n_objects),
        emse_fixed=emse_fixed(fixed, truth.tree.predict(test.X), cfg.n_objects),
        replication=replication, scenario=cfg.grid_values())
    b_hat = predictor.random_effects_original()
    if b_hat is not None:
        report.re_pmse = re_pmse(b_hat, truth.blups)
    d_hat = predictor.d_original()
    if d_hat is not None and cfg.n_responses >= 2:
        report.sigma12_emse = sigma12_emse(d_hat, cfg.sigma_re)
    reports = [report]
    trees = predictor.trees_for_recovery()
    if len(trees) == 1:
        report.recovered = structure_equal(trees[0], truth.tree)
    elif len(trees) > 1:
        for j, t in enumerate(trees):
            reports.append(EvaluationReport(
                method=f"{label}:{test.response_names[j]}",
                pmse=np.nan, emse_fixed=np.nan,
                recovered=structure_equal(t, truth.tree),
                replication=replication, scenario=cfg.grid_values()))
    return reports


def _report_row(report: EvaluationReport, seed: int, error: str = "") -> dict:
    def opt(v):
        if v is None:
            return np.nan
        return float(v)

    row = dict(report.scenario)
    row.update({"rep": report.replication, "seed": seed,
                "method": report.method, "pmse": opt(report.pmse),
                "emse_fixed": opt(report.emse_fixed),
                "re_pmse": opt(report.re_pmse),
                "sigma12_emse": opt(report.sigma12_emse),
                "recovered": opt(report.recovered), "error": error})
    return row


def _run_cell(args) -> list:
    cfg, methods, master_seed, grid_idx, rep = args
    pair = generate_pair(cfg, _data_rng(master_seed, grid_idx, rep))
    out = []
    for label in methods:
        seed = _fit_seed(master_seed, grid_idx, rep, label)
        try:
            predictor = fit_method(pair.train, label, seed)
            for report in score_method(predictor, pair, cfg, label, rep):
                out.append(_report_row(report, seed))
        except Exception as exc:  # a failing fit must not abort the sweep
            failed = EvaluationReport(method=label, pmse=np.nan,
                                      emse_fixed=np.nan, replication=rep,
                                      scenario=cfg.grid_values())
            out.append(_report_row(failed, seed,
                                   error=f"{type(exc).__name__}: {exc}"))
    return out


@dataclass
class ResultTable:
    raw: pd.DataFrame
    aggregate: pd.DataFrame

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        self.raw.to_csv(os.path.join(out_dir, "raw.csv"), index=False)
        self.aggregate.to_csv(os.path.join(out_dir, "aggregate.csv"), index=False)


def aggregate_results(raw: pd.DataFrame) -> pd.DataFrame:
    """Per-(grid point, method) means of every metric column."""
    keys = GRID_COLUMNS + ["method"]
    if raw.empty:
        return pd.DataFrame(columns=keys + METRIC_COLUMNS + ["n_reps"])
    grouped = raw.groupby(keys, as_index=False, sort=True)
    agg = grouped[METRIC_COLUMNS].mean()
    agg["n_reps"] = grouped.size()["size"].values
    return agg


def run_experiment(configs, methods, reps: int, master_seed: int,
                   jobs: int = 1, out_dir=None, progress: bool = False) -> ResultTable:
    """Fit every requested method on every (grid point, replication) and
    collect metric rows plus per-grid-point aggregates.

    Replication data streams depend only on (master seed, grid index,
    replication), so adding or removing methods never changes the data,
    and per-method fit seeds are derived independently of the method list.
    Results are merged by key, so the output is identical for any ``jobs``.
    """
    if reps < 1:
        raise DataError("reps must be at least 1")
    configs = list(configs)
    for cfg in configs:
        cfg.validate()
    for label in methods:
        options_for_method(label, 0)    # validates the label
    tasks = [(cfg, tuple(methods), master_seed, gi, rep)
             for gi, cfg in enumerate(configs) for rep in range(reps)]
    rows = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, cell in enumerate(pool.map(_run_cell, tasks)):
                rows.extend(cell)
                if progress:
                    print(f"cell {i + 1}/{len(tasks)} done", file=sys.stderr)
    else:
        for i, task in enumerate(tasks):
            rows.extend(_run_cell(task))
            if progress:
                print(f"cell {i + 1}/{len(tasks)} done", file=sys.stderr)
    columns = GRID_COLUMNS + ["rep", "seed", "method"] + METRIC_COLUMNS + ["error"]
    raw = pd.DataFrame(rows, columns=columns)
    table = ResultTable(raw=raw, aggregate=aggregate_results(raw))
    if out_dir is not None:
        table.write(out_dir)
    return table
