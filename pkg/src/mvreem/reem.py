"""Alternating tree / mixed-model estimation for multi-response panels.

Each iteration (a) grows and CV-selects a multivariate regression tree on
the random-effect-adjusted targets, then (b) refits the node means jointly
with the random-effect and residual covariances by maximum likelihood,
and extracts BLUPs for the next adjustment. The loop stops when the step
(b) likelihood gain drops below tolerance. Non-Gaussian responses run the
same loop on first-order working responses (pseudo-responses), updating
the linearization point after every iteration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
import numpy as np

from .data import (
    DataError,
    Family,
    LongitudinalDataset,
    StandardizationTransform,
    get_family,
    standardize,
)
from .mixed_model import FitError, FittedMixedModel, MixedModelSpec, fit_mvlmm
from .tree import GrowControls, MultivariateTree, select_by_cv

ETA_CLAMP = 30.0
DERIV_FLOOR = 1e-6

SCHEMA_VERSION = 1


@dataclass
class ReemOptions:
    standardization: str = "marg"           # marg | cov | none
    selection: str = "min"                  # min | one_se
    n_folds: int = 10
    tol: float = 1e-4                       # absolute gain threshold on step (b)
    max_iter: int = 50
    controls: GrowControls = field(default_factory=GrowControls)
    family: str = "gaussian_identity"
    seed: int = 0
    residual_structure: str = "diag_by_response"
    no_random_effects: bool = False
    fold_by_object: bool = False

    def validate(self) -> None:
        if self.tol <= 0:
            raise DataError("tolerance must be positive")
        if self.max_iter < 1:
            raise DataError("max_iter must be at least 1")
        if self.n_folds < 2:
            raise DataError("cross-validation needs at least 2 folds")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selection"] = "one_se" if self.selection == "1se" else self.selection
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReemOptions":
        d = dict(d)
        d["controls"] = GrowControls(**d["controls"])
        return cls(**d)


@dataclass
class ReemModel:
    """Converged composite: standardization, tree with back-transformed
    leaf means, fitted mixed model (on the transformed scale), and the
    per-iteration likelihood trace."""

    options: ReemOptions
    transform: StandardizationTransform
    tree: MultivariateTree
    mixed: FittedMixedModel
    family: str
    trace: list
    status: str                      # converged | max_iter | oscillation_stopped
    flags: list
    response_names: list
    predictor_names: list
    design_names: list

    # -- prediction --------------------------------------------------------

    def _check_x(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.predictor_names):
            raise DataError(f"predictor matrix must have "
                            f"{len(self.predictor_names)} columns")
        return X

    def predict_matrix(self, X, Z=None, object_ids=None,
                       population_only: bool = False,
                       strict: bool = False) -> np.ndarray:
        """Original-scale predictions for rows of X; known objects get
        their BLUP contribution unless ``population_only``."""
        X = self._check_x(X)
        leaf = self.tree.assign(X)
        values = self.mixed.M.T[leaf]          # (n, J), transformed scale
        if not population_only and object_ids is not None:
            if Z is None:
                raise DataError("design values are required for object-level "
                                "predictions")
            Z = np.asarray(Z, dtype=float)
            for i, oid in enumerate(object_ids):
                if oid is None:
                    continue
                B = self.mixed.blups.get(oid)
                if B is None:
                    if strict:
                        raise FitError(f"unknown object id '{oid}'")
                    continue
                values[i] = values[i] + B @ Z[i]
        return self.transform.invert(values)

    def fixed_predict_matrix(self, X) -> np.ndarray:
        X = self._check_x(X)
        return self.transform.invert(self.mixed.M.T[self.tree.assign(X)])

    def predict(self, x, z=None, object_id=None, population_only=False,
                strict=False) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.shape[0] != len(self.predictor_names):
            raise DataError(f"x must have {len(self.predictor_names)} entries")
        z = np.zeros(len(self.design_names)) if z is None else np.asarray(z, dtype=float)
        return self.predict_matrix(x.reshape(1, -1), z.reshape(1, -1),
                                   [object_id], population_only, strict)[0]

    # -- reporting on the original response scale ---------------------------

    def trees_for_recovery(self) -> list:
        return [self.tree]

    def d_original(self) -> np.ndarray:
        return self.transform.invert_d(self.mixed.D, len(self.design_names))

    def sigma_original(self) -> np.ndarray:
        return self.transform.invert_residual_cov(self.mixed.sigma)

    def random_effects_original(self) -> dict:
        return {oid: self.transform.invert_random_effects(B)
                for oid, B in self.mixed.blups.items()}

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": "reem",
            "family": self.family,
            "status": self.status,
            "flags": list(self.flags),
            "options": self.options.to_dict(),
            "response_names": list(self.response_names),
            "predictor_names": list(self.predictor_names),
            "design_names": list(self.design_names),
            "transform": self.transform.to_dict(),
            "tree": self.tree.to_dict(),
            "node_means": np.asarray(self.mixed.M).tolist(),
            "random_effect_cov": np.asarray(self.mixed.D).tolist(),
            "residual_cov": np.asarray(self.mixed.sigma).tolist(),
            "residual_structure": self.mixed.residual_structure,
            "loglik": float(self.mixed.loglik),
            "init_loglik": float(self.mixed.init_loglik),
            "mixed_converged": bool(self.mixed.converged),
            "mixed_n_iter": int(self.mixed.n_iter),
            "blups": {str(k): np.asarray(v).tolist()
                      for k, v in sorted(self.mixed.blups.items())},
            "trace": self.trace,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "ReemModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError("unsupported model schema version")
        mixed = FittedMixedModel(
            M=np.asarray(d["node_means"], dtype=float),
            D=np.asarray(d["random_effect_cov"], dtype=float),
            sigma=np.asarray(d["residual_cov"], dtype=float),
            blups={k: np.asarray(v, dtype=float) for k, v in d["blups"].items()},
            loglik=d["loglik"], init_loglik=d["init_loglik"],
            converged=d["mixed_converged"], n_iter=d["mixed_n_iter"],
            residual_structure=d["residual_structure"])
        return cls(options=ReemOptions.from_dict(d["options"]),
                   transform=StandardizationTransform.from_dict(d["transform"]),
                   tree=MultivariateTree.from_dict(d["tree"]),
                   mixed=mixed, family=d["family"], trace=list(d["trace"]),
                   status=d["status"], flags=list(d["flags"]),
                   response_names=list(d["response_names"]),
                   predictor_names=list(d["predictor_names"]),
                   design_names=list(d["design_names"]))

    @classmethod
    def load(cls, path) -> "ReemModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# pseudo-responses


def pseudo_response(y: float, eta_hat: float, family) -> float:
    """First-order working response eta + (y - h(eta)) / h'(eta).

    The identity link collapses this to y itself; the derivative in the
    denominator is floored at 1e-6 in magnitude.
    """
    family = get_family(family)
    family.validate_responses(np.asarray([y], dtype=float))
    if family.is_gaussian:
        return float(y)
    h = float(family.mean(eta_hat))
    hp = max(float(family.mean_deriv(eta_hat)), DERIV_FLOOR)
    return float(eta_hat) + (float(y) - h) / hp


def _pseudo_rows(Y: np.ndarray, eta: np.ndarray, family: Family) -> np.ndarray:
    if family.is_gaussian:
        return Y.copy()
    h = family.mean(eta)
    hp = np.maximum(family.mean_deriv(eta), DERIV_FLOOR)
    return eta + (Y - h) / hp


def _initial_eta(Y: np.ndarray, family: Family) -> np.ndarray:
    """Boundary-safe starting point for the linearization."""
    if family.is_gaussian:
        return Y.copy()
    if family.name == "bernoulli_logit":
        return np.asarray(family.link((Y + Y.mean(axis=0)) / 2.0), dtype=float)
    return np.asarray(family.link(Y + 0.5), dtype=float)


# ---------------------------------------------------------------------------
# the alternation


def _structure_signature(tree: MultivariateTree):
    def sig(node):
        if node.is_leaf:
            return ("leaf",)
        return (node.split.predictor, sig(node.left), sig(node.right))

    return sig(tree.root)


def _re_contribution(blups: dict, ds: LongitudinalDataset) -> np.ndarray:
    """(n, J) matrix of B_i z_it terms aligned with the dataset rows."""
    B = np.stack([blups[label] for label in ds.object_labels])
    return np.einsum("njq,nq->nj", B[ds.object_codes], ds.Z)


def _compose(ds, opts, tf, tree, mm, trace, status, flags) -> ReemModel:
    out_tree = tree.copy()
    means_orig = tf.invert(mm.M.T)           # (L, J)
    for node in _all_nodes(out_tree):
        if node.is_leaf:
            node.mean = means_orig[node.leaf_index].copy()
        else:
            node.mean = tf.invert(node.mean.reshape(1, -1))[0]
    return ReemModel(options=opts, transform=tf, tree=out_tree, mixed=mm,
                     family=get_family(opts.family).name, trace=trace,
                     status=status, flags=flags,
                     response_names=list(ds.response_names),
                     predictor_names=list(ds.predictor_names),
                     design_names=list(ds.design_names))


def _all_nodes(tree: MultivariateTree):
    out = []

    def walk(node):
        out.append(node)
        if not node.is_leaf:
            walk(node.left)
            walk(node.right)

    walk(tree.root)
    return out


def _fit_core(ds: LongitudinalDataset, opts: ReemOptions) -> ReemModel:
    opts.validate()
    family = get_family(opts.family)
    family.validate_responses(ds.Y)
    if ds.n_rows < opts.n_folds:
        raise DataError("fewer rows than cross-validation folds")
    rng = np.random.default_rng(opts.seed)
    flags: list = []

    eta = _initial_eta(ds.Y, family)
    ytilde = _pseudo_rows(ds.Y, eta, family)
    ds_scaled, tf = standardize(ds.with_responses(ytilde), opts.standardization)
    ytilde_s = ds_scaled.Y

    blups = {label: np.zeros((ds.n_responses, ds.n_design))
             for label in ds.object_labels}
    trace: list = []
    history: dict = {}
    prev_ll = None
    theta_warm = None
    best_ll = -np.inf
    best_iterate = None
    status = "max_iter"
    tree = mm = None

    for it in range(1, opts.max_iter + 1):
        targets = ytilde_s - _re_contribution(blups, ds_scaled)
        tree = select_by_cv(ds.X, targets, opts.n_folds, opts.selection,
                            opts.controls, rng,
                            fold_by_object=opts.fold_by_object,
                            object_codes=ds.object_codes)
        tree.predictor_names = list(ds.predictor_names)
        memberships = tree.assign(ds.X)
        spec = MixedModelSpec(memberships=memberships, n_leaves=tree.n_leaves,
                              residual_structure=opts.residual_structure,
                              no_random_effects=opts.no_random_effects)
        work = ds_scaled.with_responses(ytilde_s)
        mm = fit_mvlmm(work, spec, theta0=theta_warm)
        ll = mm.loglik
        trace.append({"iteration": it, "loglik": float(ll),
                      "n_leaves": tree.n_leaves})
        if ll > best_ll:
            best_ll = ll
            best_iterate = (tree, mm)

        if prev_ll is not None:
            # size of the step (b) move; absolute, since relinearization can
            # legitimately lower the working-response likelihood
            gain = abs(ll - prev_ll)
        elif family.is_gaussian:
            gain = ll - mm.init_loglik    # gain achieved within the first refit
        else:
            gain = np.inf                 # the linearization must update once
        if gain < opts.tol:
            status = "converged"
            break
        if family.is_gaussian:
            # tree reselection can cycle; likelihoods are only comparable
            # across iterations when the response is fixed (gaussian case)
            signature = _structure_signature(tree)
            if signature in history and ll < history[signature]:
                status = "oscillation_stopped"
                tree, mm = best_iterate
                break
            history[signature] = max(history.get(signature, -np.inf), ll)

        blups = mm.blups
        theta_warm = None if opts.no_random_effects else mm.theta
        prev_ll = ll
        if not family.is_gaussian:
            eta_s = mm.M.T[memberships] + _re_contribution(blups, ds_scaled)
            eta_raw = tf.invert(eta_s)
            if np.any(np.abs(eta_raw) > ETA_CLAMP):
                if "eta_clamped" not in flags:
                    flags.append("eta_clamped")
                eta_raw = np.clip(eta_raw, -ETA_CLAMP, ETA_CLAMP)
            eta = eta_raw
            ytilde = _pseudo_rows(ds.Y, eta, family)
            ytilde_s = tf.apply(ytilde)

    return _compose(ds, opts, tf, tree, mm, trace, status, flags)


def fit_reem(ds: LongitudinalDataset, opts: ReemOptions) -> ReemModel:
    """Gaussian alternation: start from zero random effects, repeat tree
    selection on adjusted targets and mixed-model refitting until the
    likelihood gain in the refit falls below tolerance."""
    if not get_family(opts.family).is_gaussian:
        raise DataError("fit_reem requires the gaussian family; "
                        "use fit_generalized_reem")
    return _fit_core(ds, opts)


def fit_generalized_reem(ds: LongitudinalDataset, opts: ReemOptions) -> ReemModel:
    """Quasi-likelihood variant for non-Gaussian responses via working
    responses; with the identity link it reproduces fit_reem exactly."""
    return _fit_core(ds, opts)


def predict_reem(model: ReemModel, x, z=None, object_id=None,
                 population_only: bool = False, strict: bool = False) -> np.ndarray:
    """Route x through the stored tree, add the object's BLUP contribution
    when known, and report on the original response scale."""
    return model.predict(x, z, object_id, population_only, strict)


# ---------------------------------------------------------------------------
# baseline competitors


@dataclass
class TreeOnlyModel:
    """CV-selected multivariate tree with no longitudinal structure."""

    transform: StandardizationTransform
    tree: MultivariateTree
    response_names: list
    predictor_names: list

    def predict_matrix(self, X, Z=None, object_ids=None,
                       population_only=False, strict=False) -> np.ndarray:
        return self.fixed_predict_matrix(X)

    def fixed_predict_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.transform.invert(self.tree.predict(X))

    def trees_for_recovery(self) -> list:
        return [self.tree]

    def d_original(self):
        return None

    def random_effects_original(self):
        return None


@dataclass
class UnivariateReemEnsemble:
    """Independent single-response alternation fits, one per response."""

    models: list

    def predict_matrix(self, X, Z=None, object_ids=None,
                       population_only=False, strict=False) -> np.ndarray:
        cols = [m.predict_matrix(X, Z, object_ids, population_only, strict)[:, 0]
                for m in self.models]
        return np.column_stack(cols)

    def fixed_predict_matrix(self, X) -> np.ndarray:
        return np.column_stack([m.fixed_predict_matrix(X)[:, 0] for m in self.models])

    def trees_for_recovery(self) -> list:
        return [m.tree for m in self.models]

    def d_original(self):
        return None      # no cross-response covariance is estimated

    def random_effects_original(self) -> dict:
        per = [m.random_effects_original() for m in self.models]
        return {oid: np.vstack([p[oid] for p in per]) for oid in per[0]}


@dataclass
class LinearMixedBaseline:
    """Linear fixed effects (intercept + covariates) with random effects:
    either one joint multivariate fit or J independent univariate fits."""

    kind: str                       # "multilme" | "unilme"
    fits: list                      # one FittedMixedModel (joint) or J of them
    response_names: list
    predictor_names: list
    n_design: int

    def _features(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if np.isnan(X).any():
            raise DataError("linear baselines require complete predictors")
        return np.column_stack([np.ones(X.shape[0]), X])

    def fixed_predict_matrix(self, X) -> np.ndarray:
        F = self._features(X)
        if self.kind == "multilme":
            return F @ self.fits[0].M.T
        return np.column_stack([F @ fit.M.T[:, 0] for fit in self.fits])

    def predict_matrix(self, X, Z=None, object_ids=None,
                       population_only=False, strict=False) -> np.ndarray:
        out = self.fixed_predict_matrix(X)
        if population_only or object_ids is None:
            return out
        Z = np.asarray(Z, dtype=float)
        B = self.random_effects_original()
        for i, oid in enumerate(object_ids):
            if oid in B:
                out[i] = out[i] + B[oid] @ Z[i]
        return out

    def trees_for_recovery(self) -> list:
        return []

    def d_original(self):
        return self.fits[0].D if self.kind == "multilme" else None

    def random_effects_original(self) -> dict:
        if self.kind == "multilme":
            return dict(self.fits[0].blups)
        keys = self.fits[0].blups.keys()
        return {oid: np.vstack([fit.blups[oid] for fit in self.fits])
                for oid in keys}


def fit_baseline(ds: LongitudinalDataset, method: str, opts: ReemOptions):
    """Competitor fits sharing the prediction surface of ReemModel."""
    opts.validate()
    if method == "multitree":
        rng = np.random.default_rng(opts.seed)
        ds_scaled, tf = standardize(ds, opts.standardization)
        tree = select_by_cv(ds.X, ds_scaled.Y, opts.n_folds, opts.selection,
                            opts.controls, rng,
                            fold_by_object=opts.fold_by_object,
                            object_codes=ds.object_codes)
        tree.predictor_names = list(ds.predictor_names)
        return TreeOnlyModel(tf, tree, list(ds.response_names),
                             list(ds.predictor_names))
    if method == "uniREEM":
        fit_one = fit_reem if get_family(opts.family).is_gaussian else fit_generalized_reem
        models = [fit_one(ds.select_responses([j]), opts)
                  for j in range(ds.n_responses)]
        return UnivariateReemEnsemble(models)
    if method in ("unilme", "multilme"):
        if np.isnan(ds.X).any():
            raise DataError("linear baselines require complete predictors")
        features = np.column_stack([np.ones(ds.n_rows), ds.X])
        if method == "multilme":
            spec = MixedModelSpec(features=features,
                                  residual_structure=opts.residual_structure,
                                  no_random_effects=opts.no_random_effects)
            fits = [fit_mvlmm(ds, spec)]
        else:
            fits = []
            for j in range(ds.n_responses):
                spec = MixedModelSpec(features=features,
                                      residual_structure=opts.residual_structure,
                                      no_random_effects=opts.no_random_effects)
                fits.append(fit_mvlmm(ds.select_responses([j]), spec))
        return LinearMixedBaseline(method, fits, list(ds.response_names),
                                   list(ds.predictor_names), ds.n_design)
    raise DataError(f"unknown baseline method '{method}'")
