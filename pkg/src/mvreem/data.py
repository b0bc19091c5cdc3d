"""Panel data containers, CSV ingestion, and response standardization.

A dataset is a long-format panel: one row per (object, time) with a
J-vector of responses, a k-vector of predictors (which may contain
missing values), and a q-vector random-effect design. Rows are kept in
canonical (object id, time) order so that downstream estimation is
independent of input row order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

MISSING_MARKERS = {"", "NA"}

# floor for eigenvalues when forming the inverse square root of cov(Y)
EIG_FLOOR = 1e-12


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


# ---------------------------------------------------------------------------
# response families


@dataclass(frozen=True)
class Family:
    """A response distribution with mean function ``h`` and its inverse.

    ``mean`` maps the linear scale eta to the response mean, ``mean_deriv``
    is its derivative, and ``link`` maps a mean back to eta.
    """

    name: str
    mean: Callable[[np.ndarray], np.ndarray]
    mean_deriv: Callable[[np.ndarray], np.ndarray]
    link: Callable[[np.ndarray], np.ndarray]

    @property
    def is_gaussian(self) -> bool:
        return self.name == "gaussian_identity"

    def validate_responses(self, Y: np.ndarray) -> None:
        if self.name == "bernoulli_logit":
            if not np.all((Y == 0.0) | (Y == 1.0)):
                raise DataError("bernoulli responses must be 0 or 1")
        elif self.name == "poisson_log":
            if np.any(Y < 0) or np.any(np.abs(Y - np.round(Y)) > 1e-8):
                raise DataError("poisson responses must be nonnegative integers")


GAUSSIAN_IDENTITY = Family(
    "gaussian_identity",
    mean=lambda eta: eta,
    mean_deriv=lambda eta: np.ones_like(np.asarray(eta, dtype=float)),
    link=lambda mu: mu,
)
BERNOULLI_LOGIT = Family("bernoulli_logit", mean=expit,
                         mean_deriv=lambda eta: expit(eta) * (1.0 - expit(eta)),
                         link=logit)
POISSON_LOG = Family("poisson_log", mean=np.exp, mean_deriv=np.exp, link=np.log)

FAMILIES = {
    "gaussian_identity": GAUSSIAN_IDENTITY,
    "bernoulli_logit": BERNOULLI_LOGIT,
    "poisson_log": POISSON_LOG,
    # CLI-facing aliases
    "gaussian": GAUSSIAN_IDENTITY,
    "bernoulli": BERNOULLI_LOGIT,
    "poisson": POISSON_LOG,
}


def get_family(name) -> Family:
    if isinstance(name, Family):
        return name
    try:
        return FAMILIES[name]
    except KeyError:
        raise DataError(f"unknown family '{name}'; expected one of "
                        f"gaussian, bernoulli, poisson") from None


# ---------------------------------------------------------------------------
# dataset


@dataclass
class LongitudinalDataset:
    """Long-format panel with canonical (object, time) row order.

    Responses never contain missing values; predictors may (stored as NaN).
    The design matrix Z holds the per-row random-effect covariates.
    """

    object_ids: np.ndarray          # (n,) str
    times: np.ndarray               # (n,) float
    Y: np.ndarray                   # (n, J)
    X: np.ndarray                   # (n, k), NaN marks missing
    Z: np.ndarray                   # (n, q)
    response_names: list
    predictor_names: list
    design_names: list
    object_labels: np.ndarray = field(init=False)   # unique ids, sorted
    object_codes: np.ndarray = field(init=False)    # (n,) index into labels

    def __post_init__(self):
        self.object_ids = np.asarray(self.object_ids, dtype=object)
        self.times = np.asarray(self.times, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        self.Z = np.asarray(self.Z, dtype=float)
        if self.Y.ndim != 2 or self.X.ndim != 2 or self.Z.ndim != 2:
            raise DataError("Y, X, Z must be 2-d arrays")
        n = self.Y.shape[0]
        if not (len(self.object_ids) == len(self.times) == self.X.shape[0] == self.Z.shape[0] == n):
            raise DataError("row counts of ids, times, Y, X, Z differ")
        if self.Y.shape[1] != len(self.response_names):
            raise DataError("response_names does not match Y width")
        if self.X.shape[1] != len(self.predictor_names):
            raise DataError("predictor_names does not match X width")
        if self.Z.shape[1] != len(self.design_names):
            raise DataError("design_names does not match Z width")
        if np.isnan(self.Y).any():
            raise DataError("responses must not contain missing values")
        if np.isnan(self.Z).any():
            raise DataError("design columns must not contain missing values")
        # canonical sort: object id, then time
        if n:
            order = np.lexsort((self.times, self.object_ids.astype(str)))
            self.object_ids = self.object_ids[order]
            self.times = self.times[order]
            self.Y = self.Y[order]
            self.X = self.X[order]
            self.Z = self.Z[order]
        labels, codes = np.unique(self.object_ids.astype(str), return_inverse=True)
        self.object_labels = labels
        self.object_codes = codes

    # -- basic shape accessors ------------------------------------------------

    @property
    def n_rows(self) -> int:
        return self.Y.shape[0]

    @property
    def n_objects(self) -> int:
        return len(self.object_labels)

    @property
    def n_responses(self) -> int:
        return self.Y.shape[1]

    @property
    def n_predictors(self) -> int:
        return self.X.shape[1]

    @property
    def n_design(self) -> int:
        return self.Z.shape[1]

    def rows_of(self, code: int) -> np.ndarray:
        """Row indices of the object with the given code (label index)."""
        return np.flatnonzero(self.object_codes == code)

    def with_responses(self, Y: np.ndarray, response_names=None) -> "LongitudinalDataset":
        """Same panel with a replaced response block (shares X and Z)."""
        return LongitudinalDataset(
            self.object_ids, self.times, np.asarray(Y, dtype=float), self.X, self.Z,
            list(response_names) if response_names is not None else list(self.response_names),
            list(self.predictor_names), list(self.design_names))

    def select_responses(self, indices: Sequence[int]) -> "LongitudinalDataset":
        """Sub-panel keeping only the given response columns."""
        idx = list(indices)
        return self.with_responses(self.Y[:, idx], [self.response_names[j] for j in idx])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["object", "time"] + list(self.response_names)
                       + list(self.predictor_names) + list(self.design_names))
            for i in range(self.n_rows):
                xs = ["" if math.isnan(v) else repr(float(v)) for v in self.X[i]]
                w.writerow([self.object_ids[i], repr(float(self.times[i]))]
                           + [repr(float(v)) for v in self.Y[i]] + xs
                           + [repr(float(v)) for v in self.Z[i]])


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass
class CsvSchema:
    """Column-role map for :func:`load_csv`."""

    object_col: str
    time_col: str
    response_cols: list
    predictor_cols: list
    design_cols: list = field(default_factory=list)


def _parse_cell(token: str, col: str, obj: str, t: str, allow_missing: bool) -> float:
    token = token.strip()
    if token in MISSING_MARKERS:
        if allow_missing:
            return math.nan
        raise DataError(f"response '{col}' missing at ({obj}, {t})")
    try:
        return float(token)
    except ValueError:
        kind = "value" if allow_missing else "response"
        raise DataError(f"non-numeric {kind} '{token}' in column '{col}' "
                        f"at ({obj}, {t})") from None


def load_csv(path, schema: CsvSchema) -> LongitudinalDataset:
    """Read a long-format panel CSV into a :class:`LongitudinalDataset`.

    The file must have a header row. Missing cells (empty or ``NA``) are
    allowed only in predictor columns. Duplicate (object, time) keys and
    missing or non-numeric responses are rejected.
    """
    if not schema.response_cols:
        raise DataError("schema must name at least one response column")
    if not schema.predictor_cols:
        raise DataError("schema must name at least one predictor column")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        col_idx = {}
        for name in ([schema.object_col, schema.time_col] + schema.response_cols
                     + schema.predictor_cols + schema.design_cols):
            if name not in header:
                raise DataError(f"{path}: column '{name}' not found in header")
            col_idx[name] = header.index(name)

        ids, times, ys, xs, zs = [], [], [], [], []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            obj = row[col_idx[schema.object_col]].strip()
            t_raw = row[col_idx[schema.time_col]].strip()
            try:
                t = float(t_raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric time '{t_raw}'") from None
            key = (obj, t)
            if key in seen:
                raise DataError(f"{path}: duplicate (object, time) key ({obj}, {t_raw})")
            seen.add(key)
            ids.append(obj)
            times.append(t)
            ys.append([_parse_cell(row[col_idx[c]], c, obj, t_raw, False)
                       for c in schema.response_cols])
            xs.append([_parse_cell(row[col_idx[c]], c, obj, t_raw, True)
                       for c in schema.predictor_cols])
            if schema.design_cols:
                z = [_parse_cell(row[col_idx[c]], c, obj, t_raw, True)
                     for c in schema.design_cols]
                if any(math.isnan(v) for v in z):
                    raise DataError(f"{path}: design value missing at ({obj}, {t_raw})")
                zs.append(z)

    n = len(ids)
    design_names = list(schema.design_cols) if schema.design_cols else ["intercept"]
    Z = np.asarray(zs, dtype=float) if schema.design_cols else np.ones((n, 1))
    return LongitudinalDataset(
        np.asarray(ids, dtype=object), np.asarray(times, dtype=float),
        np.asarray(ys, dtype=float).reshape(n, len(schema.response_cols)),
        np.asarray(xs, dtype=float).reshape(n, len(schema.predictor_cols)),
        Z.reshape(n, -1),
        list(schema.response_cols), list(schema.predictor_cols), design_names)


# ---------------------------------------------------------------------------
# standardization


@dataclass
class StandardizationTransform:
    """Invertible response rescaling fitted once on the pooled rows.

    ``marg`` centers and scales each response to unit sample sd; ``cov``
    centers and whitens with the symmetric inverse square root of the
    sample covariance, so Euclidean distances on the transformed scale are
    Mahalanobis distances on the original one.
    """

    method: str
    means: Optional[np.ndarray] = None       # (J,)
    scales: Optional[np.ndarray] = None      # (J,), marg only
    whiten: Optional[np.ndarray] = None      # (J, J), cov only
    unwhiten: Optional[np.ndarray] = None    # (J, J), cov only

    def apply(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        if self.method == "none":
            return Y.copy()
        if self.method == "marg":
            return (Y - self.means) / self.scales
        return (Y - self.means) @ self.whiten

    def invert(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        if self.method == "none":
            return V.copy()
        if self.method == "marg":
            return V * self.scales + self.means
        return V @ self.unwhiten + self.means

    def invert_linear(self, V: np.ndarray) -> np.ndarray:
        """Invert the linear part only (no mean shift); rows are J-vectors."""
        V = np.asarray(V, dtype=float)
        if self.method == "none":
            return V.copy()
        if self.method == "marg":
            return V * self.scales
        return V @ self.unwhiten

    def invert_random_effects(self, B: np.ndarray) -> np.ndarray:
        """Map a (J, q) random-effect matrix back to the original scale."""
        B = np.asarray(B, dtype=float)
        if self.method == "none":
            return B.copy()
        if self.method == "marg":
            return B * self.scales[:, None]
        return self.unwhiten @ B

    def _row_map(self, J: int) -> np.ndarray:
        # original = S @ scaled for column J-vectors
        if self.method == "none":
            return np.eye(J)
        if self.method == "marg":
            return np.diag(self.scales)
        return self.unwhiten

    def invert_d(self, D: np.ndarray, q: int) -> np.ndarray:
        """Back-transform a (Jq, Jq) random-effect covariance."""
        D = np.asarray(D, dtype=float)
        J = D.shape[0] // q
        S = np.kron(self._row_map(J), np.eye(q))
        return S @ D @ S.T

    def invert_residual_cov(self, S: np.ndarray) -> np.ndarray:
        M = self._row_map(S.shape[0])
        return M @ np.asarray(S, dtype=float) @ M.T

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {"method": self.method, "means": arr(self.means),
                "scales": arr(self.scales), "whiten": arr(self.whiten),
                "unwhiten": arr(self.unwhiten)}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationTransform":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)
        return cls(d["method"], arr(d["means"]), arr(d["scales"]),
                   arr(d["whiten"]), arr(d["unwhiten"]))


def standardize(ds: LongitudinalDataset, method: str):
    """Rescale responses by the chosen scheme, pooled over all rows.

    Returns the transformed dataset and the fitted transform. The
    transform is computed once and is never refreshed during iteration.
    """
    if method not in ("none", "marg", "cov"):
        raise DataError(f"unknown standardization method '{method}'")
    if method == "none":
        tf = StandardizationTransform("none")
        return ds.with_responses(ds.Y.copy()), tf
    if ds.n_rows < 2:
        raise DataError("standardization requires at least 2 rows")
    means = ds.Y.mean(axis=0)
    if method == "marg":
        scales = ds.Y.std(axis=0, ddof=1)
        bad = np.flatnonzero(scales <= 0.0)
        if bad.size:
            raise DataError(f"response '{ds.response_names[bad[0]]}' has zero variance")
        tf = StandardizationTransform("marg", means=means, scales=scales)
    else:
        C = np.cov(ds.Y, rowvar=False, ddof=1).reshape(ds.n_responses, ds.n_responses)
        vals, vecs = np.linalg.eigh(C)
        if vals.min() <= 1e-8 * max(vals.max(), 1.0):
            raise DataError("response covariance is singular; 'cov' standardization unavailable")
        vals = np.maximum(vals, EIG_FLOOR)
        whiten = (vecs * (1.0 / np.sqrt(vals))) @ vecs.T
        unwhiten = (vecs * np.sqrt(vals)) @ vecs.T
        tf = StandardizationTransform("cov", means=means, whiten=whiten, unwhiten=unwhiten)
    return ds.with_responses(tf.apply(ds.Y)), tf


def inverse_transform(values: np.ndarray, tf: StandardizationTransform) -> np.ndarray:
    """Map transformed response rows back to the original scale."""
    return tf.invert(values)
