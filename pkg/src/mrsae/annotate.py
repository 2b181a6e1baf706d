"""Age-deconfounded clinical annotation of SAE features.

For each alive feature ``j`` and non-age variable ``c`` the age-partial
Spearman correlation is::

    rho_jc.a = (r_jc - r_ja r_ca) / (sqrt(1 - r_ja^2) sqrt(1 - r_ca^2))

with all ``r`` Spearman correlations (average ranks for ties). p-values come
from a Student-t approximation and are Benjamini-Hochberg corrected over the
whole feature x variable matrix. Each feature takes the category of its
strongest significant partial correlation, falling back to ``aging`` (raw age
correlation FDR-significant) and then ``non-specific``.
"""

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._util import pearson
from .data import EmbeddingMatrix

__all__ = [
    "CATEGORIES",
    "AnnotationTable",
    "EnrichmentTable",
    "spearman",
    "partial_spearman_age",
    "pvalue_corr",
    "pvalue_partial",
    "bh_fdr",
    "category_of",
    "assign_category",
    "annotate_all",
    "annotate_codes",
    "enrichment_test",
]

AD, SEX, GENETIC, COMORBIDITY, AGING, NONSPECIFIC = (
    "AD-related", "sex-related", "genetic", "comorbidity", "aging", "non-specific",
)
CATEGORIES = (AD, SEX, GENETIC, COMORBIDITY, AGING, NONSPECIFIC)
_DEGENERATE = 1e-12


def category_of(variable):
    if variable == "diagnosis":
        return AD
    if variable == "sex":
        return SEX
    if variable == "apoe4":
        return GENETIC
    if variable.startswith("cm_"):
        return COMORBIDITY
    if variable == "age":
        return AGING
    raise KeyError(f"variable {variable!r} has no annotation category")


# ---------------------------------------------------------------------------
# Correlation building blocks
# ---------------------------------------------------------------------------


def _ranks(x):
    return stats.rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman(x, y):
    """Spearman correlation with average ranks; NaN flags a zero-variance input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman expects two 1-D arrays of equal length")
    if x.size < 3:
        raise ValueError("spearman needs N >= 3")
    return pearson(_ranks(x), _ranks(y))


def _eq4(r_jc, r_ja, r_ca):
    den2 = (1.0 - r_ja**2) * (1.0 - r_ca**2)
    with np.errstate(invalid="ignore", divide="ignore"):
        ok = ((1.0 - r_ja**2) >= _DEGENERATE) & ((1.0 - r_ca**2) >= _DEGENERATE)
        rho = np.where(ok, (r_jc - r_ja * r_ca) / np.sqrt(np.where(ok, den2, 1.0)), np.nan)
    return np.clip(rho, -1.0, 1.0)


def partial_spearman_age(feature, var, age):
    """Spearman correlation of ``feature`` and ``var`` with age partialled out.

    Returns NaN when either input is constant or when a denominator term
    ``1 - r^2`` falls below 1e-12 (one input is a monotone function of age).
    """
    feature, var, age = (np.asarray(v, dtype=np.float64) for v in (feature, var, age))
    if not feature.shape == var.shape == age.shape:
        raise ValueError("inputs must share one length")
    if feature.size < 4:
        raise ValueError("partial_spearman_age needs N >= 4")
    r_jc = spearman(feature, var)
    r_ja = spearman(feature, age)
    r_ca = spearman(var, age)
    if np.isnan(r_jc) or np.isnan(r_ja) or np.isnan(r_ca):
        return float("nan")
    return float(_eq4(r_jc, r_ja, r_ca))


def pvalue_corr(r, n, n_controls=0):
    """Two-sided p for a (partial) correlation via ``t = r sqrt(df / (1 - r^2))``, ``df = n - 2 - n_controls``.

    ``|r| == 1`` gives p = 0; NaN propagates.
    """
    r = np.asarray(r, dtype=np.float64)
    df = n - 2 - n_controls
    if df < 1:
        raise ValueError(f"need n > {2 + n_controls} for a correlation test")
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.abs(r) * np.sqrt(df / (1.0 - r * r))
        p = 2.0 * stats.t.sf(t, df)
    p = np.where(np.abs(r) >= 1.0, 0.0, p)
    p = np.where(np.isnan(r), np.nan, p)
    return float(p) if p.ndim == 0 else p


def pvalue_partial(rho, n):
    """p-value for a correlation with one covariate (age) partialled out: ``df = n - 3``."""
    if n < 4:
        raise ValueError("pvalue_partial needs n >= 4")
    return pvalue_corr(rho, n, n_controls=1)


def bh_fdr(pvals, alpha=0.05):
    """Benjamini-Hochberg step-up procedure.

    NaN entries are ignored (adjusted value NaN, never rejected); the number
    of tests ``m`` counts finite entries only. Works on arrays of any shape.

    Returns
    -------
    adjusted : ndarray
        ``min_{j >= i} (m / j) p_(j)`` capped at 1, in the input layout.
    reject : ndarray of bool
    """
    p = np.asarray(pvals, dtype=np.float64)
    flat = p.ravel()
    finite = ~np.isnan(flat)
    vals = flat[finite]
    if np.any((vals < 0) | (vals > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    adj = np.full(flat.shape, np.nan)
    rej = np.zeros(flat.shape, dtype=bool)
    m = vals.size
    if m:
        order = np.argsort(vals, kind="stable")
        ranked = vals[order]
        i = np.arange(1, m + 1)
        passing = np.flatnonzero(ranked <= i / m * alpha)
        n_reject = passing[-1] + 1 if passing.size else 0
        scaled = np.minimum(1.0, np.minimum.accumulate((m / i * ranked)[::-1])[::-1])
        a = np.empty(m)
        a[order] = scaled
        r = np.zeros(m, dtype=bool)
        r[order[:n_reject]] = True
        adj[finite] = a
        rej[finite] = r
    return adj.reshape(p.shape), rej.reshape(p.shape)


# ---------------------------------------------------------------------------
# Annotation table
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class AnnotationTable:
    """Per-feature annotation. Matrices are features x variables."""

    features: np.ndarray
    variables: tuple
    n_samples: int
    r_age: np.ndarray
    p_age: np.ndarray
    p_age_fdr: np.ndarray
    rho: np.ndarray
    p: np.ndarray
    p_fdr: np.ndarray
    significant: np.ndarray
    category: list
    winner: list
    alpha: float = 0.05
    deconfounded: bool = True
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.features)

    def row(self, feature):
        return int(np.flatnonzero(self.features == feature)[0])

    def features_in(self, category):
        return np.array([f for f, c in zip(self.features, self.category) if c == category], dtype=np.int64)

    def category_counts(self):
        return {c: sum(1 for x in self.category if x == c) for c in CATEGORIES}

    def heatmap(self):
        """|rho| with entries failing FDR < alpha set to NaN (for plotting)."""
        return np.where(self.significant, np.abs(self.rho), np.nan)

    def to_csv(self, path, provenance=None):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if provenance is not None:
                fh.write("# " + json.dumps({"provenance": provenance}, sort_keys=True) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            head = ["feature", "category", "winner", "r_age", "p_age", "p_age_fdr"]
            for v in self.variables:
                head += [f"rho_{v}", f"p_{v}", f"pfdr_{v}"]
            w.writerow(head)
            for i, f in enumerate(self.features):
                row = [int(f), self.category[i], self.winner[i] or "",
                       _num(self.r_age[i]), _num(self.p_age[i]), _num(self.p_age_fdr[i])]
                for j in range(len(self.variables)):
                    row += [_num(self.rho[i, j]), _num(self.p[i, j]), _num(self.p_fdr[i, j])]
                w.writerow(row)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "deconfounded": self.deconfounded,
            "n_samples": self.n_samples,
            "variables": list(self.variables),
            "category_counts": self.category_counts(),
            "features": [
                {
                    "feature": int(f),
                    "category": self.category[i],
                    "winner": self.winner[i],
                    "age": {"r": _json_num(self.r_age[i]), "p": _json_num(self.p_age[i]),
                            "p_fdr": _json_num(self.p_age_fdr[i])},
                    "variables": {
                        v: {"rho": _json_num(self.rho[i, j]), "p": _json_num(self.p[i, j]),
                            "p_fdr": _json_num(self.p_fdr[i, j]), "significant": bool(self.significant[i, j])}
                        for j, v in enumerate(self.variables)
                    },
                }
                for i, f in enumerate(self.features)
            ],
            **({"meta": self.meta} if self.meta else {}),
        }

    def to_json(self, path, provenance=None):
        payload = self.to_dict()
        if provenance is not None:
            payload["provenance"] = provenance
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)

    def heatmap_csv(self, path):
        hm = self.heatmap()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature"] + list(self.variables))
            for i, f in enumerate(self.features):
                w.writerow([int(f)] + [_num(x) for x in hm[i]])


def _num(x):
    x = float(x)
    return "" if np.isnan(x) else "%.17g" % x


def _json_num(x):
    x = float(x)
    return None if np.isnan(x) else x


def assign_category(rho, p_fdr, variables, p_age_fdr, alpha=0.05):
    """Category and winning variable for one feature.

    Candidates are variables with ``p_fdr < alpha``; the winner maximises
    ``|rho|``, then minimises ``p_fdr``, then takes the earliest variable in
    the declared order. Without candidates: ``aging`` if ``p_age_fdr < alpha``,
    else ``non-specific`` (winner ``None``).
    """
    best = None
    for j, var in enumerate(variables):
        if np.isnan(rho[j]) or np.isnan(p_fdr[j]) or not p_fdr[j] < alpha:
            continue
        key = (-abs(rho[j]), p_fdr[j], j)
        if best is None or key < best[0]:
            best = (key, var)
    if best is not None:
        return category_of(best[1]), best[1]
    if not np.isnan(p_age_fdr) and p_age_fdr < alpha:
        return AGING, None
    return NONSPECIFIC, None


def _rank_columns(M):
    return np.column_stack([_ranks(M[:, j]) for j in range(M.shape[1])]) if M.shape[1] else M.astype(np.float64)


def _corr_matrix(A, B):
    """Pearson correlation between every column of A and every column of B (NaN for constant columns)."""
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    sa = np.einsum("ij,ij->j", Ac, Ac)
    sb = np.einsum("ij,ij->j", Bc, Bc)
    num = Ac.T @ Bc
    den = np.sqrt(np.outer(sa, sb))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return np.clip(r, -1.0, 1.0)


def annotate_codes(Z, features, covariates, alpha=0.05, deconfound=True):
    """Annotate the columns of a code matrix ``Z`` (rows aligned with ``covariates``).

    With ``deconfound=False`` raw Spearman correlations are used and age joins
    the candidate variables, reproducing naive (confounded) annotation.
    """
    Z = np.asarray(Z, dtype=np.float64)
    features = np.asarray(features, dtype=np.int64)
    n = Z.shape[0]
    if covariates.n != n:
        raise ValueError(f"covariates have {covariates.n} rows but codes have {n}")
    if n < 5:
        raise ValueError("annotation needs at least 5 samples")
    var_items = covariates.primary_variables()
    names = tuple(v for v, _ in var_items)
    V = np.column_stack([x for _, x in var_items])
    F = len(features)

    Rz = _rank_columns(Z)
    Rv = _rank_columns(V)
    ra = _ranks(covariates.age)[:, None]
    r_ja = _corr_matrix(Rz, ra)[:, 0] if F else np.zeros(0)
    r_ca = _corr_matrix(Rv, ra)[:, 0]
    r_jc = _corr_matrix(Rz, Rv) if F else np.zeros((0, len(names)))
    p_age = pvalue_corr(r_ja, n) if F else np.zeros(0)
    p_age_fdr, _ = bh_fdr(p_age, alpha)

    if deconfound:
        rho = _eq4(r_jc, r_ja[:, None], r_ca[None, :]) if F else r_jc
        p = pvalue_partial(rho, n) if F else np.zeros((0, len(names)))
    else:
        names = names + ("age",)
        rho = np.column_stack([r_jc, r_ja]) if F else np.zeros((0, len(names)))
        p = pvalue_corr(rho, n) if F else np.zeros((0, len(names)))
    p = np.asarray(p, dtype=np.float64).reshape(F, len(names))
    p_fdr, reject = bh_fdr(p, alpha)
    significant = reject & (p_fdr < alpha)

    category, winner = [], []
    for i in range(F):
        c, w = assign_category(rho[i], p_fdr[i], names, p_age_fdr[i] if deconfound else np.nan, alpha)
        category.append(c)
        winner.append(w)
    return AnnotationTable(
        features=features, variables=names, n_samples=n, r_age=r_ja, p_age=np.asarray(p_age, dtype=np.float64),
        p_age_fdr=p_age_fdr, rho=rho, p=p, p_fdr=p_fdr, significant=significant,
        category=category, winner=winner, alpha=alpha, deconfounded=deconfound,
    )


def annotate_all(model, H, covariates, alpha=0.05, features=None, deconfound=True):
    """Annotate the model's alive features on embeddings ``H``.

    ``covariates`` must be row-aligned with ``H`` (same sample ids, same order).
    """
    from .sae import encode

    if isinstance(H, EmbeddingMatrix) and tuple(H.sample_ids) != tuple(covariates.sample_id):
        raise ValueError("covariates are not aligned with embedding rows")
    X = H.values if isinstance(H, EmbeddingMatrix) else np.asarray(H, dtype=np.float64)
    if X.shape[0] != covariates.n:
        raise ValueError(f"covariates have {covariates.n} rows but embeddings have {X.shape[0]}")
    feats = model.alive_features if features is None else np.asarray(features, dtype=np.int64)
    Z = encode(model.params, X, model.config.activation, model.config.k)[:, feats]
    return annotate_codes(Z, feats, covariates, alpha=alpha, deconfound=deconfound)


# ---------------------------------------------------------------------------
# Enrichment
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EnrichmentTable:
    features: np.ndarray
    variables: tuple
    rho: np.ndarray
    p: np.ndarray
    p_fdr: np.ndarray
    significant: np.ndarray
    n_used: np.ndarray
    skipped: tuple = ()

    def counts(self):
        """Significant features per secondary variable."""
        return {v: int(self.significant[:, j].sum()) for j, v in enumerate(self.variables)}

    def counts_by_category(self, annotations):
        cats = dict(zip(annotations.features.tolist(), annotations.category))
        out = {}
        for j, v in enumerate(self.variables):
            tally = {c: 0 for c in CATEGORIES}
            for i, f in enumerate(self.features):
                if self.significant[i, j]:
                    tally[cats.get(int(f), NONSPECIFIC)] += 1
            out[v] = tally
        return out

    def to_csv(self, path, provenance=None):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if provenance is not None:
                fh.write("# " + json.dumps({"provenance": provenance}, sort_keys=True) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "variable", "rho", "p", "p_fdr", "significant", "n"])
            for i, f in enumerate(self.features):
                for j, v in enumerate(self.variables):
                    w.writerow([int(f), v, _num(self.rho[i, j]), _num(self.p[i, j]), _num(self.p_fdr[i, j]),
                                int(self.significant[i, j]), int(self.n_used[j])])


def enrichment_test(annotations, activations, secondary, alpha=0.05):
    """Spearman association of each annotated feature with each secondary variable.

    BH-FDR is applied separately within each secondary variable (over
    features). Rows with a missing secondary value are dropped for that
    variable only; zero-variance variables are skipped with a warning.

    Parameters
    ----------
    annotations : AnnotationTable
    activations : ndarray, shape (N, len(annotations))
        Codes of the annotated features, columns in ``annotations.features`` order.
    secondary : mapping of name -> ndarray, shape (N,)
    """
    Z = np.asarray(activations, dtype=np.float64)
    F = len(annotations.features)
    if Z.ndim != 2 or Z.shape[1] != F:
        raise ValueError("activations must have one column per annotated feature")
    names, rhos, ps, pf, sig, used, skipped = [], [], [], [], [], [], []
    for name, col in secondary.items():
        col = np.asarray(col, dtype=np.float64)
        if col.shape[0] != Z.shape[0]:
            raise ValueError(f"secondary column {name!r} is not aligned with activations")
        ok = ~np.isnan(col)
        if ok.sum() < 4 or np.ptp(col[ok]) == 0:
            warnings.warn(f"secondary variable {name!r} has zero variance; skipped", UserWarning, stacklevel=2)
            skipped.append(name)
            continue
        n = int(ok.sum())
        r = _corr_matrix(_rank_columns(Z[ok]), _ranks(col[ok])[:, None])[:, 0] if F else np.zeros(0)
        p = pvalue_corr(r, n) if F else np.zeros(0)
        p = np.asarray(p, dtype=np.float64).reshape(F)
        adj, rej = bh_fdr(p, alpha)
        names.append(name)
        rhos.append(r)
        ps.append(p)
        pf.append(adj)
        sig.append(rej)
        used.append(n)
    stack = lambda cols, dt=np.float64: (np.column_stack(cols) if cols else np.zeros((F, 0))).astype(dt)  # noqa: E731
    return EnrichmentTable(
        features=np.asarray(annotations.features), variables=tuple(names),
        rho=stack(rhos), p=stack(ps), p_fdr=stack(pf), significant=stack(sig, bool),
        n_used=np.array(used, dtype=np.int64), skipped=tuple(skipped),
    )
