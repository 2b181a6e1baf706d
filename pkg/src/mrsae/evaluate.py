"""Selective prediction under subject-level stratified CV, ablations, and cross-cohort replication."""

import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from ._util import derive_seed, pearson
from .annotate import CATEGORIES, annotate_all
from .data import EmbeddingMatrix, latest_scan_per_subject
from .manifold import build_knn_graph
from .sae import activation_stats, encode, split_subjects, train

__all__ = [
    "FoldPlan",
    "LeakageError",
    "LogisticModel",
    "PredictionReport",
    "Selector",
    "ReplicationReport",
    "AblationGrid",
    "stratified_subject_kfold",
    "assert_no_leakage",
    "logistic_fit",
    "log_likelihood",
    "standardize_fold",
    "auc",
    "sens_spec",
    "roc_points",
    "top_n_by_frequency",
    "category",
    "random_alive",
    "all_alive",
    "raw_embedding",
    "covariates_only",
    "selective_prediction",
    "ablation_suite",
    "cross_cohort_replicate",
]

N_RANDOM_DRAWS = 10


class LeakageError(AssertionError):
    pass


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    assignments: dict  # subject_id -> fold
    seed: int
    label: str

    def fold_of(self, subject_ids):
        return np.array([self.assignments.get(s, -1) for s in subject_ids], dtype=np.int64)

    def splits(self, subject_ids):
        """(train_rows, test_rows) per fold; rows of unassigned subjects are left out."""
        f = self.fold_of(subject_ids)
        out = []
        for k in range(self.n_folds):
            out.append((np.flatnonzero((f >= 0) & (f != k)), np.flatnonzero(f == k)))
        assert_no_leakage(out, subject_ids)
        return out


def assert_no_leakage(splits, subject_ids):
    """Raise :class:`LeakageError` if any subject has rows on both sides of a fold."""
    subject_ids = list(subject_ids)
    for k, (tr, te) in enumerate(splits):
        shared = {subject_ids[i] for i in tr} & {subject_ids[i] for i in te}
        if shared:
            raise LeakageError(f"fold {k}: subjects in both train and test, e.g. {sorted(shared)[0]!r}")


def _subject_labels(subject_ids, labels):
    out = {}
    for s, y in zip(subject_ids, labels):
        if np.isnan(y):
            continue
        if s in out and out[s] != y:
            raise ValueError(f"subject {s!r} has inconsistent labels")
        out[s] = float(y)
    return out


def stratified_subject_kfold(covariates, label="converter", n_folds=5, seed=0):
    """Assign subjects to folds, stratified on a binary subject-level label.

    ``label`` is a covariate attribute name or an array aligned to rows (NaN =
    not in the evaluation cohort). Within each stratum subjects are shuffled,
    then dealt round-robin; the negative stratum continues where the positive
    one stopped so fold sizes stay balanced.
    """
    if isinstance(label, str):
        values = getattr(covariates, label, None)
        if values is None:
            raise ValueError(f"covariates have no {label!r} column")
        name = label
    else:
        values, name = label, "label"
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != covariates.n:
        raise ValueError("label is not aligned with covariate rows")
    by_subject = _subject_labels(covariates.subject_id, values)
    if any(v not in (0.0, 1.0) for v in by_subject.values()):
        raise ValueError("stratification label must be binary")
    pos = [s for s, v in by_subject.items() if v == 1.0]
    neg = [s for s, v in by_subject.items() if v == 0.0]
    if len(pos) < n_folds:
        raise ValueError(f"only {len(pos)} positive subjects for {n_folds} folds")
    if len(neg) < n_folds:
        raise ValueError(f"only {len(neg)} negative subjects for {n_folds} folds")
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    assign = {}
    slot = 0
    for stratum in (pos, neg):
        for i in rng.permutation(len(stratum)):
            assign[stratum[i]] = slot % n_folds
            slot += 1
    return FoldPlan(n_folds=n_folds, assignments=assign, seed=seed, label=name)


# ---------------------------------------------------------------------------
# Logistic regression and metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    n_iter: int
    converged: bool
    separated: bool

    def decision(self, X):
        return np.asarray(X, dtype=np.float64) @ self.weights + self.intercept

    def predict_proba(self, X):
        return _sigmoid(self.decision(X))


def _sigmoid(t):
    return np.exp(-np.logaddexp(0.0, -t))


def log_likelihood(X, y, weights, intercept, ridge=0.0):
    eta = np.asarray(X, dtype=np.float64) @ weights + intercept
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return ll - 0.5 * ridge * float(weights @ weights)


def logistic_fit(X, y, ridge=1e-6, max_iter=100, tol=1e-8):
    """L2-penalised logistic regression by iteratively reweighted least squares.

    The intercept is unpenalised. Newton steps are halved until the penalised
    log-likelihood does not decrease. Convergence: max absolute parameter change
    below ``tol``. ``separated`` is set when the fitted linear predictor
    classifies every training row strictly correctly (the unpenalised optimum
    would then be at infinity).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError("y must have one entry per row of X")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("y must be binary")
    base = y.mean() if n else 0.5
    if base in (0.0, 1.0):
        rate = min(max(base, 1e-6), 1 - 1e-6)
        return LogisticModel(np.zeros(p), float(np.log(rate / (1 - rate))), 0, True, False)

    A = np.column_stack([np.ones(n), X])
    pen = np.full(p + 1, ridge)
    pen[0] = 0.0
    beta = np.zeros(p + 1)
    beta[0] = np.log(base / (1 - base))

    def objective(b):
        eta = A @ b
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(pen * b * b))

    obj = objective(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = _sigmoid(A @ beta)
        w = mu * (1 - mu)
        grad = A.T @ (y - mu) - pen * beta
        hess = (A * w[:, None]).T @ A + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            c_obj = objective(cand)
            if c_obj >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        change = float(np.max(np.abs(cand - beta)))
        beta, obj = cand, c_obj
        if change < tol:
            converged = True
            break
    margin = (2 * y - 1) * (A @ beta)
    separated = bool(np.all(margin > 0))
    return LogisticModel(beta[1:].copy(), float(beta[0]), it, converged, separated)


def standardize_fold(train_X, test_X):
    """z-score both blocks with the training mean and std (ddof=0); constant columns are only centred."""
    tr = np.asarray(train_X, dtype=np.float64)
    te = np.asarray(test_X, dtype=np.float64)
    if tr.shape[0] == 0:
        raise ValueError("training block is empty")
    mu = tr.mean(axis=0)
    sd = tr.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    return (tr - mu) / scale, (te - mu) / scale


def _check_binary(labels):
    y = np.asarray(labels)
    if y.ndim != 1 or np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be a 1-D 0/1 vector")
    n_pos = int(np.sum(y == 1))
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("both classes must be present")
    return y.astype(bool), n_pos, y.size - n_pos


def auc(scores, labels):
    """Mann-Whitney AUC: (concordant + 0.5 ties) / (n_pos n_neg), via midranks."""
    s = np.asarray(scores, dtype=np.float64)
    y, n_pos, n_neg = _check_binary(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    r = stats.rankdata(s, method="average")
    u = float(r[y].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def sens_spec(scores, labels, threshold=0.5):
    """(sensitivity %, specificity %) with prediction positive iff score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y, n_pos, n_neg = _check_binary(labels)
    pred = s >= threshold
    return 100.0 * np.sum(pred & y) / n_pos, 100.0 * np.sum(~pred & ~y) / n_neg


def roc_points(scores, labels):
    """ROC curve as (fpr, tpr) arrays over distinct thresholds, starting at (0, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y, n_pos, n_neg = _check_binary(labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


# ---------------------------------------------------------------------------
# Feature selectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Selector:
    kind: str
    n: int | None = None
    category: str | None = None
    seed: int | None = None
    exclude: bool = False

    @property
    def name(self):
        if self.kind == "top_n_by_frequency":
            return f"top-{self.n}"
        if self.kind == "category":
            return f"{'w/o' if self.exclude else 'only'} {self.category}"
        if self.kind == "random_alive":
            return f"random-{self.n}"
        return self.kind.replace("_", "-")

    @property
    def needs_annotations(self):
        return self.kind == "category"


def top_n_by_frequency(n=16):
    return Selector("top_n_by_frequency", n=int(n))


def category(cat, exclude=False, n=None):
    """Features of one annotation category, or (``exclude=True``) the top-``n`` alive features outside it."""
    if cat not in CATEGORIES:
        raise ValueError(f"unknown category {cat!r}")
    return Selector("category", category=cat, exclude=exclude, n=n)


def random_alive(n=16, seed=0):
    return Selector("random_alive", n=int(n), seed=int(seed))


def all_alive():
    return Selector("all_alive")


def raw_embedding():
    return Selector("raw_embedding")


def covariates_only():
    return Selector("covariates_only")


def _by_frequency(model, H):
    st = activation_stats(model, H)
    alive = np.flatnonzero(model.alive_mask & (st.frequency > 0))
    # descending frequency, ties to the smaller index
    return alive[np.lexsort((alive, -st.frequency[alive]))]


def _select_features(selector, model, H, annotations):
    ranked = _by_frequency(model, H)
    if selector.kind == "top_n_by_frequency":
        return ranked[: selector.n]
    if selector.kind == "all_alive":
        return np.sort(ranked)
    if selector.kind == "category":
        in_cat = set(annotations.features_in(selector.category).tolist())
        if selector.exclude:
            keep = [f for f in ranked if f not in in_cat]
            return np.array(keep[: selector.n] if selector.n else sorted(keep), dtype=np.int64)
        return np.array(sorted(in_cat), dtype=np.int64)
    raise ValueError(f"selector {selector.kind!r} does not pick SAE features")


# ---------------------------------------------------------------------------
# Selective prediction
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PredictionReport:
    model: str
    d: int
    fold_auc: np.ndarray
    fold_sens: np.ndarray
    fold_spec: np.ndarray
    pooled_auc: float
    n: int
    n_pos: int
    features: tuple = ()
    oof_scores: np.ndarray | None = None
    oof_labels: np.ndarray | None = None
    draws: list = field(default_factory=list)  # per-draw fold-mean AUCs for random controls

    @property
    def auc_mean(self):
        return float(np.mean(self.draws)) if self.draws else float(np.mean(self.fold_auc))

    @property
    def auc_std(self):
        return float(np.std(self.draws)) if self.draws else float(np.std(self.fold_auc))

    @property
    def sens_mean(self):
        return float(np.mean(self.fold_sens))

    @property
    def spec_mean(self):
        return float(np.mean(self.fold_spec))

    def to_dict(self):
        return {
            "model": self.model,
            "d": self.d,
            "n": self.n,
            "n_pos": self.n_pos,
            "auc_mean": self.auc_mean,
            "auc_std": self.auc_std,
            "pooled_auc": self.pooled_auc,
            "sens_mean": self.sens_mean,
            "sens_std": float(np.std(self.fold_sens)),
            "spec_mean": self.spec_mean,
            "spec_std": float(np.std(self.fold_spec)),
            "fold_auc": [float(x) for x in self.fold_auc],
            "features": [int(f) for f in self.features],
            **({"draw_auc": [float(x) for x in self.draws]} if self.draws else {}),
        }

    def export_roc_csv(self, path):
        fpr, tpr = roc_points(self.oof_scores, self.oof_labels)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr"])
            for a, b in zip(fpr, tpr):
                w.writerow(["%.17g" % a, "%.17g" % b])


def _evaluation_rows(H, covariates):
    """Latest scan per subject among rows carrying a converter label."""
    if covariates.converter is None:
        raise ValueError("covariates have no converter labels")
    emb = H if isinstance(H, EmbeddingMatrix) else EmbeddingMatrix(np.asarray(H, dtype=np.float64), covariates.sample_id)
    if len(set(covariates.subject_id)) < covariates.n:
        cov, emb = latest_scan_per_subject(covariates, emb)
    else:
        cov = covariates
    rows = np.flatnonzero(~np.isnan(cov.converter))
    if rows.size == 0:
        raise ValueError("no rows carry a converter label")
    return emb.take(rows), cov.take(rows)


def _cv(X, y, subjects, plan):
    n_folds = plan.n_folds
    splits = plan.splits(subjects)
    fa, fs, fp = np.zeros(n_folds), np.zeros(n_folds), np.zeros(n_folds)
    oof = np.full(len(y), np.nan)
    for k, (tr, te) in enumerate(splits):
        Xtr, Xte = standardize_fold(X[tr], X[te])
        fit = logistic_fit(Xtr, y[tr])
        prob = fit.predict_proba(Xte)
        oof[te] = prob
        fa[k] = auc(prob, y[te])
        fs[k], fp[k] = sens_spec(prob, y[te])
    return fa, fs, fp, oof


def selective_prediction(model, H, covariates, feature_selector, annotations=None, n_folds=5, seed=0, plan=None):
    """Cross-validated conversion prediction from a selected feature set.

    ``H`` and ``covariates`` are row-aligned and may contain several scans per
    subject and non-MCI rows; frequency ranking and annotation (if needed) use
    all rows, prediction uses the latest labelled scan of each subject.
    """
    sel = feature_selector
    if sel.needs_annotations and annotations is None:
        annotations = annotate_all(model, H, covariates)
    emb, cov = _evaluation_rows(H, covariates)
    y = cov.converter.astype(np.float64)
    if plan is None:
        plan = stratified_subject_kfold(cov, "converter", n_folds, seed)

    def run(X, feats, name):
        if X.shape[1] == 0:
            raise ValueError(f"selector {name!r} yields zero features")
        fa, fs, fp, oof = _cv(X, y, cov.subject_id, plan)
        return PredictionReport(
            model=name, d=X.shape[1], fold_auc=fa, fold_sens=fs, fold_spec=fp,
            pooled_auc=auc(oof, y), n=len(y), n_pos=int(y.sum()), features=tuple(int(f) for f in feats),
            oof_scores=oof, oof_labels=y.astype(np.int64),
        )

    if sel.kind == "raw_embedding":
        return run(emb.values, (), sel.name)
    if sel.kind == "covariates_only":
        X = np.column_stack([cov.age, cov.sex, cov.apoe4]).astype(np.float64)
        return run(X, (), sel.name)

    Z = encode(model.params, emb.values, model.config.activation, model.config.k)
    if sel.kind == "random_alive":
        pool = np.sort(_by_frequency(model, H))
        if pool.size < sel.n:
            raise ValueError(f"only {pool.size} alive features for a random draw of {sel.n}")
        reports = []
        for draw in range(N_RANDOM_DRAWS):
            rng = np.random.default_rng(derive_seed(sel.seed, f"random_alive:{draw}"))
            feats = np.sort(rng.choice(pool, size=sel.n, replace=False))
            reports.append(run(Z[:, feats], feats, sel.name))
        first = reports[0]
        first.draws = [r.auc_mean for r in reports]
        first.fold_sens = np.array([r.sens_mean for r in reports])
        first.fold_spec = np.array([r.spec_mean for r in reports])
        return first
    feats = _select_features(sel, model, H, annotations)
    return run(Z[:, feats], feats, sel.name)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationGrid:
    lams: tuple = (0.0, 0.1, 1.0, 10.0)
    expansions: tuple = ()
    ks: tuple = ()
    categories: tuple = ("AD-related", "comorbidity")
    random_control: bool = True
    top_n: int = 16


@dataclass(eq=False)
class AblationRow:
    variant: str
    alive: int | None
    d: int | None
    auc_mean: float
    auc_std: float
    sens: float
    spec: float
    error: str = ""

    def as_list(self):
        f = lambda x: "" if x is None or (isinstance(x, float) and np.isnan(x)) else (  # noqa: E731
            "%.6f" % x if isinstance(x, float) else str(x))
        return [self.variant, f(self.alive), f(self.d), f(self.auc_mean), f(self.auc_std),
                f(self.sens), f(self.spec), self.error]


ABLATION_HEADER = ["variant", "alive", "d", "auc", "auc_std", "sens", "spec", "error"]


def write_ablation_csv(rows, path, provenance=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write("# " + json.dumps({"provenance": provenance}, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow(r.as_list())


def ablation_suite(H, covariates, base_config, grid=AblationGrid(), graph=None, seed=0, n_folds=5, log=None):
    """Train one model per grid cell and evaluate its top-n features.

    Returns ``(rows, models)`` where ``models`` maps variant name to the trained
    model. Failures in a cell are recorded in its row and the suite continues.
    The base model (``base_config``) additionally yields category-subset and
    random-control rows.
    """
    X = H.values if isinstance(H, EmbeddingMatrix) else np.asarray(H, dtype=np.float64)
    subjects = covariates.subject_id
    if graph is None and (base_config.lam > 0 or any(l > 0 for l in grid.lams)):
        tr, _ = split_subjects(subjects, base_config.split_fraction, base_config.seed)
        graph = build_knn_graph(X[tr], min(base_config.k_nn, len(tr) - 1))
    cov_eval = _evaluation_rows(H, covariates)[1]
    plan = stratified_subject_kfold(cov_eval, "converter", n_folds, seed)
    rows, models = [], {}

    def cell(name, fn):
        try:
            row = fn()
        except Exception as exc:  # suite continues past a failed cell
            row = AblationRow(name, None, None, float("nan"), float("nan"), float("nan"), float("nan"),
                              f"{type(exc).__name__}: {exc}")
        row.variant = name
        rows.append(row)
        if log is not None:
            log(row)

    def trained(cfg, name):
        def fn():
            m = train(X, cfg, graph=graph if cfg.lam > 0 else None, subjects=subjects)
            models[name] = m
            rep = selective_prediction(m, X, covariates, top_n_by_frequency(grid.top_n), plan=plan)
            return AblationRow(name, m.n_alive, rep.d, rep.auc_mean, rep.auc_std, rep.sens_mean, rep.spec_mean)
        return fn

    cells = [(f"full (lam={base_config.lam:g}, E={base_config.expansion}, k={base_config.k})", base_config)]
    for lam in grid.lams:
        if lam != base_config.lam:
            cells.append((f"lam={lam:g}", replace(base_config, lam=float(lam))))
    for e in grid.expansions:
        if e != base_config.expansion:
            cells.append((f"E={e}", replace(base_config, expansion=int(e))))
    for k in grid.ks:
        if k != base_config.k:
            cells.append((f"k={k}", replace(base_config, k=int(k))))
    for name, cfg in cells:
        cell(name, trained(cfg, name))

    base = models.get(cells[0][0])
    if base is not None:
        ann = None
        try:
            ann = annotate_all(base, X, covariates)
        except Exception as exc:
            warnings.warn(f"annotation of the base model failed: {exc}", UserWarning, stacklevel=2)

        def evaluated(sel):
            def fn():
                rep = selective_prediction(base, X, covariates, sel, annotations=ann, plan=plan)
                return AblationRow(sel.name, base.n_alive, rep.d, rep.auc_mean, rep.auc_std, rep.sens_mean, rep.spec_mean)
            return fn

        for cat in grid.categories:
            cell(f"only {cat}", evaluated(category(cat)))
            cell(f"w/o {cat}", evaluated(category(cat, exclude=True, n=grid.top_n)))
        if grid.random_control:
            cell(f"random-{grid.top_n}", evaluated(random_alive(grid.top_n, derive_seed(seed, "controls"))))
    return rows, models


# ---------------------------------------------------------------------------
# Cross-cohort replication
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ReplicationReport:
    annotation_agreement: float
    per_variable_agreement: dict
    activation_consistency: float
    diagnosis_pattern_r: dict
    replication_rate: float
    n_features: int
    shared_variables: tuple
    dropped_variables: tuple
    selected: tuple

    def metrics(self):
        """Every headline number (annotation, activation, per-diagnosis, replication rate)."""
        out = {"annotation_agreement": self.annotation_agreement,
               "activation_consistency": self.activation_consistency,
               "replication_rate": self.replication_rate}
        out.update({f"agreement_{k}": v for k, v in self.per_variable_agreement.items()})
        out.update({f"pattern_{k}": v for k, v in self.diagnosis_pattern_r.items()})
        return out

    def to_dict(self):
        return {
            "annotation_agreement": self.annotation_agreement,
            "per_variable_agreement": self.per_variable_agreement,
            "activation_consistency": self.activation_consistency,
            "diagnosis_pattern_r": self.diagnosis_pattern_r,
            "replication_rate": self.replication_rate,
            "n_features": self.n_features,
            "shared_variables": list(self.shared_variables),
            "dropped_variables": list(self.dropped_variables),
            "selected": list(self.selected),
        }


def _paired(a, b):
    ok = ~(np.isnan(a) | np.isnan(b))
    return a[ok], b[ok]


def cross_cohort_replicate(model, cohortA, cohortB, n_selected=16, alpha=0.05):
    """Annotate two cohorts with one frozen model and compare.

    Metrics use features alive in both cohorts and the annotation variables
    present in both. The replication rate is the fraction of cohort A's
    top-``n_selected`` features (by activation frequency) that are alive in B
    with the same category.
    """
    (HA, covA), (HB, covB) = cohortA, cohortB
    XA = HA.values if isinstance(HA, EmbeddingMatrix) else np.asarray(HA, dtype=np.float64)
    XB = HB.values if isinstance(HB, EmbeddingMatrix) else np.asarray(HB, dtype=np.float64)
    if XA.shape[1] != model.params.d or XB.shape[1] != model.params.d:
        raise ValueError(f"cohort dimensionality ({XA.shape[1]}, {XB.shape[1]}) does not match the model ({model.params.d})")
    act, k = model.config.activation, model.config.k
    ZA = encode(model.params, XA, act, k)
    ZB = encode(model.params, XB, act, k)
    aliveA = (ZA > 0).any(axis=0) & model.alive_mask
    aliveB = (ZB > 0).any(axis=0)
    joint = np.flatnonzero(aliveA & aliveB)

    namesA = [v for v, _ in covA.primary_variables()]
    namesB = {v for v, _ in covB.primary_variables()}
    shared = tuple(v for v in namesA if v in namesB)
    dropped = tuple(sorted(set(namesA) ^ namesB))
    drop = lambda cov: cov.drop_columns([v for v in dropped if v.startswith("cm_")])  # noqa: E731
    annA = annotate_all(model, XA, drop(covA), alpha=alpha, features=joint)
    annB = annotate_all(model, XB, drop(covB), alpha=alpha, features=joint)

    per_var = {}
    for v in shared:
        per_var[v] = pearson(*_paired(annA.rho[:, annA.variables.index(v)], annB.rho[:, annB.variables.index(v)]))
    ia = [annA.variables.index(v) for v in shared]
    ib = [annB.variables.index(v) for v in shared]
    overall = pearson(*_paired(annA.rho[:, ia].ravel(), annB.rho[:, ib].ravel())) if joint.size else float("nan")

    def mean_mag(Z):
        act_ = Z[:, joint]
        cnt = (act_ > 0).sum(axis=0)
        return act_.sum(axis=0) / np.maximum(cnt, 1)

    mA, mB = mean_mag(ZA), mean_mag(ZB)
    consistency = pearson(stats.rankdata(mA), stats.rankdata(mB)) if joint.size > 1 else float("nan")

    patterns = {}
    for level, label in enumerate(("CN", "MCI", "AD")):
        ra, rb = covA.diagnosis == level, covB.diagnosis == level
        if ra.any() and rb.any() and joint.size > 1:
            patterns[label] = pearson(ZA[ra][:, joint].mean(axis=0), ZB[rb][:, joint].mean(axis=0))

    stA = activation_stats(model, XA)
    alive_rank = np.flatnonzero(aliveA)
    ranked = alive_rank[np.lexsort((alive_rank, -stA.frequency[alive_rank]))]
    selected = ranked[:n_selected]
    catA = dict(zip(annA.features.tolist(), annA.category))
    catB = dict(zip(annB.features.tolist(), annB.category))
    hits = sum(1 for f in selected if f in catB and catA.get(int(f)) == catB[int(f)])
    rate = hits / len(selected) if len(selected) else float("nan")
    return ReplicationReport(
        annotation_agreement=overall, per_variable_agreement=per_var, activation_consistency=consistency,
        diagnosis_pattern_r=patterns, replication_rate=rate, n_features=int(joint.size),
        shared_variables=shared, dropped_variables=dropped, selected=tuple(int(f) for f in selected),
    )
