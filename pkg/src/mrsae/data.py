"""Embedding and covariate ingestion, plus ground-truth synthetic cohorts.

Two on-disk embedding formats are supported:

* ``csv``: header ``sample_id,e0,...,e{d-1}``, values written with 17
  significant digits. An optional first line starting with ``#`` carries a
  JSON metadata block (layer index, provenance) and is skipped by readers.
* ``raw-f32``: row-major little-endian float32 payload ``<stem>.f32`` with a
  JSON sidecar ``<stem>.json`` holding ``{"n", "d", "layer", "ids_path"}``.
"""

import csv
import graphlib
import json
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "DataFormatError",
    "EmbeddingMatrix",
    "CovariateTable",
    "SyntheticSpec",
    "GroundTruth",
    "load_embeddings",
    "write_embeddings",
    "load_covariates",
    "write_covariates",
    "align_covariates",
    "latest_scan_per_subject",
    "generate_synthetic_cohort",
    "resample_cohort",
    "write_ground_truth",
    "load_ground_truth",
    "CyclicConfoundError",
    "DIAGNOSIS_LEVELS",
]

DIAGNOSIS_LEVELS = ("CN", "MCI", "AD")
REQUIRED_COLUMNS = ("sample_id", "subject_id", "age", "sex", "apoe4", "diagnosis")
_META_COLUMNS = ("converter", "visit", "scan_date", "site")


class DataFormatError(ValueError):
    """Malformed or invariant-violating input file or table."""


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """N x d matrix of frozen per-sample representations with row identifiers."""

    values: np.ndarray
    sample_ids: tuple
    layer_index: int | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2:
            raise DataFormatError(f"embedding values must be 2-D, got shape {values.shape}")
        n, d = values.shape
        if n < 2 or d < 1:
            raise DataFormatError(f"need N >= 2 and d >= 1, got N={n}, d={d}")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            i, j = bad[0]
            raise DataFormatError(f"non-finite entry at row {i}, column {j}")
        ids = tuple(str(s) for s in self.sample_ids)
        if len(ids) != n:
            raise DataFormatError(f"{len(ids)} sample ids for {n} rows")
        _check_unique(ids)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return EmbeddingMatrix(self.values[rows], [self.sample_ids[i] for i in rows], self.layer_index)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.sample_ids == other.sample_ids
            and self.layer_index == other.layer_index
            and np.array_equal(self.values, other.values)
        )


def _check_unique(ids):
    seen = {}
    for row, s in enumerate(ids):
        if s in seen:
            raise DataFormatError(f"duplicate sample_id {s!r} at rows {seen[s]} and {row}")
        seen[s] = row


def _infer_format(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".csv":
        return "csv"
    if ext in (".f32", ".json"):
        return "raw-f32"
    raise DataFormatError(f"cannot infer embedding format from {path!r}; pass format=")


def _read_meta_line(handle):
    """Consume an optional leading ``# {json}`` line; return (meta, first_data_line)."""
    first = handle.readline()
    if first.startswith("#"):
        text = first[1:].strip()
        try:
            meta = json.loads(text) if text else {}
        except json.JSONDecodeError:
            meta = {}
        return meta, None
    return {}, first


def load_embeddings(path, format=None):
    """Load an :class:`EmbeddingMatrix` from ``path``.

    Parameters
    ----------
    path : str or path-like
        CSV file, or the ``.f32`` payload (or its ``.json`` header) for raw-f32.
    format : {"csv", "raw-f32"}, optional
        Inferred from the extension when omitted.
    """
    format = format or _infer_format(path)
    if format == "csv":
        return _load_embeddings_csv(path)
    if format == "raw-f32":
        return _load_embeddings_f32(path)
    raise DataFormatError(f"unknown embedding format {format!r}")


def _load_embeddings_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        meta, pending = _read_meta_line(fh)
        lines = ([pending] if pending is not None else []) + fh.readlines()
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError(f"{path}: empty file") from None
    if not header or header[0].strip() != "sample_id" or len(header) < 2:
        raise DataFormatError(f"{path}: malformed header, expected 'sample_id,e0,...', got {header!r}")
    d = len(header) - 1
    ids, rows = [], []
    for lineno, rec in enumerate(reader, start=1):
        if not rec:
            continue
        if len(rec) != d + 1:
            raise DataFormatError(f"{path}: row {lineno} has {len(rec)} fields, expected {d + 1}")
        vals = []
        for j, cell in enumerate(rec[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise DataFormatError(
                    f"{path}: unparseable value {cell!r} at row {lineno}, column {header[j + 1]!r}"
                ) from None
            if not np.isfinite(v):
                raise DataFormatError(
                    f"{path}: non-finite value {cell!r} at row {lineno}, column {header[j + 1]!r}"
                )
            vals.append(v)
        ids.append(rec[0])
        rows.append(vals)
    seen = {}
    for row, s in enumerate(ids, start=1):
        if s in seen:
            raise DataFormatError(f"{path}: duplicate sample_id {s!r} at rows {seen[s]} and {row}")
        seen[s] = row
    values = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    layer = meta.get("layer")
    return EmbeddingMatrix(values, ids, None if layer is None else int(layer))


def _f32_paths(path):
    stem, ext = os.path.splitext(str(path))
    return stem + ".f32", stem + ".json"


def _load_embeddings_f32(path):
    payload_path, header_path = _f32_paths(path)
    with open(header_path, encoding="utf-8") as fh:
        header = json.load(fh)
    for key in ("n", "d", "ids_path"):
        if key not in header:
            raise DataFormatError(f"{header_path}: header missing {key!r}")
    n, d = int(header["n"]), int(header["d"])
    raw = np.fromfile(payload_path, dtype="<f4")
    if raw.size != n * d:
        raise DataFormatError(
            f"{payload_path}: size mismatch, header declares n={n}, d={d} "
            f"({n * d} floats) but payload holds {raw.size}"
        )
    values = raw.reshape(n, d).astype(np.float64)
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        i, j = bad[0]
        raise DataFormatError(f"{payload_path}: non-finite entry at row {i}, column {j}")
    ids_path = os.path.join(os.path.dirname(header_path), header["ids_path"])
    with open(ids_path, encoding="utf-8") as fh:
        ids = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    if len(ids) != n:
        raise DataFormatError(f"{ids_path}: {len(ids)} ids for n={n}")
    layer = header.get("layer")
    return EmbeddingMatrix(values, ids, None if layer is None else int(layer))


def write_embeddings(emb, path, format=None, provenance=None):
    """Write ``emb`` to ``path``; inverse of :func:`load_embeddings`."""
    format = format or _infer_format(path)
    meta = {"layer": emb.layer_index}
    if provenance is not None:
        meta["provenance"] = provenance
    if format == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id"] + [f"e{j}" for j in range(emb.d)])
            for sid, row in zip(emb.sample_ids, emb.values):
                w.writerow([sid] + ["%.17g" % v for v in row])
    elif format == "raw-f32":
        payload_path, header_path = _f32_paths(path)
        ids_path = os.path.splitext(header_path)[0] + ".ids.txt"
        emb.values.astype("<f4").tofile(payload_path)
        with open(ids_path, "w", encoding="utf-8") as fh:
            fh.writelines(s + "\n" for s in emb.sample_ids)
        header = {"n": emb.n, "d": emb.d, "layer": emb.layer_index, "ids_path": os.path.basename(ids_path)}
        if provenance is not None:
            header["provenance"] = provenance
        with open(header_path, "w", encoding="utf-8") as fh:
            json.dump(header, fh, sort_keys=True, indent=1)
    else:
        raise DataFormatError(f"unknown embedding format {format!r}")


# ---------------------------------------------------------------------------
# Covariates
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CovariateTable:
    """Per-sample clinical covariates.

    ``converter`` is a float array (NaN where undefined) or ``None`` when the
    column is absent. ``visit`` holds the visit order (scan dates are stored as
    proleptic ordinals). ``secondary`` maps extra column names to float arrays
    with NaN for missing cells.
    """

    sample_id: tuple
    subject_id: tuple
    age: np.ndarray
    sex: np.ndarray
    apoe4: np.ndarray
    diagnosis: np.ndarray
    comorbidities: np.ndarray
    comorbidity_names: tuple = ()
    converter: np.ndarray | None = None
    visit: np.ndarray | None = None
    site: tuple | None = None
    secondary: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_id = tuple(str(s) for s in self.sample_id)
        self.subject_id = tuple(str(s) for s in self.subject_id)
        n = len(self.sample_id)
        self.age = np.asarray(self.age, dtype=np.float64)
        self.sex = np.asarray(self.sex, dtype=np.int64)
        self.apoe4 = np.asarray(self.apoe4, dtype=np.int64)
        self.diagnosis = np.asarray(self.diagnosis, dtype=np.int64)
        self.comorbidities = np.asarray(self.comorbidities, dtype=np.int64).reshape(n, -1)
        self.comorbidity_names = tuple(self.comorbidity_names)
        if self.converter is not None:
            self.converter = np.asarray(self.converter, dtype=np.float64)
        if self.visit is not None:
            self.visit = np.asarray(self.visit, dtype=np.float64)
        if self.site is not None:
            self.site = tuple(str(s) for s in self.site)
        self.secondary = {k: np.asarray(v, dtype=np.float64) for k, v in self.secondary.items()}
        self.validate()

    def validate(self):
        n = len(self.sample_id)
        _check_unique(self.sample_id)
        for name in ("subject_id", "age", "sex", "apoe4", "diagnosis"):
            if len(getattr(self, name)) != n:
                raise DataFormatError(f"column {name!r} has wrong length")
        if self.comorbidities.shape[1] != len(self.comorbidity_names):
            raise DataFormatError("comorbidity names do not match comorbidity columns")
        if np.any(~(self.age > 0)):
            raise DataFormatError(f"age must be > 0 (row {int(np.argmax(~(self.age > 0)))})")
        if np.any((self.sex != 0) & (self.sex != 1)):
            raise DataFormatError("sex must be 0/1")
        if np.any((self.apoe4 < 0) | (self.apoe4 > 2)):
            raise DataFormatError("apoe4 must be in {0,1,2}")
        if np.any((self.diagnosis < 0) | (self.diagnosis > 2)):
            raise DataFormatError("diagnosis must be in {0,1,2}")
        if self.comorbidities.size and np.any((self.comorbidities != 0) & (self.comorbidities != 1)):
            raise DataFormatError("comorbidity values must be 0/1")
        if self.converter is not None:
            defined = ~np.isnan(self.converter)
            bad = defined & (self.diagnosis != 1)
            if bad.any():
                i = int(np.argmax(bad))
                raise DataFormatError(
                    f"converter label on non-MCI row {i} (sample_id={self.sample_id[i]!r})"
                )
            vals = self.converter[defined]
            if np.any((vals != 0) & (vals != 1)):
                raise DataFormatError("converter must be 0/1")

    @property
    def n(self):
        return len(self.sample_id)

    @property
    def subjects(self):
        return tuple(dict.fromkeys(self.subject_id))

    def primary_variables(self):
        """Non-age annotation variables in fixed order: diagnosis, sex, APOE4, comorbidities."""
        out = [("diagnosis", self.diagnosis.astype(np.float64)),
               ("sex", self.sex.astype(np.float64)),
               ("apoe4", self.apoe4.astype(np.float64))]
        for j, name in enumerate(self.comorbidity_names):
            out.append((f"cm_{name}", self.comorbidities[:, j].astype(np.float64)))
        return out

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        pick = lambda seq: None if seq is None else tuple(seq[i] for i in rows)  # noqa: E731
        return CovariateTable(
            sample_id=pick(self.sample_id),
            subject_id=pick(self.subject_id),
            age=self.age[rows],
            sex=self.sex[rows],
            apoe4=self.apoe4[rows],
            diagnosis=self.diagnosis[rows],
            comorbidities=self.comorbidities[rows],
            comorbidity_names=self.comorbidity_names,
            converter=None if self.converter is None else self.converter[rows],
            visit=None if self.visit is None else self.visit[rows],
            site=pick(self.site),
            secondary={k: v[rows] for k, v in self.secondary.items()},
        )

    def drop_columns(self, names):
        """Copy without the named comorbidity (``cm_x``) or secondary columns."""
        names = set(names)
        keep = [j for j, c in enumerate(self.comorbidity_names) if f"cm_{c}" not in names]
        return CovariateTable(
            sample_id=self.sample_id,
            subject_id=self.subject_id,
            age=self.age,
            sex=self.sex,
            apoe4=self.apoe4,
            diagnosis=self.diagnosis,
            comorbidities=self.comorbidities[:, keep],
            comorbidity_names=[self.comorbidity_names[j] for j in keep],
            converter=self.converter,
            visit=self.visit,
            site=self.site,
            secondary={k: v for k, v in self.secondary.items() if k not in names},
        )


def _parse_number(cell, path, row, col, integer=False, allow_empty=False):
    cell = cell.strip()
    if cell == "" or cell.lower() in ("na", "nan"):
        if allow_empty:
            return float("nan")
        raise DataFormatError(f"{path}: missing value at row {row}, column {col!r}")
    try:
        v = float(cell)
    except ValueError:
        raise DataFormatError(f"{path}: unparseable value {cell!r} at row {row}, column {col!r}") from None
    if integer and v != int(v):
        raise DataFormatError(f"{path}: expected integer at row {row}, column {col!r}, got {cell!r}")
    return v


def _parse_date(cell, path, row):
    import datetime

    try:
        return float(datetime.date.fromisoformat(cell.strip()).toordinal())
    except ValueError:
        raise DataFormatError(f"{path}: bad scan_date {cell!r} at row {row}") from None


def load_covariates(path):
    """Read a covariate CSV.

    Required columns are ``sample_id, subject_id, age, sex, apoe4, diagnosis``.
    ``cm_*`` columns are comorbidity indicators; ``converter``, ``visit``,
    ``scan_date`` and ``site`` are recognised metadata; every other column is a
    numeric secondary variable.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        _, pending = _read_meta_line(fh)
        lines = ([pending] if pending is not None else []) + fh.readlines()
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataFormatError(f"{path}: empty file") from None
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise DataFormatError(f"{path}: missing required column(s) {missing}")
    if len(set(header)) != len(header):
        raise DataFormatError(f"{path}: duplicate column names in header")
    col = {name: i for i, name in enumerate(header)}
    cm_cols = [h for h in header if h.startswith("cm_")]
    sec_cols = [h for h in header if h not in REQUIRED_COLUMNS and h not in _META_COLUMNS and not h.startswith("cm_")]

    recs = [r for r in reader if r]
    for i, r in enumerate(recs, start=1):
        if len(r) != len(header):
            raise DataFormatError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")

    def num(name, integer=False, allow_empty=False):
        return np.array(
            [_parse_number(r[col[name]], path, i, name, integer, allow_empty) for i, r in enumerate(recs, start=1)],
            dtype=np.float64,
        )

    converter = num("converter", integer=False, allow_empty=True) if "converter" in col else None
    if "visit" in col:
        visit = num("visit")
    elif "scan_date" in col:
        visit = np.array([_parse_date(r[col["scan_date"]], path, i) for i, r in enumerate(recs, start=1)])
    else:
        visit = None
    table = CovariateTable(
        sample_id=[r[col["sample_id"]].strip() for r in recs],
        subject_id=[r[col["subject_id"]].strip() for r in recs],
        age=num("age"),
        sex=num("sex", integer=True),
        apoe4=num("apoe4", integer=True),
        diagnosis=num("diagnosis", integer=True),
        comorbidities=np.column_stack([num(c, integer=True) for c in cm_cols]) if cm_cols else np.zeros((len(recs), 0)),
        comorbidity_names=[c[3:] for c in cm_cols],
        converter=converter,
        visit=visit,
        site=[r[col["site"]].strip() for r in recs] if "site" in col else None,
        secondary={c: num(c, allow_empty=True) for c in sec_cols},
    )
    _check_subject_consistency(table)
    return table


def _check_subject_consistency(table):
    # every sample_id maps to exactly one subject_id by construction (one row per
    # sample); reject subjects whose fixed covariates disagree across scans
    first = {}
    for i, s in enumerate(table.subject_id):
        if s not in first:
            first[s] = i
            continue
        j = first[s]
        if table.sex[i] != table.sex[j] or table.apoe4[i] != table.apoe4[j]:
            raise DataFormatError(f"subject {s!r} has inconsistent sex/apoe4 across rows {j} and {i}")


def _fmt(v):
    if isinstance(v, float) and np.isnan(v):
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return str(int(v)) if v.is_integer() and abs(v) < 1e15 else "%.17g" % v
    return str(v)


def write_covariates(table, path, provenance=None):
    header = list(REQUIRED_COLUMNS) + [f"cm_{c}" for c in table.comorbidity_names]
    if table.converter is not None:
        header.append("converter")
    if table.visit is not None:
        header.append("visit")
    if table.site is not None:
        header.append("site")
    header += list(table.secondary)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write("# " + json.dumps({"provenance": provenance}, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(table.n):
            row = [table.sample_id[i], table.subject_id[i], _fmt(float(table.age[i])),
                   int(table.sex[i]), int(table.apoe4[i]), int(table.diagnosis[i])]
            row += [int(v) for v in table.comorbidities[i]]
            if table.converter is not None:
                row.append(_fmt(float(table.converter[i])))
            if table.visit is not None:
                row.append(_fmt(float(table.visit[i])))
            if table.site is not None:
                row.append(table.site[i])
            row += [_fmt(float(v[i])) for v in table.secondary.values()]
            w.writerow(row)


def align_covariates(table, emb):
    """Reorder ``table`` rows to match ``emb.sample_ids``; every embedding row must be covered."""
    index = {s: i for i, s in enumerate(table.sample_id)}
    missing = [s for s in emb.sample_ids if s not in index]
    if missing:
        raise DataFormatError(f"{len(missing)} embedding rows lack covariates, e.g. {missing[0]!r}")
    return table.take([index[s] for s in emb.sample_ids])


def latest_scan_per_subject(table, embeddings):
    """Keep one row per subject: the one with the largest visit order.

    Ties in visit order are resolved in favour of the lexicographically larger
    ``sample_id`` and reported with a :class:`UserWarning`. Retained rows keep
    their original relative order. ``embeddings`` is filtered to the same
    sample ids (it need not share the table's row order).
    """
    if table.visit is None:
        raise DataFormatError("latest_scan_per_subject needs a 'visit' or 'scan_date' column")
    best = {}
    for i, subj in enumerate(table.subject_id):
        if subj not in best:
            best[subj] = i
            continue
        j = best[subj]
        if table.visit[i] > table.visit[j]:
            best[subj] = i
        elif table.visit[i] == table.visit[j]:
            winner = i if table.sample_id[i] > table.sample_id[j] else j
            warnings.warn(
                f"subject {subj!r}: scans {table.sample_id[j]!r} and {table.sample_id[i]!r} share "
                f"visit {table.visit[i]:g}; keeping {table.sample_id[winner]!r}",
                UserWarning,
                stacklevel=2,
            )
            best[subj] = winner
    rows = sorted(best.values())
    kept = table.take(rows)
    index = {s: i for i, s in enumerate(embeddings.sample_ids)}
    missing = [s for s in kept.sample_id if s not in index]
    if missing:
        raise DataFormatError(f"no embedding row for sample_id {missing[0]!r}")
    return kept, embeddings.take([index[s] for s in kept.sample_id])


# ---------------------------------------------------------------------------
# Synthetic cohorts
# ---------------------------------------------------------------------------

DEFAULT_COMORBIDITIES = ("htn", "hld", "dep", "dm2", "cvd")

DEFAULT_PREVALENCE = {
    "sex": 0.469,  # female fraction
    "cm_htn": 0.50,
    "cm_hld": 0.45,
    "cm_dep": 0.20,
    "cm_dm2": 0.12,
    "cm_cvd": 0.15,
}

DEFAULT_CONFOUNDS = (
    ("age", "diagnosis", 0.6),
    ("disease", "diagnosis", 0.6),
    ("apoe4", "disease", 0.3),
    ("age", "cm_htn", 0.4),
    ("age", "cm_cvd", 0.3),
    ("age", "cm_dm2", 0.2),
    ("disease", "converter", 0.85),
)

DEFAULT_FACTORS = ("age", "disease", "sex", "apoe4", "cm_htn", "cm_dm2", "nuisance", "nuisance")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a cohort with planted latent factors.

    ``factors`` names what each planted factor encodes: a covariate node
    (``age``, ``disease``, ``sex``, ``apoe4``, ``cm_*`` or a secondary name) or
    ``"nuisance"`` for a covariate-free factor. ``confound_graph`` edges are
    standardised path coefficients between node latents; every node latent is
    ``sum(strength * parent) + sqrt(1 - sum(strength**2)) * noise``.
    Continuous factors are clipped at zero when ``rectify`` is set.
    """

    n_subjects: int = 1000
    scans_per_subject: tuple = (1, 1)
    d: int = 64
    factors: tuple = DEFAULT_FACTORS
    factor_loadings: tuple | None = None
    confound_graph: tuple = DEFAULT_CONFOUNDS
    noise_sigma: float = 0.05
    seed: int = 0
    comorbidities: tuple = DEFAULT_COMORBIDITIES
    secondary: tuple = ()
    prevalence: tuple = tuple(sorted(DEFAULT_PREVALENCE.items()))
    diagnosis_fractions: tuple = (0.346, 0.531, 0.124)
    converter_rate: float = 0.37
    apoe4_allele_freq: float = 0.3
    age_mean: float = 74.6
    age_sd: float = 7.4
    visit_years: float = 1.0
    factor_scale: float = 1.0
    factor_jitter: float = 0.05
    rectify: bool = True
    nuisance_activity: float = 0.5

    @property
    def n_factors(self):
        return len(self.factors)

    def validate(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 < self.nuisance_activity <= 1:
            raise ValueError("nuisance_activity must lie in (0, 1]")
        if self.n_subjects < 2:
            raise ValueError("n_subjects must be >= 2")
        lo, hi = self.scans_per_subject
        if not 1 <= lo <= hi:
            raise ValueError("scans_per_subject must satisfy 1 <= lo <= hi")
        if self.n_factors < 1 or self.n_factors > self.d:
            raise ValueError("need 1 <= n_factors <= d")
        if len(self.diagnosis_fractions) != 3 or min(self.diagnosis_fractions) <= 0:
            raise ValueError("diagnosis_fractions needs three positive entries")
        if self.factor_loadings is not None:
            L = np.asarray(self.factor_loadings, dtype=np.float64)
            if L.shape != (self.n_factors, self.d):
                raise ValueError(f"factor_loadings must be n_factors x d = {(self.n_factors, self.d)}")
            if np.linalg.matrix_rank(L) < self.n_factors:
                raise ValueError("factor loading vectors must be linearly independent")
        known = self._nodes()
        for f in self.factors:
            if f != "nuisance" and f not in known:
                raise ValueError(f"factor meaning {f!r} is not a cohort variable")
        for src, dst, _ in self.confound_graph:
            for node in (src, dst):
                if node not in known:
                    raise ValueError(f"confound graph references unknown variable {node!r}")

    def _nodes(self):
        return (["age", "sex", "apoe4", "disease", "diagnosis", "converter"]
                + [f"cm_{c}" for c in self.comorbidities] + list(self.secondary))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    factor_values: np.ndarray
    factor_meaning: dict
    true_dictionary: np.ndarray  # d x n_factors, unit-norm columns

    def factor_index(self, meaning):
        """Index of the first factor encoding ``meaning``."""
        for j, (_, m) in enumerate(self.factor_meaning.items()):
            if m == meaning:
                return j
        raise KeyError(meaning)


class CyclicConfoundError(ValueError):
    pass


def _topological_order(nodes, edges):
    ts = graphlib.TopologicalSorter({n: set() for n in nodes})
    for src, dst, _ in edges:
        ts.add(dst, src)
    ts.add("converter", "diagnosis")  # converter is only defined on MCI rows
    try:
        return list(ts.static_order())
    except graphlib.CycleError as exc:
        raise CyclicConfoundError(f"confound graph has a cycle: {exc.args[1]}") from None


def _threshold_by_fractions(score, fractions):
    """Cut ``score`` into ordinal levels with the given empirical fractions."""
    fractions = np.asarray(fractions, dtype=np.float64)
    cum = np.cumsum(fractions / fractions.sum())[:-1]
    cuts = np.quantile(score, cum)
    return np.searchsorted(cuts, score, side="right")


def generate_synthetic_cohort(spec):
    """Sample embeddings, covariates and planted ground truth from ``spec``.

    Covariates are drawn subject-wise in topological order of the confound
    graph. Each scan's embedding is ``true_dictionary @ factor_values + noise``
    where factor values are (optionally rectified) node latents.
    Deterministic given ``spec`` (seed included).

    Returns
    -------
    (EmbeddingMatrix, CovariateTable, GroundTruth)
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    nodes = spec._nodes()
    order = _topological_order(nodes, spec.confound_graph)
    parents = {n: [] for n in nodes}
    for src, dst, s in spec.confound_graph:
        parents[dst].append((src, float(s)))
    prevalence = dict(spec.prevalence)

    S = spec.n_subjects
    latent, observed = {}, {}
    noise = {n: rng.standard_normal(S) for n in nodes}  # drawn in fixed node order
    for node in order:
        ps = parents[node]
        total = sum(s * s for _, s in ps)
        z = sum(s * latent[p] for p, s in ps) + np.sqrt(max(0.0, 1.0 - total)) * noise[node]
        z = (z - z.mean()) / z.std() if z.std() > 0 else z
        latent[node] = z
        if node == "age":
            observed[node] = spec.age_mean + spec.age_sd * z
        elif node == "apoe4":
            p = spec.apoe4_allele_freq
            observed[node] = _threshold_by_fractions(z, [(1 - p) ** 2, 2 * p * (1 - p), p * p])
        elif node == "diagnosis":
            observed[node] = _threshold_by_fractions(z, spec.diagnosis_fractions)
        elif node == "converter":
            conv = np.full(S, np.nan)
            mci = observed["diagnosis"] == 1
            if mci.sum() >= 2:
                conv[mci] = _threshold_by_fractions(z[mci], [1 - spec.converter_rate, spec.converter_rate])
            observed[node] = conv
        elif node == "disease":
            observed[node] = z
        elif node in prevalence:
            observed[node] = _threshold_by_fractions(z, [1 - prevalence[node], prevalence[node]])
        else:
            observed[node] = z  # continuous secondary variable

    lo, hi = spec.scans_per_subject
    n_scans = rng.integers(lo, hi + 1, size=S)
    subj = np.repeat(np.arange(S), n_scans)
    visit = np.concatenate([np.arange(1, m + 1) for m in n_scans]).astype(np.float64)
    N = subj.size
    years = (visit - 1.0) * spec.visit_years
    age = observed["age"][subj] + years

    F = np.empty((N, spec.n_factors))
    for j, meaning in enumerate(spec.factors):
        if meaning == "nuisance":
            col = rng.standard_normal(N)
            on = rng.random(N) < spec.nuisance_activity
            if spec.rectify:
                # sparse half-normal: nonzero on a nuisance_activity fraction of scans
                col = np.where(on, np.abs(col), 0.0)
        elif meaning == "age":
            col = (age - spec.age_mean) / spec.age_sd
        elif meaning in prevalence or meaning in ("sex", "apoe4") or meaning.startswith("cm_"):
            col = observed[meaning][subj].astype(np.float64)
        else:
            col = latent[meaning][subj]
        if meaning not in prevalence and meaning not in ("sex", "apoe4") and spec.rectify:
            col = np.maximum(col, 0.0)
        F[:, j] = col
    F = F * spec.factor_scale
    if spec.factor_jitter > 0:
        F = F + spec.factor_jitter * rng.standard_normal(F.shape) * (F != 0)

    if spec.factor_loadings is None:
        Q, _ = np.linalg.qr(rng.standard_normal((spec.d, spec.n_factors)))
        D = Q
    else:
        D = np.asarray(spec.factor_loadings, dtype=np.float64).T
        D = D / np.linalg.norm(D, axis=0, keepdims=True)
    H = F @ D.T + spec.noise_sigma * rng.standard_normal((N, spec.d))

    sample_ids = [f"S{s:05d}_V{int(v)}" for s, v in zip(subj, visit)]
    subject_ids = [f"S{s:05d}" for s in subj]
    cm = np.column_stack([observed[f"cm_{c}"][subj] for c in spec.comorbidities]) if spec.comorbidities else np.zeros((N, 0))
    table = CovariateTable(
        sample_id=sample_ids,
        subject_id=subject_ids,
        age=age,
        sex=observed["sex"][subj],
        apoe4=observed["apoe4"][subj],
        diagnosis=observed["diagnosis"][subj],
        comorbidities=cm,
        comorbidity_names=spec.comorbidities,
        converter=observed["converter"][subj],
        visit=visit,
        secondary={name: observed[name][subj] for name in spec.secondary},
    )
    meaning = {f"f{j}": m for j, m in enumerate(spec.factors)}
    truth = GroundTruth(factor_values=F, factor_meaning=meaning, true_dictionary=D)
    return EmbeddingMatrix(H, sample_ids), table, truth


def resample_cohort(spec, truth, seed):
    """A fresh cohort (new subjects, new noise) sharing ``truth``'s planted dictionary."""
    loadings = tuple(tuple(float(x) for x in col) for col in truth.true_dictionary.T)
    return generate_synthetic_cohort(replace(spec, seed=seed, factor_loadings=loadings))


def write_ground_truth(truth, path, provenance=None):
    """JSON with factor meanings, the planted dictionary (d x n_factors) and per-scan factor values."""
    payload = {
        "factor_meaning": truth.factor_meaning,
        "true_dictionary": truth.true_dictionary.tolist(),
        "factor_values": truth.factor_values.tolist(),
    }
    if provenance is not None:
        payload["provenance"] = provenance
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_ground_truth(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    meaning = {k: raw["factor_meaning"][k] for k in sorted(raw["factor_meaning"], key=lambda s: int(s[1:]))}
    return GroundTruth(
        factor_values=np.array(raw["factor_values"], dtype=np.float64),
        factor_meaning=meaning,
        true_dictionary=np.array(raw["true_dictionary"], dtype=np.float64),
    )
