"""Geometric statistics of an embedding matrix: sign balance, radial class separation, effective dimension."""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import EmbeddingMatrix

__all__ = ["GeometryReport", "geometry_report", "negative_fraction", "radial_eta2", "effective_dim"]


@dataclass(frozen=True)
class GeometryReport:
    negative_fraction: float
    radial_eta2: float  # NaN when fewer than two classes are present
    effective_dim: float
    n: int
    d: int
    eta2_defined: bool = True

    def to_dict(self):
        out = asdict(self)
        if not self.eta2_defined:
            out["radial_eta2"] = None
        return out

    def to_json(self, path, provenance=None):
        payload = self.to_dict()
        if provenance is not None:
            payload["provenance"] = provenance
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)


def negative_fraction(X):
    X = np.asarray(X, dtype=np.float64)
    return float(np.count_nonzero(X < 0)) / X.size


def radial_eta2(X, classes):
    """Between-class share of the variance of row norms (one-way ANOVA eta squared).

    Returns NaN when fewer than two classes are present or all norms are equal.
    """
    norms = np.linalg.norm(np.asarray(X, dtype=np.float64), axis=1)
    classes = np.asarray(classes)
    if classes.shape[0] != norms.shape[0]:
        raise ValueError("classes must have one label per row")
    levels = np.unique(classes)
    if levels.size < 2:
        return float("nan")
    total = float(np.sum((norms - norms.mean()) ** 2))
    if total == 0.0:
        return float("nan")
    between = sum(
        np.count_nonzero(classes == c) * (norms[classes == c].mean() - norms.mean()) ** 2 for c in levels
    )
    return float(min(1.0, max(0.0, between / total)))


def effective_dim(X):
    """Participation ratio ``(sum l)^2 / sum l^2`` of the covariance eigenvalues."""
    X = np.asarray(X, dtype=np.float64)
    lam = np.clip(np.linalg.eigvalsh(np.cov(X, rowvar=False).reshape(X.shape[1], X.shape[1])), 0.0, None)
    s2 = float(np.sum(lam**2))
    if s2 == 0.0:
        return 1.0
    return float(min(X.shape[1], max(1.0, np.sum(lam) ** 2 / s2)))


def geometry_report(H, classes):
    """Negative-entry fraction, radial eta^2 by class, and participation-ratio dimension of ``H``."""
    X = H.values if isinstance(H, EmbeddingMatrix) else np.asarray(H, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("geometry_report needs an N x d matrix with N >= 2")
    eta = radial_eta2(X, classes)
    return GeometryReport(
        negative_fraction=negative_fraction(X),
        radial_eta2=eta,
        effective_dim=effective_dim(X),
        n=X.shape[0],
        d=X.shape[1],
        eta2_defined=not np.isnan(eta),
    )
