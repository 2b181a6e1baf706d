"""Small shared helpers: seed derivation, exact-identity Pearson, provenance."""

import hashlib
import json

import numpy as np

__all__ = ["derive_seed", "pearson", "canonical_json", "config_hash"]


def derive_seed(seed, label):
    """Derive an independent 63-bit sub-seed from a master seed and a fixed label.

    Every random stream in the package (initialisation, shuffling, folds,
    random controls) goes through here, so a single integer reproduces a run.
    """
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def pearson(x, y):
    """Pearson correlation, or NaN when either input has zero variance.

    Written as ``sxy / sqrt(sxx * syy)`` so that ``pearson(x, x)`` is exactly 1.0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson expects two 1-D arrays of equal length")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx <= 0.0 or syy <= 0.0:
        return float("nan")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]
