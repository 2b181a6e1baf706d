"""Sparse autoencoder with TopK/ReLU gating and a pre-activation manifold penalty.

Forward pass for a row ``h``::

    a = W_enc (h - b_pre) + b_enc        # pre-activations, d_sae
    z = gate(a)                          # TopK or ReLU
    h_hat = W_dec z + b_pre              # W_dec has unit-norm columns

Objective on a batch ``B`` with graph edges ``E`` leaving the batch::

    L = mean_B ||h - h_hat||^2 + lam * mean_E w_ij ||a_i - a_j||^2

Gradients are derived analytically. TopK is differentiated as a fixed
selection mask; neighbour rows enter only through the penalty.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import sparse

from ._util import derive_seed, pearson
from .data import EmbeddingMatrix
from .manifold import build_knn_graph, neighbor_batch

__all__ = [
    "SaeParams",
    "TrainConfig",
    "TrainedSae",
    "AdamState",
    "LossBreakdown",
    "TrainingDivergence",
    "encode_pre",
    "topk_activate",
    "relu_activate",
    "activate",
    "decode",
    "manifold_penalty",
    "loss_and_gradients",
    "adam_step",
    "init_params",
    "split_subjects",
    "train",
    "encode",
    "explained_variance",
    "alive_census",
    "activation_stats",
    "redundancy",
    "save_checkpoint",
    "load_checkpoint",
]

PARAM_BLOCKS = ("W_enc", "b_enc", "W_dec", "b_pre")


class TrainingDivergence(FloatingPointError):
    """Non-finite loss during training."""

    def __init__(self, epoch, batch, breakdown):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {breakdown}")
        self.epoch = epoch
        self.batch = batch


@dataclass(eq=False)
class SaeParams:
    W_enc: np.ndarray  # d_sae x d
    b_enc: np.ndarray  # d_sae
    W_dec: np.ndarray  # d x d_sae
    b_pre: np.ndarray  # d

    @property
    def d(self):
        return self.W_dec.shape[0]

    @property
    def d_sae(self):
        return self.W_dec.shape[1]

    def copy(self):
        return SaeParams(*(getattr(self, n).copy() for n in PARAM_BLOCKS))

    def blocks(self):
        return {n: getattr(self, n) for n in PARAM_BLOCKS}

    def validate(self, atol=1e-6):
        d, m = self.d, self.d_sae
        shapes = {"W_enc": (m, d), "b_enc": (m,), "W_dec": (d, m), "b_pre": (d,)}
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        norms = np.linalg.norm(self.W_dec, axis=0)
        if np.any(np.abs(norms - 1.0) > atol):
            raise ValueError(f"decoder column norms deviate from 1 by {np.abs(norms - 1).max():.3g}")

    def __eq__(self, other):
        if not isinstance(other, SaeParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_BLOCKS)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. ``lam = 0`` gives the standard (unregularised) SAE."""

    activation: str = "topk"
    k: int = 16
    expansion: int = 2
    lam: float = 0.1
    k_nn: int = 15
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    split_fraction: float = 0.9

    def validate(self, d=None):
        if self.activation not in ("topk", "relu"):
            raise ValueError(f"activation must be 'topk' or 'relu', got {self.activation!r}")
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 < self.split_fraction <= 1:
            raise ValueError("split_fraction must be in (0, 1]")
        if self.k_nn < 1:
            raise ValueError("k_nn must be >= 1")
        if d is not None and self.activation == "topk" and not 1 <= self.k <= d * self.expansion:
            raise ValueError(f"topk k must satisfy 1 <= k <= d_sae = {d * self.expansion}")

    @property
    def variant(self):
        return "standard SAE" if self.lam == 0 else "manifold-regularized SAE"


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def encode_pre(params, h):
    """Pre-activations ``W_enc (h - b_pre) + b_enc`` for a vector or a batch of rows."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.d:
        raise ValueError(f"input dimension {h.shape[-1]} != model dimension {params.d}")
    return (h - params.b_pre) @ params.W_enc.T + params.b_enc


def _topk_mask(a, k):
    """Boolean mask of the k largest entries per row; equal values favour the smaller index."""
    a2 = np.atleast_2d(a)
    m = a2.shape[-1]
    if k >= m:
        mask = np.ones(a2.shape, dtype=bool)
    else:
        top = np.argsort(-a2, axis=-1, kind="stable")[:, :k]
        mask = np.zeros(a2.shape, dtype=bool)
        np.put_along_axis(mask, top, True, axis=-1)
    return mask.reshape(np.shape(a))


def topk_activate(a, k):
    """Keep ReLU(a_j) for the k largest entries of ``a`` (per row), zero elsewhere."""
    a = np.asarray(a, dtype=np.float64)
    if not 1 <= k <= a.shape[-1]:
        raise ValueError(f"k must satisfy 1 <= k <= {a.shape[-1]}")
    return np.where(_topk_mask(a, k) & (a > 0), a, 0.0)


def relu_activate(a):
    return np.maximum(np.asarray(a, dtype=np.float64), 0.0)


def _gate(a, activation, k):
    """Return (z, mask) where mask marks coordinates through which gradient flows."""
    if activation == "relu":
        mask = a > 0
    elif activation == "topk":
        if k is None:
            raise ValueError("topk activation needs k")
        mask = _topk_mask(a, k) & (a > 0)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return np.where(mask, a, 0.0), mask


def activate(a, activation="topk", k=None):
    return _gate(np.asarray(a, dtype=np.float64), activation, k)[0]


def decode(params, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.d_sae:
        raise ValueError(f"code dimension {z.shape[-1]} != d_sae {params.d_sae}")
    return z @ params.W_dec.T + params.b_pre


def manifold_penalty(pre_batch, pre_neighbors, edges):
    """Mean over edges of ``w * ||a_src - a_tgt||^2``.

    ``edges`` is a :class:`~mrsae.manifold.BatchEdges` (or any object with
    ``source``, ``target`` and ``weight`` arrays) whose sources index rows of
    ``pre_batch`` and targets rows of ``pre_neighbors``.
    """
    n_edges = len(edges.weight)
    if n_edges == 0:
        import warnings

        warnings.warn("manifold_penalty called with no edges; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    diff = np.asarray(pre_batch)[edges.source] - np.asarray(pre_neighbors)[edges.target]
    return float(np.dot(edges.weight, np.einsum("ij,ij->i", diff, diff)) / n_edges)


def _scatter_rows(values, index, n_rows):
    """Row-wise segment sum: ``out[index[e]] += values[e]`` in a fixed order."""
    incidence = sparse.csr_matrix(
        (np.ones(len(index)), (index, np.arange(len(index)))), shape=(n_rows, len(index))
    )
    return np.asarray(incidence @ values)


class LossBreakdown(NamedTuple):
    reconstruction: float
    manifold: float
    total: float


def loss_and_gradients(params, H_B, *, activation="topk", k=None, lam=0.0, H_nbr=None, edges=None):
    """Objective value and analytic gradients for one batch.

    Parameters
    ----------
    params : SaeParams
    H_B : ndarray, shape (B, d)
        Batch rows; they carry the reconstruction loss.
    activation, k :
        Gate and TopK size.
    lam : float
        Manifold weight. At ``lam == 0`` the penalty code path is skipped.
    H_nbr : ndarray, shape (U, d), optional
        Embeddings of the unique neighbours referenced by ``edges.target``.
    edges : BatchEdges, optional

    Returns
    -------
    (LossBreakdown, dict)
        Gradients keyed by ``W_enc``, ``b_enc``, ``W_dec``, ``b_pre``. The
        decoder gradient is the unconstrained Euclidean one.
    """
    H_B = np.asarray(H_B, dtype=np.float64)
    B = H_B.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    X = H_B - params.b_pre
    A = X @ params.W_enc.T + params.b_enc
    Z, mask = _gate(A, activation, k)
    R = Z @ params.W_dec.T + params.b_pre - H_B
    recon = float(np.einsum("ij,ij->", R, R)) / B

    G = (2.0 / B) * R
    g_W_dec = G.T @ Z
    g_b_pre = G.sum(axis=0)
    dA = np.where(mask, G @ params.W_dec, 0.0)

    penalty = 0.0
    use_manifold = lam != 0 and edges is not None and len(edges.weight) > 0
    if use_manifold:
        Xn = np.asarray(H_nbr, dtype=np.float64) - params.b_pre
        An = Xn @ params.W_enc.T + params.b_enc
        diff = A[edges.source] - An[edges.target]
        n_edges = len(edges.weight)
        penalty = float(np.dot(edges.weight, np.einsum("ij,ij->i", diff, diff))) / n_edges
        coef = (2.0 * lam / n_edges) * edges.weight[:, None] * diff
        dA = dA + _scatter_rows(coef, edges.source, B)
        dAn = -_scatter_rows(coef, edges.target, An.shape[0])

    g_W_enc = dA.T @ X
    g_b_enc = dA.sum(axis=0)
    g_b_pre = g_b_pre - dA.sum(axis=0) @ params.W_enc
    if use_manifold:
        g_W_enc = g_W_enc + dAn.T @ Xn
        g_b_enc = g_b_enc + dAn.sum(axis=0)
        g_b_pre = g_b_pre - dAn.sum(axis=0) @ params.W_enc

    total = recon + lam * penalty if use_manifold else recon
    grads = {"W_enc": g_W_enc, "b_enc": g_b_enc, "W_dec": g_W_dec, "b_pre": g_b_pre}
    return LossBreakdown(recon, penalty, total), grads


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls({n: np.zeros_like(a) for n, a in params.blocks().items()},
                   {n: np.zeros_like(a) for n, a in params.blocks().items()})


def _project_decoder_grad(W_dec, g):
    """Drop the component of each column gradient along its (unit) column."""
    radial = np.einsum("ij,ij->j", W_dec, g)
    return g - W_dec * radial


def _normalize_columns(W):
    norms = np.linalg.norm(W, axis=0)
    norms[norms == 0] = 1.0
    return W / norms


def adam_step(state, params, grads, lr):
    """One Adam update with bias correction, then decoder column renormalisation.

    Returns new ``(params, state)``; the inputs are not modified.
    """
    grads = dict(grads)
    grads["W_dec"] = _project_decoder_grad(params.W_dec, grads["W_dec"])
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_m, new_v, new_blocks = {}, {}, {}
    for name in PARAM_BLOCKS:
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_blocks[name] = getattr(params, name) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    new_blocks["W_dec"] = _normalize_columns(new_blocks["W_dec"])
    new_state = AdamState(new_m, new_v, t, b1, b2, eps)
    return SaeParams(**new_blocks), new_state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TrainedSae:
    params: SaeParams
    config: TrainConfig
    loss_history: np.ndarray  # epochs x 3: reconstruction, manifold, total
    explained_variance: float
    alive_mask: np.ndarray
    train_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    provenance: dict = field(default_factory=dict)

    @property
    def alive_features(self):
        return np.flatnonzero(self.alive_mask)

    @property
    def n_alive(self):
        return int(self.alive_mask.sum())

    def __eq__(self, other):
        if not isinstance(other, TrainedSae):
            return NotImplemented
        return (
            self.params == other.params
            and self.config == other.config
            and np.array_equal(self.loss_history, other.loss_history)
            and self.explained_variance == other.explained_variance
            and np.array_equal(self.alive_mask, other.alive_mask)
            and np.array_equal(self.train_rows, other.train_rows)
            and np.array_equal(self.val_rows, other.val_rows)
            and self.provenance == other.provenance
        )


def init_params(d, d_sae, H_mean, rng):
    """Unit-sphere decoder columns, tied encoder, zero encoder bias, mean-centred pre-bias."""
    W_dec = _normalize_columns(rng.standard_normal((d, d_sae)))
    return SaeParams(W_enc=W_dec.T.copy(), b_enc=np.zeros(d_sae), W_dec=W_dec, b_pre=np.array(H_mean, dtype=np.float64))


def split_subjects(subject_ids, train_fraction, seed):
    """Subject-level train/validation split; returns sorted row index arrays.

    With ``train_fraction == 1`` every row is a training row and the validation
    set is empty.
    """
    subjects = list(dict.fromkeys(subject_ids))
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(len(subjects))
    n_train = len(subjects) if train_fraction >= 1 else int(round(train_fraction * len(subjects)))
    n_train = min(max(n_train, 1), len(subjects))
    if train_fraction < 1 and n_train == len(subjects) and len(subjects) > 1:
        n_train -= 1
    train_subj = {subjects[i] for i in order[:n_train]}
    rows = np.arange(len(subject_ids))
    in_train = np.array([s in train_subj for s in subject_ids], dtype=bool)
    return rows[in_train], rows[~in_train]


def encode(params, H, activation="topk", k=None, chunk=4096):
    """Post-activation codes for every row of ``H`` (an array or EmbeddingMatrix)."""
    X = H.values if isinstance(H, EmbeddingMatrix) else np.asarray(H, dtype=np.float64)
    out = np.empty((X.shape[0], params.d_sae))
    for s in range(0, X.shape[0], chunk):
        out[s:s + chunk] = activate(encode_pre(params, X[s:s + chunk]), activation, k)
    return out


def _model_codes(model, H):
    return encode(model.params, H, model.config.activation, model.config.k)


def explained_variance(params, H, activation="topk", k=None):
    """``1 - ||H - H_hat||_F^2 / ||H - mean(H)||_F^2``."""
    X = H.values if isinstance(H, EmbeddingMatrix) else np.asarray(H, dtype=np.float64)
    Z = encode(params, X, activation, k)
    resid = X - decode(params, Z)
    centred = X - X.mean(axis=0)
    denom = float(np.einsum("ij,ij->", centred, centred))
    if denom == 0:
        return float("nan")
    return 1.0 - float(np.einsum("ij,ij->", resid, resid)) / denom


def train(H, config, graph=None, subjects=None, log=None):
    """Train an SAE on ``H`` under ``config``.

    Rows are split at the subject level (``subjects`` aligned to rows; each
    row is its own subject when omitted). The manifold graph must be built on
    the training rows; it is built here when not supplied and ``lam > 0``.
    The run is a deterministic function of ``(H, config, graph, subjects)``.

    Raises
    ------
    TrainingDivergence
        On a non-finite batch loss.
    """
    X = H.values if isinstance(H, EmbeddingMatrix) else np.asarray(H, dtype=np.float64)
    n, d = X.shape
    config.validate(d)
    d_sae = d * config.expansion
    subjects = list(subjects) if subjects is not None else [str(i) for i in range(n)]
    train_rows, val_rows = split_subjects(subjects, config.split_fraction, config.seed)
    Xtr = X[train_rows]
    if config.lam > 0:
        if graph is None:
            graph = build_knn_graph(Xtr, min(config.k_nn, len(train_rows) - 1))
        elif graph.n_nodes != len(train_rows):
            raise ValueError(f"graph has {graph.n_nodes} nodes but the training split has {len(train_rows)} rows")

    params = init_params(d, d_sae, Xtr.mean(axis=0), np.random.default_rng(derive_seed(config.seed, "init")))
    state = AdamState.zeros_like(params)
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    history = np.zeros((config.epochs, 3))
    ntr = len(train_rows)
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(ntr)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, ntr, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            if config.lam > 0:
                edges = neighbor_batch(graph, idx)
                loss, grads = loss_and_gradients(
                    params, Xtr[idx], activation=config.activation, k=config.k,
                    lam=config.lam, H_nbr=Xtr[edges.neighbor_index], edges=edges,
                )
            else:
                loss, grads = loss_and_gradients(params, Xtr[idx], activation=config.activation, k=config.k)
            if not np.isfinite(loss.total):
                raise TrainingDivergence(epoch, b, loss)
            params, state = adam_step(state, params, grads, config.lr)
            sums += len(idx) * np.array(loss)
        history[epoch] = sums / ntr
        if log is not None:
            log(epoch, history[epoch])

    ev_rows = val_rows if len(val_rows) else train_rows
    ev = explained_variance(params, X[ev_rows], config.activation, config.k)
    alive = (encode(params, Xtr, config.activation, config.k) > 0).any(axis=0)
    provenance = {
        "variant": config.variant,
        "penalty_normalization": "mean_over_edges",
        "topk_gradient": "straight-through on selected support",
        "explained_variance_rows": "validation" if len(val_rows) else "training",
    }
    return TrainedSae(params, config, history, ev, alive, train_rows, val_rows, provenance)


# ---------------------------------------------------------------------------
# Feature statistics
# ---------------------------------------------------------------------------


def alive_census(model, H):
    """Indices of features with a strictly positive activation on some row of ``H``."""
    return np.flatnonzero((_model_codes(model, H) > 0).any(axis=0))


class ActivationStats(NamedTuple):
    frequency: np.ndarray
    mean_magnitude: np.ndarray
    dead: np.ndarray


def activation_stats(model, H):
    """Per-feature firing frequency and mean activation over the rows where it fires.

    Dead features report frequency 0 and magnitude 0 with ``dead`` set.
    """
    Z = _model_codes(model, H)
    active = Z > 0
    counts = active.sum(axis=0)
    freq = counts / Z.shape[0]
    sums = np.where(active, Z, 0.0).sum(axis=0)
    mag = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return ActivationStats(freq, mag, counts == 0)


class Redundancy(NamedTuple):
    mean_abs_r: float
    n_pairs: int
    n_degenerate: int


def _mean_abs_corr(Z):
    m = Z.shape[1]
    Zc = Z - Z.mean(axis=0)
    ss = np.einsum("ij,ij->j", Zc, Zc)
    ok = ss > 0
    C = Zc.T @ Zc
    denom = np.sqrt(np.outer(ss, ss))
    R = np.divide(C, denom, out=np.zeros_like(C), where=np.outer(ok, ok))
    iu = np.triu_indices(m, 1)
    vals = np.abs(np.clip(R[iu], -1.0, 1.0))
    degenerate = int((~np.outer(ok, ok))[iu].sum())
    return float(vals.mean()), len(vals), degenerate


def redundancy(model, H):
    """Mean pairwise |Pearson r| between activation vectors of features alive on ``H``.

    Pairs involving a zero-variance feature count as |r| = 0 and are tallied
    in ``n_degenerate``.
    """
    Z = _model_codes(model, H)
    alive = (Z > 0).any(axis=0)
    if alive.sum() < 2:
        raise ValueError(f"redundancy needs >= 2 alive features, got {int(alive.sum())}")
    return Redundancy(*_mean_abs_corr(Z[:, alive]))


def _pairwise_mean_abs_r_loop(Z):
    """Reference double loop used by tests."""
    m = Z.shape[1]
    vals = []
    for i in range(m):
        for j in range(i + 1, m):
            r = pearson(Z[:, i], Z[:, j])
            vals.append(0.0 if np.isnan(r) else abs(r))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"MRSAECK\x00"
_CKPT_VERSION = 1


def save_checkpoint(model, path, provenance=None):
    """Binary checkpoint: magic, version, JSON preamble, then f64 parameter blocks.

    Block order: W_enc (row-major), b_enc, W_dec (column-major), b_pre.
    """
    p = model.params
    meta = {
        "config": asdict(model.config),
        "d": p.d,
        "d_sae": p.d_sae,
        "explained_variance": model.explained_variance,
        "alive_mask": [int(x) for x in model.alive_mask],
        "loss_history": model.loss_history.tolist(),
        "train_rows": model.train_rows.tolist(),
        "val_rows": model.val_rows.tolist(),
        "model_provenance": model.provenance,
        "loss_summary": {
            "final": model.loss_history[-1].tolist() if len(model.loss_history) else None,
            "n_alive": model.n_alive,
        },
    }
    if provenance is not None:
        meta["provenance"] = provenance
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(p.W_enc, dtype="<f8").tobytes(order="C"))
        fh.write(np.ascontiguousarray(p.b_enc, dtype="<f8").tobytes())
        fh.write(np.asarray(p.W_dec, dtype="<f8").tobytes(order="F"))
        fh.write(np.ascontiguousarray(p.b_pre, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<IQ", fh.read(12))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(blob_len))
        raw = np.frombuffer(fh.read(), dtype="<f8")
    d, m = meta["d"], meta["d_sae"]
    sizes = [m * d, m, d * m, d]
    if raw.size != sum(sizes):
        raise ValueError(f"{path}: parameter payload has {raw.size} values, expected {sum(sizes)}")
    parts = np.split(raw, np.cumsum(sizes)[:-1])
    params = SaeParams(
        W_enc=parts[0].reshape(m, d).copy(),
        b_enc=parts[1].copy(),
        W_dec=parts[2].reshape(d, m, order="F").copy(),
        b_pre=parts[3].copy(),
    )
    history = np.array(meta["loss_history"], dtype=np.float64).reshape(-1, 3)
    return TrainedSae(
        params=params,
        config=TrainConfig(**meta["config"]),
        loss_history=history,
        explained_variance=meta["explained_variance"],
        alive_mask=np.array(meta["alive_mask"], dtype=bool),
        train_rows=np.array(meta["train_rows"], dtype=np.int64),
        val_rows=np.array(meta["val_rows"], dtype=np.int64),
        provenance=meta["model_provenance"],
    )
