"""Random SAE problem instances for gradient checks."""

import numpy as np

from mrsae.manifold import BatchEdges
from mrsae.sae import SaeParams, encode_pre, loss_and_gradients

MARGIN = 1e-3  # keep pre-activations away from gate boundaries so the mask is locally constant


def _margin_ok(A, activation, k):
    if np.min(np.abs(A)) < MARGIN:
        return False
    if activation == "topk":
        s = np.sort(A, axis=1)[:, ::-1]
        if np.min(s[:, k - 1] - s[:, k]) < MARGIN:
            return False
    return True


def gradient_instance(seed, d=6, d_sae=12, B=4, k=2, n_nbr=3, activation="topk"):
    """Params, batch, neighbour rows and edges with a well-separated gate."""
    rng = np.random.default_rng(seed)
    while True:
        W_dec = rng.standard_normal((d, d_sae))
        W_dec /= np.linalg.norm(W_dec, axis=0)
        p = SaeParams(rng.standard_normal((d_sae, d)) * 0.7, rng.standard_normal(d_sae) * 0.3,
                      W_dec, rng.standard_normal(d) * 0.2)
        H_B = rng.standard_normal((B, d))
        H_nbr = rng.standard_normal((n_nbr, d))
        src = np.repeat(np.arange(B), 2)
        tgt = rng.integers(0, n_nbr, size=2 * B)
        edges = BatchEdges(src, tgt, rng.uniform(0.2, 1.0, size=2 * B), np.arange(n_nbr))
        if _margin_ok(encode_pre(p, H_B), activation, k):
            return p, H_B, H_nbr, edges


def total_loss(p, H_B, H_nbr, edges, activation, k, lam):
    loss, _ = loss_and_gradients(p, H_B, activation=activation, k=k, lam=lam, H_nbr=H_nbr, edges=edges)
    return loss.total
