"""Alive-feature count and held-out explained variance across manifold weights.

    python scripts/mortality_sweep.py --config configs/synthetic.toml --lams 0 0.01 0.1 1 10
"""

import argparse
import csv
import sys
from dataclasses import replace

from mrsae.config import load_config
from mrsae.data import generate_synthetic_cohort
from mrsae.manifold import build_knn_graph
from mrsae.sae import split_subjects, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/synthetic.toml")
    ap.add_argument("--lams", type=float, nargs="+", default=[0.0, 0.01, 0.1, 1.0, 10.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--csv", help="also write rows here")
    a = ap.parse_args()
    cfg = load_config(a.config)
    rows = []
    for seed in a.seeds:
        H, cov, _ = generate_synthetic_cohort(cfg.synthetic_spec(seed=seed))
        base = replace(cfg.train_config(), seed=seed)
        tr, _ = split_subjects(cov.subject_id, base.split_fraction, seed)
        graph = build_knn_graph(H.values[tr], base.k_nn)  # shared by every lam > 0
        for lam in a.lams:
            m = train(H, replace(base, lam=lam), graph=graph if lam > 0 else None, subjects=cov.subject_id)
            rows.append((seed, lam, m.n_alive, m.params.d_sae, m.explained_variance))
            print(f"seed={seed} lam={lam:g}: alive {m.n_alive}/{m.params.d_sae}, EV {m.explained_variance:.4f}", flush=True)
    if a.csv:
        with open(a.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "lam", "alive", "d_sae", "explained_variance"])
            w.writerows(rows)


if __name__ == "__main__":
    sys.exit(main())
