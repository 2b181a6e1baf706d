"""Conversion-prediction table on a synthetic cohort: top-n, random control, category subsets, baselines.

    python scripts/prediction_table.py --config configs/synthetic.toml
"""

import argparse

import numpy as np

from mrsae._util import derive_seed
from mrsae.annotate import annotate_all
from mrsae.config import load_config
from mrsae.data import generate_synthetic_cohort
from mrsae.evaluate import (
    all_alive,
    category,
    covariates_only,
    random_alive,
    raw_embedding,
    selective_prediction,
    stratified_subject_kfold,
    top_n_by_frequency,
)
from mrsae.sae import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/synthetic.toml")
    a = ap.parse_args()
    cfg = load_config(a.config)
    H, cov, _ = generate_synthetic_cohort(cfg.synthetic_spec())
    m = train(H, cfg.train_config(), subjects=cov.subject_id)
    ann = annotate_all(m, H, cov, alpha=cfg.alpha)
    print(f"alive {m.n_alive}/{m.params.d_sae}, EV {m.explained_variance:.4f}")
    print("categories:", ann.category_counts())
    labelled = cov.take(np.flatnonzero(~np.isnan(cov.converter)))
    plan = stratified_subject_kfold(labelled, "converter", cfg.n_folds, cfg.seed)
    sels = [covariates_only(), raw_embedding(), all_alive(), top_n_by_frequency(cfg.top_n),
            random_alive(cfg.top_n, derive_seed(cfg.seed, "controls")), category("AD-related"),
            category("AD-related", exclude=True, n=cfg.top_n), category("comorbidity")]
    print(f"{'model':24s} {'d':>4s} {'AUC':>14s} {'Sens':>6s} {'Spec':>6s}")
    for sel in sels:
        try:
            r = selective_prediction(m, H, cov, sel, annotations=ann, plan=plan)
        except ValueError as exc:
            print(f"{sel.name:24s}  skipped: {exc}")
            continue
        print(f"{r.model:24s} {r.d:4d} {r.auc_mean:.3f} ± {r.auc_std:.3f} {r.sens_mean:6.1f} {r.spec_mean:6.1f}")


if __name__ == "__main__":
    main()
