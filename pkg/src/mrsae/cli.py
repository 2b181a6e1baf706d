"""Command-line front end: ``mrsae <command> [--config F] [--seed N] [--out DIR] [--threads T] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration/validation error, 3 missing upstream
artifact, 4 numerical failure (training divergence).
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from ._util import derive_seed
from .annotate import annotate_all, enrichment_test
from .config import ConfigError, ExperimentConfig, from_mapping, load_config, parse_override
from .data import (
    DataFormatError,
    align_covariates,
    generate_synthetic_cohort,
    latest_scan_per_subject,
    load_covariates,
    load_embeddings,
    resample_cohort,
    write_covariates,
    write_embeddings,
    write_ground_truth,
)
from .diagnostics import geometry_report
from .evaluate import (
    ablation_suite,
    all_alive,
    category,
    covariates_only,
    cross_cohort_replicate,
    random_alive,
    raw_embedding,
    selective_prediction,
    stratified_subject_kfold,
    top_n_by_frequency,
    write_ablation_csv,
    _evaluation_rows,
)
from .manifold import build_knn_graph, export_graph_csv, read_graph, write_graph
from .sae import TrainingDivergence, encode, load_checkpoint, save_checkpoint, split_subjects, train

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("synth", "graph", "train", "annotate", "evaluate", "replicate", "diagnose", "report")


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


class Run:
    """One command invocation: resolved config, output directory, input digests."""

    def __init__(self, cfg, command):
        self.cfg = cfg
        self.command = command
        self.out = cfg.out
        self.inputs = {}
        os.makedirs(self.out, exist_ok=True)

    def path(self, key, default_name):
        explicit = getattr(self.cfg, key, "") if key else ""
        return explicit or os.path.join(self.out, default_name)

    def require(self, label, path):
        if not os.path.exists(path):
            raise MissingArtifact(f"missing {label}: {path}")
        stem = path[:-4] if path.endswith(".f32") else path
        digest_path = stem + ".json" if path.endswith(".f32") else path
        self.inputs[label] = _file_digest(digest_path if os.path.exists(digest_path) else path)
        return path

    def provenance(self):
        return {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "version": __version__,
            "inputs": dict(sorted(self.inputs.items())),
        }

    def write_json(self, name, payload):
        payload = dict(payload)
        payload["provenance"] = self.provenance()
        path = os.path.join(self.out, name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1, allow_nan=True)
            fh.write("\n")
        return path

    def write_csv(self, name, header, rows):
        path = os.path.join(self.out, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("# " + json.dumps({"provenance": self.provenance()}, sort_keys=True) + "\n")
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(_cell(v) for v in r) + "\n")
        return path

    # -- common loaders ---------------------------------------------------
    def embeddings_path(self):
        name = "embeddings.csv" if self.cfg.embeddings_format == "csv" else "embeddings.f32"
        return self.path("embeddings", name)

    def cohort(self):
        emb = load_embeddings(self.require("embeddings", self.embeddings_path()))
        cov = load_covariates(self.require("covariates", self.path("covariates", "covariates.csv")))
        return emb, align_covariates(cov, emb)

    def model(self):
        return load_checkpoint(self.require("checkpoint", self.path("checkpoint", "model.ckpt")))


def _cell(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if np.isnan(v) else "%.17g" % v
    return str(v)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if np.isnan(x) else x
    if isinstance(x, np.integer):
        return int(x)
    return x


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(run):
    cfg = run.cfg
    spec = cfg.synthetic_spec()
    emb, cov, truth = generate_synthetic_cohort(spec)
    prov = run.provenance()
    fmt = cfg.embeddings_format
    ext = "csv" if fmt == "csv" else "f32"
    write_embeddings(emb, os.path.join(run.out, f"embeddings.{ext}"), fmt, prov)
    write_covariates(cov, os.path.join(run.out, "covariates.csv"), prov)
    write_ground_truth(truth, os.path.join(run.out, "ground_truth.json"), prov)
    # second cohort drawn from the same planted dictionary, for replication
    embB, covB, _ = resample_cohort(spec, truth, derive_seed(cfg.seed, "cohort_b") % (2**32))
    write_embeddings(embB, os.path.join(run.out, f"cohort_b_embeddings.{ext}"), fmt, prov)
    write_covariates(covB, os.path.join(run.out, "cohort_b_covariates.csv"), prov)
    return f"synthetic cohort: {emb.n} scans, d={emb.d}, {spec.n_factors} planted factors"


def _training_rows(cfg, cov):
    return split_subjects(cov.subject_id, cfg.split_fraction, cfg.seed)[0]


def cmd_graph(run):
    cfg = run.cfg
    emb, cov = run.cohort()
    rows = _training_rows(cfg, cov)
    g = build_knn_graph(emb.values[rows], min(cfg.k_nn, len(rows) - 1), threads=cfg.threads)
    write_graph(g, os.path.join(run.out, "graph.bin"), run.provenance())
    export_graph_csv(g, os.path.join(run.out, "graph.csv"))
    return f"graph: {g.n_nodes} nodes, k={g.k}, sigma={g.sigma:.6g}"


def cmd_train(run):
    cfg = run.cfg
    tc = cfg.train_config()
    emb, cov = run.cohort()
    graph = None
    if tc.lam > 0:
        gpath = run.path("graph", "graph.bin")
        if cfg.graph or os.path.exists(gpath):
            graph = read_graph(run.require("graph", gpath))
        else:
            rows = _training_rows(cfg, cov)
            graph = build_knn_graph(emb.values[rows], min(cfg.k_nn, len(rows) - 1), threads=cfg.threads)
    model = train(emb.values, tc, graph=graph, subjects=cov.subject_id)
    save_checkpoint(model, os.path.join(run.out, "model.ckpt"), run.provenance())
    run.write_json("train_report.json", {
        "variant": tc.variant,
        "explained_variance": model.explained_variance,
        "n_alive": model.n_alive,
        "d_sae": model.params.d_sae,
        "alive_features": model.alive_features.tolist(),
        "loss_history": model.loss_history.tolist(),
        "model_provenance": model.provenance,
    })
    return f"{tc.variant}: EV={model.explained_variance:.4f}, alive={model.n_alive}/{model.params.d_sae}"


def cmd_annotate(run):
    cfg = run.cfg
    model = run.model()
    emb, cov = run.cohort()
    if cfg.latest_scan_annotation:
        cov, emb = latest_scan_per_subject(cov, emb)
    ann = annotate_all(model, emb, cov, alpha=cfg.alpha)
    prov = run.provenance()
    ann.to_csv(os.path.join(run.out, "annotations.csv"), prov)
    ann.to_json(os.path.join(run.out, "annotations.json"), prov)
    hm = ann.heatmap()
    run.write_csv("heatmap.csv", ["feature"] + list(ann.variables),
                  [[int(f)] + list(hm[i]) for i, f in enumerate(ann.features)])
    if cov.secondary:
        Z = encode(model.params, emb.values, model.config.activation, model.config.k)[:, ann.features]
        enr = enrichment_test(ann, Z, cov.secondary, alpha=cfg.alpha)
        enr.to_csv(os.path.join(run.out, "enrichment.csv"), prov)
    counts = ann.category_counts()
    return "annotation: " + ", ".join(f"{k}={v}" for k, v in counts.items())


def cmd_evaluate(run):
    cfg = run.cfg
    model = run.model()
    emb, cov = run.cohort()
    if cov.converter is None or np.all(np.isnan(cov.converter)):
        raise ConfigError("evaluate needs converter labels in the covariate table")
    ann = annotate_all(model, emb, cov, alpha=cfg.alpha)
    eval_cov = _evaluation_rows(emb, cov)[1]
    plan = stratified_subject_kfold(eval_cov, "converter", cfg.n_folds, cfg.seed)
    selectors = [
        top_n_by_frequency(cfg.top_n),
        random_alive(cfg.top_n, derive_seed(cfg.seed, "controls")),
        all_alive(),
        category("AD-related"),
        category("comorbidity"),
        category("AD-related", exclude=True, n=cfg.top_n),
        raw_embedding(),
        covariates_only(),
    ]
    reports, rows = [], []
    for sel in selectors:
        try:
            rep = selective_prediction(model, emb, cov, sel, annotations=ann, plan=plan)
        except ValueError as exc:
            rows.append([sel.name, "", "", "", "", "", "", str(exc)])
            continue
        reports.append(rep)
        rows.append([rep.model, rep.d, rep.auc_mean, rep.auc_std, rep.pooled_auc, rep.sens_mean, rep.spec_mean, ""])
    run.write_csv("predictions.csv", ["model", "d", "auc", "auc_std", "pooled_auc", "sens", "spec", "note"], rows)
    run.write_json("predictions.json", {"reports": [_jsonable(r.to_dict()) for r in reports],
                                         "n_folds": cfg.n_folds, "fold_label": plan.label})
    if reports and reports[0].model == top_n_by_frequency(cfg.top_n).name:
        reports[0].export_roc_csv(os.path.join(run.out, f"roc_top{cfg.top_n}.csv"))
    if cfg.ablation:
        arows, _ = ablation_suite(emb, cov, cfg.train_config(), cfg.ablation_grid(), seed=cfg.seed, n_folds=cfg.n_folds)
        write_ablation_csv(arows, os.path.join(run.out, "ablation.csv"), run.provenance())
    top = reports[0] if reports else None
    return f"top-{cfg.top_n} AUC={top.auc_mean:.3f}" if top else "no reports"


def cmd_replicate(run):
    cfg = run.cfg
    model = run.model()
    embA, covA = run.cohort()
    ext = "csv" if cfg.embeddings_format == "csv" else "f32"
    embB = load_embeddings(run.require("cohort_b_embeddings", run.path("cohort_b_embeddings", f"cohort_b_embeddings.{ext}")))
    covB = load_covariates(run.require("cohort_b_covariates", run.path("cohort_b_covariates", "cohort_b_covariates.csv")))
    covB = align_covariates(covB, embB)
    rep = cross_cohort_replicate(model, (embA, covA), (embB, covB), n_selected=cfg.top_n, alpha=cfg.alpha)
    run.write_json("replication.json", _jsonable(rep.to_dict()))
    return f"annotation agreement r={rep.annotation_agreement:.3f}, replication rate={rep.replication_rate:.2f}"


def cmd_diagnose(run):
    emb, cov = run.cohort()
    rep = geometry_report(emb, cov.diagnosis)
    run.write_json("geometry.json", _jsonable(rep.to_dict()))
    return f"negative fraction={rep.negative_fraction:.3f}, effective dim={rep.effective_dim:.2f}"


_REPORT_SOURCES = ("train_report.json", "annotations.json", "predictions.json", "replication.json", "geometry.json")


def cmd_report(run):
    found = {}
    for name in _REPORT_SOURCES:
        p = os.path.join(run.out, name)
        if os.path.exists(p):
            run.require(name, p)
            with open(p, encoding="utf-8") as fh:
                found[name] = json.load(fh)
    if not found:
        raise MissingArtifact(f"no reports in {run.out}")
    lines = ["# Run summary", ""]
    if "train_report.json" in found:
        t = found["train_report.json"]
        lines += ["## Training", "", f"- variant: {t['variant']}",
                  f"- explained variance (held out): {t['explained_variance']:.4f}",
                  f"- alive features: {t['n_alive']} / {t['d_sae']}", ""]
    if "annotations.json" in found:
        a = found["annotations.json"]
        lines += ["## Annotation", "", "| category | features |", "|---|---|"]
        lines += [f"| {k} | {v} |" for k, v in a["category_counts"].items()] + [""]
    if "predictions.json" in found:
        p = found["predictions.json"]
        lines += ["## Conversion prediction", "", "| model | d | AUC | Sens | Spec |", "|---|---|---|---|---|"]
        for r in p["reports"]:
            lines.append(f"| {r['model']} | {r['d']} | {r['auc_mean']:.3f} ± {r['auc_std']:.3f} "
                         f"| {r['sens_mean']:.1f} | {r['spec_mean']:.1f} |")
        lines.append("")
    if "replication.json" in found:
        r = found["replication.json"]
        fmt = lambda v: "n/a" if v is None else f"{v:.3f}"  # noqa: E731
        lines += ["## Replication", "", f"- annotation agreement r: {fmt(r['annotation_agreement'])}",
                  f"- activation consistency (Spearman): {fmt(r['activation_consistency'])}",
                  f"- replication rate: {fmt(r['replication_rate'])}", ""]
    if "geometry.json" in found:
        g = found["geometry.json"]
        eta = "undefined" if g["radial_eta2"] is None else f"{g['radial_eta2']:.4f}"
        lines += ["## Embedding geometry", "", f"- negative fraction: {g['negative_fraction']:.4f}",
                  f"- radial eta^2: {eta}", f"- effective dimension: {g['effective_dim']:.2f}", ""]
    prov = run.provenance()
    lines += ["```", json.dumps(prov, sort_keys=True), "```", ""]
    with open(os.path.join(run.out, "report.md"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    return f"report.md from {len(found)} sources"


HANDLERS = {
    "synth": cmd_synth,
    "graph": cmd_graph,
    "train": cmd_train,
    "annotate": cmd_annotate,
    "evaluate": cmd_evaluate,
    "replicate": cmd_replicate,
    "diagnose": cmd_diagnose,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--threads", type=int, help="worker threads for the graph build (results do not depend on it)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    parser = argparse.ArgumentParser(prog="mrsae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = dict(parse_override(s) for s in args.set)
    for key in ("seed", "out", "threads"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    return from_mapping(overrides, base=cfg).validate()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config and not os.path.exists(args.config):
            raise MissingArtifact(f"missing config: {args.config}")
        cfg = resolve_config(args)
        # BLAS stays single-threaded so every product is bitwise reproducible;
        # --threads parallelises the graph build over fixed row blocks instead
        with threadpool_limits(limits=1):
            msg = HANDLERS[args.command](Run(cfg, args.command))
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergence, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataFormatError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(msg)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
