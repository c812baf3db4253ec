"""``anchorfuse`` command line: simulate, preprocess, partition, run, evaluate."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import data as io
from .config import RunConfig, dump_config, load_config
from .data import DataFormatError, EmbeddingMatrix, ExpressionDataset
from .estimator import ABLATIONS, AnchorFuseIntegrator, hvg_pool
from .gate import write_gate_tsv
from .metrics import cap_embedding, evaluate, external_oc, metric_table, oc_perturbation_setup, oc_report
from .partition import QuadrantGeneSelector, write_partition_tsv
from .preprocess import generate_synthetic, normalize_log1p, qc_filter, select_hvgs
from .trainer import write_training_log

logger = logging.getLogger("anchorfuse")

# flag -> config key; every flag is optional and overrides the config file
RUN_FLAGS = {
    "--total-steps": ("train.total_steps", int),
    "--warm-steps": ("train.warm_steps", int),
    "--align-only-steps": ("train.align_only_steps", int),
    "--lr": ("train.lr", float),
    "--tau-dom": ("selector.tau_dom", float),
    "--tau-str": ("selector.tau_str", float),
    "--n-hvgs": ("selector.n_hvgs", int),
    "--gate-strength": ("gate.strength", float),
    "--k-top": ("encoder.k_top", int),
    "--rebuild-every": ("encoder.rebuild_every", int),
    "--alpha-max": ("interaction.alpha_max", float),
    "--oc-focus": ("eval.oc_focus", str),
    "--oc-shift": ("eval.oc_shift", float),
}

SIM_FLAGS = {
    "--n-cells": ("simulate.n_cells", int),
    "--n-genes": ("simulate.n_genes", int),
    "--n-types": ("simulate.n_types", int),
    "--n-domains": ("simulate.n_domains", int),
    "--n-variant-genes": ("simulate.n_variant_genes", int),
    "--shift": ("simulate.batch_shift_scale", float),
    "--noise": ("simulate.noise_scale", float),
}


def _add_flags(p, table):
    for flag, (key, typ) in table.items():
        p.add_argument(flag, type=typ, default=None, dest=key.replace(".", "__"), help=f"overrides [{key}]")


def _overrides(args, tables) -> dict:
    out = {}
    for table in tables:
        for key, _ in table.values():
            v = getattr(args, key.replace(".", "__"), None)
            if v is not None:
                out[key] = v
    if getattr(args, "seed", None) is not None:
        out["run.seed"] = args.seed
    flags = [a for a in ABLATIONS if getattr(args, a, False)]
    if flags:
        out["run.ablations"] = ",".join(flags)
    for key in ("dump_gate", "dump_graphs"):
        if getattr(args, key, False):
            out[f"run.{key}"] = "true"
    return out


def _config(args, tables=()) -> RunConfig:
    return load_config(args.config, _overrides(args, tables)).seeded()


def _outdir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _load(matrix, labels, layer, genes=None) -> ExpressionDataset:
    return io.load_dataset(matrix, labels, layer=layer, genes_path=genes or None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _config(args, [SIM_FLAGS])
    out = _outdir(args.out or cfg.paths.output_dir)
    d, truth = generate_synthetic(cfg.simulate)
    io.save_dataset(d, os.path.join(out, "matrix.tsv"), os.path.join(out, "labels.tsv"))
    planted = set(truth["planted"].tolist())
    with open(os.path.join(out, "truth.tsv"), "w") as fh:
        fh.write("gene_id\tplanted\tinformative\n")
        for j, g in enumerate(d.gene_ids):
            fh.write(f"{g}\t{int(j in planted)}\t{int(truth['informative'][j])}\n")
    logger.info("wrote %d cells x %d genes to %s", d.n_cells, d.n_genes, out)
    return 0


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    out = _outdir(args.out or cfg.paths.output_dir)
    d = _load(args.matrix, args.labels, args.layer, args.genes)
    if d.layer == "raw_counts":
        d = normalize_log1p(qc_filter(d, cfg.preprocess), cfg.preprocess.target_sum)
    io.save_dataset(d, os.path.join(out, "matrix.tsv"), os.path.join(out, "labels.tsv"))
    n = min(cfg.preprocess.n_hvgs, d.n_genes)
    hvgs = select_hvgs(d, n)
    io.write_gene_ids([d.gene_ids[j] for j in sorted(hvgs)], os.path.join(out, "hvgs.txt"))
    logger.info("kept %d cells x %d genes; %d HVGs", d.n_cells, d.n_genes, n)
    return 0


def cmd_partition(args) -> int:
    cfg = _config(args, [RUN_FLAGS])
    d = _load(args.matrix, args.labels, args.layer, args.genes)
    pool = hvg_pool(d.values, d.domains, cfg.selector.n_hvgs)
    sel = QuadrantGeneSelector(tau_dom=cfg.selector.tau_dom, tau_str=cfg.selector.tau_str,
                               random_split="random_split" in cfg.ablations, random_state=cfg.seed,
                               **cfg.selector.selector_params()).fit(d.values[:, pool], d.domains)
    pool_ids = [d.gene_ids[j] for j in pool]
    out = args.out or os.path.join(_outdir(cfg.paths.output_dir), "partition.tsv")
    write_partition_tsv(sel.partition_, pool_ids, out)
    logger.info("%d anchors, %d variants -> %s", sel.partition_.n_anchors, sel.partition_.n_variants, out)
    return 0


def _write_oc_labels(cell_ids, pseudo, focus, path):
    focus = set(np.asarray(focus).tolist())
    with open(path, "w") as fh:
        fh.write("cell_id\tpseudo_label\tfocus\n")
        for i, (c, p) in enumerate(zip(cell_ids, pseudo)):
            fh.write(f"{c}\t{p}\t{int(i in focus)}\n")


def _read_oc_labels(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:3] != ["cell_id", "pseudo_label", "focus"]:
            raise DataFormatError(f"{path}: expected header cell_id, pseudo_label, focus")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    pseudo = np.array([r[1] for r in rows])
    focus = np.array([i for i, r in enumerate(rows) if r[2] == "1"])
    return [r[0] for r in rows], pseudo, focus


def cmd_run(args) -> int:
    cfg = _config(args, [RUN_FLAGS, SIM_FLAGS])
    out = _outdir(args.out or cfg.paths.output_dir)
    matrix = args.matrix or cfg.paths.matrix
    labels = args.labels or cfg.paths.labels
    if matrix:
        layer = args.layer or cfg.paths.layer
        d = _load(matrix, labels, layer, args.genes or cfg.paths.genes)
        if d.layer == "raw_counts":
            d = normalize_log1p(qc_filter(d, cfg.preprocess), cfg.preprocess.target_sum)
    else:
        logger.info("no input matrix configured; running the synthetic demo")
        d, _ = generate_synthetic(cfg.simulate)

    oc = None
    if cfg.eval.oc_focus:
        oc = oc_perturbation_setup(d, cfg.eval.oc_focus, cfg.eval.oc_perturb_fraction, cfg.eval.oc_shift,
                                   seed=cfg.seed)
        d = oc.dataset

    est = AnchorFuseIntegrator(
        n_hvgs=cfg.selector.n_hvgs, tau_dom=cfg.selector.tau_dom, tau_str=cfg.selector.tau_str,
        selector_params=cfg.selector.selector_params(), gate_config=cfg.gate, encoder_config=cfg.encoder,
        interaction_config=cfg.interaction, train_config=cfg.train, ablations=cfg.ablations,
        random_state=cfg.seed,
    )
    est.fit(d.values, d.domains)

    pool_ids = [d.gene_ids[j] for j in est.hvg_index_]
    write_partition_tsv(est.partition_, pool_ids, os.path.join(out, "partition.tsv"))
    write_training_log(est.training_log_, os.path.join(out, "training_log.tsv"))
    dump_config(cfg, os.path.join(out, "config.ini"))
    for name, values in est.embeddings_.items():
        io.save_embedding(EmbeddingMatrix(values, name), os.path.join(out, f"embedding_{name}.txt"))
    raw = cap_embedding(d.values[:, est.hvg_index_], cfg.eval.pca_cap)
    io.save_embedding(EmbeddingMatrix(raw, "external"), os.path.join(out, "embedding_raw.txt"))
    if cfg.dump_gate:
        var_ids = [pool_ids[j] for j in est.partition_.variants]
        write_gate_tsv(est.gamma_, var_ids, os.path.join(out, "gate.tsv"))
    if cfg.dump_graphs:
        for stream in ("var", "inv"):
            enc = getattr(est.state_.model, f"enc_{stream}")
            if enc.graph is not None:
                io.write_matrix(enc.graph.to_scipy().toarray(), os.path.join(out, f"graph_{stream}.tsv"))

    if not d.has_cell_types:
        logger.info("no cell types in labels; skipping evaluation")
        return 0
    extra = {}
    if oc is not None:
        _write_oc_labels(d.cell_ids, oc.pseudo_labels, oc.focus, os.path.join(out, "oc_labels.tsv"))
        extra = oc_report(est.embeddings_["fused"], raw, oc.pseudo_labels, oc.focus, cfg.eval.oc_k,
                          cfg.eval.pca_cap)
    reports = {"raw": evaluate(raw, d.cell_types, d.domains, cfg.eval)}
    for name, values in est.embeddings_.items():
        reports[name] = evaluate(values, d.cell_types, d.domains, cfg.eval, **(extra if name == "fused" else {}))
    io.save_report(reports["fused"], os.path.join(out, "report.txt"))
    metric_table(reports, os.path.join(out, "metrics.tsv"))
    r = reports["fused"]
    logger.info("fused: ARI %.3f NMI %.3f ASW_ct %.3f ASW_batch %.3f GC %.3f Overall %.3f",
                r.ari_best, r.nmi_best, r.asw_ct, r.asw_batch, r.gc, r.overall)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    e = io.load_embedding(args.embedding)
    cell_ids, domains, types = io.read_labels(args.labels)
    if types is None:
        raise DataFormatError(f"{args.labels}: evaluation needs a cell_type column")
    if len(cell_ids) != e.n:
        raise DataFormatError(f"{args.labels} has {len(cell_ids)} rows but the embedding has {e.n}")
    extra = {}
    if args.oc_labels:
        oc_ids, pseudo, focus = _read_oc_labels(args.oc_labels)
        if list(oc_ids) != list(cell_ids):
            raise DataFormatError("OC labels are not row-aligned with the labels file")
        if args.raw_embedding:
            raw = io.load_embedding(args.raw_embedding)
            extra.update(oc_report(e, raw, pseudo, focus, cfg.eval.oc_k, cfg.eval.pca_cap))
        if args.external_2d:
            mean, std = external_oc(args.external_2d, pseudo, focus, cfg.eval.oc_k)
            extra["extras"] = {"oc_2d_focus_mean": mean, "oc_2d_focus_std": std}
    elif args.external_2d or args.raw_embedding:
        raise SystemExit("--external-2d / --raw-embedding need --oc-labels")
    report = evaluate(e, types, domains, cfg.eval, **extra)
    io.save_report(report, args.out)
    logger.info("overall %.4f -> %s", report.overall, args.out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchorfuse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file; omitted keys use defaults")
        sp.add_argument("--seed", type=int, help="overrides [run] seed and $ANCHORFUSE_SEED")

    def inputs(sp, required=True):
        sp.add_argument("--matrix", required=required, help="sparse-triplet (or .csv) expression matrix")
        sp.add_argument("--labels", required=required, help="TSV: cell_id, domain[, cell_type]")
        sp.add_argument("--genes", help="gene id file (default: <matrix>.genes if present)")
        sp.add_argument("--layer", choices=("raw_counts", "lognorm"), default=None if not required else "lognorm")

    sp = sub.add_parser("simulate", help="write a planted synthetic dataset")
    common(sp)
    sp.add_argument("--out", help="output directory")
    _add_flags(sp, SIM_FLAGS)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("preprocess", help="QC, normalise and list HVGs")
    common(sp)
    inputs(sp)
    sp.set_defaults(layer="raw_counts")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("partition", help="anchor/variant gene split as TSV")
    common(sp)
    inputs(sp)
    sp.add_argument("--out", help="partition TSV path")
    sp.add_argument("--random-split", action="store_true", dest="random_split")
    _add_flags(sp, {k: v for k, v in RUN_FLAGS.items() if v[0].startswith("selector.")})
    sp.set_defaults(func=cmd_partition)

    sp = sub.add_parser("run", help="full pipeline: partition, gate, train, evaluate")
    common(sp)
    inputs(sp, required=False)
    sp.add_argument("--out", help="output directory")
    for a in ABLATIONS:
        sp.add_argument("--" + a.replace("_", "-"), action="store_true", dest=a)
    sp.add_argument("--dump-gate", action="store_true", help="write the per-cell gate summary (gate.tsv)")
    sp.add_argument("--dump-graphs", action="store_true", help="write the cached gene graphs")
    _add_flags(sp, RUN_FLAGS)
    _add_flags(sp, SIM_FLAGS)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("evaluate", help="score an embedding against labels")
    common(sp)
    sp.add_argument("--embedding", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True, help="report file")
    sp.add_argument("--oc-labels", help="TSV written by `run --oc-focus` (cell_id, pseudo_label, focus)")
    sp.add_argument("--raw-embedding", help="reference embedding for normalised OC")
    sp.add_argument("--external-2d", nargs="+", help="2-D embedding files for low-dimensional OC")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
