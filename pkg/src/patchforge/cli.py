"""Batch-job command line: data synthesis, training, evaluation, benchmarks.

Every command exits 0 on success and writes a single machine-parseable
``error: <category>: <message>`` line to stderr otherwise. Artifact
directories receive a ``manifest.json`` on completion; ``--determinism``
zeroes its timestamps so identical reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, bench, evalens, hetgraph, molgraph, train
from .errors import EvaluationError, InputError, PatchforgeError
from .featurize import build_feature_tables, default_pca_dim, eval_visibility, fit_pca
from .pfgm import write_run_manifest
from .rng import derive_seed, substream
from .sampler import SamplingPlan

EPOCH_TS = "1970-01-01T00:00:00Z"


def _now(args) -> str:
    if getattr(args, "determinism", False):
        return EPOCH_TS
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def data_root(path: str | None, default: str | None = None) -> Path:
    """Resolve a path against PATCHFORGE_DATA_DIR when it is relative."""
    if path is None:
        if default is None:
            raise InputError("missing required path")
        path = default
    p = Path(path)
    root = os.environ.get("PATCHFORGE_DATA_DIR")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _manifest(args, command: str, config: dict, outputs: list, started: str) -> dict:
    root = os.environ.get("PATCHFORGE_DATA_DIR")
    rel = []
    for o in outputs:
        o = Path(o)
        try:
            rel.append(str(o.relative_to(root)) if root else str(o))
        except ValueError:
            rel.append(str(o))
    return {
        "command": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "started": started,
        "finished": _now(args),
        "outputs": rel,
    }


def _config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _load_train_config(args, default_factory, cls):
    if args.config:
        overrides = train.parse_config_text(Path(args.config).read_text())
    else:
        overrides = {}
    cfg = default_factory() if args.desk else cls()
    cfg = train.apply_overrides(cfg, overrides)
    cfg = train.apply_overrides(cfg, dict(kv.split("=", 1) for kv in args.set))
    if args.steps is not None:
        cfg.steps = args.steps
    return cfg


# ---------------------------------------------------------------------------
# commands

def cmd_synth_mag(args) -> int:
    started = _now(args)
    graph = hetgraph.synth_mag(args.papers, args.authors, args.institutions,
                               args.classes, args.dim, args.seed,
                               p_in=args.p_in, labelled_fraction=args.labelled_fraction,
                               duplicate_pairs=args.duplicate_pairs)
    out = data_root(args.out)
    hetgraph.save_graph(out, graph)
    write_run_manifest(out, _manifest(args, "synth-mag", _args_dict(args), [out], started))
    print(f"synth-mag: {graph.num_papers} papers, {graph.forward[hetgraph.EdgeType.CITES].num_edges} citations -> {out}")
    return 0


def cmd_synth_mol(args) -> int:
    started = _now(args)
    mols = molgraph.synth_mol_dataset(args.count, (args.min_size, args.max_size),
                                      args.conformer_fraction, args.seed)
    out = data_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    molgraph.save_dataset(out / "molecules.tsv", mols)
    write_run_manifest(out, _manifest(args, "synth-mol", _args_dict(args), [out / "molecules.tsv"], started))
    print(f"synth-mol: {len(mols)} molecules -> {out / 'molecules.tsv'}")
    return 0


def cmd_fit_pca(args) -> int:
    started = _now(args)
    graph = hetgraph.load_graph(data_root(args.graph))
    dim = args.dim or default_pca_dim(graph.feature_dim)
    model = fit_pca(graph.paper_features, dim)
    out = data_root(args.out)
    model.save(out)
    write_run_manifest(out, _manifest(args, "fit-pca", {"dim": dim}, [out], started))
    print(f"fit-pca: {dim} components, top ratio {model.ratios[0]:.4f} -> {out}")
    return 0


def cmd_train_node(args) -> int:
    started = _now(args)
    graph = hetgraph.load_graph(data_root(args.graph))
    cfg = _load_train_config(args, train.desk_node_config, train.NodeTrainConfig)
    out = data_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train.train_node(graph, cfg, args.seed, metrics_path=out / "metrics.csv")
    train.save_node_checkpoint(out / "checkpoint", result)
    write_run_manifest(out, _manifest(args, "train-node", _config_dict(cfg),
                                      [out / "metrics.csv", out / "checkpoint"], started))
    print(f"train-node: best validation accuracy {result.best_metric:.4f} at step {result.best_step}")
    return 0


def cmd_train_mol(args) -> int:
    started = _now(args)
    mols = molgraph.load_dataset(data_root(args.data))
    cfg = _load_train_config(args, train.desk_mol_config, train.MolTrainConfig)
    out = data_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train.train_mol(mols, cfg, args.seed, metrics_path=out / "metrics.csv")
    train.save_mol_checkpoint(out / "checkpoint", result)
    write_run_manifest(out, _manifest(args, "train-mol", _config_dict(cfg),
                                      [out / "metrics.csv", out / "checkpoint"], started))
    print(f"train-mol: best validation MAE {result.best_metric:.4f} at step {result.best_step}")
    return 0


def cmd_eval_node(args) -> int:
    started = _now(args)
    graph = hetgraph.load_graph(data_root(args.graph))
    model, pca, plan = train.load_node_checkpoint(data_root(args.checkpoint))
    tables = build_feature_tables(graph, pca)
    splits = hetgraph.paper_splits(graph)
    centers = splits[args.split]
    if args.limit:
        centers = centers[: args.limit]
    if not len(centers):
        raise InputError(f"no {args.split} papers to evaluate")
    visible = eval_visibility(graph)
    probs = np.zeros((len(centers), graph.num_classes))
    for i, center in enumerate(centers):
        rng = substream(args.seed, "eval", int(center))
        probs[i] = evalens.predict_node_averaged(model, model.params, graph, tables,
                                                 int(center), plan, args.patches, rng, visible)
    preds = probs.argmax(axis=1)
    labels = graph.paper_labels[centers]
    accuracy = float((preds == labels).mean())
    out = data_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalens.write_predictions(out / "predictions.csv", centers, preds.astype(float), probs)
    write_run_manifest(out, _manifest(args, "eval-node", {"patches": args.patches, "split": args.split},
                                      [out / "predictions.csv"], started))
    print(f"eval-node: accuracy {accuracy:.4f} over {len(centers)} {args.split} papers")
    return 0


def cmd_eval_mol(args) -> int:
    started = _now(args)
    mols = molgraph.load_dataset(data_root(args.data))
    splits = train.mol_split(len(mols))
    ids = splits[args.split]
    if args.limit:
        ids = ids[: args.limit]
    main_model = train.load_mol_checkpoint(data_root(args.checkpoint))
    main_pred = evalens.MolPredictor(main_model)
    fallback_pred = None
    if args.fallback:
        fallback_pred = evalens.MolPredictor(train.load_mol_checkpoint(data_root(args.fallback)))

    preds = np.empty(len(ids))
    for row, i in enumerate(ids):
        mol = mols[int(i)]
        if fallback_pred is not None:
            preds[row] = evalens.predict_with_fallback(main_pred, fallback_pred, mol, molecule_id=int(i))
        else:
            if main_pred.with_positions and mol.coords is None:
                raise InputError(f"molecule {int(i)} has no conformer; supply --fallback")
            preds[row] = evalens.clip_gap(main_pred.predict(mol), molecule_id=int(i))
    targets = np.array([mols[int(i)].target for i in ids], dtype=np.float64)
    known = ~np.isnan(targets.astype(np.float64))
    mae = float(np.abs(preds[known] - targets[known]).mean()) if known.any() else float("nan")
    out = data_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalens.write_predictions(out / "predictions.csv", ids, preds)
    write_run_manifest(out, _manifest(args, "eval-mol", {"split": args.split}, [out / "predictions.csv"], started))
    print(f"eval-mol: MAE {mae:.4f} over {len(ids)} {args.split} molecules")
    return 0


def cmd_kfold(args) -> int:
    started = _now(args)
    out = data_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "node":
        graph = hetgraph.load_graph(data_root(args.graph))
        cfg = _load_train_config(args, train.desk_node_config, train.NodeTrainConfig)
        results = train.kfold_train_node(graph, cfg, args.k, args.seeds_per_fold, args.seed, out_dir=out)
        metrics = [r.best_metric for (_key, _held, r) in results]
        summary = {"members": len(results), "mean_heldout_accuracy": float(np.mean(metrics))}
        print(f"kfold: {len(results)} members, mean held-out accuracy {summary['mean_heldout_accuracy']:.4f}")
    else:
        mols = molgraph.load_dataset(data_root(args.data))
        cfg = _load_train_config(args, train.desk_mol_config, train.MolTrainConfig)
        splits = train.mol_split(len(mols))
        assignment = evalens.kfold_split(splits["valid"], args.k, args.seed)
        results = []
        for fold in range(args.k):
            for s in range(args.seeds_per_fold):
                held = assignment.ids[assignment.fold_index == fold]
                absorbed = assignment.ids[assignment.fold_index != fold]
                member_train = np.concatenate([splits["train"], absorbed])
                member_seed = derive_seed(args.seed, "fold", fold, "member", s)
                result = train.train_mol(mols, cfg, member_seed,
                                         train_ids=member_train, val_ids=held)
                train.save_mol_checkpoint(out / f"fold{fold}_seed{s}", result)
                results.append(result.best_metric)
        summary = {"members": len(results), "mean_heldout_mae": float(np.mean(results))}
        print(f"kfold: {len(results)} members, mean held-out MAE {summary['mean_heldout_mae']:.4f}")
    write_run_manifest(out, _manifest(args, "kfold", summary, [out], started))
    return 0


def cmd_ensemble(args) -> int:
    started = _now(args)
    manifest_path = data_root(args.manifest)
    member_files = [line.strip() for line in Path(manifest_path).read_text().splitlines() if line.strip()]
    if not member_files:
        raise InputError(f"ensemble manifest {manifest_path} lists no member files")
    ids_ref = None
    values, probs = [], []
    for f in member_files:
        ids, vals, pr = evalens.read_predictions(data_root(f))
        if ids_ref is None:
            ids_ref = ids
        elif not np.array_equal(ids, ids_ref):
            raise InputError(f"member {f} covers different ids")
        values.append(vals)
        probs.append(pr)
    out = data_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if probs[0] is not None:
        mean_probs = evalens.ensemble(probs)
        final = mean_probs.argmax(axis=1).astype(float)
        evalens.write_predictions(out / "predictions.csv", ids_ref, final, mean_probs)
    else:
        final = evalens.ensemble(values)
        if args.clip:
            final = evalens.clip_gap(final)
        evalens.write_predictions(out / "predictions.csv", ids_ref, final)
    write_run_manifest(out, _manifest(args, "ensemble", {"members": len(member_files)},
                                      [out / "predictions.csv"], started))
    print(f"ensemble: {len(member_files)} members -> {out / 'predictions.csv'}")
    return 0


def cmd_bench_sampler(args) -> int:
    graph = hetgraph.load_graph(data_root(args.graph))
    plan = SamplingPlan.load(data_root(args.plan)) if args.plan else SamplingPlan()
    stats = bench.bench_sampler(graph, plan, args.seconds, args.seed)
    print(f"patches_per_sec,{stats['patches_per_sec']:.2f}")
    print(f"patches,{stats['patches']}")
    print(f"mean_nodes,{stats['mean_nodes']:.2f}")
    print(f"mean_edges,{stats['mean_edges']:.2f}")
    for i, count in enumerate(stats["hist_counts"]):
        lo, hi = stats["hist_edges"][i], stats["hist_edges"][i + 1]
        print(f"hist_nodes,{lo:.0f},{hi:.0f},{count}")
    return 0


def cmd_bench_kernels(args) -> int:
    rows = bench.bench_kernels(size=args.size, repeats=args.repeats, seed=args.seed)
    print("kernel,path,seconds")
    for kernel, path, seconds in rows:
        print(f"{kernel},{path},{seconds:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import model_gradchecks

    worst = model_gradchecks(seed=args.seed)
    ok = True
    for family, err in worst.items():
        print(f"gradcheck,{family},{err:.3e}")
        ok = ok and err <= 1e-4
    return 0 if ok else 4


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchforge", description=__doc__)
    parser.add_argument("--determinism", action="store_true",
                        help="zero manifest timestamps so reruns are byte-identical")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("synth-mag", cmd_synth_mag, help="generate a synthetic citation heterograph")
    p.add_argument("--papers", type=int, default=2000)
    p.add_argument("--authors", type=int, default=600)
    p.add_argument("--institutions", type=int, default=50)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--p-in", type=float, default=0.9)
    p.add_argument("--labelled-fraction", type=float, default=0.5)
    p.add_argument("--duplicate-pairs", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("synth-mol", cmd_synth_mol, help="generate a synthetic molecule dataset")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--min-size", type=int, default=4)
    p.add_argument("--max-size", type=int, default=14)
    p.add_argument("--conformer-fraction", type=float, default=0.999)
    p.add_argument("--out", required=True)

    p = add("fit-pca", cmd_fit_pca, help="fit and store the paper-feature PCA")
    p.add_argument("--graph", required=True)
    p.add_argument("--dim", type=int, default=0)
    p.add_argument("--out", required=True)

    for name, fn in (("train-node", cmd_train_node), ("train-mol", cmd_train_mol)):
        p = add(name, fn, help=f"{name.replace('-', ' ')} on a stored dataset")
        if name == "train-node":
            p.add_argument("--graph", required=True)
        else:
            p.add_argument("--data", required=True)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--steps", type=int)
        p.add_argument("--desk", action="store_true", default=True,
                       help="start from the desk-scale configuration (default)")
        p.add_argument("--paper-scale", dest="desk", action="store_false",
                       help="start from the paper-scale configuration")
        p.add_argument("--out", required=True)

    p = add("eval-node", cmd_eval_node, help="patch-averaged node evaluation")
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="valid")
    p.add_argument("--patches", type=int, default=50)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("eval-mol", cmd_eval_mol, help="molecular evaluation with clipping/fallback")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fallback", help="non-conformer checkpoint for molecules without coordinates")
    p.add_argument("--split", choices=("valid", "test"), default="valid")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("kfold", cmd_kfold, help="k-fold train-on-validation members")
    p.add_argument("--task", choices=("node", "mol"), required=True)
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seeds-per-fold", type=int, default=2)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--steps", type=int)
    p.add_argument("--desk", action="store_true", default=True)
    p.add_argument("--paper-scale", dest="desk", action="store_false")
    p.add_argument("--out", required=True)

    p = add("ensemble", cmd_ensemble, help="average member prediction files")
    p.add_argument("--manifest", required=True, help="text file listing member prediction CSVs")
    p.add_argument("--clip", action="store_true", help="clip the ensembled regression output to [0, 20]")
    p.add_argument("--out", required=True)

    p = add("bench-sampler", cmd_bench_sampler, help="patch sampling throughput")
    p.add_argument("--graph", required=True)
    p.add_argument("--plan", help="sampling plan file (key = value)")
    p.add_argument("--seconds", type=float, default=5.0)

    p = add("bench-kernels", cmd_bench_kernels, help="numba vs numpy kernel timings")
    p.add_argument("--size", type=int, default=20000)
    p.add_argument("--repeats", type=int, default=20)

    add("gradcheck", cmd_gradcheck, help="finite-difference checks of both model families")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        category = getattr(exc, "category", "io")
        print(f"error: {category}: {exc}", file=sys.stderr)
        return 2
    except EvaluationError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 3
    except PatchforgeError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
