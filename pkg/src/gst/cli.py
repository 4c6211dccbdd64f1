"""Command-line experiment runner.

Subcommands: ``gen-synth``, ``train``, ``sweep``, ``eval-spectral``,
``perturb``.  Every config-file key is also available as a ``--flag`` and
flags override the file.  Exit codes: 0 success, 2 config error, 3 numeric
failure, 4 dataset error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import harness
from .baselines import perturb_edges
from .engine import find_extreme_sparsity
from .graph import DatasetError, generate_sbm, save_dataset
from .harness import (
    ConfigError,
    gst_config_from,
    load_run_dataset,
    parse_config_file,
    resolve_config,
)
from .nn import NumericError
from .spectral import EigenSolverError

_ALL_KEYS = sorted(set(harness._GST_FIELDS) | set(harness._RUN_FIELDS))


def _add_config_flags(parser):
    parser.add_argument("--config", help="key = value config file")
    for key in _ALL_KEYS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="V")


def _gather_config(args):
    raw = parse_config_file(args.config) if args.config else {}
    for key in _ALL_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return resolve_config(raw)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gst",
        description="Dynamic prune-and-regrow graph sparsification for GNN training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic SBM dataset directory")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="run the configured pipeline (gst|baseline|dense)")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="scan a sparsity grid for the extreme sparsity")
    _add_config_flags(p)
    p.add_argument("--grid", required=True, help="comma-separated sparsities, ascending")
    p.add_argument("--eps", type=float, default=0.01, help="accuracy tolerance")

    p = sub.add_parser("eval-spectral", help="preservation ratio of a saved edge mask")
    _add_config_flags(p)
    p.add_argument("--mask", required=True, help="final_mask.txt from a run")
    p.add_argument("--sidecar", help="per-eigenvalue error CSV path")

    p = sub.add_parser("perturb", help="write an edge-perturbed copy of the dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    return parser


def _cmd_gen_synth(args):
    config = _gather_config(args)
    graph, features, split = generate_sbm(
        seed=config["sbm_seed"],
        num_blocks=config["sbm_blocks"],
        nodes_per_block=config["sbm_nodes_per_block"],
        p_in=config["sbm_p_in"],
        p_out=config["sbm_p_out"],
        feat_dim=config["sbm_feat_dim"],
        feat_shift=config["sbm_feat_shift"],
    )
    save_dataset(args.out, graph, features, split)
    print(f"wrote {graph.num_nodes} nodes / {graph.num_edges} edges to {args.out}")


def _cmd_train(args):
    config = _gather_config(args)
    manifest = harness.run_experiment(config)
    best = manifest["best"]
    print(
        f"done: pipeline={config['pipeline']} best_epoch={best['epoch']} "
        f"val={best['val']:.4f} test={best['test']:.4f} -> {config['out_dir']}"
    )


def _cmd_sweep(args):
    config = _gather_config(args)
    try:
        grid = [float(tok) for tok in args.grid.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --grid: {exc}") from exc
    cfg = gst_config_from(config)
    graph, features, split = load_run_dataset(config)
    try:
        result = find_extreme_sparsity(graph, features, split, cfg, args.eps, grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    os.makedirs(config["out_dir"], exist_ok=True)
    payload = {
        "extreme_sparsity": result.extreme_sparsity,
        "dense_test_acc": result.dense_test_acc,
        "eps": args.eps,
        "points": [
            {"sparsity": s, "test_acc": acc, "qualified": ok}
            for s, acc, ok in result.points
        ],
    }
    with open(os.path.join(config["out_dir"], "sweep.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"extreme sparsity: {result.extreme_sparsity}")


def _cmd_eval_spectral(args):
    config = _gather_config(args)
    graph, _, _ = load_run_dataset(config)
    mask = harness.read_mask(args.mask)
    if mask.size != graph.num_edges:
        raise ConfigError(
            f"mask has {mask.size} bits but the graph has {graph.num_edges} edges"
        )
    report = harness.eval_spectral(
        graph,
        mask,
        k=config["spectral_eval_k"],
        matrix_kind=config["spectral_matrix"],
        sidecar_path=args.sidecar,
    )
    print(
        f"preservation ratio: {report.ratio!r} "
        f"(k={report.k}, matrix={report.matrix_kind}, clamped={report.clamped})"
    )


def _cmd_perturb(args):
    config = _gather_config(args)
    graph, features, split = load_run_dataset(config)
    perturbed = perturb_edges(graph, config["perturb_fraction"], config["perturb_seed"])
    save_dataset(args.out, perturbed, features, split)
    print(
        f"perturbed {config['perturb_fraction']:.0%} of {graph.num_edges} edges "
        f"-> {args.out}"
    )


_COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "eval-spectral": _cmd_eval_spectral,
    "perturb": _cmd_perturb,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, EigenSolverError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
