"""Experiment runner: config files, manifests, metrics emission, MACs.

Config files are plain ``key = value`` lines (``#`` starts a comment).  Every
run writes ``metrics.csv``, ``manifest.json``, ``final_mask.txt`` and
parameter checkpoints into its output directory; re-running a manifest
reproduces ``metrics.csv`` byte for byte.
"""

from __future__ import annotations

import datetime
import json
import logging
import os
import subprocess
from dataclasses import dataclass

import numpy as np

from . import baselines
from .engine import (
    GstConfig,
    MetricsRow,
    run_fixed_mask,
    run_gst,
    train_dense,
)
from .graph import (
    DatasetError,
    generate_sbm,
    graph_sparsity,
    load_dataset,
    normalized_adjacency,
)
from .nn import accuracy, gcn_forward, masker_scores, save_params
from .spectral import spectral_preservation

log = logging.getLogger(__name__)


class ConfigError(Exception):
    """Raised for unparseable or inconsistent run configuration."""


# the SBM benchmark task used by the regression fixtures and the scaled
# performance checks: two planted communities, informative but noisy features
SBM_BENCHMARK = {
    "sbm_blocks": 2,
    "sbm_nodes_per_block": 100,
    "sbm_p_in": 0.1,
    "sbm_p_out": 0.01,
    "sbm_feat_dim": 100,
    "sbm_feat_shift": 1.0,
}

_GST_FIELDS = {
    "anchor_epochs": int,
    "sparse_epochs": int,
    "update_interval": int,
    "target_sparsity": float,
    "swap_init_ratio": float,
    "swap_decay": float,
    "spectral_k": int,
    "beta_semantic": float,
    "beta_topo": float,
    "lr": float,
    "seed": int,
    "criterion_norm": str,
    "kl_node_set": str,
    "hidden_dim": int,
    "masker_hidden": int,
    "eps_lambda": float,
}

_RUN_FIELDS = {
    "pipeline": (str, "gst"),  # gst | baseline | dense
    "dataset": (str, "sbm"),  # "sbm" or a dataset directory path
    "sbm_seed": (int, None),  # defaults to seed
    "sbm_blocks": (int, 2),
    "sbm_nodes_per_block": (int, 100),
    "sbm_p_in": (float, 0.1),
    "sbm_p_out": (float, 0.01),
    "sbm_feat_dim": (int, 100),
    "sbm_feat_shift": (float, 1.0),
    "baseline": (str, "random"),  # random | local_similarity
    "baseline_seed": (int, None),  # defaults to seed
    "perturb_fraction": (float, 0.0),
    "perturb_seed": (int, None),  # defaults to seed
    "perturb_stage": (str, "pre"),  # pre | post
    "eval_spectral": (bool, True),
    "spectral_matrix": (str, "laplacian"),  # laplacian | adjacency
    "spectral_eval_k": (int, 200),
    "out_dir": (str, "runs/out"),
}


def _coerce(key, kind, text):
    try:
        if kind is bool:
            lowered = str(text).strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        return kind(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def parse_config_file(path):
    """Read a key=value config file into a raw string dict."""
    raw = {}
    try:
        lines = open(path).read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw):
    """Apply defaults and types to a raw string/typed dict; validate keys."""
    config = {}
    defaults = GstConfig()
    for key, kind in _GST_FIELDS.items():
        config[key] = getattr(defaults, key)
    for key, (kind, default) in _RUN_FIELDS.items():
        config[key] = default
    for key, value in raw.items():
        if key in _GST_FIELDS:
            kind = _GST_FIELDS[key]
        elif key in _RUN_FIELDS:
            kind = _RUN_FIELDS[key][0]
        else:
            raise ConfigError(f"unknown config key {key!r}")
        config[key] = _coerce(key, kind, value) if isinstance(value, str) else value
    for key in ("sbm_seed", "baseline_seed", "perturb_seed"):
        if config[key] is None:
            config[key] = config["seed"]
    if config["pipeline"] not in ("gst", "baseline", "dense"):
        raise ConfigError(f"pipeline must be gst|baseline|dense, got {config['pipeline']!r}")
    if config["baseline"] not in ("random", "local_similarity"):
        raise ConfigError(f"unknown baseline {config['baseline']!r}")
    if config["perturb_stage"] not in ("pre", "post"):
        raise ConfigError(f"perturb_stage must be pre|post, got {config['perturb_stage']!r}")
    if config["spectral_matrix"] not in ("laplacian", "adjacency"):
        raise ConfigError(f"unknown spectral_matrix {config['spectral_matrix']!r}")
    return config


def gst_config_from(config):
    try:
        return GstConfig(**{k: config[k] for k in _GST_FIELDS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_dataset(config):
    """Materialize the configured dataset (SBM sample or on-disk directory)."""
    if config["dataset"] == "sbm":
        return generate_sbm(
            seed=config["sbm_seed"],
            num_blocks=config["sbm_blocks"],
            nodes_per_block=config["sbm_nodes_per_block"],
            p_in=config["sbm_p_in"],
            p_out=config["sbm_p_out"],
            feat_dim=config["sbm_feat_dim"],
            feat_shift=config["sbm_feat_shift"],
        )
    return load_dataset(config["dataset"])


def dataset_id(config):
    if config["dataset"] == "sbm":
        return (
            "sbm(seed={sbm_seed},blocks={sbm_blocks},nodes={sbm_nodes_per_block},"
            "p_in={sbm_p_in},p_out={sbm_p_out},feat_dim={sbm_feat_dim},"
            "feat_shift={sbm_feat_shift})"
        ).format(**config)
    return config["dataset"]


def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            cwd=os.path.dirname(os.path.abspath(__file__)),
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


@dataclass
class MacsEstimate:
    """Inference multiply-accumulate estimate, split by kernel family."""

    total: int
    aggregation: int
    update: int


def macs_estimate(graph, mask, layers, feat_dim, hidden, classes):
    """MACs for sparse aggregation plus dense feature updates.

    Aggregation walks every active directed entry plus a self-loop per node
    at each layer's input width; the update term is the usual dense
    N * (D*H + H*C) product cost.
    """
    if min(layers, feat_dim, hidden, classes) <= 0:
        raise ValueError("layer count and dimensions must be positive")
    n = graph.num_nodes
    active_directed = 2 * int(np.asarray(mask, dtype=bool).sum())
    dims = [feat_dim] + [hidden] * (layers - 1)
    aggregation = sum((active_directed + n) * d for d in dims)
    update = n * (feat_dim * hidden + hidden * classes)
    return MacsEstimate(total=aggregation + update, aggregation=aggregation, update=update)


# ---------------------------------------------------------------------------
# metrics + manifest files

METRICS_HEADER = [
    "phase",
    "epoch",
    "interval",
    "train_acc",
    "val_acc",
    "test_acc",
    "loss",
    "sparsity",
    "swap_count",
    "spectral_preservation",
    "macs_estimate",
]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for r in rows:
            fh.write(
                ",".join(
                    _fmt(v)
                    for v in (
                        r.phase,
                        r.epoch,
                        r.interval,
                        r.train_acc,
                        r.val_acc,
                        r.test_acc,
                        r.loss,
                        r.sparsity,
                        r.swap_count,
                        r.spectral_preservation,
                        r.macs_estimate,
                    )
                )
                + "\n"
            )


def write_mask(path, mask):
    with open(path, "w") as fh:
        for bit in np.asarray(mask, dtype=bool):
            fh.write("1\n" if bit else "0\n")


def read_mask(path):
    bits = [line.strip() for line in open(path) if line.strip()]
    return np.array([b == "1" for b in bits], dtype=bool)


def eval_spectral(graph, mask, k=None, matrix_kind="laplacian", sidecar_path=None):
    """Preservation ratio of the masked topology against the full graph.

    Compares unit-weight spectra (pure topology).  Optionally writes the
    per-eigenvalue relative errors to a sidecar CSV for plotting.
    """
    ones = np.ones(graph.num_edges)
    full_mask = np.ones(graph.num_edges, dtype=bool)
    report = spectral_preservation(
        graph, ones, full_mask, ones, np.asarray(mask, dtype=bool),
        k=k, matrix_kind=matrix_kind,
    )
    if sidecar_path is not None:
        with open(sidecar_path, "w") as fh:
            fh.write("index,value_full,value_sparse,relative_error\n")
            for i in range(report.k):
                fh.write(
                    f"{i},{report.values_full[i]!r},{report.values_sparse[i]!r},"
                    f"{report.relative_errors[i]!r}\n"
                )
    return report


def run_experiment(config, out_dir=None):
    """Execute one configured run and write its artifact files.

    ``config`` is a resolved dict (see :func:`resolve_config`) or a raw dict
    of overrides.  Returns the manifest dict.
    """
    config = resolve_config(dict(config))
    out = out_dir or config["out_dir"]
    os.makedirs(out, exist_ok=True)
    cfg = gst_config_from(config)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()

    graph, features, split = load_run_dataset(config)
    if config["perturb_fraction"] > 0 and config["perturb_stage"] == "pre":
        graph = baselines.perturb_edges(
            graph, config["perturb_fraction"], config["perturb_seed"]
        )

    pipeline = config["pipeline"]
    rows = []
    metadata = {
        "spectral_matrix": config["spectral_matrix"],
        "spectral_normalization": "unnormalized",
    }
    if pipeline == "dense":
        dense = train_dense(graph, features, split, cfg)
        rows = list(dense.rows)
        mask = np.ones(graph.num_edges, dtype=bool)
        theta, psi = dense.theta, dense.psi
        best = {"epoch": dense.best_epoch, "val": dense.best_val, "test": dense.best_test}
        anchor = None
    else:
        if pipeline == "gst":
            result = run_gst(graph, features, split, cfg)
        else:
            if config["baseline"] == "random":
                base_mask = baselines.random_sparsify(
                    graph, cfg.target_sparsity, config["baseline_seed"]
                )
            else:
                base_mask = baselines.local_similarity_sparsify(graph, cfg.target_sparsity)
            result = run_fixed_mask(graph, features, split, cfg, base_mask)
        rows = list(result.rows)
        mask = result.mask
        theta, psi = result.theta, result.psi
        best = {
            "epoch": result.best_epoch,
            "val": result.best_val,
            "test": result.best_test,
        }
        anchor = result.anchor

    eval_rows = []
    if pipeline != "dense" and config["eval_spectral"]:
        report = eval_spectral(
            graph,
            mask,
            k=config["spectral_eval_k"],
            matrix_kind=config["spectral_matrix"],
            sidecar_path=os.path.join(out, "eigenvalue_errors.csv"),
        )
        macs = macs_estimate(
            graph,
            mask,
            layers=2,
            feat_dim=features.shape[1],
            hidden=cfg.hidden_dim,
            classes=split.num_classes,
        )
        eval_rows.append(
            MetricsRow(
                phase="eval",
                epoch=best["epoch"],
                interval=0,
                train_acc=None,
                val_acc=best["val"],
                test_acc=best["test"],
                loss=None,
                sparsity=graph_sparsity(mask),
                swap_count=0,
                spectral_preservation=report.ratio,
                macs_estimate=float(macs.total),
            )
        )
        metadata["preservation_clamped"] = report.clamped

    if config["perturb_fraction"] > 0 and config["perturb_stage"] == "post":
        eval_rows.append(
            _post_perturbation_eval(config, cfg, graph, features, split, mask, theta, psi)
        )

    rows = rows + eval_rows
    write_metrics(os.path.join(out, "metrics.csv"), rows)
    write_mask(os.path.join(out, "final_mask.txt"), mask)
    save_params(
        os.path.join(out, "final_params.bin"),
        {"w1": theta.w1, "w2": theta.w2, "m1": psi.m1, "m2": psi.m2},
    )
    if anchor is not None:
        save_params(
            os.path.join(out, "anchor_params.bin"),
            {
                "w1": anchor.theta.w1,
                "w2": anchor.theta.w2,
                "m1": anchor.psi.m1,
                "m2": anchor.psi.m2,
                "scores": anchor.scores,
            },
        )

    manifest = {
        "config": {k: config[k] for k in sorted(config)},
        "dataset_id": dataset_id(config),
        "git_describe": git_describe(),
        "seed": config["seed"],
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": {
            "metrics": os.path.join(out, "metrics.csv"),
            "final_mask": os.path.join(out, "final_mask.txt"),
            "final_params": os.path.join(out, "final_params.bin"),
        },
        "metadata": metadata,
        "best": best,
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _post_perturbation_eval(config, cfg, graph, features, split, mask, theta, psi):
    """Evaluate the frozen model after relocating edges of the sparse graph."""
    active = graph.edges[np.asarray(mask, dtype=bool)]
    sub = graph.__class__.from_canonical_edges(graph.num_nodes, active)
    perturbed = baselines.perturb_edges(
        sub, config["perturb_fraction"], config["perturb_seed"]
    )
    scores = masker_scores(psi, features, perturbed)
    z, _ = gcn_forward(theta, normalized_adjacency(perturbed, scores), features)
    return MetricsRow(
        phase="eval",
        epoch=0,
        interval=0,
        train_acc=accuracy(z, split, "train"),
        val_acc=accuracy(z, split, "val"),
        test_acc=accuracy(z, split, "test"),
        loss=None,
        sparsity=graph_sparsity(mask),
        swap_count=0,
    )


def load_manifest(path):
    with open(path) as fh:
        return json.load(fh)
