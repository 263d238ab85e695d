#!/usr/bin/env python3
"""
Command-line runner for the fair federated graph learning simulator
"""
import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import dump_config, parse_config, settings, with_overrides
from errors import BinaryViolation, FormatError, SimulatorError
from federation import (
    GlobalView,
    Hyperparams,
    ServerState,
    build_clients,
    evaluate_round,
    run_federation,
    run_fedavg_baseline,
)
from graph import (
    Graph,
    edge_group_stats,
    generate_sbm,
    partition_ego_networks,
    partition_summary,
    read_graph_csv,
    remove_isolated_nodes,
    split_masks,
)
from metrics import bundle_from_values, metric_bundle
from nn import glorot_init, normalize_adjacency, save_checkpoint
from schemas import METRIC_CSV_FIELDS, ExperimentConfig, LoadSummary, MetricBundle, SweepResult
from theory import theorem_sweep
from utils import JsonlWriter, atomic_write_text, csv_text, derive_seed

logger = logging.getLogger(__name__)

METRICS_HEADER = ("split", "scope") + METRIC_CSV_FIELDS
SWEEP_HEADER = ("d", "seed_count", "mean_abs_rho_empirical", "rho_closed_form")
AUDIT_COLUMNS = ["node_id", "score", "label", "sensitive"]


def configure_logging(level: str = settings.LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def output_dir(cfg: ExperimentConfig) -> Path:
    """`[experiment] output_dir`, else one directory per mode under RESULTS_DIR."""
    if cfg.experiment.output_dir:
        return Path(cfg.experiment.output_dir)
    return Path(settings.RESULTS_DIR) / cfg.experiment.mode


# Dataset loading
def load_dataset(cfg: ExperimentConfig) -> Tuple[Graph, LoadSummary]:
    """Graph from CSV files or the SBM block, with isolated nodes removed."""
    duplicates = loops = 0
    if cfg.data.source == "files":
        graph, stats = read_graph_csv(cfg.data.nodes, cfg.data.edges)
        duplicates, loops = stats.duplicate_edges, stats.self_loops_rejected
    else:
        graph = generate_sbm(cfg.sbm)

    cleaned, kept = remove_isolated_nodes(graph)
    summary = LoadSummary(
        num_nodes=cleaned.num_nodes,
        num_edges=cleaned.num_edges,
        gbs=edge_group_stats(cleaned).gbs,
        group_sizes=cleaned.group_sizes,
        isolated_removed=graph.num_nodes - len(kept),
        duplicate_edges=duplicates,
        self_loops_rejected=loops,
    )
    return cleaned, summary


def print_load_summary(summary: LoadSummary) -> None:
    n0, n1 = summary.group_sizes
    print("📊 Dataset loaded")
    print(f"   Nodes: {summary.num_nodes:,}  Edges: {summary.num_edges:,}  GBS: {summary.gbs:.4f}")
    print(f"   Groups: s=0 {n0:,} / s=1 {n1:,}")
    if summary.isolated_removed:
        print(f"   🧹 Removed {summary.isolated_removed} isolated nodes")
    if summary.duplicate_edges:
        print(f"   🧹 Dropped {summary.duplicate_edges} duplicate edge rows")
    if summary.self_loops_rejected:
        print(f"   🧹 Rejected {summary.self_loops_rejected} self-loop rows")


# Metrics table
def _spread_row(bundles: Sequence[MetricBundle]) -> Tuple[MetricBundle, MetricBundle]:
    """Mean and population std across splits; the mean row's trade-offs come from the mean metrics."""
    fields = ("accuracy", "auc", "delta_sp", "delta_eo")
    values = {name: np.array([getattr(b, name) for b in bundles]) for name in fields}
    mean = bundle_from_values(*(float(values[name].mean()) for name in fields), flags=[])

    def std(name: str) -> float:
        column = np.array([getattr(b, name) for b in bundles])
        return math.inf if np.isinf(column).any() else float(column.std())

    spread = MetricBundle(
        **{name: float(values[name].std()) for name in fields},
        tradeoff_acc=std("tradeoff_acc"),
        tradeoff_auc=std("tradeoff_auc"),
        flags=[],
    )
    return mean, spread


def metrics_table(results: Dict[str, List[MetricBundle]]) -> str:
    """One row per (split, scope), then `mean` and `std` rows for each scope."""
    rows = []
    n_splits = len(next(iter(results.values())))
    for split in range(n_splits):
        for scope, bundles in results.items():
            rows.append([split, scope] + bundles[split].csv_values())
    for scope, bundles in results.items():
        mean, spread = _spread_row(bundles)
        rows.append(["mean", scope] + mean.csv_values())
        rows.append(["std", scope] + spread.csv_values())
    return csv_text(METRICS_HEADER, rows)


# Modes
def run_training(cfg: ExperimentConfig, out: Path) -> None:
    """federate / fedavg_baseline over `n_splits` seeded node splits."""
    graph, summary = load_dataset(cfg)
    print_load_summary(summary)

    parts = partition_ego_networks(
        graph, cfg.partition.k_clients, cfg.partition.hops, cfg.partition.seed,
        max_retries=cfg.partition.max_retries,
    )
    part_summary = partition_summary(parts, graph.num_nodes)
    atomic_write_text(out / "partition.json", part_summary.model_dump_json(indent=2) + "\n")
    print(f"🧩 {len(parts)} clients, {part_summary.covered_nodes:,} nodes covered, "
          f"overlap {part_summary.overlap_fraction:.2%}")
    for client in part_summary.clients:
        logger.info(
            "client %d: center=%d nodes=%d edges=%d sparsity=%.4f gbs=%.4f",
            client.client_id, client.center, client.num_nodes, client.num_edges, client.sparsity, client.gbs,
        )

    sparse = cfg.model.sparse or graph.num_nodes > settings.DENSE_NODE_LIMIT
    adj = normalize_adjacency(graph, sparse=sparse)
    hyper = Hyperparams.from_config(cfg, max_workers=settings.MAX_WORKERS)
    runner = run_fedavg_baseline if cfg.experiment.mode == "fedavg_baseline" else run_federation
    fractions = (cfg.eval.train_fraction, cfg.eval.val_fraction, cfg.eval.test_fraction)

    rounds = JsonlWriter(out / "rounds.jsonl")
    replay = JsonlWriter(out / "replay.jsonl") if cfg.experiment.record else None
    if replay is None:
        (out / "replay.jsonl").unlink(missing_ok=True)
    results: Dict[str, List[MetricBundle]] = {"global": [], "local": []}

    for split in range(cfg.experiment.n_splits):
        split_seed = cfg.experiment.seed + split
        train, val, test = split_masks(graph.num_nodes, fractions, split_seed)
        init = glorot_init(graph.feature_dim, cfg.model.hidden_dim, derive_seed(split_seed, 0))
        clients = build_clients(parts, train, val, test, init, hyper.lr, sparse=sparse)
        server = ServerState(params=init, hyper=hyper, seed=derive_seed(split_seed, 1))
        view = GlobalView(graph=graph, adj=adj, train_mask=train, val_mask=val, test_mask=test)

        reports = runner(
            server, clients, view, split=split,
            on_round=lambda report: rounds.append(report.model_dump_json()),
            recorder=replay.append_json if replay is not None else None,
        )
        if reports:
            global_metrics, local_metrics = reports[-1].global_metrics, reports[-1].local_metrics
        else:
            global_metrics, local_metrics, _ = evaluate_round(server.params, clients, view, server.hyper)
        results["global"].append(global_metrics)
        results["local"].append(local_metrics)
        if split == 0:
            save_checkpoint(out / "model.ckpt", server.params)

        print(f"✅ Split {split}: {len(reports)} rounds, "
              f"global acc {global_metrics.accuracy:.2%}, dSP {global_metrics.delta_sp:.4f}, "
              f"dEO {global_metrics.delta_eo:.4f}")

    atomic_write_text(out / "metrics.csv", metrics_table(results))


def sweep_table(result: SweepResult) -> str:
    rows = [
        [f"{row.d:.2f}", row.seed_count, f"{row.mean_abs_rho_empirical:.6f}", f"{row.rho_closed_form:.6f}"]
        for row in result.rows
    ]
    return csv_text(SWEEP_HEADER, rows)


def run_theory(cfg: ExperimentConfig, out: Path) -> None:
    seeds = [cfg.sbm.seed + i for i in range(cfg.theory.n_seeds)]
    result = theorem_sweep(cfg.sbm, cfg.theory.d_values, seeds, form=cfg.theory.closed_form)
    atomic_write_text(out / "sweep.csv", sweep_table(result))
    print(f"📐 Sweep over {len(result.rows)} values of d, {result.n_seeds} seeds each ({result.closed_form} form)")
    for row in result.rows:
        print(f"   d={row.d:.2f}  mean |rho| = {row.mean_abs_rho_empirical:.4f}  "
              f"closed form = {row.rho_closed_form:.4f}")


def read_predictions(path: str) -> pd.DataFrame:
    """Load `node_id,score,label,sensitive`; row numbers count the header as line 1."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise FormatError(f"cannot read predictions file: {exc}") from exc
    if list(frame.columns) != AUDIT_COLUMNS:
        raise FormatError("predictions header must be " + ",".join(AUDIT_COLUMNS), row=1)
    for column in AUDIT_COLUMNS:
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = np.flatnonzero(values.isna().to_numpy())
        if len(bad):
            raise FormatError(f"non-numeric value in column `{column}`", row=int(bad[0]) + 2)
        frame[column] = values
    for column in ("label", "sensitive"):
        bad = np.flatnonzero(~frame[column].isin((0, 1)).to_numpy())
        if len(bad):
            raise BinaryViolation(f"`{column}` must be 0 or 1", row=int(bad[0]) + 2)
    bad = np.flatnonzero(~frame["score"].between(0.0, 1.0).to_numpy())
    if len(bad):
        raise FormatError("score must lie in [0, 1]", row=int(bad[0]) + 2)
    return frame


def run_audit(cfg: ExperimentConfig, out: Path) -> None:
    """Metrics of an existing set of predictions; no training."""
    frame = read_predictions(cfg.audit.predictions)
    scores = frame["score"].to_numpy(dtype=np.float64)
    bundle = metric_bundle(
        scores,
        frame["label"].to_numpy(dtype=np.int64),
        frame["sensitive"].to_numpy(dtype=np.int64),
        np.ones(len(frame), dtype=bool),
    )
    atomic_write_text(out / "metrics.csv", csv_text(METRICS_HEADER, [[0, "audit"] + bundle.csv_values()]))
    print(f"🔎 Audited {len(frame):,} predictions")
    print(f"   acc {bundle.accuracy:.2%}  AUC {bundle.auc:.4f}  dSP {bundle.delta_sp:.4f}  dEO {bundle.delta_eo:.4f}")
    if bundle.flags:
        print(f"   ⚠️ Flags: {', '.join(bundle.flags)}")


MODES = {
    "federate": run_training,
    "fedavg_baseline": run_training,
    "theory_sweep": run_theory,
    "audit": run_audit,
}


def run(cfg: ExperimentConfig) -> Path:
    """Execute the configured mode and write its artifacts; returns the output directory."""
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "resolved_config.txt", dump_config(cfg))
    print(f"🚀 Running mode `{cfg.experiment.mode}` with seed {cfg.experiment.seed}")
    MODES[cfg.experiment.mode](cfg, out)
    print(f"📁 Artifacts written to {out}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Fair federated graph learning simulator")
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    parser.add_argument("--out", help="output directory (overrides [experiment] output_dir)")
    parser.add_argument("--seed-override", type=int, help="replaces [experiment] seed")
    parser.add_argument("--mode", choices=sorted(MODES), help="replaces [experiment] mode")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        cfg = with_overrides(
            parse_config(args.config), seed=args.seed_override, mode=args.mode, output_dir=args.out
        )
        if args.print_config:
            print(dump_config(cfg), end="")
            return 0
        run(cfg)
    except SimulatorError as exc:
        print(f"❌ {type(exc).__name__}: {exc.detail}")
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
