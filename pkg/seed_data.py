#!/usr/bin/env python3
"""
Seed script to write a demo dataset and matching experiment configs into data/
"""
import sys
from pathlib import Path

import pandas as pd

from errors import SimulatorError
from graph import Graph, edge_group_stats, generate_sbm
from schemas import SbmConfig
from utils import atomic_write_text

DATA_DIR = Path("data")

# Biased two-group graph: mostly intra-group edges, labels follow the group with 20% flips
DEMO_SBM = SbmConfig(
    nodes_per_group=(300, 300),
    p_intra=0.03,
    p_inter=0.004,
    mean_0=[1.0, 0.5, 0.0, 0.0],
    mean_1=[0.0, 0.0, 0.0, 0.0],
    label_rule="by_group_with_flip",
    flip=0.2,
    seed=7,
)

DEMO_CONFIG = """\
# Demo run on the CSV pair written by seed_data.py
[experiment]
mode = {mode}
seed = 0
n_splits = 2
output_dir = results/{mode}

[data]
source = files
nodes = {nodes}
edges = {edges}

[partition]
k_clients = 6
hops = 2

[model]
hidden_dim = 16

[training]
rounds = 10
"""


def create_demo_graph() -> Graph:
    """Deterministic biased SBM graph"""
    return generate_sbm(DEMO_SBM)


def write_demo_csv(graph: Graph, data_dir: Path = DATA_DIR):
    """Write `nodes.csv` (node_id,sensitive,label,f1..fd) and `edges.csv` (src,dst)"""
    nodes = pd.DataFrame(graph.features, columns=[f"f{i + 1}" for i in range(graph.feature_dim)])
    nodes.insert(0, "label", graph.labels)
    nodes.insert(0, "sensitive", graph.sensitive)
    nodes.insert(0, "node_id", range(graph.num_nodes))
    edges = pd.DataFrame(graph.edges, columns=["src", "dst"])

    nodes_path = data_dir / "nodes.csv"
    edges_path = data_dir / "edges.csv"
    atomic_write_text(nodes_path, nodes.to_csv(index=False, float_format="%.6f"))
    atomic_write_text(edges_path, edges.to_csv(index=False))
    return nodes_path, edges_path


def write_demo_configs(nodes_path: Path, edges_path: Path, data_dir: Path = DATA_DIR):
    paths = []
    for mode in ("federate", "fedavg_baseline"):
        path = data_dir / f"demo_{mode}.ini"
        atomic_write_text(path, DEMO_CONFIG.format(mode=mode, nodes=nodes_path, edges=edges_path))
        paths.append(path)
    return paths


def main() -> int:
    """Main seeding function"""
    try:
        print("🌱 Generating demo graph...")
        graph = create_demo_graph()
        n0, n1 = graph.group_sizes

        print("\n💾 Writing CSV files...")
        nodes_path, edges_path = write_demo_csv(graph)

        print("\n⚙️ Writing demo configs...")
        configs = write_demo_configs(nodes_path, edges_path)

        print("\n✅ Demo data written successfully!")
        print(f"   - {graph.num_nodes} nodes ({n0} / {n1} per group) in {nodes_path}")
        print(f"   - {graph.num_edges} edges, GBS {edge_group_stats(graph).gbs:.4f}, in {edges_path}")
        for path in configs:
            print(f"   - Config: {path}")

        print("\n▶️ Try it:")
        print(f"   python main.py --config {configs[0]}")
        return 0

    except SimulatorError as e:
        print(f"❌ Error writing demo data: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
