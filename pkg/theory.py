"""Closed-form vs empirical correlation between one-layer linear GCN embeddings and the sensitive attribute."""
import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from errors import EmptyGroup, UnrealizableD, ZeroSigma
from graph import Graph, edge_group_stats, generate_sbm
from metrics import point_biserial
from nn import normalize_adjacency
from schemas import SbmConfig, SweepResult, SweepRow

logger = logging.getLogger(__name__)

ClosedForm = Literal["lemma", "neighbor_mean"]


@dataclass(frozen=True)
class LemmaInputs:
    n0: int
    n1: int
    mu0: float
    mu1: float
    h_intra: float
    h_inter: float
    sigma_z: float

    def __post_init__(self):
        if self.n0 < 1 or self.n1 < 1:
            raise EmptyGroup("both groups need at least one node")
        if abs(self.h_intra + self.h_inter - 1.0) > 1e-9:
            raise ValueError("h_intra + h_inter must be 1")
        if not self.sigma_z > 0.0:
            raise ZeroSigma("sigma_Z must be positive")


def rho_closed_form(inputs: LemmaInputs, form: ClosedForm = "lemma") -> float:
    """Predicted point-biserial correlation of an embedding column with s.

    `lemma`: (N0 mu0 - N1 mu1)(H_intra - H_inter) sqrt(N0 N1) / (sigma_Z N^2).
    `neighbor_mean`: group means mixed with weights exactly (H_intra, H_inter),
    (mu0 - mu1)(H_intra - H_inter) sqrt(N0 N1) / (sigma_Z N); twice `lemma` when N0 = N1.
    """
    n0, n1 = inputs.n0, inputs.n1
    n = n0 + n1
    gap = inputs.h_intra - inputs.h_inter
    if form == "lemma":
        return (n0 * inputs.mu0 - n1 * inputs.mu1) * gap * math.sqrt(n0 * n1) / (inputs.sigma_z * n * n)
    return (inputs.mu0 - inputs.mu1) * gap * math.sqrt(n0 * n1) / (inputs.sigma_z * n)


def one_layer_embedding(g: Graph, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Z = A X W with the normalized adjacency and linear activation; W defaults to identity."""
    adj = normalize_adjacency(g, sparse=True)
    ax = adj @ g.features
    return ax if weights is None else ax @ weights


def rho_empirical(g: Graph, weights: Optional[np.ndarray] = None, column: int = 0) -> float:
    return point_biserial(one_layer_embedding(g, weights)[:, column], g.sensitive)


def lemma_inputs(g: Graph, z_column: np.ndarray, x_column: np.ndarray) -> LemmaInputs:
    """Lemma inputs measured on a graph: group sizes, input-column group means, edge mix, sigma of Z."""
    stats = edge_group_stats(g)
    n0, n1 = g.group_sizes
    s = g.sensitive
    return LemmaInputs(
        n0=n0,
        n1=n1,
        mu0=float(x_column[s == 0].mean()),
        mu1=float(x_column[s == 1].mean()),
        h_intra=stats.h_intra,
        h_inter=stats.h_inter,
        sigma_z=float(np.std(z_column)),
    )


@dataclass(frozen=True)
class ColumnComparison:
    empirical: np.ndarray
    closed_form: np.ndarray


def compare_columns(g: Graph, weights: Optional[np.ndarray] = None, form: ClosedForm = "lemma") -> ColumnComparison:
    """Empirical and closed-form correlation for every embedding column."""
    z = one_layer_embedding(g, weights)
    xw = g.features if weights is None else g.features @ weights
    empirical, closed = [], []
    for column in range(z.shape[1]):
        empirical.append(point_biserial(z[:, column], g.sensitive))
        closed.append(rho_closed_form(lemma_inputs(g, z[:, column], xw[:, column]), form))
    return ColumnComparison(np.asarray(empirical), np.asarray(closed))


def sbm_for_gap(base: SbmConfig, d: float) -> SbmConfig:
    """Re-tune p_intra / p_inter so E[H_intra - H_inter] = d at the base config's expected edge count."""
    n0, n1 = base.nodes_per_group
    intra_pairs = n0 * (n0 - 1) // 2 + n1 * (n1 - 1) // 2
    inter_pairs = n0 * n1
    expected_edges = base.p_intra * intra_pairs + base.p_inter * inter_pairs
    h_intra = (1.0 + d) / 2.0
    p_intra = h_intra * expected_edges / intra_pairs if intra_pairs else math.inf
    p_inter = (1.0 - h_intra) * expected_edges / inter_pairs
    if not (0.0 <= p_intra <= 1.0 and 0.0 <= p_inter <= 1.0):
        raise UnrealizableD(
            f"d = {d:g} needs p_intra = {p_intra:.4g}, p_inter = {p_inter:.4g} at {expected_edges:.0f} expected edges"
        )
    return base.model_copy(update={"p_intra": p_intra, "p_inter": p_inter})


def theorem_sweep(
    base: SbmConfig,
    d_values: Sequence[float],
    seeds: Sequence[int],
    weights: Optional[np.ndarray] = None,
    form: ClosedForm = "lemma",
) -> SweepResult:
    """Mean |rho| over seeds and columns for each target |H_intra - H_inter|, next to the closed form."""
    rows = []
    for d in sorted(d_values):
        cfg = sbm_for_gap(base, d)
        empirical, closed = [], []
        for seed in seeds:
            g = generate_sbm(cfg.model_copy(update={"seed": int(seed)}))
            comparison = compare_columns(g, weights, form)
            empirical.append(np.abs(comparison.empirical))
            closed.append(np.abs(comparison.closed_form))
        empirical = np.asarray(empirical)
        rows.append(
            SweepRow(
                d=float(d),
                seed_count=len(seeds),
                mean_abs_rho_empirical=float(empirical.mean()),
                rho_closed_form=float(np.mean(closed)),
                column_mean_abs_rho=empirical.mean(axis=0).tolist(),
            )
        )
        logger.info("d=%.2f: mean |rho| = %.4f", d, rows[-1].mean_abs_rho_empirical)
    return SweepResult(rows=rows, n_seeds=len(seeds), closed_form=form)
