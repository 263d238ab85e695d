"""Client local updates, server weighting/aggregation and the round loop of the fair federated protocol."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from errors import NonFiniteError
from graph import ClientPartition, Graph, edge_group_stats
from metrics import aggregate_bundles, js_divergence, label_distribution, metric_bundle
from nn import (
    AdamState,
    ModelParams,
    NormalizedAdjacency,
    adam_step,
    fairness_surrogates,
    forward,
    interpolate,
    loss_and_grad,
    normalize_adjacency,
    weighted_sum,
)
from schemas import ClientUploadRecord, ExperimentConfig, MetricBundle, RoundReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 2.0
    lam: float = 2.0
    tau: float = 1.0
    lr: float = 0.01
    local_epochs: int = 3
    rounds: int = 50
    clients_per_round: Optional[int] = None  # None: every client, every round
    invert_fairness_weight: bool = False
    interpolation: Literal["js", "off"] = "js"  # off: start local training from the broadcast model
    weighting: Literal["fair", "uniform"] = "fair"
    force_js: Optional[float] = None
    label_distribution: Literal["soft", "hard"] = "soft"
    activation: Literal["relu", "linear"] = "relu"
    local_eval_model: Literal["global", "local"] = "global"
    local_aggregate: Literal["median", "mean"] = "median"
    early_stop: bool = False
    patience: int = 10
    max_workers: int = 1

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, max_workers: int = 1) -> "Hyperparams":
        t = cfg.training
        hyper = cls(
            alpha=t.alpha,
            lam=cfg.server.lam,
            tau=cfg.server.tau,
            lr=t.lr,
            local_epochs=t.local_epochs,
            rounds=t.rounds,
            clients_per_round=t.clients_per_round,
            invert_fairness_weight=cfg.server.invert_fairness_weight,
            label_distribution=t.label_distribution,
            activation=cfg.model.activation,
            local_eval_model=t.local_eval_model,
            local_aggregate=t.local_aggregate,
            early_stop=t.early_stop,
            patience=t.patience,
            max_workers=max_workers,
        )
        if t.ablation == "no_client":
            hyper = replace(hyper, alpha=0.0, interpolation="off")
        elif t.ablation == "no_server":
            hyper = replace(hyper, weighting="uniform")
        return hyper

    def fedavg(self) -> "Hyperparams":
        """Plain FedAvg: no penalty, no interpolation, uniform weights."""
        return replace(self, alpha=0.0, interpolation="off", weighting="uniform", force_js=None)


@dataclass
class ClientState:
    client_id: int
    graph: Graph
    node_ids: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    adj: NormalizedAdjacency
    ax: np.ndarray
    params: ModelParams
    adam: AdamState
    gbs: float
    last_fair_loss: float = 0.0


@dataclass
class ServerState:
    params: ModelParams
    hyper: Hyperparams
    seed: int
    round: int = 0
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)


@dataclass(frozen=True, eq=False)
class ClientUpload:
    client_id: int
    params: ModelParams
    fair_loss: float
    delta_sp: float
    delta_eo: float
    gbs: float
    js: float
    flags: List[str] = field(default_factory=list)

    def record(self) -> ClientUploadRecord:
        return ClientUploadRecord(
            client_id=self.client_id,
            js=self.js,
            fair_loss=self.fair_loss,
            delta_sp=self.delta_sp,
            delta_eo=self.delta_eo,
            gbs=self.gbs,
            flags=self.flags,
        )


@dataclass(frozen=True, eq=False)
class GlobalView:
    """The full graph with its split, used for global evaluation."""

    graph: Graph
    adj: NormalizedAdjacency
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray


def build_clients(
    parts: Sequence[ClientPartition],
    train_mask: np.ndarray,
    val_mask: np.ndarray,
    test_mask: np.ndarray,
    init: ModelParams,
    lr: float,
    sparse: bool = False,
) -> List[ClientState]:
    """Client states from ego-network partitions; local masks are the global masks restricted to the client."""
    clients = []
    for part in parts:
        adj = normalize_adjacency(part.graph, sparse=sparse)
        clients.append(
            ClientState(
                client_id=part.client_id,
                graph=part.graph,
                node_ids=part.node_ids,
                train_mask=train_mask[part.node_ids],
                val_mask=val_mask[part.node_ids],
                test_mask=test_mask[part.node_ids],
                adj=adj,
                ax=adj @ part.graph.features,
                params=init.copy(),
                adam=AdamState.fresh(init, lr=lr),
                gbs=edge_group_stats(part.graph).gbs,
            )
        )
    return clients


# Client side
def client_local_update(c: ClientState, global_params: ModelParams, hyper: Hyperparams) -> ClientUpload:
    g = c.graph
    if hyper.interpolation == "off":
        js = 1.0
    elif hyper.force_js is not None:
        js = hyper.force_js
    else:
        p_global = forward(global_params, c.adj, g.features, hyper.activation, ax=c.ax).p
        p_local = forward(c.params, c.adj, g.features, hyper.activation, ax=c.ax).p
        js = js_divergence(
            label_distribution(p_global, c.train_mask, hyper.label_distribution),
            label_distribution(p_local, c.train_mask, hyper.label_distribution),
        )
    params = interpolate(c.params, global_params, js)

    if not c.train_mask.any():
        c.params = params
        c.last_fair_loss = 0.0
        return ClientUpload(c.client_id, params, 0.0, 0.0, 0.0, c.gbs, js, flags=["empty_train"])

    flags: List[str] = []
    for epoch in range(hyper.local_epochs):
        result = loss_and_grad(
            params, c.adj, g.features, g.labels, g.sensitive, c.train_mask,
            hyper.alpha, hyper.activation, ax=c.ax,
        )
        if not np.isfinite(result.loss):
            raise NonFiniteError(f"loss diverged at local epoch {epoch + 1}", client_id=c.client_id)
        flags = result.flags
        params = adam_step(c.adam, params, result.grads)
        if not params.is_finite():
            raise NonFiniteError(f"parameters diverged at local epoch {epoch + 1}", client_id=c.client_id)

    p = forward(params, c.adj, g.features, hyper.activation, ax=c.ax).p
    delta_sp, delta_eo, _ = fairness_surrogates(p, g.labels, g.sensitive, c.train_mask)
    c.params = params
    c.last_fair_loss = delta_sp + delta_eo
    logger.debug("client %d: js=%.4f fair=%.4f", c.client_id, js, c.last_fair_loss)
    return ClientUpload(c.client_id, params, c.last_fair_loss, delta_sp, delta_eo, c.gbs, js, flags)


# Server side
def server_combined_weights(
    uploads: Sequence[ClientUpload], lam: float, tau: float, invert_fairness_weight: bool = False
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """gamma_E = softmax(B); gamma_F = exp(softmax(dSP + dEO)); gamma = softmax((lam gamma_E + gamma_F) / tau)."""
    balance = np.array([u.gbs for u in uploads], dtype=np.float64)
    unfairness = np.array([u.delta_sp + u.delta_eo for u in uploads], dtype=np.float64)
    if invert_fairness_weight:
        unfairness = -unfairness
    gamma_e = softmax(balance)
    gamma_f = np.exp(softmax(unfairness))
    gamma = softmax((lam * gamma_e + gamma_f) / tau)
    return gamma_e, gamma_f, gamma


def server_aggregate(uploads: Sequence[ClientUpload], gamma: Sequence[float]) -> ModelParams:
    return weighted_sum([u.params for u in uploads], gamma)


# Orchestration
def sample_clients(rng: np.random.Generator, k_clients: int, clients_per_round: Optional[int]) -> np.ndarray:
    k_prime = k_clients if clients_per_round is None else clients_per_round
    return np.sort(rng.choice(k_clients, size=k_prime, replace=False))


def evaluate_round(
    global_params: ModelParams, clients: Sequence[ClientState], view: GlobalView, hyper: Hyperparams
) -> Tuple[MetricBundle, MetricBundle, float]:
    g = view.graph
    p = forward(global_params, view.adj, g.features, hyper.activation).p
    global_metrics = metric_bundle(p, g.labels, g.sensitive, view.test_mask)
    val_accuracy = metric_bundle(p, g.labels, g.sensitive, view.val_mask).accuracy

    local = []
    for c in clients:
        model = global_params if hyper.local_eval_model == "global" else c.params
        p_local = forward(model, c.adj, c.graph.features, hyper.activation, ax=c.ax).p
        local.append(metric_bundle(p_local, c.graph.labels, c.graph.sensitive, c.test_mask))
    return global_metrics, aggregate_bundles(local, hyper.local_aggregate), val_accuracy


def run_federation(
    server: ServerState,
    clients: Sequence[ClientState],
    view: GlobalView,
    split: int = 0,
    on_round: Optional[Callable[[RoundReport], None]] = None,
    recorder: Optional[Callable[[dict], None]] = None,
) -> List[RoundReport]:
    """Sample, update locally, weight, aggregate, broadcast, evaluate; once per round.

    Client updates inside a round may run on a thread pool; uploads are always
    combined in client-id order, so the result does not depend on scheduling.
    """
    hyper = server.hyper
    reports: List[RoundReport] = []
    best_val, stale = -np.inf, 0
    executor = ThreadPoolExecutor(max_workers=hyper.max_workers) if hyper.max_workers > 1 else None
    try:
        for _ in range(hyper.rounds):
            server.round += 1
            t = server.round
            selected = sample_clients(server.rng, len(clients), hyper.clients_per_round)
            broadcast = server.params

            def update(client_id: int) -> ClientUpload:
                return client_local_update(clients[client_id], broadcast, hyper)

            try:
                if executor is not None:
                    uploads = list(executor.map(update, selected.tolist()))
                else:
                    uploads = [update(i) for i in selected.tolist()]
            except NonFiniteError as exc:
                raise NonFiniteError(exc.reason, client_id=exc.client_id, round=t) from exc

            gamma_e, gamma_f, gamma = server_combined_weights(
                uploads, hyper.lam, hyper.tau, hyper.invert_fairness_weight
            )
            if hyper.weighting == "uniform":
                gamma = np.full(len(uploads), 1.0 / len(uploads))
            server.params = server_aggregate(uploads, gamma)
            if not server.params.is_finite():
                raise NonFiniteError("aggregated model is not finite", round=t)

            if recorder is not None:
                recorder(replay_record(split, t, broadcast, uploads))

            global_metrics, local_metrics, val_accuracy = evaluate_round(server.params, clients, view, hyper)
            report = RoundReport(
                split=split,
                round=t,
                selected=selected.tolist(),
                uploads=[u.record() for u in uploads],
                gamma_e=gamma_e.tolist(),
                gamma_f=gamma_f.tolist(),
                gamma=gamma.tolist(),
                global_metrics=global_metrics,
                local_metrics=local_metrics,
                val_accuracy=val_accuracy,
            )
            reports.append(report)
            if on_round is not None:
                on_round(report)
            logger.info(
                "split %d round %d: acc=%.4f dSP=%.4f dEO=%.4f",
                split, t, global_metrics.accuracy, global_metrics.delta_sp, global_metrics.delta_eo,
            )

            if hyper.early_stop:
                if val_accuracy > best_val:
                    best_val, stale = val_accuracy, 0
                else:
                    stale += 1
                    if stale >= hyper.patience:
                        logger.info("Early stop after round %d (no val improvement for %d rounds)", t, stale)
                        break
    finally:
        if executor is not None:
            executor.shutdown()
    return reports


def run_fedavg_baseline(
    server: ServerState,
    clients: Sequence[ClientState],
    view: GlobalView,
    split: int = 0,
    on_round: Optional[Callable[[RoundReport], None]] = None,
    recorder: Optional[Callable[[dict], None]] = None,
) -> List[RoundReport]:
    server.hyper = server.hyper.fedavg()
    return run_federation(server, clients, view, split=split, on_round=on_round, recorder=recorder)


def replay_record(split: int, round: int, broadcast: ModelParams, uploads: Sequence[ClientUpload]) -> dict:
    """One record/replay line: the broadcast model and every upload, params in flat wire order."""
    d, h = broadcast.shape
    return {
        "split": split,
        "round": round,
        "shape": [d, h],
        "broadcast": broadcast.flat().tolist(),
        "uploads": [{"client_id": u.client_id, "js": u.js, "params": u.params.flat().tolist()} for u in uploads],
    }
