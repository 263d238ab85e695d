"""Two-layer GCN with a sigmoid binary head, fairness-penalized loss and Adam, in float64 numpy."""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from errors import ShapeMismatch
from graph import Graph
from utils import atomic_write_bytes

Activation = Literal["relu", "linear"]

_HEADER = struct.Struct("<QQ")


@dataclass(frozen=True, eq=False)
class ModelParams:
    w1: np.ndarray  # (d, h)
    w2: np.ndarray  # (h, 1)

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w2.shape != (self.w1.shape[1], 1):
            raise ShapeMismatch(f"inconsistent parameter shapes {self.w1.shape} and {self.w2.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.w1.shape

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.w2.ravel()])

    @classmethod
    def from_flat(cls, vector: np.ndarray, d: int, h: int) -> "ModelParams":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (d * h + h,):
            raise ShapeMismatch(f"expected {d * h + h} values for shape ({d}, {h}), got {vector.shape}")
        return cls(w1=vector[: d * h].reshape(d, h).copy(), w2=vector[d * h :].reshape(h, 1).copy())

    def to_bytes(self) -> bytes:
        """Wire format: little-endian u64 header (d, h), then W1 row-major and W2 as little-endian f64."""
        d, h = self.shape
        return _HEADER.pack(d, h) + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ModelParams":
        if len(payload) < _HEADER.size:
            raise ShapeMismatch("checkpoint is shorter than its header")
        d, h = _HEADER.unpack_from(payload)
        body = np.frombuffer(payload, dtype="<f8", offset=_HEADER.size)
        return cls.from_flat(body.astype(np.float64), d, h)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.w1).all() and np.isfinite(self.w2).all())

    def copy(self) -> "ModelParams":
        return ModelParams(self.w1.copy(), self.w2.copy())


def glorot_init(d: int, h: int, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    limit1 = np.sqrt(6.0 / (d + h))
    limit2 = np.sqrt(6.0 / (h + 1))
    return ModelParams(
        w1=rng.uniform(-limit1, limit1, size=(d, h)),
        w2=rng.uniform(-limit2, limit2, size=(h, 1)),
    )


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(np.zeros_like(params.w1), np.zeros_like(params.w2))


def interpolate(local: ModelParams, global_: ModelParams, js: float) -> ModelParams:
    """(1 - js) * local + js * global, elementwise."""
    _check_same_shape([local, global_])
    return ModelParams(
        w1=(1.0 - js) * local.w1 + js * global_.w1,
        w2=(1.0 - js) * local.w2 + js * global_.w2,
    )


def weighted_sum(params: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    _check_same_shape(params)
    if len(params) != len(weights) or not params:
        raise ShapeMismatch("need one weight per parameter set")
    w1 = np.zeros_like(params[0].w1)
    w2 = np.zeros_like(params[0].w2)
    for weight, p in zip(weights, params):
        w1 += weight * p.w1
        w2 += weight * p.w2
    return ModelParams(w1, w2)


def _check_same_shape(params: Sequence[ModelParams]) -> None:
    shapes = {p.shape for p in params}
    if len(shapes) > 1:
        raise ShapeMismatch(f"parameter shapes differ: {sorted(shapes)}")


def save_checkpoint(path: Union[str, Path], params: ModelParams) -> Path:
    return atomic_write_bytes(path, params.to_bytes())


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    return ModelParams.from_bytes(Path(path).read_bytes())


# Propagation
@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """D^-1/2 (A + I) D^-1/2, dense ndarray or scipy CSR."""

    matrix: Union[np.ndarray, sp.csr_matrix]

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else self.matrix

    def __matmul__(self, other: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ other)


def normalize_adjacency(g: Graph, sparse: bool = False) -> NormalizedAdjacency:
    n = g.num_nodes
    u, v = g.edges[:, 0], g.edges[:, 1]
    rows = np.concatenate([u, v, np.arange(n)])
    cols = np.concatenate([v, u, np.arange(n)])
    a_hat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    inv_sqrt = 1.0 / np.sqrt(np.asarray(a_hat.sum(axis=1)).ravel())  # degree >= 1 thanks to the self-loop
    d_inv_sqrt = sp.diags(inv_sqrt)
    normalized = (d_inv_sqrt @ a_hat @ d_inv_sqrt).tocsr()
    return NormalizedAdjacency(normalized if sparse else normalized.toarray())


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    ax: np.ndarray  # A X
    pre1: np.ndarray  # A X W1
    h1: np.ndarray  # act(pre1)
    ah1: np.ndarray  # A H1
    z: np.ndarray  # logits, (N,)
    p: np.ndarray  # sigmoid(z)


def forward(
    params: ModelParams,
    adj: NormalizedAdjacency,
    X: np.ndarray,
    activation: Activation = "relu",
    ax: Optional[np.ndarray] = None,
) -> ForwardTrace:
    """H1 = act(A X W1); z = A H1 W2; p = sigmoid(z).

    `ax` may carry a precomputed A X, which is constant during training.
    """
    if X.shape[0] != adj.num_nodes:
        raise ShapeMismatch(f"{X.shape[0]} feature rows for {adj.num_nodes} nodes")
    if X.shape[1] != params.w1.shape[0]:
        raise ShapeMismatch(f"feature dim {X.shape[1]} does not match W1 {params.w1.shape}")
    if ax is None:
        ax = adj @ X
    pre1 = ax @ params.w1
    h1 = np.maximum(pre1, 0.0) if activation == "relu" else pre1
    ah1 = adj @ h1
    z = (ah1 @ params.w2).ravel()
    return ForwardTrace(ax=ax, pre1=pre1, h1=h1, ah1=ah1, z=z, p=expit(z))


# Loss
def _group_mean_gap(p: np.ndarray, s: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray, bool]:
    """mean(p | s=0) - mean(p | s=1) over `mask`, with its gradient w.r.t. p."""
    in0 = mask & (s == 0)
    in1 = mask & (s == 1)
    n0, n1 = int(in0.sum()), int(in1.sum())
    grad = np.zeros_like(p)
    if n0 == 0 or n1 == 0:
        return 0.0, grad, True
    grad[in0] = 1.0 / n0
    grad[in1] = -1.0 / n1
    return float(p[in0].mean() - p[in1].mean()), grad, False


def fairness_surrogates(p: np.ndarray, y: np.ndarray, s: np.ndarray, mask: np.ndarray) -> Tuple[float, float, List[str]]:
    """Soft |SP| and |EO| on probabilities; degenerate terms are 0 and flagged."""
    sp_gap, _, sp_bad = _group_mean_gap(p, s, mask)
    eo_gap, _, eo_bad = _group_mean_gap(p, s, mask & (y == 1))
    flags = (["penalty_sp_degenerate"] if sp_bad else []) + (["penalty_eo_degenerate"] if eo_bad else [])
    return abs(sp_gap), abs(eo_gap), flags


@dataclass(frozen=True, eq=False)
class LossResult:
    loss: float
    util: float
    fair: float
    sp_soft: float
    eo_soft: float
    grads: ModelParams
    flags: List[str] = field(default_factory=list)


def loss_and_grad(
    params: ModelParams,
    adj: NormalizedAdjacency,
    X: np.ndarray,
    y: np.ndarray,
    s: np.ndarray,
    train_mask: np.ndarray,
    alpha: float,
    activation: Activation = "relu",
    ax: Optional[np.ndarray] = None,
) -> LossResult:
    """Mean BCE over `train_mask` plus alpha * (|SP_soft| + |EO_soft|), with exact gradients."""
    n_train = int(train_mask.sum())
    if n_train == 0:
        raise ShapeMismatch("train_mask selects no nodes")
    trace = forward(params, adj, X, activation, ax=ax)
    z, p = trace.z, trace.p
    yf = y.astype(np.float64)

    # -log p = log(1 + e^-z), -log(1 - p) = log(1 + e^z)
    bce = yf * np.logaddexp(0.0, -z) + (1.0 - yf) * np.logaddexp(0.0, z)
    util = float(bce[train_mask].mean())
    g_z = np.where(train_mask, (p - yf) / n_train, 0.0)

    sp_gap, sp_grad, sp_bad = _group_mean_gap(p, s, train_mask)
    eo_gap, eo_grad, eo_bad = _group_mean_gap(p, s, train_mask & (y == 1))
    fair = abs(sp_gap) + abs(eo_gap)
    if alpha:
        g_p = alpha * (np.sign(sp_gap) * sp_grad + np.sign(eo_gap) * eo_grad)
        g_z = g_z + g_p * p * (1.0 - p)

    grad_w2 = trace.ah1.T @ g_z[:, None]
    grad_h1 = adj @ (g_z[:, None] @ params.w2.T)  # A is symmetric
    if activation == "relu":
        grad_h1 = grad_h1 * (trace.pre1 > 0.0)
    grad_w1 = trace.ax.T @ grad_h1

    flags = (["penalty_sp_degenerate"] if sp_bad else []) + (["penalty_eo_degenerate"] if eo_bad else [])
    return LossResult(
        loss=util + alpha * fair,
        util=util,
        fair=fair,
        sp_soft=abs(sp_gap),
        eo_soft=abs(eo_gap),
        grads=ModelParams(grad_w1, grad_w2),
        flags=flags,
    )


# Optimizer
@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def fresh(cls, params: ModelParams, lr: float = 0.01) -> "AdamState":
        return cls(m=zeros_like(params), v=zeros_like(params), lr=lr)


def adam_step(state: AdamState, params: ModelParams, grads: ModelParams) -> ModelParams:
    """One bias-corrected Adam update; advances `state` and returns new params."""
    _check_same_shape([state.m, params, grads])
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    updated = []
    new_m, new_v = [], []
    for theta, g, m, v in zip(
        (params.w1, params.w2), (grads.w1, grads.w2), (state.m.w1, state.m.w2), (state.v.w1, state.v.w2)
    ):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        updated.append(theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)

    state.m = ModelParams(*new_m)
    state.v = ModelParams(*new_v)
    return ModelParams(*updated)
