"""Group-fairness, ranking and divergence statistics used for evaluation and inside the protocol."""
import math
from typing import Literal, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.special import rel_entr
from scipy.stats import rankdata

from errors import EmptyGroup, ZeroVariance
from schemas import MetricBundle


class Measured(NamedTuple):
    value: float
    degenerate: bool = False


def predict(p: np.ndarray) -> np.ndarray:
    """Hard labels; p = 0.5 goes to class 0."""
    return (np.asarray(p) > 0.5).astype(np.int64)


def _positive_rate_gap(yhat: np.ndarray, s: np.ndarray, mask: np.ndarray) -> Measured:
    in0 = mask & (s == 0)
    in1 = mask & (s == 1)
    if not in0.any() or not in1.any():
        return Measured(0.0, True)
    return Measured(abs(float(yhat[in0].mean()) - float(yhat[in1].mean())))


def statistical_parity(yhat: np.ndarray, s: np.ndarray, mask: np.ndarray) -> Measured:
    """|P(yhat=1 | s=0) - P(yhat=1 | s=1)| over `mask`."""
    return _positive_rate_gap(np.asarray(yhat), np.asarray(s), np.asarray(mask, dtype=bool))


def equalized_odds(yhat: np.ndarray, y: np.ndarray, s: np.ndarray, mask: np.ndarray) -> Measured:
    """|TPR(s=0) - TPR(s=1)| over `mask`."""
    mask = np.asarray(mask, dtype=bool) & (np.asarray(y) == 1)
    return _positive_rate_gap(np.asarray(yhat), np.asarray(s), mask)


def auc(scores: np.ndarray, y: np.ndarray, mask: np.ndarray) -> Measured:
    """Mann-Whitney AUC; ties count one half. Undefined without both classes (0.5, flagged)."""
    mask = np.asarray(mask, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)[mask]
    y = np.asarray(y)[mask]
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return Measured(0.5, True)
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return Measured(float(u / (n_pos * n_neg)))


def tradeoffs(accuracy: float, auc_value: float, dsp: float, deo: float) -> Tuple[float, float, bool]:
    """(accuracy, AUC) / (dSP + dEO). Unit-free, so percentages or fractions give the same ratio.

    A zero denominator returns (inf, inf, False).
    """
    denominator = dsp + deo
    if denominator <= 0.0:
        return math.inf, math.inf, False
    return accuracy / denominator, auc_value / denominator, True


def label_distribution(p: np.ndarray, mask: np.ndarray, mode: Literal["soft", "hard"] = "soft") -> np.ndarray:
    """[P(class 0), P(class 1)] over the nodes in `mask`."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.array([0.5, 0.5])
    if mode == "soft":
        positive = float(np.mean(np.asarray(p)[mask]))
    else:
        positive = float(np.mean(predict(p)[mask]))
    return np.array([1.0 - positive, positive])


def js_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    """Jensen-Shannon divergence in bits, so the result lies in [0, 1]."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    M = 0.5 * (P + Q)
    js = 0.5 * (rel_entr(P, M).sum() + rel_entr(Q, M).sum()) / math.log(2.0)
    return float(min(max(js, 0.0), 1.0))


def point_biserial(x: np.ndarray, s: np.ndarray) -> float:
    """(mu0 - mu1) / sigma_x * sqrt(N0 N1 / N^2), population sigma.

    Positive when group 0 has the larger mean, i.e. Pearson against 1 - s.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s)
    in0, in1 = s == 0, s == 1
    n0, n1 = int(in0.sum()), int(in1.sum())
    if n0 == 0 or n1 == 0:
        raise EmptyGroup("point-biserial correlation needs both sensitive groups")
    sigma = float(x.std())
    if sigma == 0.0:
        raise ZeroVariance("point-biserial correlation is undefined for a constant variable")
    n = n0 + n1
    return (float(x[in0].mean()) - float(x[in1].mean())) / sigma * math.sqrt(n0 * n1 / (n * n))


def metric_bundle(p: np.ndarray, y: np.ndarray, s: np.ndarray, mask: np.ndarray) -> MetricBundle:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return MetricBundle(
            accuracy=0.0, auc=0.5, delta_sp=0.0, delta_eo=0.0,
            tradeoff_acc=math.inf, tradeoff_auc=math.inf, flags=["empty_mask"],
        )
    yhat = predict(p)
    accuracy = float((yhat[mask] == np.asarray(y)[mask]).mean())
    auc_value = auc(p, y, mask)
    dsp = statistical_parity(yhat, s, mask)
    deo = equalized_odds(yhat, y, s, mask)
    return bundle_from_values(accuracy, auc_value.value, dsp.value, deo.value, flags=[
        flag
        for flag, raised in (
            ("sp_degenerate", dsp.degenerate),
            ("eo_degenerate", deo.degenerate),
            ("auc_undefined", auc_value.degenerate),
        )
        if raised
    ])


def bundle_from_values(accuracy: float, auc_value: float, dsp: float, deo: float, flags: Sequence[str]) -> MetricBundle:
    t_acc, t_auc, defined = tradeoffs(accuracy, auc_value, dsp, deo)
    flags = list(flags)
    if not defined:
        flags.append("tradeoff_undefined")
    return MetricBundle(
        accuracy=accuracy, auc=auc_value, delta_sp=dsp, delta_eo=deo,
        tradeoff_acc=t_acc, tradeoff_auc=t_auc, flags=flags,
    )


def aggregate_bundles(bundles: Sequence[MetricBundle], how: Literal["median", "mean"] = "median") -> MetricBundle:
    """Field-wise median (or mean) of accuracy, AUC, dSP, dEO; trade-offs recomputed from those."""
    usable = [b for b in bundles if "empty_mask" not in b.flags]
    if not usable:
        return metric_bundle(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))
    reduce = np.median if how == "median" else np.mean
    values = {
        name: float(reduce([getattr(b, name) for b in usable]))
        for name in ("accuracy", "auc", "delta_sp", "delta_eo")
    }
    flags = sorted({flag for b in usable for flag in b.flags if flag != "tradeoff_undefined"})
    if len(usable) < len(bundles):
        flags.append("empty_test")
    return bundle_from_values(values["accuracy"], values["auc"], values["delta_sp"], values["delta_eo"], flags)
