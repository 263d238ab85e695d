import math
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class Section(BaseModel):
    """Base for one `[section]` of the experiment config file.

    Empty values (`key =`) mean "not set" and unknown keys are rejected.
    """

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @model_validator(mode="before")
    @classmethod
    def _empty_means_unset(cls, data):
        if isinstance(data, dict):
            return {key: value for key, value in data.items() if value != ""}
        return data


# Experiment config sections
class ExperimentSection(Section):
    mode: Literal["federate", "fedavg_baseline", "theory_sweep", "audit"]
    seed: int = Field(0, ge=0)
    n_splits: int = Field(5, ge=1)
    output_dir: Optional[str] = None
    record: bool = False


class DataSection(Section):
    source: Literal["sbm", "files"] = "sbm"
    nodes: Optional[str] = None
    edges: Optional[str] = None

    @model_validator(mode="after")
    def _files_need_paths(self):
        if self.source == "files" and (not self.nodes or not self.edges):
            raise ValueError("source = files needs both `nodes` and `edges`")
        return self


class SbmConfig(Section):
    """Two-block stochastic block model with Gaussian per-group features."""

    nodes_per_group: Tuple[int, int] = (500, 500)
    p_intra: float = Field(0.02, ge=0.0, le=1.0)
    p_inter: float = Field(0.005, ge=0.0, le=1.0)
    mean_0: List[float] = [1.0, 0.0, 0.0, 0.0]
    mean_1: List[float] = [0.0, 0.0, 0.0, 0.0]
    std_0: List[float] = [1.0, 1.0, 1.0, 1.0]
    std_1: List[float] = [1.0, 1.0, 1.0, 1.0]
    label_rule: Literal["by_feature_threshold", "by_group_with_flip"] = "by_group_with_flip"
    flip: float = Field(0.2, ge=0.0, le=1.0)
    label_feature: int = Field(0, ge=0)
    label_threshold: float = 0.5
    seed: int = Field(0, ge=0)

    @field_validator("nodes_per_group", "mean_0", "mean_1", "std_0", "std_1", mode="before")
    @classmethod
    def _comma_separated(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _check_shapes(self):
        if min(self.nodes_per_group) < 1:
            raise ValueError("nodes_per_group entries must be >= 1")
        dims = {len(self.mean_0), len(self.mean_1), len(self.std_0), len(self.std_1)}
        if len(dims) != 1 or 0 in dims:
            raise ValueError("mean_0, mean_1, std_0, std_1 must be non-empty and of equal length")
        if any(not s > 0 for s in self.std_0 + self.std_1):
            raise ValueError("feature stds must be > 0")
        if self.label_feature >= len(self.mean_0):
            raise ValueError("label_feature is out of range for the feature dimension")
        return self

    @property
    def feature_dim(self) -> int:
        return len(self.mean_0)

    @property
    def feature_means(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.mean_0, dtype=np.float64), np.asarray(self.mean_1, dtype=np.float64)

    @property
    def feature_stds(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.std_0, dtype=np.float64), np.asarray(self.std_1, dtype=np.float64)


class PartitionSection(Section):
    k_clients: int = Field(10, ge=1)
    hops: int = Field(3, ge=1)
    seed: int = Field(0, ge=0)
    max_retries: int = Field(20, ge=1)


class ModelSection(Section):
    hidden_dim: int = Field(64, ge=1)
    activation: Literal["relu", "linear"] = "relu"
    sparse: bool = False


class TrainingSection(Section):
    lr: float = Field(0.01, gt=0.0)
    alpha: float = Field(2.0, ge=0.0)
    local_epochs: int = Field(3, ge=1)
    rounds: int = Field(50, ge=0)
    clients_per_round: Optional[int] = Field(None, ge=1)
    early_stop: bool = False
    patience: int = Field(10, ge=1)
    label_distribution: Literal["soft", "hard"] = "soft"
    ablation: Literal["none", "no_client", "no_server"] = "none"
    local_eval_model: Literal["global", "local"] = "global"
    local_aggregate: Literal["median", "mean"] = "median"


class ServerSection(Section):
    lam: float = Field(2.0, alias="lambda", ge=0.0)
    tau: float = Field(1.0, gt=0.0)
    invert_fairness_weight: bool = False


class EvalSection(Section):
    train_fraction: float = Field(0.5, gt=0.0, le=1.0)
    val_fraction: float = Field(0.25, ge=0.0, le=1.0)
    test_fraction: float = Field(0.25, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _fractions_sum_to_one(self):
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total:g}")
        return self


class TheorySection(Section):
    d_values: List[float] = [0.0, 0.2, 0.4, 0.6, 0.8]
    n_seeds: int = Field(10, ge=1)
    closed_form: Literal["lemma", "neighbor_mean"] = "lemma"

    @field_validator("d_values", mode="before")
    @classmethod
    def _comma_separated(cls, value):
        return _split_list(value)

    @field_validator("d_values")
    @classmethod
    def _d_in_unit_interval(cls, values):
        if not values or any(not 0.0 <= d <= 1.0 for d in values):
            raise ValueError("d_values must be a non-empty list within [0, 1]")
        return values


class AuditSection(Section):
    predictions: Optional[str] = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentSection
    data: DataSection = DataSection()
    sbm: SbmConfig = SbmConfig()
    partition: PartitionSection = PartitionSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    server: ServerSection = ServerSection()
    eval: EvalSection = EvalSection()
    theory: TheorySection = TheorySection()
    audit: AuditSection = AuditSection()

    @model_validator(mode="after")
    def _cross_section_checks(self):
        k_prime = self.training.clients_per_round
        if k_prime is not None and k_prime > self.partition.k_clients:
            raise ValueError("training.clients_per_round must not exceed partition.k_clients")
        if self.experiment.mode == "audit" and not self.audit.predictions:
            raise ValueError("mode = audit needs audit.predictions")
        return self


# Result schemas
class MetricBundle(BaseModel):
    """Evaluation of one (model, graph, mask); fractions in [0, 1]."""

    model_config = ConfigDict(ser_json_inf_nan="null")

    accuracy: float
    auc: float
    delta_sp: float
    delta_eo: float
    tradeoff_acc: float
    tradeoff_auc: float
    flags: List[str] = []

    def csv_values(self) -> List[str]:
        def trade(value: float) -> str:
            return "inf" if math.isinf(value) else f"{value:.4f}"

        return [
            f"{100 * self.accuracy:.4f}",
            f"{100 * self.auc:.4f}",
            f"{100 * self.delta_sp:.4f}",
            f"{100 * self.delta_eo:.4f}",
            trade(self.tradeoff_acc),
            trade(self.tradeoff_auc),
            ";".join(self.flags),
        ]


METRIC_CSV_FIELDS = ("accuracy", "auc", "delta_sp", "delta_eo", "tradeoff_acc", "tradeoff_auc", "flags")


class ClientUploadRecord(BaseModel):
    client_id: int
    js: float
    fair_loss: float
    delta_sp: float
    delta_eo: float
    gbs: float
    flags: List[str] = []


class RoundReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="null")

    split: int = 0
    round: int
    selected: List[int]
    uploads: List[ClientUploadRecord]
    gamma_e: List[float]
    gamma_f: List[float]
    gamma: List[float]
    global_metrics: MetricBundle
    local_metrics: MetricBundle
    val_accuracy: Optional[float] = None


class LoadSummary(BaseModel):
    num_nodes: int
    num_edges: int
    gbs: float
    group_sizes: Tuple[int, int]
    isolated_removed: int = 0
    duplicate_edges: int = 0
    self_loops_rejected: int = 0


class ClientSummary(BaseModel):
    client_id: int
    center: int
    num_nodes: int
    num_edges: int
    sparsity: float
    gbs: float


class PartitionSummary(BaseModel):
    clients: List[ClientSummary]
    covered_nodes: int
    overlap_fraction: float


class SweepRow(BaseModel):
    d: float
    seed_count: int
    mean_abs_rho_empirical: float
    rho_closed_form: float
    column_mean_abs_rho: List[float] = []


class SweepResult(BaseModel):
    rows: List[SweepRow]
    n_seeds: int
    closed_form: str
