"""Pipeline configuration: one JSON file mirroring the dataclass fields."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .distill import KdWeights
from .graph import SbmConfig
from .models import MODEL_KINDS
from .rl import RlConfig
from .training import TrainConfig

ANNOTATOR_KINDS = ("ground_truth_oracle", "majority_vote", "external_http")
DEFAULT_TEACHERS = ["gcn", "gat1", "appnp", "h2gcn"]
DEFAULT_SWEEP_RATIOS = [0.1, 0.2, 0.3, 0.4, 0.48]


@dataclass
class AnnotatorConfig:
    """Which labeling backend the selected nodes go to."""

    kind: str = "ground_truth_oracle"
    noise_rate: float = 0.0
    endpoint: str = ""
    timeout: float = 30.0
    max_retries: int = 2

    def validate(self) -> None:
        if self.kind not in ANNOTATOR_KINDS:
            raise ValueError(f"unknown annotator kind {self.kind!r}, expected one of {ANNOTATOR_KINDS}")
        if self.kind == "external_http" and not self.endpoint:
            raise ValueError("external_http annotator needs an endpoint")


@dataclass
class PipelineConfig:
    """Everything one run needs: data source, model kinds, stage knobs, seeds."""

    graph_path: str | None = None
    sbm: SbmConfig = field(default_factory=SbmConfig)
    labels_per_class: int = 3
    val_frac: float = 0.32
    test_frac: float = 0.20
    expansion_ratio: float = 0.48
    teacher_kinds: list[str] = field(default_factory=lambda: list(DEFAULT_TEACHERS))
    student_kind: str = "gcn"
    annotator: AnnotatorConfig = field(default_factory=AnnotatorConfig)
    weights: KdWeights = field(default_factory=KdWeights)
    rl: RlConfig = field(default_factory=RlConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    k_nn: int = 4
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"

    def validate(self) -> None:
        if not 0.0 < self.expansion_ratio <= 1.0:
            raise ValueError(f"expansion_ratio must lie in (0, 1], got {self.expansion_ratio}")
        if not self.teacher_kinds:
            raise ValueError("need at least one teacher")
        for kind in [*self.teacher_kinds, self.student_kind]:
            if kind not in MODEL_KINDS:
                raise ValueError(f"unknown model kind {kind!r}, expected one of {MODEL_KINDS}")
        if self.labels_per_class < 1:
            raise ValueError(f"labels_per_class must be >= 1, got {self.labels_per_class}")
        if self.k_nn < 1:
            raise ValueError(f"k_nn must be >= 1, got {self.k_nn}")
        if not self.seeds:
            raise ValueError("seeds list is empty")
        self.sbm.validate()
        self.annotator.validate()
        self.weights.validate()
        self.rl.validate()
        self.training.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fill_dataclass(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown {where} config keys: {', '.join(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a validated PipelineConfig from a plain dict (parsed JSON)."""
    if not isinstance(data, dict):
        raise ValueError(f"config root must be an object, got {type(data).__name__}")
    data = dict(data)
    nested = {
        "sbm": (SbmConfig, "sbm"),
        "annotator": (AnnotatorConfig, "annotator"),
        "weights": (KdWeights, "weights"),
        "rl": (RlConfig, "rl"),
        "training": (TrainConfig, "training"),
    }
    kwargs = {}
    for key, (cls, where) in nested.items():
        if key in data:
            sub = data.pop(key)
            if not isinstance(sub, dict):
                raise ValueError(f"config key {key!r} must be an object")
            kwargs[key] = _fill_dataclass(cls, sub, where)
    cfg = _fill_dataclass(PipelineConfig, {**data, **kwargs}, "pipeline")
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    """Read and validate a JSON config file."""
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))
