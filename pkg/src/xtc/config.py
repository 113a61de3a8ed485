"""Experiment description, YAML (de)serialisation and schema validation.

A config file is a YAML mapping with one flat section per concern::

    schema_version: 1
    seed: 0
    task:     {rule: majority_class, vocab_size: 256, seq_len: 32, ...}
    model:    {hidden: 64, heads: 4, ffn_dim: 128, teacher_layers: 4, ...}
    teacher:  {path: null, epochs: 6, peak_lr: 1.0e-3, augment: true}
    student:  {layers: 2, init: skip}
    quant:    {weight_bits: 1, act_bits: 8, granularity: per_tensor}
    kd:       {kind: one_stage, attention: post_softmax, objective: kd}
    budget:   {label: A, task_class: qnli_like, longer: false}
    optim:    {peak_lr: 1.0e-4, lr_scale: 10.0, lr_grid: [...], batch_size: 32, ...}
    augment:  {enabled: true, p: 0.3, k: 5}
    lora:     {rank: 0, init_scale: 0.02}
    continue_rounds: 0

Missing keys take their defaults; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import jsonschema
import yaml

from .errors import ConfigurationError

SCHEMA_VERSION = 1
LR_GRID = (2e-5, 1e-4, 5e-4)


@dataclass
class TaskSection:
    rule: str = "majority_class"
    vocab_size: int = 256
    seq_len: int = 32
    num_classes: int = 8
    n_train: int = 5000
    n_val: int = 1000
    num_groups: int = 16
    pattern: list = field(default_factory=lambda: [1, 2])
    max_gap: int = 1


@dataclass
class ModelSection:
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 128
    teacher_layers: int = 4
    activation: str = "gelu"
    dropout: float = 0.0


@dataclass
class TeacherSection:
    path: str | None = None
    epochs: int = 6
    peak_lr: float = 1e-3
    batch_size: int = 32
    augment: bool = True  # fit on the augmented split


@dataclass
class StudentSection:
    layers: int = 2
    init: str = "skip"  # skip | top | bottom | explicit | random
    indices: list | None = None


@dataclass
class QuantSection:
    weight_bits: int = 1
    act_bits: int = 8
    granularity: str = "per_tensor"
    quantize_embeddings: bool = True
    ternary_threshold_factor: float = 0.7
    ste_clip: float | None = None


@dataclass
class KDSection:
    kind: str = "one_stage"
    attention: str = "post_softmax"
    objective: str = "kd"  # kd | labels


@dataclass
class BudgetSection:
    label: str = "A"
    task_class: str = "qnli_like"
    longer: bool = False
    epochs: int | None = None  # explicit override of the preset


@dataclass
class OptimSection:
    peak_lr: float = 1e-4
    lr_scale: float = 10.0  # multiplies peak_lr and every grid value
    lr_grid: list = field(default_factory=lambda: list(LR_GRID))
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    stage_one_multiplier: float = 2.5
    max_grad_norm: float | None = None


@dataclass
class AugmentSection:
    enabled: bool = True
    p: float = 0.3
    k: int = 5


@dataclass
class LoRaSection:
    rank: int = 0
    init_scale: float = 0.02


@dataclass
class ExperimentSpec:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: StudentSection = field(default_factory=StudentSection)
    quant: QuantSection = field(default_factory=QuantSection)
    kd: KDSection = field(default_factory=KDSection)
    budget: BudgetSection = field(default_factory=BudgetSection)
    optim: OptimSection = field(default_factory=OptimSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    lora: LoRaSection = field(default_factory=LoRaSection)
    continue_rounds: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        """Copy with dotted-path overrides, e.g. ``replace(**{"optim.peak_lr": 1e-3})``."""
        data = self.to_dict()
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigurationError("unknown field", path=key)
            node[leaf] = value
        return from_dict(data)

    def spec_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def effective_lr(self):
        return self.optim.peak_lr * self.optim.lr_scale


SECTIONS = {
    "task": TaskSection, "model": ModelSection, "teacher": TeacherSection, "student": StudentSection,
    "quant": QuantSection, "kd": KDSection, "budget": BudgetSection, "optim": OptimSection,
    "augment": AugmentSection, "lora": LoRaSection,
}

_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_BOOL = {"type": "boolean"}


def _section(props, required=()):
    return {"type": "object", "additionalProperties": False, "properties": props, "required": list(required)}


SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "continue_rounds": {"type": "integer", "minimum": 0},
        "task": _section({
            "rule": {"enum": ["pattern_presence", "token_parity", "majority_class"]},
            "vocab_size": _POS, "seq_len": _POS, "num_classes": {"type": "integer", "minimum": 2},
            "n_train": _POS, "n_val": _POS, "num_groups": _POS,
            "pattern": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
            "max_gap": _POS,
        }),
        "model": _section({
            "hidden": _POS, "heads": _POS, "ffn_dim": _POS, "teacher_layers": _POS,
            "activation": {"enum": ["gelu", "relu"]},
            "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        }),
        "teacher": _section({
            "path": {"type": ["string", "null"]}, "epochs": _POS,
            "peak_lr": {"type": "number", "exclusiveMinimum": 0}, "batch_size": _POS, "augment": _BOOL,
        }),
        "student": _section({
            "layers": _POS, "init": {"enum": ["skip", "top", "bottom", "explicit", "random"]},
            "indices": {"type": ["array", "null"], "items": _POS},
        }),
        "quant": _section({
            "weight_bits": {"enum": [1, 2, 32]}, "act_bits": {"enum": [0, 8]},
            "granularity": {"enum": ["per_tensor", "per_row"]}, "quantize_embeddings": _BOOL,
            "ternary_threshold_factor": {"type": "number", "exclusiveMinimum": 0},
            "ste_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
        }),
        "kd": _section({
            "kind": {"enum": ["one_stage", "two_stage", "three_stage"]},
            "attention": {"enum": ["post_softmax", "pre_softmax"]},
            "objective": {"enum": ["kd", "labels"]},
        }),
        "budget": _section({
            "label": {"enum": ["A", "B", "C"]},
            "task_class": {"enum": ["large_no_DA", "qnli_like", "small_DA", "cola_mrpc_like"]},
            "longer": _BOOL, "epochs": {"type": ["integer", "null"], "minimum": 1},
        }),
        "optim": _section({
            "peak_lr": {"type": "number", "exclusiveMinimum": 0},
            "lr_scale": {"type": "number", "exclusiveMinimum": 0},
            "lr_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
            "batch_size": _POS, "weight_decay": {"type": "number", "minimum": 0},
            "beta1": _PROB, "beta2": _PROB, "eps": {"type": "number", "exclusiveMinimum": 0},
            "warmup_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "stage_one_multiplier": {"type": "number", "exclusiveMinimum": 0},
            "max_grad_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
        }),
        "augment": _section({"enabled": _BOOL, "p": _PROB, "k": _POS}),
        "lora": _section({"rank": {"type": "integer", "minimum": 0}, "init_scale": {"type": "number", "minimum": 0}}),
    },
}


def validate(data):
    """Raise :class:`ConfigurationError` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigurationError(err.message, path=path)
    student = data.get("student", {})
    if student.get("init") == "explicit" and not student.get("indices"):
        raise ConfigurationError("explicit init needs indices", path="student.indices")
    model = data.get("model", {})
    hidden, heads = model.get("hidden", ModelSection.hidden), model.get("heads", ModelSection.heads)
    if hidden % heads:
        raise ConfigurationError("hidden must be divisible by heads", path="model.heads")
    layers = student.get("layers", StudentSection.layers)
    if layers > model.get("teacher_layers", ModelSection.teacher_layers):
        raise ConfigurationError("student cannot be deeper than the teacher", path="student.layers")


def from_dict(data):
    data = dict(data or {})
    validate(data)
    kwargs = {}
    for key, value in data.items():
        if key in SECTIONS:
            kwargs[key] = SECTIONS[key](**value)
        else:
            kwargs[key] = value
    return ExperimentSpec(**kwargs)


def load(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}", path=str(path)) from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"not valid YAML: {exc}", path=str(path)) from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError("config must be a mapping", path="<root>")
    return from_dict(data or {})


def dumps(spec):
    return yaml.safe_dump(spec.to_dict(), sort_keys=False)


def save(spec, path):
    with open(path, "w") as fh:
        fh.write(dumps(spec))


def output_root(default="runs"):
    """Artifacts go under ``$XTC_OUT`` when set."""
    return os.environ.get("XTC_OUT", default)
