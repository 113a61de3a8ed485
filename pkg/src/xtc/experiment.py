"""End-to-end runs built from an :class:`~xtc.config.ExperimentSpec`.

Step I (``reduce``) copies selected teacher blocks into a shallower student;
Step II (``compress``) quantizes it and trains with layerwise KD.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ExperimentSpec
from .data import AugmenterSpec, ToyTaskSpec, augment, generate_dataset, synonym_table
from .model import (EncoderModel, TransformerConfig, attach_lora, init_student_from_teacher, load_checkpoint,
                    select_layers, skip_indices)
from .quantization import QuantizerSpec
from .trainer import RunResult, continue_train, seed_stream, train


def task_spec(spec: ExperimentSpec):
    t = spec.task
    data_seed = int(seed_stream(spec.seed, "data").integers(2**31))
    return ToyTaskSpec(vocab_size=t.vocab_size, seq_len=t.seq_len, rule=t.rule, num_classes=t.num_classes,
                       n_train=t.n_train, n_val=t.n_val, seed=data_seed, num_groups=t.num_groups,
                       pattern=tuple(t.pattern), max_gap=t.max_gap)


def build_task(spec):
    return generate_dataset(task_spec(spec))


def training_set(spec, task):
    """The original training split, augmented ``k``-fold when DA is on."""
    if not spec.augment.enabled or spec.augment.k == 1:
        return task.train
    aug_seed = int(seed_stream(spec.seed, "augment").integers(2**31))
    aug = AugmenterSpec(synonym_table(task.spec), p=spec.augment.p, k=spec.augment.k, seed=aug_seed)
    return augment(task.train, aug, task=task.spec)


def model_config(spec, layers, act_bits=0):
    m, t = spec.model, spec.task
    return TransformerConfig(num_layers=layers, hidden=m.hidden, heads=m.heads, ffn_dim=m.ffn_dim,
                             vocab_size=t.vocab_size, max_seq_len=t.seq_len, num_classes=t.num_classes,
                             activation=m.activation, act_bits=act_bits, dropout=m.dropout)


def train_teacher(spec, task):
    """Full-precision teacher fitted on hard labels (optionally of the augmented split)."""
    teacher = EncoderModel(model_config(spec, spec.model.teacher_layers), rng=seed_stream(spec.seed, "teacher"))
    tspec = spec.replace(**{"kd.objective": "labels", "kd.kind": "one_stage",
                            "optim.batch_size": spec.teacher.batch_size})
    fit_on = training_set(spec, task) if spec.teacher.augment else task.train
    result = train(tspec, None, teacher, fit_on, task.val, peak_lr=spec.teacher.peak_lr,
                   epochs=spec.teacher.epochs)
    return result.model, result.log


def get_teacher(spec, task):
    if spec.teacher.path:
        return load_checkpoint(spec.teacher.path), None
    return train_teacher(spec, task)


def reduce(spec, teacher):
    """Step I: a ``student.layers``-deep model, initialised from teacher blocks or at random."""
    s = spec.student
    n_teacher = teacher.config.num_layers
    if s.init == "random":
        student = EncoderModel(model_config(spec, s.layers), rng=seed_stream(spec.seed, "init"))
        # pair with the layers a skip student would have used
        student.source_layers = list(skip_indices(n_teacher, s.layers))
        return student
    selection = select_layers(n_teacher, s.layers, s.init, s.indices)
    return init_student_from_teacher(teacher, selection)


def quantize_student(spec, student):
    """Attach the weight/activation quantizers and optional LoRa residuals."""
    q = spec.quant
    wspec = QuantizerSpec.for_bits(q.weight_bits, granularity=q.granularity,
                                   ternary_threshold_factor=q.ternary_threshold_factor, ste_clip=q.ste_clip)
    student.set_quantization(wspec, embeddings=q.quantize_embeddings)
    student.config = student.config.replace(act_bits=q.act_bits if q.weight_bits < 32 else 0)
    if spec.lora.rank:
        attach_lora(student, spec.lora.rank, spec.lora.init_scale, rng=seed_stream(spec.seed, "lora"))
    return student


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    teacher: EncoderModel
    run: RunResult

    @property
    def best_accuracy(self):
        return self.run.best_accuracy

    @property
    def student(self):
        return self.run.model


def run_experiment(spec, teacher=None, task=None):
    """Build data, (train) the teacher, reduce, quantize, distil, then continue if asked."""
    task = task if task is not None else build_task(spec)
    if teacher is None:
        teacher, _ = get_teacher(spec, task)
    student = quantize_student(spec, reduce(spec, teacher))
    train_set = training_set(spec, task)
    run = train(spec, teacher, student, train_set, task.val)
    if spec.continue_rounds:
        run = continue_train(spec, teacher, run, train_set, task.val)
    return ExperimentResult(spec, teacher, run)
