"""Quantization-aware distillation loop, LR grid search and continued training."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .distillation import KDPairing, KDWeights, kd_terms
from .errors import TrainingDiverged
from .schedule import LRSchedule, budget_preset, lr_at, stage_at, total_steps

STEP_COLUMNS = ("step", "stage", "gamma", "beta", "lr", "loss_logit", "loss_hidden", "loss_att", "total")
EVAL_COLUMNS = ("epoch", "step", "accuracy", "best")

_STREAM_IDS = {"data": 0, "augment": 1, "init": 2, "dropout": 3, "order": 4, "teacher": 5, "lora": 6}


def seed_stream(seed, name, *extra):
    """Independent generator for one purpose (data, init, order, ...) under a master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_IDS[name], *extra]))


# -- optimizer ----------------------------------------------------------------

def _decays(name):
    return not (name.endswith(".bias") or ".ln" in name)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


class AdamW:
    """Adam with bias correction and decoupled weight decay on non-bias, non-LN tensors."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = dict(named_params)
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
            beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        s = self.state
        s.step += 1
        c1 = 1.0 - s.beta1 ** s.step
        c2 = 1.0 - s.beta2 ** s.step
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = s.m[name], s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + s.eps)
            if s.weight_decay and _decays(name):
                update += s.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / (norm + 1e-12))
    return norm


# -- metrics ------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    stage: int
    gamma: int
    beta: int
    lr: float
    loss_logit: float
    loss_hidden: float
    loss_att: float
    total: float


@dataclass
class EvalRecord:
    epoch: int
    step: int
    accuracy: float
    best: float


@dataclass
class MetricsLog:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def add_step(self, record):
        if self.steps and record.step <= self.steps[-1].step:
            raise ValueError(f"step {record.step} does not follow {self.steps[-1].step}")
        self.steps.append(record)

    def add_eval(self, epoch, step, accuracy):
        best = max(accuracy, self.evals[-1].best) if self.evals else accuracy
        rec = EvalRecord(epoch, step, float(accuracy), float(best))
        self.evals.append(rec)
        return rec

    @property
    def best_accuracy(self):
        return self.evals[-1].best if self.evals else float("nan")

    @property
    def best_epoch(self):
        """First epoch reaching the best accuracy."""
        for rec in self.evals:
            if rec.accuracy == self.best_accuracy:
                return rec.epoch
        return None

    def column(self, name):
        return np.array([getattr(r, name) for r in self.steps])

    def steps_csv(self):
        return _to_csv(STEP_COLUMNS, self.steps)

    def evals_csv(self):
        return _to_csv(EVAL_COLUMNS, self.evals)

    def summary(self, spec_hash=None, **extra):
        return {"best_accuracy": self.best_accuracy, "best_epoch": self.best_epoch,
                "steps": len(self.steps), "spec_hash": spec_hash, **extra}

    def write(self, directory, prefix="", spec_hash=None, **extra):
        """Write ``{prefix}steps.csv``, ``{prefix}evals.csv`` and ``{prefix}summary.json``."""
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{prefix}steps.csv").write_text(self.steps_csv())
        (d / f"{prefix}evals.csv").write_text(self.evals_csv())
        summary = self.summary(spec_hash, **extra)
        (d / f"{prefix}summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return summary

    @classmethod
    def read(cls, directory, prefix=""):
        from pathlib import Path

        d = Path(directory)
        log = cls()
        log.steps = _from_csv(d / f"{prefix}steps.csv", StepRecord)
        log.evals = _from_csv(d / f"{prefix}evals.csv", EvalRecord)
        return log


def _to_csv(columns, records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in columns)])
    return buf.getvalue()


def _from_csv(path, record_type):
    types = record_type.__annotations__
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(record_type(**{k: (int if types[k] == "int" else float)(v) for k, v in row.items()}))
    return out


# -- training -----------------------------------------------------------------

@dataclass
class RunResult:
    model: object
    log: MetricsLog
    peak_lr: float = None
    extra_logs: list = field(default_factory=list)  # one per continued round

    @property
    def best_accuracy(self):
        logs = [self.log, *self.extra_logs]
        return max(lg.best_accuracy for lg in logs)


def evaluate(model, dataset, batch_size=256):
    """Accuracy of ``model`` on ``dataset``; no state is touched."""
    if len(dataset) == 0:
        return float("nan")
    preds = model.predict(dataset.tokens, batch_size=batch_size)
    return float(np.mean(preds == dataset.labels))


def budget_epochs(spec):
    if spec.budget.epochs is not None:
        return spec.budget.epochs
    return budget_preset(spec.budget.label, spec.budget.task_class, spec.budget.longer).epochs


def _loss_value(t):
    return float(t.data) if t is not None else 0.0


def train(spec, teacher, student, train_set, val_set, *, peak_lr=None, round_index=0, epochs=None):
    """Train ``student`` in place; return a :class:`RunResult` holding the best-validation copy.

    ``teacher`` is only read (under ``no_grad``) and may be ``None`` when the
    objective is hard labels.  ``peak_lr`` defaults to the config's peak times
    its scale factor.
    """
    epochs = budget_epochs(spec) if epochs is None else epochs
    bs = spec.optim.batch_size
    n = len(train_set)
    steps_per_epoch = math.ceil(n / bs)
    T_total = total_steps(epochs, n, bs)
    kind = spec.kd.kind
    peak = spec.effective_lr if peak_lr is None else peak_lr
    schedule = LRSchedule(peak, T_total, kind, spec.optim.warmup_fraction, spec.optim.stage_one_multiplier)
    use_kd = spec.kd.objective == "kd"
    if use_kd:
        if teacher is None:
            raise ValueError("KD objective needs a teacher")
        sources = student.source_layers or []
        pairing = KDPairing.from_sources(sources) if len(sources) == len(student.layers) else \
            KDPairing.from_sources(_spread(len(student.layers), len(teacher.layers)))

    order_rng = seed_stream(spec.seed, "order", round_index)
    drop_rng = seed_stream(spec.seed, "dropout", round_index)
    params = student.named_parameters()
    opt = AdamW(params, spec.optim.beta1, spec.optim.beta2, spec.optim.eps, spec.optim.weight_decay)
    log = MetricsLog()
    best_state, best_acc = None, -1.0

    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            ids, labels = train_set.tokens[idx], train_set.labels[idx]
            gamma, beta, stage = stage_at(step, T_total, kind)
            lr = lr_at(step, schedule)
            out = student.forward(ids, training=True, rng=drop_rng)
            if use_kd:
                with T.no_grad():
                    t_out = teacher.forward(ids)
                terms = kd_terms(out, t_out, pairing, KDWeights(gamma, beta), spec.kd.attention)
                loss = terms.total
                parts = (_loss_value(terms.logit), _loss_value(terms.hidden), _loss_value(terms.att))
            else:
                loss = T.cross_entropy(out.logits, labels)
                parts = (float(loss.data), 0.0, 0.0)
            rec = StepRecord(step, stage, gamma, beta, float(lr), *parts, float(loss.data))
            if not np.isfinite(rec.total):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})", record=rec)
            opt.zero_grad()
            loss.backward()
            if spec.optim.max_grad_norm is not None:
                clip_grad_norm(params.values(), spec.optim.max_grad_norm)
            opt.step(lr)
            log.add_step(rec)
            step += 1
        acc = evaluate(student, val_set)
        log.add_eval(epoch + 1, step, acc)
        if acc > best_acc:
            best_acc, best_state = acc, student.state_dict()

    best = student.copy()
    best.load_state_dict(best_state)
    return RunResult(best, log, peak)


def _spread(student_layers, teacher_layers):
    from .model import skip_indices

    return skip_indices(teacher_layers, student_layers)


def continue_train(spec, teacher, result, train_set, val_set, rounds=None):
    """Repeat full budget rounds from the best latent weights, each with a fresh schedule."""
    rounds = spec.continue_rounds if rounds is None else rounds
    for r in range(1, rounds + 1):
        student = result.model.copy()
        nxt = train(spec, teacher, student, train_set, val_set, peak_lr=result.peak_lr, round_index=r)
        # keep whichever round holds the best checkpoint
        model = nxt.model if nxt.log.best_accuracy > result.best_accuracy else result.model
        result = RunResult(model, result.log, result.peak_lr, [*result.extra_logs, nxt.log])
    return result


def lr_grid_search(spec, grid=None, runner=None, **train_kw):
    """Run once per grid value; return ``(best grid value, best run)``; ties go to the smaller LR.

    ``runner(lr)`` returns anything with ``best_accuracy``.  Without one, the
    student in ``train_kw`` is copied and trained with peak ``lr * lr_scale``.
    """
    grid = list(spec.optim.lr_grid if grid is None else grid)
    if not grid:
        raise ValueError("empty learning-rate grid")
    if runner is None:
        teacher, student = train_kw["teacher"], train_kw["student"]
        train_set, val_set = train_kw["train_set"], train_kw["val_set"]

        def runner(lr):
            return train(spec, teacher, student.copy(), train_set, val_set, peak_lr=lr * spec.optim.lr_scale)

    best_lr, best_run = None, None
    for lr in sorted(grid):
        run = runner(lr)
        if best_run is None or run.best_accuracy > best_run.best_accuracy:
            best_lr, best_run = lr, run
    return best_lr, best_run

