"""Layerwise knowledge-distillation losses.

The combined objective is ``gamma * L_logit + beta * sum_pairs (L_att + L_hidden)``
with ``gamma, beta`` in {0, 1}.  Every term is a mean over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class KDWeights:
    gamma: int = 1
    beta: int = 1

    def __post_init__(self):
        if self.gamma not in (0, 1) or self.beta not in (0, 1):
            raise ConfigurationError("gamma and beta must be 0 or 1", path="kd_weights")
        if self.gamma + self.beta < 1:
            raise ConfigurationError("gamma and beta cannot both be zero", path="kd_weights")


@dataclass(frozen=True)
class KDPairing:
    """(student layer, teacher layer) pairs, both 1-based."""

    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(s), int(t)) for s, t in self.pairs))
        students = [s for s, _ in self.pairs]
        if sorted(students) != list(range(1, len(students) + 1)):
            raise ConfigurationError("pairing must cover every student layer exactly once", path="pairing")
        if any(t < 1 for _, t in self.pairs):
            raise ConfigurationError("teacher layer indices are 1-based", path="pairing")

    @classmethod
    def from_sources(cls, source_layers):
        return cls(tuple((i + 1, t) for i, t in enumerate(source_layers)))

    def validate(self, student_layers, teacher_layers):
        if len(self.pairs) != student_layers:
            raise ConfigurationError(f"pairing has {len(self.pairs)} entries for {student_layers} student layers",
                                     path="pairing")
        if any(t > teacher_layers for _, t in self.pairs):
            raise ConfigurationError(f"teacher has only {teacher_layers} layers", path="pairing")


def loss_hidden(h_student, h_teacher):
    """MSE between hidden-state matrices."""
    return T.mse(h_student, h_teacher)


def loss_att(a_student, a_teacher):
    """Mean over heads of the per-head MSE between attention maps.

    Maps are laid out ``[..., heads, l, l]``; with equal map sizes the mean
    of per-head MSEs equals the MSE over every entry.
    """
    a_student, a_teacher = T.as_tensor(a_student), T.as_tensor(a_teacher)
    if a_student.ndim < 3 or a_teacher.ndim < 3:
        raise DimensionError("attention maps need a head axis: [..., heads, l, l]")
    if a_student.shape[-3] != a_teacher.shape[-3]:
        raise DimensionError(f"head count {a_student.shape[-3]} != {a_teacher.shape[-3]}")
    return T.mse(a_student, a_teacher)


def loss_logit(p_student, p_teacher):
    """Soft cross entropy of the student against the teacher distribution (T = 1)."""
    return T.soft_cross_entropy(p_student, p_teacher)


@dataclass
class KDTerms:
    logit: T.Tensor
    hidden: T.Tensor
    att: T.Tensor
    total: T.Tensor


def kd_terms(student_out, teacher_out, pairing, weights, attention="post_softmax"):
    """All three loss terms plus the weighted total.

    Terms are always computed (so they can be logged); only the weighted
    ones carry gradient into the total.
    """
    s_att = student_out.attentions if attention == "post_softmax" else student_out.scores
    t_att = teacher_out.attentions if attention == "post_softmax" else teacher_out.scores
    pairing.validate(len(student_out.hiddens), len(teacher_out.hiddens))
    logit = loss_logit(student_out.logits, teacher_out.logits)
    hidden = att = None
    for s, t in pairing.pairs:
        h = loss_hidden(student_out.hiddens[s - 1], teacher_out.hiddens[t - 1])
        a = loss_att(s_att[s - 1], t_att[t - 1])
        hidden = h if hidden is None else hidden + h
        att = a if att is None else att + a
    if weights.gamma and weights.beta:
        total = logit + (att + hidden)
    elif weights.gamma:
        total = logit
    else:
        total = att + hidden
    return KDTerms(logit, hidden, att, total)


def kd_objective(student_out, teacher_out, pairing, weights, attention="post_softmax"):
    """``gamma * L_logit + beta * sum over paired layers of (L_att + L_hidden)``."""
    return kd_terms(student_out, teacher_out, pairing, weights, attention).total
