"""A small BERT-style encoder whose weight matrices are quantization aware.

Every projection keeps full-precision *latent* weights; the forward pass
uses a freshly quantized view (plus an optional low-rank residual ``U @ V``)
and gradients reach the latent weights through a straight-through estimator.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, FormatError, InputError
from .quantization import (
    NONE,
    PackedTensor,
    QuantizerSpec,
    decode_record,
    encode_packed,
    encode_raw,
    pack,
    quantize_activation_ste,
    quantize_weight,
    quantize_with_scales,
    quantize_weight_ste,
    unpack,
)
from .tensor import Tensor

ACTIVATIONS = ("gelu", "relu")


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 256
    max_seq_len: int = 32
    num_classes: int = 2
    activation: str = "gelu"
    act_bits: int = 0  # 8 enables INT8 fake-quant on inputs of quantized projections
    dropout: float = 0.0

    def __post_init__(self):
        for f in ("num_layers", "hidden", "heads", "ffn_dim", "vocab_size", "max_seq_len", "num_classes"):
            if getattr(self, f) < 1:
                raise ConfigurationError("must be >= 1", path=f)
        if self.hidden % self.heads:
            raise ConfigurationError("hidden must be divisible by heads", path="hidden")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"must be one of {ACTIVATIONS}", path="activation")
        if self.act_bits not in (0, 8):
            raise ConfigurationError("must be 0 (off) or 8", path="act_bits")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("must be in [0, 1)", path="dropout")

    @property
    def head_dim(self):
        return self.hidden // self.heads

    def replace(self, **kw):
        return TransformerConfig(**{**self.__dict__, **kw})


@dataclass
class LoRaAdapter:
    """Full-precision low-rank residual ``U @ V`` added to a quantized weight."""

    U: Tensor
    V: Tensor

    @property
    def rank(self):
        return self.U.shape[1]


class QuantLinear:
    """``y = x @ (Q(W) + U @ V) + b`` with ``W`` stored as [d_in, d_out]."""

    def __init__(self, d_in, d_out, rng=None, spec=NONE, std=0.02):
        w = rng.normal(0.0, std, size=(d_in, d_out)) if rng is not None else np.zeros((d_in, d_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)
        self.spec = spec
        self.adapter = None

    @property
    def shape(self):
        return self.weight.shape

    def effective_weight(self):
        w = quantize_weight_ste(self.weight, self.spec)
        if self.adapter is not None:
            w = w + self.adapter.U @ self.adapter.V
        return w

    def effective_array(self):
        w = quantize_weight(self.weight.data, self.spec)
        if self.adapter is not None:
            w = w + self.adapter.U.data @ self.adapter.V.data
        return w

    def __call__(self, x, act_bits=0):
        if act_bits == 8 and self.spec.kind != "none":
            x = quantize_activation_ste(x)
        return T.linear(x, self.effective_weight(), self.bias)


class LayerNorm:
    def __init__(self, dim):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return T.layernorm(x, self.gain, self.bias)


class EncoderLayer:
    PROJECTIONS = ("q", "k", "v", "o", "up", "down")

    def __init__(self, cfg, rng):
        d, f = cfg.hidden, cfg.ffn_dim
        self.q = QuantLinear(d, d, rng)
        self.k = QuantLinear(d, d, rng)
        self.v = QuantLinear(d, d, rng)
        self.o = QuantLinear(d, d, rng)
        self.up = QuantLinear(d, f, rng)
        self.down = QuantLinear(f, d, rng)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)

    def projections(self):
        return [(name, getattr(self, name)) for name in self.PROJECTIONS]


@dataclass
class ModelOutputs:
    logits: Tensor
    hiddens: list = field(default_factory=list)
    attentions: list = field(default_factory=list)
    scores: list = field(default_factory=list)


class EncoderModel:
    """Token + position embeddings, ``num_layers`` post-LN blocks, mean-pooled classifier."""

    def __init__(self, config, rng=None, seed=0):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(seed)
        d = config.hidden
        self.token_embedding = Tensor(rng.normal(0.0, 0.02, (config.vocab_size, d)), requires_grad=True)
        self.position_embedding = Tensor(rng.normal(0.0, 0.02, (config.max_seq_len, d)), requires_grad=True)
        self.embedding_spec = NONE
        self.embedding_ln = LayerNorm(d)
        self.layers = [EncoderLayer(config, rng) for _ in range(config.num_layers)]
        self.classifier = QuantLinear(d, config.num_classes, rng)
        # 1-based teacher layer each block was initialised from (used for KD pairing)
        self.source_layers = None

    # -- parameters -------------------------------------------------------
    def named_parameters(self):
        out = {
            "embeddings.token": self.token_embedding,
            "embeddings.position": self.position_embedding,
            "embeddings.ln.gain": self.embedding_ln.gain,
            "embeddings.ln.bias": self.embedding_ln.bias,
        }
        for i, layer in enumerate(self.layers):
            for name, lin in layer.projections():
                out[f"layers.{i}.{name}.weight"] = lin.weight
                out[f"layers.{i}.{name}.bias"] = lin.bias
                if lin.adapter is not None:
                    out[f"layers.{i}.{name}.lora_u"] = lin.adapter.U
                    out[f"layers.{i}.{name}.lora_v"] = lin.adapter.V
            for ln in ("ln1", "ln2"):
                out[f"layers.{i}.{ln}.gain"] = getattr(layer, ln).gain
                out[f"layers.{i}.{ln}.bias"] = getattr(layer, ln).bias
        out["classifier.weight"] = self.classifier.weight
        out["classifier.bias"] = self.classifier.bias
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def quantized_matrices(self):
        """(name, QuantLinear-like) for every matrix that takes a weight quantizer."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, lin in layer.projections():
                out.append((f"layers.{i}.{name}.weight", lin))
        return out

    def matrix_specs(self):
        specs = {"embeddings.token": self.embedding_spec, "embeddings.position": self.embedding_spec}
        for name, lin in self.quantized_matrices():
            specs[name] = lin.spec
        specs["classifier.weight"] = self.classifier.spec
        return specs

    def set_quantization(self, spec, embeddings=True):
        """Apply ``spec`` to every projection (and embeddings); the head stays fp32."""
        for _, lin in self.quantized_matrices():
            lin.spec = spec
        self.embedding_spec = spec if embeddings else NONE
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def copy(self):
        return copy.deepcopy(self)

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    # -- forward ----------------------------------------------------------
    def _check_ids(self, ids):
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise InputError(f"token ids must be [batch, seq], got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise InputError("token ids must be integers")
        if ids.shape[1] > self.config.max_seq_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds {self.config.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise InputError("token id outside the vocabulary")
        return ids

    def forward(self, ids, training=False, rng=None):
        cfg = self.config
        ids = self._check_ids(ids)
        batch, seq = ids.shape
        h, dk = cfg.heads, cfg.head_dim
        drop = cfg.dropout if training and rng is not None else 0.0

        tok = quantize_weight_ste(self.token_embedding, self.embedding_spec)
        pos = quantize_weight_ste(self.position_embedding, self.embedding_spec)
        x = T.embedding(tok, ids) + T.embedding(pos, np.arange(seq))
        x = T.dropout(self.embedding_ln(x), drop, rng)

        out = ModelOutputs(logits=None)
        scale = 1.0 / math.sqrt(dk)
        for layer in self.layers:
            def heads(t):
                return T.transpose(T.reshape(t, (batch, seq, h, dk)), (0, 2, 1, 3))

            q = heads(layer.q(x, cfg.act_bits))
            k = heads(layer.k(x, cfg.act_bits))
            v = heads(layer.v(x, cfg.act_bits))
            scores = T.matmul(q, T.swap_last(k)) * scale
            att = T.softmax(scores)
            ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (batch, seq, cfg.hidden))
            x = layer.ln1(x + T.dropout(layer.o(ctx, cfg.act_bits), drop, rng))
            f = layer.down(T.activation(layer.up(x, cfg.act_bits), cfg.activation), cfg.act_bits)
            x = layer.ln2(x + T.dropout(f, drop, rng))
            out.hiddens.append(x)
            out.attentions.append(att)
            out.scores.append(scores)
        pooled = T.mean(x, axis=1)
        out.logits = self.classifier(pooled)
        return out

    __call__ = forward

    def predict(self, ids, batch_size=256):
        ids = np.asarray(ids)
        preds = []
        with T.no_grad():
            for s in range(0, len(ids), batch_size):
                preds.append(self.forward(ids[s:s + batch_size]).logits.data.argmax(axis=-1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


# -- layer reduction --------------------------------------------------------

STRATEGIES = ("skip", "top", "bottom", "explicit")


@dataclass(frozen=True)
class LayerSelection:
    strategy: str
    indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}", path="strategy")
        if not self.indices:
            raise ConfigurationError("at least one layer must be selected", path="indices")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])) or self.indices[0] < 1:
            raise ConfigurationError("indices must be strictly increasing and 1-based", path="indices")


def skip_indices(teacher_layers, student_layers):
    """Every-other-layer style selection.

    When the depths divide evenly the stride is ``teacher / student`` and the
    last teacher layer is kept (12 -> 6 gives 2, 4, ..., 12; 12 -> 4 gives
    3, 6, 9, 12).  Otherwise the stride is the floor of that ratio and the
    block is centred with the odd slack layer placed at the bottom (12 -> 5
    gives 3, 5, 7, 9, 11).
    """
    if not 1 <= student_layers <= teacher_layers:
        raise ConfigurationError(f"cannot select {student_layers} of {teacher_layers} layers", path="layers")
    if teacher_layers % student_layers == 0:
        k = teacher_layers // student_layers
        return tuple(k * (i + 1) for i in range(student_layers))
    k = teacher_layers // student_layers
    slack = teacher_layers - 1 - k * (student_layers - 1)
    start = 1 + math.ceil(slack / 2)
    return tuple(start + k * i for i in range(student_layers))


def select_layers(teacher_layers, student_layers, strategy="skip", indices=None):
    if strategy == "skip":
        idx = skip_indices(teacher_layers, student_layers)
    elif strategy == "top":
        idx = tuple(range(teacher_layers - student_layers + 1, teacher_layers + 1))
    elif strategy == "bottom":
        idx = tuple(range(1, student_layers + 1))
    elif strategy == "explicit":
        if indices is None or len(indices) != student_layers:
            raise ConfigurationError("explicit selection needs one index per student layer", path="indices")
        idx = tuple(indices)
    else:
        raise ConfigurationError(f"unknown strategy {strategy!r}", path="strategy")
    sel = LayerSelection(strategy, idx)
    if sel.indices[-1] > teacher_layers or len(sel.indices) != student_layers:
        raise ConfigurationError("selection does not fit the teacher", path="indices")
    return sel


def init_student_from_teacher(teacher, selection, student_config=None):
    """Build a shallower student whose blocks are copies of selected teacher blocks."""
    tc = teacher.config
    if student_config is not None:
        for f in ("hidden", "heads", "ffn_dim", "vocab_size", "max_seq_len", "num_classes"):
            if getattr(student_config, f) != getattr(tc, f):
                raise ConfigurationError("student width must match the teacher (width reduction is unsupported)",
                                         path=f)
    if selection.indices[-1] > tc.num_layers:
        raise ConfigurationError(f"teacher has only {tc.num_layers} layers", path="indices")
    cfg = (student_config or tc).replace(num_layers=len(selection.indices))
    student = EncoderModel.__new__(EncoderModel)
    student.config = cfg
    student.token_embedding = _clone(teacher.token_embedding)
    student.position_embedding = _clone(teacher.position_embedding)
    student.embedding_spec = teacher.embedding_spec
    student.embedding_ln = copy.deepcopy(teacher.embedding_ln)
    student.layers = [copy.deepcopy(teacher.layers[i - 1]) for i in selection.indices]
    student.classifier = copy.deepcopy(teacher.classifier)
    student.source_layers = list(selection.indices)
    for p in student.parameters():
        p.requires_grad = True
        p.grad = None
    return student


def _clone(t):
    out = Tensor(t.data.copy(), requires_grad=True)
    return out


def attach_lora(model, rank, init_scale=0.02, rng=None, seed=0):
    """Give every projection a rank-``rank`` residual with ``V = 0`` (output unchanged)."""
    if rank < 1:
        raise ConfigurationError("LoRa rank must be >= 1", path="lora_rank")
    rng = rng if rng is not None else np.random.default_rng(seed)
    for _, lin in model.quantized_matrices():
        d_in, d_out = lin.shape
        lin.adapter = LoRaAdapter(
            U=Tensor(rng.normal(0.0, init_scale, (d_in, rank)), requires_grad=True),
            V=Tensor(np.zeros((rank, d_out)), requires_grad=True),
        )
    return model


# -- checkpoints ------------------------------------------------------------
# "XTC1" | config (u32 x 9) | tensor count u32 | records

MAGIC = b"XTC1"
_CFG_FIELDS = ("num_layers", "hidden", "heads", "ffn_dim", "vocab_size", "max_seq_len",
               "num_classes", "activation", "act_bits")


def _encode_config(cfg):
    vals = [getattr(cfg, f) for f in _CFG_FIELDS]
    vals[_CFG_FIELDS.index("activation")] = ACTIVATIONS.index(cfg.activation)
    return struct.pack(f"<{len(vals)}I", *vals)


def checkpoint_bytes(model):
    specs = model.matrix_specs()
    records = []
    for name, p in model.named_parameters().items():
        spec = specs.get(name, NONE)
        if spec.kind in ("binary", "ternary"):
            q, alpha = quantize_with_scales(p.data, spec)
            records.append(encode_packed(name, pack(q, alpha, spec.bits, spec.granularity)))
        else:
            records.append(encode_raw(name, p.data))
    if model.source_layers is not None:
        records.append(encode_raw("meta.source_layers", np.asarray(model.source_layers, dtype=np.float32)))
    header = MAGIC + _encode_config(model.config) + struct.pack("<I", len(records))
    return header + b"".join(records)


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def model_from_bytes(buf):
    if bytes(buf[:4]) != MAGIC:
        raise FormatError("bad magic, not a checkpoint", offset=0)
    n_cfg = len(_CFG_FIELDS)
    need = 4 + 4 * n_cfg + 4
    if len(buf) < need:
        raise FormatError("truncated header", offset=len(buf))
    vals = list(struct.unpack_from(f"<{n_cfg}I", buf, 4))
    act = vals[_CFG_FIELDS.index("activation")]
    if act >= len(ACTIVATIONS):
        raise FormatError("unknown activation code", offset=4 + 4 * _CFG_FIELDS.index("activation"))
    kw = dict(zip(_CFG_FIELDS, vals))
    kw["activation"] = ACTIVATIONS[act]
    try:
        cfg = TransformerConfig(**kw)
    except ConfigurationError as exc:
        raise FormatError(f"invalid config block: {exc}", offset=4) from exc
    (count,) = struct.unpack_from("<I", buf, 4 + 4 * n_cfg)
    offset = need
    records = {}
    for _ in range(count):
        name, value, offset = decode_record(buf, offset)
        records[name] = value
    if offset != len(buf):
        raise FormatError("trailing bytes after the last record", offset=offset)

    model = EncoderModel(cfg, seed=0)
    lora = {n.rsplit(".", 1)[0] for n in records if n.endswith(".lora_u")}
    for name, lin in model.quantized_matrices():
        base = name.rsplit(".", 1)[0]
        if base in lora:
            r = records[base + ".lora_u"].shape[1]
            lin.adapter = LoRaAdapter(Tensor(np.zeros((lin.shape[0], r)), True),
                                      Tensor(np.zeros((r, lin.shape[1])), True))
    state = {}
    specs = {}
    for name, value in records.items():
        if name == "meta.source_layers":
            model.source_layers = [int(v) for v in value]
            continue
        if isinstance(value, PackedTensor):
            q, _ = unpack(value)
            state[name] = q
            specs[name] = QuantizerSpec({1: "binary", 2: "ternary"}[value.bits], granularity=value.granularity)
        else:
            state[name] = value
    model.load_state_dict(state)
    emb = specs.get("embeddings.token", NONE)
    model.embedding_spec = emb
    for name, lin in model.quantized_matrices():
        lin.spec = specs.get(name, NONE)
    return model


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
