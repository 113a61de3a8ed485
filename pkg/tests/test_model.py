import math

import numpy as np
import pytest

from xtc import tensor as T
from xtc.errors import ConfigurationError, FormatError, InputError
from xtc.model import (EncoderModel, TransformerConfig, attach_lora, checkpoint_bytes, init_student_from_teacher,
                       model_from_bytes, select_layers, skip_indices)
from xtc.quantization import QuantizerSpec

SMALL = TransformerConfig(num_layers=2, hidden=8, heads=2, ffn_dim=16, vocab_size=20, max_seq_len=6, num_classes=3)


def ids_batch(cfg, batch=4, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(batch, cfg.max_seq_len))


def reference_forward(model, ids):
    """Plain numpy forward pass written independently of the autodiff ops."""
    p = {k: v.data.astype(np.float64) for k, v in model.named_parameters().items()}
    cfg = model.config
    h, dk = cfg.heads, cfg.hidden // cfg.heads

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    x = p["embeddings.token"][ids] + p["embeddings.position"][: ids.shape[1]]
    x = ln(x, p["embeddings.ln.gain"], p["embeddings.ln.bias"])
    for i in range(cfg.num_layers):
        def lin(name, inp):
            return inp @ p[f"layers.{i}.{name}.weight"] + p[f"layers.{i}.{name}.bias"]

        ctx = np.zeros_like(x)
        for b in range(x.shape[0]):
            for head in range(h):
                sl = slice(head * dk, (head + 1) * dk)
                q, k, v = lin("q", x[b])[:, sl], lin("k", x[b])[:, sl], lin("v", x[b])[:, sl]
                s = q @ k.T / math.sqrt(dk)
                a = np.exp(s - s.max(-1, keepdims=True))
                a /= a.sum(-1, keepdims=True)
                ctx[b, :, sl] = a @ v
        x = ln(x + lin("o", ctx), p[f"layers.{i}.ln1.gain"], p[f"layers.{i}.ln1.bias"])
        f = lin("down", gelu(lin("up", x)))
        x = ln(x + f, p[f"layers.{i}.ln2.gain"], p[f"layers.{i}.ln2.bias"])
    return x.mean(axis=1) @ p["classifier.weight"] + p["classifier.bias"]


def test_forward_matches_straight_line_oracle():
    model = EncoderModel(SMALL, seed=3)
    for prm in model.parameters():  # move away from the near-zero init
        prm.data += np.random.default_rng(1).normal(0, 0.3, prm.shape).astype(np.float32)
    ids = ids_batch(SMALL)
    got = model(ids).logits.data
    np.testing.assert_allclose(got, reference_forward(model, ids), atol=1e-5)


def test_attention_rows_sum_to_one():
    model = EncoderModel(SMALL, seed=1)
    out = model(ids_batch(SMALL))
    for att in out.attentions:
        assert att.shape == (4, 2, 6, 6)
        np.testing.assert_allclose(att.data.sum(-1), 1.0, atol=1e-5)


def test_none_spec_is_plain_path():
    model = EncoderModel(SMALL, seed=2)
    ids = ids_batch(SMALL)
    before = model(ids).logits.data
    model.set_quantization(QuantizerSpec("none"))
    np.testing.assert_array_equal(model(ids).logits.data, before)


def test_binary_linear_matches_hand_oracle():
    model = EncoderModel(SMALL.replace(num_layers=1), seed=4)
    lin = model.layers[0].q
    lin.spec = QuantizerSpec("binary")
    x = np.random.default_rng(0).normal(size=(3, 8)).astype(np.float32)
    w = lin.weight.data.astype(np.float64)
    expected = x @ (np.abs(w).mean() * np.where(w >= 0, 1, -1)) + lin.bias.data
    np.testing.assert_allclose(lin(T.Tensor(x)).data, expected, atol=1e-6)


def test_int8_activations_only_on_quantized_projections():
    cfg = SMALL.replace(act_bits=8)
    a, b = EncoderModel(cfg, seed=5), EncoderModel(SMALL, seed=5)
    ids = ids_batch(SMALL)
    np.testing.assert_array_equal(a(ids).logits.data, b(ids).logits.data)
    a.set_quantization(QuantizerSpec("binary"))
    b.set_quantization(QuantizerSpec("binary"))
    assert not np.array_equal(a(ids).logits.data, b(ids).logits.data)


@pytest.mark.parametrize("teacher,student,expected", [
    (12, 5, (3, 5, 7, 9, 11)),
    (12, 4, (3, 6, 9, 12)),
    (12, 6, (2, 4, 6, 8, 10, 12)),
    (4, 2, (2, 4)),
    (12, 12, tuple(range(1, 13))),
    (12, 1, (12,)),
])
def test_skip_indices(teacher, student, expected):
    assert skip_indices(teacher, student) == expected


def test_top_and_bottom_selection():
    assert select_layers(12, 6, "top").indices == (7, 8, 9, 10, 11, 12)
    assert select_layers(12, 3, "bottom").indices == (1, 2, 3)
    assert select_layers(12, 2, "explicit", [4, 9]).indices == (4, 9)
    with pytest.raises(ConfigurationError):
        select_layers(4, 2, "explicit", [3, 2])
    with pytest.raises(ConfigurationError):
        select_layers(4, 5, "skip")


def test_student_copies_teacher_blocks():
    teacher = EncoderModel(SMALL.replace(num_layers=4), seed=6)
    student = init_student_from_teacher(teacher, select_layers(4, 2, "skip"))
    assert student.source_layers == [2, 4]
    np.testing.assert_array_equal(student.layers[0].up.weight.data, teacher.layers[1].up.weight.data)
    np.testing.assert_array_equal(student.layers[1].q.weight.data, teacher.layers[3].q.weight.data)
    student.layers[0].up.weight.data += 1  # independent storage
    assert not np.array_equal(student.layers[0].up.weight.data, teacher.layers[1].up.weight.data)


def test_width_mismatch_rejected():
    teacher = EncoderModel(SMALL, seed=0)
    with pytest.raises(ConfigurationError):
        init_student_from_teacher(teacher, select_layers(2, 1, "top"), SMALL.replace(hidden=16))


@pytest.mark.parametrize("rank", [1, 8])
def test_lora_preserves_output_and_counts(rank):
    model = EncoderModel(SMALL, seed=7).set_quantization(QuantizerSpec("binary"))
    ids = ids_batch(SMALL)
    before = model(ids).logits.data
    n0 = model.num_parameters()
    attach_lora(model, rank, seed=1)
    np.testing.assert_array_equal(model(ids).logits.data, before)
    added = sum(rank * (lin.shape[0] + lin.shape[1]) for _, lin in model.quantized_matrices())
    assert model.num_parameters() - n0 == added


def test_lora_zero_u_is_exact():
    model = EncoderModel(SMALL, seed=8)
    attach_lora(model, 2, seed=0)
    for _, lin in model.quantized_matrices():
        lin.adapter.V.data[:] = 1.0
        lin.adapter.U.data[:] = 0.0
    plain = EncoderModel(SMALL, seed=8)
    ids = ids_batch(SMALL)
    np.testing.assert_array_equal(model(ids).logits.data, plain(ids).logits.data)


def test_input_validation():
    model = EncoderModel(SMALL, seed=0)
    with pytest.raises(InputError):
        model(np.array([[0, 1, 99]]))
    with pytest.raises(InputError):
        model(np.zeros((1, 7), dtype=int))
    with pytest.raises(InputError):
        model(np.zeros((1, 2), dtype=float))


@pytest.mark.parametrize("spec", [QuantizerSpec("none"), QuantizerSpec("binary"), QuantizerSpec("ternary"),
                                  QuantizerSpec("binary", "per_row")])
def test_checkpoint_round_trip_bit_identical(spec):
    model = EncoderModel(SMALL.replace(act_bits=8), seed=9).set_quantization(spec)
    attach_lora(model, 1, seed=2)
    for _, lin in model.quantized_matrices():
        lin.adapter.V.data += 0.01
    ids = ids_batch(SMALL)
    loaded = model_from_bytes(checkpoint_bytes(model))
    assert loaded(ids).logits.data.tobytes() == model(ids).logits.data.tobytes()


def test_checkpoint_size_ratio_of_1bit_toy_model():
    # at d=128 the packed matrices outweigh the fp32 biases, LN, head and record headers
    cfg = TransformerConfig(num_layers=2, hidden=128, heads=4, ffn_dim=256, vocab_size=256, max_seq_len=32,
                            num_classes=2)
    fp32 = EncoderModel(cfg, seed=0)
    onebit = fp32.copy().set_quantization(QuantizerSpec("binary"))
    assert len(checkpoint_bytes(fp32)) / len(checkpoint_bytes(onebit)) >= 20


def test_corrupt_checkpoint_reports_offset():
    buf = checkpoint_bytes(EncoderModel(SMALL, seed=0))
    with pytest.raises(FormatError):
        model_from_bytes(b"NOPE" + buf[4:])
    with pytest.raises(FormatError) as exc:
        model_from_bytes(buf[:-10])
    assert exc.value.offset is not None
