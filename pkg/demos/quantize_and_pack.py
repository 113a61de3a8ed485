# %% [markdown]
# # Binary and ternary weights, bit for bit
#
# A 1-bit weight is `alpha * sign(w)` with `alpha = mean|w|`. Ternary weights
# zero out everything below a threshold `0.7 * mean|w|`. Both are stored as
# packed codes plus one fp32 scale per scope.

# %%
import numpy as np

from xtc.quantization import (QuantizerSpec, binarize, bert_base_inventory, model_size, pack, ternarize,
                              unpack)

rng = np.random.default_rng(0)
w = rng.normal(0, 0.05, size=(4, 6)).astype(np.float32)

q, alpha = binarize(w)
print("alpha:", alpha, " distinct values:", np.unique(q))

# %%
# Binary scale is the least-squares optimum for a fixed sign pattern
for a in (0.5 * alpha[0], alpha[0], 1.5 * alpha[0]):
    err = np.sum((w - a * np.sign(w)) ** 2)
    print(f"alpha={a:.5f}  squared error={err:.6f}")

# %%
qt, at, delta = ternarize(w)
print("threshold:", delta, " zeros:", int((qt == 0).sum()), "of", qt.size)

# per_row gives every output row its own scale
qr, ar = binarize(w, QuantizerSpec("binary", granularity="per_row"))
print("per-row scales:", ar)

# %% [markdown]
# Packing: 1-bit codes are one bit per weight, LSB first. 1000 weights
# fit in 125 bytes.

# %%
big = rng.normal(size=1000).astype(np.float32)
qb, ab = binarize(big)
packed = pack(qb, ab, bits=1)
print("payload bytes:", len(packed.packed_words))
back, _ = unpack(packed)
print("round trip exact:", np.array_equal(back, qb))

q2, a2, _ = ternarize(big)
p2 = pack(q2, a2, bits=2)
print("2-bit payload bytes:", len(p2.packed_words), " zeros preserved:", np.array_equal(unpack(p2)[0] == 0, q2 == 0))

# %% [markdown]
# ## How big is a 1-bit BERT-base?
#
# Weights and embeddings at 1 bit, biases and layernorm left in fp32.

# %%
for bits in (32, 2, 1):
    r = model_size(bert_base_inventory(weight_bits=bits))
    print(f"{bits:>2}-bit: {r.megabytes:7.2f} MB   ratio on quantized weights x{r.quantized_ratio:.1f}")
