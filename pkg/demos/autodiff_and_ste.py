# %% [markdown]
# # A small reverse-mode engine and the straight-through estimator
#
# Every op in `xtc.tensor` records a backward closure. Gradients are checked
# against central differences in float64.

# %%
import numpy as np

from xtc import tensor as T
from xtc.quantization import QuantizerSpec, quantize_weight, quantize_weight_ste
from xtc.tensor import Tensor, default_dtype, numerical_grad

rng = np.random.default_rng(0)

with default_dtype(np.float64):
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    g = Tensor(np.ones(5), requires_grad=True)
    b = Tensor(np.zeros(5), requires_grad=True)

    def graph(a):
        h = T.gelu(T.layernorm(a, g, b))
        return T.sum_(h * h)

    out = graph(x)
    out.backward()
    fd = numerical_grad(lambda a: float(graph(Tensor(a)).data), x.data, eps=1e-6)
    print("max |analytic - numeric|:", np.abs(x.grad - fd).max())

# %% [markdown]
# ## STE
#
# The forward pass uses `alpha * sign(w)`. The backward pass treats the
# quantizer as the identity, so the latent weight receives the gradient that
# the quantized weight would have received.

# %%
spec = QuantizerSpec("binary")
with default_dtype(np.float64):
    w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    xin = Tensor(rng.normal(size=(4, 5)))
    y = T.matmul(xin, quantize_weight_ste(w, spec))
    T.sum_(y * y).backward()

    wq = quantize_weight(w.data, spec)
    surrogate = Tensor(wq, requires_grad=True)
    ys = T.matmul(xin, surrogate)
    T.sum_(ys * ys).backward()
    print("STE grad equals surrogate grad:", np.allclose(w.grad, surrogate.grad))
    print("latent weights stay continuous:", len(np.unique(w.data)), "distinct values")
