"""Gradients from the tape and the LSTM encoder, checked against finite differences."""
# %%
import numpy as np

from fedexdnn import encoder as enc
from fedexdnn import numkernel as nk

rng = np.random.default_rng(0)

# %% a scalar function of two arrays, recorded on the tape
a = nk.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
b = nk.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
with nk.GradTape() as tape:
    out = nk.tanh(a @ b).sum()
grads = tape.gradient(out, {"a": a, "b": b})
print("value", out.item())
print("d/da shape", grads["a"].shape, "d/db shape", grads["b"].shape)

# %% the same gradients, compared with central differences
err = nk.grad_check(lambda t: nk.tanh(t["a"] @ t["b"]).sum(), {"a": a.value, "b": b.value})
print("max relative error vs finite differences:", f"{err:.2e}")

# %% a stacked LSTM maps a (batch, channels, steps) window to a d-dim embedding
cfg = enc.EncoderConfig(input_dim=3, num_layers=4, hidden_dim=8, embed_dim=8)
params = enc.init(cfg, seed=0)
x = rng.standard_normal((5, 3, 16))
print("parameters:", enc.param_count(cfg))
print("embeddings:", enc.forward(params, x).shape)

# %% encoder gradients on a small instance
small = enc.EncoderConfig(input_dim=2, num_layers=2, hidden_dim=3, embed_dim=2)
p = enc.init(small, seed=1)
xs = rng.standard_normal((2, 2, 6))


def sq_norm(t):
    e = enc.forward_tensors(t, small, xs)
    return (e * e).sum()


print("encoder gradient error:", f"{nk.grad_check(sq_norm, p.unflatten()):.2e}")
