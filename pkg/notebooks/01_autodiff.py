# %% [markdown]
# # The tape
# Every op on a `Tensor` appends a record to the thread-local tape. `backward` walks
# it in reverse. Here we check a few gradients by hand and against finite differences.

# %%
import numpy as np

from xrecosa import tensor as T
from xrecosa.tensor import Tensor, backward, grad_check

x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
w = Tensor(np.array([[0.5], [-1.0]]), requires_grad=True)
y = T.sigmoid(T.matmul(x, w)).sum()
backward(y)
print("y =", float(y.data))
print("dy/dw =", w.grad.ravel())

# %%
# same thing, written out with numpy
s = 1 / (1 + np.exp(-(x.data @ w.data)))
print("by hand =", (x.data.T @ (s * (1 - s))).ravel())

# %% [markdown]
# `grad_check` compares the tape against central differences and returns the worst
# relative error.

# %%
rng = np.random.default_rng(0)
a = Tensor(rng.normal(size=(3, 4)))
print("softmax:", grad_check(lambda t: (T.softmax_lastdim(t) * a).sum(), Tensor(rng.normal(size=(3, 4)))))
print("tanh(matmul):", grad_check(lambda t: T.tanh(T.matmul(t, T.transpose(a))).sum(), Tensor(rng.normal(size=(2, 4)))))

# %%
# f32 mode keeps everything in single precision
with T.precision("f32"):
    z = Tensor(np.ones(3)) * 2
print(z.data.dtype)
