"""
Checking backward passes numerically
====================================

Every layer's analytic gradient is compared with central differences in
float64. The nested-dropout layer is checked with its per-sample kept counts
pinned, since a fresh random mask would change the function being
differentiated.
"""

import numpy as np

from nestdrop import layers as L
from nestdrop.nested_dropout import NestedDropoutState, nd_backward, nd_forward


def numeric_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel(a, n):
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n))


rng = np.random.default_rng(3)

# convolution, stride 2 with padding
x = rng.standard_normal((2, 3, 7, 7))
p = L.ConvParams(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), stride=2, pad=1)
G = rng.standard_normal(L.conv_forward(x, p).shape)
f = lambda: np.sum(L.conv_forward(x, p) * G)
g = L.conv_backward(x, p, G)
print("conv   input", rel(g.grad_input, numeric_grad(f, x)))
print("conv weights", rel(g.grad_weights, numeric_grad(f, p.weights)))

# max pooling routes the gradient to the winning element only
x = rng.permutation(2 * 36).reshape(1, 2, 6, 6) * 0.1
out, am = L.maxpool_forward(x, 3, 2)
G = rng.standard_normal(out.shape)
f = lambda: np.sum(L.maxpool_forward(x, 3, 2)[0] * G)
print("maxpool     ", rel(L.maxpool_backward(am, G, x.shape), numeric_grad(f, x)))

# softmax cross-entropy
logits = rng.standard_normal((4, 10)) * 3
labels = rng.integers(0, 10, 4)
_, grad = L.softmax_xent(logits, labels)
print("softmax-xent", rel(grad, numeric_grad(lambda: L.softmax_xent(logits, labels)[0], logits)))

# conv followed by nested dropout with kept counts 1, 3 and 2
x = rng.standard_normal((3, 2, 5, 5))
p = L.ConvParams(rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4), 1, 1)
state = NestedDropoutState(4, rho=0.3)
draws = [1, 3, 2]
G = rng.standard_normal((3, 4, 5, 5))
f = lambda: np.sum(nd_forward(L.conv_forward(x, p), state, "train", draws=draws) * G)
f()
g = L.conv_backward(x, p, nd_backward(G, state))
print("conv+nested ", rel(g.grad_weights, numeric_grad(f, p.weights)))
