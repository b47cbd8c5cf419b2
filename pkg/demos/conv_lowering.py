"""
Convolution as a matrix product
===============================

im2col copies every receptive field into a column so a whole convolution
becomes one gemm. col2im scatters columns back and is its adjoint, which is
what the backward pass needs.
"""

import numpy as np

from nestdrop.tensor import col2im, gemm, im2col

rng = np.random.default_rng(0)
x = rng.standard_normal((3, 8, 8))          # one image, C=3
w = rng.standard_normal((16, 3, 5, 5))      # 16 filters 5x5

cols = im2col(x, (5, 5), stride=1, pad=2)
print("columns:", cols.shape)               # (3*5*5, 8*8)

out = gemm(w.reshape(16, -1), cols).reshape(16, 8, 8)

# the same thing written as loops, for comparison
xp = np.pad(x, ((0, 0), (2, 2), (2, 2)))
ref = np.zeros_like(out)
for o in range(16):
    for i in range(8):
        for j in range(8):
            ref[o, i, j] = np.sum(w[o] * xp[:, i:i + 5, j:j + 5])
print("max |gemm - loops|:", np.abs(out - ref).max())

# <im2col(x), y> == <x, col2im(y)>
y = rng.standard_normal(cols.shape)
lhs = np.vdot(cols, y)
rhs = np.vdot(x, col2im(y, (5, 5), 1, 2, x.shape))
print("adjoint gap:", abs(lhs - rhs))

# strided, padded geometry has to tile the input exactly
print(im2col(np.zeros((1, 7, 7)), 3, stride=2, pad=1).shape)
