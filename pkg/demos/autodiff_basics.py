"""
Tape-based gradients and the reversal layer
===========================================

Everything in the package sits on a small reverse-mode engine.  Operations
performed inside a ``Tape`` are recorded; ``tape.backward(loss)`` fills in
``.grad`` on every tensor created with ``requires_grad=True``.
"""

import numpy as np

from advasr import autodiff as ad
from advasr.autodiff import Tape, Tensor
from advasr.gradcheck import check_gradients

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

with Tape() as tape:
    loss = ad.tsum(ad.sigmoid(ad.matmul(ad.tanh(x), w)))
tape.backward(loss)
print("loss", loss.item())
print("dloss/dw\n", w.grad)

###############################################################################
# Central differences agree with the tape to well under 1e-4.

ok, worst = check_gradients(lambda: ad.tsum(ad.sigmoid(ad.matmul(ad.tanh(x), w))), [x, w])
print("finite differences agree:", ok, "worst violation", worst)

###############################################################################
# The gradient reversal layer is the identity going forward and flips the
# sign of whatever flows back through it.

plain = x.grad.copy()
with Tape() as tape:
    loss = ad.tsum(ad.sigmoid(ad.matmul(ad.tanh(ad.grl(x)), w)))
tape.backward(loss)
print("reversed == -plain:", np.allclose(x.grad, -plain, atol=1e-12))
