"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a tiny graph by hand, backpropagate, and confirm the analytic
gradients against central finite differences.
"""
import numpy as np

from asanet import functional as F
from asanet.functional import Conv2dParams
from asanet.gradcheck import finite_diff_check
from asanet.tensor import Tensor

rng = np.random.default_rng(0)

# a 3x3 convolution followed by GELU and a mean -- a scalar we can differentiate
x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
conv = Conv2dParams(
    Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.2, requires_grad=True),
    Tensor(np.zeros(4), requires_grad=True),
    padding=1,
)


def loss_fn(x, w, b):
    return F.mean(F.gelu(F.conv2d(x, Conv2dParams(w, b, padding=1))))


loss = loss_fn(x, conv.weight, conv.bias)
loss.backward()
print("loss", float(loss.data))
print("d loss / d bias", conv.bias.grad)

# every gradient above, checked coordinate by coordinate in float64
report = finite_diff_check(loss_fn, [x, conv.weight, conv.bias], names=["x", "weight", "bias"])
print("finite-difference check passed:", report.passed)
for name, err in report.as_dict().items():
    print(f"  {name:<7} max relative error {err:.2e}")

# operation counting rides on the same forward pass
with F.count_flops() as flops:
    F.conv2d(Tensor(np.ones((1, 1, 8, 8))), Conv2dParams(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1))
print("FLOPs of a 1->1 3x3 conv on 8x8:", flops[0])
