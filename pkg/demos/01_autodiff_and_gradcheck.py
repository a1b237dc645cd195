"""
Reverse-mode autodiff and finite-difference checks
==================================================

Every network block runs on a small float64 autodiff core. This walk-through
builds a conv -> relu -> pool -> linear graph by hand, backpropagates through
it, and compares the gradients against central differences.
"""

import numpy as np

from audsr.diffcore import ParamStore, Tensor, avgpool2, conv2d, grad_check, linear, relu, reshape, square, tsum

rng = np.random.default_rng(0)

# parameters live in a ParamStore; inputs are plain tensors
params = ParamStore()
params.add("conv.weight", rng.normal(0, 0.5, (3, 1, 3, 3)))
params.add("conv.bias", np.zeros(3))
params.add("fc.weight", rng.normal(0, 0.5, (2, 3 * 4 * 4)))
params.add("fc.bias", np.zeros(2))
image = Tensor(rng.random((2, 1, 8, 8)))


def loss():
    h = avgpool2(relu(conv2d(image, params["conv.weight"], params["conv.bias"], padding=1)))
    out = linear(reshape(h, (2, -1)), params["fc.weight"], params["fc.bias"])
    return tsum(square(out))


# a graph is single-use: build it, call backward once
value = loss()
params.zero_grad()
value.backward()
print("loss", value.item())
print("d loss / d conv.bias", params["conv.bias"].grad)

# the same closure drives the finite-difference comparison
report = grad_check(loss, params, eps=1e-5, tol=1e-4)
for name, err in report.max_rel_error.items():
    print(f"{name:12s} max relative error {err:.2e} over {report.checked[name]} entries")
print("passed" if report.passed else "FAILED")

# one optimizer step rebinds .data, so earlier snapshots stay valid
before = params["fc.bias"].data
params.step("adam", lr=1e-2)
print("fc.bias moved by", params["fc.bias"].data - before)
