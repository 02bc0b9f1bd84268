"""Reverse-mode gradients on the tensor engine, checked against finite differences."""
import numpy as np

from uxnet3d import functional as F
from uxnet3d import gradcheck
from uxnet3d import tensor as T
from uxnet3d.functional import Conv3dSpec, NormSpec

rng = np.random.default_rng(0)

# volumes are (N, C, H, W, D); float64 keeps the difference quotients honest
x = T.Tensor(rng.standard_normal((1, 2, 5, 5, 5)), requires_grad=True)
spec = Conv3dSpec(2, 4, (3, 3, 3), padding=(1, 1, 1), bias=False)
w = T.Tensor(rng.standard_normal(spec.weight_shape) * 0.3, requires_grad=True)

norm = NormSpec("layer_norm_channel", 4)
gamma, beta = T.ones((4,), np.float64), T.zeros((4,), np.float64)


def f(inp, weight=w):
    y = F.conv3d(inp, spec, weight)
    return T.reduce_sum(F.gelu(F.layer_norm_channel(y, norm, gamma, beta)))


loss = f(x)
tape = T.backward(loss)
print("ops on the tape:", tape.ops())

# central differences carry an O(h^2) error; channel LN over only four
# channels is curved enough that h=1e-3 shows it, smaller steps do not
for h in (1e-3, 1e-4, 1e-5):
    numeric = T.finite_diff_grad(f, x.data, h=h)
    numeric_w = T.finite_diff_grad(lambda t: f(T.Tensor(x.data), t), w.data, h=h)
    print(f"h={h:g}  input rel err {T.max_rel_error(x.grad, numeric):.1e}"
          f"  weight rel err {T.max_rel_error(w.grad, numeric_w):.1e}")

# the shipped suite does the same for every differentiable op
results = gradcheck.run("conv3d")
for op, worst in gradcheck.worst_by_op(results).items():
    print(f"{op}: {len(results)} cases, worst {worst:.2e}")
