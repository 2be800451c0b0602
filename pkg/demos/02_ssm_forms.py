"""
One state space layer, three ways
=================================

Discretise a diagonal continuous system, run it as a recurrence and as a
convolution, then run the input-dependent (selective) variant and compare the
batched torch kernel with the per-channel numpy reference.
"""
import numpy as np
import torch

from slicescan.ssm_kernel import (
    S6, selective_scan_reference, ssm_conv_apply, ssm_conv_kernel, ssm_recurrence, zoh_discretize,
)

rng = np.random.default_rng(1)
A = -np.arange(1.0, 5.0)          # stable diagonal state matrix
B = rng.normal(size=4)
C = rng.normal(size=4)
A_bar, B_bar = zoh_discretize(A, B, delta=0.1)
print("A_bar:", A_bar)

# with fixed parameters the recurrence is a causal convolution
x = rng.normal(size=32)
y_rec = ssm_recurrence(A_bar, B_bar, C, x)
y_conv = ssm_conv_apply(ssm_conv_kernel(A_bar, B_bar, C, 32), x)
print("recurrence vs convolution, max diff:", np.abs(y_rec - y_conv).max())

# selective scan: step size, B and C now depend on each token
s6 = S6(6, 4)
s6.reset_parameters(torch.Generator().manual_seed(0))
s6 = s6.double()
tokens = torch.randn(1, 20, 6, dtype=torch.float64)
with torch.no_grad():
    fast = s6(tokens)[0].numpy()
slow = selective_scan_reference(s6.numpy_weights(), tokens[0].numpy())
print("torch kernel vs numpy reference, max diff:", np.abs(fast - slow).max())
