"""One state-space channel, three views of the same operator.

Shows the structured init, the bilinear discretization, and the fact
that materializing the kernel and convolving equals stepping the
recurrence one sample at a time. The kernel decay plot is ASCII because
that is all a terminal needs.
"""

import numpy as np

import longvq.tensor as T
from longvq.rng import Rng
from longvq.ssm import SsmChannel, discretize, init_s4, materialize_kernel, \
    scan_recurrent
from longvq.tensor import set_precision

set_precision("float64")

n = 4
a, b = init_s4(n)
print(f"structured A for N={n} (lower triangular, diag -(i+1)):")
for row in a:
    print("  " + " ".join(f"{v:7.3f}" for v in row))
print("B:", np.round(b, 3))

rng = Rng(0, "demo-ssm")
ch = SsmChannel(A=a, B_in=b, C_out=rng.normal((n,)), D_skip=0.0,
                log_dt=float(np.log(0.05)), label="demo")
d = discretize(ch)
print(f"\nbilinear discretization at dt=0.05: |eig(A_bar)| ="
      f" {np.round(np.abs(np.linalg.eigvals(d.A_bar)), 4)}")

L = 64
k = materialize_kernel(d, L)
peak = np.max(np.abs(k))
print("\nkernel magnitude (each bar is one tap, 48 cols = peak):")
for j in range(0, L, 8):
    bar = "#" * int(48 * abs(k[j]) / peak)
    print(f"  k[{j:2d}] {k[j]:+9.5f} {bar}")

u = rng.normal((L,))
y_conv = T.conv_causal(T.Tensor(k), T.Tensor(u)).data
y_scan = scan_recurrent(d, u)
print(f"\nconvolution vs recurrence on random input: "
      f"max abs diff {np.max(np.abs(y_conv - y_scan)):.3e}")
