"""Backward value grids on the circle, checked against the closed form.

The angle model is the one case where the grid solvers can be graded
against an exact answer.  Two independent numerical families run here:
an explicit finite-difference sweep of the HJB equation and a
dynamic-programming recursion on interpolated one-step transitions.
Both should land on J(t, theta) = f(t) theta^2 + g(t) wherever the
quadratic story applies (the closed form ignores the 2 pi seam, so the
match is local to |theta| <= 2).
"""

import time

import numpy as np

import qubitfeedback as qf

T, alpha = 1.0, 0.5
params = qf.ModelParams(alpha=alpha, horizon_T=T)

# explicit sweep: the step must respect the diffusion stability bound
# dt <= h^2 / (8 alpha^2), hence the generous step count
t0 = time.time()
fd_spec = qf.GridSpec(model="angle", n_nodes=401, n_steps=10_000, horizon_T=T)
fd = qf.solve_backward(fd_spec, params)
t_fd = time.time() - t0

t0 = time.time()
dp_spec = qf.GridSpec(model="angle", n_nodes=801, n_steps=100, horizon_T=T)
dp = qf.solve_dp(dp_spec, params)
t_dp = time.time() - t0

print(f"finite differences: {fd_spec.n_nodes[0]} nodes x {fd_spec.n_steps} steps"
      f"  ({t_fd:.2f}s)")
print(f"dynamic programming: {dp_spec.n_nodes[0]} nodes x {dp_spec.n_steps} steps"
      f"  ({t_dp:.2f}s)")
print()

print("value at t = 0 vs closed form")
print(f"  {'theta':>6}  {'exact':>8}  {'FD':>8}  {'DP':>8}")
for th in (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0):
    exact = qf.value(0.0, th, T, alpha)
    axes = fd_spec.axes()[0]
    fd_v = np.interp(th, axes, fd.values[0])
    dp_v = np.interp(th, dp_spec.axes()[0], dp.values[0])
    print(f"  {th:6.2f}  {exact:8.5f}  {fd_v:8.5f}  {dp_v:8.5f}")
print()

for label, vg, spec in (("FD", fd, fd_spec), ("DP", dp, dp_spec)):
    axes = spec.axes()[0]
    sel = np.abs(axes) <= 2.0
    err = np.max(np.abs(vg.values[0][sel] - qf.value(0.0, axes[sel], T, alpha)))
    print(f"{label} max value error on |theta| <= 2: {err:.2e}")
print()

# the stored policy is the feedback the solver actually used
policy = qf.extract_policy(fd)
theta = np.array([-1.5, -0.5, 0.5, 1.5])
print("extracted feedback at t = 0 vs the exact gain -2 theta / (4T + 1)")
print(f"  {'theta':>6}  {'exact':>8}  {'grid':>8}")
for th, b in zip(theta, policy(0.0, theta)):
    print(f"  {th:6.2f}  {qf.optimal_B(0.0, th, T):8.4f}  {b:8.4f}")
