"""The small-angle limit and its exact solution.

Near the excited state the qubit problem linearizes: the tip angle
theta obeys d(theta) = 2B dt + 2 alpha dW with running cost B^2 and
terminal cost theta^2.  The optimal cost-to-go is quadratic,

    J(t, theta) = f(t) theta^2 + g(t),
    f(t) = 1 / (4(T - t) + 1),      g(t) = alpha^2 ln(4(T - t) + 1),

with feedback B(t, theta) = -2 f(t) theta.  Everything here is checked
against that closed form three independent ways.
"""

import numpy as np

import qubitfeedback as qf

T, alpha = 1.0, 0.5

# 1. the coefficient functions solve their ODEs (RK4 comparison)
for dt in (1e-2, 1e-3, 1e-4):
    print(f"ode_check(dt={dt:g}): sup gap {qf.ode_check(T, alpha, dt=dt):.3e}")
print("the gap falls 10^4 per decade: RK4 is fourth order, the closed")
print("form is exact")
print()

# 2. the value function solves the dynamic-programming equation
rng = np.random.default_rng(1)
t = rng.uniform(0.0, T - 1e-3, 500)
theta = rng.uniform(-3.0, 3.0, 500)
res = qf.hjb_residual(t, theta, T, alpha)
print(f"HJB residual over 500 random (t, theta): max {np.max(res):.2e}")
print()

# 3. Monte Carlo under the optimal feedback reproduces J(0, theta0)
theta0 = 1.0
target = qf.value(0.0, theta0, T, alpha)
params = qf.ModelParams(alpha=alpha, horizon_T=T)
stats = qf.run_batch("angle", qf.lq_policy(params), theta0, params,
                     1e-3, 20_000, seed=3)
print(f"value(0, {theta0:g}) = 1/5 + 0.25 ln 5 = {target:.6f}")
print(f"mean cost over {stats.n} paths = {stats.mean:.6f} +- {stats.stderr:.6f}")
print(f"difference / stderr = {(stats.mean - target) / stats.stderr:+.2f}")
print()

# and no open-loop constant can do better: the feedback gain matters
for label, policy in [("zero", qf.zero_policy("angle")),
                      ("constant -0.4", qf.constant_policy("angle", -0.4)),
                      ("optimal", qf.lq_policy(params))]:
    s = qf.run_batch("angle", policy, theta0, params, 1e-3, 20_000, seed=3)
    print(f"  {label:>14}: mean cost {s.mean:.4f} +- {s.stderr:.4f}")
