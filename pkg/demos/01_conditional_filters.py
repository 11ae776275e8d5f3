"""Conditional qubit states under two measurement records.

The same dissipative qubit can be unraveled two ways: a homodyne
current drives a diffusive Bloch-vector filter, while photodetection
drives a piecewise-deterministic filter that jumps to the ground state
at each click.  This script simulates one trajectory of each and then
checks that the ensemble average of either filter reproduces the
deterministic master-equation decay.
"""

import numpy as np

import qubitfeedback as qf

params = qf.ModelParams(kappa_s_sq=0.5, horizon_T=2.0)
x0 = np.array([1.0, 0.0, 0.0])
dt = 1e-3

print("single trajectories, zero control, p0 = (1, 0, 0)")
print()

traj = qf.simulate(qf.DIFFUSIVE, qf.zero_policy(qf.DIFFUSIVE), x0, params, dt, seed=11)
print("diffusive record: state every 0.25 time units")
print(f"  {'t':>5}  {'px':>8}  {'py':>8}  {'pz':>8}  {'|p|':>6}")
for k in range(0, traj.states.shape[0], 250):
    p = traj.states[k]
    print(f"  {traj.times[k]:5.2f}  {p[0]:8.4f}  {p[1]:8.4f}  {p[2]:8.4f}"
          f"  {np.linalg.norm(p):6.4f}")
print("py stays exactly zero: nothing in the record couples the y axis")
print("from this initial state")
print()

traj = qf.simulate(qf.COUNTING, qf.zero_policy(qf.COUNTING), x0, params, dt, seed=5)
clicks = np.flatnonzero(traj.increments > 0.5)
print(f"counting record: {clicks.size} detection(s)"
      + (f" at t = {', '.join(f'{traj.times[k]:.3f}' for k in clicks)}" if clicks.size else ""))
print("state just before and after the first click resets to (0, 0, -1):")
if clicks.size:
    k = clicks[0]
    print(f"  before {traj.states[k]}")
    print(f"  after  {traj.states[k + 1]}")
print()

# Ensemble check: averaging either unraveling recovers the Lindblad flow
# px(t) = exp(-t/2), pz(t) = exp(-t) - 1 from this initial state.
times = np.linspace(0.4, 2.0, 5)
exact = np.stack([np.exp(-times / 2), np.zeros_like(times), np.exp(-times) - 1], axis=-1)
print("ensemble means over 4000 paths vs master equation")
print(f"  {'t':>5}  {'model':>10}  {'max |mean - exact|':>20}")
for model in (qf.DIFFUSIVE, qf.COUNTING):
    means, stderrs = qf.ensemble_means(model, qf.zero_policy(model), x0, params,
                                       dt, 4000, times, seed=0)
    for i, t in enumerate(times):
        gap = np.max(np.abs(means[i] - exact[i]))
        print(f"  {t:5.2f}  {model:>10}  {gap:20.5f}")
print()
print("both columns shrink like 1/sqrt(n_paths): the filters are honest")
print("unravelings of one master equation")
