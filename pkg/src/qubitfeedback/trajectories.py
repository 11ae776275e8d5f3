"""Euler-Maruyama simulation of the monitored-qubit filtering equations.

Three models share one stepping engine:

* ``"diffusive"``: homodyne unraveling, states in the Bloch ball;
* ``"counting"``: photodetection unraveling with reset-to-ground jumps,
  sampled by Bernoulli thinning of the intensity;
* ``"angle"``: the exactly solvable dephasing model, state is the phase
  angle wrapped into [-pi, pi).

Costs follow the control problem: running cost u_plus^2 + u_minus^2 (or
B^2) integrated with a left-endpoint rule, plus terminal cost 1 - pz (or
theta^2).

Reproducibility: path i of a batch draws its noise from the substream
``SeedSequence((seed, i))``, so results are independent of chunking, thread
count, and evaluation order, and two batches with the same seed see
identical noise (common random numbers).  ``simulate`` is path 0 of its
seed.
"""

from __future__ import annotations

import dataclasses
import io
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .filters import (
    BALL_TOL,
    AngleState,
    ModelParams,
    counting_drift,
    diffusive_drift,
    diffusive_diffusion,
    jump_intensity,
    jump_target,
    observation_drift,
    project_to_ball,
)
from . import lq

DIFFUSIVE = "diffusive"
COUNTING = "counting"
ANGLE = "angle"
MODELS = (DIFFUSIVE, COUNTING, ANGLE)

QUBIT_CSV_HEADER = "t,px,py,pz,u_plus,u_minus,dW_or_dN,dY,running_cost"
ANGLE_CSV_HEADER = "t,theta,B,dW,running_cost"


def wrap_angle(theta):
    """Wrap angles into [-pi, pi)."""
    return np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# policies: callables (t, state) -> control, vectorized over leading axes


def zero_policy(model: str):
    """No actuation; running cost is identically zero."""
    _check_model(model)
    if model == ANGLE:
        return lambda t, state: np.zeros(np.shape(state))
    return lambda t, state: np.zeros(np.shape(state)[:-1] + (2,))


def constant_policy(model: str, value):
    """Hold a fixed control: (u_plus, u_minus) for qubit models, B for angle."""
    _check_model(model)
    if model == ANGLE:
        value = float(value)
        return lambda t, state: np.full(np.shape(state), value)
    value = np.asarray(value, dtype=float)
    if value.shape != (2,):
        raise ValueError("qubit models need a (u_plus, u_minus) pair")
    return lambda t, state: np.broadcast_to(value, np.shape(state)[:-1] + (2,)).copy()


def lq_policy(params: ModelParams):
    """Closed-form optimal feedback for the angle model."""
    T = params.horizon_T
    return lambda t, state: lq.optimal_B(t, state, T)


def _check_model(model: str) -> None:
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}, expected one of {MODELS}")


# ---------------------------------------------------------------------------
# single Euler steps


def step_diffusive(p, u, dt, dW, params: ModelParams, ball_tol: float = BALL_TOL):
    """One Euler-Maruyama step of the homodyne filter, then ball projection.

    ``dW`` is the Wiener increment over the step (scalar or batch-shaped).
    """
    p = np.asarray(p, dtype=float)
    dW = np.asarray(dW, dtype=float)
    out = (
        p
        + diffusive_drift(p, u) * dt
        + diffusive_diffusion(p, params) * dW[..., None]
    )
    return project_to_ball(out, ball_tol)


def step_counting(p, u, dt, jumped, params: ModelParams, ball_tol: float = BALL_TOL):
    """One step of the counting filter.

    The compensated drift is applied first; paths flagged in ``jumped``
    are then reset to the ground state, so a jump lands exactly on
    ``jump_target()`` regardless of dt.
    """
    p = np.asarray(p, dtype=float)
    out = p + counting_drift(p, u, params) * dt
    jumped = np.asarray(jumped, dtype=bool)
    if out.ndim == 1:
        if jumped:
            out = jump_target()
    else:
        out = np.where(jumped[..., None], jump_target(), out)
    return project_to_ball(out, ball_tol)


def step_angle(theta, B, dt, dW, params: ModelParams):
    """One Euler step of the phase angle, wrapped into [-pi, pi)."""
    theta = np.asarray(theta, dtype=float)
    B = np.asarray(B, dtype=float)
    dW = np.asarray(dW, dtype=float)
    return wrap_angle(theta + 2.0 * B * dt + 2.0 * params.alpha * dW)


def sample_jump(p, dt, rng: np.random.Generator, params: ModelParams):
    """Bernoulli thinning: True where a detection occurs during dt."""
    lam = jump_intensity(p, params)
    prob = lam * dt
    if np.any(prob >= 1.0):
        raise ValueError(
            f"dt * intensity reaches {np.max(prob)}; decrease dt below "
            f"{1.0 / max(float(np.max(lam)), 1e-300)}"
        )
    return rng.random(np.shape(prob)) < prob


# ---------------------------------------------------------------------------
# trajectories and cost summaries


@dataclasses.dataclass
class Trajectory:
    """One simulated path with everything needed to audit it.

    Arrays have n_steps + 1 rows for states and cumulative cost and
    n_steps rows for per-step quantities (control applied on [t_k,
    t_{k+1}), noise or jump indicator, observation increment).
    """

    model: str
    dt: float
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    increments: np.ndarray
    observations: np.ndarray | None
    running_cost: np.ndarray
    terminal_cost: float
    total_cost: float
    seed: int | None = None

    def to_csv(self, path_or_file) -> None:
        """Write the path as CSV with 17 significant digits.

        One row per time node; per-step columns are written as 0 on the
        final (terminal) row, which has no step after it.
        """
        if hasattr(path_or_file, "write"):
            self._write(path_or_file)
        else:
            buf = io.StringIO()
            self._write(buf)
            from .persist import atomic_write_text

            atomic_write_text(path_or_file, buf.getvalue())

    def _write(self, fh) -> None:
        n = len(self.times) - 1
        if self.model == ANGLE:
            fh.write(ANGLE_CSV_HEADER + "\n")
            for k in range(n + 1):
                step = (
                    (self.controls[k], self.increments[k]) if k < n else (0.0, 0.0)
                )
                fh.write(
                    _row(self.times[k], self.states[k], *step, self.running_cost[k])
                )
        else:
            fh.write(QUBIT_CSV_HEADER + "\n")
            for k in range(n + 1):
                if k < n:
                    step = (
                        self.controls[k, 0],
                        self.controls[k, 1],
                        self.increments[k],
                        self.observations[k],
                    )
                else:
                    step = (0.0, 0.0, 0.0, 0.0)
                fh.write(
                    _row(
                        self.times[k],
                        self.states[k, 0],
                        self.states[k, 1],
                        self.states[k, 2],
                        *step,
                        self.running_cost[k],
                    )
                )


def _row(*values) -> str:
    return ",".join(f"{float(v):.17g}" for v in values) + "\n"


@dataclasses.dataclass(frozen=True)
class CostStatistics:
    """Summary of realized costs over a batch of paths."""

    n: int
    mean: float
    std: float
    stderr: float
    minimum: float
    maximum: float

    @classmethod
    def from_costs(cls, costs) -> "CostStatistics":
        costs = np.asarray(costs, dtype=float)
        n = costs.size
        if n == 0:
            raise ValueError("no costs to summarize")
        mean = float(costs.mean())
        if n == 1:
            # sample std is undefined for one path; report 0 by convention
            std = 0.0
        else:
            std = float(costs.std(ddof=1))
        return cls(
            n=n,
            mean=mean,
            std=std,
            stderr=std / np.sqrt(n),
            minimum=float(costs.min()),
            maximum=float(costs.max()),
        )

    def merge(self, other: "CostStatistics") -> "CostStatistics":
        """Combine two disjoint batches (parallel variance formula)."""
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = (
            self.std**2 * max(self.n - 1, 0)
            + other.std**2 * max(other.n - 1, 0)
            + delta**2 * self.n * other.n / n
        )
        std = float(np.sqrt(m2 / (n - 1))) if n > 1 else 0.0
        return CostStatistics(
            n=n,
            mean=mean,
            std=std,
            stderr=std / np.sqrt(n),
            minimum=min(self.minimum, other.minimum),
            maximum=max(self.maximum, other.maximum),
        )


# ---------------------------------------------------------------------------
# the engine


def _path_rngs(seed, indices) -> list[np.random.Generator]:
    if seed is None:
        root = np.random.SeedSequence()
        return [np.random.default_rng(child) for child in root.spawn(len(indices))]
    return [
        np.random.default_rng(np.random.SeedSequence((int(seed), int(i))))
        for i in indices
    ]


def _n_steps(params: ModelParams, dt: float) -> int:
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n = int(round(params.horizon_T / dt))
    if n < 1 or abs(n * dt - params.horizon_T) > 1e-9 * params.horizon_T:
        raise ValueError(
            f"dt={dt!r} does not divide the horizon T={params.horizon_T!r}"
        )
    return n


def _initial_states(model: str, x0, n_paths: int) -> np.ndarray:
    if model == ANGLE:
        if isinstance(x0, AngleState):
            theta0 = x0.theta
        else:
            theta0 = float(x0)
        return np.full(n_paths, wrap_angle(theta0))
    p0 = np.asarray(x0, dtype=float)
    if p0.shape != (3,):
        raise ValueError("qubit models need a length-3 initial Bloch vector")
    if np.linalg.norm(p0) > 1.0 + BALL_TOL:
        raise ValueError("initial state outside the unit ball")
    return np.tile(p0, (n_paths, 1))


def _simulate_paths(
    model, policy, x0, params, dt, rng_list, ball_tol, record, checkpoint_idx=None
):
    """Advance len(rng_list) paths in lockstep; optionally record history.

    ``checkpoint_idx`` (sorted time-node indices) requests state snapshots
    without recording full histories.
    """
    n_steps = _n_steps(params, dt)
    n_paths = len(rng_list)
    state = _initial_states(model, x0, n_paths)
    cost = np.zeros(n_paths)

    if checkpoint_idx is not None:
        snaps = np.empty((len(checkpoint_idx),) + state.shape)
        snap_at = {int(node): j for j, node in enumerate(checkpoint_idx)}
        if 0 in snap_at:
            snaps[snap_at[0]] = state

    if model == COUNTING:
        if dt * params.kappa_s_sq >= 1.0:
            raise ValueError(
                "dt * max jump intensity >= 1; Bernoulli thinning needs a "
                "smaller step"
            )
        noise = np.stack([r.random(n_steps) for r in rng_list])
    else:
        noise = np.stack([r.standard_normal(n_steps) for r in rng_list]) * np.sqrt(dt)

    if record:
        states = np.empty((n_steps + 1,) + state.shape)
        states[0] = state
        ctrl_shape = (n_steps, n_paths) if model == ANGLE else (n_steps, n_paths, 2)
        controls = np.empty(ctrl_shape)
        increments = np.empty((n_steps, n_paths))
        observations = None if model == ANGLE else np.empty((n_steps, n_paths))
        running = np.zeros((n_steps + 1, n_paths))

    for k in range(n_steps):
        t = k * dt
        u = policy(t, state)
        if model == ANGLE:
            u = np.asarray(u, dtype=float)
            cost += u * u * dt
            dW = noise[:, k]
            new_state = step_angle(state, u, dt, dW, params)
            inc = dW
        elif model == DIFFUSIVE:
            u = np.asarray(u, dtype=float)
            cost += (u * u).sum(axis=-1) * dt
            dW = noise[:, k]
            if record:
                observations[k] = observation_drift(state, params) * dt + dW
            new_state = step_diffusive(state, u, dt, dW, params, ball_tol)
            inc = dW
        else:
            u = np.asarray(u, dtype=float)
            cost += (u * u).sum(axis=-1) * dt
            lam = jump_intensity(state, params)
            jumped = noise[:, k] < lam * dt
            if record:
                observations[k] = jumped.astype(float)
            new_state = step_counting(state, u, dt, jumped, params, ball_tol)
            inc = jumped.astype(float)
        if record:
            controls[k] = u
            increments[k] = inc
            running[k + 1] = cost
            states[k + 1] = new_state
        state = new_state
        if checkpoint_idx is not None and (k + 1) in snap_at:
            snaps[snap_at[k + 1]] = state

    if model == ANGLE:
        terminal = wrap_angle(state) ** 2
    else:
        terminal = 1.0 - state[:, 2]
    total = cost + terminal

    out = {"costs": total, "running": cost, "terminal": terminal, "state": state}
    if checkpoint_idx is not None:
        out["snapshots"] = snaps
    if record:
        out.update(
            times=np.arange(n_steps + 1) * dt,
            states=states,
            controls=controls,
            increments=increments,
            observations=observations,
            running_full=running,
        )
    return out


def simulate(
    model: str,
    policy,
    x0,
    params: ModelParams,
    dt: float,
    seed: int | None = None,
    ball_tol: float = BALL_TOL,
) -> Trajectory:
    """Simulate one path and return its full record.

    Deterministic given (model, policy, x0, params, dt, seed); the noise
    stream is the path-0 substream of ``seed``, so the realized cost equals
    the first per-path cost of ``run_batch`` with the same seed.
    """
    _check_model(model)
    rngs = _path_rngs(seed, [0])
    res = _simulate_paths(model, policy, x0, params, dt, rngs, ball_tol, record=True)
    take = (lambda a: a[:, 0]) if model == ANGLE else (lambda a: a[:, 0, ...])
    return Trajectory(
        model=model,
        dt=dt,
        times=res["times"],
        states=take(res["states"]),
        controls=take(res["controls"]),
        increments=res["increments"][:, 0],
        observations=None if model == ANGLE else res["observations"][:, 0],
        running_cost=res["running_full"][:, 0],
        terminal_cost=float(res["terminal"][0]),
        total_cost=float(res["costs"][0]),
        seed=seed,
    )


def run_batch(
    model: str,
    policy,
    x0,
    params: ModelParams,
    dt: float,
    n_paths: int,
    seed: int | None = None,
    threads: int | None = None,
    chunk_size: int = 4096,
    ball_tol: float = BALL_TOL,
    return_costs: bool = False,
):
    """Monte Carlo over n_paths independent trajectories.

    Paths are advanced in vectorized chunks; path i always consumes the
    substream ``SeedSequence((seed, i))``, so the estimate does not depend
    on chunk size, thread count, or completion order.  Returns
    CostStatistics, or (CostStatistics, costs) with ``return_costs``.
    """
    _check_model(model)
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    _n_steps(params, dt)  # validate before spawning workers

    starts = list(range(0, n_paths, chunk_size))
    costs = np.empty(n_paths)

    def work(start: int):
        stop = min(start + chunk_size, n_paths)
        rngs = _path_rngs(seed, range(start, stop))
        res = _simulate_paths(
            model, policy, x0, params, dt, rngs, ball_tol, record=False
        )
        return start, stop, res["costs"]

    if threads is None or threads <= 1 or len(starts) == 1:
        results = map(work, starts)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, starts))
    for start, stop, chunk_costs in results:
        costs[start:stop] = chunk_costs

    stats = CostStatistics.from_costs(costs)
    if return_costs:
        return stats, costs
    return stats


def ensemble_means(
    model: str,
    policy,
    x0,
    params: ModelParams,
    dt: float,
    n_paths: int,
    times,
    seed: int | None = None,
    threads: int | None = None,
    chunk_size: int = 4096,
    ball_tol: float = BALL_TOL,
):
    """Monte Carlo mean state at the requested times.

    Useful for checking the unraveling against the deterministic master
    equation: the ensemble average of either conditional model follows the
    Lindblad flow.  Each requested time must sit on the step grid.  Returns
    ``(means, stderrs)`` with shape (len(times), 3) for the qubit models and
    (len(times),) for the angle model.  Same per-path substreams as
    ``run_batch``: results are independent of chunking and threading.
    """
    _check_model(model)
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    n_steps = _n_steps(params, dt)

    times = np.atleast_1d(np.asarray(times, dtype=float))
    idx = np.rint(times / dt).astype(int)
    if (
        np.any(idx < 0)
        or np.any(idx > n_steps)
        or np.any(np.abs(idx * dt - times) > 1e-9 * max(params.horizon_T, 1.0))
    ):
        raise ValueError("every checkpoint must lie on the time grid in [0, T]")
    if np.unique(idx).size != idx.size:
        raise ValueError("checkpoints must be distinct time nodes")
    order = np.argsort(idx)
    sorted_idx = idx[order]

    state_dim = () if model == ANGLE else (3,)
    snaps = np.empty((len(times), n_paths) + state_dim)

    def work(start: int):
        stop = min(start + chunk_size, n_paths)
        rngs = _path_rngs(seed, range(start, stop))
        res = _simulate_paths(
            model, policy, x0, params, dt, rngs, ball_tol,
            record=False, checkpoint_idx=sorted_idx,
        )
        return start, stop, res["snapshots"]

    starts = list(range(0, n_paths, chunk_size))
    if threads is None or threads <= 1 or len(starts) == 1:
        results = map(work, starts)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, starts))
    for start, stop, chunk_snaps in results:
        snaps[order, start:stop] = chunk_snaps

    means = snaps.mean(axis=1)
    if n_paths == 1:
        stderrs = np.zeros_like(means)
    else:
        stderrs = snaps.std(axis=1, ddof=1) / np.sqrt(n_paths)
    return means, stderrs
