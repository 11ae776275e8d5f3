"""Backward grid solvers for the optimal feedback control problems.

Two solver families share the grid machinery.  ``solve_backward`` steps the
control-minimized equation for the cost-to-go explicitly backward in time
with finite differences: upwind one-sided differences for the drift terms,
central differences for the diffusion, and the completed-squares control
evaluated from the numerical gradient at each node.  ``solve_dp`` iterates
the one-step dynamic-programming recursion instead (``dp_recursion_step``),
replacing derivatives with interpolation of the next slice at the
post-step states: a two-point quadrature stands in for the Wiener
increment and a Bernoulli branch pair for the detection events, and the
minimization runs either over an explicit control grid or through the
same completed-squares formula.

Qubit grids are uniform over the cube [-1, 1]^3 with nodes outside the
closed unit ball masked out and stored as NaN; no ghost values are
invented outside the ball, so stencils shorten to one-sided at the mask
edge.  The angle model lives on a uniform periodic grid over [-pi, pi).
Value functions persist to ``.vgrid`` files: one JSON header line, then
the value slices and control slices as little-endian float64 in row-major
node order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .filters import (
    GROUND_STATE,
    ModelParams,
    counting_drift,
    diffusive_diffusion,
    diffusive_drift,
    jump_intensity,
)
from .persist import atomic_write_bytes
from .trajectories import ANGLE, COUNTING, DIFFUSIVE, MODELS

CLOSED_FORM = "closed-form"
EXHAUSTIVE = "exhaustive"
CONTROL_MODES = (CLOSED_FORM, EXHAUSTIVE)

# public interchange names, used in files and on the command line
MODEL_IDS = {DIFFUSIVE: "diffusive-qubit", COUNTING: "counting-qubit", ANGLE: "angle-lq"}
MODEL_FROM_ID = {v: k for k, v in MODEL_IDS.items()}

VGRID_VERSION = 1
_HEADER_KEYS = (
    "format", "version", "model", "bounds", "periodic", "n_nodes", "n_steps",
    "delta", "horizon_T", "kappa_s_sq", "alpha", "control_mode",
    "control_box", "control_resolution", "n_controls",
)

# node is active when |p|^2 <= 1 + MASK_TOL; the slack absorbs rounding in
# the squared norm of exact on-sphere nodes
MASK_TOL = 1e-12

# explicit stepping keeps a factor-4 margin under the monotonicity limit
CFL_SAFETY = 0.25


@dataclass(frozen=True)
class GridSpec:
    """Discretization of one control problem: state grid, time grid, controls.

    ``n_nodes`` is one count per state axis (a bare int is applied to every
    axis).  ``control_box`` bounds each control component to [-box, box];
    ``control_resolution`` is the number of points per control axis used by
    exhaustive minimization.  ``n_steps`` may be 0, in which case a solve
    returns the terminal cost alone.
    """

    model: str
    n_nodes: tuple[int, ...]
    n_steps: int
    horizon_T: float
    control_box: float | None = None
    control_resolution: int | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}, expected one of {MODELS}")
        nodes = self.n_nodes
        if np.isscalar(nodes):
            nodes = (int(nodes),) * self.dim
        else:
            nodes = tuple(int(n) for n in nodes)
        if len(nodes) != self.dim:
            raise ValueError(
                f"n_nodes must give {self.dim} axis count(s) for {self.model!r}, "
                f"got {nodes}"
            )
        if min(nodes) < 3:
            raise ValueError(f"n_nodes must be >= 3 per axis, got {nodes}")
        object.__setattr__(self, "n_nodes", nodes)
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ValueError(f"n_steps must be a nonnegative integer, got {self.n_steps!r}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        T = float(self.horizon_T)
        if not np.isfinite(T) or T <= 0.0:
            raise ValueError(f"horizon_T must be positive, got {self.horizon_T!r}")
        object.__setattr__(self, "horizon_T", T)
        if self.control_box is not None:
            box = float(self.control_box)
            if not np.isfinite(box) or box < 0.0:
                raise ValueError(f"control_box must be >= 0, got {self.control_box!r}")
            object.__setattr__(self, "control_box", box)
        if self.control_resolution is not None:
            res = int(self.control_resolution)
            if res < 1:
                raise ValueError("control_resolution must be >= 1")
            if self.control_box is None:
                raise ValueError("control_resolution requires a control_box")
            object.__setattr__(self, "control_resolution", res)

    @property
    def dim(self) -> int:
        return 1 if self.model == ANGLE else 3

    @property
    def n_controls(self) -> int:
        return 1 if self.model == ANGLE else 2

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_nodes

    @property
    def delta(self) -> float:
        return self.horizon_T / self.n_steps if self.n_steps else 0.0

    def axes(self) -> tuple[np.ndarray, ...]:
        if self.model == ANGLE:
            n = self.n_nodes[0]
            return (-np.pi + 2.0 * np.pi * np.arange(n) / n,)
        return tuple(np.linspace(-1.0, 1.0, n) for n in self.n_nodes)

    def spacings(self) -> tuple[float, ...]:
        if self.model == ANGLE:
            return (2.0 * np.pi / self.n_nodes[0],)
        return tuple(2.0 / (n - 1) for n in self.n_nodes)

    def points(self) -> np.ndarray:
        """Node coordinates: (n,) for the angle model, (*shape, 3) otherwise."""
        if self.model == ANGLE:
            return self.axes()[0]
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def active_mask(self) -> np.ndarray:
        if self.model == ANGLE:
            return np.ones(self.shape, dtype=bool)
        pts = self.points()
        return np.sum(pts * pts, axis=-1) <= 1.0 + MASK_TOL

    def control_values(self) -> np.ndarray | None:
        """Control grid for exhaustive minimization, None when unconfigured."""
        if self.control_box is None or self.control_resolution is None:
            return None
        return np.linspace(-self.control_box, self.control_box, self.control_resolution)

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon_T, self.n_steps + 1)


@dataclass(frozen=True)
class ValueGrid:
    """Solved cost-to-go: values[k] and controls[k] approximate time k*delta.

    values has shape (n_steps+1, *grid); controls has one extra axis for the
    control components.  Masked nodes hold NaN in both.
    """

    spec: GridSpec
    kappa_s_sq: float
    alpha: float
    control_mode: str
    values: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        if self.control_mode not in CONTROL_MODES:
            raise ValueError(f"control_mode must be one of {CONTROL_MODES}")
        values = np.asarray(self.values, dtype=float)
        controls = np.asarray(self.controls, dtype=float)
        spec = self.spec
        want_v = (spec.n_steps + 1,) + spec.shape
        want_c = (spec.n_steps + 1, spec.n_controls) + spec.shape
        if values.shape != want_v:
            raise ValueError(f"values must have shape {want_v}, got {values.shape}")
        if controls.shape != want_c:
            raise ValueError(f"controls must have shape {want_c}, got {controls.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "controls", controls)

    def save(self, path) -> None:
        """Write header + slices; atomic, byte-deterministic, loads bit-exactly."""
        spec = self.spec
        if spec.model == ANGLE:
            bounds = [[-float(np.pi), float(np.pi)]]
            periodic = [True]
        else:
            bounds = [[-1.0, 1.0]] * 3
            periodic = [False] * 3
        header = {
            "format": "vgrid",
            "version": VGRID_VERSION,
            "model": MODEL_IDS[spec.model],
            "bounds": bounds,
            "periodic": periodic,
            "n_nodes": list(spec.n_nodes),
            "n_steps": spec.n_steps,
            "delta": spec.delta,
            "horizon_T": spec.horizon_T,
            "kappa_s_sq": self.kappa_s_sq,
            "alpha": self.alpha,
            "control_mode": self.control_mode,
            "control_box": spec.control_box,
            "control_resolution": spec.control_resolution,
            "n_controls": spec.n_controls,
        }
        blob = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
        payload = (
            np.ascontiguousarray(self.values, dtype="<f8").tobytes()
            + np.ascontiguousarray(self.controls, dtype="<f8").tobytes()
        )
        atomic_write_bytes(path, blob + payload)

    @classmethod
    def load(cls, path) -> "ValueGrid":
        with open(path, "rb") as fh:
            raw = fh.read()
        newline = raw.find(b"\n")
        if newline < 0:
            raise ValueError(f"{path}: not a .vgrid file (no header line)")
        try:
            header = json.loads(raw[:newline].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: not a .vgrid file ({exc})") from exc
        if not isinstance(header, dict) or header.get("format") != "vgrid":
            raise ValueError(f"{path}: not a .vgrid file (bad format field)")
        if header.get("version") != VGRID_VERSION:
            raise ValueError(
                f"{path}: unsupported vgrid version {header.get('version')!r}"
            )
        missing = [key for key in _HEADER_KEYS if key not in header]
        if missing:
            raise ValueError(f"{path}: header missing fields {missing}")
        if header["model"] not in MODEL_FROM_ID:
            raise ValueError(f"{path}: unknown model id {header['model']!r}")
        spec = GridSpec(
            model=MODEL_FROM_ID[header["model"]],
            n_nodes=tuple(header["n_nodes"]),
            n_steps=header["n_steps"],
            horizon_T=header["horizon_T"],
            control_box=header["control_box"],
            control_resolution=header["control_resolution"],
        )
        if header["n_controls"] != spec.n_controls:
            raise ValueError(f"{path}: n_controls inconsistent with model")
        if abs(header["delta"] - spec.delta) > 1e-12 * max(spec.delta, 1.0):
            raise ValueError(f"{path}: delta inconsistent with n_steps and horizon_T")
        n_nodes_total = int(np.prod(spec.shape))
        n_vals = (spec.n_steps + 1) * n_nodes_total
        n_ctrl = (spec.n_steps + 1) * spec.n_controls * n_nodes_total
        body = raw[newline + 1 :]
        if len(body) != 8 * (n_vals + n_ctrl):
            raise ValueError(
                f"{path}: payload is {len(body)} bytes, expected {8 * (n_vals + n_ctrl)}"
            )
        flat = np.frombuffer(body, dtype="<f8")
        return cls(
            spec=spec,
            kappa_s_sq=float(header["kappa_s_sq"]),
            alpha=float(header["alpha"]),
            control_mode=header["control_mode"],
            values=flat[:n_vals].reshape((spec.n_steps + 1,) + spec.shape).copy(),
            controls=flat[n_vals:]
            .reshape((spec.n_steps + 1, spec.n_controls) + spec.shape)
            .copy(),
        )


# ---------------------------------------------------------------------------
# pointwise pieces of the backward equations


def terminal_cost(model: str, state):
    """1 - pz for the qubit models, theta^2 for the angle model."""
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}, expected one of {MODELS}")
    if model == ANGLE:
        theta = np.asarray(state, dtype=float)
        return theta * theta
    p = np.asarray(state, dtype=float)
    if p.shape[-1:] != (3,):
        raise ValueError("qubit state must have trailing dimension 3")
    return 1.0 - p[..., 2]


def optimal_controls_from_gradient(p, grad, control_box: float | None = None):
    """Completed-squares minimizer of the control Hamiltonian, shape (..., 2).

    u_plus = pz*dJ/dx - px*dJ/dz and u_minus = py*dJ/dz - pz*dJ/dy, clipped
    into the control box when one is given.
    """
    p = np.asarray(p, dtype=float)
    g = np.asarray(grad, dtype=float)
    u_plus = p[..., 2] * g[..., 0] - p[..., 0] * g[..., 2]
    u_minus = p[..., 1] * g[..., 2] - p[..., 2] * g[..., 1]
    u = np.stack([u_plus, u_minus], axis=-1)
    if control_box is not None:
        u = np.clip(u, -control_box, control_box)
    return u


def _control_terms(p, grad, control_box):
    """Running cost plus control-drift contraction at the best admissible u."""
    c = optimal_controls_from_gradient(p, grad)
    if control_box is None:
        return -np.sum(c * c, axis=-1)
    u = np.clip(c, -control_box, control_box)
    return np.sum(u * u - 2.0 * u * c, axis=-1)


def hjb_rhs_diffusive(p, grad, hess, params: ModelParams, control_box=None):
    """Minus the time derivative of the cost-to-go, homodyne model.

    The second-order coefficients are contracted from the outer product of
    the diffusion vector, never spelled out termwise.
    """
    p = np.asarray(p, dtype=float)
    g = np.asarray(grad, dtype=float)
    hess = np.asarray(hess, dtype=float)
    zero_u = np.zeros(p.shape[:-1] + (2,))
    drift_term = np.sum(diffusive_drift(p, zero_u) * g, axis=-1)
    sigma = diffusive_diffusion(p, params)
    quad = 0.5 * np.einsum("...i,...j,...ij->...", sigma, sigma, hess)
    return drift_term + quad + _control_terms(p, g, control_box)


def hjb_rhs_counting(p, grad, j_here, j_ground, params: ModelParams, control_box=None):
    """Minus the time derivative of the cost-to-go, photocounting model.

    No diffusion; instead the nonlocal detection term
    jump_intensity(p) * (J(ground) - J(p)).
    """
    p = np.asarray(p, dtype=float)
    g = np.asarray(grad, dtype=float)
    zero_u = np.zeros(p.shape[:-1] + (2,))
    drift_term = np.sum(counting_drift(p, zero_u, params) * g, axis=-1)
    lam = jump_intensity(p, params)
    nonlocal_term = lam * (np.asarray(j_ground, dtype=float) - np.asarray(j_here, dtype=float))
    return drift_term + nonlocal_term + _control_terms(p, g, control_box)


def hjb_rhs_angle(first_deriv, second_deriv, params: ModelParams, control_box=None):
    """Minus the time derivative of the cost-to-go, angle model."""
    d1 = np.asarray(first_deriv, dtype=float)
    d2 = np.asarray(second_deriv, dtype=float)
    diffusion = 2.0 * params.alpha**2 * d2
    if control_box is None:
        return -d1 * d1 + diffusion
    b = np.clip(-d1, -control_box, control_box)
    return b * b + 2.0 * b * d1 + diffusion


# ---------------------------------------------------------------------------
# masked finite-difference stencils (NaN marks nodes outside the ball)


def _shift(values: np.ndarray, axis: int, offset: int) -> np.ndarray:
    """values displaced by -offset along axis; vacated entries become NaN."""
    out = np.full_like(values, np.nan)
    n = values.shape[axis]
    if abs(offset) >= n:
        return out
    src = [slice(None)] * values.ndim
    dst = [slice(None)] * values.ndim
    if offset > 0:
        dst[axis] = slice(0, n - offset)
        src[axis] = slice(offset, n)
    else:
        dst[axis] = slice(-offset, n)
        src[axis] = slice(0, n + offset)
    out[tuple(dst)] = values[tuple(src)]
    return out


def _gradient_best(values: np.ndarray, spacings) -> np.ndarray:
    """Per-axis gradient: central where possible, one-sided inward at edges."""
    grads = []
    for axis, h in enumerate(spacings):
        vp = _shift(values, axis, +1)
        vm = _shift(values, axis, -1)
        has_p = np.isfinite(vp)
        has_m = np.isfinite(vm)
        central = (vp - vm) / (2.0 * h)
        fwd = (vp - values) / h
        bwd = (values - vm) / h
        grads.append(
            np.where(has_p & has_m, central,
                     np.where(has_p, fwd, np.where(has_m, bwd, 0.0)))
        )
    return np.stack(grads, axis=-1)


def _minmod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.where(a * b > 0.0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def _gradient_minmod(values: np.ndarray, spacings) -> np.ndarray:
    """Slope-limited gradient for control selection inside the DP recursion.

    The central estimate feeds oscillations back through the squared control
    cost and can run away when the slice has a kink; the minmod limiter is
    zero at local extrema, which breaks that loop, and costs only
    O(slope error)^2 per step in the minimized objective.
    """
    grads = []
    for axis, h in enumerate(spacings):
        vp = _shift(values, axis, +1)
        vm = _shift(values, axis, -1)
        fwd = (vp - values) / h
        bwd = (values - vm) / h
        has_p = np.isfinite(vp)
        has_m = np.isfinite(vm)
        limited = _minmod(np.where(has_p, fwd, 0.0), np.where(has_m, bwd, 0.0))
        one_sided = np.where(has_p, fwd, np.where(has_m, bwd, 0.0))
        grads.append(np.where(has_p & has_m, limited, one_sided))
    return np.stack(grads, axis=-1)


def _advection_upwind(values: np.ndarray, drift: np.ndarray, spacings) -> np.ndarray:
    """sum_i b_i * D_i values with the one-sided difference the drift points at.

    Where the upwind neighbor is masked the term is dropped rather than
    flipped downwind: the downwind difference puts a positive coefficient on
    the node itself and feeds growth at the mask edge.
    """
    total = np.zeros_like(values)
    for axis, h in enumerate(spacings):
        vp = _shift(values, axis, +1)
        vm = _shift(values, axis, -1)
        fwd = np.where(np.isfinite(vp), (vp - values) / h, 0.0)
        bwd = np.where(np.isfinite(vm), (values - vm) / h, 0.0)
        b = drift[..., axis]
        total = total + b * np.where(b > 0.0, fwd, bwd)
    return total


def _diffusion_term(values: np.ndarray, sigma: np.ndarray, spacings) -> np.ndarray:
    """(1/2) sigma sigma^T : Hessian with central stencils.

    Stencils needing a masked neighbor are dropped to zero: any one-sided
    second difference puts a positive coefficient on the node itself, which
    is explosive under explicit stepping.  The noise is tangent to the
    sphere, so the dropped normal component is small where it matters.
    """
    total = np.zeros_like(values)
    ndim = len(spacings)
    for axis, h in enumerate(spacings):
        vp = _shift(values, axis, +1)
        vm = _shift(values, axis, -1)
        d2 = np.where(
            np.isfinite(vp) & np.isfinite(vm),
            (vp - 2.0 * values + vm) / (h * h),
            0.0,
        )
        total = total + 0.5 * sigma[..., axis] ** 2 * d2
    for i in range(ndim):
        for j in range(i + 1, ndim):
            vpp = _shift(_shift(values, i, +1), j, +1)
            vpm = _shift(_shift(values, i, +1), j, -1)
            vmp = _shift(_shift(values, i, -1), j, +1)
            vmm = _shift(_shift(values, i, -1), j, -1)
            ok = (
                np.isfinite(vpp) & np.isfinite(vpm)
                & np.isfinite(vmp) & np.isfinite(vmm)
            )
            cross = np.where(
                ok,
                (vpp - vpm - vmp + vmm) / (4.0 * spacings[i] * spacings[j]),
                0.0,
            )
            total = total + sigma[..., i] * sigma[..., j] * cross
    return total


def _fill_inactive(values: np.ndarray) -> np.ndarray:
    """Extend a masked slice over NaN nodes by repeated neighbor averaging.

    Gives interpolation something sane to read just outside the ball; the
    extension is never treated as a solution value.
    """
    filled = np.array(values, dtype=float, copy=True)
    missing = np.isnan(filled)
    while missing.any():
        acc = np.zeros_like(filled)
        cnt = np.zeros(filled.shape)
        for axis in range(filled.ndim):
            for off in (+1, -1):
                s = _shift(filled, axis, off)
                good = np.isfinite(s)
                acc += np.where(good, s, 0.0)
                cnt += good
        newly = missing & (cnt > 0)
        if not newly.any():
            raise ValueError("cannot extend an all-NaN slice")
        filled[newly] = acc[newly] / cnt[newly]
        missing = np.isnan(filled)
    return filled


def _interp_box(filled: np.ndarray, axes, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation on a uniform box grid; queries are clamped."""
    pts = np.asarray(pts, dtype=float)
    d = len(axes)
    lead = pts.shape[:-1]
    q = pts.reshape(-1, d)
    base = []
    frac = []
    for ax in range(d):
        nodes = axes[ax]
        h = nodes[1] - nodes[0]
        f = (np.clip(q[:, ax], nodes[0], nodes[-1]) - nodes[0]) / h
        i0 = np.clip(np.floor(f).astype(int), 0, nodes.size - 2)
        base.append(i0)
        frac.append(np.clip(f - i0, 0.0, 1.0))
    out = np.zeros(q.shape[0])
    for corner in range(1 << d):
        weight = np.ones(q.shape[0])
        idx = []
        for ax in range(d):
            bit = (corner >> ax) & 1
            idx.append(base[ax] + bit)
            weight = weight * (frac[ax] if bit else 1.0 - frac[ax])
        out += weight * filled[tuple(idx)]
    return out.reshape(lead)


def _interp_periodic(values: np.ndarray, theta) -> np.ndarray:
    """Linear interpolation on the periodic angle grid; any real angle works."""
    theta = np.asarray(theta, dtype=float)
    n = values.size
    h = 2.0 * np.pi / n
    f = (theta + np.pi) / h
    i0 = np.floor(f).astype(int)
    w = f - i0
    i0 = np.mod(i0, n)
    return values[i0] * (1.0 - w) + values[np.mod(i0 + 1, n)] * w


def _require_finite(arr: np.ndarray, slice_idx: int, mask=None) -> None:
    bad = ~np.isfinite(arr)
    if mask is not None:
        bad &= mask
    if bad.any():
        node = tuple(int(i) for i in np.argwhere(bad)[0])
        raise RuntimeError(f"non-finite value at slice {slice_idx}, node {node}")


def _check_spec_params(spec: GridSpec, params: ModelParams) -> None:
    if abs(spec.horizon_T - params.horizon_T) > 1e-12 * params.horizon_T:
        raise ValueError(
            f"grid horizon {spec.horizon_T!r} differs from model horizon "
            f"{params.horizon_T!r}"
        )


def _slice_controls(values_slice, spec: GridSpec, mask=None, points=None):
    """Feedback stored with a slice: completed squares from its own gradient."""
    box = spec.control_box
    if spec.model == ANGLE:
        h = spec.spacings()[0]
        grad = (np.roll(values_slice, -1) - np.roll(values_slice, 1)) / (2.0 * h)
        b = -grad if box is None else np.clip(-grad, -box, box)
        return b[None, :]
    grad = _gradient_best(values_slice, spec.spacings())
    u = optimal_controls_from_gradient(points, grad, box)
    return np.where(mask, np.moveaxis(u, -1, 0), np.nan)


# ---------------------------------------------------------------------------
# finite-difference solver


def solve_backward(spec: GridSpec, params: ModelParams) -> ValueGrid:
    """Explicit finite-difference sweep of the backward equation.

    Checks the diffusion stability bound delta <= 0.25 h^2 / max_diffusion
    up front (the counting model, having no diffusion, gets the analogous
    drift-plus-intensity load bound with worst-case box controls instead;
    an unbounded counting solve is checked at zero control only).  Raises
    ValueError when the bound fails and RuntimeError, naming slice and
    node, if a non-finite value appears anyway.
    """
    _check_spec_params(spec, params)
    if spec.model == ANGLE:
        return _solve_fd_angle(spec, params)
    return _solve_fd_qubit(spec, params)


def _solve_fd_angle(spec: GridSpec, params: ModelParams) -> ValueGrid:
    (theta,) = spec.axes()
    h = spec.spacings()[0]
    n_steps, delta = spec.n_steps, spec.delta
    diffusion = 2.0 * params.alpha**2
    if n_steps > 0 and diffusion > 0.0:
        bound = CFL_SAFETY * h * h / diffusion
        if delta > bound:
            raise ValueError(
                f"time step {delta:.6g} violates the stability bound {bound:.6g}; "
                "increase n_steps or coarsen the grid"
            )
    box = spec.control_box
    values = np.empty((n_steps + 1, theta.size))
    controls = np.empty((n_steps + 1, 1, theta.size))
    values[n_steps] = theta * theta
    for k in range(n_steps, 0, -1):
        v = values[k]
        grad = (np.roll(v, -1) - np.roll(v, 1)) / (2.0 * h)
        b = -grad if box is None else np.clip(-grad, -box, box)
        controls[k, 0] = b
        second = (np.roll(v, -1) - 2.0 * v + np.roll(v, 1)) / (h * h)
        new = v + delta * (b * b + 2.0 * b * grad + diffusion * second)
        _require_finite(new, k - 1)
        values[k - 1] = new
    controls[0] = _slice_controls(values[0], spec)
    return ValueGrid(
        spec=spec,
        kappa_s_sq=params.kappa_s_sq,
        alpha=params.alpha,
        control_mode=CLOSED_FORM,
        values=values,
        controls=controls,
    )


def _solve_fd_qubit(spec: GridSpec, params: ModelParams) -> ValueGrid:
    axes = spec.axes()
    spacings = spec.spacings()
    mask = spec.active_mask()
    pts = spec.points()
    flat = pts[mask]
    n_steps, delta = spec.n_steps, spec.delta
    box = spec.control_box
    counting = spec.model == COUNTING

    sigma = np.zeros(spec.shape + (3,))
    lam = np.zeros(spec.shape)
    if counting:
        lam[mask] = jump_intensity(flat, params)
    else:
        sigma[mask] = diffusive_diffusion(flat, params)

    if n_steps > 0:
        if counting:
            # monotone load of the drift/jump stepping, worst-case controls
            u_max = box if box is not None else 0.0
            b0 = counting_drift(flat, np.zeros((flat.shape[0], 2)), params)
            swing = 2.0 * u_max * np.stack(
                [np.abs(flat[:, 2]), np.abs(flat[:, 2]),
                 np.abs(flat[:, 0]) + np.abs(flat[:, 1])],
                axis=-1,
            )
            load = np.sum((np.abs(b0) + swing) / np.asarray(spacings), axis=-1)
            load += jump_intensity(flat, params)
            worst = float(load.max())
            if worst > 0.0 and delta > CFL_SAFETY / worst:
                raise ValueError(
                    f"time step {delta:.6g} violates the stability bound "
                    f"{CFL_SAFETY / worst:.6g}; increase n_steps or coarsen the grid"
                )
        else:
            max_diffusion = float((0.5 * np.sum(sigma[mask] ** 2, axis=-1)).max())
            if max_diffusion > 0.0:
                bound = CFL_SAFETY * min(spacings) ** 2 / max_diffusion
                if delta > bound:
                    raise ValueError(
                        f"time step {delta:.6g} violates the stability bound "
                        f"{bound:.6g}; increase n_steps or coarsen the grid"
                    )

    values = np.full((n_steps + 1,) + spec.shape, np.nan)
    controls = np.full((n_steps + 1, 2) + spec.shape, np.nan)
    values[n_steps] = np.where(mask, 1.0 - pts[..., 2], np.nan)

    drift_full = np.zeros(spec.shape + (3,))
    running = np.zeros(spec.shape)
    for k in range(n_steps, 0, -1):
        v = values[k]
        grad = _gradient_best(v, spacings)
        u_flat = optimal_controls_from_gradient(flat, grad[mask], box)
        controls[k, 0][mask] = u_flat[:, 0]
        controls[k, 1][mask] = u_flat[:, 1]
        if counting:
            drift_full[mask] = counting_drift(flat, u_flat, params)
            j_ground = float(
                _interp_box(_fill_inactive(v), axes, np.asarray(GROUND_STATE, float))
            )
            rhs = _advection_upwind(v, drift_full, spacings) + lam * (j_ground - v)
        else:
            drift_full[mask] = diffusive_drift(flat, u_flat)
            rhs = _advection_upwind(v, drift_full, spacings) + _diffusion_term(
                v, sigma, spacings
            )
        running[mask] = np.sum(u_flat * u_flat, axis=-1)
        new = np.where(mask, v + delta * (rhs + running), np.nan)
        _require_finite(new, k - 1, mask)
        values[k - 1] = new

    controls[0] = _slice_controls(values[0], spec, mask, pts)
    return ValueGrid(
        spec=spec,
        kappa_s_sq=params.kappa_s_sq,
        alpha=params.alpha,
        control_mode=CLOSED_FORM,
        values=values,
        controls=controls,
    )


# ---------------------------------------------------------------------------
# dynamic-programming recursion


def dp_recursion_step(
    values,
    spec: GridSpec,
    params: ModelParams,
    mode: str = CLOSED_FORM,
    *,
    return_controls: bool = False,
):
    """One backward step of the dynamic-programming recursion.

    The expectation over the next state uses a two-point quadrature for the
    Wiener increment (exact through second moments) and, for the counting
    model, the Bernoulli pair {jump to ground, drift through}.  In
    ``"exhaustive"`` mode the minimization scans the configured control
    grid; in ``"closed-form"`` mode it evaluates the completed-squares
    control read off the slice gradient.  Over a full horizon the two modes
    agree to about T * (control grid spacing)^2; tests pin the measured
    constant.

    Returns the new slice, or (slice, controls) with ``return_controls``.
    """
    if mode not in CONTROL_MODES:
        raise ValueError(f"mode must be one of {CONTROL_MODES}")
    if spec.n_steps < 1:
        raise ValueError("dp_recursion_step needs n_steps >= 1 for a positive delta")
    values = np.asarray(values, dtype=float)
    if values.shape != spec.shape:
        raise ValueError(f"slice must have shape {spec.shape}, got {values.shape}")
    if mode == EXHAUSTIVE and spec.control_values() is None:
        raise ValueError("exhaustive mode needs control_box and control_resolution")
    if spec.model == ANGLE:
        return _dp_step_angle(values, spec, params, mode, return_controls)
    return _dp_step_qubit(values, spec, params, mode, return_controls)


def _dp_step_angle(v, spec, params, mode, return_controls):
    (theta,) = spec.axes()
    delta = spec.delta
    kick = 2.0 * params.alpha * np.sqrt(delta)

    def objective(b):
        drifted = theta + 2.0 * b * delta
        mean_next = 0.5 * (
            _interp_periodic(v, drifted + kick) + _interp_periodic(v, drifted - kick)
        )
        return b * b * delta + mean_next

    if mode == EXHAUSTIVE:
        best = np.full(theta.size, np.inf)
        best_b = np.zeros(theta.size)
        for b in spec.control_values():
            val = objective(b)
            better = val < best
            best = np.where(better, val, best)
            best_b = np.where(better, b, best_b)
    else:
        h = spec.spacings()[0]
        grad = _minmod((np.roll(v, -1) - v) / h, (v - np.roll(v, 1)) / h)
        best_b = -grad
        if spec.control_box is not None:
            best_b = np.clip(best_b, -spec.control_box, spec.control_box)
        best = objective(best_b)
    if return_controls:
        return best, best_b[None, :]
    return best


def _dp_step_qubit(v, spec, params, mode, return_controls):
    axes = spec.axes()
    mask = spec.active_mask()
    flat = spec.points()[mask]
    delta = spec.delta
    filled = _fill_inactive(v)
    counting = spec.model == COUNTING

    if counting:
        lam = jump_intensity(flat, params)
        if delta * float(lam.max()) >= 1.0:
            raise ValueError("delta * max jump intensity >= 1; increase n_steps")
        j_ground = float(_interp_box(filled, axes, np.asarray(GROUND_STATE, float)))
    else:
        sigma = diffusive_diffusion(flat, params)
        kick = sigma * np.sqrt(delta)

    def objective(u):
        effort = np.sum(np.asarray(u) ** 2, axis=-1)
        if counting:
            drifted = np.clip(flat + counting_drift(flat, u, params) * delta, -1.0, 1.0)
            jump_prob = lam * delta
            mean_next = (1.0 - jump_prob) * _interp_box(filled, axes, drifted)
            mean_next += jump_prob * j_ground
        else:
            drifted = flat + diffusive_drift(flat, u) * delta
            mean_next = 0.5 * (
                _interp_box(filled, axes, np.clip(drifted + kick, -1.0, 1.0))
                + _interp_box(filled, axes, np.clip(drifted - kick, -1.0, 1.0))
            )
        return effort * delta + mean_next

    m = flat.shape[0]
    if mode == EXHAUSTIVE:
        grid = spec.control_values()
        best = np.full(m, np.inf)
        best_u = np.zeros((m, 2))
        for u_plus in grid:
            for u_minus in grid:
                val = objective(np.array([u_plus, u_minus]))
                better = val < best
                best[better] = val[better]
                best_u[better] = (u_plus, u_minus)
    else:
        grad = _gradient_minmod(v, spec.spacings())[mask]
        best_u = optimal_controls_from_gradient(flat, grad, spec.control_box)
        best = objective(best_u)

    new = np.full(spec.shape, np.nan)
    new[mask] = best
    if return_controls:
        ctrl = np.full((2,) + spec.shape, np.nan)
        ctrl[0][mask] = best_u[:, 0]
        ctrl[1][mask] = best_u[:, 1]
        return new, ctrl
    return new


def solve_dp(spec: GridSpec, params: ModelParams, mode: str = CLOSED_FORM) -> ValueGrid:
    """Full backward dynamic-programming sweep (see dp_recursion_step)."""
    _check_spec_params(spec, params)
    if mode not in CONTROL_MODES:
        raise ValueError(f"mode must be one of {CONTROL_MODES}")
    mask = spec.active_mask()
    pts = spec.points()
    n_steps = spec.n_steps
    values = np.full((n_steps + 1,) + spec.shape, np.nan)
    controls = np.full((n_steps + 1, spec.n_controls) + spec.shape, np.nan)
    if spec.model == ANGLE:
        values[n_steps] = terminal_cost(ANGLE, pts)
    else:
        values[n_steps] = np.where(mask, terminal_cost(spec.model, pts), np.nan)
    controls[n_steps] = _slice_controls(values[n_steps], spec, mask, pts)
    for k in range(n_steps, 0, -1):
        new, ctrl = dp_recursion_step(
            values[k], spec, params, mode, return_controls=True
        )
        _require_finite(new, k - 1, None if spec.model == ANGLE else mask)
        values[k - 1] = new
        controls[k - 1] = ctrl
    return ValueGrid(
        spec=spec,
        kappa_s_sq=params.kappa_s_sq,
        alpha=params.alpha,
        control_mode=mode,
        values=values,
        controls=controls,
    )


# ---------------------------------------------------------------------------
# policy extraction


def extract_policy(vg: ValueGrid):
    """Feedback policy (t, state) -> control interpolated from a solved grid.

    Time picks the nearest stored slice; the state is clamped into the grid
    bounds and the stored controls are interpolated multilinearly (masked
    nodes are backfilled by nearest-neighbor extension first, so queries
    near the sphere stay finite).  Queries with t outside [0, T] raise
    ValueError.  The returned callable accepts batched states.
    """
    spec = vg.spec
    n_steps = spec.n_steps
    horizon = spec.horizon_T
    delta = spec.delta
    tol = 1e-9 * max(horizon, 1.0)

    def slice_index(t: float) -> int:
        t = float(t)
        if t < -tol or t > horizon + tol:
            raise ValueError(f"policy query at t={t!r} outside [0, {horizon}]")
        if n_steps == 0:
            return 0
        return min(n_steps, max(0, int(np.floor(t / delta + 0.5))))

    if spec.model == ANGLE:
        table = vg.controls[:, 0, :]

        def policy(t, state):
            return _interp_periodic(table[slice_index(t)], state)

        return policy

    axes = spec.axes()
    filled = np.stack(
        [
            np.stack([_fill_inactive(vg.controls[k, c]) for c in range(2)])
            for k in range(n_steps + 1)
        ]
    )

    def policy(t, state):
        k = slice_index(t)
        q = np.clip(np.asarray(state, dtype=float), -1.0, 1.0)
        return np.stack(
            [_interp_box(filled[k, 0], axes, q), _interp_box(filled[k, 1], axes, q)],
            axis=-1,
        )

    return policy
