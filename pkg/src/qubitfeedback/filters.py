"""Bloch-vector filtering equations for a continuously monitored qubit.

A two-level emitter decays into the electromagnetic field through a single
lowering channel split between two output modes: a monitored "side" mode
with coupling kappa_s and a feedback mode with coupling kappa_f, normalized
so kappa_s**2 + kappa_f**2 = 1.  Conditioning on a measurement of the side
mode gives a stochastic equation for the conditional state, written here in
polarization (Bloch) coordinates P = (px, py, pz) with

    rho = (I + px*sx + py*sy + pz*sz) / 2 .

Two unravelings of the same average dynamics are provided:

* homodyne detection of the side field, a diffusive equation driven by the
  innovation process dW, with observation increment
  dY = kappa_s * px * dt + dW;
* direct photodetection, a counting equation whose jumps reset the state to
  the ground state (0, 0, -1) with intensity (kappa_s**2 / 2) * (1 + pz).

Feedback enters through two real control amplitudes (u_plus, u_minus)
driving the feedback mode.  Both unravelings average to the same Lindblad
master equation, which `lindblad` evaluates in the density-matrix picture.

A third, exactly solvable model is included for benchmarking: a qubit under
a dephasing-type measurement of strength alpha and a z-rotation control B.
There the radius and pz are conserved and the dynamics reduce to the phase
angle on a circle, d(theta) = 2*B*dt + 2*alpha*dW (`angle_coefficients`).

All coefficient functions are vectorized over leading axes: states may be
arrays of shape (..., 3) and controls arrays of shape (..., 2).
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY = np.eye(2, dtype=complex)

# lowering operator of the decay channel
LOWERING = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)

# states are allowed to poke this far out of the unit ball before being
# radially projected back onto the sphere
BALL_TOL = 1e-6

# the counting unraveling resets here on every detection event
GROUND_STATE = np.array([0.0, 0.0, -1.0])


@dataclasses.dataclass(frozen=True)
class ModelParams:
    """Physical constants shared by the qubit and angle models.

    Parameters
    ----------
    kappa_s_sq : float
        Squared coupling into the monitored side mode, in [0, 1].
    kappa_f_sq : float, optional
        Squared coupling into the feedback mode.  Defaults to
        1 - kappa_s_sq; the two must sum to one.
    alpha : float
        Measurement strength of the dephasing (angle) model, >= 0.
    horizon_T : float
        Control horizon, > 0.
    """

    kappa_s_sq: float = 1.0
    kappa_f_sq: float | None = None
    alpha: float = 0.0
    horizon_T: float = 1.0

    def __post_init__(self):
        if self.kappa_f_sq is None:
            object.__setattr__(self, "kappa_f_sq", 1.0 - self.kappa_s_sq)
        for name in ("kappa_s_sq", "kappa_f_sq", "alpha", "horizon_T"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
        if self.kappa_s_sq < 0.0 or self.kappa_f_sq < 0.0:
            raise ValueError("squared couplings must be nonnegative")
        if abs(self.kappa_s_sq + self.kappa_f_sq - 1.0) > 1e-12:
            raise ValueError(
                "kappa_s_sq + kappa_f_sq must equal 1, got "
                f"{self.kappa_s_sq + self.kappa_f_sq!r}"
            )
        if self.alpha < 0.0:
            raise ValueError("alpha must be nonnegative")
        if self.horizon_T <= 0.0:
            raise ValueError("horizon_T must be positive")

    @property
    def kappa_s(self) -> float:
        return float(np.sqrt(self.kappa_s_sq))

    @property
    def kappa_f(self) -> float:
        return float(np.sqrt(self.kappa_f_sq))


@dataclasses.dataclass(frozen=True)
class AngleState:
    """State of the dephasing model: phase angle and conserved radius."""

    theta: float
    r: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.theta) and np.isfinite(self.r)):
            raise ValueError("angle state must be finite")
        if not 0.0 <= self.r <= 1.0 + BALL_TOL:
            raise ValueError(f"radius must lie in [0, 1], got {self.r!r}")


def warn_if_controls_unusable(params: ModelParams, control_box=None) -> None:
    """Warn when controls are configured but the feedback mode is closed.

    With kappa_f = 0 the control Hamiltonian vanishes identically, so any
    nonzero control box or policy burns running cost without moving the
    state.
    """
    if params.kappa_f_sq == 0.0 and control_box is not None:
        box = np.asarray(control_box, dtype=float)
        if np.any(box != 0.0):
            warnings.warn(
                "kappa_f_sq = 0: controls cannot act on the state, but a "
                "nonzero control box was configured",
                stacklevel=2,
            )


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


def _as_bloch(p, check_ball: bool = True) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1:] != (3,):
        raise ValueError(f"Bloch vector must have trailing dimension 3, got shape {p.shape}")
    _check_finite(p, "Bloch vector")
    if check_ball:
        norms = np.linalg.norm(p, axis=-1)
        if np.any(norms > 1.0 + 1e-3):
            raise ValueError(f"Bloch vector outside unit ball: |p| up to {norms.max()}")
    return p


def _as_control(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (2,):
        raise ValueError(f"control must have trailing dimension 2, got shape {u.shape}")
    _check_finite(u, "control")
    return u


def project_to_ball(p, ball_tol: float = BALL_TOL) -> np.ndarray:
    """Radially project states with |p| > 1 + ball_tol onto the unit sphere.

    States inside the tolerance band are returned unchanged.  Vectorized
    over leading axes.
    """
    p = np.asarray(p, dtype=float)
    norms = np.linalg.norm(p, axis=-1, keepdims=True)
    outside = norms > 1.0 + ball_tol
    if not np.any(outside):
        return p
    return np.where(outside, p / np.where(outside, norms, 1.0), p)


def bloch_to_density(p) -> np.ndarray:
    """Map Bloch vectors (..., 3) to density matrices (..., 2, 2)."""
    p = _as_bloch(p)
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    rho = np.empty(p.shape[:-1] + (2, 2), dtype=complex)
    rho[..., 0, 0] = (1.0 + pz) / 2.0
    rho[..., 1, 1] = (1.0 - pz) / 2.0
    rho[..., 0, 1] = (px - 1.0j * py) / 2.0
    rho[..., 1, 0] = (px + 1.0j * py) / 2.0
    return rho


def density_to_bloch(rho, tol: float = 1e-9) -> np.ndarray:
    """Map density matrices (..., 2, 2) to Bloch vectors (..., 3).

    Parameters
    ----------
    rho : array_like
        Candidate density matrices.
    tol : float
        Admissibility tolerance: Hermiticity defect, trace defect and
        negative-eigenvalue excursions beyond ``tol`` are rejected.

    Returns
    -------
    ndarray
        Bloch vectors p_i = Re tr(sigma_i rho).
    """
    rho = np.asarray(rho, dtype=complex)
    if rho.shape[-2:] != (2, 2):
        raise ValueError(f"density matrix must be (..., 2, 2), got shape {rho.shape}")
    _check_finite(rho.view(float), "density matrix")
    herm_defect = np.abs(rho - np.conj(np.swapaxes(rho, -1, -2))).max()
    if herm_defect > tol:
        raise ValueError(f"matrix is not Hermitian within {tol} (defect {herm_defect})")
    trace = np.trace(rho, axis1=-2, axis2=-1)
    trace_defect = np.abs(trace - 1.0).max()
    if trace_defect > tol:
        raise ValueError(f"trace differs from 1 by {trace_defect}")
    eigs = np.linalg.eigvalsh(rho)
    if eigs.min() < -tol:
        raise ValueError(f"matrix has negative eigenvalue {eigs.min()}")
    px = 2.0 * np.real(rho[..., 1, 0])
    py = 2.0 * np.imag(rho[..., 1, 0])
    pz = np.real(rho[..., 0, 0] - rho[..., 1, 1])
    return np.stack([px, py, pz], axis=-1)


def lindblad(rho, u, params: ModelParams) -> np.ndarray:
    """Evaluate the controlled Lindblad generator in the matrix picture.

    L(rho) = -i[H(u), rho]
             + sum_k ( V_k rho V_k* - (V_k* V_k rho + rho V_k* V_k) / 2 )

    with V_s = kappa_s * V, V_f = kappa_f * V for the lowering operator V,
    and control Hamiltonian H(u) = -(u_minus * sx + u_plus * sy).  The sign
    of H is fixed so that the matrix picture reproduces the Bloch equations
    of motion used everywhere else (the image of `lindblad` under
    `density_to_bloch`'s linear part equals `diffusive_drift`).

    Vectorized over leading axes of ``rho`` and ``u``.
    """
    rho = np.asarray(rho, dtype=complex)
    u = _as_control(u)
    u_plus, u_minus = u[..., 0], u[..., 1]
    ham = -(
        np.multiply.outer(u_minus, SIGMA_X) + np.multiply.outer(u_plus, SIGMA_Y)
    )
    commutator = ham @ rho - rho @ ham
    # the two decay channels add up to a unit-rate dissipator but are kept
    # separate to mirror the physical split of the output field
    out = -1.0j * commutator
    for rate in (params.kappa_s_sq, params.kappa_f_sq):
        v_rho_vdag = rate * (LOWERING @ rho @ LOWERING.conj().T)
        vdag_v = rate * (LOWERING.conj().T @ LOWERING)
        out = out + v_rho_vdag - 0.5 * (vdag_v @ rho + rho @ vdag_v)
    return out


def diffusive_drift(p, u) -> np.ndarray:
    """Drift of the homodyne filtering equation, shape (..., 3).

    Independent of the kappa split: the total decay rate is normalized to
    one, and the controls act through the feedback mode.
    """
    p = _as_bloch(p)
    u = _as_control(u)
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    u_plus, u_minus = u[..., 0], u[..., 1]
    out = np.empty(np.broadcast_shapes(p.shape[:-1], u.shape[:-1]) + (3,))
    out[..., 0] = -0.5 * px - 2.0 * u_plus * pz
    out[..., 1] = -0.5 * py + 2.0 * u_minus * pz
    out[..., 2] = -(1.0 + pz) + 2.0 * u_plus * px - 2.0 * u_minus * py
    return out


def diffusive_diffusion(p, params: ModelParams) -> np.ndarray:
    """Diffusion (noise) vector of the homodyne filtering equation."""
    p = _as_bloch(p)
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    out = np.empty(p.shape)
    out[..., 0] = 1.0 + pz - px * px
    out[..., 1] = -px * py
    out[..., 2] = -px * (1.0 + pz)
    return params.kappa_s * out


def observation_drift(p, params: ModelParams) -> np.ndarray:
    """Drift of the homodyne observation process: dY = kappa_s*px*dt + dW."""
    p = _as_bloch(p)
    return params.kappa_s * p[..., 0]


def counting_drift(p, u, params: ModelParams) -> np.ndarray:
    """Between-jump drift of the counting filter (jump term compensated).

    Equals `diffusive_drift` plus jump_intensity(p) * (p - jump_target),
    the compensator of the reset-to-ground jumps.
    """
    p = _as_bloch(p)
    base = diffusive_drift(p, u)
    lam = jump_intensity(p, params)
    return base + lam[..., None] * (p - GROUND_STATE)


def jump_intensity(p, params: ModelParams) -> np.ndarray:
    """Detection rate of the counting unraveling: (kappa_s^2/2)(1 + pz)."""
    p = _as_bloch(p)
    return 0.5 * params.kappa_s_sq * (1.0 + p[..., 2])


def jump_target(p=None) -> np.ndarray:
    """Post-jump state: the ground state, independent of the pre-jump state."""
    if p is None:
        return GROUND_STATE.copy()
    p = np.asarray(p, dtype=float)
    return np.broadcast_to(GROUND_STATE, p.shape).copy()


def angle_coefficients(B, params: ModelParams):
    """Drift and diffusion coefficients of the phase angle.

    d(theta) = 2*B*dt + 2*alpha*dW, so this returns (2*B, 2*alpha).  The
    diffusion coefficient is state- and control-independent.
    """
    B = np.asarray(B, dtype=float)
    _check_finite(B, "control B")
    return 2.0 * B, 2.0 * params.alpha
