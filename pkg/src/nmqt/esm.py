"""Extended-system method: the atom plus an explicit cavity mode, Markovian.

The cavity mode (frequency ``nu``, linewidth ``kappa``, coupling ``sqrt(gamma)``)
reproduces the Lorentzian memory and response kernels exactly, so this model
is the reference for the non-Markovian trajectories.

    H_eff = H0 + nu a^dag a + i sqrt(gamma) (a sigma^dag - a^dag sigma) - i (kappa/2) a^dag a

with jump operator ``sqrt(kappa) a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import hilbert
from .engine import SimParams, StepSizeError, TrajectoryRecord, atom_hamiltonian
from .streams import substream

SIGMA, SIGMA_DAG, SIGMA_Z = hilbert.atom_operators()


class TruncationError(RuntimeError):
    """The Fock truncation is too small for the populations reached."""


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EsmModel:
    H_eff: np.ndarray
    collapse: np.ndarray
    n_fock: int | None  # None for an atom-only model

    @property
    def dim(self) -> int:
        return self.H_eff.shape[0]

    @property
    def hamiltonian(self) -> np.ndarray:
        """Hermitian part of ``H_eff``."""
        return 0.5 * (self.H_eff + self.H_eff.conj().T)

    def check_consistency(self, atol: float = 1e-12) -> None:
        anti = 0.5 * (self.H_eff - self.H_eff.conj().T)
        expected = -0.5j * self.collapse.conj().T @ self.collapse
        dev = np.max(np.abs(anti - expected))
        if dev > atol:
            raise ValueError(f"anti-Hermitian part of H_eff differs from -(i/2) C^dag C by {dev:.2e}")

    def sigma_z(self) -> np.ndarray:
        if self.n_fock is None:
            return SIGMA_Z
        return hilbert.tensor(SIGMA_Z, hilbert.identity(self.n_fock))


def build_esm_model(params: SimParams, n_fock: int | None = None) -> EsmModel:
    n_fock = params.n_fock if n_fock is None else n_fock
    if n_fock < 2:
        raise ValueError(f"n_fock must be >= 2, got {n_fock}")
    a = hilbert.destroy(n_fock)
    ident_c = hilbert.identity(n_fock)
    ident_a = hilbert.identity(2)
    A = hilbert.tensor(ident_a, a)
    Sm = hilbert.tensor(SIGMA, ident_c)
    num = A.conj().T @ A
    h_eff = (
        hilbert.tensor(atom_hamiltonian(params), ident_c)
        + params.nu * num
        + 1j * math.sqrt(params.gamma) * (A @ Sm.conj().T - A.conj().T @ Sm)
        - 0.5j * params.kappa * num
    )
    model = EsmModel(h_eff, math.sqrt(params.kappa) * A, n_fock)
    model.check_consistency()
    return model


def build_markov_atom_model(params: SimParams, Gamma: float) -> EsmModel:
    """Atom-only Markovian model with jump operator ``sqrt(Gamma) sigma``."""
    h_eff = atom_hamiltonian(params) - 0.5j * Gamma * SIGMA_DAG @ SIGMA
    model = EsmModel(h_eff, math.sqrt(Gamma) * SIGMA, None)
    model.check_consistency()
    return model


def no_jump_operator(model: EsmModel, dt: float, propagator: str = "exact") -> np.ndarray:
    """No-jump propagator over one step: ``expm(-i H_eff dt)`` or ``1 - i H_eff dt``.

    The first-order form is unstable once ``n kappa dt / 2`` exceeds about 2
    for an occupied Fock level ``n``.
    """
    if propagator == "exact":
        return expm(-1j * dt * model.H_eff)
    if propagator == "euler":
        return np.eye(model.dim) - 1j * dt * model.H_eff
    raise ValueError(f"unknown propagator {propagator!r}")


def mcwf_step(state: np.ndarray, model: EsmModel, dt: float, rng: np.random.Generator, no_jump=None):
    """One Monte-Carlo wavefunction step; consumes exactly one uniform draw.

    ``p_click = dt |C psi|^2``. A click applies ``C``; otherwise ``no_jump``
    (default ``1 - i H_eff dt``) is applied. The result is renormalized.

    Returns ``(new_state, clicked, p_click)``.
    """
    jumped = model.collapse @ state
    p_click = dt * hilbert.norm_sq(jumped)
    if p_click > 1.0:
        raise StepSizeError(f"p_click = {p_click:.4f} > 1; reduce dt")
    if rng.random() < p_click:
        new, clicked = jumped, True
    else:
        if no_jump is None:
            new = state - 1j * dt * (model.H_eff @ state)
        else:
            new = no_jump @ state
        clicked = False
    return new / math.sqrt(hilbert.norm_sq(new)), clicked, p_click


def initial_product_state(atom_ket, n_fock: int | None) -> np.ndarray:
    atom_ket = np.asarray(atom_ket, dtype=complex)
    if n_fock is None:
        return atom_ket.copy()
    return np.kron(atom_ket, hilbert.basis(n_fock, 0))


def run_esm_trajectory(
    params: SimParams,
    rng: np.random.Generator | None = None,
    traj_index: int = 0,
    initial_atom_ket=None,
    model: EsmModel | None = None,
    n_steps: int | None = None,
    max_detections: int | None = None,
    propagator: str = "exact",
) -> TrajectoryRecord:
    """MCWF trajectory of the extended system on the same grid as the NMQT engine.

    ``sigma_z_series`` is the atom-reduced ``<sigma_z>`` at ``k dt`` for
    ``k = 0 .. n_steps``.
    """
    model = build_esm_model(params) if model is None else model
    if rng is None:
        rng = substream(params.seed, traj_index)
    if initial_atom_ket is None:
        initial_atom_ket = hilbert.basis(2, hilbert.GROUND)
    n_steps = params.n_steps if n_steps is None else n_steps
    no_jump = no_jump_operator(model, params.dt, propagator)
    state = initial_product_state(initial_atom_ket, model.n_fock)
    sz_op = np.real(np.diag(model.sigma_z()))  # sigma_z (x) 1 is diagonal
    p_click = np.empty(n_steps)
    outcomes = np.zeros(n_steps, dtype=bool)
    sz = np.empty(n_steps + 1)
    sz[0] = float(np.sum(sz_op * np.abs(state) ** 2))
    done = n_steps
    n_det = 0
    for k in range(n_steps):
        state, clicked, p = mcwf_step(state, model, params.dt, rng, no_jump)
        p_click[k] = p
        outcomes[k] = clicked
        sz[k + 1] = float(np.sum(sz_op * np.abs(state) ** 2))
        if clicked:
            n_det += 1
            if max_detections is not None and n_det >= max_detections:
                done = k + 1
                break
    return TrajectoryRecord(
        detection_time_indices=np.flatnonzero(outcomes[:done]) + 1,
        p_click_series=p_click[:done],
        outcomes=outcomes[:done],
        sigma_z_times=np.arange(done + 1) * params.dt,
        sigma_z_series=sz[: done + 1],
        seed=params.seed,
        traj_index=traj_index,
        params=params,
    )


# --- deterministic master equation -------------------------------------------


def liouvillian(model: EsmModel) -> np.ndarray:
    """Lindblad generator acting on row-major ``rho.ravel()``."""
    H = model.hamiltonian
    C = model.collapse
    CdC = C.conj().T @ C
    ident = np.eye(model.dim)
    # row-major vec: vec(A rho B) = kron(A, B.T) vec(rho)
    return (
        -1j * (np.kron(H, ident) - np.kron(ident, H.T))
        + np.kron(C, C.conj())
        - 0.5 * np.kron(CdC, ident)
        - 0.5 * np.kron(ident, CdC.T)
    )


def _rk4_map(L: np.ndarray, h: float) -> np.ndarray:
    """The one-step RK4 map for the linear ODE ``x' = L x``."""
    hL = h * L
    ident = np.eye(L.shape[0])
    return ident + hL @ (ident + hL @ (ident / 2 + hL @ (ident / 6 + hL / 24)))


def _top_fock_population(rho: np.ndarray, n_fock: int) -> float:
    diag = np.real(np.diag(rho)).reshape(2, n_fock)
    return float(diag[:, -1].sum())


def integrate_master_equation(
    params: SimParams,
    rho0: np.ndarray | None = None,
    t_total: float | None = None,
    dt_out: float | None = None,
    model: EsmModel | None = None,
    trace_tol: float = 1e-9,
    top_fock_tol: float = 1e-6,
):
    """Fixed-step RK4 integration of the extended-system master equation.

    The internal step is ``min(dt_out, 0.01 / kappa)`` rounded down so that it
    divides ``dt_out``. Returns ``(times, rhos)`` sampled every ``dt_out``
    (default ``params.dt``) from 0 to ``t_total``.
    """
    model = build_esm_model(params) if model is None else model
    t_total = params.t_total if t_total is None else t_total
    dt_out = params.dt if dt_out is None else dt_out
    if rho0 is None:
        psi0 = initial_product_state(hilbert.basis(2, hilbert.GROUND), model.n_fock)
        rho0 = np.outer(psi0, psi0.conj())
    h_max = min(dt_out, 0.01 / params.kappa) if params.kappa > 0 else dt_out
    sub = max(1, math.ceil(dt_out / h_max - 1e-9))
    step_map = _rk4_map(liouvillian(model), dt_out / sub)
    out_map = np.linalg.matrix_power(step_map, sub)
    n_out = int(round(t_total / dt_out))
    d = model.dim
    rhos = np.empty((n_out + 1, d, d), dtype=complex)
    vec = np.asarray(rho0, dtype=complex).ravel()
    rhos[0] = rho0
    for k in range(1, n_out + 1):
        vec = out_map @ vec
        rhos[k] = vec.reshape(d, d)
    traces = np.real(np.einsum("kii->k", rhos))
    drift = np.max(np.abs(traces - 1.0))
    if drift > trace_tol:
        raise IntegrationError(f"trace drifted by {drift:.2e}")
    if model.n_fock is not None:
        top = max(_top_fock_population(r, model.n_fock) for r in rhos)
        if top > top_fock_tol:
            raise TruncationError(f"top Fock level population {top:.2e} exceeds {top_fock_tol:.0e}; raise n_fock")
    return np.arange(n_out + 1) * dt_out, rhos


def steady_state(model: EsmModel) -> np.ndarray:
    """Null vector of the Liouvillian with unit trace."""
    L = liouvillian(model)
    d = model.dim
    A = L.copy()
    # replace one equation by the trace condition
    A[0, :] = np.eye(d).ravel()
    rhs = np.zeros(d * d, dtype=complex)
    rhs[0] = 1.0
    rho = np.linalg.solve(A, rhs).reshape(d, d)
    return 0.5 * (rho + rho.conj().T)


def atom_sigma_z(rhos: np.ndarray, model: EsmModel) -> np.ndarray:
    op = model.sigma_z()
    return np.real(np.einsum("ij,kji->k", op, rhos))


def regression_correlation(params: SimParams, tau_max: float, dtau: float, model: EsmModel | None = None):
    """``C(tau) = <sigma^dag(tau) sigma(0)>`` in the steady state.

    ``B(0) = sigma rho_ss`` is propagated with the master-equation generator
    (exact exponential per ``dtau``) and ``C(tau) = Tr[sigma^dag B(tau)]``.
    Returns ``(taus, C)`` with ``taus = 0, dtau, ..., tau_max``.
    """
    model = build_esm_model(params) if model is None else model
    rho_ss = steady_state(model)
    if model.n_fock is not None:
        top = _top_fock_population(rho_ss, model.n_fock)
        if top > 1e-6:
            raise TruncationError(f"top Fock level population {top:.2e} in the steady state; raise n_fock")
        s = hilbert.tensor(SIGMA, hilbert.identity(model.n_fock))
    else:
        s = SIGMA
    step = expm(liouvillian(model) * dtau)
    n = int(round(tau_max / dtau))
    d = model.dim
    vec = (s @ rho_ss).ravel()
    sd = s.conj().T
    C = np.empty(n + 1, dtype=complex)
    for k in range(n + 1):
        C[k] = np.trace(sd @ vec.reshape(d, d))
        vec = step @ vec
    return np.arange(n + 1) * dtau, C
