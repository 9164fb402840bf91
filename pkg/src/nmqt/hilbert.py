"""Dense operators on the atom space and the atom (x) cavity space.

Basis conventions used everywhere in the package:

* atom: index 0 is the ground state |g>, index 1 the excited state |e>;
* atom (x) cavity: lexicographic with the atom index outer, i.e. the
  amplitude of |a, n> lives at ``a * n_fock + n``.

Kets are 1-d complex numpy arrays and operators are square 2-d complex
arrays; there is no wrapper class.
"""

from __future__ import annotations

import numpy as np

Ket = np.ndarray
Operator = np.ndarray
DensityMatrix = np.ndarray

GROUND = 0
EXCITED = 1


def basis(dim: int, index: int) -> Ket:
    ket = np.zeros(dim, dtype=complex)
    ket[index] = 1.0
    return ket


def atom_operators() -> tuple[Operator, Operator, Operator]:
    """Return ``(sigma, sigma_dag, sigma_z)`` on the (|g>, |e>) basis.

    ``sigma_z`` is ``diag(-1, +1)``: the ground state has eigenvalue -1.
    """
    sigma = np.array([[0, 1], [0, 0]], dtype=complex)
    sigma_dag = sigma.conj().T.copy()
    sigma_z = np.diag([-1.0, 1.0]).astype(complex)
    return sigma, sigma_dag, sigma_z


def destroy(n_fock: int) -> Operator:
    """Annihilation operator on a Fock space truncated to ``n_fock`` levels."""
    if n_fock < 1:
        raise ValueError(f"n_fock must be positive, got {n_fock}")
    return np.diag(np.sqrt(np.arange(1, n_fock)), k=1).astype(complex)


def identity(dim: int) -> Operator:
    return np.eye(dim, dtype=complex)


def tensor(op_a: Operator, op_b: Operator) -> Operator:
    """Kronecker product with ``op_a`` as the outer (atom) factor."""
    return np.kron(np.asarray(op_a, dtype=complex), np.asarray(op_b, dtype=complex))


def apply(op: Operator, ket: Ket) -> Ket:
    op = np.asarray(op)
    ket = np.asarray(ket)
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise ValueError(f"operator must be square, got shape {op.shape}")
    if ket.shape != (op.shape[0],):
        raise ValueError(
            f"dimension mismatch: operator is {op.shape[0]}-dimensional, ket has shape {ket.shape}"
        )
    return op @ ket


def norm_sq(ket: Ket) -> float:
    ket = np.asarray(ket)
    return float(np.vdot(ket, ket).real)


def expect(op: Operator, rho: DensityMatrix) -> complex:
    return complex(np.trace(op @ rho))


def partial_trace_cavity(rho: DensityMatrix, n_fock: int) -> DensityMatrix:
    """Reduce an atom (x) cavity density matrix to the atom."""
    r = rho.reshape(2, n_fock, 2, n_fock)
    return np.einsum("anbn->ab", r)


def check_density_matrix(rho: DensityMatrix, atol: float = 1e-12, psd_tol: float = 1e-10) -> None:
    """Raise ``ValueError`` unless ``rho`` is Hermitian, unit-trace and PSD."""
    rho = np.asarray(rho)
    if not np.all(np.isfinite(rho)):
        raise ValueError("density matrix has non-finite entries")
    if np.max(np.abs(rho - rho.conj().T)) > atol:
        raise ValueError("density matrix is not Hermitian")
    tr = np.trace(rho)
    if abs(tr - 1.0) > atol:
        raise ValueError(f"density matrix trace is {tr}, expected 1")
    w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if w.min() < -psd_tol:
        raise ValueError(f"density matrix has negative eigenvalue {w.min():.3e}")
