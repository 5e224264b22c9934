"""Particle diffusion: constant implicit operator and the surface fast path.

With linear elements the backward-Euler particle system is

    A U^i = M U^{i-1} / dt - r_s^2 e_surf j,   A = M / dt + D_s K,

where M and K are the r^2-weighted mass and stiffness matrices. A is the
same for every particle of one electrode, so the surface concentration is
an affine function of the pore-wall flux j with a slope that only depends
on (electrode, dt).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded, LinAlgError

from .errors import DFNError
from .mesh import MicroMesh

# 3-point Gauss rule on [-1, 1]; exact for the degree-4 r^2 psi psi integrand
_GAUSS3_X = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GAUSS3_W = np.array([5.0, 8.0, 5.0]) / 9.0


def radial_matrices(r: np.ndarray):
    """Dense r^2-weighted mass and stiffness matrices of a linear radial mesh."""
    n = r.size
    M = np.zeros((n, n))
    K = np.zeros((n, n))
    for e in range(n - 1):
        r0, r1 = r[e], r[e + 1]
        h = r1 - r0
        rq = 0.5 * (r0 + r1) + 0.5 * h * _GAUSS3_X
        wq = 0.5 * h * _GAUSS3_W * rq**2
        psi = np.stack([(r1 - rq) / h, (rq - r0) / h])
        dpsi = np.array([-1.0 / h, 1.0 / h])
        idx = np.ix_([e, e + 1], [e, e + 1])
        M[idx] += (psi * wq) @ psi.T
        K[idx] += np.outer(dpsi, dpsi) * wq.sum()
    return M, K


def _to_banded(A):
    # upper form for a symmetric tridiagonal matrix
    n = A.shape[0]
    ab = np.zeros((2, n))
    ab[1] = np.diag(A)
    ab[0, 1:] = np.diag(A, 1)
    return ab


@dataclass(frozen=True, eq=False)
class MicroOperator:
    """Implicit particle operator of one electrode for one time-step size."""

    mesh: MicroMesh
    D_s: float
    dt: float
    M: np.ndarray
    K: np.ndarray
    A: np.ndarray
    factor: np.ndarray  # banded Cholesky factor of A
    e_surf: np.ndarray
    lam_surf: np.ndarray  # A^{-T} e_surf
    flux_shape: np.ndarray  # r_s^2 e_surf, the j coefficient of the particle residual
    base_weights: np.ndarray  # e_surf - D_s K lam_surf
    dcs_dj: float

    def solve(self, rhs):
        """Solve A x = rhs; rhs has the radial index last."""
        rhs = np.asarray(rhs)
        x = cho_solve_banded((self.factor, False), np.atleast_2d(rhs).T)
        return x.T.reshape(rhs.shape)

    def residual(self, U, U_prev, j):
        """Particle residual rows per node: M (U - U_prev) / dt + D_s K U + r_s^2 e j."""
        U = np.atleast_2d(U)
        return (U - U_prev) @ self.M.T / self.dt + self.D_s * U @ self.K.T + np.multiply.outer(j, self.flux_shape)

    def content(self, U):
        """r^2-weighted lithium content 1^T M U per particle."""
        return np.asarray(U) @ self.M.sum(axis=0)


def build_micro_operator(mesh: MicroMesh, D_s: float, dt: float) -> MicroOperator:
    if not dt > 0:
        raise DFNError(f"time step must be positive, got {dt}")
    if not D_s > 0:
        raise DFNError(f"particle diffusivity must be positive, got {D_s}")
    M, K = radial_matrices(mesh.r)
    A = M / dt + D_s * K
    try:
        factor = cholesky_banded(_to_banded(A), lower=False)
    except LinAlgError as exc:  # A is SPD by construction
        raise DFNError(f"particle operator factorization failed: {exc}") from exc
    e = np.zeros(mesh.n_nodes)
    e[mesh.surface_index] = 1.0
    lam = cho_solve_banded((factor, False), e)
    flux_shape = mesh.radius**2 * e
    return MicroOperator(
        mesh=mesh, D_s=float(D_s), dt=float(dt), M=M, K=K, A=A, factor=factor,
        e_surf=e, lam_surf=lam, flux_shape=flux_shape,
        base_weights=e - D_s * (K @ lam),
        dcs_dj=float(-lam @ flux_shape),
    )


@lru_cache(maxsize=64)
def _cached(r_key, D_s, dt):
    return build_micro_operator(MicroMesh(np.array(r_key)), D_s, dt)


def micro_operator(mesh: MicroMesh, D_s: float, dt: float) -> MicroOperator:
    """Cached operator keyed on (mesh, D_s, dt); a new dt builds a new operator."""
    return _cached(tuple(mesh.r.tolist()), float(D_s), float(dt))


def surface_base(op: MicroOperator, U_prev):
    """Flux-independent part L U_prev - lam . (D_s K U_prev), one value per particle."""
    return np.asarray(U_prev) @ op.base_weights


def surface_concentration_fast(op: MicroOperator, U_prev, j):
    """Surface concentration after one implicit step and its derivative in j."""
    return surface_base(op, U_prev) + op.dcs_dj * np.asarray(j), op.dcs_dj


def recover_micro_state(op: MicroOperator, U_prev, j):
    """Full radial profiles after the step, one factorized solve per particle."""
    U_prev = np.atleast_2d(U_prev)
    rhs = U_prev @ op.M.T / op.dt - np.multiply.outer(np.atleast_1d(j), op.flux_shape)
    return op.solve(rhs)
