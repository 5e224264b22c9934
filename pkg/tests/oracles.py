"""Independent reference implementations used by the test-suite.

* radial_matrices_exact: particle mass/stiffness by exact polynomial integration
* MonolithicStep: one backward-Euler step solved by plain Newton on the
  coupled system (macro unknowns plus every particle node), with a dense
  complex-step Jacobian of the whole residual
* ToyLagrangian: a small nonlinear time-stepping problem whose gradient is
  obtained by solving for every multiplier at once
"""
from __future__ import annotations

import numpy as np
from numpy.polynomial import Polynomial

from dfnfem.mesh import ELECTRODES


def radial_matrices_exact(r):
    """r^2-weighted linear-element mass and stiffness matrices via exact antiderivatives."""
    n = len(r)
    M = np.zeros((n, n))
    K = np.zeros((n, n))
    r2 = Polynomial([0.0, 0.0, 1.0])
    for e in range(n - 1):
        a, b = r[e], r[e + 1]
        h = b - a
        shape = [Polynomial([b / h, -1.0 / h]), Polynomial([-a / h, 1.0 / h])]
        grads = [-1.0 / h, 1.0 / h]
        for i in range(2):
            for k in range(2):
                m = (r2 * shape[i] * shape[k]).integ()
                M[e + i, e + k] += m(b) - m(a)
                s = r2.integ()
                K[e + i, e + k] += grads[i] * grads[k] * (s(b) - s(a))
    return M, K


class MonolithicStep:
    """Coupled macro + particle backward-Euler step, solved without the surface fast path."""

    def __init__(self, model, params, dt, i_app):
        self.model = model
        self.params = params
        self.dt = dt
        self.i_app = i_app
        self.n_mac = model.dofs.size
        self.blocks = {}
        start = self.n_mac
        for e in ELECTRODES:
            mesh = model.micro_mesh(params, e)
            n_part = model.mesh.electrode_nodes(e).size
            M, K = radial_matrices_exact(mesh.r)
            self.blocks[e] = dict(sl=slice(start, start + n_part * mesh.r.size), shape=(n_part, mesh.r.size),
                                  M=M, K=K, D=params.layer(e).D_s, R=mesh.r[-1])
            start += n_part * mesh.r.size
        self.size = start

    def block_slices(self):
        d = self.model.dofs
        return [d.c, d.p, d.s, d.j] + [b["sl"] for b in self.blocks.values()]

    def block_scale(self, z):
        """Largest magnitude of each unknown's field, so near-zero entries are judged on the field scale."""
        scale = np.empty_like(z)
        for sl in self.block_slices():
            scale[sl] = max(np.max(np.abs(z[sl])), 1e-300)
        return scale

    def pack(self, state):
        z = np.zeros(self.size)
        z[: self.n_mac] = state.y
        for e in ELECTRODES:
            z[self.blocks[e]["sl"]] = state.micro[e].ravel()
        return z

    def residual(self, z, z_prev):
        d = self.model.dofs
        y = z[: self.n_mac]
        U = {e: z[b["sl"]].reshape(b["shape"]) for e, b in self.blocks.items()}
        U_prev = {e: z_prev[b["sl"]].reshape(b["shape"]) for e, b in self.blocks.items()}
        cs = np.concatenate([U[e][:, -1] for e in ELECTRODES])
        R_mac = self.model.disc.residual(y, z_prev[: self.n_mac], cs, self.params, self.dt, self.i_app)
        out = [R_mac]
        for e in ELECTRODES:
            b = self.blocks[e]
            j = y[d.j][d.electrode_slices[e]]
            # weak form of dc/dt = D r^-2 d/dr(r^2 dc/dr) with D dc/dr = -j at the surface
            R = (U[e] - U_prev[e]) @ b["M"].T / self.dt + b["D"] * U[e] @ b["K"].T
            R[:, -1] += b["R"] ** 2 * j
            out.append(R.ravel())
        return np.concatenate(out)

    def jacobian(self, z, z_prev, h=1e-20):
        J = np.zeros((self.size, self.size))
        for k in range(self.size):
            zc = z.astype(complex)
            zc[k] += 1j * h
            J[:, k] = self.residual(zc, z_prev).imag / h
        return J

    def solve(self, state_prev, tol=1e-12, max_iter=40):
        z_prev = self.pack(state_prev)
        z = z_prev.copy()
        for _ in range(max_iter):
            R = self.residual(z, z_prev)
            dz = np.linalg.solve(self.jacobian(z, z_prev), -R)
            z = z + dz
            if np.max(np.abs(dz) / self.block_scale(z)) < tol:
                break
        else:
            raise RuntimeError("monolithic Newton did not converge")
        micro = {e: z[b["sl"]].reshape(b["shape"]) for e, b in self.blocks.items()}
        return z[: self.n_mac], micro


class ToyLagrangian:
    """R^i = A(th) U^i + a U^i**3 - B U^{i-1} - f(th), U^0 = g(th), i = 1..N.

    Objective L = sum_i c_i . U^i + 0.5 |U^N|^2 + 0.5 th . th.
    """

    def __init__(self, n=3, n_steps=2, seed=0):
        rng = np.random.default_rng(seed)
        self.n, self.N = n, n_steps
        self.A0 = np.eye(n) * 3 + 0.3 * rng.standard_normal((n, n))
        self.A1 = 0.2 * rng.standard_normal((n, n))
        self.B = 0.5 * rng.standard_normal((n, n))
        self.f0 = rng.standard_normal(n)
        self.f1 = rng.standard_normal(n)
        self.g0 = rng.standard_normal(n)
        self.c = rng.standard_normal((n_steps + 1, n))
        self.a = 0.1

    # model pieces, th = (th0, th1)
    def A(self, th):
        return self.A0 + th[0] * self.A1

    def f(self, th):
        return self.f0 + th[1] * self.f1 + th[0] ** 2 * self.f1

    def g(self, th):
        return self.g0 * (1 + th[1])

    def R(self, U, U_prev, th):
        return self.A(th) @ U + self.a * U**3 - self.B @ U_prev - self.f(th)

    def dR_dU(self, U, th):
        return self.A(th) + np.diag(3 * self.a * U**2)

    def dR_dth(self, U, th):
        return np.stack([self.A1 @ U - 2 * th[0] * self.f1, -self.f1], axis=1)

    def dg_dth(self, th):
        return np.stack([np.zeros(self.n), self.g0], axis=1)

    def forward(self, th):
        U = [self.g(th)]
        for _ in range(self.N):
            u = U[-1].copy()
            for _ in range(60):
                du = np.linalg.solve(self.dR_dU(u, th), -self.R(u, U[-1], th))
                u = u + du
                if np.max(np.abs(du)) < 1e-15:
                    break
            U.append(u)
        return U

    def objective(self, th):
        U = self.forward(th)
        return sum(self.c[i] @ U[i] for i in range(self.N + 1)) + 0.5 * U[-1] @ U[-1] + 0.5 * th @ th

    def dL_dU(self, U, i):
        return self.c[i] + (U[i] if i == self.N else 0.0)

    def gradient_all_at_once(self, th):
        """Stationarity of L + sum lam_i R^i + lam_0 (g - U^0) in every U^i, solved as one linear system."""
        U = self.forward(th)
        n, N = self.n, self.N
        size = (N + 1) * n
        S = np.zeros((size, size))
        rhs = np.zeros(size)
        blk = lambda i: slice(i * n, (i + 1) * n)  # noqa: E731
        # d/dU^0: dL/dU0 + (dR^1/dU^0)^T lam_1 - lam_0 = 0
        S[blk(0), blk(0)] = -np.eye(n)
        S[blk(0), blk(1)] = -self.B.T
        rhs[blk(0)] = -self.dL_dU(U, 0)
        for i in range(1, N + 1):
            S[blk(i), blk(i)] = self.dR_dU(U[i], th).T
            if i < N:
                S[blk(i), blk(i + 1)] = -self.B.T
            rhs[blk(i)] = -self.dL_dU(U, i)
        lam = np.linalg.solve(S, rhs).reshape(N + 1, n)
        grad = th.copy()
        for i in range(1, N + 1):
            grad += lam[i] @ self.dR_dth(U[i], th)
        grad += lam[0] @ self.dg_dth(th)
        return grad

    def sweep_callbacks(self, th):
        """Callbacks for the generic reverse sweep."""
        U = self.forward(th)
        return dict(
            n_steps=self.N,
            partial_U=lambda i: self.dL_dU(U, i),
            solve_transposed=lambda i, v: np.linalg.solve(self.dR_dU(U[i], th).T, -v),
            prev_vjp=lambda i, lam: -self.B.T @ lam,
            param_vjp=lambda i, lam: lam @ self.dR_dth(U[i], th),
            init_vjp=lambda v: v @ self.dg_dth(th),
            explicit=th.copy(),
        )
