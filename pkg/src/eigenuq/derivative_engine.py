"""First-order eigenpair derivatives via bordered saddle-point systems.

For a reference cluster (lambda0, u0) of A0 u = lambda M0 u, the directional
derivative of the cluster eigenpairs along a coefficient perturbation solves
the block system

    [[A0 - shift*M0, -M0 u0], [u0^T M0, 0]] [dU_i; dlam_i] = [top_i; bot_i]

per basis column i.  Two gauges are supported.  The "theorem" gauge uses the
cluster-mean shift and pins the mixed constraint values u0_j^T M0 dU_i to
zero off the diagonal; its dLambda is the classical projected form
u0^T A1 u0 - lambda0 u0^T M1 u0.  The "aligned" gauge differentiates the
SVD-aligned representation of a numerically split cluster exactly: member
eigenvalues enter as per-column shifts and the constraint takes the full
symmetric value -u0^T M1 u0 / 2.  The two coincide when the discrete cluster
is exactly degenerate.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .eig_core import fix_signs

SADDLE_RTOL = 1e-9


class SaddleSingularError(RuntimeError):
    """The bordered saddle matrix is singular or the cluster data invalid."""


class DerivativeBundle:
    """Directional derivative of a cluster's eigenpairs.

    Attributes
    ----------
    dU : ndarray, shape (n, m)
        Eigenbasis derivative, one column per cluster member.
    dLambda : ndarray, shape (m, m)
        Symmetric eigenvalue-derivative matrix.
    direction_tag : str
        "mu", "eps", or "generic".
    """

    def __init__(self, dU, dLambda, direction_tag="generic"):
        self.dU = np.asarray(dU, dtype=float)
        self.dLambda = np.asarray(dLambda, dtype=float)
        self.direction_tag = direction_tag


class Polarization:
    """Orthogonal polarization of a directional eigenvalue derivative.

    Attributes
    ----------
    Q0 : ndarray, (m, m) orthogonal, sign-fixed
    Lambda0_diag : ndarray, (m,) eigenvalues of dLambda, ascending
    degenerate : bool
        Set when an eigenvalue gap is below 1e-10 (Q0 not unique).
    """

    def __init__(self, Q0, Lambda0_diag, degenerate):
        self.Q0 = Q0
        self.Lambda0_diag = Lambda0_diag
        self.degenerate = degenerate


def eigenvalue_derivative(cluster, A1, M1, lambda0=None):
    """Projected directional eigenvalue derivatives of a degenerate cluster.

    Returns the pair (mu_part, eps_part) = (u0^T A1 u0, -lambda0 u0^T M1 u0),
    both symmetrized.  Exact for an exactly degenerate cluster; for a split
    discrete cluster see :func:`aligned_dlambda`.
    """
    U0 = cluster.basis
    if lambda0 is None:
        lambda0 = cluster.lambda0
    n = U0.shape[0]
    if A1.shape != (n, n) or M1.shape != (n, n):
        raise ValueError("direction matrices must be %d x %d" % (n, n))
    mu_part = U0.T @ (A1 @ U0)
    eps_part = -lambda0 * (U0.T @ (M1 @ U0))
    return 0.5 * (mu_part + mu_part.T), 0.5 * (eps_part + eps_part.T)


def aligned_dlambda(cluster, A1, M1):
    """Derivative of the SVD-aligned cluster eigenvalue matrix.

    For member eigenvalues Lambda = diag(cluster.eigenvalues) this is
    u0^T A1 u0 - (N Lambda + Lambda N)/2 with N = u0^T M1 u0, which is the
    exact first-order change of the aligned representation even when the
    discrete cluster is split; it reduces to the sum of the two
    :func:`eigenvalue_derivative` parts when the members coincide.
    """
    U0 = cluster.basis
    lam = cluster.eigenvalues
    mu_part = U0.T @ (A1 @ U0)
    N = U0.T @ (M1 @ U0)
    N = 0.5 * (N + N.T)
    jordan = 0.5 * (N * lam[None, :] + lam[:, None] * N)
    out = 0.5 * (mu_part + mu_part.T) - jordan
    return out


def mu_direction_rhs(cluster, A1):
    """Saddle right-hand side for a stiffness-only direction."""
    m = cluster.multiplicity
    return -(A1 @ cluster.basis), np.zeros((m, m))


def eps_direction_rhs(cluster, M1, lambda0=None, gauge="theorem"):
    """Saddle right-hand side for a mass-only direction.

    The theorem gauge scales the top block by the cluster mean and
    constrains only the diagonal normalization terms; the aligned gauge uses
    member eigenvalues and the full symmetric constraint block.
    """
    U0 = cluster.basis
    N = U0.T @ (M1 @ U0)
    N = 0.5 * (N + N.T)
    if gauge == "theorem":
        if lambda0 is None:
            lambda0 = cluster.lambda0
        return lambda0 * (M1 @ U0), -0.5 * np.diag(np.diag(N))
    if gauge == "aligned":
        return (M1 @ U0) * cluster.eigenvalues[None, :], -0.5 * N
    raise ValueError("unknown gauge %r" % (gauge,))


class SaddleSystem:
    """Factorized bordered saddle matrices for one reference cluster.

    The bordered matrix for each distinct shift is factorized once (sparse
    LU) and reused across all columns, directions, and KL modes.  Immutable
    after construction; solves are read-only.
    """

    def __init__(self, A0, M0, cluster, gauge="theorem"):
        U0 = cluster.basis
        n, m = U0.shape
        gram = U0.T @ (M0 @ U0)
        if np.abs(gram - np.eye(m)).max() > 1e-6:
            raise SaddleSingularError(
                "cluster basis is not M0-orthonormal (max dev %.3e)"
                % np.abs(gram - np.eye(m)).max())
        if gauge == "theorem":
            shifts = np.full(m, cluster.lambda0)
        elif gauge == "aligned":
            shifts = np.asarray(cluster.eigenvalues, dtype=float)
        else:
            raise ValueError("unknown gauge %r" % (gauge,))
        self.gauge = gauge
        self.n, self.m = n, m
        self.shifts = shifts
        self._U0 = U0
        self._M0U0 = M0 @ U0
        A0s = sp.csr_matrix(A0)
        M0s = sp.csr_matrix(M0)
        B = sp.csr_matrix(self._M0U0)
        self._lu = {}
        self._matrices = {}
        for s in np.unique(shifts):
            K = sp.bmat([[A0s - s * M0s, -B], [B.T, None]], format="csc")
            try:
                lu = spla.splu(K)
            except RuntimeError as exc:
                raise SaddleSingularError(
                    "bordered matrix is singular at shift %.6g: %s" % (s, exc))
            self._lu[s] = lu
            self._matrices[s] = K

    def solve(self, rhs_top, rhs_bottom, direction_tag="generic"):
        """Solve the bordered systems column by column -> DerivativeBundle."""
        n, m = self.n, self.m
        rhs_top = np.asarray(rhs_top, dtype=float)
        rhs_bottom = np.asarray(rhs_bottom, dtype=float)
        if rhs_top.shape != (n, m) or rhs_bottom.shape != (m, m):
            raise ValueError("rhs blocks must be (%d, %d) and (%d, %d)"
                             % (n, m, m, m))
        dU = np.empty((n, m))
        dLam = np.empty((m, m))
        for i in range(m):
            rhs = np.concatenate([rhs_top[:, i], rhs_bottom[:, i]])
            sol = self._lu[self.shifts[i]].solve(rhs)
            if not np.all(np.isfinite(sol)):
                raise SaddleSingularError("saddle solve produced non-finite values")
            resid = np.linalg.norm(self._matrices[self.shifts[i]] @ sol - rhs)
            if resid > SADDLE_RTOL * max(np.linalg.norm(rhs), 1.0):
                raise SaddleSingularError(
                    "saddle residual %.3e exceeds tolerance; the bordered "
                    "matrix is numerically singular" % resid)
            dU[:, i] = sol[:n]
            dLam[:, i] = sol[n:]
        return DerivativeBundle(dU, dLam, direction_tag)


def solve_derivative_saddle(A0, M0, cluster, rhs_top, rhs_bottom,
                            direction_tag="generic", gauge="theorem"):
    """One-shot bordered solve; see :class:`SaddleSystem` for reuse."""
    return SaddleSystem(A0, M0, cluster, gauge=gauge).solve(
        rhs_top, rhs_bottom, direction_tag)


def directional_bundles(A0, M0, cluster, A1, M1, saddle=None, gauge="theorem"):
    """Bundles for a (mu-direction, eps-direction) pair of perturbations."""
    if saddle is None:
        saddle = SaddleSystem(A0, M0, cluster, gauge=gauge)
    top_mu, bot_mu = mu_direction_rhs(cluster, A1)
    top_eps, bot_eps = eps_direction_rhs(cluster, M1, gauge=saddle.gauge)
    return (saddle.solve(top_mu, bot_mu, "mu"),
            saddle.solve(top_eps, bot_eps, "eps"))


def polarize(dLambda_directional):
    """Orthogonal eigendecomposition of a directional dLambda, ascending."""
    D = np.asarray(dLambda_directional, dtype=float)
    if np.abs(D - D.T).max() > 1e-10 * max(np.abs(D).max(), 1.0):
        raise ValueError("directional dLambda must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (D + D.T))
    Q0 = fix_signs(vecs)
    gaps = np.diff(vals)
    degenerate = bool(vals.size > 1 and gaps.min() < 1e-10)
    return Polarization(Q0, vals, degenerate)


def taylor_predict(cluster, bundle_mu, bundle_eps, alpha, beta,
                   polarized=False):
    """First-order prediction (basis, eigenvalue matrix) at (alpha, beta).

    basis = u0 + alpha dU_mu + beta dU_eps and lambda = lambda0 I +
    alpha dLambda_mu + beta dLambda_eps; with ``polarized`` both are rotated
    by the polarization Q0 of the combined directional derivative.
    """
    U0 = cluster.basis
    m = cluster.multiplicity
    basis = U0 + alpha * bundle_mu.dU + beta * bundle_eps.dU
    lam = (cluster.lambda0 * np.eye(m)
           + alpha * bundle_mu.dLambda + beta * bundle_eps.dLambda)
    if not polarized:
        return basis, lam
    combined = alpha * bundle_mu.dLambda + beta * bundle_eps.dLambda
    Q0 = polarize(combined).Q0
    return basis @ Q0, Q0.T @ lam @ Q0
