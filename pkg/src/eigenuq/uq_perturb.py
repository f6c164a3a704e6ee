"""Expansion approach: derivative covariances in factored form.

The mean prediction is the zeroth-order reference pair.  Covariances of the
eigenpair derivatives come in two routes: a direct formula for the
eigenvalue block (one rank-one term per KL mode), and the tensorized
covariance equations solved in low-rank form, one bordered solve per KL
mode, which also yield the eigenvector block and the cross terms.  A dense
Kronecker-product assembly of the same equations is kept as an oracle for
tiny meshes.

Vectorization is column-major throughout; the joint unknown per mode is
[vec dU; vec dLambda] of length n*m + m*m.
"""

import numpy as np
import scipy.linalg as sla

from .derivative_engine import SaddleSystem, eps_direction_rhs, mu_direction_rhs
from .mesh_fem import assemble_mass, assemble_stiffness
from .uq_estimators import LowRankCovariance

# variance of the uniform law on [-1/2, 1/2]
COEFF_VARIANCE = 1.0 / 12.0


class PerturbMoments:
    """Amplitude-independent moment data of the expansion approach.

    Attributes
    ----------
    mean_lambda : (m, m)
        Zeroth-order eigenvalue prediction.
    mean_basis : (n, m)
        Zeroth-order basis prediction (the reference cluster basis).
    cov_lambda_mu, cov_lambda_eps : (m*m, m*m)
        Direct-formula derivative covariances per unit amplitude.
    cov_joint_mu, cov_joint_eps : LowRankCovariance
        Factored covariances of the stacked unknown [vec dU; vec dLambda].
    multiplicity : int
    """

    def __init__(self, mean_lambda, mean_basis, cov_lambda_mu,
                 cov_lambda_eps, cov_joint_mu, cov_joint_eps, multiplicity):
        self.mean_lambda = mean_lambda
        self.mean_basis = mean_basis
        self.cov_lambda_mu = cov_lambda_mu
        self.cov_lambda_eps = cov_lambda_eps
        self.cov_joint_mu = cov_joint_mu
        self.cov_joint_eps = cov_joint_eps
        self.multiplicity = int(multiplicity)


def perturb_mean(cluster):
    """Zeroth-order mean prediction (lambda0 * I, u0).

    The expansion mean is the unperturbed pair for every amplitude; its
    content is the second-order accuracy of that claim, which the
    convergence studies measure against Monte Carlo references.
    """
    m = cluster.multiplicity
    return cluster.lambda0 * np.eye(m), cluster.basis


def eig_cov_direct(cluster, kl_mu, kl_eps, mesh):
    """Direct eigenvalue-derivative covariances from the KL modes.

    Cov of the stiffness-direction derivative is (1/12) sum_k vec(D_k)
    vec(D_k)^T with D_k = U0^T A_{L_k} U0; the mass direction carries the
    extra lambda0^2 factor with E_k = U0^T M_{L_k} U0.  Expansion
    amplitudes scale each covariance quadratically.
    """
    U0 = cluster.basis
    m = cluster.multiplicity

    def accumulate(kl, assemble):
        k = kl.modes.shape[1]
        C = np.zeros((m * m, m * m))
        for i in range(k):
            S = assemble(mesh, kl.modes[:, i])
            v = (U0.T @ (S @ U0)).reshape(-1, order="F")
            C += np.outer(v, v)
        return C

    cov_mu = accumulate(kl_mu, assemble_stiffness)
    cov_mu *= kl_mu.amplitude**2 * COEFF_VARIANCE
    cov_eps = accumulate(kl_eps, assemble_mass)
    cov_eps *= cluster.lambda0**2 * kl_eps.amplitude**2 * COEFF_VARIANCE
    return cov_mu, cov_eps


def direction_rhs_factors(problem, direction, gauge="theorem"):
    """Per-KL-mode bordered right-hand sides for one perturbation direction.

    Returns a list of (top, bottom) blocks in mode order, ready for
    :func:`solve_covariance_equations`.
    """
    cluster = problem.cluster
    if direction == "mu":
        return [mu_direction_rhs(cluster, S) for S in problem.mode_stiffness]
    if direction == "eps":
        return [eps_direction_rhs(cluster, S, gauge=gauge)
                for S in problem.mode_mass]
    raise ValueError("direction must be 'mu' or 'eps'")


def solve_covariance_equations(saddle, rhs_factors):
    """Factored covariance of [vec dU; vec dLambda] from per-mode solves.

    Each KL mode contributes one factor column: the bordered system is
    solved for the mode's m right-hand-side columns and the resulting
    (dU, dLambda) pair is stacked column-major.  The represented covariance
    is (1/12) * factor @ factor.T, which realizes the tensorized relation
    Cov[rhs] = K Cov[solution] K^T without ever assembling K.
    """
    n, m = saddle.n, saddle.m
    cols = []
    for i, (top, bottom) in enumerate(rhs_factors):
        bundle = saddle.solve(top, bottom, direction_tag="cov-mode-%d" % i)
        cols.append(np.concatenate([bundle.dU.reshape(-1, order="F"),
                                    bundle.dLambda.reshape(-1, order="F")]))
    if cols:
        factor = np.column_stack(cols)
    else:
        factor = np.zeros((n * m + m * m, 0))
    assert factor.shape[1] <= len(rhs_factors) * m
    return LowRankCovariance(factor, scale=COEFF_VARIANCE)


def joint_lambda_block(cov_joint, multiplicity):
    """Dense eigenvalue sub-block of a joint factored covariance."""
    m = multiplicity
    F = cov_joint.factor[cov_joint.dim - m * m:, :]
    return cov_joint.scale * (F @ F.T)


def joint_basis_covariance(cov_joint, multiplicity):
    """Eigenvector sub-block of a joint factored covariance, still factored."""
    m = multiplicity
    return LowRankCovariance(cov_joint.factor[:cov_joint.dim - m * m, :],
                             scale=cov_joint.scale)


def perturb_cov(alpha, beta, cov_joint_mu, cov_joint_eps, multiplicity):
    """Covariance predictions at amplitudes (alpha, beta).

    The two perturbation directions are uncorrelated, so the prediction is
    alpha^2 * Cov_mu + beta^2 * Cov_eps blockwise.  Returns the dense
    eigenvalue covariance and the factored basis covariance.
    """
    m = multiplicity
    cov_lambda = (alpha**2 * joint_lambda_block(cov_joint_mu, m)
                  + beta**2 * joint_lambda_block(cov_joint_eps, m))
    assert cov_joint_mu.scale == cov_joint_eps.scale
    blocks = []
    if alpha != 0.0:
        blocks.append(alpha * joint_basis_covariance(cov_joint_mu, m).factor)
    if beta != 0.0:
        blocks.append(beta * joint_basis_covariance(cov_joint_eps, m).factor)
    dim = cov_joint_mu.dim - m * m
    factor = np.hstack(blocks) if blocks else np.zeros((dim, 0))
    return cov_lambda, LowRankCovariance(factor, scale=cov_joint_mu.scale)


def perturb_moments(problem, gauge="theorem"):
    """All amplitude-independent expansion moments for a problem bundle.

    gauge selects the derivative representation the covariances describe:
    "theorem" for the cluster-mean-shift convention, "aligned" for the
    exact derivative of the rotation-aligned representation the Monte Carlo
    estimator measures.
    """
    cluster = problem.cluster
    mean_lambda, mean_basis = perturb_mean(cluster)
    cov_mu, cov_eps = eig_cov_direct(cluster, problem.kl, problem.kl,
                                     problem.mesh)
    saddle = SaddleSystem(problem.A0, problem.M0, cluster, gauge=gauge)
    joint_mu = solve_covariance_equations(
        saddle, direction_rhs_factors(problem, "mu"))
    joint_eps = solve_covariance_equations(
        saddle, direction_rhs_factors(problem, "eps", gauge=gauge))
    return PerturbMoments(mean_lambda, mean_basis, cov_mu, cov_eps,
                          joint_mu, joint_eps, cluster.multiplicity)


def dense_covariance_oracle(A0, M0, cluster, rhs_factors, gauge="theorem"):
    """Dense tensorized-system covariance for tiny meshes.

    Assembles the full block system acting on the stacked per-column
    unknowns (a Kronecker product I_m (x) K in the single-shift gauge),
    forms the dense right-hand-side covariance, and inverts the sandwich
    relation with two dense solves.  Rows are permuted to the
    [vec dU; vec dLambda] layout of the factored route.  Quadratic storage
    in n*m: oracle use only.
    """
    U0 = cluster.basis
    n, m = U0.shape
    A0d = A0.toarray()
    M0d = M0.toarray()
    B = M0d @ U0
    if gauge == "aligned":
        shifts = cluster.eigenvalues
    else:
        shifts = np.full(m, cluster.lambda0)

    def bordered(shift):
        K = np.zeros((n + m, n + m))
        K[:n, :n] = A0d - shift * M0d
        K[:n, n:] = -B
        K[n:, :n] = B.T
        return K

    if np.all(shifts == shifts[0]):
        KK = np.kron(np.eye(m), bordered(shifts[0]))
    else:
        KK = sla.block_diag(*[bordered(s) for s in shifts])

    R = np.column_stack([
        np.vstack([top, bottom]).reshape(-1, order="F")
        for top, bottom in rhs_factors])
    cov_rhs = COEFF_VARIANCE * (R @ R.T)

    Y = np.linalg.solve(KK, cov_rhs)
    C_cols = np.linalg.solve(KK, Y.T).T

    # stacked-per-column layout -> [vec dU; vec dLambda]
    perm = np.empty(n * m + m * m, dtype=int)
    for j in range(m):
        perm[j * n:(j + 1) * n] = j * (n + m) + np.arange(n)
        perm[n * m + j * m:n * m + (j + 1) * m] = j * (n + m) + n + np.arange(m)
    return C_cols[np.ix_(perm, perm)]
