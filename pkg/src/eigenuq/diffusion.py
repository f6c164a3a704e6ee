"""Reference bundle for the stochastic diffusion eigenproblem.

Ties together the structured mesh, the KL expansions of the two coefficient
fields (same kernel, independent streams), the reference operators and
cluster, and per-KL-mode directional matrices.  All per-mode matrices share
the sparsity pattern of the reference operators, so a sample's matrices are
formed by combining stored data arrays (one GEMV per field) instead of
re-running assembly.
"""

import numpy as np
import scipy.sparse as sp

from .eig_core import reference_cluster, solve_gevp
from .field_model import KernelSpec, build_kl
from .mesh_fem import assemble_mass, assemble_stiffness, build_unit_square_mesh

# pairwise-relative gap bound under which members count as one cluster; the
# discrete pair targeted by the experiments splits at O(h^2) (2e-2 at N=12,
# 4.5e-3 at N=24), so experiments use a coarser bound than the library
# default, wide enough for the split pair and far below the 60%+ gap to the
# next eigenvalue
EXPERIMENT_GAP_TOL = 0.05


class DiffusionProblem:
    """Immutable reference data for one mesh resolution.

    Attributes
    ----------
    mesh : Mesh
    kl : KLExpansion
        Unit-amplitude expansion shared by both coefficient fields;
        amplitudes alpha/beta are applied at sampling time.
    A0, M0 : csc_matrix
        Reference stiffness and mass on free DOFs.  CSC so per-sample
        pencils feed the shift-invert factorization without conversion.
    cluster : EigenCluster
    ref_lams, ref_vecs : reference spectrum window from the cluster solve
    mode_stiffness, mode_mass : list of csc_matrix
        Per-KL-mode directional matrices A_{L_i}, M_{L_i} on free DOFs.
    """

    def __init__(self, mesh, kl, A0, M0, cluster, ref_lams, ref_vecs,
                 mode_stiffness, mode_mass, target_index=1):
        self.mesh = mesh
        self.kl = kl
        self.target_index = target_index
        self.A0 = A0.tocsc()
        self.M0 = M0.tocsc()
        self.cluster = cluster
        self.ref_lams = ref_lams
        self.ref_vecs = ref_vecs
        self.mode_stiffness = [S.tocsc() for S in mode_stiffness]
        self.mode_mass = [S.tocsc() for S in mode_mass]
        self._stiff_data = np.array([S.data for S in self.mode_stiffness])
        self._mass_data = np.array([S.data for S in self.mode_mass])
        # eigenpairs to solve per sample: through the cluster plus one for
        # the trailing gap
        self.sample_count = cluster.cluster_indices[-1] + 2

    def pencil_from_data(self, data_a, data_m):
        """Matrices on the shared sparsity pattern from raw data arrays.

        Stored CSC so the shift-invert factorization consumes them without
        a format conversion per sample.
        """
        A = sp.csc_matrix((data_a, self.A0.indices, self.A0.indptr),
                          shape=self.A0.shape)
        M = sp.csc_matrix((data_m, self.M0.indices, self.M0.indptr),
                          shape=self.M0.shape)
        return A, M

    @property
    def n_free(self):
        return self.A0.shape[0]

    def field_values(self, z, amplitude):
        """Nodal coefficient values 1 + amplitude * modes @ z."""
        return 1.0 + amplitude * (self.kl.modes @ z)

    def sample_matrices(self, z_mu, z_eps, alpha, beta):
        """Perturbed (A, M) for one draw, via the shared-pattern data arrays."""
        data_a = self.A0.data + alpha * (z_mu @ self._stiff_data)
        data_m = self.M0.data + beta * (z_eps @ self._mass_data)
        return self.pencil_from_data(data_a, data_m)

    def solve_sample(self, A, M):
        """Eigenpairs of a sample pencil over the reference window.

        Skips the input symmetry validation: sample pencils combine
        symmetric per-mode assemblies on one pattern, so symmetry holds by
        construction; residual verification still runs.
        """
        return solve_gevp(A, M, self.sample_count, validate=False)


def build_problem(N, target_index=1, cluster_gap_tol=EXPERIMENT_GAP_TOL,
                  kl_tol=1e-5, kernel_scale=20.0):
    """Assemble the full reference bundle on the N-per-side mesh."""
    mesh = build_unit_square_mesh(N)
    ones = np.ones(mesh.n_nodes)
    mass_full = assemble_mass(mesh, ones, constrain=False)
    kl = build_kl(mesh, KernelSpec(scale=kernel_scale), mass_full, kl_tol,
                  mean=1.0, amplitude=1.0)
    A0 = assemble_stiffness(mesh, ones)
    M0 = assemble_mass(mesh, ones)
    cluster, ref_lams, ref_vecs = reference_cluster(
        A0, M0, target_index, rel_gap_tol=cluster_gap_tol)

    mode_stiffness, mode_mass = [], []
    for i in range(kl.k):
        Sa = assemble_stiffness(mesh, kl.modes[:, i])
        Sm = assemble_mass(mesh, kl.modes[:, i])
        for S, ref in ((Sa, A0), (Sm, M0)):
            if not (np.array_equal(S.indptr, ref.indptr)
                    and np.array_equal(S.indices, ref.indices)):
                raise RuntimeError("per-mode matrix pattern deviates from "
                                   "the reference assembly pattern")
        mode_stiffness.append(Sa)
        mode_mass.append(Sm)

    return DiffusionProblem(mesh, kl, A0, M0, cluster, ref_lams, ref_vecs,
                            mode_stiffness, mode_mass,
                            target_index=target_index)


def direction_matrices(problem, z_mu, z_eps):
    """Directional (A1, M1) for fixed KL coefficient vectors (unit amplitude).

    A1 = sum_i z_mu_i A_{L_i} and M1 = sum_i z_eps_i M_{L_i}: the derivative
    of the sample pencil along the ray (alpha, beta) -> (t, t) at fixed z.
    """
    data_a = z_mu @ problem._stiff_data
    data_m = z_eps @ problem._mass_data
    return problem.pencil_from_data(data_a, data_m)
