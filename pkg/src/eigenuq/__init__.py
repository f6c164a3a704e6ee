"""Uncertainty quantification for clustered eigenpairs of generalized
symmetric eigenvalue problems with random bilinear-form perturbations."""

from .mesh_fem import (Mesh, NodalField, InvalidMeshError,
                       build_unit_square_mesh, assemble_stiffness, assemble_mass)
from .eig_core import (EigenCluster, DefinitenessError, EigenSolveError,
                       solve_gevp, detect_cluster, fix_signs, reference_cluster)
from .field_model import (KernelSpec, KLExpansion, NotSPSDError,
                          RankExhaustedError, pivoted_cholesky, build_kl,
                          sample_field, field_from_z, stream_for,
                          MU_STREAM, EPS_STREAM)
from .derivative_engine import (DerivativeBundle, Polarization, SaddleSystem,
                                SaddleSingularError, eigenvalue_derivative,
                                aligned_dlambda, mu_direction_rhs,
                                eps_direction_rhs, solve_derivative_saddle,
                                directional_bundles, polarize, taylor_predict)
from .alignment import (AlignmentRejectedError, AlignmentResult, align,
                        cross_mass, pairwise_polar_align)
from .diffusion import DiffusionProblem, build_problem, direction_matrices
from .uq_estimators import (AmplitudeTooLargeError, LowRankCovariance,
                            MCConfig, MomentEstimate, mc_estimate, mc_rmse,
                            lambda_norm, basis_norm, cov_basis_norm,
                            cov_factor_distance, evaluate_sample, draw_z,
                            run_sample_pass, sample_rmses,
                            MU_COV_STREAM, EPS_COV_STREAM)
from .uq_perturb import (PerturbMoments, perturb_mean, eig_cov_direct,
                         direction_rhs_factors, solve_covariance_equations,
                         joint_lambda_block, joint_basis_covariance,
                         perturb_cov, perturb_moments,
                         dense_covariance_oracle)

__all__ = [
    "Mesh", "NodalField", "InvalidMeshError",
    "build_unit_square_mesh", "assemble_stiffness", "assemble_mass",
    "EigenCluster", "DefinitenessError", "EigenSolveError",
    "solve_gevp", "detect_cluster", "fix_signs", "reference_cluster",
    "KernelSpec", "KLExpansion", "NotSPSDError", "RankExhaustedError",
    "pivoted_cholesky", "build_kl", "sample_field", "field_from_z",
    "stream_for", "MU_STREAM", "EPS_STREAM",
    "DerivativeBundle", "Polarization", "SaddleSystem", "SaddleSingularError",
    "eigenvalue_derivative", "aligned_dlambda", "mu_direction_rhs",
    "eps_direction_rhs", "solve_derivative_saddle", "directional_bundles",
    "polarize", "taylor_predict",
    "AlignmentRejectedError", "AlignmentResult", "align", "cross_mass",
    "pairwise_polar_align",
    "DiffusionProblem", "build_problem", "direction_matrices",
    "AmplitudeTooLargeError", "LowRankCovariance", "MCConfig",
    "MomentEstimate", "mc_estimate", "mc_rmse", "lambda_norm", "basis_norm",
    "cov_basis_norm", "cov_factor_distance", "evaluate_sample", "draw_z",
    "run_sample_pass", "sample_rmses",
    "MU_COV_STREAM", "EPS_COV_STREAM",
    "PerturbMoments", "perturb_mean", "eig_cov_direct",
    "direction_rhs_factors", "solve_covariance_equations",
    "joint_lambda_block", "joint_basis_covariance", "perturb_cov",
    "perturb_moments", "dense_covariance_oracle",
]
