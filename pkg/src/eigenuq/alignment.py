"""SVD alignment of perturbed eigenbases onto the reference cluster.

A sample's cluster basis is defined only up to an orthogonal mix, so raw
samples are not comparable.  The cross-mass matrix G = u(w)^T M0 u0 is
decomposed as G = W S Vh and the sample is rotated by the orthogonal polar
factor W Vh, which maximizes overlap with the reference: the aligned
cross-mass becomes Vh^T S Vh, symmetric and close to the identity for small
perturbations.  Reflections are permitted (det may be -1); a sample whose
smallest singular value drops below 0.5 no longer tracks the reference
subspace and is rejected rather than silently aligned.
"""

import numpy as np

from .derivative_engine import polarize, taylor_predict

REJECT_THRESHOLD = 0.5


class AlignmentRejectedError(RuntimeError):
    """The perturbed subspace rotated too far from the reference."""

    def __init__(self, message, singulars):
        super().__init__(message)
        self.singulars = singulars


class AlignmentResult:
    """Aligned sample data.

    Attributes
    ----------
    rotation : ndarray, (m, m) orthogonal (reflections allowed)
    aligned_basis : ndarray, (n, m)
    aligned_lambda : ndarray, (m, m)
    singulars : ndarray, (m,) singular values of the cross-mass matrix
    """

    def __init__(self, rotation, aligned_basis, aligned_lambda, singulars):
        self.rotation = rotation
        self.aligned_basis = aligned_basis
        self.aligned_lambda = aligned_lambda
        self.singulars = singulars


def cross_mass(perturbed_basis, reference_basis, M0):
    """G = perturbed^T M0 reference, rows indexed by the perturbed basis."""
    return perturbed_basis.T @ (M0 @ reference_basis)


def align(perturbed_basis, perturbed_lambda, reference_basis, M0):
    """Rotate a perturbed cluster basis onto the reference.

    Parameters
    ----------
    perturbed_basis : ndarray, (n, m), M(w)-orthonormal
    perturbed_lambda : ndarray
        (m, m) matrix or length-m vector of the sample eigenvalues.
    reference_basis : ndarray, (n, m), M0-orthonormal
    M0 : reference mass matrix

    Returns
    -------
    AlignmentResult

    Raises
    ------
    AlignmentRejectedError
        min singular value of the cross-mass matrix < 0.5.
    """
    lam = np.asarray(perturbed_lambda, dtype=float)
    if lam.ndim == 1:
        lam = np.diag(lam)
    G = cross_mass(perturbed_basis, reference_basis, M0)
    W, S, Vh = np.linalg.svd(G)
    if S.min() < REJECT_THRESHOLD:
        raise AlignmentRejectedError(
            "subspace rotated too far: min singular value %.3f < %.2f"
            % (S.min(), REJECT_THRESHOLD), singulars=S)
    rotation = W @ Vh
    return AlignmentResult(rotation, perturbed_basis @ rotation,
                           rotation.T @ lam @ rotation, S)


class PolarComparison:
    """Polarization-route prediction matched against a raw sample.

    Attributes
    ----------
    pred_lams : ndarray, (m,) ascending predicted eigenvalues
    pred_basis : ndarray, (n, m) predicted eigenvectors (polarized order)
    matched_basis : ndarray, (n, m) sample eigenvectors, sign-matched
    sample_lams : ndarray, (m,) ascending sample eigenvalues
    degenerate : bool
        Polarization non-uniqueness flag from the predicted small matrix.
    """

    def __init__(self, pred_lams, pred_basis, matched_basis, sample_lams,
                 degenerate):
        self.pred_lams = pred_lams
        self.pred_basis = pred_basis
        self.matched_basis = matched_basis
        self.sample_lams = sample_lams
        self.degenerate = degenerate


def pairwise_polar_align(sample_basis, sample_lambda, alpha, beta, cluster,
                         bundle_mu, bundle_eps, M0):
    """Polarization-based route of the deterministic study.

    Diagonalizes the predicted cluster matrix diag(member eigenvalues) +
    alpha dLambda_mu + beta dLambda_eps; its eigenvectors give the in-cluster
    mixing that individual perturbed eigenvectors follow, so the raw sample
    eigenpairs (ascending) can be compared column by column after fixing
    signs against the prediction.
    """
    lam = np.asarray(sample_lambda, dtype=float)
    sample_lams = np.sort(np.diag(lam) if lam.ndim == 2 else lam)
    small = (np.diag(cluster.eigenvalues)
             + alpha * bundle_mu.dLambda + beta * bundle_eps.dLambda)
    pol = polarize(small)
    first_basis, _ = taylor_predict(cluster, bundle_mu, bundle_eps,
                                    alpha, beta)
    pred_basis = first_basis @ pol.Q0
    matched = np.array(sample_basis, dtype=float, copy=True)
    overlap = np.einsum("ij,ij->j", pred_basis, M0 @ matched)
    matched[:, overlap < 0] *= -1.0
    return PolarComparison(pol.Lambda0_diag, pred_basis, matched,
                           sample_lams, pol.degenerate)
