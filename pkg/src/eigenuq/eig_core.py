"""Generalized symmetric eigensolver, cluster detection, sign fixing.

Solves A u = lambda M u for the smallest eigenpairs with M-orthonormal
eigenvectors, groups near-equal eigenvalues into a cluster around a target
index, and normalizes eigenvector signs so results are reproducible.
"""

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class DefinitenessError(ValueError):
    """An input matrix violates the required symmetry/definiteness."""


class EigenSolveError(RuntimeError):
    """The eigensolver failed to reach the residual tolerance."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class EigenCluster:
    """Reference eigenvalue cluster.

    Attributes
    ----------
    lambda0 : float
        Arithmetic mean of the member eigenvalues.
    multiplicity : int
    basis : ndarray, shape (n, m)
        M-orthonormal coefficient vectors of the members, sign-fixed.
    cluster_indices : list of int
        Global (ascending-spectrum) indices of the members.
    eigenvalues : ndarray
        The individual member eigenvalues.
    """

    def __init__(self, lambda0, basis, cluster_indices, eigenvalues):
        self.lambda0 = float(lambda0)
        self.basis = basis
        self.cluster_indices = list(cluster_indices)
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)

    @property
    def multiplicity(self):
        return len(self.cluster_indices)


RESIDUAL_RTOL = 1e-9


def _check_symmetry(name, mat):
    if sp.issparse(mat):
        d = abs(mat - mat.T)
        dev = d.max() if d.nnz else 0.0
        scale = abs(mat).max()
    else:
        dev = np.abs(mat - mat.T).max()
        scale = np.abs(mat).max()
    if dev > 1e-12 * max(scale, 1.0):
        raise DefinitenessError("%s is not symmetric (max dev %.3e)" % (name, dev))


def _dense(mat):
    return mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)


def _verify_residuals(A, M, lams, vecs):
    r = A @ vecs - M @ vecs * lams[None, :]
    res = np.linalg.norm(r, axis=0)
    # ||u||_M = 1 by construction, tolerance is relative to lambda
    bad = res > RESIDUAL_RTOL * np.maximum(np.abs(lams), 1e-30)
    if np.any(bad):
        raise EigenSolveError(
            "eigenpair residuals exceed tolerance: %s" % res[bad], residuals=res)
    return res


def solve_gevp(A, M, count, method="auto", validate=True):
    """Solve A u = lambda M u for the ``count`` smallest eigenpairs.

    Parameters
    ----------
    A, M : symmetric positive definite matrices (sparse or dense)
    count : int
        Number of eigenpairs requested.
    method : {"auto", "dense", "sparse"}
        "dense" reduces to a standard symmetric problem via Cholesky of M;
        "sparse" uses shift-invert ARPACK with a deterministic start vector.
        "auto" picks dense below 260 unknowns or when most of the spectrum
        is requested.
    validate : bool
        Check input symmetry up front.  Callers assembling pencils through
        a symmetric element scatter may skip the check in hot loops; the
        residual verification still runs either way.

    Returns
    -------
    lams : ndarray, ascending
    vecs : ndarray, shape (n, count), M-orthonormal
    """
    n = A.shape[0]
    if count < 1 or count > n:
        raise ValueError("count must be in [1, %d], got %d" % (n, count))
    if validate:
        _check_symmetry("A", A)
        _check_symmetry("M", M)

    if method == "auto":
        method = "dense" if (n < 260 or count > n // 4) else "sparse"

    if method == "dense":
        Ad, Md = _dense(A), _dense(M)
        try:
            lams, vecs = sla.eigh(Ad, Md, subset_by_index=[0, count - 1])
        except sla.LinAlgError as exc:
            raise DefinitenessError("mass matrix is not positive definite: %s" % exc)
    else:
        As = sp.csc_matrix(A)
        Ms = sp.csc_matrix(M)
        rng = np.random.default_rng(0x5EED)
        v0 = rng.standard_normal(n)
        k = min(count, n - 1)
        ncv = min(n, max(2 * k + 4, 12))
        try:
            lams, vecs = spla.eigsh(As, k=k, M=Ms, sigma=0.0, which="LM",
                                    v0=v0, ncv=ncv)
        except RuntimeError as exc:
            raise EigenSolveError("sparse eigensolver failed: %s" % exc)
        order = np.argsort(lams)
        lams, vecs = lams[order][:count], vecs[:, order][:, :count]

    if lams[0] <= 0.0:
        raise DefinitenessError(
            "pencil has nonpositive eigenvalue %.3e; A is not positive definite"
            % lams[0])

    # enforce M-orthonormality across the whole block (LAPACK already
    # delivers it; re-orthonormalization guards the ARPACK path)
    mnorm = np.sqrt(np.einsum("ij,ij->j", vecs, M @ vecs))
    vecs = vecs / mnorm[None, :]
    _verify_residuals(A, M, lams, vecs)
    return lams, vecs


def detect_cluster(eigenvalues, target_index, rel_gap_tol=1e-6):
    """Return the maximal contiguous index set clustered around target_index.

    Membership is pairwise: |lam_i - lam_j| <= rel_gap_tol * lam_j for all
    members i, j.  For an ascending positive list this reduces to
    max - min <= rel_gap_tol * min over the candidate window.
    """
    lams = np.asarray(eigenvalues, dtype=float)
    if not 0 <= target_index < lams.size:
        raise ValueError("target_index out of range")
    if np.any(np.diff(lams) < -1e-12 * np.abs(lams[:-1])):
        raise ValueError("eigenvalues must be ascending")

    lo = hi = target_index

    def ok(a, b):
        window = lams[a:b + 1]
        return window.max() - window.min() <= rel_gap_tol * window.min()

    grown = True
    while grown:
        grown = False
        if lo > 0 and ok(lo - 1, hi):
            lo -= 1
            grown = True
        if hi < lams.size - 1 and ok(lo, hi + 1):
            hi += 1
            grown = True
    return list(range(lo, hi + 1))


def fix_signs(basis):
    """Flip column signs so the largest-magnitude entry (lowest index on
    ties) of each column is positive."""
    basis = np.array(basis, dtype=float, copy=True)
    for j in range(basis.shape[1]):
        col = basis[:, j]
        pivot = np.argmax(np.abs(col))
        if col[pivot] < 0:
            basis[:, j] = -col
    return basis


def reference_cluster(A, M, target_index, rel_gap_tol=1e-6, count=None,
                      method="auto"):
    """Solve the pencil and package the cluster around ``target_index``.

    Solves for a few more eigenpairs than the target index so the gap to the
    next eigenvalue outside the cluster is visible, then returns an
    :class:`EigenCluster` with the sign-fixed member basis.
    """
    if count is None:
        count = target_index + 4
    count = min(count, A.shape[0])
    lams, vecs = solve_gevp(A, M, count, method=method)
    indices = detect_cluster(lams, target_index, rel_gap_tol)
    if indices[-1] == count - 1 and count < A.shape[0]:
        # cluster touches the end of the solved window; widen once
        return reference_cluster(A, M, target_index, rel_gap_tol,
                                 count=min(count + 4, A.shape[0]), method=method)
    basis = fix_signs(vecs[:, indices])
    return EigenCluster(np.mean(lams[indices]), basis, indices, lams[indices]), lams, vecs


def eigenpairs_to_json(lams, vecs, cluster=None):
    """Serialize eigenpairs (and optionally a cluster) to a JSON string."""
    import json
    doc = {
        "lambdas": [float(l) for l in np.asarray(lams).ravel()],
        "vectors": [float(v) for v in np.asarray(vecs).ravel(order="F")],
        "n": int(vecs.shape[0]),
    }
    if cluster is not None:
        doc["m"] = cluster.multiplicity
        doc["cluster"] = {
            "lambda0": cluster.lambda0,
            "indices": cluster.cluster_indices,
            "eigenvalues": [float(l) for l in cluster.eigenvalues],
        }
    return json.dumps(doc)


def eigenpairs_from_json(text):
    """Inverse of :func:`eigenpairs_to_json` (returns lams, vecs, cluster or None)."""
    import json
    doc = json.loads(text)
    lams = np.asarray(doc["lambdas"], dtype=float)
    n = doc["n"]
    vecs = np.asarray(doc["vectors"], dtype=float).reshape(n, -1, order="F")
    cluster = None
    if "cluster" in doc:
        c = doc["cluster"]
        cluster = EigenCluster(c["lambda0"], vecs[:, c["indices"]],
                               c["indices"], c["eigenvalues"])
    return lams, vecs, cluster
