"""Truncated Karhunen-Loeve model of the random coefficient fields.

The kernel Gram matrix over the mesh nodes is factorized by pivoted Cholesky
to a trace tolerance; the factor is compressed to M-orthogonal modes through
a k x k eigenvalue problem weighted by the Galerkin mass.  Coefficient
samples are mean + amplitude * sum_i z_i * modes_i with z_i i.i.d. uniform
on [-1/2, 1/2], drawn from counter-based per-index streams so any sample is
reproducible in isolation.
"""

import json

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .eig_core import fix_signs
from .mesh_fem import NodalField


class NotSPSDError(ValueError):
    """The Gram matrix produced a negative updated diagonal beyond tolerance."""


class RankExhaustedError(RuntimeError):
    """max_rank reached before the trace tolerance; carries the achieved error."""

    def __init__(self, message, achieved_error):
        super().__init__(message)
        self.achieved_error = achieved_error


class KernelSpec:
    """Radial covariance kernel g(r) = exp(-r^2 / scale) / sqrt(scale * pi).

    Attributes
    ----------
    name : str
    scale : float
        Positive length-scale parameter of the exponent (default 20).
    """

    def __init__(self, scale=20.0, name="gaussian"):
        if scale <= 0:
            raise ValueError("kernel scale must be positive")
        self.name = name
        self.scale = float(scale)

    def evaluate(self, r):
        r = np.asarray(r, dtype=float)
        return np.exp(-r**2 / self.scale) / np.sqrt(self.scale * np.pi)


class KLExpansion:
    """Truncated KL representation of one random coefficient field.

    Attributes
    ----------
    mean : float
        Constant mean of the field (mu0 or eps0).
    amplitude : float
        Perturbation amplitude (alpha or beta).
    modes : ndarray, shape (n_nodes, k)
        Scaled modes sqrt(sigma_i) * phi_i at the nodes, phi_i M-normalized.
    sigmas : ndarray, shape (k,)
        KL eigenvalues, strictly positive, nonincreasing.
    law : str
        Coefficient distribution tag; only "uniform" (on [-1/2, 1/2]).
    """

    def __init__(self, mean, amplitude, modes, sigmas, law="uniform"):
        self.mean = float(mean)
        self.amplitude = float(amplitude)
        self.modes = np.asarray(modes, dtype=float)
        self.sigmas = np.asarray(sigmas, dtype=float)
        self.law = law
        if self.sigmas.size and (np.any(self.sigmas <= 0)
                                 or np.any(np.diff(self.sigmas) > 0)):
            raise ValueError("sigmas must be positive and nonincreasing")

    @property
    def k(self):
        return self.sigmas.size

    @property
    def n_nodes(self):
        return self.modes.shape[0]

    def sup_bound(self):
        """A.s. bound on |field - mean|: (amplitude/2) * sum_i ||modes_i||_inf."""
        return 0.5 * abs(self.amplitude) * np.abs(self.modes).max(axis=0).sum()


# floating-point floor below which a residual trace counts as converged;
# a nominal tolerance of exactly 0 is unreachable in finite precision
_TRACE_FLOOR = 128.0 * np.finfo(float).eps


def pivoted_cholesky(gram_entry, n, trace_tol, max_rank=None):
    """Greedy pivoted Cholesky of an SPSD matrix given entrywise.

    Parameters
    ----------
    gram_entry : callable
        gram_entry(i, j) -> entry values; must accept integer index arrays.
    n : int
        Matrix dimension.
    trace_tol : float
        Absolute bound on the residual trace of C - L L^T.
    max_rank : int, optional
        Cap on the number of pivots (default n).

    Returns
    -------
    L : ndarray, shape (n, k)
    err : float
        Achieved residual trace, tracked exactly from the updated diagonals.

    Raises
    ------
    NotSPSDError
        An updated diagonal dropped below -trace_tol.
    RankExhaustedError
        max_rank pivots did not reach the tolerance.
    """
    if trace_tol < 0:
        raise ValueError("trace_tol must be nonnegative")
    if max_rank is None:
        max_rank = n
    idx = np.arange(n)
    d = np.asarray(gram_entry(idx, idx), dtype=float).copy()
    err = d.sum()
    stop = max(trace_tol, _TRACE_FLOOR * max(err, 1.0))
    cols = []
    while err > stop:
        if len(cols) >= max_rank:
            raise RankExhaustedError(
                "rank %d reached with residual trace %.3e > %.3e"
                % (max_rank, err, trace_tol), achieved_error=err)
        p = int(np.argmax(d))
        pivot = d[p]
        if pivot <= 0:
            raise NotSPSDError(
                "largest remaining diagonal %.3e is not positive" % pivot)
        c = np.asarray(gram_entry(idx, p), dtype=float).copy()
        for ell in cols:
            c -= ell[p] * ell
        ell = c / np.sqrt(pivot)
        cols.append(ell)
        d -= ell**2
        d[p] = 0.0
        if d.min() < -trace_tol - _TRACE_FLOOR:
            raise NotSPSDError(
                "updated diagonal %.3e below -tolerance; matrix is not SPSD"
                % d.min())
        np.clip(d, 0.0, None, out=d)
        err = d.sum()
    L = np.array(cols).T if cols else np.zeros((n, 0))
    return L, err


def nodal_gram_entry(kernel, nodes):
    """Entrywise view of the nodal kernel Gram matrix [g(|x_i - x_j|)]."""
    nodes = np.asarray(nodes, dtype=float)

    def entry(i, j):
        diff = nodes[i] - nodes[j]
        return kernel.evaluate(np.sqrt(np.sum(diff * diff, axis=-1)))

    return entry


def build_kl(mesh, kernel, mass, trace_tol, mean=1.0, amplitude=0.1,
             max_rank=None):
    """Build the KL expansion from the nodal kernel Gram and the mass matrix.

    The Gram matrix [g(|x_i - x_j|)] is factored as L L^T by pivoted
    Cholesky, then the k x k problem (L^T M L) phi~ = sigma phi~ delivers the
    M-orthogonal modes; the stored scaled modes sqrt(sigma_i) phi_i equal
    L phi~_i directly.

    Parameters
    ----------
    mesh : Mesh
    kernel : KernelSpec
    mass : sparse matrix
        Unit-coefficient mass on the FULL node set (constrain=False).
    trace_tol : float
    mean, amplitude : float
        Field mean and perturbation amplitude stored on the expansion.
    """
    n = mesh.n_nodes
    if mass.shape != (n, n):
        raise ValueError("mass must be assembled on the full node set "
                         "(got %s for %d nodes)" % (mass.shape, n))
    diag = mass.diagonal() if sp.issparse(mass) else np.diag(mass)
    if np.any(diag <= 0):
        raise ValueError("mass matrix is singular: nonpositive diagonal")

    entry = nodal_gram_entry(kernel, mesh.nodes)
    L, _ = pivoted_cholesky(entry, n, trace_tol, max_rank=max_rank)
    if L.shape[1] == 0:
        return KLExpansion(mean, amplitude, np.zeros((n, 0)), np.zeros(0))

    S = L.T @ (mass @ L)
    S = 0.5 * (S + S.T)
    sig, phi = sla.eigh(S)
    order = np.argsort(sig)[::-1]
    sig, phi = sig[order], phi[:, order]
    keep = sig > max(sig[0], 0.0) * 1e-14
    sig, phi = sig[keep], phi[:, keep]
    if sig.size == 0:
        raise ValueError("kernel Gram has no positive energy against the mass")
    modes = fix_signs(L @ phi)
    return KLExpansion(mean, amplitude, modes, sig)


# stream tags so the two coefficient fields use independent Philox keys
MU_STREAM = 0
EPS_STREAM = 1


def stream_for(master_seed, sample_index, tag=MU_STREAM):
    """Counter-based random stream for one sample index.

    Streams for distinct (tag, sample_index) pairs never overlap: the tag
    enters the Philox key and the index the block counter, so a sample can be
    regenerated without drawing its predecessors.
    """
    key = np.array([np.uint64(master_seed), np.uint64(tag)], dtype=np.uint64)
    counter = np.array([0, 0, np.uint64(sample_index), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def sample_field(kl, rng_stream):
    """Draw one coefficient field; returns (NodalField, z).

    field = mean + amplitude * modes @ z with z_i i.i.d. uniform on
    [-1/2, 1/2].  Negating the returned z gives the antithetic partner.
    """
    z = rng_stream.random(kl.k) - 0.5
    return field_from_z(kl, z), z


def field_from_z(kl, z):
    """Deterministic field for a given coefficient vector z."""
    values = kl.mean + kl.amplitude * (kl.modes @ z)
    return NodalField(values)


def kl_to_json(kl, path=None):
    """Serialize a KLExpansion to JSON (string, optionally also a file)."""
    doc = {
        "mean": kl.mean,
        "amplitude": kl.amplitude,
        "n_nodes": int(kl.n_nodes),
        "k": int(kl.k),
        "sigmas": [float(s) for s in kl.sigmas],
        "modes": [float(v) for v in kl.modes.ravel(order="F")],
        "law": kl.law,
        "seed_policy": "philox key=(master_seed, tag) counter=(0,0,index,0)",
    }
    text = json.dumps(doc)
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def kl_from_json(source):
    """Rebuild a KLExpansion from JSON text or a file path."""
    text = source
    if "\n" not in str(source) and str(source).endswith(".json"):
        with open(source) as f:
            text = f.read()
    doc = json.loads(text)
    modes = np.asarray(doc["modes"], dtype=float).reshape(
        doc["n_nodes"], doc["k"], order="F")
    return KLExpansion(doc["mean"], doc["amplitude"], modes,
                       np.asarray(doc["sigmas"], dtype=float), law=doc["law"])
