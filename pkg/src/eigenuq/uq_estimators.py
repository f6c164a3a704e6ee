"""Monte Carlo moment estimation for aligned cluster eigenpairs.

Per sample: draw the two KL coefficient vectors, assemble the perturbed
pencil, solve around the reference cluster, align onto the reference basis,
and accumulate the aligned eigenvalue matrix and basis.  Antithetic mode
averages each draw with its sign-flipped mirror and counts the pair as two
samples; the covariance is then taken over independent standard samples
(dedicated RNG stream tags) centered at the antithetic mean.

Norm conventions: eigenvalue matrices in Frobenius norm, bases in the
L2-norm induced by the reference mass (summed over columns), covariances of
bases in the induced tensor norm.  Basis covariances are kept in factored
form; vectorization is column-major throughout.
"""

import numpy as np

from .alignment import AlignmentRejectedError, align
from .eig_core import DefinitenessError, EigenSolveError
from .field_model import EPS_STREAM, MU_STREAM, stream_for

# stream tags for the independent covariance pass in antithetic mode
MU_COV_STREAM = 2
EPS_COV_STREAM = 3

COV_SPECTRAL_TOL = 1e-8
PSD_FLOOR = -1e-12
# subsample cap for the tensor-norm RMSE estimate of the basis covariance
_RMSE_SUBSAMPLE = 1024


class AmplitudeTooLargeError(RuntimeError):
    """More than 1% of samples rejected; amplitudes leave the valid regime."""

    def __init__(self, message, rejections, rate):
        super().__init__(message)
        self.rejections = rejections
        self.rejection_rate = rate


class MCConfig:
    """Monte Carlo run configuration.

    Fields: samples (M >= 2), alpha, beta, antithetic, master_seed,
    cluster_target.  Positivity of the per-sample coefficient fields is
    checked sample by sample; violations are logged as rejections.
    """

    def __init__(self, samples, alpha, beta, antithetic=False,
                 master_seed=0, cluster_target=1):
        samples = int(samples)
        if samples < 2:
            raise ValueError("need at least 2 samples")
        if antithetic and samples % 2:
            raise ValueError("antithetic mode needs an even sample count")
        self.samples = samples
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.antithetic = bool(antithetic)
        self.master_seed = int(master_seed)
        self.cluster_target = int(cluster_target)


class LowRankCovariance:
    """Symmetric PSD covariance scale * factor @ factor.T in factored form."""

    def __init__(self, factor, scale=1.0):
        self.factor = np.asarray(factor, dtype=float)
        self.scale = float(scale)

    @property
    def rank(self):
        return self.factor.shape[1]

    @property
    def dim(self):
        return self.factor.shape[0]

    def matrix(self):
        return self.scale * (self.factor @ self.factor.T)


class MomentEstimate:
    """Estimated moments of the aligned cluster eigenpairs.

    Attributes
    ----------
    mean_lambda : (m, m)
    mean_basis : (n, m)
    cov_lambda : (m*m, m*m) symmetric PSD
    cov_basis : LowRankCovariance over n*m
    rmse_mean_lambda, rmse_cov_lambda : floats (self-estimated)
    rmse_mean_basis, rmse_cov_basis : floats (same construction)
    samples_used : accepted sample count entering the mean
    rejections : list of (sample_index, pass_name, reason)
    rejection_rate : rejected / attempted
    psd_clip : largest negative eigenvalue magnitude clipped from cov_lambda
    """

    def __init__(self, **kw):
        for key, value in kw.items():
            setattr(self, key, value)


def lambda_norm(X):
    """Frobenius norm of an eigenvalue-matrix quantity."""
    return float(np.linalg.norm(X))


def basis_norm(W, M0):
    """L2(M0) norm summed over basis columns: sqrt(sum_j w_j^T M0 w_j)."""
    W = np.asarray(W)
    if W.ndim == 1:
        W = W[:, None]
    return float(np.sqrt(max(np.einsum("ij,ij->", W, M0 @ W), 0.0)))


def _mass_apply(F, M0, m):
    """Apply blockdiag(M0, ..., M0) to stacked-column vectors."""
    n = M0.shape[0]
    r = F.shape[1] if F.ndim == 2 else 1
    blocks = F.reshape(m, n, r) if F.ndim == 2 else F.reshape(m, n, 1)
    out = np.empty_like(blocks)
    for j in range(m):
        out[j] = M0 @ blocks[j]
    return out.reshape(F.shape)


def cov_basis_norm(cov, M0, m):
    """Tensor L2(D x D) norm of a factored basis covariance."""
    F = cov.factor
    if F.shape[1] == 0:
        return 0.0
    G = F.T @ _mass_apply(F, M0, m)
    return float(cov.scale * np.linalg.norm(G))


def cov_factor_distance(cov_a, cov_b, M0, m):
    """Tensor-norm distance between two factored basis covariances."""
    Fa = np.sqrt(cov_a.scale) * cov_a.factor if cov_a.rank else cov_a.factor
    Fb = np.sqrt(cov_b.scale) * cov_b.factor if cov_b.rank else cov_b.factor
    Gaa = Fa.T @ _mass_apply(Fa, M0, m) if Fa.shape[1] else np.zeros((0, 0))
    Gbb = Fb.T @ _mass_apply(Fb, M0, m) if Fb.shape[1] else np.zeros((0, 0))
    if Fa.shape[1] and Fb.shape[1]:
        Gab = Fa.T @ _mass_apply(Fb, M0, m)
        cross = np.linalg.norm(Gab) ** 2
    else:
        cross = 0.0
    sq = np.linalg.norm(Gaa) ** 2 - 2.0 * cross + np.linalg.norm(Gbb) ** 2
    return float(np.sqrt(max(sq, 0.0)))


def mc_rmse(values, norm=None):
    """Self-estimated RMSE of a mean of i.i.d. samples.

    RMSE^2 = (1/M^2) sum_i ||mean - w_i||^2 over the supplied sample values.
    Deviations are computed in coordinates shifted by the first sample, so
    constant samples give exactly zero.
    """
    arr = np.asarray(values, dtype=float)
    M = arr.shape[0]
    if M < 2:
        raise ValueError("need at least 2 samples")
    shifted = arr - arr[0]
    deviations = shifted - shifted.mean(axis=0)
    if norm is None:
        flat = deviations.reshape(M, -1)
        total = float(np.einsum("ij,ij->", flat, flat))
    else:
        total = float(sum(norm(d) ** 2 for d in deviations))
    return float(np.sqrt(total)) / M


def draw_z(problem, master_seed, index, tag):
    """Uniform KL coefficient draw for one (sample, stream) pair."""
    return stream_for(master_seed, index, tag).random(problem.kl.k) - 0.5


def evaluate_sample(problem, z_mu, z_eps, alpha, beta):
    """One aligned sample (lambda matrix, basis); raises on rejection."""
    field_mu = problem.field_values(z_mu, alpha)
    field_eps = problem.field_values(z_eps, beta)
    if field_mu.min() <= 0.0 or field_eps.min() <= 0.0:
        raise ValueError("nonpositive coefficient field")
    A, M = problem.sample_matrices(z_mu, z_eps, alpha, beta)
    lams, vecs = problem.solve_sample(A, M)
    idx = problem.cluster.cluster_indices
    res = align(vecs[:, idx], lams[idx], problem.cluster.basis, problem.M0)
    return res.aligned_lambda, res.aligned_basis, res.singulars


def run_sample_pass(problem, config, indices, tag_mu, tag_eps, pass_name,
                    rejections, sign=1.0):
    """Evaluate a stream of samples; returns stacked accepted results.

    Per-sample work is pure given its (master_seed, index, tag) stream, so
    passes over disjoint index sets can run anywhere and reduce by
    concatenation; the study drivers also reuse one pass across nested
    sample-size prefixes.  Returns (lambdas, bases, singulars, kept) with
    kept the ascending accepted indices; rejections are appended to the
    caller's list as (index, pass_name, reason).
    """
    lams, bases, sings, kept = [], [], [], []
    for i in indices:
        z_mu = sign * draw_z(problem, config.master_seed, i, tag_mu)
        z_eps = sign * draw_z(problem, config.master_seed, i, tag_eps)
        try:
            lam, basis, s = evaluate_sample(problem, z_mu, z_eps,
                                            config.alpha, config.beta)
        except DefinitenessError:
            rejections.append((int(i), pass_name, "indefinite-pencil"))
            continue
        except ValueError:
            rejections.append((int(i), pass_name, "nonpositive-coefficient"))
            continue
        except EigenSolveError:
            rejections.append((int(i), pass_name, "eigensolver"))
            continue
        except AlignmentRejectedError:
            rejections.append((int(i), pass_name, "alignment"))
            continue
        lams.append(lam)
        bases.append(basis)
        sings.append(s)
        kept.append(int(i))
    m = problem.cluster.multiplicity
    n = problem.n_free
    lams = np.array(lams) if lams else np.zeros((0, m, m))
    bases = np.array(bases) if bases else np.zeros((0, n, m))
    sings = np.array(sings) if sings else np.zeros((0, m))
    return lams, bases, sings, np.array(kept, dtype=int)


def _psd_project(C):
    """Symmetrize and clip negative eigenvalues; returns (C_psd, clip)."""
    C = 0.5 * (C + C.T)
    vals, vecs = np.linalg.eigh(C)
    clip = float(max(0.0, -vals.min()))
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T, clip


def _basis_cov_factor(Yc, M):
    """Factored covariance of centered stacked-column basis samples.

    Streaming Gram accumulation: C = Yc Yc^T / M built in sample blocks,
    then eigendecomposed and truncated at relative spectral tolerance 1e-8.
    """
    dim = Yc.shape[0]
    C = np.zeros((dim, dim))
    for start in range(0, Yc.shape[1], 4096):
        block = Yc[:, start:start + 4096]
        C += block @ block.T
    C /= M
    vals, vecs = np.linalg.eigh(C)
    vals = np.clip(vals, 0.0, None)
    if vals.max() > 0.0:
        keep = vals > COV_SPECTRAL_TOL * vals.max()
    else:
        keep = vals > 0.0
    factor = vecs[:, keep] * np.sqrt(vals[keep])
    return LowRankCovariance(factor[:, ::-1], scale=1.0)


def _cov_rmse_tensor(Yc, M_total, M0, m):
    """RMSE of the factored covariance estimate in the tensor norm.

    Uses a capped subsample of the centered samples; the i.i.d.-unit
    variance estimated there is scaled by 1/sqrt(M_total).
    """
    s = min(Yc.shape[1], _RMSE_SUBSAMPLE)
    if s < 2:
        return 0.0
    Ys = Yc[:, :s]
    H = Ys.T @ _mass_apply(Ys, M0, m)
    h2 = H * H
    sigma_sq = (np.trace(h2) - h2.sum() / s) / s
    return float(np.sqrt(max(sigma_sq, 0.0) / M_total))


def _stack(samples):
    """(M, n, m) -> (n*m, M) with column-major vectorization per sample."""
    Msz, n, m = samples.shape
    return samples.transpose(1, 2, 0).reshape(n * m, Msz, order="F")


def mc_estimate(config, problem):
    """Estimate mean and covariance of the aligned cluster eigenpairs.

    Rejected samples (nonpositive field, solver failure, alignment) are
    logged and skipped, never resampled; a rejection rate above 1% raises
    AmplitudeTooLargeError.  Identical configs give bit-identical results:
    every sample index owns its own counter-based RNG stream and the
    accumulation order is fixed.
    """
    if config.cluster_target != problem.target_index:
        raise ValueError(
            "config targets eigenvalue %d but the problem bundle was built "
            "for %d" % (config.cluster_target, problem.target_index))
    m = problem.cluster.multiplicity
    n = problem.n_free
    rejections = []
    min_singulars = []

    if not config.antithetic:
        indices = np.arange(config.samples)
        lams, bases, sings, _ = run_sample_pass(
            problem, config, indices, MU_STREAM, EPS_STREAM, "standard",
            rejections)
        attempted = config.samples
        used = lams.shape[0]
        if used < 2:
            raise AmplitudeTooLargeError(
                "fewer than 2 accepted samples", rejections,
                1.0 - used / attempted)
        mean_units_lambda = lams
        mean_units_basis = bases
        cov_lams, cov_bases = lams, bases
        min_singulars = sings.min(axis=1)
    else:
        pairs = config.samples // 2
        indices = np.arange(pairs)
        lam_p, bas_p, sing_p, kept_p = run_sample_pass(
            problem, config, indices, MU_STREAM, EPS_STREAM,
            "antithetic+", rejections)
        lam_m, bas_m, sing_m, kept_m = run_sample_pass(
            problem, config, indices, MU_STREAM, EPS_STREAM,
            "antithetic-", rejections, sign=-1.0)
        # a pair contributes only when both members were accepted
        common, ip, im = np.intersect1d(kept_p, kept_m,
                                        return_indices=True)
        lam_pairs = 0.5 * (lam_p[ip] + lam_m[im])
        bas_pairs = 0.5 * (bas_p[ip] + bas_m[im])
        # independent standard samples for the covariance, own stream tags
        cov_lams, cov_bases, sing_c, _ = run_sample_pass(
            problem, config, np.arange(config.samples), MU_COV_STREAM,
            EPS_COV_STREAM, "covariance", rejections)
        attempted = 2 * pairs + config.samples
        if lam_pairs.shape[0] < 1 or cov_lams.shape[0] < 2:
            raise AmplitudeTooLargeError(
                "too few accepted samples", rejections,
                len(rejections) / attempted)
        mean_units_lambda = lam_pairs
        mean_units_basis = bas_pairs
        used = 2 * lam_pairs.shape[0]
        min_singulars = np.concatenate([
            np.minimum(sing_p[ip].min(axis=1), sing_m[im].min(axis=1)),
            sing_c.min(axis=1)])

    rate = len(rejections) / attempted
    if rate > 0.01:
        raise AmplitudeTooLargeError(
            "rejection rate %.2f%% exceeds 1%%: amplitudes too large for "
            "the positivity/alignment regime" % (100 * rate),
            rejections, rate)

    # shifted two-pass moments: exact zeros when all samples coincide
    shift_l = mean_units_lambda[0]
    shift_b = mean_units_basis[0]
    mean_lambda = shift_l + (mean_units_lambda - shift_l).mean(axis=0)
    mean_basis = shift_b + (mean_units_basis - shift_b).mean(axis=0)

    M_cov = cov_lams.shape[0]
    dl = ((cov_lams - shift_l).reshape(M_cov, m * m)
          - (mean_lambda - shift_l).reshape(m * m))
    cov_lambda = dl.T @ dl / M_cov
    cov_lambda, psd_clip = _psd_project(cov_lambda)

    Yc = (_stack(cov_bases - shift_b)
          - (mean_basis - shift_b).reshape(-1, 1, order="F"))
    cov_basis = _basis_cov_factor(Yc, M_cov)

    rmse_mean_lambda = mc_rmse(mean_units_lambda)
    rmse_mean_basis = mc_rmse(
        _stack(mean_units_basis).T,
        norm=lambda w: basis_norm(w.reshape(n, m, order="F"), problem.M0))
    # covariance terms T_i = y_i (x) y_i around the fixed center
    T = (dl[:, :, None] * dl[:, None, :]).reshape(M_cov, -1)
    rmse_cov_lambda = mc_rmse(T)
    rmse_cov_basis = _cov_rmse_tensor(Yc, M_cov, problem.M0, m)

    return MomentEstimate(
        mean_lambda=mean_lambda, mean_basis=mean_basis,
        cov_lambda=cov_lambda, cov_basis=cov_basis,
        rmse_mean_lambda=rmse_mean_lambda,
        rmse_cov_lambda=rmse_cov_lambda,
        rmse_mean_basis=rmse_mean_basis,
        rmse_cov_basis=rmse_cov_basis,
        samples_used=used, rejections=rejections, rejection_rate=rate,
        psd_clip=psd_clip, min_singulars=np.asarray(min_singulars))


def sample_rmses(lams, bases, problem):
    """Self-estimated RMSEs of the mean and covariance estimators.

    Takes one batch of aligned samples (the covariance is centered at the
    batch mean, as in the standard estimator) and returns
    (rmse_mean_lambda, rmse_cov_lambda, rmse_mean_basis, rmse_cov_basis).
    The regression studies call this on nested prefixes of a single pass,
    so the formulas must stay in lockstep with the standard branch of
    mc_estimate.
    """
    lams = np.asarray(lams, dtype=float)
    bases = np.asarray(bases, dtype=float)
    if lams.shape[0] < 2:
        raise ValueError("need at least 2 samples for an RMSE estimate")
    m = problem.cluster.multiplicity
    n = problem.n_free
    M = lams.shape[0]
    shift_l = lams[0]
    shift_b = bases[0]
    mean_lambda = shift_l + (lams - shift_l).mean(axis=0)
    mean_basis = shift_b + (bases - shift_b).mean(axis=0)

    dl = ((lams - shift_l).reshape(M, m * m)
          - (mean_lambda - shift_l).reshape(m * m))
    Yc = (_stack(bases - shift_b)
          - (mean_basis - shift_b).reshape(-1, 1, order="F"))

    rmse_mean_lambda = mc_rmse(lams)
    rmse_mean_basis = mc_rmse(
        _stack(bases).T,
        norm=lambda w: basis_norm(w.reshape(n, m, order="F"), problem.M0))
    T = (dl[:, :, None] * dl[:, None, :]).reshape(M, -1)
    rmse_cov_lambda = mc_rmse(T)
    rmse_cov_basis = _cov_rmse_tensor(Yc, M, problem.M0, m)
    return rmse_mean_lambda, rmse_cov_lambda, rmse_mean_basis, rmse_cov_basis
