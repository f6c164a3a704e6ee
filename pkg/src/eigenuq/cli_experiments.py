"""Experiment driver for the stochastic diffusion eigenproblem.

Subcommands expose the pipeline stages (mesh, kl, solve-ref, derivs, mc,
perturb) and the end-to-end studies (study-det, study-mc, study-exp,
timings).  Every table is written as RFC-4180 CSV with a header comment
carrying the config hash and a content hash of the assembled inputs, so
identical configurations reproduce identical bytes; timing outputs are the
one exception and say so.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from .mesh_fem import build_unit_square_mesh, assemble_mass
from .field_model import KernelSpec, build_kl, MU_STREAM, EPS_STREAM
from .eig_core import DefinitenessError, EigenSolveError
from .alignment import AlignmentRejectedError, align, pairwise_polar_align
from .derivative_engine import (eigenvalue_derivative, mu_direction_rhs,
                                eps_direction_rhs, directional_bundles)
from .diffusion import build_problem, direction_matrices
from .uq_estimators import (AmplitudeTooLargeError, LowRankCovariance,
                            MCConfig, mc_estimate, mc_rmse, sample_rmses,
                            run_sample_pass, lambda_norm, basis_norm,
                            cov_factor_distance, draw_z)
from .uq_perturb import perturb_moments, perturb_cov, joint_lambda_block

GAUGES = ("theorem", "aligned")

# dyadic slope fits drop the floor-contaminated small steps and the
# preasymptotic large ones; fits on the sample-size axis keep every point
SLOPE_DROP_SMALL = 3
SLOPE_DROP_LARGE = 2

SING_BINS = np.linspace(0.5, 1.1, 31)

DEFAULTS = {
    "mesh_n": 12,
    "kl_tol": 1e-5,
    "kernel_scale": 20.0,
    "target_index": 1,
    "cluster_gap_tol": 0.05,
    "alpha": 0.1,
    "beta": 0.1,
    "ray_min_exp": -15,
    "ray_max_exp": 0,
    "samples": 1024,
    "schedule": (32, 64, 128, 256, 512, 1024, 2048, 4096),
    "reps": 20,
    "mc_reference": 100000,
    "master_seed": 0,
    "gauge": "aligned",
    "antithetic": False,
    "output_dir": ".",
}

# config keys that parameterize the experiment and enter the config hash;
# output_dir only locates files and stays out
_HASH_FIELDS = tuple(k for k in sorted(DEFAULTS) if k != "output_dir")


class ExperimentConfig:
    """Resolved experiment parameters shared by every subcommand.

    Values are resolved in order DEFAULTS <- JSON config file <- command
    line flags; construction validates the merged result.
    """

    def __init__(self, **kw):
        unknown = sorted(set(kw) - set(DEFAULTS))
        if unknown:
            raise ValueError("unknown config keys: %s" % ", ".join(unknown))
        merged = dict(DEFAULTS)
        merged.update(kw)

        self.mesh_n = int(merged["mesh_n"])
        self.kl_tol = float(merged["kl_tol"])
        self.kernel_scale = float(merged["kernel_scale"])
        self.target_index = int(merged["target_index"])
        self.cluster_gap_tol = float(merged["cluster_gap_tol"])
        self.alpha = float(merged["alpha"])
        self.beta = float(merged["beta"])
        self.ray_min_exp = int(merged["ray_min_exp"])
        self.ray_max_exp = int(merged["ray_max_exp"])
        self.samples = int(merged["samples"])
        self.schedule = tuple(int(M) for M in merged["schedule"])
        self.reps = int(merged["reps"])
        self.mc_reference = int(merged["mc_reference"])
        self.master_seed = int(merged["master_seed"])
        self.gauge = str(merged["gauge"])
        self.antithetic = bool(merged["antithetic"])
        self.output_dir = str(merged["output_dir"])

        if self.mesh_n < 2:
            raise ValueError("mesh_n must be at least 2")
        for name in ("kl_tol", "kernel_scale", "cluster_gap_tol"):
            if getattr(self, name) <= 0:
                raise ValueError("%s must be positive" % name)
        if self.target_index < 0:
            raise ValueError("target_index must be nonnegative")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("amplitudes must be nonnegative")
        if self.ray_min_exp > self.ray_max_exp:
            raise ValueError("empty dyadic ray: ray_min_exp > ray_max_exp")
        if self.samples < 2:
            raise ValueError("samples must be at least 2")
        if not self.schedule:
            raise ValueError("sample schedule must be nonempty")
        if any(M < 2 for M in self.schedule):
            raise ValueError("schedule entries must be at least 2")
        if any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError("schedule must be strictly increasing")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.mc_reference < 2:
            raise ValueError("mc_reference must be at least 2")
        if self.master_seed < 0:
            raise ValueError("master_seed must be nonnegative")
        if self.gauge not in GAUGES:
            raise ValueError("gauge must be one of %s" % (GAUGES,))

    def to_dict(self):
        """Hash-relevant fields as plain JSON-serializable values."""
        out = {}
        for key in _HASH_FIELDS:
            val = getattr(self, key)
            out[key] = list(val) if isinstance(val, tuple) else val
        return out

    def ray(self):
        """Ascending dyadic amplitudes 2^ray_min_exp .. 2^ray_max_exp."""
        return [2.0 ** e
                for e in range(self.ray_min_exp, self.ray_max_exp + 1)]


def config_hash(cfg):
    """Short digest of the experiment parameters (locations excluded)."""
    payload = json.dumps(cfg.to_dict(), sort_keys=True,
                         separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:12]


def content_hash(arrays):
    """Git-style blob digest of concatenated raw array bytes."""
    payload = b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)
    return hashlib.sha1(b"blob %d\x00" % len(payload)
                        + payload).hexdigest()[:12]


def problem_inputs_hash(problem):
    """Content hash of the assembled operators, KL basis and reference."""
    return content_hash([
        problem.A0.data, problem.A0.indices.astype(np.int64),
        problem.A0.indptr.astype(np.int64), problem.M0.data,
        problem.kl.modes, problem.kl.sigmas,
        problem.cluster.eigenvalues, problem.cluster.basis,
        problem.ref_lams])


def build_from_config(cfg):
    return build_problem(cfg.mesh_n, target_index=cfg.target_index,
                         cluster_gap_tol=cfg.cluster_gap_tol,
                         kl_tol=cfg.kl_tol, kernel_scale=cfg.kernel_scale)


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    # repr round-trips doubles, keeping reruns byte-identical
    return repr(float(value))


def write_csv(path, columns, rows, cfg_hash, in_hash, comments=()):
    """RFC-4180 table with the hash header and optional comment lines."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# config=%s inputs=%s\r\n" % (cfg_hash, in_hash))
        for line in comments:
            fh.write("# %s\r\n" % line)
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _finite_map(values):
    """nan/inf -> None so the JSON stays strictly parseable."""
    return {k: (float(v) if np.isfinite(v) else None)
            for k, v in values.items()}


def fit_slope(xs, ys, drop_small=0, drop_large=0):
    """Least-squares slope of log2 y against log2 x.

    Drops the requested number of smallest/largest x points when enough
    remain for a two-point fit; returns nan if fewer than two points
    survive.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    order = np.argsort(xs)
    if len(order) - drop_small - drop_large >= 2:
        order = order[drop_small:len(order) - drop_large]
    if len(order) < 2:
        return float("nan")
    lx = np.log2(xs[order])
    ly = np.log2(np.maximum(ys[order], 1e-300))
    return float(np.polyfit(lx, ly, 1)[0])


def _in_band(value, lo, hi):
    return np.isfinite(value) and lo <= value <= hi


def _min_singular_histogram(values):
    counts, edges = np.histogram(np.asarray(values, dtype=float),
                                 bins=SING_BINS)
    return {"edges": edges.tolist(), "counts": counts.tolist(),
            "total": int(np.size(values))}


# ---------------------------------------------------------------------------
# pipeline-stage subcommands


def cmd_mesh(cfg, args):
    mesh = build_unit_square_mesh(cfg.mesh_n)
    cfg_h = config_hash(cfg)
    in_h = content_hash([mesh.nodes, mesh.triangles.astype(np.int64)])
    rows = []
    for i, (x, y) in enumerate(mesh.nodes):
        rows.append([i, float(x), float(y),
                     1 if i in mesh.interior_index else 0])
    path = os.path.join(cfg.output_dir, "mesh.csv")
    write_csv(path, ["node", "x", "y", "free"], rows, cfg_h, in_h,
              comments=["nodes=%d triangles=%d free=%d h=%s"
                        % (mesh.n_nodes, len(mesh.triangles),
                           len(mesh.free_nodes), repr(float(mesh.h)))])
    print("wrote %s (%d nodes, %d free)" % (path, mesh.n_nodes,
                                            len(mesh.free_nodes)))
    return 0


def cmd_kl(cfg, args):
    mesh = build_unit_square_mesh(cfg.mesh_n)
    ones = np.ones(mesh.n_nodes)
    mass_full = assemble_mass(mesh, ones, constrain=False)
    kl = build_kl(mesh, KernelSpec(scale=cfg.kernel_scale), mass_full,
                  cfg.kl_tol, mean=1.0, amplitude=1.0)
    cfg_h = config_hash(cfg)
    in_h = content_hash([kl.modes, kl.sigmas])
    rows = [[i, float(s)] for i, s in enumerate(kl.sigmas)]
    path = os.path.join(cfg.output_dir, "kl.csv")
    write_csv(path, ["mode", "sigma"], rows, cfg_h, in_h,
              comments=["rank=%d trace_tol=%s" % (kl.k, repr(cfg.kl_tol))])
    print("wrote %s (rank %d)" % (path, kl.k))
    return 0


def cmd_solve_ref(cfg, args):
    problem = build_from_config(cfg)
    cl = problem.cluster
    payload = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "inputs_hash": problem_inputs_hash(problem),
        "n_free": int(problem.n_free),
        "kl_rank": int(problem.kl.k),
        "ref_lams": problem.ref_lams.tolist(),
        "cluster": {
            "lambda0": float(cl.lambda0),
            "eigenvalues": cl.eigenvalues.tolist(),
            "cluster_indices": [int(i) for i in cl.cluster_indices],
            "multiplicity": int(cl.multiplicity),
        },
    }
    path = os.path.join(cfg.output_dir, "reference.json")
    write_json(path, payload)
    print("wrote %s (lambda0=%.6f, m=%d)" % (path, cl.lambda0,
                                             cl.multiplicity))
    return 0


def cmd_derivs(cfg, args):
    problem = build_from_config(cfg)
    cl = problem.cluster
    U0 = cl.basis
    z_mu = draw_z(problem, cfg.master_seed, 0, MU_STREAM)
    z_eps = draw_z(problem, cfg.master_seed, 0, EPS_STREAM)
    A1, M1 = direction_matrices(problem, z_mu, z_eps)
    b_mu, b_eps = directional_bundles(problem.A0, problem.M0, cl, A1, M1,
                                      gauge=cfg.gauge)
    # the saddle constraint rows prescribe U0^T M0 dU exactly
    _, bot_mu = mu_direction_rhs(cl, A1)
    _, bot_eps = eps_direction_rhs(cl, M1, gauge=cfg.gauge)
    res_mu = float(np.abs(U0.T @ (problem.M0 @ b_mu.dU) - bot_mu).max())
    res_eps = float(np.abs(U0.T @ (problem.M0 @ b_eps.dU) - bot_eps).max())
    dmu_direct, deps_direct = eigenvalue_derivative(cl, A1, M1)
    payload = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "inputs_hash": problem_inputs_hash(problem),
        "gauge": cfg.gauge,
        "z_mu": z_mu.tolist(),
        "z_eps": z_eps.tolist(),
        "dlambda_mu": b_mu.dLambda.tolist(),
        "dlambda_eps": b_eps.dLambda.tolist(),
        "dlambda_mu_direct": dmu_direct.tolist(),
        "dlambda_eps_direct": deps_direct.tolist(),
        "constraint_residual_mu": res_mu,
        "constraint_residual_eps": res_eps,
    }
    path = os.path.join(cfg.output_dir, "derivs.json")
    write_json(path, payload)
    print("wrote %s (constraint residuals mu=%.3e eps=%.3e)"
          % (path, res_mu, res_eps))
    return 0


def cmd_mc(cfg, args):
    problem = build_from_config(cfg)
    m = problem.cluster.multiplicity
    cfg_h = config_hash(cfg)
    in_h = problem_inputs_hash(problem)

    prefixes = [M for M in cfg.schedule if M < cfg.samples]
    prefixes.append(cfg.samples)
    ref = mc_estimate(MCConfig(cfg.samples, cfg.alpha, cfg.beta,
                               antithetic=cfg.antithetic,
                               master_seed=cfg.master_seed,
                               cluster_target=cfg.target_index), problem)

    rows = []
    skipped = []
    for M in prefixes:
        if M == cfg.samples:
            est = ref
        else:
            try:
                est = mc_estimate(MCConfig(M, cfg.alpha, cfg.beta,
                                           antithetic=cfg.antithetic,
                                           master_seed=cfg.master_seed,
                                           cluster_target=cfg.target_index),
                                  problem)
            except AmplitudeTooLargeError as exc:
                skipped.append("M=%d skipped: %s" % (M, exc))
                continue
        rows.append([
            M,
            lambda_norm(est.mean_lambda - ref.mean_lambda),
            basis_norm(est.mean_basis - ref.mean_basis, problem.M0),
            lambda_norm(est.cov_lambda - ref.cov_lambda),
            cov_factor_distance(est.cov_basis, ref.cov_basis,
                                problem.M0, m),
            est.rmse_mean_lambda, est.rmse_cov_lambda,
            est.rmse_mean_basis, est.rmse_cov_basis,
        ])

    comments = ["errors measured against the full-M estimate",
                "estimator=%s"
                % ("antithetic" if cfg.antithetic else "standard")]
    comments.extend(skipped)
    path = os.path.join(cfg.output_dir, "mc.csv")
    write_csv(path, ["M", "err_mean_lambda", "err_mean_basis",
                     "err_cov_lambda", "err_cov_basis",
                     "rmse_mean_lambda", "rmse_cov_lambda",
                     "rmse_mean_basis", "rmse_cov_basis"],
              rows, cfg_h, in_h, comments=comments)

    payload = {
        "config": cfg.to_dict(),
        "config_hash": cfg_h,
        "inputs_hash": in_h,
        "antithetic": cfg.antithetic,
        "mean_lambda": ref.mean_lambda.tolist(),
        "mean_basis": ref.mean_basis.tolist(),
        "cov_lambda": ref.cov_lambda.tolist(),
        "cov_basis": {
            "factor": ref.cov_basis.factor.tolist(),
            "scale": float(ref.cov_basis.scale),
            "dim": int(ref.cov_basis.dim),
            "rank": int(ref.cov_basis.rank),
        },
        "rmse_mean_lambda": ref.rmse_mean_lambda,
        "rmse_cov_lambda": ref.rmse_cov_lambda,
        "rmse_mean_basis": ref.rmse_mean_basis,
        "rmse_cov_basis": ref.rmse_cov_basis,
        "samples_used": int(ref.samples_used),
        "rejection_rate": float(ref.rejection_rate),
        "rejections": [[int(i), str(p), str(r)]
                       for i, p, r in ref.rejections],
        "psd_clip": float(ref.psd_clip),
        "min_singular_histogram":
            _min_singular_histogram(ref.min_singulars),
    }
    jpath = os.path.join(cfg.output_dir, "mc_moments.json")
    write_json(jpath, payload)
    print("wrote %s and %s (M=%d, used=%d, rejection rate %.4f)"
          % (path, jpath, cfg.samples, ref.samples_used,
             ref.rejection_rate))
    return 0


def cmd_perturb(cfg, args):
    problem = build_from_config(cfg)
    cl = problem.cluster
    m = cl.multiplicity
    cfg_h = config_hash(cfg)
    in_h = problem_inputs_hash(problem)

    t0 = time.perf_counter()
    pm = perturb_moments(problem, gauge=cfg.gauge)
    t1 = time.perf_counter()
    cov_l, cov_b = perturb_cov(cfg.alpha, cfg.beta, pm.cov_joint_mu,
                               pm.cov_joint_eps, m)
    t2 = time.perf_counter()

    payload = {
        "config": cfg.to_dict(),
        "config_hash": cfg_h,
        "inputs_hash": in_h,
        "gauge": cfg.gauge,
        "multiplicity": int(m),
        "lambda0": float(cl.lambda0),
        "mean_lambda": pm.mean_lambda.tolist(),
        "cov_lambda": cov_l.tolist(),
        "cov_lambda_mu_unit":
            joint_lambda_block(pm.cov_joint_mu, m).tolist(),
        "cov_lambda_eps_unit":
            joint_lambda_block(pm.cov_joint_eps, m).tolist(),
        "cov_basis": {"dim": int(cov_b.dim), "rank": int(cov_b.rank),
                      "scale": float(cov_b.scale)},
        "timing": {"moments_s": t1 - t0, "cov_s": t2 - t1},
    }
    path = os.path.join(cfg.output_dir, "perturb.json")
    write_json(path, payload)
    print("wrote %s (basis factor %dx%d)" % (path, cov_b.dim, cov_b.rank))

    ref_path = args.mc_reference_file or os.path.join(cfg.output_dir,
                                                      "mc_moments.json")
    if not os.path.exists(ref_path):
        print("no MC reference at %s; comparison skipped" % ref_path)
        return 0

    with open(ref_path, "r", encoding="utf-8") as fh:
        mc = json.load(fh)
    mc_mean_l = np.asarray(mc["mean_lambda"], dtype=float)
    mc_mean_b = np.asarray(mc["mean_basis"], dtype=float)
    mc_cov_l = np.asarray(mc["cov_lambda"], dtype=float)
    factor = np.asarray(mc["cov_basis"]["factor"], dtype=float)
    factor = factor.reshape(int(mc["cov_basis"]["dim"]), -1)
    mc_cov_b = LowRankCovariance(factor,
                                 scale=float(mc["cov_basis"]["scale"]))

    # gauge-consistent zeroth order; the exactly degenerate reading rides
    # along as its own row
    mean_ref = (np.diag(cl.eigenvalues) if cfg.gauge == "aligned"
                else cl.lambda0 * np.eye(m))
    rows = [
        ["mean_lambda", lambda_norm(mc_mean_l - mean_ref),
         float(mc["rmse_mean_lambda"])],
        ["mean_lambda_degenerate",
         lambda_norm(mc_mean_l - cl.lambda0 * np.eye(m)),
         float(mc["rmse_mean_lambda"])],
        ["mean_basis", basis_norm(mc_mean_b - cl.basis, problem.M0),
         float(mc["rmse_mean_basis"])],
        ["cov_lambda", lambda_norm(mc_cov_l - cov_l),
         float(mc["rmse_cov_lambda"])],
        ["cov_basis", cov_factor_distance(mc_cov_b, cov_b, problem.M0, m),
         float(mc["rmse_cov_basis"])],
    ]
    comments = ["mc_reference=%s mc_config=%s" % (ref_path,
                                                  mc.get("config_hash"))]
    if mc.get("config_hash") != cfg_h:
        comments.append("warning: MC reference was produced under a "
                        "different config")
    cpath = os.path.join(cfg.output_dir, "perturb_vs_mc.csv")
    write_csv(cpath, ["quantity", "prediction_error", "mc_rmse"], rows,
              cfg_h, in_h, comments=comments)
    print("wrote %s" % cpath)
    return 0


# ---------------------------------------------------------------------------
# studies


def run_deterministic_study(cfg, problem=None):
    """First-order accuracy along the dyadic ray for one fixed KL draw.

    One sample solve per step; residuals against the first-order
    prediction are reported for the polarization route and the SVD
    alignment route, eigenvalues and basis each, plus the exactly
    degenerate eigenvalue reading (cluster mean and projected
    derivatives) whose floor exposes the discrete cluster split.
    """
    if problem is None:
        problem = build_from_config(cfg)
    cl = problem.cluster
    m = cl.multiplicity
    U0 = cl.basis
    M0 = problem.M0
    idx = cl.cluster_indices

    z_mu = draw_z(problem, cfg.master_seed, 0, MU_STREAM)
    z_eps = draw_z(problem, cfg.master_seed, 0, EPS_STREAM)
    A1, M1 = direction_matrices(problem, z_mu, z_eps)
    b_mu, b_eps = directional_bundles(problem.A0, M0, cl, A1, M1,
                                      gauge=cfg.gauge)
    dLam = b_mu.dLambda + b_eps.dLambda
    dU = b_mu.dU + b_eps.dU
    dmu_deg, deps_deg = eigenvalue_derivative(cl, A1, M1)
    dLam_deg = dmu_deg + deps_deg
    Lam0 = np.diag(cl.eigenvalues)
    lam0I = cl.lambda0 * np.eye(m)

    rows = []
    for t in cfg.ray():
        if (problem.field_values(z_mu, t).min() <= 0.0
                or problem.field_values(z_eps, t).min() <= 0.0):
            rows.append([t, None, None, None, None, None, "rejected",
                         None])
            continue
        try:
            A, M = problem.sample_matrices(z_mu, z_eps, t, t)
            lams, vecs = problem.solve_sample(A, M)
            res = align(vecs[:, idx], lams[idx], U0, M0)
            comp = pairwise_polar_align(vecs[:, idx], lams[idx], t, t, cl,
                                        b_mu, b_eps, M0)
        except (DefinitenessError, EigenSolveError,
                AlignmentRejectedError):
            rows.append([t, None, None, None, None, None, "rejected",
                         None])
            continue
        rows.append([
            t,
            float(np.linalg.norm(comp.sample_lams - comp.pred_lams)),
            lambda_norm(res.aligned_lambda - (Lam0 + t * dLam)),
            basis_norm(comp.matched_basis - comp.pred_basis, M0),
            basis_norm(res.aligned_basis - (U0 + t * dU), M0),
            lambda_norm(res.aligned_lambda - (lam0I + t * dLam_deg)),
            "ok",
            float(res.singulars.min()),
        ])

    ok = [r for r in rows if r[6] == "ok"]
    ts = [r[0] for r in ok]
    slopes = {}
    for name, col in (("slope_lambda_polar", 1), ("slope_lambda_svd", 2),
                      ("slope_basis_polar", 3), ("slope_basis_svd", 4),
                      ("slope_lambda_degenerate", 5)):
        slopes[name] = fit_slope(ts, [r[col] for r in ok],
                                 SLOPE_DROP_SMALL, SLOPE_DROP_LARGE)

    columns = ["t", "err_lambda_polar", "err_lambda_svd",
               "err_basis_polar", "err_basis_svd",
               "err_lambda_degenerate", "status", "min_singular"]
    return {"columns": columns, "rows": rows, "slopes": slopes,
            "problem": problem}


def cmd_study_det(cfg, args):
    out = run_deterministic_study(cfg)
    cfg_h = config_hash(cfg)
    in_h = problem_inputs_hash(out["problem"])
    comments = ["gauge=%s" % cfg.gauge,
                "slope fit drops %d smallest and %d largest t"
                % (SLOPE_DROP_SMALL, SLOPE_DROP_LARGE)]
    comments += ["%s=%s" % (k, repr(v))
                 for k, v in sorted(out["slopes"].items())]
    path = os.path.join(cfg.output_dir, "study_det.csv")
    write_csv(path, out["columns"], out["rows"], cfg_h, in_h,
              comments=comments)
    for k in sorted(out["slopes"]):
        print("%s = %.4f" % (k, out["slopes"][k]))
    print("wrote %s" % path)
    if args.assert_slopes:
        checked = ("slope_lambda_polar", "slope_lambda_svd",
                   "slope_basis_polar", "slope_basis_svd")
        bad = [k for k in checked
               if not _in_band(out["slopes"][k], 1.7, 2.3)]
        if bad:
            print("slope assertion failed (outside [1.7, 2.3]): %s"
                  % ", ".join(bad))
            return 2
    return 0


def run_mc_study(cfg, problem=None):
    """Self-estimated RMSE of the moment estimators across sample sizes.

    Each repetition runs one standard pass at the largest schedule entry
    plus one mirrored half-pass; nested prefixes of the same pass give the
    per-M standard RMSEs, and pairing the shared first half with its
    mirror gives the antithetic mean estimator at equal cost on the same
    draws.
    """
    if problem is None:
        problem = build_from_config(cfg)
    M0 = problem.M0
    schedule = list(cfg.schedule)
    M_max = schedule[-1]

    rows = []
    sing_mins = []
    rejections = []
    for rep in range(cfg.reps):
        mcc = MCConfig(M_max, cfg.alpha, cfg.beta, antithetic=False,
                       master_seed=cfg.master_seed + rep,
                       cluster_target=cfg.target_index)
        lams, bases, sings, kept = run_sample_pass(
            problem, mcc, np.arange(M_max), MU_STREAM, EPS_STREAM,
            "standard", rejections)
        lam_m, bas_m, _, kept_m = run_sample_pass(
            problem, mcc, np.arange(M_max // 2), MU_STREAM, EPS_STREAM,
            "antithetic-", rejections, sign=-1.0)
        if sings.size:
            sing_mins.append(sings.min(axis=1))
        # plus members are the first half of the standard pass; a pair
        # exists when both signs were accepted
        common = np.intersect1d(kept[kept < M_max // 2], kept_m)
        pos_p = np.searchsorted(kept, common)
        pos_m = np.searchsorted(kept_m, common)
        pair_lams = 0.5 * (lams[pos_p] + lam_m[pos_m])
        pair_bases = 0.5 * (bases[pos_p] + bas_m[pos_m])

        for M in schedule:
            sel = kept < M
            if int(sel.sum()) < 2:
                continue
            r_ml, r_cl, r_mb, r_cb = sample_rmses(lams[sel], bases[sel],
                                                  problem)
            psel = common < M // 2
            if int(psel.sum()) >= 2:
                a_ml = mc_rmse(pair_lams[psel])
                a_mb = mc_rmse(pair_bases[psel],
                               norm=lambda w: basis_norm(w, M0))
            else:
                a_ml = a_mb = None
            rows.append([rep, M, r_ml, r_cl, r_mb, r_cb, a_ml, a_mb])

    agg_rows = []
    ratios = []
    series = {k: [] for k in ("rmse_mean_lambda", "rmse_cov_lambda",
                              "rmse_mean_basis", "rmse_cov_basis")}
    agg_ms = []
    for M in schedule:
        sub = [r for r in rows if r[1] == M]
        if not sub:
            continue
        means = [float(np.mean([r[j] for r in sub])) for j in (2, 3, 4, 5)]
        anti_l = [r[6] for r in sub if r[6] is not None]
        anti_b = [r[7] for r in sub if r[7] is not None]
        a_l = float(np.mean(anti_l)) if anti_l else None
        a_b = float(np.mean(anti_b)) if anti_b else None
        ratio = a_l / means[0] if a_l is not None else None
        if ratio is not None:
            ratios.append(ratio)
        agg_ms.append(M)
        for key, val in zip(series, means):
            series[key].append(val)
        agg_rows.append([M] + means + [a_l, a_b, ratio])

    slopes = {"slope_%s" % k: fit_slope(agg_ms, v) for k, v in
              series.items()}
    anti_max_ratio = float(max(ratios)) if ratios else float("nan")

    columns = ["rep", "M", "rmse_mean_lambda", "rmse_cov_lambda",
               "rmse_mean_basis", "rmse_cov_basis",
               "anti_rmse_mean_lambda", "anti_rmse_mean_basis"]
    agg_columns = ["M", "rmse_mean_lambda", "rmse_cov_lambda",
                   "rmse_mean_basis", "rmse_cov_basis",
                   "anti_rmse_mean_lambda", "anti_rmse_mean_basis",
                   "anti_over_standard_mean_lambda"]
    return {"columns": columns, "rows": rows, "agg_columns": agg_columns,
            "agg_rows": agg_rows, "slopes": slopes,
            "anti_max_ratio": anti_max_ratio,
            "histogram": _min_singular_histogram(
                np.concatenate(sing_mins) if sing_mins else []),
            "rejections": len(rejections), "problem": problem}


def cmd_study_mc(cfg, args):
    out = run_mc_study(cfg)
    cfg_h = config_hash(cfg)
    in_h = problem_inputs_hash(out["problem"])
    comments = ["reps=%d" % cfg.reps,
                "anti_max_ratio=%s" % repr(out["anti_max_ratio"])]
    comments += ["%s=%s" % (k, repr(v))
                 for k, v in sorted(out["slopes"].items())]
    path = os.path.join(cfg.output_dir, "study_mc.csv")
    write_csv(path, out["columns"], out["rows"], cfg_h, in_h,
              comments=comments)
    apath = os.path.join(cfg.output_dir, "study_mc_agg.csv")
    write_csv(apath, out["agg_columns"], out["agg_rows"], cfg_h, in_h,
              comments=comments)
    payload = {
        "config": cfg.to_dict(), "config_hash": cfg_h,
        "inputs_hash": in_h, "slopes": out["slopes"],
        "anti_max_ratio": out["anti_max_ratio"],
        "rejections": out["rejections"],
        "min_singular_histogram": out["histogram"],
    }
    write_json(os.path.join(cfg.output_dir, "study_mc.json"), payload)
    for k in sorted(out["slopes"]):
        print("%s = %.4f" % (k, out["slopes"][k]))
    print("anti_max_ratio = %.4f" % out["anti_max_ratio"])
    print("wrote %s and %s" % (path, apath))
    if args.assert_slopes:
        bad = [k for k in ("slope_rmse_mean_lambda",
                           "slope_rmse_cov_lambda")
               if not _in_band(out["slopes"][k], -0.6, -0.4)]
        if not (np.isfinite(out["anti_max_ratio"])
                and out["anti_max_ratio"] <= 1.0):
            bad.append("anti_max_ratio")
        if bad:
            print("slope assertion failed (MC rate or antithetic gain): "
                  "%s" % ", ".join(bad))
            return 2
    return 0


def run_expansion_study(cfg, problem=None):
    """Perturbation predictions against an MC reference along the ray.

    The reference estimator is antithetic with one shared master seed for
    every t (common random numbers), so ray-to-ray differences reflect the
    amplitude, not resampling noise.  Covariance slopes are fitted over
    the rows where the prediction error exceeds three times the
    reference's own RMSE estimate; below that the reference noise
    dominates and the row only documents the floor.
    """
    if problem is None:
        problem = build_from_config(cfg)
    cl = problem.cluster
    m = cl.multiplicity
    U0 = cl.basis
    M0 = problem.M0
    pm = perturb_moments(problem, gauge=cfg.gauge)
    mean_ref = (np.diag(cl.eigenvalues) if cfg.gauge == "aligned"
                else cl.lambda0 * np.eye(m))
    lam0I = cl.lambda0 * np.eye(m)

    rows = []
    for t in cfg.ray():
        cov_l, cov_b = perturb_cov(t, t, pm.cov_joint_mu,
                                   pm.cov_joint_eps, m)
        try:
            est = mc_estimate(MCConfig(cfg.mc_reference, t, t,
                                       antithetic=True,
                                       master_seed=cfg.master_seed,
                                       cluster_target=cfg.target_index),
                              problem)
        except AmplitudeTooLargeError:
            rows.append([t] + [None] * 11 + ["rejected"])
            continue
        err_cl = lambda_norm(est.cov_lambda - cov_l)
        err_cb = cov_factor_distance(est.cov_basis, cov_b, M0, m)
        rows.append([
            t,
            lambda_norm(est.mean_lambda - mean_ref),
            basis_norm(est.mean_basis - U0, M0),
            err_cl,
            err_cb,
            est.rmse_mean_lambda, est.rmse_mean_basis,
            est.rmse_cov_lambda, est.rmse_cov_basis,
            bool(err_cl > 3.0 * est.rmse_cov_lambda),
            bool(err_cb > 3.0 * est.rmse_cov_basis),
            lambda_norm(est.mean_lambda - lam0I),
            "ok",
        ])

    ok = [r for r in rows if r[12] == "ok"]
    ts = [r[0] for r in ok]
    slopes = {
        "slope_mean_lambda": fit_slope(ts, [r[1] for r in ok],
                                       SLOPE_DROP_SMALL,
                                       SLOPE_DROP_LARGE),
        "slope_mean_basis": fit_slope(ts, [r[2] for r in ok],
                                      SLOPE_DROP_SMALL,
                                      SLOPE_DROP_LARGE),
        "slope_mean_lambda_degenerate":
            fit_slope(ts, [r[11] for r in ok], SLOPE_DROP_SMALL,
                      SLOPE_DROP_LARGE),
    }
    qual_l = [r for r in ok if r[9]]
    qual_b = [r for r in ok if r[10]]
    slopes["slope_cov_lambda"] = fit_slope([r[0] for r in qual_l],
                                           [r[3] for r in qual_l])
    slopes["slope_cov_basis"] = fit_slope([r[0] for r in qual_b],
                                          [r[4] for r in qual_b])

    columns = ["t", "err_mean_lambda", "err_mean_basis",
               "err_cov_lambda", "err_cov_basis",
               "noise_mean_lambda", "noise_mean_basis",
               "noise_cov_lambda", "noise_cov_basis",
               "qualifies_cov_lambda", "qualifies_cov_basis",
               "err_mean_lambda_degenerate", "status"]
    return {"columns": columns, "rows": rows, "slopes": slopes,
            "qualifying_lambda": len(qual_l),
            "qualifying_basis": len(qual_b), "problem": problem}


def cmd_study_exp(cfg, args):
    out = run_expansion_study(cfg)
    cfg_h = config_hash(cfg)
    in_h = problem_inputs_hash(out["problem"])
    comments = [
        "gauge=%s reference M=%d antithetic, shared master seed across t"
        % (cfg.gauge, cfg.mc_reference),
        "mean slope fit drops %d smallest and %d largest t; covariance "
        "slopes fit over qualifying rows only"
        % (SLOPE_DROP_SMALL, SLOPE_DROP_LARGE),
        "qualifying rows: lambda=%d basis=%d"
        % (out["qualifying_lambda"], out["qualifying_basis"]),
    ]
    comments += ["%s=%s" % (k, repr(v))
                 for k, v in sorted(out["slopes"].items())]
    path = os.path.join(cfg.output_dir, "study_exp.csv")
    write_csv(path, out["columns"], out["rows"], cfg_h, in_h,
              comments=comments)
    payload = {
        "config": cfg.to_dict(), "config_hash": cfg_h,
        "inputs_hash": in_h, "slopes": out["slopes"],
        "qualifying_lambda": out["qualifying_lambda"],
        "qualifying_basis": out["qualifying_basis"],
    }
    write_json(os.path.join(cfg.output_dir, "study_exp.json"), payload)
    for k in sorted(out["slopes"]):
        print("%s = %.4f" % (k, out["slopes"][k]))
    print("wrote %s" % path)
    if args.assert_slopes:
        bad = [k for k in ("slope_mean_lambda", "slope_mean_basis")
               if not _in_band(out["slopes"][k], 1.7, 2.3)]
        if out["qualifying_lambda"] >= 2:
            if not _in_band(out["slopes"]["slope_cov_lambda"], 3.3, 4.5):
                bad.append("slope_cov_lambda")
        else:
            bad.append("slope_cov_lambda (insufficient qualifying range)")
        if (out["qualifying_basis"] >= 2
                and not _in_band(out["slopes"]["slope_cov_basis"],
                                 3.3, 4.5)):
            bad.append("slope_cov_basis")
        if bad:
            print("slope assertion failed: %s" % ", ".join(bad))
            return 2
    return 0


def cmd_timings(cfg, args):
    t0 = time.perf_counter()
    problem = build_from_config(cfg)
    t1 = time.perf_counter()
    pm = perturb_moments(problem, gauge=cfg.gauge)
    perturb_cov(cfg.alpha, cfg.beta, pm.cov_joint_mu, pm.cov_joint_eps,
                problem.cluster.multiplicity)
    t2 = time.perf_counter()

    mc_times = []
    for M in (max(2, cfg.samples // 4), max(2, cfg.samples // 2),
              cfg.samples):
        s0 = time.perf_counter()
        mc_estimate(MCConfig(M, cfg.alpha, cfg.beta,
                             antithetic=cfg.antithetic,
                             master_seed=cfg.master_seed,
                             cluster_target=cfg.target_index), problem)
        mc_times.append({"samples": M,
                         "seconds": time.perf_counter() - s0})

    payload = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "inputs_hash": problem_inputs_hash(problem),
        "note": "timing fields are machine-dependent and excluded from "
                "any byte-identity guarantee",
        "build_s": t1 - t0,
        "perturb_s": t2 - t1,
        "mc": mc_times,
        "ratio_perturb_to_largest_mc":
            (t2 - t1) / mc_times[-1]["seconds"],
    }
    path = os.path.join(cfg.output_dir, "timings.json")
    write_json(path, payload)
    print("build %.3fs, perturbation %.3fs, MC at M=%d %.3fs "
          "(ratio %.4f)" % (payload["build_s"], payload["perturb_s"],
                            cfg.samples, mc_times[-1]["seconds"],
                            payload["ratio_perturb_to_largest_mc"]))
    print("wrote %s" % path)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

HANDLERS = {
    "mesh": cmd_mesh,
    "kl": cmd_kl,
    "solve-ref": cmd_solve_ref,
    "derivs": cmd_derivs,
    "mc": cmd_mc,
    "perturb": cmd_perturb,
    "study-det": cmd_study_det,
    "study-mc": cmd_study_mc,
    "study-exp": cmd_study_exp,
    "timings": cmd_timings,
}

# config key -> argparse dest for the overridable flags
_FLAG_MAP = {
    "mesh_n": "mesh_n", "kl_tol": "kl_tol",
    "kernel_scale": "kernel_scale", "target_index": "target_index",
    "cluster_gap_tol": "cluster_gap_tol", "alpha": "alpha",
    "beta": "beta", "ray_min_exp": "ray_min_exp",
    "ray_max_exp": "ray_max_exp", "samples": "samples",
    "schedule": "schedule", "reps": "reps",
    "mc_reference": "mc_reference", "master_seed": "seed",
    "gauge": "gauge", "antithetic": "antithetic",
    "output_dir": "output_dir",
}


def _add_common_flags(sp):
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--mesh-n", type=int, dest="mesh_n")
    sp.add_argument("--kl-tol", type=float, dest="kl_tol")
    sp.add_argument("--kernel-scale", type=float, dest="kernel_scale")
    sp.add_argument("--target-index", type=int, dest="target_index")
    sp.add_argument("--cluster-gap-tol", type=float,
                    dest="cluster_gap_tol")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--ray-min-exp", type=int, dest="ray_min_exp")
    sp.add_argument("--ray-max-exp", type=int, dest="ray_max_exp")
    sp.add_argument("--samples", type=int)
    sp.add_argument("--schedule",
                    help="comma-separated sample sizes, e.g. 32,64,128")
    sp.add_argument("--reps", type=int)
    sp.add_argument("--mc-reference", type=int, dest="mc_reference")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--gauge", choices=GAUGES)
    sp.add_argument("--antithetic", action=argparse.BooleanOptionalAction,
                    default=None)
    sp.add_argument("--output-dir", dest="output_dir")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eigenuq",
        description="Eigenvalue and eigenspace uncertainty studies for "
                    "the stochastic diffusion problem on the unit square.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "mesh": "write the triangulation as a node table",
        "kl": "write the KL spectrum of the coefficient fields",
        "solve-ref": "solve and store the unperturbed reference cluster",
        "derivs": "directional eigenpair derivatives for one KL draw",
        "mc": "Monte Carlo moment estimate with nested-prefix errors",
        "perturb": "first-order moment prediction, compared to a stored "
                   "MC reference if present",
        "study-det": "first-order residual decay along the dyadic ray",
        "study-mc": "estimator RMSE decay across the sample schedule",
        "study-exp": "perturbation predictions vs an MC reference along "
                     "the ray",
        "timings": "wall-clock per pipeline phase",
    }
    for name, handler in HANDLERS.items():
        sp = sub.add_parser(name, help=helps[name])
        _add_common_flags(sp)
        if name.startswith("study-"):
            sp.add_argument("--assert", dest="assert_slopes",
                            action="store_true",
                            help="exit 2 when a fitted slope leaves its "
                                 "expected band")
        if name == "perturb":
            sp.add_argument("--mc-reference-file", dest="mc_reference_file",
                            help="mc_moments.json to compare against "
                                 "(default: output dir)")
    return parser


def resolve_config(args):
    merged = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a JSON object")
        merged.update(file_cfg)
    for key, dest in _FLAG_MAP.items():
        val = getattr(args, dest, None)
        if val is not None:
            merged[key] = val
    if isinstance(merged.get("schedule"), str):
        merged["schedule"] = [int(tok)
                              for tok in merged["schedule"].split(",")
                              if tok.strip()]
    return ExperimentConfig(**merged)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 1
    os.makedirs(cfg.output_dir, exist_ok=True)
    try:
        return HANDLERS[args.command](cfg, args)
    except AmplitudeTooLargeError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
