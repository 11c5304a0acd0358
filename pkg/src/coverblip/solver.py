"""Iterative projected gradient solvers over the fingerprint cone.

Three modes share one loop: `tm` (a single matched-filtering iteration),
`blip_exact` (exact brute-force projections) and `coverblip` (tree-based
approximate projections with warm starts).  The step size shrinks by a
factor zeta until mu_k <= ||dX||^2 / ||A(dX)||^2, each shrink redoing the
gradient update and projection without advancing the iteration counter.
After the first accepted iteration the estimate and step size are
rescaled by the measurement energy ratio ||Y|| / ||A(X^1)||, kept only
when it does not worsen the data fidelity.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .forward_model import estimate_bilipschitz, estimate_spectral_norm
from .projection import project_cone_ann, project_cone_exact

__all__ = [
    "ConvergenceCertificate",
    "ParameterMaps",
    "SolveTrace",
    "SolverConfig",
    "SolverError",
    "certificate",
    "solve",
    "solve_compressed",
    "step_shrinkage",
]

_MODES = ("tm", "blip_exact", "coverblip")


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    mode: str = "coverblip"
    epsilon: float = 0.0
    mu_init: float | None = None          # default n/m, resolved at solve
    zeta: float = 2.0
    max_iters: int = 50
    rel_tol: float = 1e-6
    max_shrink_per_iter: int = 60
    compressed: int | None = None
    step_policy: str = "reset_each_iter"  # or carry_over
    fixed_step: float | None = None       # disables shrinkage
    weights_enabled: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.zeta <= 1:
            raise ValueError("zeta must exceed 1")
        if self.step_policy not in ("reset_each_iter", "carry_over"):
            raise ValueError(f"unknown step policy {self.step_policy!r}")


@dataclass
class SolveTrace:
    records: list = field(default_factory=list)
    iterations: int = 0
    total_cost: int = 0
    total_time: float = 0.0

    def add(self, **rec):
        self.records.append(rec)
        self.iterations = len(self.records)
        self.total_cost += rec.get("cost", 0)

    def fidelities(self):
        return [r["fidelity"] for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "fidelity", "mu", "shrinks", "cost", "nmse",
                        "seconds"])
            for r in self.records:
                w.writerow([r["iter"], repr(r["fidelity"]), repr(r["mu"]),
                            r["shrinks"], r["cost"],
                            "" if r["nmse"] is None else repr(r["nmse"]),
                            repr(r["seconds"])])


@dataclass
class ParameterMaps:
    t1: np.ndarray
    t2: np.ndarray
    b0: np.ndarray
    pd: np.ndarray


@dataclass
class ConvergenceCertificate:
    alpha_hat: float
    beta_hat: float
    spectral_norm: float
    delta: float
    rho: float
    kappa_w: float
    condition_ok: bool
    note: str = ""


def step_shrinkage(X, G, mu0, project_fn, apply_diff, zeta,
                   max_shrink, fixed=False):
    """Shrink mu until accepted; returns (mu, projection, shrinks, fixed_pt).

    Acceptance requires mu <= ||dX||^2 / ||A(dX)||^2; a vanishing
    denominator with dX != 0 counts as satisfied (ratio infinite).  When
    the projection returns X itself the iteration is a fixed point and no
    criterion applies.
    """
    mu = mu0
    shrinks = 0
    while True:
        proj = project_fn(X - mu * G)
        dX = proj.projected - X
        nd = float(np.linalg.norm(dX) ** 2)
        if nd == 0.0:
            return mu, proj, shrinks, True
        if fixed:
            return mu, proj, shrinks, False
        den = float(np.linalg.norm(apply_diff(dX)) ** 2)
        ratio = np.inf if den == 0.0 else nd / den
        if mu <= ratio:
            return mu, proj, shrinks, False
        mu /= zeta
        shrinks += 1
        if shrinks > max_shrink:
            raise SolverError(
                "step-size collapse: shrinkage exceeded "
                f"{max_shrink} sub-iterations")


def _maps_from(dictionary, indices, gammas, spatial=None) -> ParameterMaps:
    table = (dictionary.parent.lookup_table
             if hasattr(dictionary, "parent") else dictionary.lookup_table)
    rows = table[indices]
    return ParameterMaps(t1=rows[:, 0].copy(), t2=rows[:, 1].copy(),
                         b0=rows[:, 2].copy(), pd=gammas.copy())


def _solve_core(Y, A, dictionary, tree, config, gt, compress, decompress,
                dim):
    Y = np.asarray(Y, dtype=complex)
    n = A.n
    if config.weights_enabled:
        if A.weights is None:
            raise SolverError("weights enabled but operator carries none")
        w = np.broadcast_to(A.weights, Y.shape)
    else:
        w = None

    if config.mode == "coverblip":
        if tree is None:
            raise SolverError("coverblip mode needs a tree")

        def project_fn(Z, prev):
            return project_cone_ann(Z, tree, dictionary, config.epsilon,
                                    prev=prev)
    else:
        def project_fn(Z, prev):
            return project_cone_exact(Z, dictionary)

    def apply_diff(dX):
        return A.apply(decompress(dX))

    def objective(X):
        R = A.apply(decompress(X)) - Y
        if w is not None:
            return float(np.sum(w * np.abs(R) ** 2))
        return float(np.linalg.norm(R) ** 2)

    def gradient(X):
        R = A.apply(decompress(X)) - Y
        if w is not None:
            R = w * R
        return compress(A.adjoint(R))

    if config.fixed_step is not None:
        mu_base = config.fixed_step
    elif config.mu_init is not None:
        mu_base = config.mu_init
    else:
        mu_base = n / A.m

    X = np.zeros((n, dim), dtype=complex)
    prev_proj = None
    obj = objective(X)
    trace = SolveTrace()
    max_iters = 1 if config.mode == "tm" else config.max_iters
    start = time.perf_counter()

    gammas = np.zeros(n)
    indices = np.zeros(n, dtype=np.int64)
    for k in range(1, max_iters + 1):
        t0 = time.perf_counter()
        G = gradient(X)
        mu_k, proj, shrinks, fixed_pt = step_shrinkage(
            X, G, mu_base, lambda Z: project_fn(Z, prev_proj), apply_diff,
            config.zeta, config.max_shrink_per_iter,
            fixed=config.fixed_step is not None)
        if fixed_pt:
            break
        X = proj.projected
        gammas, indices = proj.gammas, proj.indices

        if k == 1 and config.fixed_step is None:
            # energy rescale, kept only when it does not hurt fidelity
            e = float(np.linalg.norm(A.apply(decompress(X))))
            if e > 0.0:
                kappa = float(np.linalg.norm(Y)) / e
                if objective(kappa * X) <= objective(X):
                    X = kappa * X
                    gammas = kappa * gammas
                    proj.projected = X
                    proj.gammas = gammas
                    mu_base *= kappa
        elif config.step_policy == "carry_over":
            mu_base = mu_k

        prev_proj = proj
        new_obj = objective(X)
        if not np.isfinite(new_obj):
            raise SolverError(
                f"non-finite fidelity at iteration {k}: {new_obj}")
        nmse = None
        if gt is not None:
            gt_data = gt.data if hasattr(gt, "data") else gt
            nmse = float(np.linalg.norm(decompress(X) - gt_data)
                         / np.linalg.norm(gt_data))
        trace.add(iter=k, fidelity=float(np.sqrt(new_obj)), mu=mu_k,
                  shrinks=shrinks, cost=proj.cost, nmse=nmse,
                  seconds=time.perf_counter() - t0)
        if obj > 0.0 and (obj - new_obj) / obj < config.rel_tol:
            obj = new_obj
            break
        obj = new_obj
        if obj == 0.0:
            break

    trace.total_time = time.perf_counter() - start
    maps = _maps_from(dictionary, indices, gammas)
    out = decompress(X)
    return out, maps, gammas, trace


def solve(Y, A, dictionary, tree, config: SolverConfig, gt=None):
    """Run the configured solver; returns (image, maps, gammas, trace)."""
    if config.compressed is not None:
        raise SolverError("use solve_compressed for compressed configs")
    dim = dictionary.atoms.shape[1]
    return _solve_core(Y, A, dictionary, tree, config, gt,
                       compress=lambda X: X, decompress=lambda X: X, dim=dim)


def solve_compressed(Y, A, cdict, tree_s, config: SolverConfig, gt=None):
    """Solve with iterates and searches in the s-dimensional subspace."""
    if config.compressed != cdict.s:
        raise SolverError("config.compressed does not match dictionary rank")
    return _solve_core(Y, A, cdict, tree_s, config, gt,
                       compress=cdict.compress, decompress=cdict.decompress,
                       dim=cdict.s)


def certificate(A, dictionary, epsilon: float, zeta: float,
                n_pairs: int = 200, seed: int = 0,
                alpha_beta=None) -> ConvergenceCertificate:
    """Contraction certificate from estimated embedding constants.

    alpha_beta overrides the Monte-Carlo estimate when the operator's
    bi-Lipschitz constants are known exactly (identity, unitary DFT).
    """
    if alpha_beta is not None:
        alpha, beta = alpha_beta
    else:
        alpha, beta = estimate_bilipschitz(A, dictionary, n_pairs, seed=seed)
    spec = estimate_spectral_norm(A, seed=seed)
    if alpha <= 0:
        return ConvergenceCertificate(
            alpha_hat=alpha, beta_hat=beta, spectral_norm=spec,
            delta=np.inf, rho=np.inf, kappa_w=np.inf, condition_ok=False,
            note="no embedding evidence")
    phi = np.sqrt(2.0 * epsilon + epsilon ** 2)
    delta = phi * spec / np.sqrt(alpha)
    rho = np.sqrt(max(zeta * beta / alpha - 1.0, 0.0)) + delta
    kappa_w = 2.0 * np.sqrt(beta) / alpha + delta / np.sqrt(alpha)
    condition_ok = zeta * beta < (2.0 - 2.0 * delta + delta ** 2) * alpha
    return ConvergenceCertificate(
        alpha_hat=float(alpha), beta_hat=float(beta),
        spectral_norm=float(spec), delta=float(delta), rho=float(rho),
        kappa_w=float(kappa_w), condition_ok=bool(condition_ok))
