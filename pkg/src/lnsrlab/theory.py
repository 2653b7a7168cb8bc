"""Numerical oracles for the noise-stability Taylor analysis.

For a smooth scalar function f and isotropic Gaussian noise eps with
per-coordinate variance sigma^2, the expected squared deviation
E[(f(x+eps)-f(x))^2] decomposes (to second order) into a Jacobian term, a
Hessian term, and a cross term that vanishes by odd-moment symmetry.  This
module computes each side independently: closed-form expressions from
finite-difference derivatives on one side, Monte-Carlo estimation on the
other, so each can falsify the other.

Two Hessian-term variants are emitted side by side.  ``r_h_paper`` is the
closed form sigma^4/4*(Tr(H)^2 + |offdiag(H)|_F^2), which counts only the
off-diagonal Frobenius mass.  ``r_h_exact`` is the full Gaussian
fourth-moment value sigma^4/4*(Tr(H)^2 + 2|H|_F^2); it differs whenever H
is nonzero because E[eps_i^4] = 3 sigma^4 contributes diagonal mass the
first form drops.  Both are first-class outputs; the Monte-Carlo estimate
adjudicates between them.  ``claim14_value`` is the combined approximation
sigma^2/4*(4|J|^2 + Tr(H)^2 + |offdiag(H)|_F^2), prefactor kept as stated
even though it folds a sigma^2 mismatch into the Hessian part.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

FD_JACOBIAN_H = 1e-5
# Second differences lose precision faster, so the Hessian step is coarser.
FD_HESSIAN_H = 1e-3

TAYLOR_CSV_COLUMNS = ("sigma", "mc_estimate", "mc_se", "r_j", "r_h_paper",
                      "r_h_exact", "r_jh_mc", "claim14_value")


@dataclass
class TaylorReport:
    sigma: float
    mc_estimate: float
    mc_se: float
    r_j: float
    r_h_paper: float
    r_h_exact: float
    r_jh_mc: float
    claim14_value: float
    r_jh_se: float = 0.0

    def csv_row(self):
        return [getattr(self, c) for c in TAYLOR_CSV_COLUMNS]


def _eval_scalar(f, x) -> float:
    v = float(f(np.asarray(x, dtype=np.float64)))
    if not np.isfinite(v):
        raise ContractError(f"function value is not finite at {x}")
    return v


def fd_jacobian(f, x, h: float = FD_JACOBIAN_H) -> np.ndarray:
    """Gradient of scalar f by central differences, one coordinate at a time."""
    if not h > 0:
        raise ContractError(f"fd_jacobian: h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    g = np.zeros_like(x)
    for i in range(x.shape[0]):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (_eval_scalar(f, xp) - _eval_scalar(f, xm)) / (2.0 * h)
    return g


def fd_hessian(f, x, h: float = FD_HESSIAN_H) -> np.ndarray:
    """Hessian of scalar f by central second differences, symmetrized."""
    if not h > 0:
        raise ContractError(f"fd_hessian: h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.shape[0]
    hess = np.zeros((d, d))
    f0 = _eval_scalar(f, x)
    for i in range(d):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        hess[i, i] = (_eval_scalar(f, xp) - 2.0 * f0 + _eval_scalar(f, xm)) / (h * h)
    for i in range(d):
        for j in range(i + 1, d):
            xpp = x.copy(); xpp[i] += h; xpp[j] += h
            xpm = x.copy(); xpm[i] += h; xpm[j] -= h
            xmp = x.copy(); xmp[i] -= h; xmp[j] += h
            xmm = x.copy(); xmm[i] -= h; xmm[j] -= h
            val = (_eval_scalar(f, xpp) - _eval_scalar(f, xpm)
                   - _eval_scalar(f, xmp) + _eval_scalar(f, xmm)) / (4.0 * h * h)
            hess[i, j] = hess[j, i] = val
    return 0.5 * (hess + hess.T)


def mc_noise_stability(f, x, sigma: float, n: int, rng: np.random.Generator,
                       f_batch=None):
    """Monte-Carlo estimate of E[(f(x+eps)-f(x))^2], eps ~ N(0, sigma^2 I).

    Returns (estimate, standard error).  ``f_batch``, when given, maps an
    [n, d] matrix of points to n values and replaces the per-sample loop.
    """
    if n < 1000:
        raise ContractError(f"mc_noise_stability: need n >= 1000, got {n}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    f0 = _eval_scalar(f, x)
    eps = rng.normal(0.0, sigma, size=(n, x.shape[0]))
    if f_batch is not None:
        vals = np.asarray(f_batch(x[None, :] + eps), dtype=np.float64).reshape(-1)
        if vals.shape[0] != n:
            raise ContractError(f"f_batch returned {vals.shape[0]} values for {n} points")
    else:
        vals = np.array([_eval_scalar(f, x + e) for e in eps])
    sq = (vals - f0) ** 2
    est = float(sq.mean())
    se = float(sq.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return est, se


def _check_symmetric(h: np.ndarray):
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ContractError(f"H must be square, got shape {h.shape}")
    scale = max(float(np.abs(h).max()), 1.0)
    if np.abs(h - h.T).max() > 1e-8 * scale:
        raise ContractError("H must be symmetric within 1e-8")


def taylor_terms(j, h, sigma: float) -> dict:
    """Closed-form Taylor-decomposition terms for gradient j and Hessian h.

    r_j:            sigma^2 |j|^2
    r_h_paper:      sigma^4/4 (Tr(h)^2 + |offdiag(h)|_F^2)   (off-diagonal only)
    r_h_exact:      sigma^4/4 (Tr(h)^2 + 2 |h|_F^2)          (exact moments)
    claim14_value:  sigma^2/4 (4|j|^2 + Tr(h)^2 + |offdiag(h)|_F^2)
    """
    j = np.asarray(j, dtype=np.float64).reshape(-1)
    h = np.asarray(h, dtype=np.float64)
    _check_symmetric(h)
    if h.shape[0] != j.shape[0]:
        raise ContractError(f"J length {j.shape[0]} vs H shape {h.shape}")
    s2 = sigma * sigma
    s4 = s2 * s2
    jn2 = float(j @ j)
    tr = float(np.trace(h))
    fro2 = float((h * h).sum())
    offdiag2 = fro2 - float((np.diag(h) ** 2).sum())
    return {
        "r_j": s2 * jn2,
        "r_h_paper": 0.25 * s4 * (tr * tr + offdiag2),
        "r_h_exact": 0.25 * s4 * (tr * tr + 2.0 * fro2),
        "claim14_value": 0.25 * s2 * (4.0 * jn2 + tr * tr + offdiag2),
    }


def cross_term_mc(j, h, sigma: float, n: int, rng: np.random.Generator):
    """Monte-Carlo mean of (J.eps)(eps^T H eps / 2); zero by odd moments.

    Returns (mean, standard error).
    """
    if n < 1000:
        raise ContractError(f"cross_term_mc: need n >= 1000, got {n}")
    j = np.asarray(j, dtype=np.float64).reshape(-1)
    h = np.asarray(h, dtype=np.float64)
    _check_symmetric(h)
    if sigma == 0.0:
        return 0.0, 0.0
    eps = rng.normal(0.0, sigma, size=(n, j.shape[0]))
    lin = eps @ j
    quad = 0.5 * ((eps @ h) * eps).sum(axis=1)
    prod = lin * quad
    return float(prod.mean()), float(prod.std(ddof=1) / np.sqrt(n))


def spectral_norm_estimate(jvp, jtvp, dim: int, iters: int = 100,
                           v0=None, return_history: bool = False):
    """Operator norm of a linear map given matrix-free J and J^T products.

    Power iteration on J^T J; the Rayleigh iterates are monotone
    nondecreasing and the square root of the last is returned.  A zero map
    yields exactly 0.
    """
    if iters < 10:
        raise ContractError(f"spectral_norm_estimate: need iters >= 10, got {iters}")
    if v0 is None:
        v = np.ones(dim) / np.sqrt(dim)
    else:
        v = np.asarray(v0, dtype=np.float64).reshape(-1)
        if v.shape[0] != dim:
            raise ContractError(f"v0 length {v.shape[0]} vs dim {dim}")
        nv = np.linalg.norm(v)
        if nv == 0.0:
            raise ContractError("spectral_norm_estimate: zero start vector")
        v = v / nv
    history = []
    est2 = 0.0
    for _ in range(iters):
        jv = np.asarray(jvp(v), dtype=np.float64).reshape(-1)
        est2 = float(jv @ jv)  # v is unit: Rayleigh quotient of J^T J
        history.append(est2)
        w = np.asarray(jtvp(jv), dtype=np.float64).reshape(-1)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
        if len(history) >= 2 and abs(history[-1] - history[-2]) \
                <= 1e-14 * max(history[-1], 1.0):
            break
    result = float(np.sqrt(max(est2, 0.0)))
    if return_history:
        return result, history
    return result


def random_smooth_map(dim: int, rng: np.random.Generator, width: int | None = None):
    """A random C^inf scalar map f(x) = a . tanh(W x + c), plus batch form.

    Used as a generic nonlinear test subject for the expansion checks:
    its Jacobian and Hessian are dense and nontrivial, and tanh keeps all
    derivatives bounded so finite differences stay well conditioned.
    Returns ``(f, f_batch)`` where ``f_batch`` maps [n, dim] -> [n].
    """
    if dim < 1:
        raise ContractError(f"random_smooth_map: dim must be >= 1, got {dim}")
    m = 2 * dim if width is None else int(width)
    if m < 1:
        raise ContractError(f"random_smooth_map: width must be >= 1, got {m}")
    w = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(m, dim))
    c = rng.normal(0.0, 0.5, size=m)
    a = rng.normal(0.0, 1.0, size=m)

    def f(x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return float(a @ np.tanh(w @ x + c))

    def f_batch(xs):
        xs = np.asarray(xs, dtype=np.float64)
        return np.tanh(xs @ w.T + c) @ a

    return f, f_batch


def make_taylor_report(f, x, sigma: float, n: int, rng: np.random.Generator,
                       f_batch=None, h_jac: float = FD_JACOBIAN_H,
                       h_hess: float = FD_HESSIAN_H) -> TaylorReport:
    """Full report at one sigma: finite-difference terms plus MC estimates."""
    j = fd_jacobian(f, x, h=h_jac)
    h = fd_hessian(f, x, h=h_hess)
    terms = taylor_terms(j, h, sigma)
    est, se = mc_noise_stability(f, x, sigma, n, rng, f_batch=f_batch)
    cross, cross_se = cross_term_mc(j, h, sigma, n, rng)
    return TaylorReport(sigma=sigma, mc_estimate=est, mc_se=se,
                        r_j=terms["r_j"], r_h_paper=terms["r_h_paper"],
                        r_h_exact=terms["r_h_exact"], r_jh_mc=cross,
                        claim14_value=terms["claim14_value"], r_jh_se=cross_se)


def write_taylor_csv(reports, path):
    """Emit reports with the fixed column set, floats at full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TAYLOR_CSV_COLUMNS)
        for rep in reports:
            writer.writerow([repr(float(v)) for v in rep.csv_row()])
