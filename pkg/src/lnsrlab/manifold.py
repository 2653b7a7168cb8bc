"""Neighborhood geometry: exact kNN, orthonormal bases, in-manifold noise.

The in-manifold perturbation of a vector x is built from its k nearest
neighbors in a reference point set (the token-embedding vocabulary in
training, a synthetic manifold sample in diagnostics): the neighbor
differences are orthonormalized by modified Gram-Schmidt and a random
linear combination with i.i.d. N(0, sigma^2) coefficients is returned.
The result lies in the local tangent-ish subspace by construction.

A locally-linear-embedding residual (how well x is reconstructed as a
linear combination of its neighbors) serves as the flatness diagnostic.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_K = 10
# A direction whose residual after projection drops below this fraction of
# its original norm is linearly dependent on the basis so far and is dropped.
GS_DROP_RATIO = 1e-8

KNN_MAGIC = "KNN1"


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class NeighborIndex:
    """Immutable brute-force index over N points in R^d (squared Euclidean)."""

    vectors: np.ndarray
    n: int = field(init=False)
    d: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n", self.vectors.shape[0])
        object.__setattr__(self, "d", self.vectors.shape[1])


@dataclass(frozen=True)
class OrthoBasis:
    """Orthonormal direction set spanning a local neighborhood around origin."""

    basis: np.ndarray  # [m, d], rows unit length, pairwise orthogonal
    origin: np.ndarray  # [d]
    source_count: int  # neighbor differences fed in before dropping

    @property
    def size(self) -> int:
        return self.basis.shape[0]


def build_index(vectors) -> NeighborIndex:
    """Snapshot a [N, d] point set into an immutable exact-search index."""
    arr = np.array(_as_array(vectors), dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"build_index: expected [N, d] matrix, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ContractError(f"build_index: need at least 2 points, got {arr.shape[0]}")
    arr.setflags(write=False)
    return NeighborIndex(vectors=arr)


def knn(index: NeighborIndex, query, k: int, exclude_exact_match: bool = True):
    """The k nearest stored points, as (vector, squared distance) pairs.

    Sorted by ascending distance with ties broken by lower row index.  With
    ``exclude_exact_match`` every stored row bitwise-equal to the query is
    removed before selection.
    """
    q = _as_array(query).reshape(-1)
    if q.shape[0] != index.d:
        raise ShapeError(f"knn: query length {q.shape[0]} vs index dimension {index.d}")
    if k < 1:
        raise ContractError(f"knn: k must be >= 1, got {k}")
    diffs = index.vectors - q[None, :]
    d2 = (diffs * diffs).sum(axis=1)
    if exclude_exact_match:
        keep = ~np.all(index.vectors == q[None, :], axis=1)
    else:
        keep = np.ones(index.n, dtype=bool)
    candidates = np.flatnonzero(keep)
    if k > candidates.shape[0]:
        raise ContractError(
            f"knn: k={k} exceeds the {candidates.shape[0]} available points"
            f" (N={index.n}, exclude_exact_match={exclude_exact_match})"
        )
    order = candidates[np.argsort(d2[candidates], kind="stable")]
    chosen = order[:k]
    return [(index.vectors[i].copy(), float(d2[i])) for i in chosen]


def gram_schmidt(diffs, origin=None) -> OrthoBasis:
    """Orthonormalize difference vectors by modified Gram-Schmidt.

    Directions that become (numerically) dependent on the basis built so
    far are dropped.  All-zero input is a degenerate neighborhood and a
    contract error; callers that need a fallback catch it.
    """
    mat = np.atleast_2d(np.array(_as_array(diffs), dtype=np.float64))
    if mat.size == 0:
        raise ContractError("gram_schmidt: no difference vectors given")
    d = mat.shape[1]
    kept = []
    for row in mat:
        original = float(np.linalg.norm(row))
        if original == 0.0:
            continue
        v = row.copy()
        for b in kept:
            v -= (v @ b) * b
        # Second sweep tightens orthogonality lost to cancellation.
        for b in kept:
            v -= (v @ b) * b
        residual = float(np.linalg.norm(v))
        if residual < GS_DROP_RATIO * original:
            continue
        kept.append(v / residual)
    if not kept:
        raise ContractError("gram_schmidt: degenerate neighborhood, all differences zero")
    if origin is None:
        origin = np.zeros(d)
    return OrthoBasis(
        basis=np.array(kept), origin=np.array(_as_array(origin), dtype=np.float64),
        source_count=mat.shape[0],
    )


def sample_inmanifold_noise(x, basis: OrthoBasis, sigma: float,
                            rng: np.random.Generator, mix_ratio: float | None = None) -> Tensor:
    """Random element of span(basis): sum of N(0, sigma^2) coefficients times
    the basis directions.  With ``mix_ratio`` the result is rescaled so its
    norm is ``mix_ratio`` times the norm of ``x``.
    """
    if basis.size == 0:
        raise ContractError("sample_inmanifold_noise: empty basis")
    if not sigma > 0:
        raise ContractError(f"sample_inmanifold_noise: sigma must be positive, got {sigma}")
    xd = _as_array(x).reshape(-1)
    if xd.shape[0] != basis.basis.shape[1]:
        raise ShapeError(
            f"sample_inmanifold_noise: x length {xd.shape[0]} vs basis dimension {basis.basis.shape[1]}"
        )
    coeffs = rng.normal(0.0, sigma, size=basis.size)
    eps = coeffs @ basis.basis
    if mix_ratio is not None:
        if not mix_ratio >= 0:
            raise ContractError(f"sample_inmanifold_noise: mix_ratio must be nonnegative, got {mix_ratio}")
        xnorm = float(np.linalg.norm(xd))
        enorm = float(np.linalg.norm(eps))
        if xnorm == 0.0 or enorm == 0.0:
            return Tensor(np.zeros_like(eps))
        eps = eps * (mix_ratio * xnorm / enorm)
    return Tensor(eps)


def neighborhood_basis(index: NeighborIndex, query, k: int = DEFAULT_K) -> OrthoBasis | None:
    """kNN differences around ``query`` orthonormalized; None when degenerate.

    Degenerate means fewer than k distinct neighbors remain after excluding
    exact matches, or every difference vanishes.  Callers substitute
    standard Gaussian noise in that case (the documented fallback).
    """
    q = _as_array(query).reshape(-1)
    try:
        pairs = knn(index, q, k, exclude_exact_match=True)
        diffs = np.array([vec - q for vec, _ in pairs])
        return gram_schmidt(diffs, origin=q)
    except ContractError as exc:
        log.warning("degenerate neighborhood (%s); falling back to standard noise", exc)
        return None


def lle_reconstruction_error(x, neighbors) -> float:
    """Least-squares residual of reconstructing x from its neighbors.

    Minimizes |x - sum_j w_j x_j|^2 over unconstrained weights and returns
    the minimum (squared norm of the residual).
    """
    xd = _as_array(x).reshape(-1)
    nb = np.atleast_2d(_as_array(neighbors))
    if nb.size == 0:
        raise ContractError("lle_reconstruction_error: need at least one neighbor")
    if nb.shape[1] != xd.shape[0]:
        raise ShapeError(
            f"lle_reconstruction_error: neighbor dimension {nb.shape[1]} vs x {xd.shape[0]}"
        )
    w, _, _, _ = np.linalg.lstsq(nb.T, xd, rcond=None)
    resid = xd - nb.T @ w
    return float(resid @ resid)


def save_index(index: NeighborIndex, path):
    """Snapshot: header line "KNN1", a line "N d", then row-major float64 LE."""
    with open(path, "wb") as fh:
        fh.write(f"{KNN_MAGIC}\n{index.n} {index.d}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f8").tobytes())


def load_index(path) -> NeighborIndex:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").strip()
        if magic != KNN_MAGIC:
            raise ContractError(f"load_index: bad magic {magic!r}, expected {KNN_MAGIC!r}")
        try:
            n, d = (int(tok) for tok in fh.readline().decode("ascii").split())
        except ValueError as exc:
            raise ContractError(f"load_index: malformed size line in {path}") from exc
        payload = fh.read()
    expect = n * d * 8
    if len(payload) != expect:
        raise ContractError(f"load_index: expected {expect} payload bytes, found {len(payload)}")
    vectors = np.frombuffer(payload, dtype="<f8").reshape(n, d)
    return build_index(vectors)


def project_coefficients(basis: OrthoBasis, samples) -> np.ndarray:
    """Coordinates of sample rows in the basis (for coefficient-Gaussianity checks)."""
    return _as_array(samples) @ basis.basis.T
