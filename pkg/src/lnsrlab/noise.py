"""Gaussian perturbation sampling and relative-magnitude rescaling.

A perturbation is described by a :class:`NoiseSpec`: its mode (isotropic
Gaussian, manifold-constrained, or none), the raw standard deviation of the
draw, an optional relative magnitude that rescales the draw against the
vector it perturbs, and the layer whose input receives it.

Rescaling comes in two flavors.  The default makes the perturbation norm an
exact fraction of the perturbed vector's norm, ``|eps'| = rho * |x|``.  The
alternative ``literal_formula`` flag multiplies by ``rho * |x|^2 / |eps|^2``
instead; it is kept selectable because the two disagree (the latter is not
even idempotent) and comparing them is part of the lab's purpose.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ValidationError
from .tensor import Tensor

NOISE_MODES = ("standard", "in_manifold", "none")
DEFAULT_REL_MAGNITUDE = 0.05


@dataclass
class NoiseSpec:
    """Description of one perturbation policy.

    When ``rel_magnitude`` is None the raw ``sigma`` scale is used as-is;
    when set, draws are rescaled so their norm is ``rel_magnitude`` times
    the norm of the vector being perturbed (per token row in pipelines).
    Exactly one of the two conventions is therefore active at a time.
    """

    mode: str = "standard"
    sigma: float = 1.0
    rel_magnitude: float | None = DEFAULT_REL_MAGNITUDE
    injection_layer: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValidationError(f"NoiseSpec.mode: {self.mode!r} not in {NOISE_MODES}")
        if not self.sigma > 0:
            raise ValidationError(f"NoiseSpec.sigma: must be positive, got {self.sigma}")
        if self.rel_magnitude is not None and not self.rel_magnitude > 0:
            raise ValidationError(
                f"NoiseSpec.rel_magnitude: must be positive or None, got {self.rel_magnitude}"
            )
        if self.injection_layer < 1:
            raise ValidationError(
                f"NoiseSpec.injection_layer: must be >= 1, got {self.injection_layer}"
            )
        if self.seed < 0:
            raise ValidationError(f"NoiseSpec.seed: must be nonnegative, got {self.seed}")


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def sample_standard_noise(shape, sigma: float, rng: np.random.Generator) -> Tensor:
    """I.i.d. draws from N(0, sigma^2) with the given shape."""
    if not sigma > 0:
        raise ContractError(f"sample_standard_noise: sigma must be positive, got {sigma}")
    return Tensor(rng.normal(0.0, sigma, size=shape))


def rescale_relative(noise, x, rho: float, literal_formula: bool = False) -> Tensor:
    """Rescale ``noise`` against ``x`` treating each as one flat vector.

    Default: multiply by ``rho*|x|/|noise|`` so the result's L2 norm is
    exactly ``rho*|x|``.  With ``literal_formula`` the multiplier is
    ``rho*|x|^2/|noise|^2``.  ``x`` of zero norm yields zero noise; noise of
    zero norm cannot be rescaled and is a contract error.
    """
    nd = _as_array(noise)
    xd = _as_array(x)
    if nd.shape != xd.shape:
        raise ContractError(f"rescale_relative: shapes {nd.shape} and {xd.shape} differ")
    if not rho >= 0:
        raise ContractError(f"rescale_relative: rho must be nonnegative, got {rho}")
    xnorm = float(np.linalg.norm(xd))
    if xnorm == 0.0:
        return Tensor(np.zeros_like(nd))
    nnorm = float(np.linalg.norm(nd))
    if nnorm == 0.0:
        raise ContractError("rescale_relative: zero-norm noise cannot be rescaled")
    if literal_formula:
        eta = rho * xnorm * xnorm / (nnorm * nnorm)
    else:
        eta = rho * xnorm / nnorm
    return Tensor(nd * eta)


def rescale_relative_rows(noise, x, rho: float, literal_formula: bool = False) -> Tensor:
    """Row-wise relative rescaling of [n, d] matrices (per-token convention).

    Each row of the result has norm ``rho`` times the corresponding row of
    ``x``; zero rows of ``x`` map to zero rows of noise.
    """
    nd = _as_array(noise)
    xd = _as_array(x)
    if nd.shape != xd.shape or nd.ndim != 2:
        raise ContractError(
            f"rescale_relative_rows: need matching 2-d shapes, got {nd.shape} and {xd.shape}"
        )
    if not rho >= 0:
        raise ContractError(f"rescale_relative_rows: rho must be nonnegative, got {rho}")
    xnorms = np.linalg.norm(xd, axis=1)
    nnorms = np.linalg.norm(nd, axis=1)
    live = xnorms > 0.0
    if np.any(live & (nnorms == 0.0)):
        raise ContractError("rescale_relative_rows: zero-norm noise row against nonzero x row")
    eta = np.zeros_like(xnorms)
    if literal_formula:
        eta[live] = rho * xnorms[live] ** 2 / nnorms[live] ** 2
    else:
        eta[live] = rho * xnorms[live] / nnorms[live]
    return Tensor(nd * eta[:, None])
