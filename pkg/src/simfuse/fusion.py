"""Binary multi-atlas label fusion.

Three fusers over co-registered binary maps: plain majority voting,
STAPLE-style EM that estimates per-rater sensitivity/specificity, and a
locally weighted EM variant where each atlas vote is tempered per voxel
by a log-opinion-pool exponent derived from patch intensity similarity
to the target image. All probability products run in log space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .errors import ShapeError
from .grid import LabelMap, Volume

log = logging.getLogger(__name__)

PARAM_FLOOR = 1e-6  # keep p, q away from the absorbing states 0 and 1


@dataclass(frozen=True)
class RaterPerformance:
    """Estimated sensitivity/specificity of one contributing atlas."""

    sensitivity: float
    specificity: float


@dataclass(frozen=True)
class FusionConfig:
    """Knobs shared by the EM fusers; sigma None means auto from patch SSDs."""

    radius: int = 1
    sigma: float | None = None
    max_iters: int = 100
    tol: float = 1e-6
    prior: float | None = None


@dataclass(frozen=True)
class FusionResult:
    """Per-voxel foreground posterior plus the fitted rater parameters."""

    posterior: np.ndarray
    hard_labels: LabelMap
    raters: tuple[RaterPerformance, ...]
    iterations: int
    converged: bool
    degenerate: bool = False
    log_likelihoods: tuple[float, ...] = ()


@dataclass(frozen=True)
class WeightField:
    """Per-atlas voxelwise reliability weights, summing to 1 at every voxel."""

    weights: np.ndarray  # (J, nx, ny, nz)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise ShapeError(f"expected (J, nx, ny, nz) weights, got {w.shape}")
        if not np.isfinite(w).all() or w.min() < 0 or w.max() > 1:
            raise ValueError("weights must be finite and in [0, 1]")
        sums = w.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ValueError("weights must sum to 1 at every voxel")
        view = w.view()
        view.flags.writeable = False
        object.__setattr__(self, "weights", view)


def _stack_binary(atlas_labels, min_maps: int) -> tuple[np.ndarray, tuple, tuple]:
    maps = list(atlas_labels)
    if len(maps) < min_maps:
        raise ValueError(f"need at least {min_maps} atlas label maps, got {len(maps)}")
    dims = maps[0].dims
    spacing = maps[0].spacing
    rows = []
    for k, m in enumerate(maps):
        if m.dims != dims:
            raise ShapeError(f"atlas {k} dims {m.dims} do not match {dims}")
        arr = m.labels
        if arr.size and int(arr.max()) > 1:
            raise ValueError(f"atlas {k} is not binary (max label {int(arr.max())})")
        rows.append(arr.ravel(order="F").astype(np.float64))
    return np.stack(rows), dims, spacing


def _result_from_posterior(W, dims, spacing, raters, iterations, converged,
                           degenerate=False, logliks=()):
    posterior = np.ascontiguousarray(W.reshape(dims, order="F"))
    hard = LabelMap((posterior >= 0.5).astype(np.uint8), spacing)
    return FusionResult(posterior, hard, tuple(raters), iterations, converged,
                        degenerate, tuple(logliks))


def majority_vote(atlas_labels) -> FusionResult:
    """Fraction-of-votes posterior; exact 0.5 ties resolve to foreground."""
    D, dims, spacing = _stack_binary(atlas_labels, min_maps=1)
    return _result_from_posterior(D.mean(axis=0), dims, spacing,
                                  raters=(), iterations=0, converged=True)


def _degenerate_result(value, J, dims, spacing):
    log.warning("all atlas maps are uniformly %s; returning degenerate fusion",
                "foreground" if value else "background")
    W = np.full(dims[0] * dims[1] * dims[2], float(value))
    raters = [RaterPerformance(1.0, 1.0)] * J
    return _result_from_posterior(W, dims, spacing, raters, 0, True, degenerate=True)


def _em_loop(D, E, prior, max_iters, tol):
    """Shared EM engine.

    D is the (J, V) binary decision matrix. E is an optional (J, V)
    exponent matrix: atlas j's likelihood factor at voxel v is raised to
    E[j, v] in the E-step and the M-step sums carry the same exponents.
    E=None is the plain (unweighted) path.
    """
    J, V = D.shape
    logpi = np.log(prior)
    log1mpi = np.log1p(-prior)
    if E is not None:
        ED = E * D
        Esum = E.sum(axis=1)
        EDsum = ED.sum(axis=1)

    p = np.full(J, 0.99)
    q = np.full(J, 0.99)
    logliks = []
    converged = False
    iterations = 0

    def estep(p, q):
        lp, l1p = np.log(p), np.log1p(-p)
        lq, l1q = np.log(q), np.log1p(-q)
        if E is None:
            la = logpi + l1p.sum() + (lp - l1p) @ D
            lb = log1mpi + lq.sum() + (l1q - lq) @ D
        else:
            la = logpi + l1p @ E + (lp - l1p) @ ED
            lb = log1mpi + lq @ E + (l1q - lq) @ ED
        return la, lb

    for it in range(1, max_iters + 1):
        la, lb = estep(p, q)
        logliks.append(float(np.logaddexp(la, lb).sum()))
        W = expit(la - lb)
        if E is None:
            sW = W.sum()
            p_new = (D @ W) / max(sW, PARAM_FLOOR)
            q_new = 1.0 - (D @ (1.0 - W)) / max(V - sW, PARAM_FLOOR)
        else:
            EW = E @ W
            EDW = ED @ W
            E1W = Esum - EW
            p_new = EDW / np.maximum(EW, PARAM_FLOOR)
            q_new = (E1W - (EDsum - EDW)) / np.maximum(E1W, PARAM_FLOOR)
        p_new = np.clip(p_new, PARAM_FLOOR, 1.0 - PARAM_FLOOR)
        q_new = np.clip(q_new, PARAM_FLOOR, 1.0 - PARAM_FLOOR)
        delta = np.abs(p_new - p).mean() + np.abs(q_new - q).mean()
        p, q = p_new, q_new
        iterations = it
        if delta < tol:
            converged = True
            break

    la, lb = estep(p, q)
    logliks.append(float(np.logaddexp(la, lb).sum()))
    W = expit(la - lb)
    return W, p, q, iterations, converged, logliks


def _run_em(D, E, dims, spacing, *, prior, max_iters, tol):
    J, V = D.shape
    total = D.sum()
    if total == 0:
        return _degenerate_result(0, J, dims, spacing)
    if total == J * V:
        return _degenerate_result(1, J, dims, spacing)
    pi = float(D.mean()) if prior is None else float(prior)
    pi = min(max(pi, PARAM_FLOOR), 1.0 - PARAM_FLOOR)
    W, p, q, iterations, converged, logliks = _em_loop(D, E, pi, max_iters, tol)
    raters = [RaterPerformance(float(pj), float(qj)) for pj, qj in zip(p, q)]
    return _result_from_posterior(W, dims, spacing, raters, iterations, converged,
                                  logliks=logliks)


def staple_em(atlas_labels, *, max_iters: int = 100, tol: float = 1e-6,
              prior: float | None = None) -> FusionResult:
    """Classical binary STAPLE.

    E-step: W(v) = a(v) / (a(v) + b(v)) with
    a(v) = pi * prod_j p_j^d_j (1-p_j)^(1-d_j) and
    b(v) = (1-pi) * prod_j (1-q_j)^d_j q_j^(1-d_j).
    M-step: p_j = sum W d_j / sum W, q_j = sum (1-W)(1-d_j) / sum (1-W).
    Stops when mean |dp| + mean |dq| < tol. The default prior is the mean
    foreground fraction of the input maps.
    """
    D, dims, spacing = _stack_binary(atlas_labels, min_maps=2)
    return _run_em(D, None, dims, spacing, prior=prior, max_iters=max_iters, tol=tol)


def _patch_ssd(target: np.ndarray, atlas: np.ndarray, radius: int,
               counts: np.ndarray | None) -> np.ndarray:
    sq = (target - atlas) ** 2
    if radius == 0:
        return sq
    size = 2 * radius + 1
    sums = ndimage.uniform_filter(sq, size=size, mode="constant", cval=0.0) * size**3
    return np.maximum(sums / counts, 0.0)


def _patch_counts(shape, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    ones = np.ones(shape)
    return ndimage.uniform_filter(ones, size=size, mode="constant", cval=0.0) * size**3


def local_weights(target: Volume, atlas_images, radius: int = 1,
                  sigma: float | None = None,
                  sigma_region: np.ndarray | None = None) -> WeightField:
    """Voxelwise atlas reliability from patch intensity similarity.

    For each atlas j, SSD_j(v) is the mean squared intensity difference
    to the target over the (2*radius+1)^3 patch at v (truncated at the
    borders); the unnormalized weight is exp(-SSD_j / (2 sigma^2)) and
    weights are normalized across atlases per voxel. sigma=None picks
    sigma^2 as the mean patch SSD over ``sigma_region`` (a boolean mask,
    typically where any atlas is foreground), falling back to the whole
    grid. Rows whose exponentials all underflow fall back to uniform.
    """
    images = list(atlas_images)
    if not images:
        raise ValueError("need at least one atlas image")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    dims = target.dims
    for k, img in enumerate(images):
        if img.dims != dims:
            raise ShapeError(f"atlas image {k} dims {img.dims} do not match {dims}")
    counts = _patch_counts(dims, radius) if radius > 0 else None
    ssd = np.stack([_patch_ssd(target.voxels, img.voxels, radius, counts)
                    for img in images])
    if sigma is None:
        if sigma_region is not None and bool(np.any(sigma_region)):
            sigma2 = float(ssd[:, np.asarray(sigma_region, dtype=bool)].mean())
        else:
            sigma2 = float(ssd.mean())
        if sigma2 <= 0.0:
            sigma2 = 1.0  # all atlases match the target inside the region
    else:
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        sigma2 = float(sigma) ** 2
    expo = -ssd / (2.0 * sigma2)
    expo -= expo.max(axis=0)  # same normalized weights, no underflow
    w = np.exp(expo)
    sums = w.sum(axis=0)
    dead = sums <= 0.0
    if np.any(dead):
        w[:, dead] = 1.0
        sums = w.sum(axis=0)
    return WeightField(w / sums)


def lop_fuse(target: Volume, atlases, *, radius: int = 1,
             sigma: float | None = None, max_iters: int = 100,
             tol: float = 1e-6, prior: float | None = None) -> FusionResult:
    """Locally weighted STAPLE via a log opinion pool.

    Atlas j's likelihood factor at voxel v is raised to J * w_j(v), with
    w from local_weights, so uniform weights reduce exactly to staple_em.
    """
    pairs = list(atlases)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 atlases, got {len(pairs)}")
    images = [img for img, _ in pairs]
    D, dims, spacing = _stack_binary([lab for _, lab in pairs], min_maps=2)
    if target.dims != dims:
        raise ShapeError(f"target dims {target.dims} do not match atlas dims {dims}")
    foreground = D.any(axis=0).reshape(dims, order="F")
    wf = local_weights(target, images, radius=radius, sigma=sigma,
                       sigma_region=foreground)
    J = D.shape[0]
    E = J * np.stack([wf.weights[j].ravel(order="F") for j in range(J)])
    return _run_em(D, E, dims, spacing, prior=prior, max_iters=max_iters, tol=tol)
