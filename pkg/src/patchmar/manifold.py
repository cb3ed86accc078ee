"""Patch-set graph machinery.

Builds the sampled patch manifold from images plus compressed encoder codes,
assembles the Gaussian weight matrix W and graph Laplacian L = D - W over
it, and solves the coupled smoothing system

    (L + mu_bar * W) U = mu_bar * W * V

column by column with preconditioned conjugate gradients. The Dirichlet
energy sum_cols u^T L u (= sum_ij w_ij ||u_i - u_j||^2 / 2), normalized by
the point count, serves as the manifold-dimension diagnostic.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .autodiff import Tensor, ShapeError, concat, reshape, transpose

CORRECTED = "corrected"
FREE = "free"


class SolverError(RuntimeError):
    """Conjugate gradients failed to reach the residual contract."""

    def __init__(self, worst_residual, iterations):
        super().__init__(
            f"conjugate gradients did not converge: worst column residual "
            f"{worst_residual:.3e} after {iterations} iterations")
        self.worst_residual = worst_residual
        self.iterations = iterations


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel and solver coupling.

    t is the kernel bandwidth in squared patch-distance units; None selects
    it per point set as t_scale * median(squared pairwise distance) / 4.
    t_scale tunes how local the graph is: at 1.0 the median pair keeps
    weight e^-1 (a near-dense graph and strong smoothing), small values
    connect only close patches. c_t scales the kernel (only the product
    with mu_bar matters in the solve, so the default 1.0 loses nothing).
    mu_bar couples the smoothing term to the data term.
    """

    t: float | None = None
    t_scale: float = 1.0
    c_t: float = 1.0
    mu_bar: float = 0.6

    def __post_init__(self):
        if self.t is not None and not self.t > 0:
            raise ValueError(f"kernel bandwidth t must be positive, got {self.t}")
        if not self.t_scale > 0:
            raise ValueError(f"bandwidth scale must be positive, got {self.t_scale}")
        if not self.c_t > 0:
            raise ValueError(f"kernel scale c_t must be positive, got {self.c_t}")
        if not self.mu_bar > 0:
            raise ValueError(f"solver coupling mu_bar must be positive, got {self.mu_bar}")


@dataclass
class PatchSet:
    """m x d matrix of patch points, one row per spatial location.

    Row layout: first s^2 entries are the flattened s x s pixel patch, last
    s^2 the compressed code vector at that location. `points` stays inside
    the autodiff graph so penalties on it reach the network.
    """

    points: Tensor
    provenance: np.ndarray

    @property
    def m(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def values(self):
        """Detached float64 coordinates for graph assembly."""
        return self.points.data.astype(np.float64)


@dataclass
class GraphOperators:
    """Symmetric weights, degrees and Laplacian over one PatchSet."""

    w: np.ndarray
    degrees: np.ndarray
    lap: np.ndarray
    t: float

    @property
    def m(self):
        return self.w.shape[0]


@dataclass
class DualVariable:
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SolveResult:
    u: np.ndarray
    residual: float
    iterations: int


def _patch_rows(image, s):
    """[N,1,H,W] -> (N*(H/s)*(W/s), s^2), locations row-major per image."""
    n, c, h, w = image.shape
    gh, gw = h // s, w // s
    r = reshape(image, (n, gh, s, gw, s))
    r = transpose(r, (0, 1, 3, 2, 4))
    return reshape(r, (n * gh * gw, s * s))


def _code_rows(code):
    """[N,C,gh,gw] -> (N*gh*gw, C), same location order as _patch_rows."""
    n, c, gh, gw = code.shape
    r = transpose(code, (0, 2, 3, 1))
    return reshape(r, (n * gh * gw, c))


def build_patch_set(images, codes, geom, provenance=None):
    """Assemble the patch set from per-branch image/code tensor pairs.

    images[i] is [N,1,H,W]; codes[i] is the matching [N,s^2,H/s,W/s]
    compressed code. Entries are stacked in list order (callers put the
    artifact-corrected branch first), images within an entry in batch
    order, spatial locations row-major. provenance holds one tag per entry
    (defaults to CORRECTED).
    """
    if len(images) != len(codes):
        raise ShapeError(f"{len(images)} images vs {len(codes)} codes")
    if not images:
        raise ShapeError("empty patch-set input")
    if provenance is None:
        provenance = [CORRECTED] * len(images)
    if len(provenance) != len(images):
        raise ShapeError(f"{len(provenance)} provenance tags vs {len(images)} entries")

    s = geom.s
    row_blocks = []
    tags = []
    for img, code, tag in zip(images, codes, provenance):
        n, c, h, w = img.shape
        if c != 1:
            raise ShapeError(f"patch images must have one channel, got {c}")
        if h != geom.image_h or w != geom.image_w:
            raise ShapeError(
                f"image extent {h}x{w} does not match geometry "
                f"{geom.image_h}x{geom.image_w}")
        expect = (n, s * s, h // s, w // s)
        if code.shape != expect:
            raise ShapeError(f"code shape {tuple(code.shape)} does not match {expect}")
        rows = concat([_patch_rows(img, s), _code_rows(code)], axis=1)
        row_blocks.append(rows)
        tags.extend([tag] * rows.shape[0])

    points = row_blocks[0] if len(row_blocks) == 1 else concat(row_blocks, axis=0)
    return PatchSet(points=points, provenance=np.asarray(tags))


def _auto_bandwidth(sq_dists, scale):
    if sq_dists.size == 0:
        return 1.0
    med = float(np.median(sq_dists))
    if med <= 0.0:
        return 1.0
    return scale * med / 4.0


def gaussian_weights(points, cfg):
    """Gaussian kernel weights w_ij = c_t * exp(-||p_i - p_j||^2 / (4t)).

    Accepts a PatchSet or a plain (m, d) array. Only the condensed upper
    triangle is evaluated, so W is symmetric bit for bit; the diagonal is
    exactly c_t. Degrees are row sums and L = diag(degrees) - W.
    """
    if isinstance(points, PatchSet):
        points = points.values()
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError(f"points must be an m x d matrix, got shape {pts.shape}")
    m = pts.shape[0]
    if m < 1:
        raise ShapeError("need at least one point")

    if m == 1:
        w = np.array([[cfg.c_t]], dtype=np.float64)
        t = cfg.t if cfg.t is not None else 1.0
    else:
        sq = pdist(pts, "sqeuclidean")
        t = cfg.t if cfg.t is not None else _auto_bandwidth(sq, cfg.t_scale)
        w = cfg.c_t * np.exp(-squareform(sq) / (4.0 * t))
        np.fill_diagonal(w, cfg.c_t)
    degrees = w.sum(axis=1)
    lap = np.diag(degrees) - w
    return GraphOperators(w=w, degrees=degrees, lap=lap, t=t)


def _pcg_multi(a, b, diag_inv, tol, max_iter):
    """Jacobi-preconditioned CG for A X = B, all columns at once.

    Returns (X, recurrence-converged mask, iterations used)."""
    m, d = b.shape
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b, axis=0)
    active = bnorm > 0.0
    if not active.any():
        return x, np.ones(d, dtype=bool), 0
    z = diag_inv[:, None] * r
    p = z.copy()
    rz = np.einsum("ij,ij->j", r, z)
    it = 0
    while it < max_iter:
        it += 1
        ap = a @ p
        pap = np.einsum("ij,ij->j", p, ap)
        safe = np.where(active & (pap > 0.0), pap, 1.0)
        alpha = np.where(active & (pap > 0.0), rz / safe, 0.0)
        x += p * alpha
        r -= ap * alpha
        rnorm = np.linalg.norm(r, axis=0)
        active = rnorm > tol * bnorm
        if not active.any():
            break
        z = diag_inv[:, None] * r
        rz_new = np.einsum("ij,ij->j", r, z)
        beta = np.where(rz > 0.0, rz_new / np.where(rz > 0.0, rz, 1.0), 0.0)
        p = z + p * beta
        rz = rz_new
    return x, ~active, it


def solve_coordinates(ops, v, cfg, tol=1e-8, max_iter=None):
    """Solve (L + mu_bar W) U = mu_bar W V column-independently.

    The system matrix is symmetric positive definite for mu_bar > 0. Each
    column must reach relative residual <= tol against its right-hand
    side; otherwise SolverError carries the worst column residual. The
    true residual is re-checked after the recurrence converges, with a
    restart if rounding drift ate the contract.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    m = ops.m
    if v.shape[0] != m:
        raise ShapeError(f"v has {v.shape[0]} rows, graph has {m} points")
    if max_iter is None:
        max_iter = 10 * m

    a = ops.lap + cfg.mu_bar * ops.w
    b = cfg.mu_bar * (ops.w @ v)
    diag = np.diag(a).copy()
    if (diag <= 0.0).any():
        raise SolverError(np.inf, 0)
    diag_inv = 1.0 / diag

    bnorm = np.linalg.norm(b, axis=0)
    x = np.zeros_like(b)
    budget = max_iter
    total_it = 0
    for _ in range(3):
        dx, _, used = _pcg_multi(a, b - a @ x, diag_inv, tol * 0.5, budget)
        x += dx
        total_it += used
        budget -= used
        res = np.linalg.norm(b - a @ x, axis=0)
        rel = np.where(bnorm > 0.0, res / np.where(bnorm > 0.0, bnorm, 1.0), 0.0)
        worst = float(rel.max()) if rel.size else 0.0
        if worst <= tol:
            return SolveResult(u=x, residual=worst, iterations=total_it)
        if budget <= 0:
            break
    raise SolverError(worst, total_it)


def dirichlet_energy(u, ops, normalized=True):
    """sum over columns of u^T L u, divided by the point count by default.

    Clamped at zero: for constant columns the exact value is 0 and matrix
    rounding can land a hair below it.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[0] != ops.m:
        raise ShapeError(f"u has {u.shape[0]} rows, graph has {ops.m} points")
    e = float(np.sum(u * (ops.lap @ u)))
    e = max(e, 0.0)
    return e / ops.m if normalized else e


def normalize_dual(d_hat):
    """Joint min-max normalization of all dual entries into [0, 1].

    A constant dual (max == min) has no defined normalization; it maps to
    all zeros, which restores the unconstrained penalty.
    """
    vals = d_hat.values if isinstance(d_hat, DualVariable) else np.asarray(d_hat)
    vals = vals.astype(np.float64)
    lo = float(vals.min())
    hi = float(vals.max())
    if hi == lo:
        return DualVariable(values=np.zeros_like(vals))
    return DualVariable(values=(vals - lo) / (hi - lo))
