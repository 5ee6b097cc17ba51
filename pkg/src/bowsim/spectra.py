"""Curvature diagnostics: Hessian eigenpairs, eigenvalue density, loss grids.

All Hessian access goes through Hessian-vector products on a recorded loss
tape; the Hessian is never materialized. Directions for the 2-D loss grid
are rescaled per parameter layer to the layer's own norm before use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import HvpOperator, ParamVector


class SpectralError(RuntimeError):
    pass


@dataclass
class HessianSpectrum:
    """Top eigenpairs plus (optionally) a smoothed eigenvalue density."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray          # one unit-norm row per eigenvalue
    residuals: np.ndarray
    density_grid: np.ndarray | None = None
    density: np.ndarray | None = None
    probes: int = 0
    depth: int = 0


@dataclass
class LandscapeGrid:
    """Loss over a 2-D slice theta + alpha*e1 + beta*e2."""

    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray                # losses[i, j] at (alphas[i], betas[j])
    e1: np.ndarray
    e2: np.ndarray


def _lanczos(apply_h, n: int, m: int, v0: np.ndarray):
    """Lanczos tridiagonalization with full reorthogonalization.

    Stops early when the Krylov space becomes invariant (beta ~ 0), which
    makes the resulting quadrature exact rather than being an error.
    Returns (alphas, betas, basis) with len(betas) == len(alphas) - 1.
    """
    v = v0 / np.linalg.norm(v0)
    basis = np.empty((m, n))
    alphas: list[float] = []
    betas: list[float] = []
    scale = 0.0
    for j in range(m):
        basis[j] = v
        w = apply_h(v)
        alpha = float(v @ w)
        scale = max(scale, abs(alpha))
        w = w - alpha * v
        if j > 0:
            w = w - betas[-1] * basis[j - 1]
        # full reorthogonalization (twice is enough)
        for _ in range(2):
            w = w - basis[:j + 1].T @ (basis[:j + 1] @ w)
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)
        if j == m - 1:
            break
        if beta <= 1e-12 * max(scale, 1e-300):
            break
        betas.append(beta)
        v = w / beta
    k = len(alphas)
    return np.array(alphas), np.array(betas), basis[:k]


def _ritz(alphas: np.ndarray, betas: np.ndarray):
    t_mat = np.diag(alphas)
    if betas.size:
        t_mat = t_mat + np.diag(betas, 1) + np.diag(betas, -1)
    return np.linalg.eigh(t_mat)


def top_eigenpairs(loss_fn, params: ParamVector, k: int,
                   tol: float = 1e-6, max_depth: int = 400,
                   seed: int = 0) -> HessianSpectrum:
    """Largest-k Hessian eigenpairs of the loss at ``params``.

    Lanczos on the HVP operator, restarted at growing depth until every
    returned pair satisfies ||H e - lambda e|| <= tol * |lambda|. Raises
    ``SpectralError`` with the best residuals if the depth cap is reached.
    """
    if not 1 <= k <= 10:
        raise ValueError("k must be in [1, 10]")
    op = HvpOperator(loss_fn, params)
    n = params.n
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)
    m = min(n, max(4 * k + 16, 32))
    best = None
    while True:
        alphas, betas, basis = _lanczos(op.apply, n, m, v0)
        theta, y = _ritz(alphas, betas)
        order = np.argsort(theta)[::-1][:min(k, theta.size)]
        vals = theta[order]
        vecs = (basis.T @ y[:, order]).T
        vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        residuals = np.array([
            np.linalg.norm(op.apply(vecs[i]) - vals[i] * vecs[i])
            for i in range(vals.size)])
        best = HessianSpectrum(vals, vecs, residuals)
        if vals.size == k and np.all(residuals <= tol * np.maximum(np.abs(vals), 1e-300)):
            return best
        if m >= min(n, max_depth):
            if m >= n and vals.size == k:
                # exact Krylov exhaustion: accept (residual is round-off)
                return best
            raise SpectralError(
                f"Lanczos did not converge at depth {m}; residuals {residuals}")
        m = min(min(n, max_depth), max(m + 16, int(1.5 * m)))


def extreme_eigenvalues(loss_fn, params: ParamVector, tol: float = 1e-6,
                        seed: int = 0) -> tuple[float, float]:
    """(lambda_min, lambda_max) via Lanczos on +H and -H."""
    top = top_eigenpairs(loss_fn, params, 1, tol=tol, seed=seed)
    op = HvpOperator(loss_fn, params)
    n = params.n
    rng = np.random.default_rng(seed + 1)
    v0 = rng.standard_normal(n)
    m = min(n, 64)
    while True:
        alphas, betas, basis = _lanczos(lambda v: -op.apply(v), n, m, v0)
        theta, y = _ritz(alphas, betas)
        i = int(np.argmax(theta))
        vec = basis.T @ y[:, i]
        vec /= np.linalg.norm(vec)
        lam = -float(theta[i])
        res = float(np.linalg.norm(op.apply(vec) - lam * vec))
        if res <= tol * max(abs(lam), 1e-300) or m >= min(n, 400):
            break
        m = min(min(n, 400), max(m + 16, int(1.5 * m)))
    return lam, float(top.eigenvalues[0])


def spectrum_density(loss_fn, params: ParamVector, probes: int = 8,
                     depth: int = 100, bandwidth: float | None = None,
                     grid_points: int = 1024, seed: int = 0,
                     max_retries: int = 3) -> HessianSpectrum:
    """Stochastic Lanczos quadrature estimate of the eigenvalue density.

    Rademacher probes, Ritz nodes/weights per probe, Gaussian smoothing.
    The grid spans the extreme eigenvalues (padded by 4 bandwidths), so the
    estimate integrates to ~1 over its support.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    if depth < 10:
        raise ValueError("Lanczos depth must be >= 10")
    op = HvpOperator(loss_fn, params)
    n = params.n
    m = min(depth, n)
    rng = np.random.default_rng(seed)
    nodes: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    for _ in range(probes):
        for attempt in range(max_retries + 1):
            v0 = rng.choice([-1.0, 1.0], size=n)
            alphas, betas, _ = _lanczos(op.apply, n, m, v0)
            if alphas.size:
                break
        else:
            raise SpectralError("Lanczos broke down repeatedly")
        theta, y = _ritz(alphas, betas)
        nodes.append(theta)
        weights.append(y[0, :] ** 2)

    lam_min, lam_max = extreme_eigenvalues(loss_fn, params, seed=seed + 1)
    spread = lam_max - lam_min
    sigma = bandwidth if bandwidth is not None else max(
        spread / 200.0, 1e-6 * max(abs(lam_max), abs(lam_min), 1.0))
    grid = np.linspace(lam_min - 4.0 * sigma, lam_max + 4.0 * sigma, grid_points)
    density = np.zeros_like(grid)
    norm = 1.0 / (math.sqrt(2.0 * math.pi) * sigma)
    for theta, tau in zip(nodes, weights):
        z = (grid[:, None] - theta[None, :]) / sigma
        density += (np.exp(-0.5 * z * z) * tau[None, :]).sum(axis=1) * norm
    density /= probes

    top = top_eigenpairs(loss_fn, params, 1, seed=seed + 2)
    return HessianSpectrum(
        eigenvalues=top.eigenvalues, eigenvectors=top.eigenvectors,
        residuals=top.residuals, density_grid=grid, density=density,
        probes=probes, depth=m)


def layerwise_normalize(direction: np.ndarray, params: ParamVector) -> np.ndarray:
    """Rescale each layer block of ``direction`` to its parameter block norm.

    Blocks with zero direction norm stay zero; the per-layer direction is
    unchanged up to the positive scale factor.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (params.n,):
        raise ValueError(f"direction shape {direction.shape} != ({params.n},)")
    out = direction.copy()
    dv = params.like(out)
    for i in range(len(params.names)):
        block = dv.view(i)
        norm_e = np.linalg.norm(block)
        if norm_e == 0.0:
            continue
        block *= np.linalg.norm(params.view(i)) / norm_e
    return out


def landscape(loss_fn, params: ParamVector, e1: np.ndarray, e2: np.ndarray,
              grid_n: int = 21, half_range: float = 0.5) -> LandscapeGrid:
    """Loss surface over theta + alpha*e1 + beta*e2, alpha/beta in +-half_range.

    Directions are layer-wise normalized first. The center cell evaluates
    the unperturbed parameters exactly (bitwise).
    """
    e1 = layerwise_normalize(e1, params)
    e2 = layerwise_normalize(e2, params)
    op = HvpOperator(loss_fn, params)
    alphas = np.linspace(-half_range, half_range, grid_n)
    betas = np.linspace(-half_range, half_range, grid_n)
    losses = np.empty((grid_n, grid_n))
    theta = params.flat
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            if a == 0.0 and b == 0.0:
                losses[i, j] = op.loss_value
            else:
                losses[i, j] = op.loss_at(theta + a * e1 + b * e2)
    return LandscapeGrid(alphas, betas, losses, e1, e2)


def export_density_csv(path, spectrum: HessianSpectrum) -> None:
    if spectrum.density is None:
        raise ValueError("spectrum has no density estimate")
    with open(path, "w") as fh:
        fh.write("eigenvalue,density\n")
        for x, d in zip(spectrum.density_grid, spectrum.density):
            fh.write(f"{x:.17g},{d:.17g}\n")


def export_landscape_csv(path, grid: LandscapeGrid) -> None:
    """Matrix layout: first row beta values, first column alpha values."""
    with open(path, "w") as fh:
        fh.write("alpha\\beta," + ",".join(f"{b:.17g}" for b in grid.betas) + "\n")
        for i, a in enumerate(grid.alphas):
            fh.write(f"{a:.17g}," + ",".join(f"{v:.17g}" for v in grid.losses[i]) + "\n")


def read_landscape_csv(path) -> LandscapeGrid:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        betas = np.array([float(x) for x in header[1:]])
        rows = [line.strip().split(",") for line in fh if line.strip()]
    alphas = np.array([float(r[0]) for r in rows])
    losses = np.array([[float(x) for x in r[1:]] for r in rows])
    return LandscapeGrid(alphas, betas, losses, np.zeros(0), np.zeros(0))
