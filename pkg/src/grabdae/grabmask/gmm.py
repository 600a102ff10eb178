"""Full-covariance Gaussian mixtures over RGB vectors, fitted by EM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


class InsufficientDataError(ValueError):
    pass


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covariances: np.ndarray  # (K, D, D)
    eps: float = 1e-4
    loglik_history: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "GmmModel":
        return GmmModel(self.weights.copy(), self.means.copy(), self.covariances.copy(), self.eps, list(self.loglik_history))


def floor_covariance(cov: np.ndarray, eps: float) -> np.ndarray:
    """Clip eigenvalues of a symmetric matrix from below at ``eps``.

    For a fixed mean this is the maximum-likelihood covariance under the
    constraint ``cov >= eps*I``, so EM stays monotone with the floor in place.
    """
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, eps)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def component_log_densities(X: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """log w_k + log N(x; mu_k, Sigma_k) for every row and component -> (n, K)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, D = X.shape
    out = np.empty((n, gmm.K))
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    for k in range(gmm.K):
        L = np.linalg.cholesky(gmm.covariances[k])
        diff = X - gmm.means[k]
        sol = np.linalg.solve(L, diff.T)
        maha = np.einsum("ij,ij->j", sol, sol)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, k] = logw[k] - 0.5 * (D * LOG_2PI + logdet + maha)
    return out


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def log_density(X: np.ndarray, gmm: GmmModel) -> np.ndarray:
    return _logsumexp(component_log_densities(X, gmm))


def log_likelihood(X: np.ndarray, gmm: GmmModel) -> float:
    return float(log_density(X, gmm).sum())


def _kmeanspp_seeds(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    seeds = [X[rng.integers(n)]]
    d2 = ((X - seeds[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        seeds.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(seeds)


def _init_from_seeds(X: np.ndarray, K: int, eps: float, rng: np.random.Generator) -> GmmModel:
    n, D = X.shape
    means = _kmeanspp_seeds(X, K, rng)
    assign = ((X[:, None, :] - means[None]) ** 2).sum(axis=2).argmin(axis=1)
    counts = np.bincount(assign, minlength=K).astype(np.float64)
    covs = np.empty((K, D, D))
    for k in range(K):
        pts = X[assign == k]
        if len(pts):
            means[k] = pts.mean(axis=0)
            diff = pts - means[k]
            covs[k] = floor_covariance(diff.T @ diff / len(pts), eps)
        else:
            covs[k] = eps * np.eye(D)
    # empty seeds keep a sliver of weight so every component stays alive
    weights = np.maximum(counts, 1e-3)
    return GmmModel(weights / weights.sum(), means, covs, eps)


def em_step(X: np.ndarray, gmm: GmmModel, eps: float) -> GmmModel:
    n, D = X.shape
    logp = component_log_densities(X, gmm)
    resp = np.exp(logp - _logsumexp(logp)[:, None])
    Nk = resp.sum(axis=0)
    means = gmm.means.copy()
    covs = gmm.covariances.copy()
    for k in range(gmm.K):
        # a starved component keeps its old shape; only its weight shrinks
        if Nk[k] < 1e-8:
            continue
        r = resp[:, k]
        means[k] = (r @ X) / Nk[k]
        diff = X - means[k]
        covs[k] = floor_covariance((diff * r[:, None]).T @ diff / Nk[k], eps)
    return GmmModel(Nk / n, means, covs, eps)


def fit_gmm(
    pixels,
    K: int = 5,
    em_iters: int = 10,
    rng: np.random.Generator | None = None,
    eps: float = 1e-4,
    init: GmmModel | None = None,
) -> GmmModel:
    """Fit a K-component mixture to ``pixels`` (n, D) with ``em_iters`` EM steps.

    ``init`` warm-starts EM from an existing model; otherwise k-means++
    seeds drawn from ``rng`` start it. ``loglik_history`` on the result holds
    the total log-likelihood before the first step and after every step.
    """
    X = np.asarray(pixels, dtype=np.float64).reshape(-1, np.shape(pixels)[-1])
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if X.shape[0] < K:
        raise InsufficientDataError(f"{X.shape[0]} pixels cannot support {K} components")
    if init is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        gmm = _init_from_seeds(X, K, eps, rng)
    else:
        if init.K != K:
            raise ValueError(f"warm-start model has {init.K} components, expected {K}")
        gmm = init.copy()
    history = [log_likelihood(X, gmm)]
    for _ in range(em_iters):
        gmm = em_step(X, gmm, eps)
        history.append(log_likelihood(X, gmm))
    gmm.loglik_history = history
    return gmm


def density_offset(eps: float, dim: int = 3) -> float:
    """Shift that makes ``-log p`` non-negative for covariances floored at eps.

    No mixture density can exceed ``(2*pi*eps)**(-dim/2)``. The shift depends
    only on the floor, so it is the same constant for every model.
    """
    return -0.5 * dim * (LOG_2PI + np.log(eps))


def data_term(gmm: GmmModel, z) -> np.ndarray | float:
    """Non-negative unary cost ``-log sum_k w_k N(z; mu_k, Sigma_k) + offset``.

    Accepts one vector or an (n, D) batch.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    D = gmm.means.shape[1]
    vals = np.maximum(-log_density(z.reshape(-1, D), gmm) + density_offset(gmm.eps, D), 0.0)
    return float(vals[0]) if single else vals
