"""Expert diversity objectives.

Two complementary pressures:

* an entropy term on the gate output, computed batch-wise from the
  conditional entropy H(M|X) and the marginal entropy H(M);
* a determinantal term that maximizes ``log det K`` where ``K`` is the
  exponential Wasserstein-2 kernel matrix between the experts' weight
  posteriors of one layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConditioningError, ShapeError
from .linalg import log_softmax_rows, sigmoid

ENTROPY_SIGNS = ("prose", "printed")


@dataclass
class DiversityConfig:
    kernel_width: float = 10.0
    ridge: float = 1e-6
    entropy_weight: float = 1.0
    dpp_weight: float = 0.01
    squared_scale_term: bool = False
    entropy_sign: str = "prose"

    def __post_init__(self):
        if self.kernel_width <= 0:
            raise ValueError("kernel_width must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.entropy_weight < 0 or self.dpp_weight < 0:
            raise ValueError("diversity weights must be non-negative")
        if self.entropy_sign not in ENTROPY_SIGNS:
            raise ValueError(f"entropy_sign must be one of {ENTROPY_SIGNS}")


def _scale_term(dsig, squared):
    if squared:
        return float(np.sum(dsig * dsig))
    return float(np.sqrt(np.sum(dsig * dsig)))


def wasserstein2_sq(p, q, squared_scale_term=False):
    """Closed-form W2^2 between diagonal Gaussians.

    With ``squared_scale_term=False`` the scale part is the unsquared norm
    ``||sigma_p - sigma_q||_2``; with ``True`` it is the squared norm, which
    is the usual Bures term for diagonal covariances.
    """
    if p.shape != q.shape:
        raise ShapeError(f"distributions differ in shape: {p.shape} vs {q.shape}")
    dmu = p.mu - q.mu
    return float(np.sum(dmu * dmu)) + _scale_term(p.sigma - q.sigma, squared_scale_term)


def wasserstein2_sq_grad(p, q, squared_scale_term=False):
    """Gradient of ``wasserstein2_sq(p, q)`` w.r.t. ``(p.mu, p.sigma)``.

    The gradient w.r.t. ``q`` is the negative of this by symmetry.  The
    unsquared norm is not differentiable at zero; the zero subgradient is used.
    """
    dmu = p.mu - q.mu
    dsig = p.sigma - q.sigma
    if squared_scale_term:
        return 2.0 * dmu, 2.0 * dsig
    norm = np.sqrt(np.sum(dsig * dsig))
    return 2.0 * dmu, (dsig / norm if norm > 0 else np.zeros_like(dsig))


def w2_exp_kernel(p, q, h, squared_scale_term=False):
    if h <= 0:
        raise ValueError("kernel width must be positive")
    return float(np.exp(-wasserstein2_sq(p, q, squared_scale_term) / (2.0 * h * h)))


def kernel_matrix(experts, cfg, ridge=None):
    """Pairwise kernel matrix with unit diagonal plus ``ridge * I``.

    Only the upper triangle is evaluated.  Returns ``(K, D)`` where ``D`` holds
    the pairwise squared distances (zero diagonal).
    """
    n = len(experts)
    ridge = cfg.ridge if ridge is None else ridge
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = wasserstein2_sq(experts[i], experts[j], cfg.squared_scale_term)
    k = np.exp(-dist / (2.0 * cfg.kernel_width**2))
    np.fill_diagonal(k, 1.0)
    return k + ridge * np.eye(n), dist


def log_det_spd(k):
    """log det of a symmetric positive definite matrix via Cholesky."""
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        raise ConditioningError("kernel matrix is not positive definite", float(np.linalg.eigvalsh(k).min())) from None
    return 2.0 * float(np.sum(np.log(np.diag(chol)))), chol


@dataclass
class DppResult:
    value: float
    grad_mu: list
    grad_rho: list
    min_pairwise_w2: float
    kernel: np.ndarray


def dpp_objective_and_grad(experts, cfg):
    """``log det(K + ridge I)`` over one layer's experts and its gradient
    w.r.t. every expert's ``mu`` and ``rho`` (gradient of the value itself,
    i.e. the ascent direction)."""
    n = len(experts)
    if n < 2:
        return DppResult(0.0, [np.zeros_like(e.mu) for e in experts],
                         [np.zeros_like(e.rho) for e in experts], float("nan"), np.ones((n, n)))
    k, dist = kernel_matrix(experts, cfg)
    value, chol = log_det_spd(k)
    eye = np.eye(n)
    k_inv = np.linalg.solve(chol.T, np.linalg.solve(chol, eye))
    h2 = cfg.kernel_width**2
    # K_ij and K_ji both depend on D_ij; dK_ij/dD_ij = -K_ij / (2 h^2)
    d_dist = -k_inv * (k - cfg.ridge * eye) / h2
    grad_mu = [np.zeros_like(e.mu) for e in experts]
    grad_sigma = [np.zeros_like(e.mu) for e in experts]
    for i in range(n):
        for j in range(i + 1, n):
            gm, gs = wasserstein2_sq_grad(experts[i], experts[j], cfg.squared_scale_term)
            c = d_dist[i, j]
            grad_mu[i] += c * gm
            grad_mu[j] -= c * gm
            grad_sigma[i] += c * gs
            grad_sigma[j] -= c * gs
    grad_rho = [gs * sigmoid(e.rho) for gs, e in zip(grad_sigma, experts)]
    off = dist[~np.eye(n, dtype=bool)]
    return DppResult(value, grad_mu, grad_rho, float(off.min()), k)


@dataclass
class EntropyTerms:
    h_cond: float
    h_marg: float
    d_logits_cond: np.ndarray
    d_logits_marg: np.ndarray


def _probs_to_logits_grad(p, d_p):
    return p * (d_p - (d_p * p).sum(axis=1, keepdims=True))


def entropy_bonus(gating_probs=None, logits=None):
    """Batch conditional and marginal entropies of the gate (nats).

    Returns ``(h_cond, h_marg)``.  Pass ``logits`` instead of probabilities to
    get numerically exact log-probabilities.
    """
    terms = entropy_terms(gating_probs, logits)
    return terms.h_cond, terms.h_marg


def entropy_terms(gating_probs=None, logits=None):
    """Entropies plus their gradients w.r.t. the gate logits."""
    if logits is not None:
        logp = log_softmax_rows(logits)
        p = np.exp(logp)
    else:
        p = np.asarray(gating_probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    b = p.shape[0]
    if b == 0:
        raise ValueError("entropy of an empty batch is undefined")
    h_cond = float(-np.sum(p * logp) / b)
    p_bar = p.mean(axis=0)
    with np.errstate(divide="ignore"):
        log_bar = np.where(p_bar > 0, np.log(np.where(p_bar > 0, p_bar, 1.0)), 0.0)
    h_marg = float(-np.sum(p_bar * log_bar))
    d_cond = _probs_to_logits_grad(p, -(logp + 1.0) / b)
    d_marg = _probs_to_logits_grad(p, np.broadcast_to(-(log_bar + 1.0) / b, p.shape))
    return EntropyTerms(h_cond, h_marg, d_cond, d_marg)


def entropy_loss(terms, weight, sign="prose"):
    """Loss contribution of the entropy objective and its logits gradient.

    ``prose``: minimize H(M|X) + H(M) (confident, sparse gate).
    ``printed``: maximize H(M|X) - H(M).
    """
    if sign == "prose":
        return weight * (terms.h_cond + terms.h_marg), weight * (terms.d_logits_cond + terms.d_logits_marg)
    if sign == "printed":
        return weight * (terms.h_marg - terms.h_cond), weight * (terms.d_logits_marg - terms.d_logits_cond)
    raise ValueError(f"unknown entropy sign {sign!r}")
