"""Norm-bounded perturbations in token-embedding space.

Two kinds of noise are produced per batch:

* a sentence-level ``delta`` obtained from interleaved normalized-gradient
  (PGD) and sign-gradient (FGSM) ascent, blended with weight ``rho``;
* a token-level ``eta`` whose per-token steps are rescaled so tokens that
  already carry large perturbations keep the largest share.

All tensors follow the ``B x L x D`` layout of the encoder's token embeddings.
The ``batch_dims`` argument of the pure step functions says how many leading
axes index independent perturbations; norms are taken over the rest.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import torch

NORMS = ("l1", "l2", "linf")


@dataclass
class HyperParams:
    epsilon: float = 1e-2
    alpha: float = 1e-5
    beta: float = 1e-3
    gamma: float = 1e-3
    rho: float = 0.5
    lambda1: float = 1 / 128
    lambda2: float = 0.005
    tau: float = 0.05
    K: int = 5
    T: int = 5
    norm: str = "linf"
    sigma: float | None = None
    lr: float = 3e-4
    epochs: int = 4
    batch_size: int = 64
    mask_rate: float = 0.15

    def __post_init__(self):
        self.norm = str(self.norm).lower()
        if self.sigma is None:
            self.sigma = self.epsilon
        self.validate()

    def validate(self):
        # epsilon == 0 switches adversarial generation off (dropout-only baseline)
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.K < 1 or self.T < 1:
            raise ValueError(f"K and T must be >= 1, got K={self.K}, T={self.T}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if min(self.alpha, self.beta, self.gamma, self.sigma) < 0:
            raise ValueError("step sizes and sigma must be >= 0")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")

    @property
    def adversarial(self) -> bool:
        return self.epsilon > 0

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _flat(v: torch.Tensor, batch_dims: int) -> torch.Tensor:
    return v.reshape(*v.shape[:batch_dims], -1)


def norm_of(v: torch.Tensor, norm: str, batch_dims: int = 0) -> torch.Tensor:
    """P-norm over all axes after the first ``batch_dims``."""
    flat = _flat(v, batch_dims)
    if norm == "linf":
        return flat.abs().amax(dim=-1)
    if norm == "l2":
        return flat.pow(2).sum(dim=-1).sqrt()
    if norm == "l1":
        return flat.abs().sum(dim=-1)
    raise ValueError(f"unknown norm {norm!r}")


def _project_simplex_abs(u: torch.Tensor, radius: float) -> torch.Tensor:
    # rows of u are non-negative with sum > radius; sort-based threshold
    srt, _ = torch.sort(u, dim=-1, descending=True)
    css = srt.cumsum(dim=-1)
    k = torch.arange(1, u.shape[-1] + 1, dtype=u.dtype)
    active = srt * k > (css - radius)
    n_active = active.sum(dim=-1, keepdim=True)
    theta = (css.gather(-1, n_active - 1) - radius) / n_active.to(u.dtype)
    return (u - theta).clamp(min=0)


def _shrink_inside(x: torch.Tensor, epsilon: float, norm: str) -> torch.Tensor:
    # rounding can leave a projected row a few ulps outside the ball; pull it
    # in so the computed norm is <= epsilon and re-projection is a no-op
    step = 1.0 - 4.0 * torch.finfo(x.dtype).eps
    for _ in range(64):
        over = norm_of(x, norm, x.dim() - 1) > epsilon
        if not over.any():
            break
        x = torch.where(over[..., None], x * step, x)
    return x


def project_ball(v: torch.Tensor, epsilon: float, norm: str = "linf", batch_dims: int = 0) -> torch.Tensor:
    """Euclidean projection onto ``{x : ||x||_norm <= epsilon}``."""
    if not torch.isfinite(v).all():
        raise ValueError("cannot project a non-finite perturbation")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return torch.zeros_like(v)
    if norm == "linf":
        return v.clamp(-epsilon, epsilon)
    flat = _flat(v, batch_dims)
    if flat.shape[-1] == 0:
        return v.clone()
    if norm == "l2":
        n = flat.pow(2).sum(dim=-1, keepdim=True).sqrt()
        scale = torch.where(n > epsilon, epsilon / n.clamp_min(torch.finfo(v.dtype).tiny), torch.ones_like(n))
        return _shrink_inside(flat * scale, epsilon, norm).reshape(v.shape)
    if norm == "l1":
        a = flat.abs()
        inside = a.sum(dim=-1, keepdim=True) <= epsilon
        proj = _shrink_inside(torch.sign(flat) * _project_simplex_abs(a, epsilon), epsilon, norm)
        return torch.where(inside, flat, proj).reshape(v.shape)
    raise ValueError(f"unknown norm {norm!r}")


def scaling_index(eta_norms: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-token factors ``|eta_i| / max_j |eta_j|`` along the last axis.

    The maximum runs over the tokens of one sentence (masked positions are
    ignored). A sentence whose norms are all zero gets factors of one.
    """
    if eta_norms.shape[-1] == 0:
        raise ValueError("scaling index needs at least one token")
    if (eta_norms < 0).any():
        raise ValueError("norms must be non-negative")
    if mask is not None:
        eta_norms = eta_norms * mask.to(eta_norms.dtype)
    top = eta_norms.amax(dim=-1, keepdim=True)
    safe = torch.where(top > 0, top, torch.ones_like(top))
    return torch.where(top > 0, eta_norms / safe, torch.ones_like(eta_norms))


def _unit(g: torch.Tensor, norm: str, batch_dims: int) -> torch.Tensor:
    n = norm_of(g, norm, batch_dims)
    n = n.reshape(*n.shape, *([1] * (g.ndim - batch_dims)))
    return torch.where(n > 0, g / torch.where(n > 0, n, torch.ones_like(n)), torch.zeros_like(g))


def token_step(eta, grad_eta, gamma, hyper: HyperParams, mask=None):
    """One token-level ascent step on ``eta`` of shape ``(..., L, D)``."""
    if eta.shape != grad_eta.shape:
        raise ValueError(f"shape mismatch: eta {tuple(eta.shape)} vs grad {tuple(grad_eta.shape)}")
    tok_dims = eta.ndim - 1
    n = scaling_index(norm_of(eta, hyper.norm, tok_dims), mask)
    stepped = n[..., None] * (eta + gamma * _unit(grad_eta, hyper.norm, tok_dims))
    out = project_ball(stepped, hyper.epsilon, hyper.norm, tok_dims)
    if mask is not None:
        out = out * mask[..., None].to(out.dtype)
    return out


def pgd_step(delta, grad, alpha, hyper: HyperParams, batch_dims: int = 0):
    if delta.shape != grad.shape:
        raise ValueError("delta and grad shapes differ")
    return project_ball(delta + alpha * _unit(grad, hyper.norm, batch_dims), hyper.epsilon, hyper.norm, batch_dims)


def fgsm_step(delta, grad, beta, hyper: HyperParams, batch_dims: int = 0):
    if delta.shape != grad.shape:
        raise ValueError("delta and grad shapes differ")
    if not torch.isfinite(grad).all():
        raise ValueError("non-finite gradient")
    return project_ball(delta + beta * torch.sign(grad), hyper.epsilon, hyper.norm, batch_dims)


def combine(delta_pgd, delta_fgsm, rho):
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if rho == 1.0:
        return delta_pgd.clone()
    if rho == 0.0:
        return delta_fgsm.clone()
    return rho * delta_pgd + (1.0 - rho) * delta_fgsm


def init_uniform(shape, sigma, dim, generator: torch.Generator, dtype=torch.float32):
    """``U(-sigma, sigma) / sqrt(dim)`` draws."""
    u = torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1
    return (u * sigma / math.sqrt(dim)).to(dtype)


def init_vocab_table(vocab_size, dim, hyper: HyperParams, generator: torch.Generator, dtype=torch.float32):
    V = init_uniform((vocab_size, dim), hyper.sigma, dim, generator, dtype)
    return project_ball(V, hyper.epsilon, hyper.norm, batch_dims=1)


LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def generate(X, X_pos, V, hyper: HyperParams, loss_fn: LossFn, ids, mask, generator: torch.Generator):
    """Run the inner maximisation for one batch.

    ``loss_fn(X_perturbed, X_pos)`` is the contrastive loss whose gradient
    drives both perturbations. Returns ``(delta_final, eta, V)``; ``V`` is
    updated in place at the vocabulary rows of the active tokens.
    """
    X = X.detach()
    X_pos = X_pos.detach()
    B, L, D = X.shape
    tok_mask = mask.to(X.dtype)[..., None]
    if not hyper.adversarial:
        zero = torch.zeros_like(X)
        return zero, zero.clone(), V

    delta0 = project_ball(init_uniform((B, L, D), hyper.sigma, D, generator, X.dtype), hyper.epsilon, hyper.norm, 1)
    delta0 = delta0 * tok_mask
    delta_pgd, delta_fgsm = delta0.clone(), delta0.clone()
    eta = V[ids].to(X.dtype) * tok_mask

    for t in range(1, max(hyper.K, hyper.T) + 1):
        d = combine(delta_pgd, delta_fgsm, hyper.rho).requires_grad_(True)
        e = eta.clone().requires_grad_(True)
        with torch.enable_grad():
            loss = loss_fn(X + d + e, X_pos)
            g_delta, g_eta = torch.autograd.grad(loss, [d, e])
        if t <= hyper.K:
            delta_pgd = pgd_step(delta_pgd, g_delta, hyper.alpha, hyper, batch_dims=1) * tok_mask
        if t <= hyper.T:
            delta_fgsm = fgsm_step(delta_fgsm, g_delta, hyper.beta, hyper, batch_dims=1) * tok_mask
        eta = token_step(eta, g_eta, hyper.gamma, hyper, mask)

    delta_final = combine(delta_pgd, delta_fgsm, hyper.rho)
    write_back(V, ids, mask, eta)
    return delta_final.detach(), eta.detach(), V


@torch.no_grad()
def write_back(V, ids, mask, eta):
    """``V[w] <- eta`` at every active token; the last occurrence of a repeated word wins."""
    active = mask.bool()
    flat_ids, flat_eta = ids[active], eta[active]
    if flat_ids.numel() == 0:
        return V
    uniq, inv = torch.unique(flat_ids, return_inverse=True)
    order = torch.arange(flat_ids.numel())
    last = torch.full((uniq.numel(),), -1, dtype=torch.long).scatter_reduce(0, inv, order, reduce="amax")
    V[uniq] = flat_eta[last].to(V.dtype)
    return V
