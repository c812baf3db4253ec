"""Align -> Refine -> Fuse: asymmetric alignment, bounded refinement and hypernetwork fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

EPS = 1e-8


@dataclass
class InteractionConfig:
    proj_dim: int = 64
    alpha_init: float = 0.3
    alpha_max: float = 1.5
    attn_temperature: float = 0.3
    n_tokens: int = 4
    rank: int = 8
    hyper_hidden: int = 128
    delta_scale: float = 0.6
    simple_fusion: bool = False

    def __post_init__(self):
        if self.alpha_max < 0 or self.alpha_init < 0:
            raise ValueError("alpha_init and alpha_max must be non-negative")
        if self.alpha_max > 0 and self.alpha_init >= self.alpha_max:
            raise ValueError("alpha_init must be below alpha_max")
        if self.attn_temperature <= 0:
            raise ValueError("attention temperature must be positive")


def l2norm(u: torch.Tensor) -> torch.Tensor:
    return u / (u.norm(dim=-1, keepdim=True) + EPS)


def _mlp(d_in, hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, d_out))


class AlignHead(nn.Module):
    """Student projector + predictor on the variant side, projector-only teacher on the anchor side."""

    def __init__(self, d: int, proj_dim: int = 64):
        super().__init__()
        self.projector_student = _mlp(d, 2 * proj_dim, proj_dim)
        self.predictor = _mlp(proj_dim, 2 * proj_dim, proj_dim)
        self.projector_teacher = _mlp(d, 2 * proj_dim, proj_dim)

    def student(self, H_var: torch.Tensor) -> torch.Tensor:
        return l2norm(self.predictor(self.projector_student(H_var)))

    def teacher(self, H_inv: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return l2norm(self.projector_teacher(H_inv.detach()))


def cosine_align(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return 2.0 - 2.0 * (p * z).sum(dim=-1).mean()


def align_loss(H_var: torch.Tensor, H_inv: torch.Tensor, head: AlignHead) -> torch.Tensor:
    """``2 - 2 E<p_S, z_T>``; the whole teacher branch is cut from the graph."""
    if H_var.shape[0] == 0:
        raise ValueError("align_loss needs at least one cell")
    if H_var.shape != H_inv.shape:
        raise ValueError(f"shape mismatch {tuple(H_var.shape)} vs {tuple(H_inv.shape)}")
    return cosine_align(head.student(H_var), head.teacher(H_inv))


class Refiner(nn.Module):
    """Anchor-queries-variant cross-attention, layer-normalised, added through a bounded gate.

    Each cell's ``d``-vectors are split into ``n_tokens`` tokens of size
    ``d / n_tokens``; attention runs over the variant tokens of the same cell.
    """

    def __init__(self, d: int, cfg: InteractionConfig = None):
        super().__init__()
        cfg = cfg or InteractionConfig()
        if d % cfg.n_tokens:
            raise ValueError(f"d={d} not divisible by n_tokens={cfg.n_tokens}")
        self.d = d
        self.n_tokens = cfg.n_tokens
        self.temperature = cfg.attn_temperature
        self.alpha_max = cfg.alpha_max
        dt = d // cfg.n_tokens
        self.q = nn.Linear(dt, dt, bias=False)
        self.k = nn.Linear(dt, dt, bias=False)
        self.v = nn.Linear(dt, dt, bias=False)
        self.out = nn.Linear(d, d)
        self.ln = nn.LayerNorm(d)
        self.gate = nn.Linear(2 * d, d)
        nn.init.zeros_(self.gate.weight)
        init = cfg.alpha_init / cfg.alpha_max if cfg.alpha_max > 0 else 0.5
        nn.init.constant_(self.gate.bias, math.log(init / (1.0 - init)))

    def cross_attention(self, H_inv, H_var):
        n = H_inv.shape[0]
        t = self.n_tokens
        qt = self.q(H_inv.reshape(n, t, -1))
        kt = self.k(H_var.reshape(n, t, -1))
        vt = self.v(H_var.reshape(n, t, -1))
        scores = qt @ kt.transpose(1, 2) / (math.sqrt(qt.shape[-1]) * self.temperature)
        att = torch.softmax(scores, dim=-1)
        return self.out((att @ vt).reshape(n, self.d))

    def components(self, H_inv, H_var):
        if H_inv.shape != H_var.shape:
            raise ValueError(f"shape mismatch {tuple(H_inv.shape)} vs {tuple(H_var.shape)}")
        delta = self.ln(self.cross_attention(H_inv, H_var))
        alpha = self.alpha_max * torch.sigmoid(self.gate(torch.cat([H_inv, H_var], dim=1)))
        return alpha, delta

    def forward(self, H_inv, H_var):
        alpha, delta = self.components(H_inv, H_var)
        return H_inv + alpha * delta

    def ln_bound(self) -> float:
        """``sqrt(d) * max|gain| + ||bias||``: the largest possible LayerNorm output norm."""
        with torch.no_grad():
            return float(math.sqrt(self.d) * self.ln.weight.abs().max() + self.ln.bias.norm())

    def displacement_bound(self) -> float:
        return self.alpha_max * self.ln_bound()


def refine(H_inv, H_var, refiner: Refiner):
    return refiner(H_inv, H_var)


def lipschitz_probe(refiner: Refiner, x, y, base) -> float:
    """``||refine(base, x) - refine(base, y)|| / ||x - y||`` (Frobenius over all rows)."""
    diff = (x - y).norm()
    if float(diff) == 0.0:
        raise ValueError("probe inputs must differ")
    with torch.no_grad():
        return float((refiner(base, x) - refiner(base, y)).norm() / diff)


class HyperFuser(nn.Module):
    """Anchor-conditioned low-rank two-layer MLP applied to the variant embedding.

    The hypernetwork maps each refined anchor row to factors ``(A1, B1, b1, A2,
    B2, b2)`` and gate logits; the per-cell MLP is ``A2 B2^T gelu(A1 B1^T x +
    b1) + b2``.
    """

    def __init__(self, d: int, cfg: InteractionConfig = None):
        super().__init__()
        cfg = cfg or InteractionConfig()
        self.d = d
        self.rank = cfg.rank
        self.delta_scale = cfg.delta_scale
        r = cfg.rank
        self._sizes = [d * r, d * r, d, d * r, d * r, d, d]
        self.hypernet = _mlp(d, cfg.hyper_hidden, sum(self._sizes))
        self.ln = nn.LayerNorm(d)
        self.register_buffer("gate_offset", torch.zeros(()))

    def params(self, H_ref):
        n, d, r = H_ref.shape[0], self.d, self.rank
        a1, b1f, bias1, a2, b2f, bias2, logits = torch.split(self.hypernet(H_ref), self._sizes, dim=1)
        scale = 1.0 / math.sqrt(d)
        return {
            "A1": a1.reshape(n, d, r) * scale,
            "B1": b1f.reshape(n, d, r) * scale,
            "b1": bias1,
            "A2": a2.reshape(n, d, r) * scale,
            "B2": b2f.reshape(n, d, r) * scale,
            "b2": bias2,
            "gate_logits": logits + self.gate_offset,
        }

    @staticmethod
    def low_rank_mlp(x, theta):
        h = torch.einsum("ndr,nr->nd", theta["A1"], torch.einsum("ndr,nd->nr", theta["B1"], x))
        h = F.gelu(h + theta["b1"])
        y = torch.einsum("ndr,nr->nd", theta["A2"], torch.einsum("ndr,nd->nr", theta["B2"], h))
        return y + theta["b2"]

    def forward(self, H_ref, H_var):
        if H_ref.shape != H_var.shape:
            raise ValueError(f"shape mismatch {tuple(H_ref.shape)} vs {tuple(H_var.shape)}")
        theta = self.params(H_ref)
        g = torch.sigmoid(theta["gate_logits"])
        return self.ln(H_ref + g * self.delta_scale * self.low_rank_mlp(H_var, theta))


class SimpleFuser(nn.Module):
    """Additive fusion baseline: ``LN(H_ref + H_var)``."""

    def __init__(self, d: int, cfg: InteractionConfig = None):
        super().__init__()
        self.ln = nn.LayerNorm(d)

    def forward(self, H_ref, H_var):
        return self.ln(H_ref + H_var)


def hyperfuse(H_ref, H_var, fuser: nn.Module):
    return fuser(H_ref, H_var)
