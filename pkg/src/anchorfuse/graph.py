"""Learnable gene-gene graphs with cached topology and multi-scale diffusion encoders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import sparse
from torch import nn


@dataclass
class EncoderConfig:
    k_top: int = 22
    temperature: float = 0.1
    scales: tuple = (1, 2, 3, 4, 5)
    xi1: float = 0.8
    xi2: float = 0.2
    hp_scale: int = None  # reference power m; defaults to max(scales)
    rebuild_every: int = 25
    attn_dim: int = 32
    hidden: int = 256
    d: int = 64
    linear: bool = False

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales or min(self.scales) < 1:
            raise ValueError("scales must be positive integers")
        if self.temperature <= 0:
            raise ValueError("graph temperature must be positive")
        if self.rebuild_every < 1:
            raise ValueError("rebuild_every must be >= 1")
        if self.hp_scale is not None and self.hp_scale < 1:
            raise ValueError("hp_scale must be a positive integer")

    @property
    def reference_power(self) -> int:
        return max(self.scales) if self.hp_scale is None else int(self.hp_scale)


@dataclass(eq=False)
class FeatureGraph:
    """Normalised adjacency ``P`` plus detached powers.

    ``P`` keeps its autograd history on the step it was built; ``P_cached`` is
    the detached copy used on every later step.
    """

    P: torch.Tensor
    P_cached: torch.Tensor
    cached_powers: dict = field(default_factory=dict)
    rebuild_period: int = 25
    steps_since_rebuild: int = 0
    differentiable: bool = True

    def one_hop(self) -> torch.Tensor:
        return self.P if self.differentiable else self.P_cached

    def power(self, s: int) -> torch.Tensor:
        if s == 1:
            return self.one_hop()
        if s not in self.cached_powers:
            raise KeyError(f"no cached power for scale {s}")
        return self.cached_powers[s]

    def to_scipy(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(self.P_cached.detach().cpu().numpy())


def top_k_sparsify(S: torch.Tensor, k: int) -> torch.Tensor:
    if k <= 0:
        return torch.zeros_like(S)
    idx = torch.topk(S, k, dim=1).indices
    mask = torch.zeros_like(S).scatter_(1, idx, 1.0)
    return S * mask


def sym_normalize(A: torch.Tensor) -> torch.Tensor:
    inv_sqrt = A.sum(dim=1).clamp_min(1e-12).rsqrt()
    return inv_sqrt[:, None] * A * inv_sqrt[None, :]


def build_graph(Q: torch.Tensor, K: torch.Tensor, temperature: float, k_top: int, powers=(),
                rebuild_period: int = 25) -> FeatureGraph:
    """``relu(Q K^T / tau)`` with zero diagonal -> row top-k -> max-symmetrise -> self-loops -> sym-normalise."""
    g = Q.shape[0]
    if k_top >= g and g > 0:
        raise ValueError(f"k_top={k_top} must be smaller than the number of genes ({g})")
    S = torch.relu(Q @ K.T / temperature)
    eye = torch.eye(g, dtype=S.dtype, device=S.device)
    S = S * (1.0 - eye)
    A = top_k_sparsify(S, k_top)
    A = torch.maximum(A, A.T) + eye
    P = sym_normalize(A)
    cached = P.detach()
    cache = {}
    for s in sorted(set(int(x) for x in powers if int(x) > 1)):
        cache[s] = torch.linalg.matrix_power(cached, s)
    return FeatureGraph(P=P, P_cached=cached, cached_powers=cache, rebuild_period=rebuild_period,
                        steps_since_rebuild=0, differentiable=True)


def diffuse(X: torch.Tensor, graph: FeatureGraph, k: int, xi1: float, xi2: float, m: int):
    """Low/high-pass features at scale ``k``.

    ``Z_low = X P^k`` and ``Z_high = xi1 (X - Z_low) + xi2 X (I - P^m)``; only the
    one-hop product on a rebuild step carries gradient into the graph.
    """
    Z_low = X @ graph.power(k)
    Z_high = xi1 * (X - Z_low) + xi2 * (X - X @ graph.power(m))
    return Z_low, Z_high


class GraphLearner(nn.Module):
    def __init__(self, n_genes: int, attn_dim: int = 32, temperature: float = 0.1, k_top: int = 22):
        super().__init__()
        self.Q = nn.Parameter(torch.randn(n_genes, attn_dim) / attn_dim ** 0.5)
        self.K = nn.Parameter(torch.randn(n_genes, attn_dim) / attn_dim ** 0.5)
        self.temperature = temperature
        self.k_top = k_top

    def build(self, powers=(), rebuild_period=25) -> FeatureGraph:
        return build_graph(self.Q, self.K, self.temperature, self.k_top, powers, rebuild_period)


def maybe_rebuild(graph, learner: GraphLearner, step: int, powers=(), period: int = 25) -> FeatureGraph:
    """Rebuild when no graph exists or ``step % period == 0``; otherwise reuse the detached cache."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if graph is None or step % period == 0:
        return learner.build(powers, period)
    graph.differentiable = False
    graph.steps_since_rebuild += 1
    return graph


def _mlp(d_in, hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, d_out))


class StreamEncoder(nn.Module):
    """Graph-diffusion encoder for one gene stream, with its own reconstruction decoder."""

    def __init__(self, n_genes: int, cfg: EncoderConfig = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        self.cfg = cfg
        self.n_genes = n_genes
        k_top = min(cfg.k_top, max(n_genes - 1, 0))
        self.learner = GraphLearner(n_genes, cfg.attn_dim, cfg.temperature, k_top)
        self.scale_logits = nn.Parameter(torch.zeros(len(cfg.scales)))
        self.head = _mlp(2 * n_genes, cfg.hidden, cfg.d)
        self.decoder = _mlp(cfg.d, cfg.hidden, n_genes)
        self.graph = None

    @property
    def powers(self):
        return tuple(self.cfg.scales) + (self.cfg.reference_power,)

    def scale_weights(self) -> torch.Tensor:
        return torch.softmax(self.scale_logits, dim=0)

    def refresh_graph(self, step=None) -> FeatureGraph:
        if step is None:
            if self.graph is None:
                self.graph = self.learner.build(self.powers, self.cfg.rebuild_every)
            self.graph.differentiable = False
        else:
            self.graph = maybe_rebuild(self.graph, self.learner, step, self.powers, self.cfg.rebuild_every)
        return self.graph

    def features(self, X: torch.Tensor) -> torch.Tensor:
        w = self.scale_weights()
        out = 0.0
        for j, k in enumerate(self.cfg.scales):
            z_low, z_high = diffuse(X, self.graph, k, self.cfg.xi1, self.cfg.xi2, self.cfg.reference_power)
            out = out + w[j] * torch.cat([z_low, z_high], dim=1)
        return out

    def forward(self, X: torch.Tensor, step=None):
        """Return ``(H, X_hat)``. ``step`` drives the rebuild clock; ``None`` reuses the cache."""
        self.refresh_graph(step)
        H = self.head(self.features(X))
        return H, self.decoder(H)


class LinearStreamEncoder(nn.Module):
    """Single linear map in place of graph diffusion; same decoder shape."""

    def __init__(self, n_genes: int, cfg: EncoderConfig = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        self.cfg = cfg
        self.n_genes = n_genes
        self.proj = nn.Linear(n_genes, cfg.d)
        self.decoder = _mlp(cfg.d, cfg.hidden, n_genes)
        self.graph = None

    def refresh_graph(self, step=None):
        return None

    def forward(self, X: torch.Tensor, step=None):
        H = self.proj(X)
        return H, self.decoder(H)


def make_encoder(n_genes: int, cfg: EncoderConfig) -> nn.Module:
    return LinearStreamEncoder(n_genes, cfg) if cfg.linear else StreamEncoder(n_genes, cfg)


def encode_stream(X, encoder: nn.Module):
    """Evaluate an encoder on a numpy or torch matrix with the cached graph; returns tensors."""
    param = next(encoder.parameters())
    X = torch.as_tensor(np.asarray(X) if not torch.is_tensor(X) else X, dtype=param.dtype)
    if X.shape[0] == 0:
        return X.new_zeros((0, encoder.cfg.d)), X.new_zeros((0, encoder.n_genes))
    return encoder(X, step=None)
