"""Teacher-guided warm-up -> fusion training: objectives, prototype bank and the step loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from torch import nn

from .graph import EncoderConfig, make_encoder
from .interaction import AlignHead, HyperFuser, InteractionConfig, Refiner, SimpleFuser, align_loss
from .preprocess import mixup_batch, mixup_neighbor_pools

logger = logging.getLogger(__name__)

LOSS_TERMS = ("rec_var", "rec_inv", "align", "conn_var", "conn_inv", "rec_fused", "kd", "conn_fused")
FUSE_TERMS = ("rec_fused", "kd", "conn_fused")


@dataclass
class TrainConfig:
    total_steps: int = 6000
    warm_steps: int = 4000
    align_only_steps: int = 3000
    lambda_rec_var: float = 1.0
    lambda_rec_inv: float = 1.0
    lambda_rec_fused: float = 1.0
    lambda_align: float = 1.0
    lambda_conn_var: float = 0.08
    lambda_conn_inv: float = 0.2
    lambda_conn_fused: float = 0.2
    lambda_kd: float = 0.5
    n_prototypes: int = 24
    conf_threshold: float = 0.75
    conf_pow: float = 1.0
    ema_momentum: float = 0.99
    proto_temperature: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    batch_size: int = None
    mixup: bool = False
    mixup_k: int = 300
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.align_only_steps <= self.warm_steps <= self.total_steps:
            raise ValueError("need 0 <= align_only_steps <= warm_steps <= total_steps")
        for name in ("lambda_rec_var", "lambda_rec_inv", "lambda_rec_fused", "lambda_align", "lambda_conn_var",
                     "lambda_conn_inv", "lambda_conn_fused", "lambda_kd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


# ---------------------------------------------------------------------------
# prototype bank


def bank_view(H: torch.Tensor) -> torch.Tensor:
    """Per-row standardisation scaled to unit norm; prototypes live in this space."""
    d = H.shape[-1]
    mu = H.mean(dim=-1, keepdim=True)
    sd = H.std(dim=-1, unbiased=False, keepdim=True)
    return (H - mu) / (sd + 1e-8) / math.sqrt(d)


class PrototypeBank:
    """EMA cluster centroids of teacher embeddings (in :func:`bank_view` space).

    Logits are ``-d^2 / (temperature * spread)`` where ``spread`` is an EMA of
    the mean squared distance from teacher rows to their nearest prototype, so
    the temperature does not depend on how tight the clusters are.
    """

    def __init__(self, n_prototypes: int = 24, momentum: float = 0.99, temperature: float = 0.1, seed: int = 0):
        self.n_prototypes = n_prototypes
        self.momentum = momentum
        self.temperature = temperature
        self.seed = seed
        self.centers = None
        self.spread = 1.0

    @property
    def initialized(self) -> bool:
        return self.centers is not None

    def initialize(self, H_teacher: torch.Tensor) -> "PrototypeBank":
        V = bank_view(H_teacher.detach())
        k = min(self.n_prototypes, V.shape[0])
        km = KMeans(n_clusters=k, n_init=4, random_state=self.seed).fit(V.double().cpu().numpy())
        self.centers = torch.as_tensor(km.cluster_centers_, dtype=H_teacher.dtype)
        self.spread = _nearest_spread(sq_dists(V, self.centers))
        return self

    def logits(self, H: torch.Tensor) -> torch.Tensor:
        V = bank_view(H)
        return -sq_dists(V, self.centers.to(V.dtype)) / (self.temperature * self.spread)

    def soft_assign(self, H: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(H), dim=1)

    def assign(self, H_teacher: torch.Tensor):
        """``(labels, confidences, q)`` from the teacher embedding, all detached."""
        with torch.no_grad():
            q = self.soft_assign(H_teacher.detach())
            conf, labels = q.max(dim=1)
        return labels, conf, q


def sq_dists(V: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    d2 = (V * V).sum(1, keepdim=True) - 2.0 * V @ C.T + (C * C).sum(1)[None, :]
    return d2.clamp_min(0.0)


def _nearest_spread(d2: torch.Tensor) -> float:
    return max(float(d2.min(dim=1).values.mean()), 1e-12)


def update_prototypes(bank: PrototypeBank, H_teacher: torch.Tensor) -> PrototypeBank:
    """EMA step toward the mean of hard-assigned teacher rows; empty prototypes stay put.

    Initialises the bank with k-means on the first call.
    """
    if not bank.initialized:
        return bank.initialize(H_teacher)
    with torch.no_grad():
        V = bank_view(H_teacher.detach()).to(bank.centers.dtype)
        c = bank.centers
        d2 = sq_dists(V, c)
        hard = d2.argmin(dim=1)
        new = c.clone()
        for k in range(c.shape[0]):
            members = hard == k
            if members.any():
                new[k] = bank.momentum * c[k] + (1.0 - bank.momentum) * V[members].mean(dim=0)
        bank.centers = new
        bank.spread = bank.momentum * bank.spread + (1.0 - bank.momentum) * _nearest_spread(sq_dists(V, new))
    return bank


def conn_loss(H: torch.Tensor, bank: PrototypeBank, labels, confidences, threshold: float) -> torch.Tensor:
    """Cross-entropy of ``H``'s prototype assignment against teacher pseudo-labels, confident cells only."""
    mask = confidences >= threshold
    if not bool(mask.any()):
        logger.debug("no cell above confidence %.3f; connectivity loss is 0", threshold)
        return H.new_zeros(())
    return F.cross_entropy(bank.logits(H[mask]), labels[mask])


def kd_loss(H_fused: torch.Tensor, bank: PrototypeBank, q_teacher: torch.Tensor, conf_threshold: float,
            conf_pow: float) -> torch.Tensor:
    """Confidence-weighted ``CE(q_teacher, p_student)``; weight ``max(q)^pow`` above the threshold, else 0."""
    q = q_teacher.detach()
    conf = q.max(dim=1).values
    w = torch.where(conf >= conf_threshold, conf ** conf_pow, torch.zeros_like(conf))
    total = w.sum()
    if float(total) == 0.0:
        return H_fused.new_zeros(())
    log_p = torch.log_softmax(bank.logits(H_fused), dim=1)
    ce = -(q * log_p).sum(dim=1)
    return (w * ce).sum() / total


def rec_loss(X_hat: torch.Tensor, X: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius error divided by the number of entries."""
    if X.numel() == 0:
        return X_hat.new_zeros(())
    return ((X_hat - X) ** 2).mean()


# ---------------------------------------------------------------------------
# network


class DualStreamNet(nn.Module):
    def __init__(self, n_var: int, n_inv: int, enc_cfg: EncoderConfig, int_cfg: InteractionConfig):
        super().__init__()
        d = enc_cfg.d
        self.enc_var = make_encoder(n_var, enc_cfg)
        self.enc_inv = make_encoder(n_inv, enc_cfg)
        self.align_head = AlignHead(d, int_cfg.proj_dim)
        self.refiner = Refiner(d, int_cfg)
        self.fuser = SimpleFuser(d) if int_cfg.simple_fusion else HyperFuser(d, int_cfg)
        self.fused_decoder = nn.Sequential(nn.Linear(d, enc_cfg.hidden), nn.GELU(),
                                           nn.Linear(enc_cfg.hidden, n_var + n_inv))

    def forward(self, X_var, X_inv, step=None, refine=True, fuse=True):
        H_var, Xh_var = self.enc_var(X_var, step)
        H_inv, Xh_inv = self.enc_inv(X_inv, step)
        H_ref = self.refiner(H_inv, H_var) if refine else H_inv
        out = {"H_var": H_var, "Xh_var": Xh_var, "H_inv": H_inv, "Xh_inv": Xh_inv, "H_ref": H_ref}
        if fuse:
            out["H_fused"] = self.fuser(H_ref, H_var)
            out["Xh_fused"] = self.fused_decoder(out["H_fused"])
        return out


@dataclass
class TrainState:
    model: DualStreamNet
    optimizer: torch.optim.Optimizer
    bank: PrototypeBank
    cfg: TrainConfig
    log: list = field(default_factory=list)


def init_state(n_var: int, n_inv: int, enc_cfg: EncoderConfig, int_cfg: InteractionConfig,
               cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = DualStreamNet(n_var, n_inv, enc_cfg, int_cfg).to(cfg.torch_dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    bank = PrototypeBank(cfg.n_prototypes, cfg.ema_momentum, cfg.proto_temperature, cfg.seed)
    return TrainState(model, opt, bank, cfg)


def compute_losses(state: TrainState, batch: dict, step: int):
    """Forward pass and every loss term (unweighted) for one step. Returns ``(terms, outputs, flags)``."""
    cfg = state.cfg
    interact = step >= cfg.align_only_steps
    fuse = step >= cfg.warm_steps
    out = state.model(batch["X_var_in"], batch["X_inv_in"], step=step, refine=interact, fuse=fuse)
    flags = {"interact": interact, "fuse": fuse, "conf_frac": 0.0}
    zero = out["H_var"].new_zeros(())
    terms = dict.fromkeys(LOSS_TERMS, zero)
    terms["rec_var"] = rec_loss(out["Xh_var"], batch["X_var"])
    terms["rec_inv"] = rec_loss(out["Xh_inv"], batch["X_inv"])
    terms["align"] = align_loss(out["H_var"], out["H_inv"], state.model.align_head)
    teacher = out["H_ref"].detach()
    if interact:
        if not state.bank.initialized:
            state.bank.initialize(teacher)
        labels, conf, q = state.bank.assign(teacher)
        flags["conf_frac"] = float((conf >= cfg.conf_threshold).float().mean())
        terms["conn_var"] = conn_loss(out["H_var"], state.bank, labels, conf, cfg.conf_threshold)
        terms["conn_inv"] = conn_loss(out["H_inv"], state.bank, labels, conf, cfg.conf_threshold)
        if fuse:
            target = torch.cat([batch["X_var"], batch["X_inv"]], dim=1)
            terms["rec_fused"] = rec_loss(out["Xh_fused"], target)
            terms["kd"] = kd_loss(out["H_fused"], state.bank, q, cfg.conf_threshold, cfg.conf_pow)
            terms["conn_fused"] = conn_loss(out["H_fused"], state.bank, labels, conf, cfg.conf_threshold)
    return terms, out, flags


def weights(cfg: TrainConfig) -> dict:
    return {
        "rec_var": cfg.lambda_rec_var, "rec_inv": cfg.lambda_rec_inv, "align": cfg.lambda_align,
        "conn_var": cfg.lambda_conn_var, "conn_inv": cfg.lambda_conn_inv,
        "rec_fused": cfg.lambda_rec_fused, "kd": cfg.lambda_kd, "conn_fused": cfg.lambda_conn_fused,
    }


def total_loss(terms: dict, cfg: TrainConfig, fuse: bool) -> torch.Tensor:
    w = weights(cfg)
    warm = sum(w[k] * terms[k] for k in LOSS_TERMS if k not in FUSE_TERMS)
    if not fuse:
        return warm
    return warm + sum(w[k] * terms[k] for k in FUSE_TERMS)


def train_step(state: TrainState, batch: dict, step: int) -> dict:
    """One optimiser update; returns the weighted loss breakdown for the log."""
    cfg = state.cfg
    state.model.train()
    for name in ("X_var_in", "X_inv_in"):
        if not bool(torch.isfinite(batch[name]).all()):
            raise FloatingPointError(f"non-finite values in {name} at step {step}")
    terms, out, flags = compute_losses(state, batch, step)
    w = weights(cfg)
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite loss term {name!r} at step {step}")
    loss = total_loss(terms, cfg, flags["fuse"])
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    nn.utils.clip_grad_norm_(state.model.parameters(), cfg.clip_norm)
    state.optimizer.step()
    if flags["interact"]:
        update_prototypes(state.bank, out["H_ref"].detach())

    record = {"step": step}
    for name in LOSS_TERMS:
        record[name] = w[name] * float(terms[name].detach())
    record["total"] = float(loss.detach())
    record["conf_frac"] = flags["conf_frac"]
    record["i_fuse"] = int(flags["fuse"])
    record["rebuild"] = int(getattr(state.model.enc_var.graph, "differentiable", False))
    state.log.append(record)
    return record


def _batches(n: int, batch_size, rng: np.random.Generator):
    if batch_size is None or batch_size >= n:
        yield np.arange(n)
        return
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def run_schedule(state: TrainState, X_var_target, X_inv, domains=None, callback=None):
    """Run ``total_steps`` optimiser steps (one per batch) over fixed arrays."""
    cfg = state.cfg
    dt = cfg.torch_dtype
    n = X_inv.shape[0]
    rng = np.random.default_rng(cfg.seed)
    Tv = torch.as_tensor(np.asarray(X_var_target), dtype=dt)
    Ti = torch.as_tensor(np.asarray(X_inv), dtype=dt)
    pools = None
    if cfg.mixup:
        if domains is None:
            raise ValueError("mixup needs domain labels")
        full = np.concatenate([np.asarray(X_var_target), np.asarray(X_inv)], axis=1)
        pools = mixup_neighbor_pools(full, domains, cfg.mixup_k)
    step = 0
    while step < cfg.total_steps:
        for idx in _batches(n, cfg.batch_size, rng):
            if step >= cfg.total_steps:
                break
            xv, xi = Tv[idx], Ti[idx]
            xv_in, xi_in = xv, xi
            if pools is not None:
                local = {int(g): k for k, g in enumerate(idx)}
                sub_pools = [np.array([local[j] for j in pools[g] if j in local] or [k])
                             for k, g in enumerate(idx)]
                mixed = mixup_batch(torch.cat([xv, xi], dim=1).numpy(), sub_pools, rng)
                mixed = torch.as_tensor(mixed, dtype=dt)
                xv_in, xi_in = mixed[:, :xv.shape[1]], mixed[:, xv.shape[1]:]
            batch = {"X_var": xv, "X_inv": xi, "X_var_in": xv_in, "X_inv_in": xi_in}
            record = train_step(state, batch, step)
            if callback is not None:
                callback(record)
            step += 1
    return state


@torch.no_grad()
def embed(model: DualStreamNet, X_var, X_inv, refine: bool = True) -> dict:
    """Evaluation pass on cached graphs; returns numpy embeddings keyed by stream."""
    model.eval()
    dt = next(model.parameters()).dtype
    Tv = torch.as_tensor(np.asarray(X_var), dtype=dt)
    Ti = torch.as_tensor(np.asarray(X_inv), dtype=dt)
    out = model(Tv, Ti, step=None, refine=refine)
    return {
        "variant_stream": out["H_var"].double().numpy(),
        "anchor_stream": out["H_inv"].double().numpy(),
        "refined_anchor": out["H_ref"].double().numpy(),
        "fused": out["H_fused"].double().numpy(),
    }


def write_training_log(log, path):
    cols = ["step", *LOSS_TERMS, "total", "conf_frac", "i_fuse", "rebuild"]
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for rec in log:
            fh.write("\t".join(repr(rec[c]) if isinstance(rec[c], float) else str(rec[c]) for c in cols) + "\n")
