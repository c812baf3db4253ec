"""End-to-end integrator: gene partition -> domain gate -> dual-stream training -> embeddings."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ExpressionDataset
from .gate import GateConfig, build_gate
from .graph import EncoderConfig
from .interaction import InteractionConfig
from .partition import QuadrantGeneSelector
from .preprocess import select_hvgs
from .trainer import TrainConfig, embed, init_state, run_schedule
from .validation import check_domains, check_expression

logger = logging.getLogger(__name__)

ABLATIONS = ("random_split", "no_gate", "no_align", "no_refine", "simple_fusion", "no_kd", "no_conn",
             "linear_encoder")


def ablate(flags, gate: GateConfig, enc: EncoderConfig, inter: InteractionConfig, train: TrainConfig):
    """Return copies of the configs with each requested ablation applied.

    ``random_split`` is handled by the selector and leaves these configs alone.
    """
    flags = set(flags)
    unknown = flags - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation(s): {sorted(unknown)}")
    gate = dataclasses.replace(gate, enabled=gate.enabled and "no_gate" not in flags)
    enc = dataclasses.replace(enc, linear=enc.linear or "linear_encoder" in flags)
    inter_kw = {}
    if "no_refine" in flags:
        inter_kw.update(alpha_max=0.0, alpha_init=0.0)
    if "simple_fusion" in flags:
        inter_kw["simple_fusion"] = True
    inter = dataclasses.replace(inter, **inter_kw)
    train_kw = {}
    if "no_align" in flags:
        train_kw["lambda_align"] = 0.0
    if "no_kd" in flags:
        train_kw["lambda_kd"] = 0.0
    if "no_conn" in flags:
        train_kw["lambda_conn_fused"] = 0.0
    train = dataclasses.replace(train, **train_kw)
    return gate, enc, inter, train


def hvg_pool(X, domains, n_hvgs) -> np.ndarray:
    """Sorted column indices of the HVG pool; every gene when ``n_hvgs`` is None or too large."""
    g = X.shape[1]
    if n_hvgs is None or n_hvgs >= g:
        return np.arange(g)
    d = ExpressionDataset(values=X, gene_ids=[f"G{j}" for j in range(g)],
                          cell_ids=[f"C{i}" for i in range(X.shape[0])], domains=domains, layer="lognorm")
    return np.sort(np.asarray(select_hvgs(d, n_hvgs)))


class AnchorFuseIntegrator(TransformerMixin, BaseEstimator):
    """Batch-integrated cell embeddings from lognormalised expression and domain labels.

    Parameters
    ----------
    n_hvgs : int or None
        Size of the highly-variable gene pool; ``None`` or a value at least the
        number of genes keeps every gene.
    tau_dom, tau_str : float
        Quadrant thresholds for anchor selection.
    selector_params : dict or None
        Extra :class:`QuadrantGeneSelector` settings (``n_pcs``, ``n_neighbors``,
        ``leiden_resolution``, ``epsilon``).
    gate_config, encoder_config, interaction_config, train_config : dataclass or None
        Component settings; ``None`` uses the defaults.
    ablations : tuple of str
        Any of ``random_split, no_gate, no_align, no_refine, simple_fusion,
        no_kd, no_conn, linear_encoder``.
    random_state : int
        Seeds the selector, gate clustering and training.

    Attributes
    ----------
    hvg_index_ : ndarray of int
    selector_ : QuadrantGeneSelector
    partition_ : GenePartition
        Indices refer to the HVG pool.
    gamma_ : ndarray (cells, variant genes)
    state_ : TrainState
    embeddings_ : dict of ndarray
        ``variant_stream, anchor_stream, refined_anchor, fused``.
    training_log_ : list of dict
    """

    def __init__(self, n_hvgs=2000, tau_dom=0.0, tau_str=0.0, selector_params=None, gate_config=None,
                 encoder_config=None, interaction_config=None, train_config=None, ablations=(), random_state=0):
        self.n_hvgs = n_hvgs
        self.tau_dom = tau_dom
        self.tau_str = tau_str
        self.selector_params = selector_params
        self.gate_config = gate_config
        self.encoder_config = encoder_config
        self.interaction_config = interaction_config
        self.train_config = train_config
        self.ablations = ablations
        self.random_state = random_state

    def _configs(self):
        seed = self.random_state
        gate = dataclasses.replace(self.gate_config or GateConfig(), seed=seed)
        train = dataclasses.replace(self.train_config or TrainConfig(), seed=seed)
        return ablate(self.ablations, gate, self.encoder_config or EncoderConfig(),
                      self.interaction_config or InteractionConfig(), train)

    def _streams(self, X_pool, domains, gate_cfg):
        g = self.partition_.n_variants
        Xo = X_pool[:, self.partition_.order]
        X_var, X_inv = Xo[:, :g], Xo[:, g:]
        gamma = build_gate(X_var, domains, gate_cfg, X_cluster=X_inv)
        return X_var * (1.0 - gate_cfg.strength * gamma), X_inv, gamma

    def fit(self, X, domains, y=None, callback=None):
        if isinstance(X, ExpressionDataset):
            domains = X.domains if domains is None else domains
            X = X.values
        X = check_expression(X)
        domains = check_domains(domains, X.shape[0])
        gate_cfg, enc_cfg, int_cfg, train_cfg = self._configs()

        self.hvg_index_ = hvg_pool(X, domains, self.n_hvgs)
        X_pool = X[:, self.hvg_index_]
        self.selector_ = QuadrantGeneSelector(
            tau_dom=self.tau_dom, tau_str=self.tau_str, random_split="random_split" in set(self.ablations),
            random_state=self.random_state, **(self.selector_params or {}),
        ).fit(X_pool, domains)
        self.partition_ = self.selector_.partition_
        if self.partition_.n_variants == 0 or self.partition_.n_anchors == 0:
            raise ValueError(
                f"degenerate partition ({self.partition_.n_variants} variants, "
                f"{self.partition_.n_anchors} anchors); adjust tau_dom / tau_str"
            )
        logger.info("partition: %d variants, %d anchors", self.partition_.n_variants, self.partition_.n_anchors)

        X_var, X_inv, self.gamma_ = self._streams(X_pool, domains, gate_cfg)
        self.state_ = init_state(X_var.shape[1], X_inv.shape[1], enc_cfg, int_cfg, train_cfg)
        run_schedule(self.state_, X_var, X_inv, domains, callback=callback)
        self.training_log_ = self.state_.log
        self.embeddings_ = embed(self.state_.model, X_var, X_inv)
        self.configs_ = {"gate": gate_cfg, "encoder": enc_cfg, "interaction": int_cfg, "train": train_cfg}
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, domains=None):
        """Fused embedding for ``X``; the gate is rebuilt on ``X`` when domains are given, else skipped."""
        check_is_fitted(self, "embeddings_")
        if isinstance(X, ExpressionDataset):
            domains = X.domains if domains is None else domains
            X = X.values
        X = check_expression(X, n_features=self.n_features_in_)
        X_pool = X[:, self.hvg_index_]
        gate_cfg = self.configs_["gate"]
        if domains is None:
            gate_cfg = dataclasses.replace(gate_cfg, enabled=False)
        else:
            domains = check_domains(domains, X.shape[0])
        X_var, X_inv, _ = self._streams(X_pool, domains, gate_cfg)
        return embed(self.state_.model, X_var, X_inv)["fused"]

    def fit_transform(self, X, domains=None, y=None, **fit_params):
        return self.fit(X, domains, **fit_params).embeddings_["fused"]

    @property
    def variant_genes_(self) -> np.ndarray:
        """Variant genes as column indices of the input matrix."""
        check_is_fitted(self, "partition_")
        return self.hvg_index_[self.partition_.variants]

    @property
    def anchor_genes_(self) -> np.ndarray:
        check_is_fitted(self, "partition_")
        return self.hvg_index_[self.partition_.anchors]
