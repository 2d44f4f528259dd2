"""Modality-specific mixture-of-experts adapters.

Each adapter maps a raw modality feature ``h`` to an adapted embedding
``z = sum_{k in T} g_hat_k(h) * (W_k h + b_k)`` where ``T`` holds the
top-k gate logits and ``g_hat`` is the gate softmax renormalized over
``T``. The dense gate softmax is kept for the load-balancing loss.

Three layouts are supported:

* dedicated router + dedicated experts per modality (default)
* one router per modality over a shared expert bank
* a joint router + experts over the concatenation of all modalities
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ParameterError, ShapeError


@dataclass
class Affine:
    weight: nx.Parameter
    bias: nx.Parameter | None = None

    @classmethod
    def init(cls, name, in_dim, out_dim, rng, std=0.01, bias=True):
        w = nx.Parameter(rng.normal(0.0, std, size=(in_dim, out_dim)), f"{name}.W")
        b = nx.Parameter(np.zeros(out_dim), f"{name}.b") if bias else None
        return cls(w, b)

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x):
        return nx.affine(x, self.weight, self.bias)


@dataclass
class ExpertBank:
    """K affine experts stored as one (K, in, out) tensor."""

    weight: nx.Parameter
    bias: nx.Parameter | None = None

    @classmethod
    def init(cls, name, num_experts, in_dim, out_dim, rng, std=0.01, bias=True):
        w = nx.Parameter(rng.normal(0.0, std, size=(num_experts, in_dim, out_dim)), f"{name}.W")
        b = nx.Parameter(np.zeros((num_experts, out_dim)), f"{name}.b") if bias else None
        return cls(w, b)

    @property
    def num_experts(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[2]

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x):
        return nx.expert_bank(x, self.weight, self.bias)


@dataclass
class MoEAdapter:
    modality: str
    top_k: int
    gate: Affine
    experts: ExpertBank

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ParameterError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")
        if self.gate.out_dim != self.num_experts or self.gate.in_dim != self.experts.in_dim:
            raise ShapeError("gate and expert shapes disagree")

    @classmethod
    def init(cls, modality, in_dim, out_dim, num_experts, top_k, rng, std=0.01, bias=True, experts=None):
        gate = Affine.init(f"adapter.{modality}.gate", in_dim, num_experts, rng, std)
        if experts is None:
            experts = ExpertBank.init(f"adapter.{modality}.experts", num_experts, in_dim, out_dim, rng, std, bias)
        return cls(modality, top_k, gate, experts)

    @property
    def num_experts(self):
        return self.experts.num_experts

    @property
    def in_dim(self):
        return self.experts.in_dim

    @property
    def out_dim(self):
        return self.experts.out_dim

    def parameters(self):
        return self.gate.parameters() + self.experts.parameters()


@dataclass
class AdapterBatch:
    z: nx.Var            # (B, out_dim)
    dense_gate: nx.Var   # (B, K)
    sparse_gate: nx.Var  # (B, K), exactly top_k nonzeros per row
    selected: np.ndarray  # (B, K) bool


@dataclass
class AdapterOutput:
    z: np.ndarray
    dense_gate: np.ndarray
    selected: np.ndarray
    sparse_gate: np.ndarray


def adapt_batch(adapter: MoEAdapter, h, selected=None) -> AdapterBatch:
    """Adapter forward for a (B, in_dim) batch.

    ``selected`` freezes the routing (used by gradient checks); by default
    it is recomputed from the gate logits.
    """
    h = nx.as_var(h)
    if h.value.ndim != 2 or h.shape[1] != adapter.in_dim:
        raise ShapeError(f"{adapter.modality}: expected (B, {adapter.in_dim}) input, got {h.shape}")
    logits = adapter.gate(h)
    if selected is None:
        selected = nx.top_k_mask(logits.value, adapter.top_k)
    dense = nx.masked_softmax(logits)
    sparse = nx.masked_softmax(logits, selected)
    z = nx.mix(sparse, adapter.experts(h))
    return AdapterBatch(z, dense, sparse, selected)


def adapt(adapter: MoEAdapter, h) -> AdapterOutput:
    """Single-vector adapter forward returning plain arrays."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or h.size != adapter.in_dim:
        raise ShapeError(f"{adapter.modality}: expected length {adapter.in_dim}, got shape {h.shape}")
    out = adapt_batch(adapter, h[None, :])
    return AdapterOutput(out.z.value[0], out.dense_gate.value[0],
                         np.flatnonzero(out.selected[0]), out.sparse_gate.value[0])


def adapt_joint_router(shared: MoEAdapter, h_all) -> AdapterOutput:
    """Joint-router layout: one router and one expert bank over concatenated modalities."""
    return adapt(shared, h_all)


def adapt_shared_experts(router: Affine, shared_experts: ExpertBank, h, top_k: int, modality="shared") -> AdapterOutput:
    """Per-modality router over a shared expert bank."""
    return adapt(MoEAdapter(modality, top_k, router, shared_experts), h)


def adapter_balance_loss(batch_dense_gates, weights=None) -> nx.Var:
    """Sum over modalities of KL(batch-mean dense gate || uniform).

    ``batch_dense_gates`` holds one (B, K) gate batch per modality.
    ``weights`` optionally gives a (B,) 0/1 row mask per modality so that
    items lacking the modality do not enter its mean.
    """
    total = None
    for j, gates in enumerate(batch_dense_gates):
        gates = nx.as_var(gates)
        if gates.value.ndim != 2 or gates.shape[0] == 0:
            raise ParameterError("adapter_balance_loss needs a non-empty (B, K) gate batch")
        if weights is not None and weights[j] is not None:
            w = np.asarray(weights[j], dtype=np.float64)
            if w.sum() == 0:
                continue
            mean = nx.scale(nx.sum_axis(nx.mul(gates, w[:, None]), 0), 1.0 / w.sum())
        else:
            mean = nx.mean_rows(gates)
        term = nx.kl_uniform(mean)
        total = term if total is None else nx.add(total, term)
    if total is None:
        raise ParameterError("adapter_balance_loss: no modality had any rows")
    return total
