"""Adaptive modality fusion with balance and alignment regularizers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .adapter import Affine
from .errors import DomainError, ParameterError, ShapeError


@dataclass
class FusionGate:
    """Affine gate from the concatenated modality embeddings to one logit per modality."""

    affine: Affine
    modality_order: list

    @classmethod
    def init(cls, modality_order, dim, rng, std=0.01, bias=True):
        m = len(modality_order)
        return cls(Affine.init("fusion.gate", m * dim, m, rng, std, bias), list(modality_order))

    def parameters(self):
        return self.affine.parameters()


@dataclass
class FusedBatch:
    e: nx.Var       # (B, d)
    alpha: nx.Var   # (B, M)
    stacked: nx.Var  # (B, M, d)
    present: np.ndarray


@dataclass
class FusedItem:
    e: np.ndarray
    alpha: np.ndarray
    present_mask: np.ndarray


def _present(zs, present):
    n = zs[0].shape[0]
    if present is None:
        present = np.ones((n, len(zs)), dtype=bool)
    present = np.asarray(present, dtype=bool).reshape(n, len(zs))
    if not present.any(axis=1).all():
        raise DomainError("an item has no present modality")
    return present


def fuse_batch(gate: FusionGate, zs, present=None) -> FusedBatch:
    """alpha = softmax over present-modality logits; e = sum_m alpha_m z_m.

    Absent slots enter the gate as zero vectors and their logits are
    excluded from the softmax.
    """
    zs = [nx.as_var(z) for z in zs]
    if len(zs) != len(gate.modality_order):
        raise ShapeError(f"expected {len(gate.modality_order)} modality embeddings, got {len(zs)}")
    present = _present(zs, present)
    masked = [nx.mul(z, present[:, j:j + 1].astype(np.float64)) for j, z in enumerate(zs)]
    logits = gate.affine(nx.concat(masked, axis=1))
    alpha = nx.masked_softmax(logits, present)
    stacked = nx.stack(zs, axis=1)
    return FusedBatch(nx.mix(alpha, stacked), alpha, stacked, present)


def fuse_uniform_batch(zs, present=None) -> FusedBatch:
    zs = [nx.as_var(z) for z in zs]
    present = _present(zs, present)
    alpha = present / present.sum(axis=1, keepdims=True)
    stacked = nx.stack(zs, axis=1)
    return FusedBatch(nx.mix(alpha, stacked), nx.Var(alpha), stacked, present)


def _single(zs, present_mask):
    zs = [np.asarray(z, dtype=np.float64)[None, :] for z in zs]
    if len({z.shape[1] for z in zs}) != 1:
        raise ShapeError("modality embeddings differ in length")
    present = None if present_mask is None else np.asarray(present_mask, dtype=bool)[None, :]
    return zs, present


def fuse(gate: FusionGate, z_by_modality, present_mask=None) -> FusedItem:
    zs, present = _single(z_by_modality, present_mask)
    out = fuse_batch(gate, zs, present)
    return FusedItem(out.e.value[0], out.alpha.value[0], out.present[0])


def fuse_uniform(z_by_modality, present_mask=None) -> FusedItem:
    zs, present = _single(z_by_modality, present_mask)
    out = fuse_uniform_batch(zs, present)
    return FusedItem(out.e.value[0], out.alpha.value[0], out.present[0])


def fusion_balance_loss(batch_alphas) -> nx.Var:
    """KL(batch-mean alpha || uniform over modalities)."""
    alphas = nx.as_var(batch_alphas)
    if alphas.value.ndim != 2 or alphas.shape[0] == 0:
        raise ParameterError("fusion_balance_loss needs a non-empty (B, M) batch")
    return nx.kl_uniform(nx.mean_rows(alphas))


def alignment_loss_batch(fused: FusedBatch) -> nx.Var:
    """Sum over items and present modalities of ||e - z_m||^2."""
    b, m, d = fused.stacked.shape
    diff = nx.sub(fused.stacked, nx.reshape(fused.e, (b, 1, d)))
    sq = nx.mul(nx.mul(diff, diff), fused.present[:, :, None].astype(np.float64))
    return nx.sum_all(sq)


def alignment_loss(e, z_by_modality, present_mask=None) -> float:
    e = np.asarray(e, dtype=np.float64)
    zs = [np.asarray(z, dtype=np.float64) for z in z_by_modality]
    if any(z.shape != e.shape for z in zs):
        raise ShapeError("alignment_loss: dimension mismatch")
    present = np.ones(len(zs), dtype=bool) if present_mask is None else np.asarray(present_mask, dtype=bool)
    fused = FusedBatch(nx.Var(e[None, :]), None, nx.Var(np.stack(zs)[None]), present[None, :])
    return float(alignment_loss_batch(fused))
