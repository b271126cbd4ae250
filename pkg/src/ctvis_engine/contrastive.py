"""Contrastive items built from the memory bank and their embedding loss.

For an item with anchor ``v``, positive ``k+`` and negatives ``k-``::

    L = log(1 + sum_k exp(v.k- - v.k+))

Bank-side embeddings (positives and negatives) are treated as constants during
training; only the anchor gradient reaches the embedding head.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Mapping

import numpy as np

from .embedding_core import logsumexp
from .errors import DimensionMismatch
from .memory_bank import MemoryBank


class NegativeMode(str, Enum):
    MAJOR_ONLY = "major_only"
    MAJOR_PLUS_LOCAL = "major_plus_local"
    MAJOR_PLUS_GLOBAL = "major_plus_global"
    SUPPLEMENTARY_ONLY = "supplementary_only"

    @property
    def uses_major(self) -> bool:
        return self is not NegativeMode.SUPPLEMENTARY_ONLY

    @property
    def uses_supplementary(self) -> bool:
        return self is not NegativeMode.MAJOR_ONLY


@dataclass
class ContrastiveItem:
    anchor: np.ndarray
    positive: np.ndarray
    major: np.ndarray  # (n_major, C)
    supplementary: np.ndarray  # (n_supp, C)
    key: Hashable = None  # identity of the anchor, for bookkeeping

    def __post_init__(self):
        dim = self.anchor.shape[0]
        self.major = np.asarray(self.major, dtype=np.float64).reshape(-1, dim)
        self.supplementary = np.asarray(self.supplementary, dtype=np.float64).reshape(-1, dim)
        if self.positive.shape != (dim,):
            raise DimensionMismatch("positive and anchor dimensions differ")

    @property
    def negatives(self) -> np.ndarray:
        return np.concatenate([self.major, self.supplementary], axis=0)

    @property
    def negative_tags(self) -> list[str]:
        return ["major"] * len(self.major) + ["supplementary"] * len(self.supplementary)

    @classmethod
    def from_vectors(cls, anchor, positive, negatives=(), key=None) -> "ContrastiveItem":
        """Item whose negatives are all tagged major."""
        anchor = np.asarray(anchor, dtype=np.float64)
        return cls(anchor, np.asarray(positive, dtype=np.float64),
                   np.asarray(negatives, dtype=np.float64).reshape(-1, anchor.shape[0]),
                   np.empty((0, anchor.shape[0])), key)


def _supplementary_pool(bank: MemoryBank, frame_index: int, mode: NegativeMode) -> list[np.ndarray]:
    if not mode.uses_supplementary:
        return []
    earlier = sorted(f for f in bank.background_pool if f < frame_index)
    if not earlier:
        return []
    if mode is NegativeMode.MAJOR_PLUS_GLOBAL:
        return [e for f in earlier for e in bank.background_pool[f]]
    # local and supplementary-only: the most recent processed frame
    return list(bank.background_pool[earlier[-1]])


def build_cis(
    bank: MemoryBank,
    frame_assignments: Mapping[Hashable, np.ndarray],
    frame_index: int,
    negative_mode: NegativeMode | str = NegativeMode.MAJOR_PLUS_LOCAL,
) -> list[ContrastiveItem]:
    """One item per instance already in the bank: anchor from this frame, positive from the bank."""
    mode = NegativeMode(negative_mode)
    if frame_index < 1 or len(bank) == 0:
        return []
    snap = bank.ma_snapshot()
    ids = list(snap)
    dim = next(iter(snap.values())).shape[0]
    supp = _supplementary_pool(bank, frame_index, mode)
    supp_arr = np.stack(supp) if supp else np.empty((0, dim))
    all_ma = np.stack([snap[t] for t in ids])
    out = []
    for gid, emb in frame_assignments.items():
        if gid not in snap:
            continue
        if mode.uses_major:
            major = all_ma[[i for i, t in enumerate(ids) if t != gid]]
        else:
            major = np.empty((0, dim))
        out.append(ContrastiveItem(np.asarray(emb, dtype=np.float64), snap[gid], major, supp_arr, gid))
    return out


def _logits(ci: ContrastiveItem) -> np.ndarray:
    neg = ci.negatives
    return neg @ ci.anchor - ci.positive @ ci.anchor


def emb_loss(ci: ContrastiveItem) -> float:
    z = _logits(ci)
    if z.size == 0:
        return 0.0
    # log(1 + sum exp z) = logsumexp([0, z])
    return logsumexp(np.concatenate([[0.0], z]))


@dataclass
class LossGrad:
    loss: float
    anchor: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))


def emb_loss_grad(ci: ContrastiveItem) -> LossGrad:
    """Loss and its gradients with respect to the anchor, the positive and each negative."""
    neg = ci.negatives
    dim = ci.anchor.shape[0]
    if len(neg) == 0:
        return LossGrad(0.0, np.zeros(dim), np.zeros(dim), np.empty((0, dim)))
    z = neg @ ci.anchor - ci.positive @ ci.anchor
    full = np.concatenate([[0.0], z])
    lse = logsumexp(full)
    w = np.exp(z - lse)  # exp(z_k) / (1 + sum exp z)
    g_anchor = w @ (neg - ci.positive)
    g_pos = -w.sum() * ci.anchor
    g_neg = w[:, None] * ci.anchor[None, :]
    return LossGrad(lse, g_anchor, g_pos, g_neg)


def mean_clip_loss(cis) -> float:
    cis = list(cis)
    if not cis:
        return 0.0
    return float(np.mean([emb_loss(ci) for ci in cis]))
