"""Training objectives: user-location contrastive loss, pair-matching loss
with hard-negative mining, their unweighted sum, and the plain
classification baseline.

Similarity is the dot product between the user embedding and each class
embedding. The contrastive term is a K-way softmax log loss at temperature
tau over all classes; the matching term scores the fused (user, location)
pair for the gold class against k mined negatives with a (k+1)-way
softmax cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SimilarityRow:
    """Dot-product scores of one user against all K classes."""

    scores: torch.Tensor
    gold: int

    def __post_init__(self):
        if self.scores.dim() != 1:
            raise ValueError("scores must be a vector")
        if not torch.isfinite(self.scores).all():
            raise ValueError("similarity scores must be finite")
        if not 0 <= self.gold < self.scores.shape[0]:
            raise ValueError(f"gold index {self.gold} out of range for K={self.scores.shape[0]}")


def contrastive_loss(row: SimilarityRow, tau: float) -> torch.Tensor:
    """K-way softmax log loss of the gold class at temperature tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return -F.log_softmax(row.scores / tau, dim=0)[row.gold]


def contrastive_loss_batch(
    scores: torch.Tensor,
    gold: torch.Tensor,
    tau: float,
    class_subset: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean contrastive loss over a batch of similarity rows [B, K].

    `class_subset` restricts the softmax denominator to the given class
    indices (the in-batch variant); by default all K classes compete.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not torch.isfinite(scores).all():
        raise ValueError("similarity scores must be finite")
    if class_subset is not None:
        remap = {int(c): i for i, c in enumerate(class_subset.tolist())}
        gold = torch.tensor([remap[int(g)] for g in gold.tolist()], dtype=torch.long)
        scores = scores[:, class_subset]
    return F.cross_entropy(scores / tau, gold)


class MiningKind(str, Enum):
    MULTINOMIAL = "multinomial"
    TOP = "top"


@dataclass(frozen=True)
class MiningPolicy:
    kind: MiningKind = MiningKind.MULTINOMIAL
    k: int = 6

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


def mine_negatives(row: SimilarityRow, policy: MiningPolicy, rng_seed: int, tau: float = 1.0) -> list[int]:
    """Pick k non-gold class indices as hard negatives.

    Top takes the k highest-scoring candidates (ties broken toward the
    lower index); multinomial draws k distinct candidates with probability
    proportional to softmax(scores / tau), sequentially renormalized, and
    is deterministic for a fixed seed.
    """
    k_classes = row.scores.shape[0]
    if policy.k > k_classes - 1:
        raise ValueError(f"k={policy.k} exceeds the {k_classes - 1} available negatives")
    candidates = [j for j in range(k_classes) if j != row.gold]
    values = row.scores.detach().to(torch.float64).numpy()
    if policy.kind is MiningKind.TOP:
        ordered = sorted(candidates, key=lambda j: (-values[j], j))
        return ordered[: policy.k]
    logits = values[candidates] / tau
    if not np.isfinite(logits).any():
        raise ValueError("all candidate scores are -inf; nothing to sample")
    weights = np.exp(logits - logits.max())
    rng = np.random.default_rng(rng_seed)
    chosen: list[int] = []
    remaining = list(range(len(candidates)))
    for _ in range(policy.k):
        probs = weights[remaining] / weights[remaining].sum()
        pick = rng.choice(len(remaining), p=probs)
        chosen.append(candidates[remaining[pick]])
        del remaining[pick]
    return chosen


class MatchFusionKind(str, Enum):
    CA = "CA"
    SUM = "Sum"
    CONCAT = "Concat"


class _Bottleneck(nn.Module):
    def __init__(self, dim: int, dtype: torch.dtype):
        super().__init__()
        self.down = nn.Linear(dim, max(1, dim // 4), dtype=dtype)
        self.up = nn.Linear(max(1, dim // 4), dim, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(torch.tanh(self.down(x)))


class MatchHead(nn.Module):
    """Fuses a (user, location) pair and scores it with an affine map.

    Concat: bottleneck adapter over the 2H concatenation, projected back
    to H. Sum: elementwise sum through a bottleneck adapter.
    CA: one cross-attention block with the user as query and the location
    as a length-1 key/value sequence.
    """

    def __init__(
        self,
        hidden_size: int,
        fusion_kind: MatchFusionKind = MatchFusionKind.CONCAT,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.hidden_size = hidden_size
        self.fusion_kind = MatchFusionKind(fusion_kind)
        h = hidden_size
        if self.fusion_kind is MatchFusionKind.CONCAT:
            self.adapter = _Bottleneck(2 * h, dtype)
            self.project = nn.Linear(2 * h, h, dtype=dtype)
        elif self.fusion_kind is MatchFusionKind.SUM:
            self.adapter = _Bottleneck(h, dtype)
        else:
            self.wq = nn.Linear(h, h, bias=False, dtype=dtype)
            self.wk = nn.Linear(h, h, bias=False, dtype=dtype)
            self.wv = nn.Linear(h, h, bias=False, dtype=dtype)
            self.wo = nn.Linear(h, h, bias=False, dtype=dtype)
        self.scorer = nn.Linear(h, 1, dtype=dtype)

    def fuse(self, user: torch.Tensor, location: torch.Tensor) -> torch.Tensor:
        """Fused pair representation [..., H] from broadcastable [..., H] inputs."""
        if self.fusion_kind is MatchFusionKind.CONCAT:
            user, location = torch.broadcast_tensors(user, location)
            return self.project(self.adapter(torch.cat([user, location], dim=-1)))
        if self.fusion_kind is MatchFusionKind.SUM:
            return self.adapter(user + location)
        q, k, v = self.wq(user), self.wk(location), self.wv(location)
        logit = (q * k).sum(dim=-1, keepdim=True) / math.sqrt(self.hidden_size)
        attn = torch.softmax(logit, dim=-1)  # a single key always gets weight 1
        return user + self.wo(attn * v)

    def forward(self, user: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
        """Scores of one user [H] against candidate locations [C, H] -> [C]."""
        fused = self.fuse(user.unsqueeze(0), locations)
        return self.scorer(fused).squeeze(-1)


def match_scores(u_vec: torch.Tensor, loc_vecs: torch.Tensor, head: MatchHead) -> torch.Tensor:
    """Pair scores for the gold-first candidate list, shape [k+1]."""
    if u_vec.shape[-1] != head.hidden_size or loc_vecs.shape[-1] != head.hidden_size:
        raise ValueError("dimension mismatch between vectors and match head")
    return head(u_vec, loc_vecs)


def matching_loss(scores: torch.Tensor, gold_position: int = 0) -> torch.Tensor:
    """(k+1)-way softmax cross-entropy against the one-hot gold position."""
    if scores.dim() != 1 or scores.shape[0] < 2:
        raise ValueError("matching needs one gold and at least one negative score")
    if not torch.isfinite(scores).all():
        raise ValueError("match scores must be finite")
    return -F.log_softmax(scores, dim=0)[gold_position]


def joint_loss(contrast: torch.Tensor, match: torch.Tensor | None) -> torch.Tensor:
    """Unweighted sum of the two objectives; matching may be disabled (k=0)."""
    if match is None:
        return contrast
    return contrast + match


def class_loss(u_vecs: torch.Tensor, class_head: nn.Linear, gold: torch.Tensor | int) -> torch.Tensor:
    """Plain K-way cross-entropy on an affine head; the classifier baseline."""
    logits = class_head(u_vecs)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        gold = torch.tensor([gold], dtype=torch.long)
    return F.cross_entropy(logits, gold)
