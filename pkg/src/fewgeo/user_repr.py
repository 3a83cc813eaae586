"""User representation: field selection, integration into sentences, fusion.

A user's profile fields and latest-T post fields are rendered into N
sentences (strategy-dependent), each sentence is encoded to its summary
embedding, and a fusion encoder collapses the resulting [N, H] feature
matrix into one H-dim user vector.

Selected fields are (name, value) pairs; post fields carry a "post{i}."
name prefix (i = 1 is the most recent post) so integration can group them
per post. The prefix is stripped again when a sentence is rendered.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn

from .corpus import UserRecord
from .encoder import TextEncoder

FIELD_SEPARATOR = " ; "
NAME_SEPARATOR = ": "

_POST_PREFIX = re.compile(r"^post(\d+)\.")


class IntegrationKind(str, Enum):
    IN1 = "In1"
    IN2 = "In2"
    IN_T = "InT"
    IN_USER_PLUS_1 = "InUser+1"
    IN_USER_PLUS_T = "InUser+T"
    NO_IN = "NoIn"


class FieldFilter(str, Enum):
    ALL = "All"
    NO_POST_TIME = "NoPostTime"
    NO_POST_META = "NoPostMeta"


@dataclass(frozen=True)
class IntegrationStrategy:
    kind: IntegrationKind = IntegrationKind.IN1
    field_filter: FieldFilter = FieldFilter.ALL
    num_posts: int = 6

    def __post_init__(self):
        if self.num_posts < 0:
            raise ValueError("num_posts must be >= 0")


def select_fields(user: UserRecord, strategy: IntegrationStrategy) -> list[tuple[str, str]]:
    """Ordered (name, value) pairs: profile fields, then latest-T post fields.

    Empty values are omitted. NoPostTime drops created_at; NoPostMeta keeps
    only post text.
    """
    fields = [(name, value) for name, value in user.profile.items() if value]
    for i, post in enumerate(user.posts[: strategy.num_posts], start=1):
        items: list[tuple[str, str]] = [("text", post.text)]
        if strategy.field_filter is not FieldFilter.NO_POST_META:
            if post.source:
                items.append(("source", post.source))
            if post.hashtags:
                items.append(("hashtags", " ".join(post.hashtags)))
            if post.created_at and strategy.field_filter is not FieldFilter.NO_POST_TIME:
                items.append(("created_at", post.created_at))
            if post.extra:
                items.extend(post.extra.items())
        fields.extend((f"post{i}.{name}", value) for name, value in items if value)
    return fields


def _render(fields: list[tuple[str, str]]) -> str:
    segments = [f"{_POST_PREFIX.sub('', name)}{NAME_SEPARATOR}{value}" for name, value in fields]
    return FIELD_SEPARATOR.join(segments)


def _split_profile_posts(
    fields: list[tuple[str, str]],
) -> tuple[list[tuple[str, str]], list[list[tuple[str, str]]]]:
    profile = []
    posts: dict[int, list[tuple[str, str]]] = {}
    for name, value in fields:
        match = _POST_PREFIX.match(name)
        if match:
            posts.setdefault(int(match.group(1)), []).append((name, value))
        else:
            profile.append((name, value))
    return profile, [posts[i] for i in sorted(posts)]


def integrate(fields: list[tuple[str, str]], strategy: IntegrationStrategy) -> list[str]:
    """Render fields into the strategy's N sentences.

    Sentence counts for P profile fields and T posts: In1 -> 1, In2 -> 2,
    InT -> T+1, InUser+1 -> P+1, InUser+T -> P+T, NoIn -> one per field.
    """
    if not fields:
        raise ValueError("integrate needs at least one field")
    kind = strategy.kind
    if kind is IntegrationKind.IN1:
        return [_render(fields)]
    profile, posts = _split_profile_posts(fields)
    flat_posts = [f for post in posts for f in post]
    if kind is IntegrationKind.IN2:
        return [_render(profile), _render(flat_posts)]
    if kind is IntegrationKind.IN_T:
        return [_render(profile)] + [_render(post) for post in posts]
    if kind is IntegrationKind.IN_USER_PLUS_1:
        return [_render([f]) for f in profile] + [_render(flat_posts)]
    if kind is IntegrationKind.IN_USER_PLUS_T:
        return [_render([f]) for f in profile] + [_render(post) for post in posts]
    if kind is IntegrationKind.NO_IN:
        return [_render([f]) for f in fields]
    raise ValueError(f"unknown integration kind {kind!r}")


def embed_sentences(encoder: TextEncoder, sentences: list[str], max_len: int | None = None) -> torch.Tensor:
    """Feature matrix [N, H]; row i is exactly encode(tokenize(sentences[i]))."""
    if not sentences:
        raise ValueError("embed_sentences needs at least one sentence")
    rows = [encoder.encode(encoder.tokenizer.tokenize(s, max_len=max_len)) for s in sentences]
    return torch.stack(rows)


class FusionKind(str, Enum):
    MEAN_POOL = "MeanPool"
    ADAPTER = "Adapter"
    TRANSFORMER = "TransformerEnc"
    MLP = "MLP"
    LSTM = "LSTM"
    BILSTM = "BiLSTM"
    RNN = "RNN"
    GRU = "GRU"


class _BottleneckAdapter(nn.Module):
    """Down-project, nonlinearity, up-project, residual."""

    def __init__(self, dim: int, bottleneck: int, dtype: torch.dtype):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck, dtype=dtype)
        self.up = nn.Linear(bottleneck, dim, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(torch.tanh(self.down(x)))


class FusionEncoder(nn.Module):
    """Maps a feature matrix [N, H] to [N, H] and mean-pools to [H].

    MeanPool is parameter-free; sequence models consume rows in sentence
    order (profile first, then posts most-recent-first).
    """

    def __init__(self, kind: FusionKind, hidden_size: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.kind = FusionKind(kind)
        self.hidden_size = hidden_size
        h = hidden_size
        if self.kind is FusionKind.MEAN_POOL:
            self.inner = None
        elif self.kind is FusionKind.ADAPTER:
            self.inner = _BottleneckAdapter(h, max(1, h // 4), dtype)
        elif self.kind is FusionKind.TRANSFORMER:
            self.inner = nn.TransformerEncoderLayer(
                d_model=h, nhead=4, dim_feedforward=2 * h, dropout=0.0,
                activation="gelu", batch_first=True, dtype=dtype,
            )
        elif self.kind is FusionKind.MLP:
            self.inner = nn.Sequential(
                nn.Linear(h, h, dtype=dtype), nn.Tanh(), nn.Linear(h, h, dtype=dtype)
            )
        elif self.kind is FusionKind.LSTM:
            self.inner = nn.LSTM(h, h, batch_first=True, dtype=dtype)
        elif self.kind is FusionKind.BILSTM:
            if h % 2:
                raise ValueError("BiLSTM fusion needs an even hidden size")
            self.inner = nn.LSTM(h, h // 2, batch_first=True, bidirectional=True, dtype=dtype)
        elif self.kind is FusionKind.RNN:
            self.inner = nn.RNN(h, h, batch_first=True, nonlinearity="tanh", dtype=dtype)
        elif self.kind is FusionKind.GRU:
            self.inner = nn.GRU(h, h, batch_first=True, dtype=dtype)
        else:
            raise ValueError(f"unknown fusion kind {kind!r}")

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 2 or features.shape[1] != self.hidden_size:
            raise ValueError(f"expected [N, {self.hidden_size}] features, got {tuple(features.shape)}")
        if self.inner is None:
            return features.mean(dim=0)
        batched = features.unsqueeze(0)
        if isinstance(self.inner, (nn.LSTM, nn.RNN, nn.GRU)):
            out, _ = self.inner(batched)
        else:
            out = self.inner(batched)
        return out[0].mean(dim=0)


def fuse(features: torch.Tensor, fusion: FusionEncoder) -> torch.Tensor:
    """Collapse the [N, H] feature matrix into the user embedding [H]."""
    return fusion(features)


def user_sentences(user: UserRecord, strategy: IntegrationStrategy) -> list[str]:
    """select_fields + integrate in one step."""
    return integrate(select_fields(user, strategy), strategy)
