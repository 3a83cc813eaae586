"""The assembled geolocation model: shared text encoder, user branch
(integration + fusion), location branch (prompted class names), and the
training-only heads (pair matching, or the classifier baseline)."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import RunConfig
from .corpus import LocationLabel, UserRecord
from .encoder import TinyTextEncoder, TokenSequence
from .geo_prompt import HardPrompt, LocationBank, SoftPrompt, build_prompt, location_matrix
from .objectives import MatchFusionKind, MatchHead
from .user_repr import FieldFilter, FusionEncoder, FusionKind, IntegrationKind, IntegrationStrategy, user_sentences


class GeoModel(nn.Module):
    """Everything needed to embed users and locations into one space."""

    def __init__(
        self,
        encoder: TinyTextEncoder,
        strategy: IntegrationStrategy,
        fusion: FusionEncoder,
        prompt: HardPrompt | SoftPrompt,
        labels: list[LocationLabel],
        match_head: MatchHead | None = None,
        class_head: nn.Linear | None = None,
        max_len_user: int = 128,
        max_len_prompt: int = 32,
    ):
        super().__init__()
        self.encoder = encoder
        self.strategy = strategy
        self.fusion = fusion
        self.prompt = prompt  # registers as a submodule when soft
        self.labels = list(labels)
        self.label_index = {lab.label_id: j for j, lab in enumerate(self.labels)}
        self.match_head = match_head
        self.class_head = class_head
        self.max_len_user = max_len_user
        self.max_len_prompt = max_len_prompt
        self.bank = LocationBank(self.labels, prompt)
        self._sentence_cache: dict[str, list[TokenSequence]] = {}

    def user_token_seqs(self, user: UserRecord) -> list[TokenSequence]:
        cached = self._sentence_cache.get(user.user_id)
        if cached is None:
            sentences = user_sentences(user, self.strategy)
            cached = [self.encoder.tokenizer.tokenize(s, max_len=self.max_len_user) for s in sentences]
            self._sentence_cache[user.user_id] = cached
        return cached

    def user_embeddings(self, users: list[UserRecord]) -> torch.Tensor:
        """Embed a batch of users, shape [B, H]."""
        seqs: list[TokenSequence] = []
        counts = []
        for user in users:
            user_seqs = self.user_token_seqs(user)
            seqs.extend(user_seqs)
            counts.append(len(user_seqs))
        features = self.encoder.encode_batch(seqs)
        out = []
        offset = 0
        for count in counts:
            out.append(self.fusion(features[offset:offset + count]))
            offset += count
        return torch.stack(out)

    def location_embeddings(self) -> torch.Tensor:
        """In-graph class embeddings [K, H] for training."""
        return location_matrix(self.encoder, self.prompt, self.labels, max_len=self.max_len_prompt)

    def bank_embeddings(self) -> torch.Tensor:
        """Cached no-grad class embeddings [K, H] for inference."""
        return self.bank.embeddings(self.encoder, max_len=self.max_len_prompt)

    def invalidate_bank(self) -> None:
        self.bank.invalidate()

    def gold_indices(self, users: list[UserRecord]) -> torch.Tensor:
        return torch.tensor([self.label_index[u.label_id] for u in users], dtype=torch.long)

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def load_snapshot(self, state: dict[str, torch.Tensor]) -> None:
        self.load_state_dict(state)
        self.invalidate_bank()


def build_model(cfg: RunConfig, labels: list[LocationLabel], seed: int) -> GeoModel:
    """Deterministically construct a fresh model for one run."""
    torch.manual_seed(seed)
    enc_cfg = cfg.representation.encoder
    encoder = TinyTextEncoder(
        hidden_size=enc_cfg.hidden_size,
        vocab_size=enc_cfg.vocab_size,
        max_len=max(enc_cfg.max_len_user, enc_cfg.max_len_prompt),
        lowercase=enc_cfg.lowercase,
        use_positions=enc_cfg.use_positions,
    )
    strategy = IntegrationStrategy(
        kind=IntegrationKind(cfg.representation.strategy),
        field_filter=FieldFilter(cfg.representation.field_filter),
        num_posts=cfg.representation.num_posts,
    )
    fusion = FusionEncoder(FusionKind(cfg.representation.fusion), enc_cfg.hidden_size)
    prompt = build_prompt(cfg.prompt, encoder)
    match_head = None
    class_head = None
    if cfg.objective.kind == "contrastive":
        if cfg.objective.k >= 1:
            match_head = MatchHead(enc_cfg.hidden_size, MatchFusionKind(cfg.objective.fusion_kind))
    else:
        class_head = nn.Linear(enc_cfg.hidden_size, len(labels))
    return GeoModel(
        encoder=encoder,
        strategy=strategy,
        fusion=fusion,
        prompt=prompt,
        labels=labels,
        match_head=match_head,
        class_head=class_head,
        max_len_user=enc_cfg.max_len_user,
        max_len_prompt=enc_cfg.max_len_prompt,
    )
