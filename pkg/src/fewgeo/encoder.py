"""Text-encoder interface plus a small from-scratch encoder for desk-scale runs.

Both the user and the location branch read the summary-token (position 0)
output of a shared text encoder. The small encoder here — hashing
tokenizer, token embeddings, one self-attention mixing layer with a
residual, and a per-token feed-forward — is deterministic, cheap enough
for finite-difference checks in float64, and trains end to end. Pretrained
backbones plug in through the same `TextEncoder` surface.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

CLS_ID = 0

_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with the summary token at position 0."""

    token_ids: tuple[int, ...]
    has_cls: bool = True

    def __post_init__(self):
        if self.has_cls and len(self.token_ids) < 1:
            raise ValueError("a sequence with a summary token cannot be empty")

    def __len__(self) -> int:
        return len(self.token_ids)


class HashingTokenizer:
    """Lowercase, whitespace-split, hash-to-bucket tokenizer.

    Needs no vocabulary files; id 0 is reserved for the summary token and
    words hash into 1..vocab_size-1 via blake2b, stable across processes.
    """

    def __init__(self, vocab_size: int = 4096, max_len: int = 128, lowercase: bool = True):
        if vocab_size < 2:
            raise ValueError("vocab_size must leave room for the summary token")
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.lowercase = lowercase

    def token_id(self, word: str) -> int:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % (self.vocab_size - 1) + 1

    def word_ids(self, text: str) -> list[int]:
        """Hash ids of the whitespace-split words, no summary token, no truncation."""
        words = text.lower().split() if self.lowercase else text.split()
        return [self.token_id(w) for w in words]

    def tokenize(self, text: str, max_len: int | None = None) -> TokenSequence:
        """Prepend the summary token, hash words, truncate to max_len."""
        if max_len is None:
            max_len = self.max_len
        ids = [CLS_ID] + self.word_ids(text)
        return TokenSequence(token_ids=tuple(ids[:max_len]))

    def config(self) -> dict:
        return {"vocab_size": self.vocab_size, "max_len": self.max_len, "lowercase": self.lowercase}


class TextEncoder(nn.Module):
    """Interface shared by the user and location branches.

    Adapters for pretrained backbones implement the same three methods;
    shipping any pretrained weights is out of scope here.
    """

    hidden_size: int
    tokenizer: HashingTokenizer

    def encode(self, seq: TokenSequence) -> torch.Tensor:
        raise NotImplementedError

    def encode_embedded(self, embedded: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_batch(self, seqs: list[TokenSequence]) -> torch.Tensor:
        raise NotImplementedError


class TinyTextEncoder(TextEncoder):
    """Embedding -> one residual attention mixing layer -> per-token FF.

    The summary-token position of the final hidden states is the sentence
    embedding. With `use_positions` the encoder is order-sensitive;
    without it the readout is invariant to permutations of the non-summary
    tokens.
    """

    def __init__(
        self,
        hidden_size: int = 32,
        vocab_size: int = 4096,
        max_len: int = 128,
        lowercase: bool = True,
        use_positions: bool = True,
        init_std: float = 0.02,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.hidden_size = hidden_size
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.use_positions = use_positions
        self.init_std = init_std
        self.tokenizer = HashingTokenizer(vocab_size=vocab_size, max_len=max_len, lowercase=lowercase)

        self.embeddings = nn.Embedding(vocab_size, hidden_size, dtype=dtype)
        if use_positions:
            self.positions = nn.Parameter(torch.empty(max_len, hidden_size, dtype=dtype))
        else:
            self.register_parameter("positions", None)
        self.wq = nn.Linear(hidden_size, hidden_size, bias=False, dtype=dtype)
        self.wk = nn.Linear(hidden_size, hidden_size, bias=False, dtype=dtype)
        self.wv = nn.Linear(hidden_size, hidden_size, bias=False, dtype=dtype)
        self.wo = nn.Linear(hidden_size, hidden_size, bias=False, dtype=dtype)
        self.ff_in = nn.Linear(hidden_size, 2 * hidden_size, dtype=dtype)
        self.ff_out = nn.Linear(2 * hidden_size, hidden_size, dtype=dtype)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # Unit-scale token embeddings carry the content; the value/output
        # path starts at orthogonal scale (1/sqrt(H)) so content survives
        # the mixing layer, while query/key and feed-forward weights start
        # small (near-uniform attention, near-identity transform). The
        # summary token starts as a neutral zero slot so the readout is
        # content-driven from the first forward pass.
        nn.init.normal_(self.embeddings.weight, mean=0.0, std=1.0)
        with torch.no_grad():
            self.embeddings.weight[CLS_ID].zero_()
        if self.positions is not None:
            nn.init.normal_(self.positions, mean=0.0, std=self.init_std)
        mixing_std = 1.0 / math.sqrt(self.hidden_size)
        for layer, std in (
            (self.wq, self.init_std),
            (self.wk, self.init_std),
            (self.wv, mixing_std),
            (self.wo, mixing_std),
            (self.ff_in, self.init_std),
            (self.ff_out, self.init_std),
        ):
            nn.init.normal_(layer.weight, mean=0.0, std=std)
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)

    def tokenize(self, text: str, max_len: int | None = None) -> TokenSequence:
        return self.tokenizer.tokenize(text, max_len=max_len)

    def embed_tokens(self, seq: TokenSequence) -> torch.Tensor:
        """Embedding-table lookup for one sequence, shape [L, H]."""
        for tid in seq.token_ids:
            if not 0 <= tid < self.vocab_size:
                raise ValueError(f"token id {tid} outside vocabulary of size {self.vocab_size}")
        ids = torch.tensor(seq.token_ids, dtype=torch.long)
        return self.embeddings(ids)

    def forward(self, embedded: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Run the encoder on pre-embedded input [B, L, H]; returns [B, H].

        `mask` marks real (non-padding) positions; padded keys are dropped
        from attention and contribute nothing to the readout.
        """
        if embedded.dim() != 3 or embedded.shape[-1] != self.hidden_size:
            raise ValueError(f"expected [B, L, {self.hidden_size}] input, got {tuple(embedded.shape)}")
        length = embedded.shape[1]
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.max_len}")
        x = embedded
        if self.positions is not None:
            x = x + self.positions[:length]
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.hidden_size)
        if mask is not None:
            logits = logits.masked_fill(~mask[:, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        y = x + self.wo(attn @ v)
        z = y + self.ff_out(torch.tanh(self.ff_in(y)))
        return z[:, 0]

    def encode(self, seq: TokenSequence) -> torch.Tensor:
        """Summary embedding of one token sequence, shape [H]."""
        return self.encode_embedded(self.embed_tokens(seq))

    def encode_embedded(self, embedded: torch.Tensor) -> torch.Tensor:
        """Like encode, but bypassing the embedding lookup (row 0 = summary)."""
        if embedded.dim() != 2:
            raise ValueError(f"expected [L, H] input, got {tuple(embedded.shape)}")
        if embedded.shape[0] < 1:
            raise ValueError("embedded input must have at least the summary row")
        return self.forward(embedded.unsqueeze(0))[0]

    def encode_batch(self, seqs: list[TokenSequence]) -> torch.Tensor:
        """Padded batch encode, shape [B, H].

        Numerically equivalent to per-sequence encode but not guaranteed
        bitwise-identical to it (padding changes the kernel shapes); use
        `encode` where exact per-sequence values matter.
        """
        if not seqs:
            raise ValueError("encode_batch needs at least one sequence")
        longest = max(len(s) for s in seqs)
        ids = torch.zeros(len(seqs), longest, dtype=torch.long)
        mask = torch.zeros(len(seqs), longest, dtype=torch.bool)
        for i, seq in enumerate(seqs):
            for tid in seq.token_ids:
                if not 0 <= tid < self.vocab_size:
                    raise ValueError(f"token id {tid} outside vocabulary of size {self.vocab_size}")
            ids[i, : len(seq)] = torch.tensor(seq.token_ids, dtype=torch.long)
            mask[i, : len(seq)] = True
        return self.forward(self.embeddings(ids), mask)

    def encode_embedded_batch(self, mats: list[torch.Tensor]) -> torch.Tensor:
        """Padded batch over pre-embedded sequences of varying length."""
        if not mats:
            raise ValueError("encode_embedded_batch needs at least one sequence")
        longest = max(m.shape[0] for m in mats)
        batch = []
        mask = torch.zeros(len(mats), longest, dtype=torch.bool)
        for i, mat in enumerate(mats):
            if mat.dim() != 2 or mat.shape[1] != self.hidden_size:
                raise ValueError(f"expected [L, {self.hidden_size}] rows, got {tuple(mat.shape)}")
            pad = torch.zeros(longest - mat.shape[0], self.hidden_size, dtype=mat.dtype)
            batch.append(torch.cat([mat, pad], dim=0))
            mask[i, : mat.shape[0]] = True
        return self.forward(torch.stack(batch), mask)

    def config(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "lowercase": self.tokenizer.lowercase,
            "use_positions": self.use_positions,
            "init_std": self.init_std,
        }

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format_version": _CHECKPOINT_VERSION,
                "config": self.config(),
                "state_dict": self.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "TinyTextEncoder":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format_version") != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('format_version')!r}")
        encoder = cls(**blob["config"])
        saved_dtype = blob["state_dict"]["embeddings.weight"].dtype
        if next(encoder.parameters()).dtype != saved_dtype:
            encoder = encoder.to(saved_dtype)
        encoder.load_state_dict(blob["state_dict"])
        return encoder
