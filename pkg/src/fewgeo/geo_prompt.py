"""Geographical prompting: hard templates, soft tokens, and the class bank.

A hard prompt is a fixed template with one [CLASS] slot. A soft prompt is
m trainable vectors followed by the class-name tokens. A semi-soft prompt
derives its vectors from a hard template: every whitespace word of the
template (outside the slot region) becomes one trainable vector,
initialized from that word's input embedding, so that before any training
step the soft encoding equals the hard encoding exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .corpus import LocationLabel
from .encoder import CLS_ID, TextEncoder

CLASS_SLOT = "[CLASS]"

DEFAULT_SEMI_SOFT_TEMPLATE = "I'm in [CLASS]."

# The shipped template bank: paraphrases, QA forms, and the minimal /
# no-prompt baselines (note the trailing-space variant is a distinct
# template even though a whitespace tokenizer cannot tell them apart).
TEMPLATE_BANK = [
    "I'm in [CLASS].",
    "A local from [CLASS].",
    "[CLASS] in the house!",
    "[CLASS] 's own.",
    "A user resides in [CLASS].",
    "Question: where does this user reside in? Answer: [CLASS].",
    "Question: which city does this user live in? Answer: [CLASS].",
    "[CLASS] ",
    "[CLASS]",
]


@dataclass(frozen=True)
class HardPrompt:
    """A fixed template with exactly one [CLASS] slot; never trained."""

    template: str

    def __post_init__(self):
        count = self.template.count(CLASS_SLOT)
        if count != 1:
            raise ValueError(
                f"template must contain exactly one {CLASS_SLOT} slot, found {count}: {self.template!r}"
            )


def apply_hard(prompt: HardPrompt, class_name: str) -> str:
    """Insert the class name into the slot; the rest stays byte-identical."""
    return prompt.template.replace(CLASS_SLOT, class_name)


def split_template(template: str) -> tuple[list[str], str, str, list[str]]:
    """Break a template into (pre words, slot prefix, slot suffix, post words).

    Slot prefix/suffix are the non-space fragments glued to [CLASS] — with
    whitespace tokenization they merge with the class name into the class
    token region rather than becoming standalone template tokens.
    """
    before, after = template.split(CLASS_SLOT)
    pre_words = before.split()
    prefix = ""
    if before and not before[-1].isspace() and pre_words:
        prefix = pre_words.pop()
    post_words = after.split()
    suffix = ""
    if after and not after[0].isspace() and post_words:
        suffix = post_words.pop(0)
    return pre_words, prefix, suffix, post_words


class SoftPrompt(nn.Module):
    """Trainable prompt vectors around a frozen-lookup class region.

    `vectors` rows 0..m_pre-1 precede the class tokens and the remaining
    rows follow them. Randomly initialized prompts put all m vectors in
    front (class name last); semi-soft prompts keep the template's layout.
    """

    def __init__(
        self,
        vectors: torch.Tensor,
        m_pre: int,
        class_prefix: str = "",
        class_suffix: str = "",
        init_template: str | None = None,
    ):
        super().__init__()
        if vectors.dim() != 2:
            raise ValueError("prompt vectors must be [m, H]")
        if not 0 <= m_pre <= vectors.shape[0]:
            raise ValueError("m_pre out of range")
        self.vectors = nn.Parameter(vectors)
        self.m_pre = m_pre
        self.class_prefix = class_prefix
        self.class_suffix = class_suffix
        self.init_template = init_template

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def random(
        cls,
        m: int,
        hidden_size: int,
        sigma: float = 0.02,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> "SoftPrompt":
        if m < 1:
            raise ValueError("a randomly initialized soft prompt needs m >= 1")
        vectors = torch.randn(m, hidden_size, generator=generator, dtype=dtype) * sigma
        return cls(vectors, m_pre=m)

    @classmethod
    def from_hard(cls, template: str, encoder: TextEncoder) -> "SoftPrompt":
        """Semi-soft initialization from a hard template's token embeddings.

        Minimal templates like "[CLASS]" have no template words, hence no
        trainable vectors: the degenerate prompt stays equal to the hard
        one forever.
        """
        HardPrompt(template)  # validates the slot
        pre_words, prefix, suffix, post_words = split_template(template)
        tokenizer = encoder.tokenizer
        with torch.no_grad():
            rows = [
                encoder.embeddings(torch.tensor(ids[0]))
                for w in pre_words + post_words
                if (ids := tokenizer.word_ids(w))
            ]
        hidden = encoder.hidden_size
        vectors = torch.stack(rows) if rows else torch.zeros(0, hidden, dtype=next(encoder.parameters()).dtype)
        return cls(
            vectors.clone(),
            m_pre=len(pre_words),
            class_prefix=prefix,
            class_suffix=suffix,
            init_template=template,
        )

    def build_embedded(
        self, encoder: TextEncoder, class_name: str, max_len: int | None = None
    ) -> torch.Tensor:
        """Assemble [summary; pre vectors; class tokens; post vectors] as [L, H]."""
        region_text = f"{self.class_prefix}{class_name}{self.class_suffix}"
        region_ids = torch.tensor(encoder.tokenizer.word_ids(region_text), dtype=torch.long)
        cls_row = encoder.embeddings(torch.tensor(CLS_ID)).unsqueeze(0)
        pieces = [cls_row, self.vectors[: self.m_pre]]
        if len(region_ids):
            pieces.append(encoder.embeddings(region_ids))
        pieces.append(self.vectors[self.m_pre:])
        embedded = torch.cat(pieces, dim=0)
        if max_len is not None:
            embedded = embedded[:max_len]
        return embedded


def encode_location_hard(
    encoder: TextEncoder, prompt: HardPrompt, label: LocationLabel, max_len: int | None = None
) -> torch.Tensor:
    """Location representation from the prompted class name, shape [H]."""
    seq = encoder.tokenizer.tokenize(apply_hard(prompt, label.name), max_len=max_len)
    return encoder.encode(seq)


def encode_location_soft(
    encoder: TextEncoder, prompt: SoftPrompt, label: LocationLabel, max_len: int | None = None
) -> torch.Tensor:
    """Location representation through the soft-prompt embedding path, shape [H]."""
    return encoder.encode_embedded(prompt.build_embedded(encoder, label.name, max_len=max_len))


class LocationBank:
    """All K class labels with a cached [K, H] embedding matrix.

    The cache is only valid for a fixed parameter snapshot; whoever updates
    parameters must call `invalidate`.
    """

    def __init__(self, labels: list[LocationLabel], prompt: HardPrompt | SoftPrompt):
        if not labels:
            raise ValueError("location bank needs at least one label")
        ids = [lab.label_id for lab in labels]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate label ids in bank")
        self.labels = list(labels)
        self.prompt = prompt
        self._cache: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def invalidate(self) -> None:
        self._cache = None

    def embeddings(self, encoder: TextEncoder, max_len: int | None = None) -> torch.Tensor:
        """Row j is the encoding of label j; cached until invalidated."""
        if self._cache is None:
            with torch.no_grad():
                self._cache = location_matrix(encoder, self.prompt, self.labels, max_len=max_len)
        return self._cache


def bank_embeddings(bank: LocationBank, encoder: TextEncoder, max_len: int | None = None) -> torch.Tensor:
    """Cached [K, H] class-embedding matrix for inference."""
    return bank.embeddings(encoder, max_len=max_len)


def location_matrix(
    encoder: TextEncoder,
    prompt: HardPrompt | SoftPrompt,
    labels: list[LocationLabel],
    max_len: int | None = None,
) -> torch.Tensor:
    """Encode every label under the prompt in one padded batch, shape [K, H]."""
    if isinstance(prompt, HardPrompt):
        seqs = [encoder.tokenizer.tokenize(apply_hard(prompt, lab.name), max_len=max_len) for lab in labels]
        return encoder.encode_batch(seqs)
    mats = [prompt.build_embedded(encoder, lab.name, max_len=max_len) for lab in labels]
    return encoder.encode_embedded_batch(mats)


@dataclass(frozen=True)
class PromptSpec:
    """Declarative prompt configuration as stored in config and bank files."""

    kind: str  # hard | soft | semisoft
    template: str | None = None
    m: int | None = None
    sigma: float = 0.02
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("hard", "soft", "semisoft"):
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if self.kind in ("hard", "semisoft") and not self.template:
            raise ValueError(f"{self.kind} prompt needs a template")
        if self.kind == "soft" and (self.m is None or self.m < 1):
            raise ValueError("soft prompt needs m >= 1")


def build_prompt(
    spec: PromptSpec, encoder: TextEncoder, generator: torch.Generator | None = None
) -> HardPrompt | SoftPrompt:
    if spec.kind == "hard":
        return HardPrompt(spec.template)
    if spec.kind == "semisoft":
        return SoftPrompt.from_hard(spec.template, encoder)
    return SoftPrompt.random(
        spec.m, encoder.hidden_size, sigma=spec.sigma, generator=generator,
        dtype=next(encoder.parameters()).dtype,
    )


def load_prompt_bank(path: str | Path) -> list[PromptSpec]:
    """Read a JSON prompt bank: a list of {name, kind, template?, m?, sigma?}."""
    with open(path, "r", encoding="utf-8") as handle:
        entries = json.load(handle)
    specs = []
    for entry in entries:
        unknown = set(entry) - {"name", "kind", "template", "m", "sigma"}
        if unknown:
            raise ValueError(f"unknown prompt bank key(s): {sorted(unknown)}")
        specs.append(
            PromptSpec(
                kind=entry["kind"],
                template=entry.get("template"),
                m=entry.get("m"),
                sigma=entry.get("sigma", 0.02),
                name=entry.get("name", ""),
            )
        )
    return specs


def save_prompt_bank(specs: list[PromptSpec], path: str | Path) -> None:
    entries = []
    for spec in specs:
        entry: dict = {"name": spec.name, "kind": spec.kind}
        if spec.template is not None:
            entry["template"] = spec.template
        if spec.m is not None:
            entry["m"] = spec.m
        if spec.kind == "soft":
            entry["sigma"] = spec.sigma
        entries.append(entry)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(entries, handle, ensure_ascii=False, indent=2)
        handle.write("\n")
