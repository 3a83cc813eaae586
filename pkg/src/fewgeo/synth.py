"""Synthetic corpus generator for desk-scale experiments.

Builds a dataset of K city classes where each user's post text contains
the city token (plus noise drawn from a shared vocabulary), so a text
model has a learnable — and at init, hash-aligned — signal to recover.

Noise words and user names are chosen so they never land in the same hash
bucket as a class token under the default hashing vocabulary; otherwise a
random distractor would systematically impersonate a city.
"""

from __future__ import annotations

import random
from pathlib import Path

from .corpus import LocationLabel, PostRecord, UserRecord, save_dataset
from .encoder import HashingTokenizer

_SOURCES = ["web", "mobile", "tablet"]
_TIMEZONES = ["utc", "est", "cet", "jst", "pst"]


def generate_corpus(
    n_classes: int = 20,
    users_per_class: int = 40,
    posts_per_user: int = 8,
    seed: int = 0,
    with_coords: bool = True,
    class_token_in_posts: bool = True,
    noise_vocab_size: int = 200,
    noise_words: tuple[int, int] = (3, 6),
    hash_vocab_size: int = 4096,
) -> tuple[list[UserRecord], list[LocationLabel]]:
    """Generate K*`users_per_class` users over K synthetic city classes.

    With `class_token_in_posts` every post text mentions the user's city
    token once; without it posts are pure noise (useful as a chance-level
    control).
    """
    rng = random.Random(seed)
    labels = []
    for j in range(n_classes):
        coords = {}
        if with_coords:
            # spread over the globe, well inside valid ranges
            coords = {
                "latitude": round(-54.0 + 108.0 * j / max(1, n_classes - 1), 4),
                "longitude": round(-150.0 + 300.0 * ((j * 7) % n_classes) / max(1, n_classes - 1), 4),
            }
        name = f"city{j:02d}"
        labels.append(LocationLabel(label_id=name, name=name, **coords))

    tokenizer = HashingTokenizer(vocab_size=hash_vocab_size)
    class_buckets = {tokenizer.token_id(lab.name) for lab in labels}
    vocab: list[str] = []
    word_index = 0
    while len(vocab) < noise_vocab_size:
        word = f"w{word_index:03d}"
        word_index += 1
        if tokenizer.token_id(word) not in class_buckets:
            vocab.append(word)

    users = []
    uid = 0
    for label in labels:
        for _ in range(users_per_class):
            posts = []
            for p in range(posts_per_user):
                words = rng.choices(vocab, k=rng.randint(*noise_words))
                if class_token_in_posts:
                    words.insert(rng.randrange(len(words) + 1), label.name)
                day, hour = divmod(posts_per_user - p, 24)
                post = PostRecord(
                    text=" ".join(words),
                    source=rng.choice(_SOURCES),
                    created_at=f"2024-02-{10 + day:02d}T{hour:02d}:00:00+00:00",
                )
                if rng.random() < 0.3:
                    post.hashtags = rng.choices(vocab, k=2)
                if rng.random() < 0.2:
                    post.extra = {"device": rng.choice(["cam", "phone"])}
                posts.append(post)
            handle = f"user{uid:05d}"
            while tokenizer.token_id(handle) in class_buckets:
                handle += "x"
            profile = {
                "name": handle,
                "description": " ".join(rng.choices(vocab, k=5)),
                "timezone": rng.choice(_TIMEZONES),
            }
            users.append(
                UserRecord(user_id=f"u{uid:05d}", profile=profile, posts=posts, label_id=label.label_id)
            )
            uid += 1
    return users, labels


def write_corpus(path: str | Path, **kwargs) -> tuple[int, int]:
    """Generate and save a corpus; returns (n_users, n_classes)."""
    users, labels = generate_corpus(**kwargs)
    save_dataset(users, labels, path)
    return len(users), len(labels)
