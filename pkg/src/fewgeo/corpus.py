"""Dataset model, JSONL ingestion, and the per-class few-shot split protocol.

A dataset is a JSON-lines file, one user per line:

    {"user_id": "...", "profile": {"name": "...", ...},
     "posts": [{"text": "...", "source": "...", "hashtags": [...],
                "created_at": "2024-01-02T03:04:05+00:00", "extra": {...}}, ...],
     "label": {"name": "paris", "lat": 48.85, "lon": 2.35}}

Unknown keys are rejected so corrupted exports fail loudly. All operations
here are pure functions of their inputs and seeds.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyDatasetError(ValueError):
    """Raised when preprocessing leaves no classes behind."""


class SplitError(ValueError):
    """Raised when a class is too small for the requested partition."""


_USER_KEYS = {"user_id", "profile", "posts", "label"}
_POST_KEYS = {"text", "source", "hashtags", "created_at", "extra"}
_LABEL_KEYS = {"name", "lat", "lon"}


@dataclass
class PostRecord:
    """One social-media post; `text` is required but may be empty."""

    text: str
    source: str | None = None
    hashtags: list[str] | None = None
    created_at: str | None = None
    extra: dict[str, str] | None = None

    def validate(self) -> None:
        if not isinstance(self.text, str):
            raise ValueError("post text must be a string")
        if self.extra is not None:
            for key in self.extra:
                if not isinstance(key, str) or not key:
                    raise ValueError("extra keys must be nonempty strings")
        if self.created_at is not None:
            parse_timestamp(self.created_at)


@dataclass
class UserRecord:
    """One user: ordered profile fields plus posts, most recent first."""

    user_id: str
    profile: dict[str, str]
    posts: list[PostRecord]
    label_id: str


@dataclass(frozen=True)
class LocationLabel:
    """A location class; coordinates are optional but travel as a pair."""

    label_id: str
    name: str
    latitude: float | None = None
    longitude: float | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("label name must be nonempty")
        if (self.latitude is None) != (self.longitude is None):
            raise ValueError(f"label {self.name!r}: latitude/longitude must both be present or both absent")
        if self.latitude is not None:
            if not -90.0 <= self.latitude <= 90.0:
                raise ValueError(f"label {self.name!r}: latitude {self.latitude} out of range")
            if not -180.0 <= self.longitude <= 180.0:
                raise ValueError(f"label {self.name!r}: longitude {self.longitude} out of range")

    @property
    def has_coordinates(self) -> bool:
        return self.latitude is not None


@dataclass
class FewShotSplit:
    """Train/dev/test partition plus seeded s-shot training subsets.

    `shot_subsets` maps (s, seed_index) to the sampled training user ids;
    `shortfall_classes` records, per s, the classes with fewer than s
    training users (those contribute everything they have).
    """

    train_ids: set[str]
    dev_ids: set[str]
    test_ids: set[str]
    global_seed: int
    ratios: tuple[float, float, float]
    dev_cap: int
    shot_subsets: dict[tuple[int, int], set[str]] = field(default_factory=dict)
    shortfall_classes: dict[int, list[str]] = field(default_factory=dict)


def stable_seed(*parts) -> int:
    """Derive a 64-bit seed from arbitrary parts, stable across processes."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def parse_timestamp(value: str) -> datetime:
    """Parse an ISO-8601 UTC timestamp; 'Z' suffix accepted."""
    if not isinstance(value, str):
        raise ValueError("created_at must be an ISO-8601 string")
    text = value.replace("Z", "+00:00") if value.endswith("Z") else value
    try:
        return datetime.fromisoformat(text)
    except ValueError as exc:
        raise ValueError(f"bad created_at {value!r}: {exc}") from exc


def _json_object_strict(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise ValueError(f"duplicate key {key!r}")
        obj[key] = value
    return obj


def _check_keys(obj: Mapping, allowed: set[str], what: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown {what} key(s): {sorted(unknown)}")


def _parse_post(obj: Mapping) -> PostRecord:
    if not isinstance(obj, dict):
        raise ValueError("post must be an object")
    _check_keys(obj, _POST_KEYS, "post")
    if "text" not in obj:
        raise ValueError("post missing required key 'text'")
    hashtags = obj.get("hashtags")
    if hashtags is not None and (
        not isinstance(hashtags, list) or not all(isinstance(h, str) for h in hashtags)
    ):
        raise ValueError("hashtags must be a list of strings")
    extra = obj.get("extra")
    if extra is not None and not isinstance(extra, dict):
        raise ValueError("extra must be an object")
    post = PostRecord(
        text=obj["text"],
        source=obj.get("source"),
        hashtags=list(hashtags) if hashtags is not None else None,
        created_at=obj.get("created_at"),
        extra=dict(extra) if extra is not None else None,
    )
    post.validate()
    return post


def _parse_label(obj: Mapping) -> LocationLabel:
    if not isinstance(obj, dict):
        raise ValueError("label must be an object")
    _check_keys(obj, _LABEL_KEYS, "label")
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise ValueError("label name must be a nonempty string")
    lat, lon = obj.get("lat"), obj.get("lon")
    return LocationLabel(label_id=name, name=name, latitude=lat, longitude=lon)


def _order_posts(posts: list[PostRecord]) -> list[PostRecord]:
    # Sort most-recent-first only when every post is timestamped; with a
    # partially timestamped history the file order is the only signal left.
    if posts and all(p.created_at is not None for p in posts):
        return sorted(posts, key=lambda p: parse_timestamp(p.created_at), reverse=True)
    return list(posts)


def load_dataset(path: str | Path) -> tuple[list[UserRecord], list[LocationLabel]]:
    """Load a JSONL dataset, deduplicating labels by name.

    Raises DatasetFormatError with the line number on any malformed line,
    duplicate user id, or conflicting label coordinates.
    """
    users: list[UserRecord] = []
    labels: dict[str, LocationLabel] = {}
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line, object_pairs_hook=_json_object_strict)
            except ValueError as exc:
                raise DatasetFormatError(f"invalid JSON: {exc}", lineno) from exc
            try:
                if not isinstance(obj, dict):
                    raise ValueError("record must be an object")
                _check_keys(obj, _USER_KEYS, "user")
                user_id = obj.get("user_id")
                if not isinstance(user_id, str) or not user_id:
                    raise ValueError("user_id must be a nonempty string")
                if user_id in seen_ids:
                    raise ValueError(f"duplicate user_id {user_id!r}")
                profile = obj.get("profile")
                if not isinstance(profile, dict) or not all(
                    isinstance(k, str) and isinstance(v, str) for k, v in profile.items()
                ):
                    raise ValueError(f"user {user_id!r}: profile must map strings to strings")
                posts_raw = obj.get("posts")
                if not isinstance(posts_raw, list):
                    raise ValueError(f"user {user_id!r}: posts must be a list")
                posts = _order_posts([_parse_post(p) for p in posts_raw])
                if "label" not in obj:
                    raise ValueError(f"user {user_id!r}: missing label")
                label = _parse_label(obj["label"])
            except ValueError as exc:
                raise DatasetFormatError(str(exc), lineno) from exc
            known = labels.get(label.name)
            if known is None:
                labels[label.name] = label
            elif known != label:
                raise DatasetFormatError(
                    f"label {label.name!r} redefined with different coordinates", lineno
                )
            seen_ids.add(user_id)
            users.append(UserRecord(user_id=user_id, profile=profile, posts=posts, label_id=label.label_id))
    return users, list(labels.values())


def _post_to_obj(post: PostRecord) -> dict:
    obj: dict = {"text": post.text}
    if post.source is not None:
        obj["source"] = post.source
    if post.hashtags is not None:
        obj["hashtags"] = post.hashtags
    if post.created_at is not None:
        obj["created_at"] = post.created_at
    if post.extra is not None:
        obj["extra"] = post.extra
    return obj


def _label_to_obj(label: LocationLabel) -> dict:
    obj: dict = {"name": label.name}
    if label.has_coordinates:
        obj["lat"] = label.latitude
        obj["lon"] = label.longitude
    return obj


def save_dataset(users: Sequence[UserRecord], labels: Sequence[LocationLabel], path: str | Path) -> None:
    """Write the canonical JSONL form; load -> save round-trips byte-identically."""
    by_id = {label.label_id: label for label in labels}
    with open(path, "w", encoding="utf-8") as handle:
        for user in users:
            obj = {
                "user_id": user.user_id,
                "profile": user.profile,
                "posts": [_post_to_obj(p) for p in user.posts],
                "label": _label_to_obj(by_id[user.label_id]),
            }
            handle.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n")


def class_counts(users: Iterable[UserRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for user in users:
        counts[user.label_id] = counts.get(user.label_id, 0) + 1
    return counts


def filter_minority_classes(
    users: Sequence[UserRecord], labels: Sequence[LocationLabel], min_count: int = 3
) -> tuple[list[UserRecord], list[LocationLabel]]:
    """Drop classes with fewer than `min_count` users, and their users with them."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = class_counts(users)
    surviving = {lab.label_id for lab in labels if counts.get(lab.label_id, 0) >= min_count}
    if not surviving:
        raise EmptyDatasetError(f"no class has at least {min_count} users")
    kept_users = [u for u in users if u.label_id in surviving]
    kept_labels = [lab for lab in labels if lab.label_id in surviving]
    return kept_users, kept_labels


def _partition_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """floor(train), floor(dev), remainder test; then move from the largest
    partition until every partition has at least one member."""
    counts = [math.floor(ratios[0] * n), math.floor(ratios[1] * n), 0]
    counts[2] = n - counts[0] - counts[1]
    while min(counts) == 0:
        donor = counts.index(max(counts))  # ties resolve train, dev, test
        receiver = counts.index(0)
        counts[donor] -= 1
        counts[receiver] += 1
    return counts[0], counts[1], counts[2]


def make_split(
    users: Sequence[UserRecord],
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
    global_seed: int = 0,
    dev_cap: int | None = None,
) -> FewShotSplit:
    """Per-class 0.7/0.15/0.15 partition with dev downsampling.

    Every class must have at least 3 users. The dev set is capped at
    `dev_cap` users per class to rebalance it; when None the cap defaults
    to the (lower) median per-class dev count. The test set is untouched.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    by_class: dict[str, list[str]] = {}
    for user in users:
        by_class.setdefault(user.label_id, []).append(user.user_id)
    for label_id, ids in by_class.items():
        if len(ids) < 3:
            raise SplitError(f"class {label_id!r} has only {len(ids)} users; need at least 3")

    train: set[str] = set()
    dev_by_class: dict[str, list[str]] = {}
    test: set[str] = set()
    for label_id in sorted(by_class):
        ids = sorted(by_class[label_id])
        random.Random(stable_seed("split", global_seed, label_id)).shuffle(ids)
        n_train, n_dev, _ = _partition_counts(len(ids), ratios)
        train.update(ids[:n_train])
        dev_by_class[label_id] = ids[n_train:n_train + n_dev]
        test.update(ids[n_train + n_dev:])

    if dev_cap is None:
        sizes = sorted(len(v) for v in dev_by_class.values())
        dev_cap = sizes[(len(sizes) - 1) // 2]  # lower median
    dev: set[str] = set()
    for label_id, ids in dev_by_class.items():
        if len(ids) > dev_cap:
            rng = random.Random(stable_seed("devcap", global_seed, label_id))
            ids = rng.sample(sorted(ids), dev_cap)
        dev.update(ids)

    return FewShotSplit(
        train_ids=train,
        dev_ids=dev,
        test_ids=test,
        global_seed=global_seed,
        ratios=tuple(ratios),
        dev_cap=dev_cap,
    )


def make_shot_subsets(
    split: FewShotSplit,
    users: Sequence[UserRecord],
    shots: Sequence[int],
    seeds: Sequence[int],
) -> FewShotSplit:
    """Draw s-shot training subsets, one per (s, seed).

    Each subset samples exactly s training users per class, uniformly
    without replacement; classes with fewer than s training users
    contribute everything they have and are recorded as shortfalls.
    """
    if any(not 1 <= s <= 8 for s in shots):
        raise ValueError("shots must lie in 1..8")
    if len(set(seeds)) != len(seeds):
        raise ValueError("shot seeds must be distinct")
    train_by_class: dict[str, list[str]] = {}
    for user in users:
        if user.user_id in split.train_ids:
            train_by_class.setdefault(user.label_id, []).append(user.user_id)

    subsets: dict[tuple[int, int], set[str]] = {}
    shortfalls: dict[int, list[str]] = {}
    for s in shots:
        short = sorted(lab for lab, ids in train_by_class.items() if len(ids) < s)
        if short:
            shortfalls[s] = short
        for seed_index, seed in enumerate(seeds):
            chosen: set[str] = set()
            for label_id in sorted(train_by_class):
                ids = sorted(train_by_class[label_id])
                if len(ids) <= s:
                    chosen.update(ids)
                else:
                    rng = random.Random(stable_seed("shot", seed, s, label_id))
                    chosen.update(rng.sample(ids, s))
            subsets[(s, seed_index)] = chosen

    return FewShotSplit(
        train_ids=set(split.train_ids),
        dev_ids=set(split.dev_ids),
        test_ids=set(split.test_ids),
        global_seed=split.global_seed,
        ratios=split.ratios,
        dev_cap=split.dev_cap,
        shot_subsets=subsets,
        shortfall_classes=shortfalls,
    )


def split_to_manifest(split: FewShotSplit) -> dict:
    return {
        "global_seed": split.global_seed,
        "ratios": list(split.ratios),
        "dev_cap": split.dev_cap,
        "train_ids": sorted(split.train_ids),
        "dev_ids": sorted(split.dev_ids),
        "test_ids": sorted(split.test_ids),
        "shot_subsets": {f"{s}:{i}": sorted(ids) for (s, i), ids in sorted(split.shot_subsets.items())},
        "shortfall_classes": {str(s): labs for s, labs in sorted(split.shortfall_classes.items())},
    }


def split_from_manifest(obj: Mapping) -> FewShotSplit:
    subsets = {}
    for key, ids in obj.get("shot_subsets", {}).items():
        s, i = key.split(":")
        subsets[(int(s), int(i))] = set(ids)
    return FewShotSplit(
        train_ids=set(obj["train_ids"]),
        dev_ids=set(obj["dev_ids"]),
        test_ids=set(obj["test_ids"]),
        global_seed=obj["global_seed"],
        ratios=tuple(obj["ratios"]),
        dev_cap=obj["dev_cap"],
        shot_subsets=subsets,
        shortfall_classes={int(s): list(v) for s, v in obj.get("shortfall_classes", {}).items()},
    )


def save_split_manifest(split: FewShotSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(split_to_manifest(split), handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_split_manifest(path: str | Path) -> FewShotSplit:
    with open(path, "r", encoding="utf-8") as handle:
        return split_from_manifest(json.load(handle))
