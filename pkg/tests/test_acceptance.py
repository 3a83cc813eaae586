"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured numbers and runtime. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import json
import math
import random
import time
from collections import Counter

import pytest
import torch

from _fd import fd_check
from fewgeo.cli import main as cli_main
from fewgeo.config import run_config_from_dict
from fewgeo.corpus import (
    LocationLabel,
    UserRecord,
    make_shot_subsets,
    make_split,
)
from fewgeo.encoder import TinyTextEncoder
from fewgeo.eval import EARTH_RADIUS_KM, haversine_km
from fewgeo.geo_prompt import (
    TEMPLATE_BANK,
    HardPrompt,
    SoftPrompt,
    encode_location_hard,
    encode_location_soft,
)
from fewgeo.objectives import (
    MatchFusionKind,
    MatchHead,
    MiningKind,
    MiningPolicy,
    SimilarityRow,
    contrastive_loss,
    matching_loss,
    match_scores,
    mine_negatives,
)
from fewgeo.synth import generate_corpus
from fewgeo.trainer import run_fewshot, run_zeroshot
from fewgeo.user_repr import (
    FusionEncoder,
    FusionKind,
    IntegrationKind,
    IntegrationStrategy,
    user_sentences,
)
from fewgeo.corpus import PostRecord


def _report(criterion: str, elapsed: float, limit: float, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: PASS ({elapsed:.2f}s of {limit:.0f}s budget) {detail}")
    assert elapsed <= limit, f"{criterion} exceeded its {limit}s budget: {elapsed:.1f}s"


def test_criterion_1_loss_identities():
    start = time.monotonic()
    for k in (2, 10, 100):
        row = SimilarityRow(torch.full((k,), 0.37, dtype=torch.float64), gold=k // 2)
        assert abs(float(contrastive_loss(row, tau=0.03)) - math.log(k)) < 1e-9
    match = matching_loss(torch.full((7,), -1.2, dtype=torch.float64), 0)
    assert abs(float(match) - math.log(7)) < 1e-9
    _report("1 loss identities", time.monotonic() - start, 1.0,
            "uniform contrastive = ln K for K in {2,10,100}; uniform matching = ln 7")


def test_criterion_2_gradient_suite():
    start = time.monotonic()
    checked = 0

    torch.manual_seed(0)
    encoder = TinyTextEncoder(hidden_size=8, vocab_size=64, max_len=32, dtype=torch.float64)
    seq = encoder.tokenize("gradient suite sample text")
    probe = torch.randn(8, dtype=torch.float64)
    checked += fd_check(lambda: encoder.encode(seq) @ probe, dict(encoder.named_parameters()))

    soft = SoftPrompt.from_hard("I'm in [CLASS].", encoder)
    label = LocationLabel(label_id="paris", name="Paris")
    checked += fd_check(lambda: encode_location_soft(encoder, soft, label) @ probe,
                        {"soft_vectors": soft.vectors})

    features = torch.randn(5, 8, dtype=torch.float64)
    for kind in FusionKind:
        torch.manual_seed(1)
        fusion = FusionEncoder(kind, 8, dtype=torch.float64)
        params = dict(fusion.named_parameters())
        leaf = features.clone().requires_grad_(True)
        checked += fd_check(lambda: fusion(leaf).sum(), {"features": leaf, **params},
                            samples_per_tensor=3)

    user_vec = torch.randn(8, dtype=torch.float64)
    locs = torch.randn(4, 8, dtype=torch.float64)
    for kind in MatchFusionKind:
        torch.manual_seed(2)
        head = MatchHead(8, kind, dtype=torch.float64)
        checked += fd_check(lambda: matching_loss(match_scores(user_vec, locs, head), 0),
                            dict(head.named_parameters()), samples_per_tensor=3)

    _report("2 gradient suite", time.monotonic() - start, 120.0,
            f"{checked} finite-difference coordinates at rel. tol 1e-4 "
            "(encoder, soft prompt, 8 fusion encoders, 3 match fusions)")


def test_criterion_3_semisoft_initialization_equality():
    start = time.monotonic()
    torch.manual_seed(3)
    encoder = TinyTextEncoder(hidden_size=32, vocab_size=4096, max_len=128)
    labels = [LocationLabel(label_id=n, name=n) for n in ("Paris", "New York", "city07")]
    for template in TEMPLATE_BANK:
        soft = SoftPrompt.from_hard(template, encoder)
        for label in labels:
            hard_vec = encode_location_hard(encoder, HardPrompt(template), label, max_len=32)
            soft_vec = encode_location_soft(encoder, soft, label, max_len=32)
            assert torch.equal(hard_vec, soft_vec), (template, label.name)
    _report("3 semisoft init equality", time.monotonic() - start, 5.0,
            f"exact equality for all {len(TEMPLATE_BANK)} shipped templates")


def test_criterion_4_mining():
    start = time.monotonic()
    # Top policy exactness on enumerated cases
    cases = [
        ([0.1, 0.9, 0.8, 0.2], 0, 2, [1, 2]),
        ([0.5, 0.1, 0.9, 0.3], 2, 3, [0, 3, 1]),
        ([1.0, 1.0, 1.0, 1.0], 3, 2, [0, 1]),
        ([-5.0, 2.0, 2.0, -1.0], 0, 1, [1]),
    ]
    for scores, gold, k, expected in cases:
        row = SimilarityRow(torch.tensor(scores, dtype=torch.float64), gold)
        assert mine_negatives(row, MiningPolicy(MiningKind.TOP, k), 0) == expected

    # Multinomial frequencies vs softmax weights over 10,000 draws
    scores = [0.4, 1.3, -0.6, 0.0]
    gold, tau, trials = 0, 0.5, 10_000
    row = SimilarityRow(torch.tensor(scores, dtype=torch.float64), gold)
    candidates = [1, 2, 3]
    weights = [math.exp(scores[j] / tau) for j in candidates]
    probs = [w / sum(weights) for w in weights]
    counts = Counter()
    policy = MiningPolicy(MiningKind.MULTINOMIAL, 1)
    for seed in range(trials):
        counts[mine_negatives(row, policy, seed, tau=tau)[0]] += 1
    for j, p in zip(candidates, probs):
        sigma = math.sqrt(trials * p * (1 - p))
        assert abs(counts[j] - trials * p) <= 3 * sigma, (j, counts[j], trials * p, sigma)
    _report("4 mining", time.monotonic() - start, 30.0,
            f"top-k exact on {len(cases)} cases; multinomial within 3 sigma over {trials} draws")


def _split_protocol_users(total=2000):
    users = []
    sizes = []
    i = 0
    while sum(sizes) < total:
        sizes.append(3 + (i * 7) % 60)
        i += 1
    sizes[-1] -= sum(sizes) - total
    if sizes[-1] < 3:
        sizes[-2] += sizes[-1]
        sizes.pop()
    uid = 0
    for c, size in enumerate(sizes):
        for _ in range(size):
            users.append(UserRecord(user_id=f"u{uid:05d}", profile={}, posts=[], label_id=f"k{c:03d}"))
            uid += 1
    return users


def test_criterion_5_split_protocol():
    start = time.monotonic()
    users = _split_protocol_users(2000)
    assert len(users) == 2000
    split = make_split(users, global_seed=17, dev_cap=10**6)
    split = make_shot_subsets(split, users, list(range(1, 9)), (71, 72, 73))

    by_class = Counter(u.label_id for u in users)
    label_of = {u.user_id: u.label_id for u in users}
    train_c, dev_c, test_c = Counter(), Counter(), Counter()
    for uid in split.train_ids:
        train_c[label_of[uid]] += 1
    for uid in split.dev_ids:
        dev_c[label_of[uid]] += 1
    for uid in split.test_ids:
        test_c[label_of[uid]] += 1
    for label, n in by_class.items():
        counts = [math.floor(0.7 * n), math.floor(0.15 * n), 0]
        counts[2] = n - counts[0] - counts[1]
        while min(counts) == 0:
            counts[counts.index(max(counts))] -= 1
            counts[counts.index(0)] += 1
        assert (train_c[label], dev_c[label], test_c[label]) == tuple(counts), label

    train_by_class = Counter()
    for uid in split.train_ids:
        train_by_class[label_of[uid]] += 1
    for (s, _i), subset in split.shot_subsets.items():
        assert subset <= split.train_ids
        chosen = Counter(label_of[uid] for uid in subset)
        for label, available in train_by_class.items():
            expected = min(s, available)
            assert chosen[label] == expected, (s, label)
            if available < s:
                assert label in split.shortfall_classes[s]

    replay = make_shot_subsets(
        make_split(users, global_seed=17, dev_cap=10**6), users, list(range(1, 9)), (71, 72, 73)
    )
    assert replay == split
    _report("5 split protocol", time.monotonic() - start, 10.0,
            f"2000 users over {len(by_class)} classes: rounding rule, exact shot counts, replay equal")


def test_criterion_6_haversine():
    start = time.monotonic()
    assert haversine_km((37.5, -122.0), (37.5, -122.0)) == 0.0
    assert haversine_km((0.0, 0.0), (0.0, 180.0)) == pytest.approx(math.pi * EARTH_RADIUS_KM, rel=1e-12)

    def chord_oracle(a, b):
        def xyz(lat, lon):
            lat, lon = math.radians(lat), math.radians(lon)
            return (math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat))
        ax, ay, az = xyz(*a)
        bx, by, bz = xyz(*b)
        chord = math.sqrt((ax - bx) ** 2 + (ay - by) ** 2 + (az - bz) ** 2)
        return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, chord / 2.0))

    rng = random.Random(123)
    for _ in range(50):
        a = (rng.uniform(-90, 90), rng.uniform(-180, 180))
        b = (rng.uniform(-90, 90), rng.uniform(-180, 180))
        want = chord_oracle(a, b)
        assert abs(haversine_km(a, b) - want) <= 0.005 * max(want, 1e-9) + 1e-9
    _report("6 haversine", time.monotonic() - start, 1.0,
            "identity and antipodal exact; 50 random pairs within 0.5% of chord oracle")


@pytest.fixture(scope="module")
def experiment_corpus():
    users, labels = generate_corpus(n_classes=20, users_per_class=40, posts_per_user=8, seed=0)
    split = make_split(users, global_seed=11)
    split = make_shot_subsets(split, users, [1, 8], (101, 202, 303))
    return users, labels, split


def _experiment_config(**overrides):
    base = {
        "dataset": {"path": "unused"},
        "representation": {"field_filter": "NoPostMeta"},
        "prompt": {"kind": "semisoft", "template": "[CLASS] in the house!"},
        "objective": {"tau": 0.03},
        "train": {"epochs": 100, "shots": [8], "seed": 0, "lr": 2e-3,
                  "eval_batch_size": 64, "patience": 12},
    }
    for key, value in overrides.items():
        base[key] = {**base.get(key, {}), **value}
    return run_config_from_dict(base)


def test_criterion_7_synthetic_end_to_end(experiment_corpus):
    start = time.monotonic()
    users, labels, split = experiment_corpus
    chance = 1.0 / len(labels)

    eight = run_fewshot(users, labels, split, 8, _experiment_config())
    one = run_fewshot(users, labels, split, 1, _experiment_config(train={"shots": [1]}))
    baseline_one = run_fewshot(
        users, labels, split, 1,
        _experiment_config(objective={"kind": "classifier"}, train={"shots": [1]}),
    )
    zero = run_zeroshot(
        users, labels, split,
        _experiment_config(prompt={"kind": "hard", "template": "[CLASS]"},
                           train={"mode": "zeroshot"}),
    )

    assert eight.averaged.acc >= 0.95, f"8-shot accuracy {eight.averaged.acc:.4f} < 0.95"
    assert one.averaged.acc >= 0.70, f"1-shot accuracy {one.averaged.acc:.4f} < 0.70"
    assert zero.acc >= 2 * chance, f"zero-shot accuracy {zero.acc:.4f} < {2 * chance}"
    assert one.averaged.acc > baseline_one.averaged.acc, (
        f"contrastive 1-shot {one.averaged.acc:.4f} does not beat "
        f"classifier baseline {baseline_one.averaged.acc:.4f}"
    )
    _report(
        "7 synthetic end-to-end", time.monotonic() - start, 600.0,
        f"8-shot {eight.averaged.acc:.3f} (>=0.95), 1-shot {one.averaged.acc:.3f} (>=0.70), "
        f"zero-shot {zero.acc:.3f} (>= {2 * chance:.2f}), "
        f"classifier 1-shot {baseline_one.averaged.acc:.3f} (below contrastive)",
    )


def test_criterion_8_integration_cardinality():
    start = time.monotonic()
    posts = [
        PostRecord(text=f"text {i}", source="web", hashtags=["t"],
                   created_at=f"2024-01-{20 - i:02d}T00:00:00+00:00", extra={"device": "cam"})
        for i in range(6)
    ]
    user = UserRecord(
        user_id="u1",
        profile={"name": "a", "location": "b", "description": "c", "language": "d", "timezone": "e"},
        posts=posts,
        label_id="x",
    )
    fields_per_post = 5  # text, source, hashtags, created_at, extra device
    expected = {
        IntegrationKind.IN1: 1,
        IntegrationKind.IN2: 2,
        IntegrationKind.IN_T: 7,
        IntegrationKind.IN_USER_PLUS_1: 6,
        IntegrationKind.IN_USER_PLUS_T: 11,
        IntegrationKind.NO_IN: 5 + 6 * fields_per_post,
    }
    for kind, n in expected.items():
        sentences = user_sentences(user, IntegrationStrategy(kind=kind, num_posts=6))
        assert len(sentences) == n, (kind, len(sentences), n)
    _report("8 integration cardinality", time.monotonic() - start, 1.0,
            "N = {1, 2, 7, 6, 11, per-field} for T=6 with 5 profile fields")


def test_criterion_9_determinism_replay(tmp_path):
    start = time.monotonic()
    corpus_path = tmp_path / "corpus.jsonl"
    assert cli_main(["synth", "--out", str(corpus_path), "--classes", "4",
                     "--users-per-class", "8", "--posts", "3", "--seed", "9"]) == 0
    config = {
        "dataset": {"path": str(corpus_path)},
        "representation": {"field_filter": "NoPostMeta"},
        "prompt": {"kind": "semisoft", "template": "[CLASS] in the house!"},
        "train": {"epochs": 3, "shots": [1, 2], "seed": 0, "eval_batch_size": 16, "patience": 3},
    }
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")
    first = tmp_path / "first"
    assert cli_main(["train", "--config", str(config_path), "--out", str(first)]) == 0
    replay = tmp_path / "replay"
    assert cli_main(["train", "--config", str(first / "run_manifest.json"), "--out", str(replay)]) == 0
    metric_files = sorted(p.relative_to(first) for p in first.rglob("*") if p.suffix in (".json", ".csv", ".txt"))
    assert metric_files
    for rel in metric_files:
        assert (first / rel).read_bytes() == (replay / rel).read_bytes(), rel
    _report("9 determinism replay", time.monotonic() - start, 120.0,
            f"{len(metric_files)} metric files byte-identical after replay from the manifest")
