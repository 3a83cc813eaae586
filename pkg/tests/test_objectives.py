import math
from collections import Counter
from decimal import Decimal, getcontext

import pytest
import torch

from _fd import fd_check
from fewgeo.objectives import (
    MatchFusionKind,
    MatchHead,
    MiningKind,
    MiningPolicy,
    SimilarityRow,
    class_loss,
    contrastive_loss,
    contrastive_loss_batch,
    joint_loss,
    match_scores,
    matching_loss,
    mine_negatives,
)

getcontext().prec = 50


def _softmax_ce_oracle(scores: list[float], gold: int, tau: float = 1.0) -> float:
    """50-digit decimal evaluation of -log softmax(scores/tau)[gold]."""
    logits = [Decimal(s) / Decimal(tau) for s in scores]
    shift = max(logits)
    exps = [(z - shift).exp() for z in logits]
    total = sum(exps)
    return float(-( (logits[gold] - shift) - total.ln() ))


def _row(scores, gold=0):
    return SimilarityRow(torch.tensor(scores, dtype=torch.float64), gold)


def test_contrastive_single_class_is_zero():
    assert float(contrastive_loss(_row([3.7]), tau=0.5)) == 0.0


def test_contrastive_uniform_is_log_k():
    loss = contrastive_loss(_row([1.0] * 10, gold=4), tau=0.03)
    assert abs(float(loss) - math.log(10)) < 1e-9


def test_contrastive_matches_decimal_oracle():
    scores = [2.0, 0.0, 0.0]
    got = float(contrastive_loss(_row(scores, gold=0), tau=0.5))
    want = _softmax_ce_oracle(scores, 0, tau=0.5)
    assert abs(got - want) < 1e-12


def test_contrastive_shift_invariance():
    torch.manual_seed(0)
    scores = torch.randn(12, dtype=torch.float64)
    base = float(contrastive_loss(SimilarityRow(scores, 3), tau=0.07))
    for shift in (-100.0, -1.0, 0.5, 250.0):
        moved = float(contrastive_loss(SimilarityRow(scores + shift, 3), tau=0.07))
        assert abs(base - moved) <= 1e-9


def test_contrastive_strictly_decreasing_in_gold_score():
    others = [0.3, -0.2, 0.9]
    losses = [
        float(contrastive_loss(_row([g] + others, gold=0), tau=0.5))
        for g in (0.0, 0.5, 1.0, 2.0, 4.0)
    ]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_contrastive_rejects_bad_inputs():
    with pytest.raises(ValueError, match="finite"):
        SimilarityRow(torch.tensor([1.0, float("nan")]), 0)
    with pytest.raises(ValueError, match="gold"):
        SimilarityRow(torch.tensor([1.0, 2.0]), 5)
    with pytest.raises(ValueError, match="tau"):
        contrastive_loss(_row([1.0, 2.0]), tau=0.0)


def test_contrastive_batch_matches_row_loop():
    torch.manual_seed(1)
    scores = torch.randn(6, 9, dtype=torch.float64)
    gold = torch.tensor([0, 3, 8, 1, 1, 2])
    batched = float(contrastive_loss_batch(scores, gold, tau=0.2))
    rows = [float(contrastive_loss(SimilarityRow(scores[i], int(gold[i])), tau=0.2)) for i in range(6)]
    assert abs(batched - sum(rows) / 6) < 1e-12


def test_contrastive_batch_class_subset():
    torch.manual_seed(2)
    scores = torch.randn(4, 10, dtype=torch.float64)
    gold = torch.tensor([2, 5, 5, 2])
    subset = torch.tensor([2, 5])
    got = float(contrastive_loss_batch(scores, gold, tau=1.0, class_subset=subset))
    want = float(contrastive_loss_batch(scores[:, subset], torch.tensor([0, 1, 1, 0]), tau=1.0))
    assert abs(got - want) < 1e-12


def test_top_mining_takes_all_when_k_is_k_minus_one():
    row = _row([0.5, 0.1, 0.9, 0.3], gold=2)
    picked = mine_negatives(row, MiningPolicy(MiningKind.TOP, 3), rng_seed=0)
    assert sorted(picked) == [0, 1, 3]


def test_top_mining_forced_ordering():
    row = _row([0.1, 0.9, 0.8, 0.2], gold=0)
    assert mine_negatives(row, MiningPolicy(MiningKind.TOP, 2), rng_seed=0) == [1, 2]


def test_top_mining_tie_break_lowest_index():
    row = _row([0.0, 0.5, 0.5, 0.5], gold=0)
    assert mine_negatives(row, MiningPolicy(MiningKind.TOP, 2), rng_seed=0) == [1, 2]


def test_mining_never_returns_gold_and_validates_k():
    row = _row([1.0, 2.0, 3.0], gold=1)
    for seed in range(50):
        picks = mine_negatives(row, MiningPolicy(MiningKind.MULTINOMIAL, 2), seed, tau=0.5)
        assert 1 not in picks
        assert len(set(picks)) == 2
    with pytest.raises(ValueError, match="k=3"):
        mine_negatives(row, MiningPolicy(MiningKind.TOP, 3), 0)


def test_mining_deterministic_given_seed():
    row = _row([0.3, 1.4, -0.2, 0.8, 0.0], gold=0)
    policy = MiningPolicy(MiningKind.MULTINOMIAL, 3)
    assert mine_negatives(row, policy, 123, tau=0.5) == mine_negatives(row, policy, 123, tau=0.5)


def test_mining_rejects_all_minus_inf():
    scores = torch.tensor([1.0, -float("inf"), -float("inf")], dtype=torch.float64)
    row = SimilarityRow.__new__(SimilarityRow)  # bypass finite validation deliberately
    row.scores, row.gold = scores, 0
    with pytest.raises(ValueError, match="-inf"):
        mine_negatives(row, MiningPolicy(MiningKind.MULTINOMIAL, 1), 0)


def test_multinomial_frequencies_match_softmax_weights():
    scores = [0.0, 1.0, 2.0, 0.5]
    gold = 0
    tau = 1.0
    candidates = [1, 2, 3]
    exps = [math.exp(scores[j] / tau) for j in candidates]
    probs = [e / sum(exps) for e in exps]
    trials = 10_000
    counts = Counter()
    row = _row(scores, gold)
    policy = MiningPolicy(MiningKind.MULTINOMIAL, 1)
    for seed in range(trials):
        counts[mine_negatives(row, policy, seed, tau=tau)[0]] += 1
    for j, p in zip(candidates, probs):
        sigma = math.sqrt(trials * p * (1 - p))
        assert abs(counts[j] - trials * p) <= 3 * sigma, (j, counts[j], trials * p)


def _head(kind, h=8, dtype=torch.float64, seed=5):
    torch.manual_seed(seed)
    return MatchHead(h, kind, dtype=dtype)


def test_sum_fusion_with_zero_user_depends_only_on_location():
    head = _head(MatchFusionKind.SUM)
    zero = torch.zeros(8, dtype=torch.float64)
    locs = torch.randn(4, 8, dtype=torch.float64)
    scores = match_scores(zero, locs, head)
    direct = head.scorer(head.adapter(locs)).squeeze(-1)
    assert torch.allclose(scores, direct)


def test_duplicate_candidates_get_duplicate_scores():
    for kind in MatchFusionKind:
        head = _head(kind)
        user = torch.randn(8, dtype=torch.float64)
        loc = torch.randn(8, dtype=torch.float64)
        scores = match_scores(user, torch.stack([loc, loc, loc * 2]), head)
        assert torch.equal(scores[0], scores[1])
        assert not torch.equal(scores[0], scores[2])


def test_match_head_gradients_match_finite_differences():
    for kind in MatchFusionKind:
        head = _head(kind)
        user = torch.randn(8, dtype=torch.float64)
        locs = torch.randn(3, 8, dtype=torch.float64)

        def fn():
            return matching_loss(match_scores(user, locs, head), 0)

        fd_check(fn, dict(head.named_parameters()), samples_per_tensor=3)


def test_match_scores_dimension_mismatch():
    head = _head(MatchFusionKind.CONCAT)
    with pytest.raises(ValueError, match="dimension"):
        match_scores(torch.randn(5, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64), head)


def test_matching_loss_uniform_is_log_k_plus_one():
    loss = matching_loss(torch.zeros(7, dtype=torch.float64), 0)
    assert abs(float(loss) - math.log(7)) < 1e-9


def test_matching_loss_monotone_in_gold_score():
    lower = matching_loss(torch.tensor([10.0, 0.0, 0.0], dtype=torch.float64), 0)
    higher = matching_loss(torch.tensor([20.0, 0.0, 0.0], dtype=torch.float64), 0)
    assert float(higher) < float(lower)
    assert float(higher) >= 0.0


def test_matching_loss_matches_decimal_oracle():
    torch.manual_seed(9)
    scores = torch.randn(7, dtype=torch.float64)
    got = float(matching_loss(scores, 0))
    want = _softmax_ce_oracle([float(s) for s in scores], 0)
    assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_matching_loss_validates():
    with pytest.raises(ValueError):
        matching_loss(torch.tensor([1.0]), 0)
    with pytest.raises(ValueError, match="finite"):
        matching_loss(torch.tensor([1.0, float("inf")]), 0)


def test_joint_loss_composition():
    contrast = torch.tensor(math.log(10), dtype=torch.float64)
    match = torch.tensor(math.log(7), dtype=torch.float64)
    assert float(joint_loss(contrast, None)) == pytest.approx(math.log(10), abs=1e-12)
    assert float(joint_loss(contrast, match)) == pytest.approx(math.log(10) + math.log(7), abs=1e-12)
    torch.manual_seed(3)
    a, b = torch.randn((), dtype=torch.float64).abs(), torch.randn((), dtype=torch.float64).abs()
    assert float(joint_loss(a, b)) == pytest.approx(float(a) + float(b), abs=1e-15)


def test_class_loss_identities_and_oracle():
    head = torch.nn.Linear(8, 4, dtype=torch.float64)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    u = torch.randn(8, dtype=torch.float64)
    assert abs(float(class_loss(u, head, 2).detach()) - math.log(4)) < 1e-12

    single = torch.nn.Linear(8, 1, dtype=torch.float64)
    assert float(class_loss(u, single, 0).detach()) == 0.0

    torch.manual_seed(4)
    head2 = torch.nn.Linear(8, 5, dtype=torch.float64)
    logits = head2(u).detach()
    want = _softmax_ce_oracle([float(x) for x in logits], 3)
    assert abs(float(class_loss(u, head2, 3).detach()) - want) < 1e-10


def test_one_optimizer_step_decreases_joint_loss():
    torch.manual_seed(21)
    h = 8
    user = torch.randn(h, dtype=torch.float64)
    locs = torch.randn(5, h, dtype=torch.float64)

    def build():
        torch.manual_seed(22)
        return MatchHead(h, MatchFusionKind.CONCAT, dtype=torch.float64)

    # line-search property: some lr in the sweep strictly decreases the loss
    decreased = False
    for lr in (1e-3, 1e-4, 1e-5):
        torch.manual_seed(23)
        projection = torch.nn.Parameter(torch.eye(h, dtype=torch.float64) + 0.01 * torch.randn(h, h, dtype=torch.float64))
        head = build()
        params = [projection, *head.parameters()]
        optimizer = torch.optim.AdamW(params, lr=lr, betas=(0.85, 0.999), weight_decay=0.0)

        def joint():
            scores = (user @ projection) @ (locs @ projection).T
            contrast = contrastive_loss(SimilarityRow(scores, 0), 0.5)
            pair_scores = match_scores(user @ projection, locs[[0, 2, 3]] @ projection, head)
            return joint_loss(contrast, matching_loss(pair_scores, 0))

        before = joint()
        before.backward()
        optimizer.step()
        with torch.no_grad():
            after = joint()
        if float(after) < float(before.detach()):
            decreased = True
    assert decreased
