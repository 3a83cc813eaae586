"""Training loop and experiment runners.

Few-shot runs train once per seeded s-shot subset (three subsets), pick
the best-dev snapshot via early stopping, evaluate each on the untouched
test set, and average the three reports. Everything is deterministic
given the config: shuffling, mining draws, and model initialization all
derive their seeds from it.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

import torch

from .config import RunConfig, TrainConfig, run_config_to_dict
from .corpus import FewShotSplit, LocationLabel, UserRecord, stable_seed
from .eval import EvalReport, evaluate, predict_users
from .model import GeoModel, build_model
from .objectives import (
    MiningKind,
    MiningPolicy,
    SimilarityRow,
    class_loss,
    contrastive_loss_batch,
    joint_loss,
    matching_loss,
    mine_negatives,
)


class TrainingDivergedError(RuntimeError):
    """Raised when a batch produces a non-finite loss."""


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    best_dev_acc: float = 0.0
    best_epoch: int = -1
    trained_epochs: int = 0


@dataclass
class RunResult:
    """One few-shot experiment: three subset runs and their average."""

    s: int
    per_subset: list[EvalReport]
    averaged: EvalReport
    curves: list[list[dict]]
    snapshots: list[dict]
    model_seeds: list[int]
    shortfall: list[str] = field(default_factory=list)


def _chunks(items: list, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def _match_term(
    model: GeoModel,
    user_vecs: torch.Tensor,
    loc_vecs: torch.Tensor,
    scores: torch.Tensor,
    gold: torch.Tensor,
    policy: MiningPolicy,
    tau: float,
    seed_parts: tuple,
) -> torch.Tensor:
    """Mean (k+1)-way matching loss over the batch, gold pair first."""
    candidate_rows = []
    for i in range(scores.shape[0]):
        row = SimilarityRow(scores[i].detach(), int(gold[i]))
        negatives = mine_negatives(row, policy, stable_seed(*seed_parts, i), tau=tau)
        candidate_rows.append([int(gold[i])] + negatives)
    candidates = torch.tensor(candidate_rows, dtype=torch.long)
    pair_locs = loc_vecs[candidates]                      # [B, k+1, H]
    fused = model.match_head.fuse(user_vecs.unsqueeze(1), pair_locs)
    pair_scores = model.match_head.scorer(fused).squeeze(-1)  # [B, k+1]
    return torch.stack([matching_loss(row, 0) for row in pair_scores]).mean()


def _classifier_predictions(model: GeoModel, users: list[UserRecord], batch_size: int) -> list[str]:
    predictions = []
    with torch.no_grad():
        for chunk in _chunks(users, batch_size):
            logits = model.class_head(model.user_embeddings(chunk))
            predictions.extend(model.labels[j].label_id for j in logits.argmax(dim=-1).tolist())
    return predictions


def _predictions(model: GeoModel, users: list[UserRecord], batch_size: int) -> list[str]:
    if model.class_head is not None:
        return _classifier_predictions(model, users, batch_size)
    return predict_users(model, users, batch_size=batch_size)


def _dev_accuracy(model: GeoModel, dev_users: list[UserRecord], cfg: TrainConfig) -> float:
    predictions = _predictions(model, dev_users, cfg.eval_batch_size)
    return sum(p == u.label_id for p, u in zip(predictions, dev_users)) / len(dev_users)


def train(
    model: GeoModel,
    train_users: list[UserRecord],
    dev_users: list[UserRecord],
    cfg: TrainConfig,
    objective_kind: str = "contrastive",
    mining: MiningPolicy | None = None,
    contrast_scope: str = "all",
) -> TrainResult:
    """Minimize the joint objective with early stopping on dev accuracy.

    Returns the training curve; the model is left holding the best-dev
    snapshot. With epochs=0 the initial parameters are returned unchanged.
    """
    if not train_users:
        raise ValueError("training subset is empty")
    if not dev_users:
        raise ValueError("early stopping needs a dev set")
    optimizer = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.lr,
        betas=(cfg.opt_beta1, cfg.opt_beta2),
        weight_decay=cfg.weight_decay,
    )
    shuffle_rng = random.Random(stable_seed("shuffle", cfg.seed))
    result = TrainResult()
    best_state: dict | None = None
    evals_since_improve = 0
    k_classes = len(model.labels)

    for epoch in range(cfg.epochs):
        order = list(train_users)
        shuffle_rng.shuffle(order)
        sums = {"contrast": 0.0, "match": 0.0, "class": 0.0}
        batches = 0
        for step, batch in enumerate(_chunks(order, cfg.batch_size)):
            optimizer.zero_grad(set_to_none=True)
            try:
                user_vecs = model.user_embeddings(batch)
                gold = model.gold_indices(batch)
                if objective_kind == "classifier":
                    loss = class_loss(user_vecs, model.class_head, gold)
                    sums["class"] += float(loss.detach())
                else:
                    loc_vecs = model.location_embeddings()
                    scores = user_vecs @ loc_vecs.T
                    subset = torch.unique(gold) if contrast_scope == "batch" else None
                    term_c = contrastive_loss_batch(scores, gold, cfg.tau, subset)
                    term_m = None
                    if mining is not None and model.match_head is not None and k_classes >= 2:
                        policy = MiningPolicy(mining.kind, min(mining.k, k_classes - 1))
                        term_m = _match_term(
                            model, user_vecs, loc_vecs, scores, gold, policy, cfg.tau,
                            ("mine", cfg.seed, epoch, step),
                        )
                    loss = joint_loss(term_c, term_m)
                    sums["contrast"] += float(term_c.detach())
                    sums["match"] += float(term_m.detach()) if term_m is not None else 0.0
            except ValueError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch} step {step}, batch users "
                    f"{[u.user_id for u in batch]}: {exc}"
                ) from exc
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"batch users: {[u.user_id for u in batch]}"
                )
            loss.backward()
            optimizer.step()
            model.invalidate_bank()
            batches += 1

        dev_acc = _dev_accuracy(model, dev_users, cfg)
        point = {"epoch": epoch, "dev_acc": dev_acc}
        if objective_kind == "classifier":
            point["loss_class"] = sums["class"] / batches
        else:
            point["loss_contrast"] = sums["contrast"] / batches
            point["loss_match"] = sums["match"] / batches
        result.curve.append(point)
        result.trained_epochs = epoch + 1

        if dev_acc > result.best_dev_acc or best_state is None:
            result.best_dev_acc = dev_acc
            result.best_epoch = epoch
            best_state = model.snapshot()
            evals_since_improve = 0
        else:
            evals_since_improve += 1
            if evals_since_improve >= cfg.patience:
                break

    if best_state is not None:
        model.load_snapshot(best_state)
    return result


def average_reports(reports: list[EvalReport]) -> EvalReport:
    """Arithmetic mean of the subset reports (including per-class accuracy)."""
    n = len(reports)
    mean_d = med_d = None
    if all(r.mean_distance_km is not None for r in reports):
        mean_d = sum(r.mean_distance_km for r in reports) / n
        med_d = sum(r.median_distance_km for r in reports) / n
    classes = sorted({c for r in reports for c in r.per_class_acc})
    per_class = {
        c: sum(r.per_class_acc.get(c, 0.0) for r in reports) / n for c in classes
    }
    return EvalReport(
        acc=sum(r.acc for r in reports) / n,
        n_test=reports[0].n_test,
        mean_distance_km=mean_d,
        median_distance_km=med_d,
        per_class_acc=per_class,
    )


def _users_for(users: list[UserRecord], ids: set[str]) -> list[UserRecord]:
    return [u for u in users if u.user_id in ids]


def run_fewshot(
    users: list[UserRecord],
    labels: list[LocationLabel],
    split: FewShotSplit,
    s: int,
    cfg: RunConfig,
) -> RunResult:
    """Train on each of the three s-shot subsets and average the test reports."""
    torch.set_num_threads(1)  # keeps reruns bitwise-reproducible
    dev_users = _users_for(users, split.dev_ids)
    test_users = _users_for(users, split.test_ids)
    mining = MiningPolicy(MiningKind(cfg.objective.mining), cfg.objective.k) if cfg.objective.k >= 1 else None
    reports, curves, snapshots, seeds = [], [], [], []
    for subset_index in range(3):
        key = (s, subset_index)
        if key not in split.shot_subsets:
            raise ValueError(f"split has no {s}-shot subset for seed index {subset_index}")
        subset_users = _users_for(users, split.shot_subsets[key])
        model_seed = stable_seed("model", cfg.train.seed, s, subset_index)
        model = build_model(cfg, labels, model_seed)
        result = train(
            model,
            subset_users,
            dev_users,
            cfg.train,
            objective_kind=cfg.objective.kind,
            mining=mining,
            contrast_scope=cfg.objective.contrast_scope,
        )
        predictions = _predictions(model, test_users, cfg.train.eval_batch_size)
        reports.append(evaluate(test_users, predictions, labels))
        curves.append(result.curve)
        snapshots.append(model.snapshot())
        seeds.append(model_seed)
    return RunResult(
        s=s,
        per_subset=reports,
        averaged=average_reports(reports),
        curves=curves,
        snapshots=snapshots,
        model_seeds=seeds,
        shortfall=split.shortfall_classes.get(s, []),
    )


def run_zeroshot(
    users: list[UserRecord],
    labels: list[LocationLabel],
    split: FewShotSplit,
    cfg: RunConfig,
) -> EvalReport:
    """Inference with the freshly initialized (or loaded) snapshot; no steps."""
    torch.set_num_threads(1)
    test_users = _users_for(users, split.test_ids)
    model = build_model(cfg, labels, stable_seed("model", cfg.train.seed, 0, 0))
    predictions = _predictions(model, test_users, cfg.train.eval_batch_size)
    return evaluate(test_users, predictions, labels)


def dataset_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def build_run_manifest(cfg: RunConfig, digest: str | None = None, extra: dict | None = None) -> dict:
    manifest = {
        "kind": "run_manifest",
        "config": run_config_to_dict(cfg),
        "dataset_sha256": digest if digest is not None else dataset_digest(cfg.dataset_path),
        "lr_profile": cfg.lr_profile,
    }
    if extra:
        manifest.update(extra)
    return manifest
