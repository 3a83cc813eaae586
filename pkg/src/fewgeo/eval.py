"""Inference by contrastive similarity, plus accuracy and distance metrics.

Prediction is the argmax of dot products between the user embedding and
the bank of prompted class embeddings — no loss heads are involved at
inference time. Distance errors use the great-circle distance on a sphere
of radius 6371.0088 km and are reported only when every label carries
coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import LocationLabel, UserRecord

EARTH_RADIUS_KM = 6371.0088


@dataclass
class EvalReport:
    """Metrics of one evaluation pass over a test set."""

    acc: float
    n_test: int
    mean_distance_km: float | None = None
    median_distance_km: float | None = None
    per_class_acc: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "n_test": self.n_test,
            "meanD_km": self.mean_distance_km,
            "medD_km": self.median_distance_km,
            "per_class_acc": dict(sorted(self.per_class_acc.items())),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(
            acc=obj["acc"],
            n_test=obj["n_test"],
            mean_distance_km=obj.get("meanD_km"),
            median_distance_km=obj.get("medD_km"),
            per_class_acc=dict(obj.get("per_class_acc", {})),
        )


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance between two (lat, lon) points in kilometers."""
    for lat, lon in (a, b):
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} out of range")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude {lon} out of range")
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    s = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def _argmax_first(scores: np.ndarray) -> int:
    # np.argmax returns the first maximum: ties resolve to the lowest index
    return int(np.argmax(scores))


def predict_users(model, users: list[UserRecord], batch_size: int = 1) -> list[str]:
    """Predicted label ids for a list of users against the model's bank."""
    bank = model.bank_embeddings()
    predictions = []
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        with torch.no_grad():
            embeddings = model.user_embeddings(chunk)
            scores = embeddings @ bank.T
        for row in scores.numpy():
            predictions.append(model.labels[_argmax_first(row)].label_id)
    return predictions


def predict(model, user: UserRecord) -> str:
    """Most similar class for one user (ties to the lowest bank index)."""
    return predict_users(model, [user], batch_size=1)[0]


def evaluate(
    test_users: list[UserRecord],
    predictions: list[str],
    labels: list[LocationLabel],
) -> EvalReport:
    """Accuracy, per-class accuracy, and distance errors when available.

    Distances pair the predicted and the gold city coordinates (zero for a
    correct prediction); the median is the lower middle value for even n.
    """
    if not test_users:
        raise ValueError("cannot evaluate an empty test set")
    if len(test_users) != len(predictions):
        raise ValueError("one prediction per test user required")
    by_id = {lab.label_id: lab for lab in labels}
    correct_total = 0
    class_totals: dict[str, list[int]] = {}
    distances: list[float] | None = [] if all(lab.has_coordinates for lab in labels) else None
    for user, predicted in zip(test_users, predictions):
        hit = int(predicted == user.label_id)
        correct_total += hit
        class_totals.setdefault(user.label_id, [0, 0])
        class_totals[user.label_id][0] += hit
        class_totals[user.label_id][1] += 1
        if distances is not None:
            if hit:
                distances.append(0.0)
            else:
                gold, pred = by_id[user.label_id], by_id[predicted]
                distances.append(
                    haversine_km((pred.latitude, pred.longitude), (gold.latitude, gold.longitude))
                )
    n = len(test_users)
    mean_d = med_d = None
    if distances is not None:
        mean_d = sum(distances) / n
        med_d = sorted(distances)[(n - 1) // 2]
    return EvalReport(
        acc=correct_total / n,
        n_test=n,
        mean_distance_km=mean_d,
        median_distance_km=med_d,
        per_class_acc={lab: hits / total for lab, (hits, total) in class_totals.items()},
    )


def write_report_json(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report.to_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")


def _fmt(value: float | None, scale: float = 1.0, digits: int = 2) -> str:
    if value is None:
        return "-"
    return f"{value * scale:.{digits}f}"


def report_text_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Plain-text metric table: acc (%), meanD (km), medD (km) per row."""
    header = f"{'run':<18}{'acc(%)':>10}{'meanD(km)':>12}{'medD(km)':>12}"
    lines = [header, "-" * len(header)]
    for name, report in rows:
        lines.append(
            f"{name:<18}{_fmt(report.acc, 100.0):>10}"
            f"{_fmt(report.mean_distance_km):>12}{_fmt(report.median_distance_km):>12}"
        )
    return "\n".join(lines) + "\n"


def plot_accuracy_vs_shots(shot_accs: dict[int, float], path: str | Path) -> None:
    """Accuracy-vs-shots line plot; needs the optional matplotlib extra."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover
        raise RuntimeError("plotting requires matplotlib (install the 'plot' extra)") from exc
    shots = sorted(shot_accs)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(shots, [100.0 * shot_accs[s] for s in shots], marker="o")
    ax.set_xlabel("training samples per class")
    ax.set_ylabel("accuracy (%)")
    ax.set_xticks(shots)
    ax.grid(True, alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
