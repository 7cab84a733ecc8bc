"""Entropy-score verdicts over recovered triggers, with the closed-form threshold.

Perturb every scanning image with the recovered trigger, histogram the
predicted classes, and take the Shannon entropy (bits). A backdoored model
funnels nearly everything into one class (entropy near zero); a clean model
keeps the class diversity of the scanning set. If at least a (1 - delta)
fraction lands in one class, entropy is bounded by

    -(1 - delta) log2(1 - delta) - delta log2(delta / (C - 1))

(worst case: the stray delta mass spread evenly over the other C - 1
classes), which gives a universal verdict threshold from just the class
count and an assumed backdoor effectiveness.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import predict_classes
from .poison import apply_trigger_batch

VERDICT_TROJAN = "trojan"
VERDICT_PURE = "pure"

DEFAULT_DELTA = 0.01  # assumed minimum backdoor effectiveness 1 - delta


def class_histogram(model, images, trigger, seed=0):
    """Predicted-class counts over images perturbed by the trigger."""
    if len(images) == 0:
        raise ConfigError("empty scanning set")
    rng = np.random.default_rng(seed)
    perturbed = apply_trigger_batch(images, trigger, rng)
    pred = predict_classes(model, perturbed)
    return np.bincount(pred, minlength=model.arch.classes).astype(np.int64)


def entropy_bits(counts):
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ConfigError("empty histogram")
    p = counts / total
    nz = p > 0
    return float(-(p[nz] * np.log2(p[nz])).sum())


def entropy_score(model, images, trigger, seed=0):
    """Entropy (bits) of the predicted-class histogram under the trigger."""
    return entropy_bits(class_histogram(model, images, trigger, seed=seed))


def lemma1_threshold(classes, delta):
    """Upper bound (bits) on a backdoored model's entropy score.

    delta = 0 returns exactly 0.0 (continuity limit of a perfectly effective
    backdoor); other values outside (0, 1) are rejected.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if delta == 0:
        return 0.0
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    return float(-(1.0 - delta) * np.log2(1.0 - delta) - delta * np.log2(delta / (classes - 1)))


def classify_model(entropy, threshold):
    """Trojan verdict iff entropy <= threshold (the bound is inclusive)."""
    if entropy < 0:
        raise ConfigError(f"entropy must be >= 0, got {entropy}")
    return VERDICT_TROJAN if entropy <= threshold else VERDICT_PURE


def f1_score(verdicts, ground_truth):
    """F1 with trojan as the positive class; 0 when precision+recall is 0."""
    if len(verdicts) != len(ground_truth):
        raise ConfigError("verdicts and ground truth differ in length")
    tp = sum(1 for v, g in zip(verdicts, ground_truth) if v == VERDICT_TROJAN and g)
    fp = sum(1 for v, g in zip(verdicts, ground_truth) if v == VERDICT_TROJAN and not g)
    fn = sum(1 for v, g in zip(verdicts, ground_truth) if v == VERDICT_PURE and g)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class EntropyReport:
    model_id: str
    counts: list
    probabilities: list
    entropy_bits: float
    threshold: float
    verdict: str
    delta: float

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "counts": list(map(int, self.counts)),
            "probabilities": list(map(float, self.probabilities)),
            "entropy_bits": self.entropy_bits,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "delta": self.delta,
        }


def evaluate_model(model, images, trigger, delta=DEFAULT_DELTA, model_id="", seed=0):
    """Full detector pass for one model: histogram, entropy, threshold, verdict."""
    counts = class_histogram(model, images, trigger, seed=seed)
    score = entropy_bits(counts)
    threshold = lemma1_threshold(model.arch.classes, delta)
    return EntropyReport(
        model_id=model_id,
        counts=counts.tolist(),
        probabilities=(counts / counts.sum()).tolist(),
        entropy_bits=score,
        threshold=threshold,
        verdict=classify_model(score, threshold),
        delta=delta,
    )


@dataclass
class DetectionSummary:
    reports: list  # EntropyReport
    ground_truth: list  # bool per report, True = trojan
    confusion: dict = field(default_factory=dict)
    f1: float = 0.0

    def __post_init__(self):
        if len(self.reports) != len(self.ground_truth):
            raise ConfigError("reports and ground truth differ in length")
        verdicts = [r.verdict for r in self.reports]
        gt = list(map(bool, self.ground_truth))
        self.confusion = {
            "tp": sum(1 for v, g in zip(verdicts, gt) if v == VERDICT_TROJAN and g),
            "fp": sum(1 for v, g in zip(verdicts, gt) if v == VERDICT_TROJAN and not g),
            "tn": sum(1 for v, g in zip(verdicts, gt) if v == VERDICT_PURE and not g),
            "fn": sum(1 for v, g in zip(verdicts, gt) if v == VERDICT_PURE and g),
        }
        self.f1 = f1_score(verdicts, gt)

    def to_dict(self):
        return {
            "format": "detection-summary",
            "version": 1,
            "f1": self.f1,
            "confusion": self.confusion,
            "reports": [r.to_dict() for r in self.reports],
            "ground_truth": list(map(bool, self.ground_truth)),
        }


def save_summary_json(summary, path):
    with open(path, "w") as f:
        json.dump(summary.to_dict(), f, indent=2, sort_keys=True)


def save_summary_csv(summary, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model_id", "entropy_bits", "threshold", "verdict", "is_trojan"])
        for report, gt in zip(summary.reports, summary.ground_truth):
            writer.writerow(
                [report.model_id, f"{report.entropy_bits:.6f}", f"{report.threshold:.6f}", report.verdict, str(bool(gt)).lower()]
            )
