"""Entropy score vs counting oracle, threshold values, verdicts, F1."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trojanscan.data import synthetic_dataset
from trojanscan.detect import (
    DetectionSummary,
    VERDICT_PURE,
    VERDICT_TROJAN,
    class_histogram,
    classify_model,
    entropy_bits,
    entropy_score,
    evaluate_model,
    f1_score,
    lemma1_threshold,
    save_summary_csv,
)
from trojanscan.errors import ConfigError
from trojanscan.model import ArchitectureConfig, build_model, predict_classes
from trojanscan.poison import apply_trigger_batch, generate_trigger


def test_lemma1_paper_values():
    assert lemma1_threshold(10, 0.01) == pytest.approx(0.1125, abs=1e-4)
    assert lemma1_threshold(43, 0.01) == pytest.approx(0.1347, abs=1e-4)


def test_lemma1_delta_zero_and_validation():
    assert lemma1_threshold(10, 0.0) == 0.0
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(ConfigError):
            lemma1_threshold(10, bad)
    with pytest.raises(ConfigError):
        lemma1_threshold(1, 0.01)


def test_lemma1_small_delta_limit():
    assert lemma1_threshold(10, 1e-9) < 1e-6


def test_lemma1_monotonic_in_delta_and_classes():
    deltas = np.linspace(0.001, 0.5, 40)  # within (0, (C-1)/C) for all C below
    for c in (5, 10, 43):
        vals = [lemma1_threshold(c, d) for d in deltas]
        assert all(b > a for a, b in zip(vals, vals[1:]))
    for d in (0.01, 0.05, 0.2):
        vals = [lemma1_threshold(c, d) for c in range(2, 60)]
        assert all(b > a for a, b in zip(vals, vals[1:]))


def test_worst_case_histogram_attains_bound():
    # (1-delta) mass in one class, delta spread over the other C-1 classes
    for c, delta in [(10, 0.01), (43, 0.01), (5, 0.05)]:
        p = np.full(c, delta / (c - 1))
        p[0] = 1.0 - delta
        h = float(-(p * np.log2(p)).sum())
        assert h == pytest.approx(lemma1_threshold(c, delta), abs=1e-9)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_bound_dominates_constrained_histograms(seed):
    # any class distribution with >= (1-delta) mass in its top class scores
    # at or below the closed-form threshold
    rng = np.random.default_rng(seed)
    c = int(rng.choice([5, 10, 43]))
    delta = float(rng.choice([0.01, 0.05]))
    rest = rng.dirichlet(np.ones(c - 1)) * (delta * rng.uniform(0, 1))
    p = np.concatenate([[1.0 - rest.sum()], rest])
    nz = p > 0
    h = float(-(p[nz] * np.log2(p[nz])).sum())
    assert h <= lemma1_threshold(c, delta) + 1e-12


def test_entropy_degenerate_and_uniform():
    assert entropy_bits([100, 0, 0, 0]) == 0.0
    assert entropy_bits([10] * 10) == pytest.approx(math.log2(10), abs=1e-12)


def test_entropy_matches_counting_oracle_exactly():
    arch = ArchitectureConfig(input_hw=(16, 16), conv_channels=(8,), dense_widths=(16,), classes=5)
    model = build_model(arch, seed=0)
    ds = synthetic_dataset(60, classes=5, seed=1, hw=16)
    trig = generate_trigger(2, 1.0, seed=2)
    counts = class_histogram(model, ds.images, trig, seed=3)
    # oracle: explicit counting loop over individually perturbed predictions
    perturbed = apply_trigger_batch(ds.images, trig, np.random.default_rng(3))
    pred = predict_classes(model, perturbed)
    oracle = [0] * 5
    for p in pred:
        oracle[int(p)] += 1
    assert counts.tolist() == oracle
    assert entropy_score(model, ds.images, trig, seed=3) == entropy_bits(oracle)


def test_entropy_bounded_by_log_classes():
    rng = np.random.default_rng(4)
    for _ in range(200):
        c = int(rng.integers(2, 30))
        counts = rng.integers(0, 50, size=c)
        counts[rng.integers(0, c)] += 1  # non-empty
        h = entropy_bits(counts)
        assert 0.0 <= h <= math.log2(c) + 1e-12


def test_classify_verdicts():
    assert classify_model(0.004, 0.1347) == VERDICT_TROJAN
    assert classify_model(4.95, 0.1347) == VERDICT_PURE
    assert classify_model(0.1347, 0.1347) == VERDICT_TROJAN  # boundary inclusive
    with pytest.raises(ConfigError):
        classify_model(-0.1, 0.2)


def test_f1_values():
    t, p = VERDICT_TROJAN, VERDICT_PURE
    assert f1_score([t] * 5 + [p] * 5, [True] * 5 + [False] * 5) == 1.0
    assert f1_score([p] * 10, [True] * 5 + [False] * 5) == 0.0
    # 1 false positive, 0 false negatives among 5 positives
    verdicts = [t] * 5 + [t] + [p] * 4
    truth = [True] * 5 + [False] * 5
    assert f1_score(verdicts, truth) == pytest.approx(2 * (5 / 6) / ((5 / 6) + 1), abs=1e-12)


def test_summary_and_csv(tmp_path):
    arch = ArchitectureConfig(input_hw=(16, 16), conv_channels=(8,), dense_widths=(16,), classes=4)
    model = build_model(arch, seed=5)
    ds = synthetic_dataset(24, classes=4, seed=6, hw=16)
    trig = generate_trigger(2, 1.0, seed=7)
    reports = [evaluate_model(model, ds.images, trig, model_id=f"m{i}") for i in range(3)]
    summary = DetectionSummary(reports=reports, ground_truth=[False, False, True])
    assert sum(summary.confusion.values()) == 3
    path = tmp_path / "summary.csv"
    save_summary_csv(summary, path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["model_id", "entropy_bits", "threshold", "verdict", "is_trojan"]
    assert len(rows) == 4


def test_empty_scan_set_rejected():
    arch = ArchitectureConfig(input_hw=(16, 16), conv_channels=(8,), dense_widths=(16,), classes=4)
    model = build_model(arch, seed=8)
    trig = generate_trigger(2, 1.0, seed=9)
    with pytest.raises(ConfigError):
        entropy_score(model, np.zeros((0, 16, 16, 3), dtype=np.float32), trig)
