import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nnpassport.attacks import strip_hidden
from nnpassport.config import load_config
from nnpassport.errors import DataError, RangeError, VerificationError
from nnpassport.experiment import protect
from nnpassport.models import build_model
from nnpassport.passports import gen_random_pattern, perturb_passport
from nnpassport.training import TrainConfig, evaluate_accuracy, train
from nnpassport.verify import (MetricsRecord, SignatureCurve, VerdictThresholds, classify_protection,
                               compute_inconsistency, compute_strength, export_histogram, histogram_bins,
                               restore_passport_functions, signature_curve, verify_ownership)

from conftest import SMALL

pct = st.floats(0, 100)


# metrics -------------------------------------------------------------------------

def test_metric_examples():
    assert compute_inconsistency(70.0, 70.0) == 0
    assert compute_inconsistency(92.72, 93.45) == pytest.approx(-0.73, abs=1e-9)
    assert compute_inconsistency(50, 40) == 10
    assert compute_strength(60.0, 60.0) == 0
    assert compute_strength(92.0, 10.0) == 82.0
    for bad in [(-1, 50), (50, 100.5)]:
        with pytest.raises(RangeError):
            compute_inconsistency(*bad)
        with pytest.raises(RangeError):
            compute_strength(*bad)


@given(pct, pct, st.lists(pct, max_size=20))
def test_metric_identities(a_o, a_p, a_t):
    record = MetricsRecord(a_o, a_p, a_t)
    assert abs(record.inconsistency + a_p - a_o) <= 1e-9
    for s, t in zip(record.strengths, a_t):
        assert abs(s + t - a_p) <= 1e-9
    if a_t:
        assert record.strength == pytest.approx(np.mean([a_p - t for t in a_t]), abs=1e-9)


def test_strength_over_many_trials_is_mean_of_differences():
    a_t = list(np.random.default_rng(0).uniform(0, 100, 1000))
    record = MetricsRecord(90.0, 91.0, a_t)
    assert record.strength == pytest.approx(91.0 - np.mean(a_t), abs=1e-9)
    assert record.to_dict()["count"] == 1000


def test_classification_examples():
    assert classify_protection({"I": 0.5, "S": 0.0}).functionality_preserving
    assert not classify_protection({"I": -1.0, "S": 0.0}).functionality_preserving
    assert classify_protection({"I": 0.0, "S": 82.5}).well_protected
    assert not classify_protection({"I": 0.0, "S": 33.48}).well_protected
    verdict = classify_protection(MetricsRecord(93.0, 92.5, [10.0, 12.0]))
    assert verdict.functionality_preserving and verdict.well_protected


def test_thresholds_validated():
    with pytest.raises(RangeError):
        VerdictThresholds(tau_d=-1)
    with pytest.raises(RangeError):
        VerdictThresholds(epsilon_match=0)


# histograms -----------------------------------------------------------------------

def test_histogram_identical_values(tmp_path):
    counts = export_histogram([42.0] * 1000, 2.0, tmp_path / "h.csv", a_o=95.0, a_p=94.0)
    assert sorted(counts[counts > 0].tolist()) == [1000]
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[:3] == ["# A_o=95.0", "# A_p=94.0", "bin_left,bin_right,count"]
    rows = list(csv.reader(lines[3:]))
    assert sum(int(r[2]) for r in rows) == 1000


@given(st.lists(pct, min_size=1, max_size=200), st.sampled_from([0.5, 2.0, 10.0]))
def test_histogram_counts_sum(samples, width):
    counts, edges = histogram_bins(samples, width)
    assert counts.sum() == len(samples)
    np.testing.assert_allclose(np.diff(edges), width)


def test_histogram_uniform_multinomial():
    samples = np.random.default_rng(5).uniform(0, 100, 1000)
    counts, edges = histogram_bins(samples, 10.0)
    assert len(counts) == 10
    sigma = np.sqrt(1000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 100) <= 3 * sigma)


def test_histogram_errors(tmp_path):
    with pytest.raises(DataError):
        export_histogram([], 2.0, tmp_path / "h.csv")
    with pytest.raises(RangeError):
        histogram_bins([1.0], 0.0)


# signature curve -----------------------------------------------------------------

def test_curve_contract(small_protected, small_task):
    model, _ = small_protected
    curve = signature_curve(model, model.passport, small_task, (0.0, 0.25, 0.5, 0.75, 1.0), seeds_per_point=20)
    assert curve.evaluations == 100
    assert curve.means[0] == evaluate_accuracy(model, small_task) and curve.stds[0] == 0.0
    again = signature_curve(model, model.passport, small_task, (0.0, 0.25, 0.5, 0.75, 1.0), seeds_per_point=20)
    assert again.to_dict() == curve.to_dict()
    assert SignatureCurve.from_dict(curve.to_dict()) == curve


def test_curve_zero_point_is_exact(small_protected, small_task, monkeypatch):
    # the mean of twenty copies of 97.8 is not 97.8 in floating point
    model, _ = small_protected
    monkeypatch.setattr("nnpassport.verify.evaluate_accuracy", lambda *args, **kw: 97.8)
    curve = signature_curve(model, model.passport, small_task, (0.0, 0.5), seeds_per_point=20)
    assert curve.means[0] == 97.8 and curve.stds[0] == 0.0


@pytest.fixture(scope="module")
def toy_run():
    """V3 MiniNet on the 10-class toy task; the 8px fixture shrugs off passport corruption."""
    config = load_config(overrides=["architecture.kind=V3", "passport.type=random_image",
                                    "passport.num_images=4"], seed=0)
    return protect(config)


def test_curve_degrades_on_toy_task(toy_run):
    assert toy_run.curve.spearman() <= -0.8


def test_curve_grid_rules(small_protected, small_task):
    model, _ = small_protected
    for grid in [(0.1, 0.5), (0.0, 1.5), ()]:
        with pytest.raises(RangeError):
            signature_curve(model, model.passport, small_task, grid, seeds_per_point=1)
    with pytest.raises(RangeError):
        SignatureCurve([0.5, 0.0], [1, 1], [0, 0], [0], [[1], [1]])


# verification -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def evidence(small_protected, small_task):
    model, _ = small_protected
    a_p = evaluate_accuracy(model, small_task)
    return a_p, signature_curve(model, model.passport, small_task, seeds_per_point=5)


def test_owner_verification_positive(small_protected, small_task, evidence):
    model, _ = small_protected
    a_p, curve = evidence
    result = verify_ownership(model, model.passport, a_p, curve, small_task, kind="V3",
                              expected_test_hash=small_task.test_hash)
    assert result.positive
    assert result.evidence["step2_match"] and result.evidence["step3"]["match"]
    assert result.evidence["verdict"] == "positive"


def test_random_fakes_never_verify(small_protected, small_task, evidence):
    model, _ = small_protected
    a_p, curve = evidence
    positives = sum(verify_ownership(model, gen_random_pattern(model, 10_000 + i), a_p, curve, small_task).positive
                    for i in range(100))
    assert positives == 0


def test_corrupted_claim_fails_step2(toy_run):
    claim = perturb_passport(toy_run.passport, 0.3, 1)
    result = verify_ownership(toy_run.model, claim, toy_run.valid_accuracy, toy_run.curve, toy_run.dataset)
    assert not result.positive
    assert not result.evidence["step2_match"] and result.evidence["step3"] is None


def test_plagiarized_copy_restores(small_protected, small_task, evidence):
    model, _ = small_protected
    a_p, curve = evidence
    # a plagiarist ships the weights with the derived scale/shift frozen as free variables
    copy, _ = strip_hidden(model)
    restored = restore_passport_functions(copy, "V3", model.passport)
    assert evaluate_accuracy(restored, small_task, model.passport) == a_p
    assert copy.passport_layers()[0].kind is None
    assert verify_ownership(copy, model.passport, a_p, curve, small_task, kind="V3").positive


def test_unrelated_models_fail(small_protected, small_task, evidence):
    model, _ = small_protected
    a_p, curve = evidence
    for seed in range(5):
        other = build_model(kind="V3", **SMALL)
        other.bind(gen_random_pattern(other, 500 + seed))
        train(other, small_task, TrainConfig(epochs=3, batch_size=16, seed=100 + seed))
        result = verify_ownership(other, model.passport, a_p, curve, small_task, kind="V3")
        assert not result.positive
        assert abs(result.evidence["measured_M_p"] - a_p) > 2 * VerdictThresholds().epsilon_match


def test_verification_errors(small_protected, small_task, evidence):
    model, _ = small_protected
    a_p, curve = evidence
    with pytest.raises(VerificationError, match="signature"):
        verify_ownership(model, model.passport, a_p, None, small_task)
    with pytest.raises(VerificationError):
        verify_ownership(model, model.passport, a_p, curve, small_task, expected_test_hash="0" * 64)
    with pytest.raises(VerificationError):
        restore_passport_functions(model, "V3", gen_random_pattern(build_model(kind="V3"), 0))
    with pytest.raises(VerificationError):
        restore_passport_functions(model, "none")


def test_evidence_written(small_protected, small_task, evidence, tmp_path):
    model, _ = small_protected
    a_p, curve = evidence
    result = verify_ownership(model, model.passport, a_p, curve, small_task)
    result.write(tmp_path / "e.json")
    stored = json.loads((tmp_path / "e.json").read_text())
    assert stored["recorded_M_p"] == a_p and len(stored["step3"]["points"]) == len(curve.grid)
