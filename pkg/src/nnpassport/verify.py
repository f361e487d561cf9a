"""Ownership verification, signature curves, and the inconsistency/strength metrics.

Inconsistency ``I = A_o - A_p`` compares the passport-free network with the
protected one under its valid passport; strength ``S = A_p - A_t`` compares the
valid passport with an attack. A network is functionality-preserving when
``|I| < tau_d`` and well-protected when ``S > tau_s``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .data import Dataset, array_hash
from .errors import DataError, RangeError, VerificationError
from .layers import PassportKind, parse_kind
from .models import ProtectedModel, clone_model
from .passports import PassportSet, perturb_passport
from .rng import stream
from .training import evaluate_accuracy

DEFAULT_GRID = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class VerdictThresholds:
    tau_d: float = 1.0
    tau_s: float = 50.0
    epsilon_match: float = 2.0

    def __post_init__(self):
        if self.tau_d < 0 or self.tau_s < 0:
            raise RangeError("tau_d and tau_s must be non-negative")
        if not self.epsilon_match > 0:
            raise RangeError("epsilon_match must be positive")


def _check_pct(*values: float) -> None:
    for v in values:
        if not 0.0 <= v <= 100.0:
            raise RangeError(f"accuracy {v} is outside [0, 100]")


def compute_inconsistency(a_o: float, a_p: float) -> float:
    _check_pct(a_o, a_p)
    return a_o - a_p


def compute_strength(a_p: float, a_t: float) -> float:
    _check_pct(a_p, a_t)
    return a_p - a_t


@dataclass
class MetricsRecord:
    a_o: float
    a_p: float
    a_t: list[float] = field(default_factory=list)

    @property
    def inconsistency(self) -> float:
        return compute_inconsistency(self.a_o, self.a_p)

    @property
    def strengths(self) -> list[float]:
        return [compute_strength(self.a_p, t) for t in self.a_t]

    @property
    def strength(self) -> float:
        s = self.strengths
        return float(np.mean(s)) if s else float("nan")

    @property
    def strength_std(self) -> float:
        s = self.strengths
        return float(np.std(s)) if s else float("nan")

    def to_dict(self) -> dict:
        return {"A_o": self.a_o, "A_p": self.a_p, "A_t": list(self.a_t), "I": self.inconsistency,
                "S": self.strengths, "S_mean": self.strength, "S_std": self.strength_std, "count": len(self.a_t)}


@dataclass(frozen=True)
class Verdict:
    functionality_preserving: bool
    well_protected: bool


def classify_protection(metrics, thresholds: VerdictThresholds = VerdictThresholds()) -> Verdict:
    """``metrics`` is a MetricsRecord or a mapping with ``I`` and ``S``."""
    if isinstance(metrics, MetricsRecord):
        i, s = metrics.inconsistency, metrics.strength
    else:
        i, s = metrics["I"], metrics["S"]
    return Verdict(abs(i) < thresholds.tau_d, s > thresholds.tau_s)


# signature curves ---------------------------------------------------------

@dataclass
class SignatureCurve:
    grid: list[float]
    means: list[float]
    stds: list[float]
    noise_seeds: list[int]
    samples: list[list[float]]

    def __post_init__(self):
        if list(self.grid) != sorted(self.grid):
            raise RangeError("signature grid must be sorted ascending")

    @property
    def evaluations(self) -> int:
        return sum(len(s) for s in self.samples)

    def spearman(self) -> float:
        return float(stats.spearmanr(self.grid, self.means).statistic)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SignatureCurve":
        return cls(**{k: d[k] for k in ("grid", "means", "stds", "noise_seeds", "samples")})


def curve_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in stream(seed, "signature-noise").integers(0, 2 ** 31, size=count)]


def signature_curve(model: ProtectedModel, passport: PassportSet, test_data, c_grid: Sequence[float] = DEFAULT_GRID,
                    seeds_per_point: int = 20, seed: int = 0, noise_seeds: Sequence[int] | None = None) -> SignatureCurve:
    """Accuracy under passports with a fraction ``c`` of elements corrupted, for each ``c``."""
    grid = [float(c) for c in c_grid]
    if not grid or 0.0 not in grid or any(not 0.0 <= c <= 1.0 for c in grid):
        raise RangeError("signature grid must lie in [0, 1] and include 0")
    seeds = list(noise_seeds) if noise_seeds is not None else curve_seeds(seed, seeds_per_point)
    samples, means, stds = [], [], []
    for c in grid:
        if c == 0.0:
            # an unperturbed passport gives the same accuracy for every noise seed;
            # store it as is, since np.mean of repeated floats can drift by an ulp
            acc = evaluate_accuracy(model, test_data, passport)
            samples.append([acc] * len(seeds))
            means.append(float(acc))
            stds.append(0.0)
            continue
        accs = [evaluate_accuracy(model, test_data, perturb_passport(passport, c, s)) for s in seeds]
        samples.append(accs)
        means.append(float(np.mean(accs)))
        stds.append(float(np.std(accs)))
    return SignatureCurve(grid, means, stds, seeds, samples)


# verification -------------------------------------------------------------

def restore_passport_functions(suspect: ProtectedModel, kind: PassportKind | str,
                               claimed_passport: PassportSet | None = None) -> ProtectedModel:
    """Delete free scale/shift variables and re-attach the passport functions of ``kind``.

    Works on a copy. With ``claimed_passport``, its tensor shapes must match the
    suspect's convolution inputs.
    """
    kind = parse_kind(kind)
    if kind is None:
        raise VerificationError("a passport-function kind must be claimed")
    if claimed_passport is not None:
        shapes = suspect.passport_shapes()
        claimed = {e.layer_index: e for e in claimed_passport.entries}
        if set(claimed) != set(shapes):
            raise VerificationError("claimed passport layers differ from the suspect network's layers")
        for idx, e in claimed.items():
            for t in (e.p_gamma, e.p_beta):
                if t is not None and tuple(t.shape) != shapes[idx]:
                    raise VerificationError(f"layer {idx}: passport shape {t.shape} does not fit {shapes[idx]}")
    restored = clone_model(suspect)
    restored.passport = None
    restored.set_kind(kind)
    return restored


@dataclass
class VerificationResult:
    positive: bool
    evidence: dict

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.evidence, indent=2, sort_keys=True))


def verify_ownership(suspect: ProtectedModel, claimed_passport: PassportSet, recorded_mp: float,
                     recorded_curve: SignatureCurve | None, test_data, thresholds: VerdictThresholds = VerdictThresholds(),
                     num_noise_seeds: int | None = None, kind: PassportKind | str | None = None,
                     expected_test_hash: str | None = None) -> VerificationResult:
    """Three-step ownership check.

    1. restore passport functions (when ``kind`` is given);
    2. accuracy under the claimed passport must be within ``epsilon_match`` of ``recorded_mp``;
    3. accuracy under corrupted passports must track the recorded signature curve,
       within ``epsilon_match + 2 * recorded std`` at every grid point.

    Step 3 is skipped once step 2 fails.
    """
    if recorded_curve is None:
        raise VerificationError("no recorded signature curve")
    x, y = (test_data.test_x, test_data.test_y) if isinstance(test_data, Dataset) else test_data
    test_hash = array_hash(np.asarray(x), np.asarray(y))
    if expected_test_hash is not None and test_hash != expected_test_hash:
        raise VerificationError("test set differs from the one fixed at protection time")
    model = restore_passport_functions(suspect, kind, claimed_passport) if kind is not None else suspect
    eps = thresholds.epsilon_match
    measured = evaluate_accuracy(model, (x, y), claimed_passport)
    step2 = abs(measured - recorded_mp) <= eps
    evidence = {
        "claimed_passport": claimed_passport.fingerprint(),
        "test_hash": test_hash,
        "recorded_M_p": recorded_mp,
        "measured_M_p": measured,
        "epsilon_match": eps,
        "step2_match": step2,
        "step3": None,
    }
    positive = step2
    if step2:
        seeds = recorded_curve.noise_seeds[:num_noise_seeds] if num_noise_seeds else recorded_curve.noise_seeds
        curve = signature_curve(model, claimed_passport, (x, y), recorded_curve.grid, noise_seeds=seeds)
        points = []
        for c, m_rec, s_rec, m_now in zip(recorded_curve.grid, recorded_curve.means, recorded_curve.stds, curve.means):
            tol = eps + 2.0 * s_rec
            points.append({"c": c, "recorded": m_rec, "measured": m_now, "tolerance": tol,
                           "match": abs(m_now - m_rec) <= tol})
        step3 = all(p["match"] for p in points)
        evidence["step3"] = {"points": points, "match": step3}
        positive = step3
    evidence["verdict"] = "positive" if positive else "negative"
    return VerificationResult(positive, evidence)


# histograms ---------------------------------------------------------------

def histogram_bins(samples: Sequence[float], bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(samples, dtype=np.float64)
    if a.size == 0:
        raise DataError("histogram needs at least one sample")
    if not bin_width > 0:
        raise RangeError("bin width must be positive")
    lo = math.floor(a.min() / bin_width) * bin_width
    hi = max(math.ceil(a.max() / bin_width) * bin_width, lo + bin_width)
    n_bins = int(round((hi - lo) / bin_width))
    counts, edges = np.histogram(a, bins=n_bins, range=(lo, hi))
    return counts, edges


def export_histogram(samples: Sequence[float], bin_width: float, path: str | Path,
                     a_o: float | None = None, a_p: float | None = None) -> np.ndarray:
    """CSV of ``bin_left,bin_right,count``; reference accuracies go in ``#`` header lines."""
    counts, edges = histogram_bins(samples, bin_width)
    with open(path, "w", newline="") as fh:
        if a_o is not None:
            fh.write(f"# A_o={a_o!r}\n")
        if a_p is not None:
            fh.write(f"# A_p={a_p!r}\n")
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for left, right, n in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(left)), repr(float(right)), int(n)])
    return counts
