"""Detection error metrics for binary attack scores.

Convention everywhere: higher score means more attack-like, and a sample is
classified attack iff score > threshold (a tie counts as bona fide).

  apcer(t)  fraction of attack samples NOT classified attack at t
  bpcer(t)  fraction of bona fide samples classified attack at t

The DET curve evaluates both rates at every decision boundary that matters:
the midpoints between consecutive distinct scores plus -inf and +inf
sentinels, so n distinct scores yield n+1 operating points.  Along that
sweep apcer is non-decreasing and bpcer is non-increasing, which makes the
equal-error crossing unique.

All API values are fractions in [0, 1]; report rows carry a percentage
column next to each fraction for human consumption.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .head import ATTACK, BONA_FIDE, LABEL_NAMES

log = logging.getLogger(__name__)

REPORT_TARGETS = (0.01, 0.10, 0.20)


@dataclass
class ScoreSet:
    """Scores with {0 bona fide, 1 attack} labels."""

    scores: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(np.int64)
        if self.scores.size == 0:
            raise DataError("score set is empty")
        if self.scores.shape != self.labels.shape:
            raise DataError(
                f"scores and labels disagree in length: "
                f"{self.scores.size} vs {self.labels.size}"
            )
        if not np.all(np.isfinite(self.scores)):
            raise DataError("scores must be finite")
        if not np.all((self.labels == BONA_FIDE) | (self.labels == ATTACK)):
            raise DataError("labels must be 0 (bona fide) or 1 (attack)")

    @property
    def attack_scores(self) -> np.ndarray:
        return self.scores[self.labels == ATTACK]

    @property
    def bona_fide_scores(self) -> np.ndarray:
        return self.scores[self.labels == BONA_FIDE]

    def require_both_classes(self):
        if self.attack_scores.size == 0 or self.bona_fide_scores.size == 0:
            raise DataError("score set must contain both classes")


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    apcer: float
    bpcer: float


def apcer(score_set: ScoreSet, threshold: float) -> float:
    """Attack presentation classification error rate at one threshold."""
    atk = score_set.attack_scores
    if atk.size == 0:
        raise DataError("apcer needs at least one attack sample")
    return float(np.count_nonzero(atk <= threshold) / atk.size)


def bpcer(score_set: ScoreSet, threshold: float) -> float:
    """Bona fide presentation classification error rate at one threshold."""
    bona = score_set.bona_fide_scores
    if bona.size == 0:
        raise DataError("bpcer needs at least one bona fide sample")
    return float(np.count_nonzero(bona > threshold) / bona.size)


def det_curve(score_set: ScoreSet) -> list[OperatingPoint]:
    """Operating points at every distinct decision boundary.

    Thresholds are the midpoints between consecutive distinct sorted scores
    framed by -inf and +inf, so the first point is (apcer 0, bpcer 1) and
    the last is (apcer 1, bpcer 0).
    """
    score_set.require_both_classes()
    distinct = np.unique(score_set.scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    thresholds = np.concatenate(([-np.inf], mids, [np.inf]))
    atk = np.sort(score_set.attack_scores)
    bona = np.sort(score_set.bona_fide_scores)
    n_atk, n_bona = atk.size, bona.size
    apcers = np.searchsorted(atk, thresholds, side="right") / n_atk
    bpcers = (n_bona - np.searchsorted(bona, thresholds, side="right")) / n_bona
    return [OperatingPoint(float(t), float(a), float(b))
            for t, a, b in zip(thresholds, apcers, bpcers)]


def eer(score_set: ScoreSet) -> float:
    """Equal error rate from the DET sweep.

    Walks the operating points until apcer - bpcer changes sign and
    linearly interpolates between the two bracketing points; a point where
    the rates are exactly equal returns that shared rate directly.
    """
    points = det_curve(score_set)
    return _eer_from_points([(p.apcer, p.bpcer) for p in points])


def _eer_from_points(points: list[tuple[float, float]]) -> float:
    prev_a, prev_b = points[0]
    if prev_a == prev_b:
        return prev_a
    for a, b in points[1:]:
        if a == b:
            return a
        if (a - b > 0.0) != (prev_a - prev_b > 0.0):
            t = (prev_b - prev_a) / ((a - prev_a) - (b - prev_b))
            return prev_a + t * (a - prev_a)
        prev_a, prev_b = a, b
    raise DataError("no equal-error crossing found")  # pragma: no cover


def apcer_at_bpcer(score_set: ScoreSet, target: float) -> float:
    """APCER at the operating point with the largest BPCER <= target."""
    return _rate_at(det_curve(score_set), target, constrain="bpcer")


def bpcer_at_apcer(score_set: ScoreSet, target: float) -> float:
    """BPCER at the operating point with the largest APCER <= target."""
    return _rate_at(det_curve(score_set), target, constrain="apcer")


def _rate_at(points: list[OperatingPoint], target: float,
             constrain: str) -> float:
    if not 0.0 <= target <= 1.0:
        raise ParameterError(f"target rate must be in [0, 1], got {target}")
    if constrain == "bpcer":
        feasible = [p for p in points if p.bpcer <= target]
        if not feasible:
            log.warning("no operating point reaches bpcer <= %s; "
                        "reporting the most conservative endpoint", target)
            return points[-1].apcer
        best = max(feasible, key=lambda p: p.bpcer)
        return min(p.apcer for p in feasible if p.bpcer == best.bpcer)
    feasible = [p for p in points if p.apcer <= target]
    if not feasible:
        log.warning("no operating point reaches apcer <= %s; "
                    "reporting the most conservative endpoint", target)
        return points[0].bpcer
    best = max(feasible, key=lambda p: p.apcer)
    return min(p.bpcer for p in feasible if p.apcer == best.apcer)


AVERAGE_ROW = "Average"
WORST_ROW = "Worst"


def _metric_keys() -> list[str]:
    keys = ["eer"]
    keys += [f"apcer_at_bpcer_{int(round(t * 100))}" for t in REPORT_TARGETS]
    keys += [f"bpcer_at_apcer_{int(round(t * 100))}" for t in REPORT_TARGETS]
    return keys


@dataclass
class Report:
    """Per-subset metric rows plus Average and Worst aggregate rows."""

    rows: list[tuple[str, dict[str, float]]] = field(default_factory=list)

    def to_json_text(self) -> str:
        payload = {name: metrics for name, metrics in self.rows}
        return json.dumps(payload, indent=2) + "\n"

    def to_csv_text(self) -> str:
        keys = _metric_keys()
        header = ["subset"]
        for k in keys:
            header += [k, k + "_pct"]
        lines = [",".join(header)]
        for name, metrics in self.rows:
            cells = [name]
            for k in keys:
                cells += [repr(metrics[k]), repr(metrics[k + "_pct"])]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def build_report(named_sets: dict[str, ScoreSet]) -> Report:
    """Evaluate every subset and append arithmetic-mean and worst-case rows."""
    if not named_sets:
        raise DataError("report needs at least one score set")
    keys = _metric_keys()
    rows: list[tuple[str, dict[str, float]]] = []
    for name, score_set in named_sets.items():
        metrics = {"eer": eer(score_set)}
        for t in REPORT_TARGETS:
            metrics[f"apcer_at_bpcer_{int(round(t * 100))}"] = \
                apcer_at_bpcer(score_set, t)
            metrics[f"bpcer_at_apcer_{int(round(t * 100))}"] = \
                bpcer_at_apcer(score_set, t)
        rows.append((name, metrics))
    average = {k: float(np.mean([m[k] for _, m in rows])) for k in keys}
    worst = {k: float(max(m[k] for _, m in rows)) for k in keys}
    rows.append((AVERAGE_ROW, average))
    rows.append((WORST_ROW, worst))
    for _, metrics in rows:
        for k in keys:
            metrics[k + "_pct"] = metrics[k] * 100.0
    return Report(rows)


def det_points_csv(points: list[OperatingPoint]) -> str:
    lines = ["threshold,apcer,bpcer"]
    for p in points:
        lines.append(f"{repr(p.threshold)},{repr(p.apcer)},{repr(p.bpcer)}")
    return "\n".join(lines) + "\n"


def save_score_file(path, score_set: ScoreSet) -> None:
    """Write the canonical `score,label` CSV."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("score,label\n")
        for s, l in zip(score_set.scores, score_set.labels):
            fh.write(f"{repr(float(s))},{LABEL_NAMES[int(l)]}\n")


def load_score_file(path) -> ScoreSet:
    """Read a `score,label` CSV produced by save_score_file or by hand."""
    scores: list[float] = []
    labels: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "score,label":
            raise FormatError(f"{path}: expected header 'score,label', "
                              f"got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'score,label'")
            try:
                score = float(parts[0])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad score "
                                  f"{parts[0]!r}") from exc
            if parts[1] not in LABEL_NAMES:
                raise FormatError(f"{path}:{lineno}: unknown label "
                                  f"{parts[1]!r}")
            if not np.isfinite(score):
                raise FormatError(f"{path}:{lineno}: score must be finite")
            scores.append(score)
            labels.append(LABEL_NAMES.index(parts[1]))
    if not scores:
        raise FormatError(f"{path}: no score rows")
    return ScoreSet(np.array(scores), np.array(labels))
