"""Detection (APCER/BPCER, ROC) and vulnerability (FMR, MMPMR) metrics.

Scores are attack-oriented: a sample is classified as attack when
``score >= tau``. Similarity scores are match-oriented: a comparison is a
match when ``similarity > tau``.
"""

from __future__ import annotations

import csv
import json
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

APCER_TARGETS = (0.001, 0.01, 0.1)


class MetricError(ValueError):
    pass


@dataclass
class ScoreTable:
    image_ids: list[str]
    scores: np.ndarray
    labels: list[str]
    media: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.image_ids = list(self.image_ids)
        self.labels = list(self.labels)
        if not self.media:
            self.media = ["D"] * len(self.image_ids)
        if not (len(self.image_ids) == len(self.scores) == len(self.labels) == len(self.media)):
            raise MetricError("score table columns differ in length")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise MetricError("duplicate image ids in score table")
        bad = set(self.labels) - {"attack", "bonafide"}
        if bad:
            raise MetricError(f"unknown labels {sorted(bad)}")

    @classmethod
    def from_arrays(cls, attack_scores, bonafide_scores) -> ScoreTable:
        a = np.asarray(attack_scores, dtype=np.float64).ravel()
        b = np.asarray(bonafide_scores, dtype=np.float64).ravel()
        ids = [f"a{i}" for i in range(len(a))] + [f"b{i}" for i in range(len(b))]
        return cls(ids, np.concatenate([a, b]), ["attack"] * len(a) + ["bonafide"] * len(b))

    @property
    def attack_scores(self) -> np.ndarray:
        return self.scores[np.array([lab == "attack" for lab in self.labels], dtype=bool)]

    @property
    def bonafide_scores(self) -> np.ndarray:
        return self.scores[np.array([lab == "bonafide" for lab in self.labels], dtype=bool)]

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "score", "label", "medium"])
            for row in sorted(zip(self.image_ids, self.scores, self.labels, self.media)):
                w.writerow([row[0], repr(float(row[1])), row[2], row[3]])

    @classmethod
    def load(cls, path) -> ScoreTable:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [r["image_id"] for r in rows],
            [float(r["score"]) for r in rows],
            [r["label"] for r in rows],
            [r["medium"] for r in rows],
        )


def _attacks(scores) -> np.ndarray:
    a = scores.attack_scores if isinstance(scores, ScoreTable) else np.asarray(scores, np.float64)
    if a.size == 0:
        raise MetricError("APCER needs at least one attack score")
    return a


def _bonafides(scores) -> np.ndarray:
    b = scores.bonafide_scores if isinstance(scores, ScoreTable) else np.asarray(scores, np.float64)
    if b.size == 0:
        raise MetricError("BPCER needs at least one bona fide score")
    return b


def apcer(scores, tau: float) -> float:
    """Share of attacks classified bona fide (score < tau).

    ``scores`` is a ScoreTable or an array of attack scores.
    """
    a = _attacks(scores)
    return float(np.count_nonzero(a < tau)) / a.size


def bpcer(scores, tau: float) -> float:
    """Share of bona fides classified attack (score >= tau)."""
    b = _bonafides(scores)
    return float(np.count_nonzero(b >= tau)) / b.size


class OperatingPoint(NamedTuple):
    bpcer: float
    tau: float
    apcer: float
    saturated: bool


def bpcer_at_apcer(scores: ScoreTable, target_apcer: float) -> OperatingPoint:
    """BPCER at the largest observed-score threshold with APCER <= target.

    ``saturated`` marks targets finer than the attack-set resolution
    (target < 1/n_attacks), where only APCER = 0 is attainable.
    """
    if not 0.0 < target_apcer < 1.0:
        raise MetricError("target APCER must lie in (0, 1)")
    a = np.sort(_attacks(scores))
    b = _bonafides(scores)
    k_allowed = int(np.floor(target_apcer * a.size + 1e-12))
    if k_allowed >= a.size:
        tau = float(max(a[-1], b.max()))
    else:
        # #(a < tau) <= k  <=>  tau <= a[k]
        tau = float(a[k_allowed])
    return OperatingPoint(
        bpcer(b, tau), tau, apcer(a, tau), bool(target_apcer < 1.0 / a.size)
    )


def roc(scores: ScoreTable, resolution: int | None = None) -> list[tuple[float, float]]:
    """(APCER, 1 - BPCER) at every distinct observed threshold plus +inf.

    Sorted by APCER, duplicates removed. ``resolution`` thins the curve to
    at most that many points, endpoints kept.
    """
    a = _attacks(scores)
    b = _bonafides(scores)
    taus = np.concatenate([np.unique(np.concatenate([a, b])), [np.inf]])
    a_sorted, b_sorted = np.sort(a), np.sort(b)
    ap = np.searchsorted(a_sorted, taus, side="left") / a.size
    bp = 1.0 - np.searchsorted(b_sorted, taus, side="left") / b.size
    pts = sorted({(float(x), float(1.0 - y)) for x, y in zip(ap, bp)})
    if resolution is not None and len(pts) > resolution >= 2:
        idx = np.unique(np.round(np.linspace(0, len(pts) - 1, resolution)).astype(int))
        pts = [pts[i] for i in idx]
    return pts


def roc_auc(points: Sequence[tuple[float, float]]) -> float:
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return float(trapezoid(y, x))


# --------------------------------------------------------------- vulnerability


def fmr_threshold(nonmated_scores, target_fmr: float) -> float:
    """Smallest observed score tau with share(nonmated > tau) <= target_fmr."""
    s = np.sort(np.asarray(nonmated_scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise MetricError("need at least one non-mated score")
    if target_fmr >= 1.0:
        warnings.warn("target FMR >= 1: every comparison matches; threshold set just below the minimum")
        return float(np.nextafter(s[0], -np.inf))
    if target_fmr < 0:
        raise MetricError("target FMR must be non-negative")
    exceed = s.size - np.searchsorted(s, s, side="right")  # count strictly above each score
    ok = exceed <= target_fmr * s.size + 1e-9
    return float(s[np.argmax(ok)])


@dataclass
class VulnTable:
    morph_ids: list[str]
    sim_id1: np.ndarray
    sim_id2: np.ndarray
    nonmated: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.sim_id1 = np.asarray(self.sim_id1, dtype=np.float64)
        self.sim_id2 = np.asarray(self.sim_id2, dtype=np.float64)
        self.nonmated = np.asarray(self.nonmated, dtype=np.float64)
        if not len(self.morph_ids) == len(self.sim_id1) == len(self.sim_id2):
            raise MetricError("vulnerability table columns differ in length")

    def save(self, path, nonmated_path=None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["morph_id", "sim_id1", "sim_id2"])
            for m, s1, s2 in sorted(zip(self.morph_ids, self.sim_id1, self.sim_id2)):
                w.writerow([m, repr(float(s1)), repr(float(s2))])
        if nonmated_path is not None:
            with open(nonmated_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["score"])
                for s in self.nonmated:
                    w.writerow([repr(float(s))])

    @classmethod
    def load(cls, path, nonmated_path=None) -> VulnTable:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        nonmated = []
        if nonmated_path is not None:
            with open(nonmated_path, newline="", encoding="utf-8") as fh:
                nonmated = [float(r["score"]) for r in csv.DictReader(fh)]
        return cls(
            [r["morph_id"] for r in rows],
            [float(r["sim_id1"]) for r in rows],
            [float(r["sim_id2"]) for r in rows],
            nonmated,
        )


def mmpmr(vuln: VulnTable, tau: float) -> float:
    """Share of morphs whose similarity to both contributors exceeds tau."""
    if len(vuln.morph_ids) == 0:
        raise MetricError("empty vulnerability table")
    both = np.minimum(vuln.sim_id1, vuln.sim_id2) > tau
    return float(np.count_nonzero(both)) / both.size


def vulnerability_report(vuln: VulnTable, fmrs: Iterable[float] = (0.001, 0.01)) -> dict:
    out = {}
    for f in fmrs:
        tau = fmr_threshold(vuln.nonmated, f)
        out[f"{f:g}"] = {"fmr_target": f, "threshold": tau, "mmpmr": mmpmr(vuln, tau)}
    return out


# -------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    name: str
    model: str = ""
    train_medium: str = ""
    test_medium: str = ""
    bpcer_at: dict[float, float] = field(default_factory=dict)
    thresholds: dict[float, float] = field(default_factory=dict)
    saturated: dict[float, bool] = field(default_factory=dict)
    roc_points: list[tuple[float, float]] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores: ScoreTable, name: str, targets=APCER_TARGETS, **meta) -> EvalReport:
        rep = cls(name=name, **meta)
        for t in targets:
            op = bpcer_at_apcer(scores, t)
            rep.bpcer_at[t] = op.bpcer
            rep.thresholds[t] = op.tau
            rep.saturated[t] = op.saturated
        rep.roc_points = roc(scores)
        rep.counts = {"attack": int(scores.attack_scores.size), "bonafide": int(scores.bonafide_scores.size)}
        return rep

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "model": self.model,
            "train_medium": self.train_medium,
            "test_medium": self.test_medium,
            "bpcer_at": {f"{k:g}": v for k, v in sorted(self.bpcer_at.items())},
            "thresholds": {f"{k:g}": v for k, v in sorted(self.thresholds.items())},
            "saturated": {f"{k:g}": v for k, v in sorted(self.saturated.items())},
            "roc_points": [list(p) for p in self.roc_points],
            "counts": dict(self.counts),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> EvalReport:
        def keyed(m):
            return {float(k): v for k, v in m.items()}

        return cls(
            name=d["name"],
            model=d.get("model", ""),
            train_medium=d.get("train_medium", ""),
            test_medium=d.get("test_medium", ""),
            bpcer_at=keyed(d.get("bpcer_at", {})),
            thresholds=keyed(d.get("thresholds", {})),
            saturated=keyed(d.get("saturated", {})),
            roc_points=[tuple(p) for p in d.get("roc_points", [])],
            counts=dict(d.get("counts", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> EvalReport:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _at(report: EvalReport, target: float) -> float:
    for k, v in report.bpcer_at.items():
        if abs(k - target) < 1e-12:
            return v
    raise MetricError(f"report {report.name!r} has no BPCER at APCER={target:g}")


def generalization_report(in_domain: EvalReport, cross_domain: EvalReport, target: float = 0.1) -> float:
    """BPCER increase (percentage points) from in-domain to cross-domain testing."""
    return round((_at(cross_domain, target) - _at(in_domain, target)) * 100.0, 6)


def format_table(reports: Sequence[EvalReport], targets=APCER_TARGETS) -> str:
    """Plain-text BPCER@APCER table, one row per report."""
    head = ["Approach", "Train", "Test"] + [f"{t * 100:.1f}%" for t in targets]
    rows = [
        [r.model or r.name, r.train_medium, r.test_medium] + [f"{_at(r, t) * 100:.2f}" for t in targets]
        for r in reports
    ]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    sep = "+".join("-" * (w + 2) for w in widths)
    lines = ["BPCER (%) @ APCER =", sep, " | ".join(h.ljust(w) for h, w in zip(head, widths)), sep]
    lines += [" | ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in rows]
    lines.append(sep)
    return "\n".join(lines) + "\n"


def format_generalization_table(rows: Sequence[tuple[str, EvalReport, EvalReport]], target: float = 0.1) -> str:
    head = ["Approach", "Train-D, Test-D", "Train-D, Test-PS", "BPCER increase (pp)"]
    body = [
        [name, f"{_at(a, target) * 100:.2f}", f"{_at(b, target) * 100:.2f}", f"{generalization_report(a, b, target):.2f}"]
        for name, a, b in rows
    ]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    sep = "+".join("-" * (w + 2) for w in widths)
    lines = [f"BPCER (%) @ APCER = {target * 100:g}%", sep, " | ".join(h.ljust(w) for h, w in zip(head, widths)), sep]
    lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    lines.append(sep)
    return "\n".join(lines) + "\n"
