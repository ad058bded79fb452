"""Segmentation quality scoring and automatic failure flagging.

The quality score compares the members of a stochastic ensemble: the summed
per-voxel standard deviation normalized by the summed mean probability. A
well-converged model produces near-identical members and a score near zero;
disagreement inflates the numerator. Calibration fits a line through
(score, Dice) pairs on labeled volumes, then inverts it at a target Dice to
obtain a flagging threshold for unlabeled volumes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CalibrationError, ConfigError, ContractError, ShapeError


def ensemble_stats(probs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel mean and population standard deviation of member maps."""
    if len(probs) < 1:
        raise ConfigError("need at least one member map")
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in probs])
    mean = stack.mean(axis=0)
    var = np.maximum((stack * stack).mean(axis=0) - mean * mean, 0.0)
    return mean, np.sqrt(var)


def nqm_score(
    mean: np.ndarray, sd: np.ndarray, *, hard_denominator: bool = False
) -> float:
    """Normalized ensemble disagreement.

    Sum of per-voxel standard deviations divided by the summed mean
    probability map. With hard_denominator=True the denominator is instead
    the foreground voxel count of the pooled mask, which penalizes
    disagreement relative to the detected structure size. An empty
    denominator yields +inf: nothing was segmented, flag unconditionally.
    """
    if mean.shape != sd.shape:
        raise ShapeError(f"mean shape {mean.shape} != sd shape {sd.shape}")
    num = float(np.asarray(sd, dtype=np.float64).sum())
    if hard_denominator:
        den = float((np.asarray(mean, dtype=np.float64) > 0.5).sum())
    else:
        den = float(np.asarray(mean, dtype=np.float64).sum())
    if den <= 0.0:
        return math.inf
    return num / den


def nqm(
    members: Sequence[np.ndarray], *, hard_denominator: bool = False
) -> float:
    """Quality score straight from a list of member probability maps.

    Requires at least two members: a single map has no spread to measure.
    """
    if len(members) < 2:
        raise ContractError(
            f"need at least 2 ensemble members, got {len(members)}"
        )
    shape = np.asarray(members[0]).shape
    for m in members[1:]:
        if np.asarray(m).shape != shape:
            raise ShapeError(
                f"member shapes differ: {shape} vs {np.asarray(m).shape}"
            )
    mean, sd = ensemble_stats(members)
    return nqm_score(mean, sd, hard_denominator=hard_denominator)


def fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Ordinary least squares fit y = slope * x + intercept."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("fit_line expects two equal-length 1-d arrays")
    if x.size < 2:
        raise CalibrationError(f"need at least 2 points to fit, got {x.size}")
    mx = x.mean()
    my = y.mean()
    sxx = float(((x - mx) ** 2).sum())
    if sxx == 0.0:
        raise CalibrationError("scores are constant; no relation to fit")
    slope = float(((x - mx) * (y - my)).sum() / sxx)
    return slope, float(my - slope * mx)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation coefficient of two equal-length sequences."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ShapeError("pearson expects two equal-length 1-d arrays")
    if xa.size < 2:
        raise CalibrationError("need at least 2 points for a correlation")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if denom == 0.0:
        raise CalibrationError("constant values; correlation undefined")
    return float((xc * yc).sum() / denom)


@dataclass(frozen=True)
class Calibration:
    """Fitted score-to-Dice line and the derived flagging threshold."""

    slope: float
    intercept: float
    dice_target: float
    threshold: float
    n_cases: int
    pearson_r: float = float("nan")
    hard_denominator: bool = False

    def flags(self, score: float) -> bool:
        """True when a score predicts Dice below the calibrated target.

        Scores exactly at the threshold are accepted; non-finite scores are
        always flagged.
        """
        if not math.isfinite(score):
            return True
        return score > self.threshold


def calibrate(
    scores: Iterable[float],
    dices: Iterable[float],
    dice_target: float = 0.8,
    *,
    hard_denominator: bool = False,
) -> Calibration:
    """Fit the quality line on labeled cases and invert it at dice_target.

    Non-finite scores (empty-prediction sentinels) are excluded from the
    fit; they are flagged unconditionally at classification time anyway.
    The fitted slope must be negative: more disagreement, worse Dice. A flat
    or positive slope means the score carries no usable signal here.
    """
    if not 0.0 < dice_target < 1.0:
        raise ConfigError(f"dice_target must be in (0, 1), got {dice_target}")
    pairs = [
        (s, d)
        for s, d in zip(list(scores), list(dices), strict=True)
        if math.isfinite(s)
    ]
    if len(pairs) < 3:
        raise CalibrationError(
            f"need at least 3 finite-score cases, got {len(pairs)}"
        )
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    slope, intercept = fit_line(x, y)
    if slope >= 0.0:
        raise CalibrationError(
            f"score does not degrade with Dice here (slope {slope:.4g}); "
            "calibration would be meaningless"
        )
    threshold = (dice_target - intercept) / slope
    return Calibration(
        slope=slope,
        intercept=intercept,
        dice_target=dice_target,
        threshold=threshold,
        n_cases=len(pairs),
        pearson_r=pearson(x, y),
        hard_denominator=hard_denominator,
    )


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ShapeError("spearman expects two equal-length 1-d arrays")
    if xa.size < 2:
        raise CalibrationError("need at least 2 points for a correlation")

    def ranks(a: np.ndarray) -> np.ndarray:
        order = np.argsort(a, kind="stable")
        r = np.empty(a.size, dtype=np.float64)
        i = 0
        while i < a.size:
            j = i
            while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
                j += 1
            r[order[i : j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        return r

    rx = ranks(xa)
    ry = ranks(ya)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum()) * float((ry * ry).sum()))
    if denom == 0.0:
        raise CalibrationError("constant ranks; correlation undefined")
    return float((rx * ry).sum() / denom)


@dataclass(frozen=True)
class CaseRecord:
    """One evaluated (volume, corruption) pair in a QC report."""

    case_id: str
    corruption: str
    dice: float
    nqm: float
    flagged: bool


@dataclass(frozen=True)
class QcReport:
    """Flagging performance of a calibration on labeled evaluation cases."""

    n_cases: int
    n_failures: int
    n_flagged: int
    detection_rate: float
    false_negative_rate: float
    false_positive_rate: float
    spearman_rho: float
    cases: tuple[CaseRecord, ...] = ()


def evaluate_qc(
    scores: Sequence[float],
    dices: Sequence[float],
    calibration: Calibration,
    *,
    case_ids: Sequence[str] | None = None,
    corruptions: Sequence[str] | None = None,
) -> QcReport:
    """Score a calibration against labeled cases.

    A case is a true failure when its Dice falls below the calibrated
    target. detection_rate is the flagged fraction of true failures (1.0
    when there are none); false_negative_rate is the fraction of all cases
    that fail yet pass the flag; false_positive_rate is the flagged fraction
    of the cases that did not fail (0.0 when every case failed).
    """
    if len(scores) != len(dices):
        raise ShapeError("scores and dices must have equal length")
    n = len(scores)
    if n == 0:
        raise ConfigError("need at least one evaluation case")
    if case_ids is not None and len(case_ids) != n:
        raise ShapeError("case_ids must match the number of cases")
    if corruptions is not None and len(corruptions) != n:
        raise ShapeError("corruptions must match the number of cases")
    failures = 0
    flagged = 0
    missed = 0
    good_flagged = 0
    records = []
    for i, (s, d) in enumerate(zip(scores, dices)):
        is_fail = d < calibration.dice_target
        is_flag = calibration.flags(s)
        failures += is_fail
        flagged += is_flag
        missed += is_fail and not is_flag
        good_flagged += is_flag and not is_fail
        records.append(
            CaseRecord(
                case_id=case_ids[i] if case_ids is not None else f"case-{i:03d}",
                corruption=corruptions[i] if corruptions is not None else "none",
                dice=float(d),
                nqm=float(s),
                flagged=bool(is_flag),
            )
        )
    detection = 1.0 if failures == 0 else (failures - missed) / failures
    goods = n - failures
    try:
        rho = spearman(scores, dices)
    except CalibrationError:
        # Constant scores or dices leave the rank correlation undefined;
        # the report's rates are still meaningful, so record the gap.
        rho = float("nan")
    return QcReport(
        n_cases=n,
        n_failures=failures,
        n_flagged=flagged,
        detection_rate=detection,
        false_negative_rate=missed / n,
        false_positive_rate=0.0 if goods == 0 else good_flagged / goods,
        spearman_rho=rho,
        cases=tuple(records),
    )


def qc_evaluate(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    corruptions: Sequence[tuple[str, Callable[[np.ndarray], np.ndarray]]],
    calibration: Calibration,
    *,
    members: int = 10,
    seed: int = 0,
) -> QcReport:
    """Full flagging evaluation: run ensembles over every case and variant.

    Each volume is scored once clean and once per named corruption
    transform; an empty corruption list evaluates the clean set alone. The
    per-case seed depends only on the case index, so adding corruptions
    never changes the clean rows.
    """
    from . import inference, synth
    from .kernels import fold_seed

    variants: list[tuple[str, Callable[[np.ndarray], np.ndarray] | None]] = [
        ("none", None)
    ]
    variants.extend(corruptions)
    scores: list[float] = []
    dices: list[float] = []
    ids: list[str] = []
    names: list[str] = []
    for i in range(images.shape[0]):
        for name, fn in variants:
            img = images[i] if fn is None else fn(images[i])
            res = inference.ensemble(
                model, img, seed=fold_seed(seed, i), members=members
            )
            scores.append(
                nqm_score(
                    res.mean_prob.astype(np.float64),
                    res.sd.astype(np.float64),
                    hard_denominator=calibration.hard_denominator,
                )
            )
            dices.append(synth.dice_score(res.mask, labels[i]))
            ids.append(f"case-{i:03d}")
            names.append(name)
    return evaluate_qc(
        scores, dices, calibration, case_ids=ids, corruptions=names
    )


def save_calibration(path, calibration: Calibration) -> None:
    """Persist a calibration as a small JSON text document."""
    doc = {
        "record": "calibration",
        "slope": calibration.slope,
        "intercept": calibration.intercept,
        "dice_target": calibration.dice_target,
        "threshold": calibration.threshold,
        "n_cases": calibration.n_cases,
        "pearson_r": calibration.pearson_r,
        "hard_denominator": calibration.hard_denominator,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_calibration(path) -> Calibration:
    doc = json.loads(Path(path).read_text())
    if doc.get("record") != "calibration":
        raise CalibrationError(f"{path} is not a calibration document")
    return Calibration(
        slope=doc["slope"],
        intercept=doc["intercept"],
        dice_target=doc["dice_target"],
        threshold=doc["threshold"],
        n_cases=doc["n_cases"],
        pearson_r=doc.get("pearson_r", float("nan")),
        hard_denominator=doc.get("hard_denominator", False),
    )


def report_csv(report: QcReport) -> str:
    """Render a report as CSV: one case per row, then an aggregate block."""
    lines = ["case_id,corruption,dice,nqm,flagged"]
    for c in report.cases:
        lines.append(
            f"{c.case_id},{c.corruption},{c.dice:.6f},{c.nqm:.6f},"
            f"{int(c.flagged)}"
        )
    lines.append("")
    lines.append("metric,value")
    lines.append(f"n_cases,{report.n_cases}")
    lines.append(f"n_failures,{report.n_failures}")
    lines.append(f"n_flagged,{report.n_flagged}")
    lines.append(f"detection_rate,{report.detection_rate:.6f}")
    lines.append(f"false_negative_rate,{report.false_negative_rate:.6f}")
    lines.append(f"false_positive_rate,{report.false_positive_rate:.6f}")
    lines.append(f"spearman_rho,{report.spearman_rho:.6f}")
    return "\n".join(lines) + "\n"
