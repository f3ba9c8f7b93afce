"""Loss-threshold membership inference: scores, ROC curve, AUC, advantage."""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

from .errors import DomainError
from .models import Dataset, ToyModel, per_example_losses


@dataclasses.dataclass(frozen=True, eq=False)
class MiaReport:
    member_scores: np.ndarray
    nonmember_scores: np.ndarray
    thresholds: np.ndarray  # threshold of each ROC point after the origin
    roc: np.ndarray         # (k, 2) array of (fpr, tpr), from (0, 0) to (1, 1)
    auc: float
    advantage: float

    def write(self, roc_path, summary_path) -> None:
        with open(roc_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            w.writerow(["inf", repr(0.0), repr(0.0)])
            for thr, (fpr, tpr) in zip(self.thresholds, self.roc[1:]):
                w.writerow([repr(float(thr)), repr(float(fpr)), repr(float(tpr))])
        with open(summary_path, "w") as fh:
            fh.write(f"auc={self.auc!r}\nadvantage={self.advantage!r}\n")
            fh.write(f"n_members={self.member_scores.size}\nn_nonmembers={self.nonmember_scores.size}\n")


def mia_scores(model: ToyModel, members: Dataset, nonmembers: Dataset):
    """Negated per-example loss, so larger means more member-like."""
    if len(members) == 0 or len(nonmembers) == 0:
        raise DomainError("both splits must be non-empty")
    return -per_example_losses(model, members), -per_example_losses(model, nonmembers)


def roc_curve(member_scores, nonmember_scores):
    """Threshold sweep over the distinct scores, highest first.

    A record is flagged as a member when its score is >= the threshold.
    Returns (thresholds, roc) where roc has one more row than thresholds:
    the leading (0, 0) point.
    """
    pos = np.asarray(member_scores, dtype=np.float64).ravel()
    neg = np.asarray(nonmember_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise DomainError("score lists must be non-empty")
    if np.isnan(pos).any() or np.isnan(neg).any():
        raise DomainError("scores must not be nan")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    # count of scores >= thr
    tp = pos.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, thresholds, side="left")
    roc = np.empty((thresholds.size + 1, 2))
    roc[0] = 0.0
    roc[1:, 0] = fp / neg.size
    roc[1:, 1] = tp / pos.size
    return thresholds, roc


def auc_from_roc(roc: np.ndarray) -> float:
    """Trapezoidal area; on a full threshold sweep this equals the
    Mann-Whitney statistic with ties counted one half."""
    x, y = roc[:, 0], roc[:, 1]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def advantage(roc) -> float:
    """max(tpr - fpr) over the ROC points."""
    roc = np.asarray(roc, dtype=np.float64)
    return float(max(0.0, np.max(roc[:, 1] - roc[:, 0])))


def roc_auc(member_scores, nonmember_scores) -> MiaReport:
    thresholds, roc = roc_curve(member_scores, nonmember_scores)
    return MiaReport(
        member_scores=np.asarray(member_scores, dtype=np.float64),
        nonmember_scores=np.asarray(nonmember_scores, dtype=np.float64),
        thresholds=thresholds,
        roc=roc,
        auc=auc_from_roc(roc),
        advantage=advantage(roc),
    )


def evaluate_mia(model: ToyModel, members: Dataset, nonmembers: Dataset) -> MiaReport:
    return roc_auc(*mia_scores(model, members, nonmembers))
