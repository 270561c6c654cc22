"""Genuine/impostor protocols and rank metrics (Rank-1, TAR@FAR, DET, CMC).

All metrics are rank statistics: they are invariant under any strictly
increasing transform of the scores.  Tie handling is deliberately
pessimistic (acceptance thresholds use >=, a true mate tied with a
non-mate ranks after it) so reported numbers are reproducible lower
bounds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import EmptyScores, InvalidArgument, LabelError

# Pair array columns: query subject, query sample, gallery subject, gallery sample.
_PAIR_COLS = 4


@dataclass(frozen=True)
class Protocol:
    """Genuine and impostor comparison pairs.

    Pairs are int32 arrays of shape (n, 4) holding
    (query_subject, query_sample, gallery_subject, gallery_sample).
    """

    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self) -> None:
        for name in ("genuine", "impostor"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[1] != _PAIR_COLS:
                raise InvalidArgument(f"{name} pairs must have shape (n, 4)")

    @property
    def n_genuine(self) -> int:
        return int(self.genuine.shape[0])

    @property
    def n_impostor(self) -> int:
        return int(self.impostor.shape[0])


def build_fvc_protocol(n_fingers: int, n_impressions: int) -> Protocol:
    """FVC pairing: all intra-finger impression pairs are genuine; the first
    impression of every finger pair is an impostor comparison."""
    if n_fingers < 2 or n_impressions < 2:
        raise InvalidArgument("need n_fingers >= 2 and n_impressions >= 2")
    i_idx, j_idx = np.triu_indices(n_impressions, k=1)
    fingers = np.repeat(np.arange(n_fingers, dtype=np.int32), i_idx.size)
    genuine = np.column_stack(
        [
            fingers,
            np.tile(i_idx.astype(np.int32), n_fingers),
            fingers,
            np.tile(j_idx.astype(np.int32), n_fingers),
        ]
    )
    f1, f2 = np.triu_indices(n_fingers, k=1)
    zeros = np.zeros(f1.size, dtype=np.int32)
    impostor = np.column_stack([f1.astype(np.int32), zeros, f2.astype(np.int32), zeros])
    return Protocol(genuine, impostor)


def build_cross_protocol(n_subjects: int, q_per_subject: int, g_per_subject: int) -> Protocol:
    """Cross-set pairing: every query sample against every gallery sample,
    intra-subject pairs genuine, all cross-subject pairs impostor."""
    if n_subjects < 1 or q_per_subject < 1 or g_per_subject < 1:
        raise InvalidArgument("all protocol sizes must be >= 1")
    qi, gj = np.meshgrid(np.arange(q_per_subject), np.arange(g_per_subject), indexing="ij")
    qi = qi.ravel().astype(np.int32)
    gj = gj.ravel().astype(np.int32)
    per = qi.size

    subs = np.repeat(np.arange(n_subjects, dtype=np.int32), per)
    genuine = np.column_stack([subs, np.tile(qi, n_subjects), subs, np.tile(gj, n_subjects)])

    qs, gs = np.meshgrid(np.arange(n_subjects), np.arange(n_subjects), indexing="ij")
    keep = qs.ravel() != gs.ravel()
    qs = qs.ravel()[keep].astype(np.int32)
    gs = gs.ravel()[keep].astype(np.int32)
    impostor = np.column_stack(
        [
            np.repeat(qs, per),
            np.tile(qi, qs.size),
            np.repeat(gs, per),
            np.tile(gj, qs.size),
        ]
    )
    return Protocol(genuine, impostor)


@dataclass(frozen=True)
class ScoreSet:
    """Labelled similarity scores for a verification experiment."""

    genuine_scores: np.ndarray
    impostor_scores: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "genuine_scores", np.asarray(self.genuine_scores, dtype=np.float64))
        object.__setattr__(self, "impostor_scores", np.asarray(self.impostor_scores, dtype=np.float64))

    def require_nonempty(self) -> None:
        if self.genuine_scores.size == 0 or self.impostor_scores.size == 0:
            raise EmptyScores("both genuine and impostor scores are required")


def tar_at_far(s: ScoreSet, far: float) -> float:
    """True accept rate at the given false accept rate.

    The threshold is the smallest observed score whose >= acceptance rule
    keeps the impostor pass fraction at or below `far`; if no score
    qualifies the TAR is 0.
    """
    if not 0.0 < far < 1.0:
        raise InvalidArgument(f"far must be in (0, 1), got {far}")
    s.require_nonempty()
    gen = np.sort(s.genuine_scores)
    imp = np.sort(s.impostor_scores)
    candidates = np.unique(np.concatenate([gen, imp]))
    n_imp_ge = imp.size - np.searchsorted(imp, candidates, side="left")
    ok = n_imp_ge / imp.size <= far
    if not ok.any():
        return 0.0
    threshold = candidates[np.argmax(ok)]
    n_gen_ge = gen.size - np.searchsorted(gen, threshold, side="left")
    return float(n_gen_ge / gen.size)


def det_curve(s: ScoreSet) -> List[Tuple[float, float]]:
    """(FAR, FRR) points swept over the observed scores, FAR ascending.

    Includes the (0, .) endpoint from a threshold above every score and
    reaches (1, 0) at the minimum observed score.
    """
    s.require_nonempty()
    gen = np.sort(s.genuine_scores)
    imp = np.sort(s.impostor_scores)
    thresholds = np.unique(np.concatenate([gen, imp]))[::-1]
    points = [(0.0, 1.0)]  # threshold above all observed scores
    for t in thresholds:
        far = (imp.size - np.searchsorted(imp, t, side="left")) / imp.size
        frr = np.searchsorted(gen, t, side="left") / gen.size
        points.append((float(far), float(frr)))
    return points


def eer(s: ScoreSet) -> float:
    """Equal error rate read off the DET sweep (closest FAR/FRR crossing)."""
    pts = det_curve(s)
    best = min(pts, key=lambda p: abs(p[0] - p[1]))
    return (best[0] + best[1]) / 2.0


def cmc_curve(score_matrix: np.ndarray, true_indices: Sequence[int]) -> List[float]:
    """Cumulative match characteristic for a queries x gallery score matrix.

    A query's rank counts every gallery entry scoring >= its true mate
    (pessimistic: equal-scored non-mates precede the mate).  Returns
    accuracies for ranks 1..N; the final entry is always 1.
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    if scores.ndim != 2:
        raise InvalidArgument("score matrix must be 2-D (queries x gallery)")
    n_queries, n_gallery = scores.shape
    if len(true_indices) != n_queries:
        raise LabelError(f"need one true label per query, got {len(true_indices)}")
    ranks = np.empty(n_queries, dtype=np.int64)
    for qi in range(n_queries):
        true_idx = true_indices[qi]
        if not 0 <= true_idx < n_gallery:
            raise LabelError(f"query {qi}: true gallery index {true_idx} out of range")
        row = scores[qi]
        ranks[qi] = int((row >= row[true_idx]).sum())
    return [float((ranks <= r).mean()) for r in range(1, n_gallery + 1)]


def rank1_accuracy(score_matrix: np.ndarray, true_indices: Sequence[int]) -> float:
    return cmc_curve(score_matrix, true_indices)[0]


# ---------------------------------------------------------------------------
# CSV emitters


def write_det_csv(path, points: List[Tuple[float, float]]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("far,frr\n")
        for far, frr in points:
            fh.write(f"{far:.9g},{frr:.9g}\n")


def write_cmc_csv(path, accuracies: Sequence[float]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("rank,accuracy\n")
        for rank, acc in enumerate(accuracies, 1):
            fh.write(f"{rank},{acc:.9g}\n")


def write_summary_csv(path, fields: dict) -> None:
    keys = list(fields)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(keys) + "\n")
        fh.write(",".join(_fmt(fields[k]) for k in keys) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)
