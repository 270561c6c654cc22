"""Masked-cosine descriptor matching and batched gallery search.

The pair score is the dot product of the flattened descriptors divided by
the product of cross-masked Frobenius norms; because descriptor values are
zero outside their own binarized mask, the numerator only ever sees the
overlap region.  Multi-variant scores fuse by maximum.

The gallery index precomputes, per variant, the flattened value matrix, the
per-cell squared-norm matrix and the binarized mask matrix, which turns a
whole-gallery scan into one matrix-vector product per variant.  The index
is immutable after enroll; concurrent searches over a shared index are
safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .descriptor import MASK_BINARIZE_THRESHOLD, DenseDescriptor
from .errors import DuplicateId, InvalidArgument, SizeMismatch

NORM_GUARD = 1e-12


def match_score(q: DenseDescriptor, g: DenseDescriptor) -> float:
    """Masked cosine similarity of two descriptors (64-bit accumulation)."""
    if q.values.shape != g.values.shape:
        raise SizeMismatch(f"descriptor shapes differ: {q.values.shape} vs {g.values.shape}")
    bq = q.binary_mask()
    bg = g.binary_mask()
    if not (bq & bg).any():
        return 0.0
    qv = q.values.astype(np.float64)
    gv = g.values.astype(np.float64)
    numerator = float(np.dot(qv.ravel(), gv.ravel()))
    norm_q = float(np.sqrt(((qv * bg[None, :, :]) ** 2).sum()))
    norm_g = float(np.sqrt(((gv * bq[None, :, :]) ** 2).sum()))
    if norm_q < NORM_GUARD or norm_g < NORM_GUARD:
        return 0.0
    return numerator / (norm_q * norm_g)


def match_score_bruteforce(q: DenseDescriptor, g: DenseDescriptor) -> float:
    """Per-cell loop oracle for match_score; no precomputation, test use only."""
    if q.values.shape != g.values.shape:
        raise SizeMismatch(f"descriptor shapes differ: {q.values.shape} vs {g.values.shape}")
    channels, grid_h, grid_w = q.values.shape
    thr = MASK_BINARIZE_THRESHOLD
    q_vals = q.values.astype(np.float64).tolist()
    g_vals = g.values.astype(np.float64).tolist()
    q_mask = q.mask.tolist()
    g_mask = g.mask.tolist()
    numerator = 0.0
    sum_q_sq = 0.0
    sum_g_sq = 0.0
    overlap = False
    for i in range(grid_h):
        for j in range(grid_w):
            in_q = q_mask[i][j] >= thr
            in_g = g_mask[i][j] >= thr
            if in_q and in_g:
                overlap = True
            for c in range(channels):
                qv = q_vals[c][i][j]
                gv = g_vals[c][i][j]
                numerator += qv * gv
                if in_g:
                    sum_q_sq += qv * qv
                if in_q:
                    sum_g_sq += gv * gv
    if not overlap:
        return 0.0
    norm_q = sum_q_sq**0.5
    norm_g = sum_g_sq**0.5
    if norm_q < NORM_GUARD or norm_g < NORM_GUARD:
        return 0.0
    return numerator / (norm_q * norm_g)


def fuse_scores(scores: Sequence[float]) -> Tuple[float, int]:
    """Max-fusion over per-variant scores; ties break to the lowest index."""
    if len(scores) == 0:
        raise InvalidArgument("fuse_scores needs at least one score")
    best_idx = 0
    best = float(scores[0])
    for idx in range(1, len(scores)):
        val = float(scores[idx])
        if val > best:
            best = val
            best_idx = idx
    return best, best_idx


# ---------------------------------------------------------------------------
# Gallery index


@dataclass(frozen=True)
class MatchResult:
    gallery_id: str
    fused_score: float
    per_variant_scores: Tuple[float, ...]
    best_variant: int


class GalleryIndex:
    """Flattened per-variant descriptor matrices for batched scoring.

    For each variant v: values[v] is (N, L) float32 of flattened
    descriptors, cell_norms[v] is (N, G) float64 of per-cell squared norms,
    bin_masks[v] is (N, G) float32 of binarized masks.
    """

    def __init__(
        self,
        ids: List[str],
        values: List[np.ndarray],
        cell_norms: List[np.ndarray],
        bin_masks: List[np.ndarray],
        grid_shape: Tuple[int, int],
        channels: int,
    ) -> None:
        self.ids = ids
        self.values = values
        self.cell_norms = cell_norms
        self.bin_masks = bin_masks
        self.grid_shape = grid_shape
        self.channels = channels

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_variants(self) -> int:
        return len(self.values)


def enroll(entries: Iterable[Tuple[str, Sequence[DenseDescriptor]]]) -> GalleryIndex:
    """Build a GalleryIndex from (id, [variant descriptors]) pairs.

    Subjects keep insertion order; every descriptor must share one shape
    and every subject the same variant count.
    """
    ids: List[str] = []
    rows_values: List[List[np.ndarray]] = []
    rows_norms: List[List[np.ndarray]] = []
    rows_masks: List[List[np.ndarray]] = []
    shape = None
    n_variants = None
    seen = set()
    for subject_id, descriptors in entries:
        descriptors = list(descriptors)
        if subject_id in seen:
            raise DuplicateId(f"subject {subject_id!r} enrolled twice")
        seen.add(subject_id)
        if n_variants is None:
            n_variants = len(descriptors)
            if n_variants == 0:
                raise InvalidArgument("each subject needs at least one variant")
            rows_values = [[] for _ in range(n_variants)]
            rows_norms = [[] for _ in range(n_variants)]
            rows_masks = [[] for _ in range(n_variants)]
        elif len(descriptors) != n_variants:
            raise SizeMismatch(
                f"subject {subject_id!r} has {len(descriptors)} variants, expected {n_variants}"
            )
        for v, desc in enumerate(descriptors):
            if shape is None:
                shape = desc.values.shape
            elif desc.values.shape != shape:
                raise SizeMismatch(
                    f"descriptor shape {desc.values.shape} for {subject_id!r} differs from {shape}"
                )
            vals64 = desc.values.astype(np.float64)
            rows_values[v].append(desc.values.astype(np.float32).ravel())
            rows_norms[v].append((vals64 * vals64).sum(axis=0).ravel())
            rows_masks[v].append(desc.binary_mask().astype(np.float32).ravel())
        ids.append(subject_id)

    if n_variants is None:  # empty gallery
        return GalleryIndex([], [], [], [], (0, 0), 0)
    grid_shape = (shape[1], shape[2])
    values = [np.vstack(r) if r else np.empty((0, 0), np.float32) for r in rows_values]
    norms = [np.vstack(r) for r in rows_norms]
    masks = [np.vstack(r) for r in rows_masks]
    return GalleryIndex(ids, values, norms, masks, grid_shape, shape[0])


def search(query: Sequence[DenseDescriptor], index: GalleryIndex, top_k: int) -> List[MatchResult]:
    """Rank the gallery against a K-variant query.

    Per variant the numerators come from one matrix-vector product; the
    cross-masked norms come from products with the precomputed per-cell
    norm and mask matrices.  Ordering matches brute-force pairwise scoring,
    ties resolving to gallery insertion order.
    """
    if top_k < 1:
        raise InvalidArgument(f"top_k must be >= 1, got {top_k}")
    if index.n_subjects == 0:
        return []
    if len(query) != index.n_variants:
        raise SizeMismatch(
            f"query has {len(query)} variants, index expects {index.n_variants}"
        )
    n = index.n_subjects
    scores = np.zeros((index.n_variants, n))
    for v, desc in enumerate(query):
        if desc.values.shape[0] != index.channels or desc.grid_shape != index.grid_shape:
            raise SizeMismatch(
                f"query variant {v} shape {desc.values.shape} does not match index "
                f"({index.channels}, {index.grid_shape[0]}, {index.grid_shape[1]})"
            )
        flat_q = desc.values.astype(np.float32).ravel()
        vals64 = desc.values.astype(np.float64)
        cell_norms_q = (vals64 * vals64).sum(axis=0).ravel()
        bin_mask_q = desc.binary_mask().astype(np.float64).ravel()

        numerators = index.values[v] @ flat_q
        # ||q restricted to B_g||^2 per gallery row; float32 matvec keeps the
        # whole-gallery scan in the BLAS fast path.
        norm_q_sq = (index.bin_masks[v] @ cell_norms_q.astype(np.float32)).astype(np.float64)
        norm_g_sq = index.cell_norms[v] @ bin_mask_q    # ||g restricted to B_q||^2
        norm_q = np.sqrt(np.maximum(norm_q_sq, 0.0))
        norm_g = np.sqrt(np.maximum(norm_g_sq, 0.0))
        denom = norm_q * norm_g
        valid = (norm_q >= NORM_GUARD) & (norm_g >= NORM_GUARD)
        scores[v] = np.where(valid, numerators.astype(np.float64) / np.where(valid, denom, 1.0), 0.0)

    fused = scores.max(axis=0)
    best_variant = scores.argmax(axis=0)  # first max wins on ties
    order = np.argsort(-fused, kind="stable")[: min(top_k, n)]
    return [
        MatchResult(
            gallery_id=index.ids[row],
            fused_score=float(fused[row]),
            per_variant_scores=tuple(float(s) for s in scores[:, row]),
            best_variant=int(best_variant[row]),
        )
        for row in order
    ]


def write_scores_csv(path, rows: Iterable[Tuple[str, str, int, float, float]]) -> None:
    """Dump per-variant scores as query_id,gallery_id,variant,score,fused."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("query_id,gallery_id,variant,score,fused\n")
        for query_id, gallery_id, variant, score, fused in rows:
            fh.write(f"{query_id},{gallery_id},{variant},{score:.9g},{fused:.9g}\n")
