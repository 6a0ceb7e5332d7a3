"""Visibility-gated part matching, ranking and retrieval metrics.

Metric families differ only in which same-identity gallery items count as
correct matches and which are removed from the ranking before scoring:

    ALL  good = every same-id item
    OCC  good = same-id NPO or NTP items; holistic same-id items ignored
    NPO  good = same-id NPO items; other same-id items ignored
    NTP  good = same-id NTP items; other same-id items ignored

Self matches and (optionally) same-camera same-id items are excluded in
every family. Negatives always stay in the ranking.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .labels import Occlusion

VIS_THRESHOLD = 0.5
FAMILIES = ("ALL", "OCC", "NPO", "NTP")
RANKS = (1, 5, 10)


class EmptyEvaluationError(ValueError):
    """No query had a correct match to score."""


def visibility_distance(q_global: np.ndarray, q_parts: np.ndarray | None, q_vis: np.ndarray | None,
                        g_global: np.ndarray, g_parts: np.ndarray | None, g_vis: np.ndarray | None,
                        threshold: float = VIS_THRESHOLD) -> float:
    """Visibility-weighted average of global and per-part Euclidean distances.

    Visibility scores are binarised at ``threshold``; the global feature
    always counts with weight 1, so the denominator is at least 1.
    """
    num = float(np.linalg.norm(np.asarray(q_global) - np.asarray(g_global)))
    den = 1.0
    if q_parts is not None and g_parts is not None:
        qv = np.ones(len(q_parts)) if q_vis is None else (np.asarray(q_vis) >= threshold).astype(float)
        gv = np.ones(len(g_parts)) if g_vis is None else (np.asarray(g_vis) >= threshold).astype(float)
        w = qv * gv
        d = np.linalg.norm(np.asarray(q_parts) - np.asarray(g_parts), axis=-1)
        num += float((w * d).sum())
        den += float(w.sum())
    return num / den


@dataclass
class EmbeddingSet:
    image_ids: list[str]
    ids: np.ndarray
    cams: np.ndarray
    occlusion: list[Occlusion]
    global_: np.ndarray                 # [n, D]
    parts: np.ndarray | None = None     # [n, P, D]
    visibility: np.ndarray | None = None  # [n, P]

    def __len__(self) -> int:
        return len(self.image_ids)

    def subset(self, index: Sequence[int]) -> "EmbeddingSet":
        index = np.asarray(index, dtype=int)
        return EmbeddingSet(
            [self.image_ids[i] for i in index],
            self.ids[index],
            self.cams[index],
            [self.occlusion[i] for i in index],
            self.global_[index],
            None if self.parts is None else self.parts[index],
            None if self.visibility is None else self.visibility[index],
        )

    def select(self, image_ids: Sequence[str]) -> "EmbeddingSet":
        pos = {im: i for i, im in enumerate(self.image_ids)}
        missing = [im for im in image_ids if im not in pos]
        if missing:
            raise KeyError(f"{len(missing)} image ids not in embedding set, e.g. {missing[0]!r}")
        return self.subset([pos[im] for im in image_ids])


def distance_matrix(query: EmbeddingSet, gallery: EmbeddingSet, threshold: float = VIS_THRESHOLD,
                    use_parts: bool = True) -> np.ndarray:
    """Visibility-gated distances [num_query, num_gallery]."""
    out = np.empty((len(query), len(gallery)))
    parts = use_parts and query.parts is not None and gallery.parts is not None
    if parts:
        p = query.parts.shape[1]
        qv = np.ones((len(query), p)) if query.visibility is None else (query.visibility >= threshold)
        gv = np.ones((len(gallery), p)) if gallery.visibility is None else (gallery.visibility >= threshold)
        qv, gv = qv.astype(float), gv.astype(float)
    for i in range(len(query)):
        num = np.linalg.norm(gallery.global_ - query.global_[i], axis=-1)
        den = np.ones(len(gallery))
        if parts:
            d = np.linalg.norm(gallery.parts - query.parts[i], axis=-1)  # [G, P]
            w = qv[i] * gv
            num = num + (w * d).sum(axis=-1)
            den = den + w.sum(axis=-1)
        out[i] = num / den
    return out


def compute_cmc_map(dist: np.ndarray, good: np.ndarray, ignore: np.ndarray) -> tuple[np.ndarray, float, int]:
    """CMC curve and mAP over queries with at least one correct match.

    ``good`` and ``ignore`` are boolean [Q, G] masks. Ignored items are
    dropped from each ranking before scoring; ties keep gallery order.
    Returns (cmc, mAP, number of scored queries).
    """
    dist = np.asarray(dist, dtype=np.float64)
    good = np.asarray(good, dtype=bool)
    ignore = np.asarray(ignore, dtype=bool)
    if (good & ignore).any():
        raise ValueError("good and ignore sets overlap")
    num_q, num_g = dist.shape
    cmc = np.zeros(num_g)
    ap_sum = 0.0
    scored = 0
    for i in range(num_q):
        order = np.argsort(dist[i], kind="stable")
        keep = order[~ignore[i, order]]
        hits = good[i, keep]
        if not hits.any():
            continue
        scored += 1
        ranks = np.flatnonzero(hits) + 1          # 1-based positions of correct matches
        precision = np.arange(1, len(ranks) + 1) / ranks
        ap_sum += precision.mean()
        cmc[ranks[0] - 1:] += 1
    if scored == 0:
        raise EmptyEvaluationError("every query lacks a correct match")
    return cmc / scored, ap_sum / scored, scored


@dataclass
class RankingRun:
    dist: np.ndarray
    query_image_ids: list[str]
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_image_ids: list[str]
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray
    gallery_occlusion: list[Occlusion]
    exclude_same_camera: bool = True

    def __post_init__(self):
        self.dist = np.asarray(self.dist, dtype=np.float64)
        if self.dist.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise ValueError("distance matrix shape does not match query/gallery sizes")
        if len(self.gallery_occlusion) != len(self.gallery_ids):
            raise ValueError("every gallery item needs an occlusion label")
        self.gallery_occlusion = [Occlusion.parse(o) for o in self.gallery_occlusion]
        if any(o is Occlusion.UNLABELED for o in self.gallery_occlusion):
            raise ValueError("gallery contains items without an occlusion label")

    @classmethod
    def from_embeddings(cls, query: EmbeddingSet, gallery: EmbeddingSet, exclude_same_camera: bool = True,
                        threshold: float = VIS_THRESHOLD, use_parts: bool = True) -> "RankingRun":
        return cls(distance_matrix(query, gallery, threshold, use_parts), list(query.image_ids),
                   np.asarray(query.ids), np.asarray(query.cams), list(gallery.image_ids),
                   np.asarray(gallery.ids), np.asarray(gallery.cams), list(gallery.occlusion),
                   exclude_same_camera)

    def same_id(self) -> np.ndarray:
        return np.asarray(self.query_ids)[:, None] == np.asarray(self.gallery_ids)[None, :]

    def excluded(self) -> np.ndarray:
        """Pairs that never count: self matches and, optionally, same-camera same-id items."""
        gpos = {im: j for j, im in enumerate(self.gallery_image_ids)}
        out = np.zeros(self.dist.shape, dtype=bool)
        for i, im in enumerate(self.query_image_ids):
            j = gpos.get(im)
            if j is not None:
                out[i, j] = True
        if self.exclude_same_camera:
            out |= self.same_id() & (np.asarray(self.query_cams)[:, None] == np.asarray(self.gallery_cams)[None, :])
        return out

    def family_masks(self, family: str) -> tuple[np.ndarray, np.ndarray]:
        same = self.same_id()
        excluded = self.excluded()
        occ = np.array([o.value for o in self.gallery_occlusion])
        if family == "ALL":
            counts = np.ones(len(occ), dtype=bool)
        elif family == "OCC":
            counts = (occ == Occlusion.NPO.value) | (occ == Occlusion.NTP.value)
        elif family in ("NPO", "NTP"):
            counts = occ == family
        else:
            raise ValueError(f"unknown metric family {family!r}")
        good = same & counts[None, :] & ~excluded
        ignore = (same & ~good) | excluded
        return good, ignore


@dataclass
class FamilyMetrics:
    rank: dict[int, float]
    mAP: float
    num_queries: int
    cmc: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        out = {f"rank{k}": v for k, v in self.rank.items()}
        out["mAP"] = self.mAP
        out["num_queries"] = self.num_queries
        return out


@dataclass
class MetricReport:
    families: dict[str, FamilyMetrics | None]

    def __getitem__(self, family: str) -> FamilyMetrics | None:
        return self.families[family]

    def to_dict(self) -> dict:
        return {name: (None if fm is None else fm.as_dict()) for name, fm in self.families.items()}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _family(run: RankingRun, family: str) -> FamilyMetrics | None:
    good, ignore = run.family_masks(family)
    try:
        cmc, m_ap, n = compute_cmc_map(run.dist, good, ignore)
    except EmptyEvaluationError:
        return None
    rank = {k: float(cmc[min(k, len(cmc)) - 1]) for k in RANKS}
    return FamilyMetrics(rank, float(m_ap), n, cmc)


def occluded_metrics(run: RankingRun, families: Sequence[str] = FAMILIES) -> MetricReport:
    """Standard and occlusion-family CMC/mAP.

    A family in which no query has a correct match is reported as ``None``.
    """
    return MetricReport({f: _family(run, f) for f in families})


def evaluate_embeddings(query: EmbeddingSet, gallery: EmbeddingSet, exclude_same_camera: bool = True,
                        use_parts: bool = True) -> MetricReport:
    run = RankingRun.from_embeddings(query, gallery, exclude_same_camera, use_parts=use_parts)
    return occluded_metrics(run)

