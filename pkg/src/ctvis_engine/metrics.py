"""Evaluation: tube IoU, VIS-style AP/AR, association quality and embedding margins."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .assignment import hungarian
from .errors import RasterMismatch

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class TrackPrediction:
    """A spatio-temporal track: per-frame masks plus a video-level label.

    ``category`` fixes the label (ground truth); otherwise the label and score
    come from the argmax of ``scores``.
    """

    track_id: Hashable
    masks: dict[int, np.ndarray]
    scores: np.ndarray | None = None
    video_id: Hashable = 0
    category: int | None = None

    @property
    def label(self) -> int:
        if self.category is not None:
            return int(self.category)
        return int(np.argmax(self.scores))

    @property
    def confidence(self) -> float:
        if self.scores is None:
            return 1.0
        return float(np.max(self.scores))


@dataclass
class EvalReport:
    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0
    ar1: float = 0.0
    ar10: float = 0.0
    id_switches: int = 0
    assoc_accuracy: float = 1.0
    intra_margin: float = float("nan")
    inter_margin: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ap > 1.0 + 1e-12:
            raise ValueError("AP cannot exceed 1")
        if not 0.0 <= self.assoc_accuracy <= 1.0:
            raise ValueError("assoc_accuracy must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("intra_margin", "inter_margin"):
            if d[k] != d[k]:  # NaN is not valid JSON
                d[k] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def tube_iou(pred: TrackPrediction, gt: TrackPrediction) -> float:
    inter = union = 0
    shape = None
    for t in set(pred.masks) | set(gt.masks):
        a, b = pred.masks.get(t), gt.masks.get(t)
        for m in (a, b):
            if m is not None:
                if shape is None:
                    shape = np.shape(m)
                elif np.shape(m) != shape:
                    raise RasterMismatch(f"mask shape {np.shape(m)} != {shape}")
        if a is None or b is None:
            only = a if b is None else b
            if only is not None:
                union += np.count_nonzero(only)
            continue
        a = np.asarray(a, dtype=bool)
        b = np.asarray(b, dtype=bool)
        inter += np.count_nonzero(a & b)
        union += np.count_nonzero(a | b)
    return inter / union if union else 0.0


def _match_video(dets: list[TrackPrediction], gts: list[TrackPrediction], thr: float) -> list[bool]:
    """Greedy matching by descending score; a detection takes the best-IoU unmatched GT."""
    taken = [False] * len(gts)
    flags = []
    ious = np.array([[tube_iou(d, g) for g in gts] for d in dets]).reshape(len(dets), len(gts))
    for i in range(len(dets)):
        best, best_j = thr, -1
        for j in range(len(gts)):
            if not taken[j] and ious[i, j] >= best:
                best, best_j = ious[i, j], j
        if best_j >= 0:
            taken[best_j] = True
        flags.append(best_j >= 0)
    return flags


def _pr_curve(scores, tps, n_gt: int) -> tuple[float, float]:
    """101-point interpolated precision and final recall for one class/threshold."""
    if n_gt == 0:
        raise ValueError("no ground truth")
    if len(scores) == 0:
        return 0.0, 0.0
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    tp = np.cumsum(np.asarray(tps, dtype=float)[order])
    fp = np.cumsum(1.0 - np.asarray(tps, dtype=float)[order])
    rc = tp / n_gt
    pr = tp / (tp + fp)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
    return float(np.mean(q)), float(rc[-1])


def vis_ap(preds: Sequence[TrackPrediction], gts: Sequence[TrackPrediction],
           iou_thresholds=IOU_THRESHOLDS, max_dets: int = 100) -> dict:
    """COCO-style video AP over tube IoU, averaged over thresholds and classes with GT."""
    iou_thresholds = np.asarray(iou_thresholds, dtype=float)
    classes = sorted({g.label for g in gts})
    videos = sorted({g.video_id for g in gts} | {p.video_id for p in preds}, key=str)
    ap = np.zeros((len(iou_thresholds), len(classes)))
    ar = {k: np.zeros((len(iou_thresholds), len(classes))) for k in (1, 10)}
    for c_i, cls in enumerate(classes):
        per_video = []
        n_gt = 0
        for v in videos:
            d = [p for p in preds if p.video_id == v and p.label == cls]
            d.sort(key=lambda p: -p.confidence)
            g = [x for x in gts if x.video_id == v and x.label == cls]
            n_gt += len(g)
            per_video.append((d, g))
        for t_i, thr in enumerate(iou_thresholds):
            for k, store in [(max_dets, None), (1, ar[1]), (10, ar[10])]:
                scores, tps = [], []
                for d, g in per_video:
                    d = d[:k]
                    scores += [p.confidence for p in d]
                    tps += _match_video(d, g, thr)
                p_interp, recall = _pr_curve(scores, tps, n_gt)
                if store is None:
                    ap[t_i, c_i] = p_interp
                else:
                    store[t_i, c_i] = recall
    if not classes:
        return {"ap": 0.0, "ap50": 0.0, "ap75": 0.0, "ar1": 0.0, "ar10": 0.0}

    def at(thr):
        hit = np.isclose(iou_thresholds, thr)
        return float(ap[hit].mean()) if hit.any() else float("nan")

    return {
        "ap": float(ap.mean()),
        "ap50": at(0.5),
        "ap75": at(0.75),
        "ar1": float(ar[1].mean()),
        "ar10": float(ar[10].mean()),
    }


def tracking_quality(trace: Iterable[Mapping], gt_ids: Mapping[tuple[int, int], Hashable]) -> tuple[int, float]:
    """ID switches and association accuracy of an association trace.

    ``trace`` records carry ``frame``, ``detection`` and ``track``; ``gt_ids``
    maps ``(frame, detection)`` to a GT identity (None or missing for clutter).
    Accuracy uses the one-to-one GT/track correspondence that maximises the
    number of co-assigned detections.
    """
    seq: dict = {}
    for rec in sorted(trace, key=lambda r: (r["frame"], r["detection"])):
        g = gt_ids.get((rec["frame"], rec["detection"]))
        if g is None:
            continue
        seq.setdefault(g, []).append(rec["track"])
    total = sum(len(v) for v in seq.values())
    if total == 0:
        return 0, 1.0

    switches = sum(int(np.sum([a != b for a, b in zip(tr[:-1], tr[1:])])) for tr in seq.values())

    gts = list(seq)
    tracks = sorted({t for v in seq.values() for t in v}, key=str)
    t_index = {t: i for i, t in enumerate(tracks)}
    counts = np.zeros((len(gts), len(tracks)))
    for gi, g in enumerate(gts):
        for t in seq[g]:
            counts[gi, t_index[t]] += 1
    if counts.shape[0] <= counts.shape[1]:
        pairs = hungarian((counts.max() - counts).T)
        matched = sum(counts[c, r] for r, c in pairs)
    else:
        pairs = hungarian(counts.max() - counts)
        matched = sum(counts[r, c] for r, c in pairs)
    return int(switches), float(matched / total)


def embedding_margins(head, clips) -> tuple[float, float]:
    """Mean cosine similarity of head outputs within and across identities."""
    intra, inter = [], []
    for clip in clips:
        feats, ids = [], []
        for fr in clip.frames:
            for i, g in enumerate(fr.gt_ids):
                if g is not None:
                    feats.append(fr.features[i])
                    ids.append(g)
        if len(feats) < 2:
            continue
        e = head(np.stack(feats))
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
        cos = e @ e.T
        ids = np.asarray(ids, dtype=object)
        same = ids[:, None] == ids[None, :]
        upper = np.triu(np.ones_like(same, dtype=bool), k=1)
        intra.extend(cos[same & upper].tolist())
        inter.extend(cos[~same & upper].tolist())
    return (float(np.mean(intra)) if intra else float("nan"),
            float(np.mean(inter)) if inter else float("nan"))
