"""Inference-time matching of detections against the memory bank.

Scores are bi-softmax similarities: for detection ``i`` and track ``j``

    f[i, j] = 0.5 * (softmax_j(E @ d_i)[j] + softmax_i(e_j @ D)[i])

where ``E`` stacks the tracks' MA embeddings and ``D`` the detection
embeddings.  A detection joins its best unclaimed track when ``f`` exceeds the
match threshold, otherwise it starts a new track.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Sequence

import numpy as np

from .embedding_core import stable_softmax
from .errors import DimensionMismatch, EmptyDetections, EmptyMemories, EmptyTrack
from .memory_bank import MemoryBank

DEFAULT_MATCH_THRESHOLD = 0.5
DEFAULT_CONF_THRESHOLD = 0.3


@dataclass
class InstanceObservation:
    embedding: np.ndarray
    class_scores: np.ndarray | None = None
    mask: Any = None
    confidence: float = 1.0


@dataclass
class FrameDetections:
    frame_index: int
    detections: list[InstanceObservation]

    def __post_init__(self):
        dims = {np.asarray(d.embedding).shape for d in self.detections}
        if len(dims) > 1:
            raise DimensionMismatch(f"detections of frame {self.frame_index} have shapes {dims}")
        for d in self.detections:
            if not 0.0 <= d.confidence <= 1.0:
                raise ValueError(f"confidence {d.confidence} outside [0, 1]")


@dataclass
class Assignment:
    detection_index: int
    track_id: Hashable
    score: float
    is_new: bool


@dataclass
class AssociationResult:
    frame_index: int
    assignments: list[Assignment]
    similarity_matrix: np.ndarray
    # detection indices (into the frame) of the matrix rows, track ids of its columns
    row_detections: list[int] = field(default_factory=list)
    col_tracks: list = field(default_factory=list)

    def track_of(self) -> dict[int, Hashable]:
        return {a.detection_index: a.track_id for a in self.assignments}

    def trace_records(self) -> list[dict]:
        return [
            {
                "frame": self.frame_index,
                "detection": a.detection_index,
                "track": _plain(a.track_id),
                "score": float(a.score),
                "new": bool(a.is_new),
            }
            for a in self.assignments
        ]


def bi_softmax_matrix(detections, memories) -> np.ndarray:
    D = np.atleast_2d(np.asarray(detections, dtype=np.float64))
    E = np.atleast_2d(np.asarray(memories, dtype=np.float64))
    if D.size == 0:
        raise EmptyDetections("no detections to score")
    if E.size == 0:
        raise EmptyMemories("no memories to score against")
    if D.shape[1] != E.shape[1]:
        raise DimensionMismatch(f"detection dim {D.shape[1]} != memory dim {E.shape[1]}")
    logits = D @ E.T  # (N, M)
    det_to_mem = stable_softmax(logits, axis=1)
    mem_to_det = stable_softmax(logits, axis=0)
    return 0.5 * (det_to_mem + mem_to_det)


def associate_frame(
    bank: MemoryBank,
    frame: FrameDetections,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
) -> AssociationResult:
    """Associate one frame's detections with the bank and update it in place."""
    if not (0.0 <= match_threshold <= 1.0 and 0.0 <= conf_threshold <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    kept = [i for i, d in enumerate(frame.detections) if d.confidence >= conf_threshold]
    # descending confidence; stable sort keeps detection order on ties
    kept.sort(key=lambda i: -frame.detections[i].confidence)

    snapshot = bank.ma_snapshot()
    track_ids = sorted(snapshot, key=_sort_key)
    if kept and track_ids:
        D = np.stack([np.asarray(frame.detections[i].embedding, dtype=np.float64) for i in kept])
        E = np.stack([snapshot[t] for t in track_ids])
        f = bi_softmax_matrix(D, E)
    else:
        f = np.zeros((len(kept), len(track_ids)))

    claimed = np.zeros(len(track_ids), dtype=bool)
    assignments = []
    for row, det_idx in enumerate(kept):
        best_col, best_f = -1, 0.0
        if track_ids and not claimed.all():
            scores = np.where(claimed, -np.inf, f[row])
            # argmax returns the first maximum, i.e. the lowest track id on ties
            best_col = int(np.argmax(scores))
            best_f = float(f[row, best_col])
        if best_col >= 0 and best_f > match_threshold:
            claimed[best_col] = True
            assignments.append(Assignment(det_idx, track_ids[best_col], best_f, False))
        else:
            assignments.append(Assignment(det_idx, None, best_f, True))

    for a in assignments:
        if a.is_new:
            a.track_id = bank.new_track()
        det = frame.detections[a.detection_index]
        bank.append_observation(a.track_id, frame.frame_index, det.embedding,
                                class_scores=det.class_scores, mask=det.mask)

    assignments.sort(key=lambda a: a.detection_index)
    return AssociationResult(frame.frame_index, assignments, f, kept, track_ids)


def track_video(bank: MemoryBank, frames: Iterable[FrameDetections], **kw) -> list[AssociationResult]:
    return [associate_frame(bank, fr, **kw) for fr in frames]


def video_level_scores(bank: MemoryBank, num_frames: int | None = None) -> dict:
    """Mean class-score vector of every track over the frames where it has scores."""
    out = {}
    for tid, track in bank.tracks.items():
        frames = sorted(track.class_scores)
        if num_frames is not None:
            frames = [f for f in frames if f < num_frames]
        if not frames:
            raise EmptyTrack(f"track {tid!r} has no class scores")
        out[tid] = np.mean(np.stack([track.class_scores[f] for f in frames]), axis=0)
    return out


def write_trace(results: Sequence[AssociationResult], path) -> None:
    """Write association results as JSON lines, one record per assigned detection."""
    with open(path, "w") as fh:
        for res in results:
            for rec in res.trace_records():
                fh.write(json.dumps(rec) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _sort_key(tid):
    return (0, tid, "") if isinstance(tid, (int, np.integer)) else (1, 0, str(tid))


def _plain(tid):
    return int(tid) if isinstance(tid, np.integer) else tid
