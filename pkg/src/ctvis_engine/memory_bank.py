"""Per-track embedding memory with similarity-guided momentum averaging.

A track keeps every embedding it has been given, in frame order, plus a
momentum-averaged (MA) embedding.  Each new embedding ``e`` is blended into
the MA embedding with weight ``beta``, the clamped mean cosine similarity
between ``e`` and all earlier embeddings of the track::

    beta = max(0, mean_k cos(e, e_k))
    ma   = (1 - beta) * ma + beta * e

The first embedding of a track initialises the MA embedding directly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping

import numpy as np

from .embedding_core import as_embedding, cosine_to_many
from .errors import DimensionMismatch, NonMonotonicFrame, OverlapError, UnknownTrack

logger = logging.getLogger(__name__)

DEFAULT_NOISE_PROB = 0.05
DEFAULT_BACKGROUND_CAP = 16


@dataclass
class TrackMemory:
    track_id: Hashable
    history: list[tuple[int, np.ndarray]] = field(default_factory=list)
    ma_embedding: np.ndarray | None = None
    class_scores: dict[int, np.ndarray] = field(default_factory=dict)
    masks: dict[int, Any] = field(default_factory=dict)

    @property
    def last_frame(self) -> int | None:
        return self.history[-1][0] if self.history else None

    @property
    def latest(self) -> np.ndarray:
        return self.history[-1][1]

    def embeddings(self) -> np.ndarray:
        return np.stack([e for _, e in self.history])


def fuse_ma(track: TrackMemory, new_embedding) -> tuple[np.ndarray, float]:
    """Return the MA embedding and blend weight ``track`` would get after ``new_embedding``.

    The track is not modified.
    """
    e = np.asarray(new_embedding, dtype=np.float64)
    if not track.history:
        return e.copy(), 1.0
    if e.shape != track.ma_embedding.shape:
        raise DimensionMismatch(f"embedding shape {e.shape} != track shape {track.ma_embedding.shape}")
    sims = cosine_to_many(e, track.embeddings())
    beta = max(0.0, float(np.mean(sims)))
    return (1.0 - beta) * track.ma_embedding + beta * e, beta


def replay_ma(embeddings: Iterable) -> np.ndarray:
    """Fold a sequence of embeddings through :func:`fuse_ma` from an empty track."""
    track = TrackMemory(track_id=None)
    for t, e in enumerate(embeddings):
        e = np.asarray(e, dtype=np.float64)
        track.ma_embedding, _ = fuse_ma(track, e)
        track.history.append((t, e))
    if track.ma_embedding is None:
        raise ValueError("cannot replay an empty history")
    return track.ma_embedding


@dataclass
class NoiseReport:
    frame: int
    # (receiving track, donor track) pairs
    injections: list[tuple[Hashable, Hashable]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.injections)


class MemoryBank:
    """Track store for one video.

    With ``momentum=False`` the stored "MA" embedding is simply the most recent
    embedding of each track; this is the latest-embedding ablation.

    A bank has a single writer; :meth:`ma_snapshot` gives immutable copies that
    can be shared freely.
    """

    def __init__(self, dim: int | None = None, momentum: bool = True):
        self.dim = dim
        self.momentum = momentum
        self.tracks: dict[Hashable, TrackMemory] = {}
        self.next_id = 0
        self.background_pool: dict[int, list[np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.tracks)

    def __contains__(self, track_id) -> bool:
        return track_id in self.tracks

    def track_ids(self) -> list:
        return list(self.tracks)

    def new_track(self, track_id: Hashable | None = None) -> Hashable:
        """Register an empty track, issuing the next integer id unless one is given."""
        if track_id is None:
            track_id = self.next_id
        if track_id in self.tracks:
            raise ValueError(f"track {track_id!r} already exists")
        if isinstance(track_id, (int, np.integer)):
            self.next_id = max(self.next_id, int(track_id) + 1)
        self.tracks[track_id] = TrackMemory(track_id=track_id)
        return track_id

    def _check_dim(self, e: np.ndarray) -> None:
        if self.dim is None:
            self.dim = e.shape[0]
        elif e.shape[0] != self.dim:
            raise DimensionMismatch(f"expected dimension {self.dim}, got {e.shape[0]}")

    def append_observation(self, track_id, frame: int, embedding, class_scores=None, mask=None) -> float:
        """Extend a track's history and refresh its MA embedding; returns the blend weight."""
        try:
            track = self.tracks[track_id]
        except KeyError:
            raise UnknownTrack(track_id) from None
        e = as_embedding(embedding)
        self._check_dim(e)
        frame = int(frame)
        if track.history and frame <= track.last_frame:
            raise NonMonotonicFrame(f"track {track_id!r}: frame {frame} after {track.last_frame}")
        if self.momentum:
            ma, beta = fuse_ma(track, e)
        else:
            ma, beta = e.copy(), 1.0
        track.history.append((frame, e))
        track.ma_embedding = ma
        if class_scores is not None:
            track.class_scores[frame] = np.asarray(class_scores, dtype=np.float64)
        if mask is not None:
            track.masks[frame] = mask
        return beta

    def noisy_training_update(
        self,
        frame: int,
        present: Mapping[Hashable, Any],
        disappeared: Iterable[Hashable],
        noise_prob: float = DEFAULT_NOISE_PROB,
        rng: np.random.Generator | None = None,
    ) -> NoiseReport:
        """Training-time update with simulated ID switches.

        Present tracks receive their own embedding.  Each disappeared track,
        independently with probability ``noise_prob``, receives the embedding of
        one present instance drawn uniformly; otherwise it is left untouched.
        """
        disappeared = list(disappeared)
        overlap = set(present) & set(disappeared)
        if overlap:
            raise OverlapError(f"tracks both present and disappeared: {sorted(map(str, overlap))}")
        if not 0.0 <= noise_prob <= 1.0:
            raise ValueError(f"noise_prob must lie in [0, 1], got {noise_prob}")
        for tid in list(present) + disappeared:
            if tid not in self.tracks:
                raise UnknownTrack(tid)
        rng = rng if rng is not None else np.random.default_rng()

        for tid, e in present.items():
            self.append_observation(tid, frame, e)

        report = NoiseReport(frame=int(frame))
        donors = list(present)
        for tid in disappeared:
            # one draw per disappeared track keeps the stream aligned across noise_prob values
            u = rng.random()
            if u < noise_prob and donors:
                donor = donors[int(rng.integers(len(donors)))]
                self.append_observation(tid, frame, present[donor])
                report.injections.append((tid, donor))
        if report.injections:
            logger.debug("frame %d noise injections: %s", frame, report.injections)
        return report

    def add_background(self, frame: int, embeddings, rng: np.random.Generator | None = None,
                       cap: int = DEFAULT_BACKGROUND_CAP) -> None:
        """Store background embeddings of a processed frame, subsampled uniformly to ``cap``."""
        frame = int(frame)
        if self.background_pool and frame <= max(self.background_pool):
            raise NonMonotonicFrame(f"background for frame {frame} after {max(self.background_pool)}")
        embs = [as_embedding(e) for e in embeddings]
        for e in embs:
            self._check_dim(e)
        if len(embs) > cap:
            rng = rng if rng is not None else np.random.default_rng()
            keep = np.sort(rng.choice(len(embs), size=cap, replace=False))
            embs = [embs[i] for i in keep]
        self.background_pool[frame] = embs

    def ma_snapshot(self) -> dict[Hashable, np.ndarray]:
        snap = {}
        for tid, track in self.tracks.items():
            if track.ma_embedding is None:
                continue
            e = track.ma_embedding.copy()
            e.flags.writeable = False
            snap[tid] = e
        return snap

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "ctvis-memory-bank/1",
            "dim": self.dim,
            "momentum": self.momentum,
            "next_id": self.next_id,
            "tracks": [
                {
                    "track_id": _jsonable_id(t.track_id),
                    "frames": [f for f, _ in t.history],
                    "embeddings": [e.tolist() for _, e in t.history],
                    "ma_embedding": None if t.ma_embedding is None else t.ma_embedding.tolist(),
                    "class_scores": {str(f): s.tolist() for f, s in t.class_scores.items()},
                }
                for t in self.tracks.values()
            ],
            "background_pool": {str(f): [e.tolist() for e in embs] for f, embs in self.background_pool.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MemoryBank":
        bank = cls(dim=data.get("dim"), momentum=bool(data.get("momentum", True)))
        for rec in data["tracks"]:
            tid = rec["track_id"]
            track = TrackMemory(track_id=tid)
            track.history = [(int(f), np.asarray(e, dtype=np.float64))
                             for f, e in zip(rec["frames"], rec["embeddings"])]
            if rec.get("ma_embedding") is not None:
                track.ma_embedding = np.asarray(rec["ma_embedding"], dtype=np.float64)
            track.class_scores = {int(f): np.asarray(s, dtype=np.float64)
                                  for f, s in rec.get("class_scores", {}).items()}
            bank.tracks[tid] = track
        bank.next_id = int(data["next_id"])
        bank.background_pool = {int(f): [np.asarray(e, dtype=np.float64) for e in embs]
                                for f, embs in data.get("background_pool", {}).items()}
        return bank

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MemoryBank":
        return cls.from_dict(json.loads(text))


def _jsonable_id(tid):
    if isinstance(tid, np.integer):
        return int(tid)
    return tid


# Free-function forms of the bank operations.

def append_observation(bank: MemoryBank, track_id, frame: int, embedding, **kw) -> float:
    return bank.append_observation(track_id, frame, embedding, **kw)


def noisy_training_update(bank: MemoryBank, frame, present, disappeared, noise_prob=DEFAULT_NOISE_PROB,
                          rng=None) -> NoiseReport:
    return bank.noisy_training_update(frame, present, disappeared, noise_prob, rng)


def ma_snapshot(bank: MemoryBank) -> dict:
    return bank.ma_snapshot()
