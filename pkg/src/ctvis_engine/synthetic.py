"""Synthetic observation streams standing in for a segmentor's query features.

Raw features live in a fixed "world" whose coordinates are mixed by a random
orthonormal basis.  Hidden coordinates are split into blocks:

* identity  - per-instance latent, slowly drifting over time;
* class     - prototype shared by every instance of a class;
* light     - per-frame scene component shared by all observations of a frame;
* fg        - constant level for real instances, zero for clutter;
* nuisance  - fresh per observation (pose, deformation).

Only the identity block separates instances of one video, so a useful
embedding head has to find it through the mixing.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np


@dataclass
class WorldConfig:
    dim: int = 32
    id_dim: int = 8
    cls_dim: int = 4
    light_dim: int = 4
    num_classes: int = 4
    id_scale: float = 1.0
    class_scale: float = 2.0
    light_scale: float = 1.0
    light_step: float = 0.3
    fg_level: float = 1.5
    nuisance_scale: float = 1.0
    drift_scale: float = 0.15
    noise_scale: float = 0.05
    world_seed: int = 0

    def __post_init__(self):
        if self.id_dim + self.cls_dim + self.light_dim + 1 > self.dim:
            raise ValueError("world blocks do not fit in dim")


class FeatureWorld:
    def __init__(self, config: WorldConfig | None = None):
        self.config = cfg = config or WorldConfig()
        rng = np.random.default_rng(cfg.world_seed)
        q, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))
        self.basis = q
        a = 0
        self.id_slice = slice(a, a + cfg.id_dim); a += cfg.id_dim
        self.cls_slice = slice(a, a + cfg.cls_dim); a += cfg.cls_dim
        self.light_slice = slice(a, a + cfg.light_dim); a += cfg.light_dim
        self.fg_index = a; a += 1
        self.nuisance_slice = slice(a, cfg.dim)
        self.class_prototypes = rng.normal(size=(cfg.num_classes, cfg.cls_dim)) * cfg.class_scale

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def sample_identity(self, rng) -> np.ndarray:
        return rng.normal(size=self.config.id_dim) * self.config.id_scale

    def drift(self, identity, rng) -> np.ndarray:
        return identity + rng.normal(size=identity.shape) * self.config.drift_scale

    def light_path(self, num_frames: int, rng) -> np.ndarray:
        cfg = self.config
        start = rng.normal(size=cfg.light_dim) * cfg.light_scale
        steps = rng.normal(size=(num_frames, cfg.light_dim)) * cfg.light_step
        steps[0] = 0.0
        return start + np.cumsum(steps, axis=0)

    def _compose(self, identity, cls_vec, light, fg, rng, nuisance_scale, noise_scale) -> np.ndarray:
        cfg = self.config
        h = np.zeros(cfg.dim)
        h[self.id_slice] = identity
        h[self.cls_slice] = cls_vec
        h[self.light_slice] = light
        h[self.fg_index] = fg
        n_nui = self.nuisance_slice.stop - self.nuisance_slice.start
        h[self.nuisance_slice] = rng.normal(size=n_nui) * nuisance_scale
        h += rng.normal(size=cfg.dim) * noise_scale
        return self.basis @ h

    def instance_feature(self, identity, class_label: int, light, rng, noise: bool = True) -> np.ndarray:
        cfg = self.config
        return self._compose(identity, self.class_prototypes[class_label], light, cfg.fg_level, rng,
                             cfg.nuisance_scale if noise else 0.0, cfg.noise_scale if noise else 0.0)

    def clutter_feature(self, light, rng) -> np.ndarray:
        cfg = self.config
        cls = self.class_prototypes[int(rng.integers(cfg.num_classes))]
        identity = rng.normal(size=cfg.id_dim) * cfg.id_scale
        return self._compose(identity, cls, light, 0.0, rng, cfg.nuisance_scale, cfg.noise_scale)

    def class_scores(self, class_label: int, rng, sharpness: float = 3.0, noise: float = 0.5) -> np.ndarray:
        logits = rng.normal(size=self.num_classes) * noise
        logits[class_label] += sharpness
        z = np.exp(logits - logits.max())
        return z / z.sum()


@dataclass
class FrameObs:
    """All observations of one frame; ``gt_ids[i]`` is None for clutter."""

    frame_index: int
    features: np.ndarray  # (n, dim)
    gt_ids: list
    class_labels: list  # GT class of each observation, None for clutter
    class_scores: np.ndarray  # (n, K)
    confidences: np.ndarray  # (n,)
    masks: list | None = None

    def __len__(self) -> int:
        return len(self.gt_ids)

    def foreground(self) -> dict:
        return {g: i for i, g in enumerate(self.gt_ids) if g is not None}


@dataclass
class Clip:
    frames: list[FrameObs]
    # instance id -> class label
    classes: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def presence(self) -> dict:
        out: dict = {}
        for fr in self.frames:
            for g in fr.gt_ids:
                if g is not None:
                    out.setdefault(g, []).append(fr.frame_index)
        return out

    def reappearances(self) -> int:
        """Number of (instance, gap) events where an instance returns after being absent."""
        count = 0
        for frames in self.presence().values():
            count += int(np.sum(np.diff(frames) > 1))
        return count


@dataclass
class StreamConfig:
    min_frames: int = 8
    max_frames: int = 10
    min_tracks: int = 5
    max_tracks: int = 10
    late_entry_prob: float = 0.2
    early_exit_prob: float = 0.1
    occlusion_prob: float = 0.5
    max_gap: int = 3
    # dense background queries, most of them under the inference confidence cut
    clutter_rate: float = 16.0
    duplicate_prob: float = 0.0
    # partial occlusion: a query absorbs a large share of an overlapping instance
    corrupt_prob: float = 0.08
    corrupt_mix: tuple = (0.5, 0.9)
    instance_conf: tuple = (0.5, 1.0)
    clutter_conf: tuple = (0.0, 0.36)
    duplicate_conf: tuple = (0.05, 0.35)
    with_masks: bool = False
    raster: int = 32

    @classmethod
    def reid_heavy(cls, **kw) -> "StreamConfig":
        base = dict(occlusion_prob=0.9, max_gap=4, late_entry_prob=0.1, early_exit_prob=0.0)
        base.update(kw)
        return cls(**base)


def sample_schedule(num_frames: int, cfg: StreamConfig, rng) -> list[bool]:
    """Presence flags of one instance; any occlusion gap is followed by reappearance."""
    start = 0
    end = num_frames - 1
    if num_frames >= 4 and rng.random() < cfg.late_entry_prob:
        start = int(rng.integers(1, num_frames // 2))
    if num_frames >= 4 and rng.random() < cfg.early_exit_prob:
        end = int(rng.integers(num_frames // 2, num_frames - 1))
    present = [start <= t <= end for t in range(num_frames)]
    life = end - start + 1
    if life >= 3 and rng.random() < cfg.occlusion_prob:
        gap = int(rng.integers(1, min(cfg.max_gap, life - 2) + 1))
        gap_start = int(rng.integers(start + 1, end - gap + 1))
        for t in range(gap_start, gap_start + gap):
            present[t] = False
    return present


class SyntheticStream:
    """Clip generator over a :class:`FeatureWorld` with occlusion, re-entry and clutter."""

    def __init__(self, world: FeatureWorld | None = None, config: StreamConfig | None = None):
        self.world = world or FeatureWorld()
        self.config = config or StreamConfig()

    @property
    def dim(self) -> int:
        return self.world.dim

    def describe(self) -> dict:
        return {"world": asdict(self.world.config), "stream": asdict(self.config)}

    def sample_clip(self, rng, num_frames: int | None = None, noise: bool = True) -> Clip:
        cfg = self.config
        world = self.world
        if num_frames is None:
            num_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        n_tracks = int(rng.integers(cfg.min_tracks, cfg.max_tracks + 1))
        classes = {g: int(rng.integers(world.num_classes)) for g in range(n_tracks)}
        identities = {g: world.sample_identity(rng) for g in range(n_tracks)}
        schedules = {g: sample_schedule(num_frames, cfg, rng) for g in range(n_tracks)}
        light = world.light_path(num_frames, rng)
        if not noise:
            light = np.repeat(light[:1], num_frames, axis=0)
        boxes = {g: _random_box(cfg.raster, rng) for g in range(n_tracks)} if cfg.with_masks else None

        frames = []
        for t in range(num_frames):
            feats, ids, labels, scores, confs, masks = [], [], [], [], [], []
            for g in range(n_tracks):
                if noise:
                    identities[g] = world.drift(identities[g], rng)
                if not schedules[g][t]:
                    continue
                feats.append(world.instance_feature(identities[g], classes[g], light[t], rng, noise=noise))
                ids.append(g)
                labels.append(classes[g])
                scores.append(world.class_scores(classes[g], rng))
                confs.append(rng.uniform(*cfg.instance_conf))
                if boxes is not None:
                    boxes[g] = _move_box(boxes[g], cfg.raster, rng)
                    masks.append(_box_mask(boxes[g], cfg.raster))
                if noise and rng.random() < cfg.duplicate_prob:
                    # a second, unmatched query firing on the same object
                    feats.append(world.instance_feature(identities[g], classes[g], light[t], rng))
                    ids.append(None)
                    labels.append(None)
                    scores.append(world.class_scores(classes[g], rng))
                    confs.append(rng.uniform(*cfg.duplicate_conf))
                    if boxes is not None:
                        masks.append(_box_mask(_move_box(boxes[g], cfg.raster, rng), cfg.raster))
            fg_idx = [i for i, g in enumerate(ids) if g is not None]
            if noise and cfg.corrupt_prob > 0 and len(fg_idx) > 1:
                clean = [f.copy() for f in feats]
                for i in fg_idx:
                    if rng.random() < cfg.corrupt_prob:
                        j = fg_idx[int(rng.integers(len(fg_idx) - 1))]
                        j = j if j != i else fg_idx[-1]
                        a = rng.uniform(*cfg.corrupt_mix)
                        feats[i] = (1 - a) * clean[i] + a * clean[j]
            n_clutter = int(rng.poisson(cfg.clutter_rate)) if noise else 0
            for _ in range(n_clutter):
                feats.append(world.clutter_feature(light[t], rng))
                ids.append(None)
                labels.append(None)
                scores.append(rng.dirichlet(np.ones(world.num_classes)))
                confs.append(rng.uniform(*cfg.clutter_conf))
                if boxes is not None:
                    masks.append(_box_mask(_random_box(cfg.raster, rng), cfg.raster))
            frames.append(FrameObs(
                frame_index=t,
                features=np.asarray(feats, dtype=np.float64).reshape(-1, world.dim),
                gt_ids=ids,
                class_labels=labels,
                class_scores=np.asarray(scores, dtype=np.float64).reshape(-1, world.num_classes),
                confidences=np.asarray(confs, dtype=np.float64),
                masks=masks if boxes is not None else None,
            ))
        return Clip(frames=frames, classes=classes)


def _random_box(raster: int, rng) -> np.ndarray:
    h, w = rng.integers(4, raster // 3, size=2)
    y, x = rng.integers(0, raster - h), rng.integers(0, raster - w)
    return np.array([y, x, h, w])


def _move_box(box, raster: int, rng) -> np.ndarray:
    y, x, h, w = box
    y = int(np.clip(y + rng.integers(-1, 2), 0, raster - h))
    x = int(np.clip(x + rng.integers(-1, 2), 0, raster - w))
    return np.array([y, x, h, w])


def _box_mask(box, raster: int) -> np.ndarray:
    y, x, h, w = box
    m = np.zeros((raster, raster), dtype=bool)
    m[y:y + h, x:x + w] = True
    return m
