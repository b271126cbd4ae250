"""Pseudo-videos built from one labeled scene: rotation, crop (zoom / shift) and copy&paste.

All geometric transforms resample a per-pixel *label map* (instance index or
background) with nearest-neighbour lookup, so visible masks stay binary and
pairwise disjoint by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateWindow, EmptyScene, InvalidConfig, RasterMismatch
from .synthetic import Clip, FeatureWorld, FrameObs, StreamConfig

MIN_WINDOW = 8
DATASET_FORMAT = "ctvis-pseudo-video/1"


@dataclass
class SceneInstance:
    instance_id: int
    class_label: int
    mask: np.ndarray  # bool (H, W), visible region only
    depth: int  # larger is nearer the camera

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class LabeledScene:
    width: int
    height: int
    instances: list[SceneInstance] = field(default_factory=list)

    def __post_init__(self):
        for inst in self.instances:
            inst.mask = np.asarray(inst.mask, dtype=bool)
            if inst.mask.shape != (self.height, self.width):
                raise RasterMismatch(f"mask {inst.mask.shape} on a {self.height}x{self.width} canvas")

    def validate(self) -> None:
        depths = [i.depth for i in self.instances]
        if len(set(depths)) != len(depths):
            raise ValueError("depth order must be unique")
        ids = [i.instance_id for i in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError("instance ids must be unique")
        cover = np.zeros((self.height, self.width), dtype=np.int32)
        for inst in self.instances:
            cover += inst.mask
        if cover.max(initial=0) > 1:
            raise ValueError("visible masks overlap")

    def label_map(self) -> np.ndarray:
        """Index into ``instances`` per pixel, -1 for background."""
        lab = np.full((self.height, self.width), -1, dtype=np.int64)
        for k, inst in enumerate(self.instances):
            lab[inst.mask] = k
        return lab

    def with_label_map(self, lab: np.ndarray) -> "LabeledScene":
        """New scene from a resampled label map; instances left with no pixels are dropped."""
        h, w = lab.shape
        out = []
        for k, inst in enumerate(self.instances):
            m = lab == k
            if m.any():
                out.append(SceneInstance(inst.instance_id, inst.class_label, m, inst.depth))
        return LabeledScene(w, h, out)

    def ids(self) -> list[int]:
        return [i.instance_id for i in self.instances]

    def get(self, instance_id) -> SceneInstance | None:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        return None


@dataclass
class PseudoVideo:
    frames: list[LabeledScene]
    provenance: list[list[dict]] = field(default_factory=list)

    def __post_init__(self):
        if self.frames:
            shape = (self.frames[0].height, self.frames[0].width)
            for fr in self.frames:
                if (fr.height, fr.width) != shape:
                    raise RasterMismatch("frames must share raster dimensions")
        if not self.provenance:
            self.provenance = [[] for _ in self.frames]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.frames[0].height, self.frames[0].width)

    def track_ids(self) -> list[int]:
        return sorted({i for fr in self.frames for i in fr.ids()})

    def classes(self) -> dict:
        return {inst.instance_id: inst.class_label for fr in self.frames for inst in fr.instances}

    def presence(self, instance_id) -> list[bool]:
        return [fr.get(instance_id) is not None for fr in self.frames]

    def mask(self, t: int, instance_id) -> np.ndarray:
        inst = self.frames[t].get(instance_id)
        if inst is None:
            return np.zeros(self.shape, dtype=bool)
        return inst.mask


# ---------------------------------------------------------------- scenes

def _shape_mask(kind: str, h: int, w: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    bh = int(rng.integers(max(4, h // 8), max(5, h // 3)))
    bw = int(rng.integers(max(4, w // 8), max(5, w // 3)))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    if kind == "rect":
        m = np.zeros((h, w), dtype=bool)
        m[y0:y0 + bh, x0:x0 + bw] = True
        return m
    cy, cx = y0 + (bh - 1) / 2, x0 + (bw - 1) / 2
    if kind == "ellipse":
        return ((yy - cy) / (bh / 2)) ** 2 + ((xx - cx) / (bw / 2)) ** 2 <= 1.0
    # blob: a few overlapping discs around the box centre
    m = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        r = rng.uniform(0.2, 0.45) * min(bh, bw)
        py = cy + rng.uniform(-0.3, 0.3) * bh
        px = cx + rng.uniform(-0.3, 0.3) * bw
        m |= (yy - py) ** 2 + (xx - px) ** 2 <= r * r
    return m


SHAPES = ("rect", "ellipse", "blob")


def random_scene(rng, width: int = 64, height: int = 64, num_instances=(3, 6),
                 num_classes: int = 4) -> LabeledScene:
    """Procedural scene of rectangles, ellipses and blobs painted back to front."""
    lo, hi = num_instances
    n = int(rng.integers(lo, hi + 1))
    depths = rng.permutation(n)
    labels = rng.integers(0, num_classes, size=n)
    full = [_shape_mask(SHAPES[int(c) % len(SHAPES)], height, width, rng) for c in labels]
    lab = np.full((height, width), -1, dtype=np.int64)
    for k in np.argsort(depths):
        lab[full[k]] = k
    instances = []
    for k in range(n):
        m = lab == k
        if m.any():
            instances.append(SceneInstance(k, int(labels[k]), m, int(depths[k])))
    return LabeledScene(width, height, instances)


# ------------------------------------------------------------ transforms

def rotate_scene(scene: LabeledScene, angle: float) -> LabeledScene:
    """Rotate about the canvas centre (counter-clockwise on screen for positive angles)."""
    h, w = scene.height, scene.width
    cy, cx = (h - 1) / 2, (w - 1) / 2
    th = np.deg2rad(angle)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source pixel
    sx = np.rint(np.cos(th) * dx - np.sin(th) * dy + cx).astype(np.int64)
    sy = np.rint(np.sin(th) * dx + np.cos(th) * dy + cy).astype(np.int64)
    inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    src = scene.label_map()
    lab = np.full((h, w), -1, dtype=np.int64)
    lab[inside] = src[sy[inside], sx[inside]]
    return scene.with_label_map(lab)


def crop_scene(scene: LabeledScene, window, out_size=None) -> LabeledScene:
    """Resample ``window = (y0, x0, h, w)`` (floats allowed) to ``out_size = (H, W)``."""
    y0, x0, wh, ww = (float(v) for v in window)
    if wh < MIN_WINDOW or ww < MIN_WINDOW:
        raise DegenerateWindow(f"window {wh:.1f}x{ww:.1f} is below {MIN_WINDOW} px")
    H, W = out_size or (scene.height, scene.width)
    ys = np.floor(y0 + (np.arange(H) + 0.5) * wh / H).astype(np.int64)
    xs = np.floor(x0 + (np.arange(W) + 0.5) * ww / W).astype(np.int64)
    ys = np.clip(ys, 0, scene.height - 1)
    xs = np.clip(xs, 0, scene.width - 1)
    lab = scene.label_map()[np.ix_(ys, xs)]
    return scene.with_label_map(lab)


def _check_scene(scene: LabeledScene) -> None:
    if not scene.instances:
        raise EmptyScene("scene has no instances")


def sample_angles(num_frames: int, angle_range, rng) -> np.ndarray:
    lo, hi = angle_range
    if not -180 <= lo <= hi <= 180:
        raise InvalidConfig(f"bad angle range {angle_range}")
    return np.sort(rng.uniform(lo, hi, size=num_frames))


def gen_rotation(scene: LabeledScene, num_frames: int, angle_range=(-15.0, 15.0), rng=None) -> PseudoVideo:
    _check_scene(scene)
    if num_frames < 1:
        raise InvalidConfig("num_frames must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    angles = sample_angles(num_frames, angle_range, rng)
    frames = [rotate_scene(scene, a) for a in angles]
    prov = [[{"op": "rotation", "angle": float(a)}] for a in angles]
    return PseudoVideo(frames, prov)


def zoom_windows(height: int, width: int, num_frames: int, rng, scales=None,
                 min_scale: float = 0.5) -> list[tuple]:
    """Windows whose size moves monotonically between two scales, around a fixed centre."""
    s0, s1 = scales if scales is not None else rng.uniform(min_scale, 1.0, size=2)
    small = min(s0, s1)
    cy = rng.uniform(small * height / 2, height - small * height / 2)
    cx = rng.uniform(small * width / 2, width - small * width / 2)
    out = []
    for s in np.linspace(s0, s1, num_frames):
        h, w = s * height, s * width
        y0 = float(np.clip(cy - h / 2, 0, height - h))
        x0 = float(np.clip(cx - w / 2, 0, width - w))
        out.append((y0, x0, h, w))
    return out


def shift_windows(height: int, width: int, num_frames: int, rng, scale=None, start=None, end=None,
                  scale_range=(0.6, 0.85)) -> list[tuple]:
    """Fixed-size windows sliding along a straight line from ``start`` to ``end`` origins."""
    s = scale if scale is not None else rng.uniform(*scale_range)
    h, w = s * height, s * width
    if start is None:
        start = (rng.uniform(0, height - h), rng.uniform(0, width - w))
    if end is None:
        end = (rng.uniform(0, height - h), rng.uniform(0, width - w))
    out = []
    for a in np.linspace(0.0, 1.0, num_frames):
        y0 = (1 - a) * start[0] + a * end[0]
        x0 = (1 - a) * start[1] + a * end[1]
        out.append((float(y0), float(x0), h, w))
    return out


def _window_inside(win, height, width) -> bool:
    y0, x0, h, w = win
    eps = 1e-9
    return y0 >= -eps and x0 >= -eps and y0 + h <= height + eps and x0 + w <= width + eps


def gen_crop(scene: LabeledScene, num_frames: int, mode: str = "zoom", rng=None, out_size=None,
             windows=None, **kw) -> PseudoVideo:
    """Zoom or shift crops of ``scene``; extra keywords go to the window sampler."""
    _check_scene(scene)
    if num_frames < 1:
        raise InvalidConfig("num_frames must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    if windows is None:
        if mode == "zoom":
            windows = zoom_windows(scene.height, scene.width, num_frames, rng, **kw)
        elif mode == "shift":
            windows = shift_windows(scene.height, scene.width, num_frames, rng, **kw)
        else:
            raise InvalidConfig(f"unknown crop mode {mode!r}")
    for win in windows:
        if not _window_inside(win, scene.height, scene.width):
            raise InvalidConfig(f"crop window {win} leaves the canvas")
    frames = [crop_scene(scene, win, out_size) for win in windows]
    prov = [[{"op": "crop", "mode": mode, "window": [float(v) for v in win]}] for win in windows]
    return PseudoVideo(frames, prov)


def _paste(frame: LabeledScene, inst: SceneInstance, patch: np.ndarray, y: int, x: int) -> LabeledScene:
    """Overlay ``patch`` at (y, x) on top of every existing instance."""
    full = np.zeros((frame.height, frame.width), dtype=bool)
    ph, pw = patch.shape
    y1, x1 = min(y + ph, frame.height), min(x + pw, frame.width)
    full[y:y1, x:x1] = patch[: y1 - y, : x1 - x]
    kept = []
    for other in frame.instances:
        m = other.mask & ~full
        if m.any():
            kept.append(SceneInstance(other.instance_id, other.class_label, m, other.depth))
    if full.any():
        kept.append(SceneInstance(inst.instance_id, inst.class_label, full, inst.depth))
    return LabeledScene(frame.width, frame.height, kept)


def gen_copy_paste(target: PseudoVideo, donor: LabeledScene, num_pastes: int, rng=None,
                   jitter: int = 2) -> PseudoVideo:
    """Paste donor instances on top of ``target`` along jittered straight paths."""
    if num_pastes <= 0 or not target.frames:
        return target
    rng = rng if rng is not None else np.random.default_rng()
    if not donor.instances:
        raise EmptyScene("donor scene has no instances")
    H, W = target.shape
    frames = list(target.frames)
    prov = [list(p) for p in target.provenance]
    used_ids = [i for fr in frames for i in fr.ids()]
    next_id = max(used_ids, default=-1) + 1
    top = max([inst.depth for fr in frames for inst in fr.instances], default=-1) + 1
    picks = rng.choice(len(donor.instances), size=min(num_pastes, len(donor.instances)), replace=False)
    for k, idx in enumerate(picks):
        src = donor.instances[int(idx)]
        rows, cols = np.nonzero(src.mask)
        patch = src.mask[rows.min():rows.max() + 1, cols.min():cols.max() + 1]
        ph, pw = patch.shape
        if ph > H or pw > W:
            raise InvalidConfig("donor instance does not fit in the target canvas")
        new = SceneInstance(next_id + k, src.class_label, patch, top + k)
        start = np.array([rng.integers(0, H - ph + 1), rng.integers(0, W - pw + 1)])
        end = np.array([rng.integers(0, H - ph + 1), rng.integers(0, W - pw + 1)])
        n = len(frames)
        for t, a in enumerate(np.linspace(0.0, 1.0, n)):
            pos = np.rint((1 - a) * start + a * end).astype(int) + rng.integers(-jitter, jitter + 1, size=2)
            y = int(np.clip(pos[0], 0, H - ph))
            x = int(np.clip(pos[1], 0, W - pw))
            frames[t] = _paste(frames[t], new, patch, y, x)
            prov[t].append({"op": "copy_paste", "track_id": int(new.instance_id),
                            "source_id": int(src.instance_id), "at": [y, x]})
    return PseudoVideo(frames, prov)


@dataclass
class AugmentConfig:
    """Which augmentations to compose, and their parameters."""

    num_frames: int = 8
    rotation: bool = True
    crop: bool = True
    copy_paste: bool = True
    angle_range: tuple = (-15.0, 15.0)
    crop_mode: str = "random"  # zoom | shift | random
    num_pastes: int = 2
    width: int = 64
    height: int = 64
    num_instances: tuple = (3, 6)
    num_classes: int = 4


def make_pseudo_video(rng, cfg: AugmentConfig | None = None, scene: LabeledScene | None = None,
                      donor: LabeledScene | None = None) -> PseudoVideo:
    """Compose the enabled augmentations: rotate, then crop, then paste."""
    cfg = cfg or AugmentConfig()
    if scene is None:
        scene = random_scene(rng, cfg.width, cfg.height, cfg.num_instances, cfg.num_classes)
    _check_scene(scene)
    n = cfg.num_frames
    angles = sample_angles(n, cfg.angle_range, rng) if cfg.rotation else np.zeros(n)
    windows = None
    mode = None
    if cfg.crop:
        mode = cfg.crop_mode if cfg.crop_mode != "random" else ("zoom", "shift")[int(rng.integers(2))]
        sampler = zoom_windows if mode == "zoom" else shift_windows
        windows = sampler(scene.height, scene.width, n, rng)
    frames, prov = [], []
    for t in range(n):
        fr = rotate_scene(scene, angles[t]) if cfg.rotation else scene
        steps = [{"op": "rotation", "angle": float(angles[t])}] if cfg.rotation else []
        if windows is not None:
            fr = crop_scene(fr, windows[t])
            steps.append({"op": "crop", "mode": mode, "window": [float(v) for v in windows[t]]})
        frames.append(fr)
        prov.append(steps)
    video = PseudoVideo(frames, prov)
    if cfg.copy_paste and cfg.num_pastes > 0:
        if donor is None:
            donor = random_scene(rng, cfg.width, cfg.height, cfg.num_instances, cfg.num_classes)
        video = gen_copy_paste(video, donor, cfg.num_pastes, rng)
    return video


# ---------------------------------------------------------- observation

def observe(video: PseudoVideo, rng, world: FeatureWorld | None = None,
            config: StreamConfig | None = None, noise: bool = True) -> Clip:
    """Per-frame query features for every visible instance plus background clutter.

    Track ids become GT ids; the class label picks the class prototype.  With
    ``noise=False`` each instance's feature is the same in every frame.
    """
    world = world or FeatureWorld()
    cfg = config or StreamConfig()
    ids = video.track_ids()
    classes = video.classes()
    for c in classes.values():
        if not 0 <= c < world.num_classes:
            raise InvalidConfig(f"class {c} outside the world's {world.num_classes} classes")
    identity = {g: world.sample_identity(rng) for g in ids}
    light = world.light_path(len(video), rng)
    if not noise:
        light = np.repeat(light[:1], len(video), axis=0)
    H, W = video.shape if video.frames else (0, 0)
    frames = []
    for t, scene in enumerate(video.frames):
        feats, gts, labels, scores, confs, masks = [], [], [], [], [], []
        if noise:
            for g in ids:
                identity[g] = world.drift(identity[g], rng)
        for inst in sorted(scene.instances, key=lambda i: i.instance_id):
            g = inst.instance_id
            feats.append(world.instance_feature(identity[g], inst.class_label, light[t], rng, noise=noise))
            gts.append(g)
            labels.append(inst.class_label)
            scores.append(world.class_scores(inst.class_label, rng) if noise
                          else np.eye(world.num_classes)[inst.class_label])
            confs.append(rng.uniform(*cfg.instance_conf) if noise else 1.0)
            masks.append(inst.mask)
        n_clutter = int(rng.poisson(cfg.clutter_rate)) if noise and cfg.clutter_rate > 0 else 0
        for _ in range(n_clutter):
            feats.append(world.clutter_feature(light[t], rng))
            gts.append(None)
            labels.append(None)
            scores.append(rng.dirichlet(np.ones(world.num_classes)))
            confs.append(rng.uniform(*cfg.clutter_conf))
            m = np.zeros((H, W), dtype=bool)
            y, x = int(rng.integers(0, max(H - 4, 1))), int(rng.integers(0, max(W - 4, 1)))
            m[y:y + 4, x:x + 4] = True
            masks.append(m)
        frames.append(FrameObs(
            frame_index=t,
            features=np.asarray(feats, dtype=np.float64).reshape(-1, world.dim),
            gt_ids=gts,
            class_labels=labels,
            class_scores=np.asarray(scores, dtype=np.float64).reshape(-1, world.num_classes),
            confidences=np.asarray(confs, dtype=np.float64),
            masks=masks,
        ))
    return Clip(frames=frames, classes=classes)


class PseudoVideoStream:
    """Training clips drawn from a fixed set of pseudo-videos."""

    def __init__(self, videos: list[PseudoVideo], world: FeatureWorld | None = None,
                 config: StreamConfig | None = None):
        if not videos:
            raise EmptyScene("no videos to sample from")
        self.videos = videos
        self.world = world or FeatureWorld()
        self.config = config or StreamConfig()

    @property
    def dim(self) -> int:
        return self.world.dim

    def sample_clip(self, rng, num_frames: int | None = None, noise: bool = True) -> Clip:
        video = self.videos[int(rng.integers(len(self.videos)))]
        clip = observe(video, rng, self.world, self.config, noise)
        if num_frames is not None and num_frames < len(clip):
            start = int(rng.integers(0, len(clip) - num_frames + 1))
            clip.frames = clip.frames[start:start + num_frames]
            for t, fr in enumerate(clip.frames):
                fr.frame_index = t
        return clip


# ------------------------------------------------------------------ RLE

def rle_encode(mask) -> dict:
    """Row-major run lengths alternating background/foreground, starting with background."""
    m = np.asarray(mask, dtype=bool)
    flat = m.ravel()
    if flat.size == 0:
        return {"size": list(m.shape), "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return {"size": list(m.shape), "counts": [int(r) for r in runs]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise RasterMismatch(f"run lengths sum to {counts.sum()}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


# ------------------------------------------------------------------- IO

def video_records(video: PseudoVideo) -> list[dict]:
    recs = []
    for t, fr in enumerate(video.frames):
        recs.append({
            "frame": t,
            "width": fr.width,
            "height": fr.height,
            "instances": [
                {"track_id": int(i.instance_id), "class": int(i.class_label), "depth": int(i.depth),
                 "rle": rle_encode(i.mask)}
                for i in sorted(fr.instances, key=lambda i: i.instance_id)
            ],
            "provenance": video.provenance[t],
        })
    return recs


def write_video(path, video: PseudoVideo) -> None:
    with open(path, "w") as fh:
        for rec in video_records(video):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_video(path) -> PseudoVideo:
    frames, prov = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            insts = [SceneInstance(i["track_id"], i["class"], rle_decode(i["rle"]), i["depth"])
                     for i in rec["instances"]]
            frames.append(LabeledScene(rec["width"], rec["height"], insts))
            prov.append(rec.get("provenance", []))
    return PseudoVideo(frames, prov)


def video_counts(video: PseudoVideo) -> dict:
    return {
        "frames": len(video),
        "instances": len(video.track_ids()),
        "masks": sum(len(fr.instances) for fr in video.frames),
    }


def write_dataset(out_dir, videos: list[PseudoVideo], seed: int, params: dict | None = None) -> dict:
    """One JSONL file per video plus ``manifest.json``; output is deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, video in enumerate(videos):
        name = f"video_{k:04d}.jsonl"
        write_video(out / name, video)
        entries.append({"file": name, **video_counts(video)})
    manifest = {
        "format": DATASET_FORMAT,
        "seed": seed,
        "count": len(videos),
        "params": params or {},
        "videos": entries,
        "totals": {k: sum(e[k] for e in entries) for k in ("frames", "instances", "masks")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(data_dir) -> tuple[dict, list[PseudoVideo]]:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    return manifest, [read_video(d / e["file"]) for e in manifest["videos"]]
