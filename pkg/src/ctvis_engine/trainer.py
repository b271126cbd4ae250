"""Training of an affine embedding head with memory-bank contrastive items.

``train_consistent`` walks each sampled clip frame by frame the way inference
does: embed, assign to GT, build items against the bank, then update the bank
(optionally with noise).  ``train_baseline`` contrasts a key frame against
reference frames only.  Both take one gradient step per clip on the mean item
loss scaled by the embedding loss weight.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Protocol

import numpy as np

from . import __version__
from .assignment import cost_matrix, hungarian
from .contrastive import ContrastiveItem, NegativeMode, build_cis, emb_loss_grad
from .errors import DivergenceError, InvalidConfig
from .memory_bank import DEFAULT_BACKGROUND_CAP, MemoryBank
from .synthetic import Clip, FrameObs

logger = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    clip_length: int = 8
    lr: float = 0.05
    iterations: int = 200
    lambda_emb: float = 2.0
    lambda_cls: float = 2.0
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    noise_prob: float = 0.05
    negative_mode: str = NegativeMode.MAJOR_PLUS_LOCAL.value
    seed: int = 0
    embed_dim: int = 16
    background_cap: int = DEFAULT_BACKGROUND_CAP
    normalize: bool = False
    use_hungarian: bool = False
    references: int = 1
    init_scale: float = 0.1

    def __post_init__(self):
        if self.clip_length < 2:
            raise InvalidConfig("clip_length must be at least 2")
        if not self.lr > 0:
            raise InvalidConfig("lr must be positive")
        if self.iterations < 0:
            raise InvalidConfig("iterations must be non-negative")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise InvalidConfig("noise_prob must lie in [0, 1]")
        if self.references < 1:
            raise InvalidConfig("references must be at least 1")
        try:
            NegativeMode(self.negative_mode)
        except ValueError:
            raise InvalidConfig(f"unknown negative_mode {self.negative_mode!r}") from None

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Ablation:
    memory_bank: bool = True
    momentum: bool = True
    noise: bool = True

    @property
    def name(self) -> str:
        if not self.memory_bank:
            return "baseline"
        return "+".join(["memory_bank"] + (["momentum"] if self.momentum else []) + (["noise"] if self.noise else []))


# Rows of the component ablation, from the single-reference baseline to the full method.
COMPONENT_ROWS = {
    "baseline": Ablation(False, False, False),
    "+memory_bank": Ablation(True, False, False),
    "+momentum": Ablation(True, True, False),
    "+noise": Ablation(True, True, True),
}
NEGATIVE_ROWS = [m.value for m in (NegativeMode.SUPPLEMENTARY_ONLY, NegativeMode.MAJOR_ONLY,
                                 NegativeMode.MAJOR_PLUS_GLOBAL, NegativeMode.MAJOR_PLUS_LOCAL)]


class StreamGenerator(Protocol):
    dim: int

    def sample_clip(self, rng: np.random.Generator, num_frames: int | None = None) -> Clip: ...


class EmbeddingHead:
    """Affine map ``x -> W x + b`` from raw features to instance embeddings."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, normalize: bool = False):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.normalize = normalize
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("weight rows and bias length differ")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng, scale: float = 0.1, normalize: bool = False):
        w = rng.uniform(-scale, scale, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim), normalize)

    @classmethod
    def identity(cls, dim: int) -> "EmbeddingHead":
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = x @ self.weight.T + self.bias
        if self.normalize:
            y = y / np.linalg.norm(y, axis=-1, keepdims=True)
        return y

    def backward(self, x, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Parameter gradients for a batch of inputs ``x`` and output gradients."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        if self.normalize:
            y = x @ self.weight.T + self.bias
            n = np.linalg.norm(y, axis=1, keepdims=True)
            u = y / n
            g = (g - np.sum(g * u, axis=1, keepdims=True) * u) / n
        return g.T @ x, g.sum(axis=0)

    def copy(self) -> "EmbeddingHead":
        return EmbeddingHead(self.weight.copy(), self.bias.copy(), self.normalize)

    def to_dict(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist(), "normalize": self.normalize}

    @classmethod
    def from_dict(cls, data: dict) -> "EmbeddingHead":
        return cls(np.asarray(data["weight"]), np.asarray(data["bias"]), bool(data.get("normalize", False)))


def total_loss(emb: float, config: TrainerConfig) -> float:
    """Weighted training objective; the segmentation terms are fixed at zero here."""
    l_cls = l_ce = l_dice = 0.0
    return (config.lambda_emb * emb + config.lambda_cls * l_cls
            + config.lambda_ce * l_ce + config.lambda_dice * l_dice)


@dataclass
class TrainResult:
    head: EmbeddingHead
    losses: list[float] = field(default_factory=list)
    cis_per_iter: list[int] = field(default_factory=list)
    noise_injections: int = 0

    def __iter__(self):
        # allows ``head, curve = train_consistent(...)``
        return iter((self.head, self.losses))


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "data", "noise", "background", "reference")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def assign_frame(frame: FrameObs, use_hungarian: bool = False) -> tuple[dict, list[int]]:
    """Map each GT id of the frame to one observation index; the rest is background.

    Without Hungarian matching the generator's labels are used directly.
    """
    fg = frame.foreground()
    if not use_hungarian:
        bg = [i for i, g in enumerate(frame.gt_ids) if g is None]
        return fg, bg
    if frame.masks is None:
        raise InvalidConfig("Hungarian assignment needs observation masks")
    gt_ids = list(fg)
    preds = [(frame.class_scores[i], frame.masks[i]) for i in range(len(frame))]
    gts = [(frame.class_labels[fg[g]], frame.masks[fg[g]]) for g in gt_ids]
    pairs = hungarian(cost_matrix(preds, gts)) if gts else []
    assigned = {gt_ids[col]: row for row, col in pairs}
    used = set(assigned.values())
    return assigned, [i for i in range(len(frame)) if i not in used]


def consistent_clip_items(clip: Clip, head: EmbeddingHead, config: TrainerConfig, ablation: Ablation,
                          rngs: dict) -> tuple[list[ContrastiveItem], list[np.ndarray], int]:
    """Items of one clip processed frame by frame against a memory bank.

    Returns the items, the raw input of each item's anchor and the number of noise injections.
    """
    bank = MemoryBank(momentum=ablation.momentum)
    noise_prob = config.noise_prob if ablation.noise else 0.0
    items, inputs = [], []
    injections = 0
    for t, frame in enumerate(clip.frames):
        emb = head(frame.features)
        fg, bg = assign_frame(frame, config.use_hungarian)
        present = {g: emb[i] for g, i in fg.items()}
        if t > 0:
            for ci in build_cis(bank, present, t, config.negative_mode):
                items.append(ci)
                inputs.append(frame.features[fg[ci.key]])
        for g in present:
            if g not in bank:
                bank.new_track(g)
        disappeared = [g for g in bank.track_ids() if g not in present]
        report = bank.noisy_training_update(t, present, disappeared, noise_prob, rngs["noise"])
        injections += len(report)
        bank.add_background(t, [emb[i] for i in bg], rngs["background"], config.background_cap)
    return items, inputs, injections


def baseline_clip_items(clip: Clip, head: EmbeddingHead, config: TrainerConfig,
                        rngs: dict) -> tuple[list[ContrastiveItem], list[np.ndarray]]:
    """Key/reference items: a key frame contrasted against earlier reference frame(s).

    Each reference frame acts as a one-frame bank of instantaneous embeddings.
    """
    n = len(clip.frames)
    rng = rngs["reference"]
    key = int(rng.integers(1, n))
    n_ref = min(config.references, key)
    refs = sorted(rng.choice(key, size=n_ref, replace=False).tolist())
    key_frame = clip.frames[key]
    key_emb = head(key_frame.features)
    key_fg, _ = assign_frame(key_frame, config.use_hungarian)
    key_present = {g: key_emb[i] for g, i in key_fg.items()}
    items, inputs = [], []
    for r in refs:
        ref_frame = clip.frames[r]
        ref_emb = head(ref_frame.features)
        ref_fg, ref_bg = assign_frame(ref_frame, config.use_hungarian)
        bank = MemoryBank(momentum=False)
        for g, i in ref_fg.items():
            bank.new_track(g)
            bank.append_observation(g, key - 1, ref_emb[i])
        bank.add_background(key - 1, [ref_emb[i] for i in ref_bg], rngs["background"], config.background_cap)
        for ci in build_cis(bank, key_present, key, config.negative_mode):
            items.append(ci)
            inputs.append(key_frame.features[key_fg[ci.key]])
    return items, inputs


def _step(head: EmbeddingHead, items, inputs, config: TrainerConfig) -> float:
    if not items:
        return 0.0
    losses, grads = [], []
    for ci in items:
        lg = emb_loss_grad(ci)
        losses.append(lg.loss)
        grads.append(lg.anchor)
    mean = float(np.mean(losses))
    scale = config.lambda_emb / len(items)
    gw, gb = head.backward(np.stack(inputs), np.stack(grads))
    head.weight -= config.lr * scale * gw
    head.bias -= config.lr * scale * gb
    return mean


def _train(config: TrainerConfig, stream: StreamGenerator, ablation: Ablation | None) -> TrainResult:
    rngs = _rngs(config.seed)
    head = EmbeddingHead.init(stream.dim, config.embed_dim, rngs["init"], config.init_scale, config.normalize)
    result = TrainResult(head=head)
    for it in range(config.iterations):
        clip = stream.sample_clip(rngs["data"], config.clip_length)
        # overflow is caught by the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            if ablation is not None and ablation.memory_bank:
                items, inputs, inj = consistent_clip_items(clip, head, config, ablation, rngs)
                result.noise_injections += inj
            else:
                items, inputs = baseline_clip_items(clip, head, config, rngs)
            emb = _step(head, items, inputs, config)
        loss = total_loss(emb, config)
        if not (np.isfinite(loss) and np.all(np.isfinite(head.weight)) and np.all(np.isfinite(head.bias))):
            raise DivergenceError(f"non-finite loss or parameters at iteration {it}")
        result.losses.append(loss)
        result.cis_per_iter.append(len(items))
    return result


def train_consistent(config: TrainerConfig, stream: StreamGenerator, ablation: Ablation = Ablation()) -> TrainResult:
    """Memory-bank training; with the memory bank disabled this is :func:`train_baseline`."""
    return _train(config, stream, ablation if ablation.memory_bank else None)


def train_baseline(config: TrainerConfig, stream: StreamGenerator) -> TrainResult:
    return _train(config, stream, None)


def clip_loss(head: EmbeddingHead, clip: Clip, config: TrainerConfig, ablation: Ablation | None,
              seed: int = 0) -> float:
    """Mean item loss of ``clip`` under ``head`` without updating anything."""
    rngs = _rngs(seed)
    if ablation is not None and ablation.memory_bank:
        items, _, _ = consistent_clip_items(clip, head, config, ablation, rngs)
    else:
        items, _ = baseline_clip_items(clip, head, config, rngs)
    if not items:
        return 0.0
    return float(np.mean([emb_loss_grad(ci).loss for ci in items]))


# -- run directory -----------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_run(run_dir, config: TrainerConfig, result: TrainResult, metrics: dict | None = None,
             extra: dict | None = None) -> Path:
    """Write config snapshot, loss curve, head parameters and metrics into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = asdict(config)
    if extra:
        cfg = {**cfg, **extra}
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    with open(run_dir / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(result.losses):
            w.writerow([i, repr(float(v))])
    (run_dir / "head.json").write_text(json.dumps(result.head.to_dict()))
    (run_dir / "metrics.json").write_text(json.dumps(metrics or {}, indent=2, sort_keys=True))
    manifest = {"engine_version": __version__, "config_hash": config_hash(cfg), "seed": config.seed}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return run_dir


def load_head(run_dir) -> EmbeddingHead:
    return EmbeddingHead.from_dict(json.loads((Path(run_dir) / "head.json").read_text()))
