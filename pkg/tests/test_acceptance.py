"""Acceptance gate: one test, and one summary line, per primary criterion."""
import itertools
import json
import time

import numpy as np
import pytest

from ctvis_engine.association import bi_softmax_matrix
from ctvis_engine.assignment import hungarian
from ctvis_engine.benchmark import default_stream, make_benchmark, run_cell
from ctvis_engine.cli import main
from ctvis_engine.contrastive import ContrastiveItem, emb_loss_grad
from ctvis_engine.memory_bank import MemoryBank, replay_ma
from ctvis_engine.metrics import EvalReport, TrackPrediction, tube_iou, vis_ap
from ctvis_engine.pseudo_video import AugmentConfig, make_pseudo_video
from ctvis_engine.trainer import COMPONENT_ROWS, Ablation, TrainerConfig

from conftest import rect_mask

SEEDS = 20
GRID = {
    **{name: (ab, {}) for name, ab in COMPONENT_ROWS.items()},
    "supplementary_only": (Ablation(), {"negative_mode": "supplementary_only"}),
    "major_only": (Ablation(), {"negative_mode": "major_only"}),
    "major_plus_global": (Ablation(), {"negative_mode": "major_plus_global"}),
    "clip2": (Ablation(), {"clip_length": 2}),
}
# the full configuration already uses local supplementary negatives
ALIASES = {"major_plus_local": "+noise"}


@pytest.fixture(scope="session")
def grid():
    stream = default_stream()
    results = {name: [] for name in GRID}
    seconds = {name: 0.0 for name in GRID}
    for seed in range(SEEDS):
        bench = make_benchmark(stream, seed)
        for name, (ablation, overrides) in GRID.items():
            t0 = time.perf_counter()
            results[name].append(run_cell(name, TrainerConfig(seed=seed, **overrides), ablation, stream, bench))
            seconds[name] += time.perf_counter() - t0
    for alias, source in ALIASES.items():
        results[alias] = results[source]
        seconds[alias] = 0.0
    return results, seconds


def mean(results, name, field="assoc_accuracy"):
    return float(np.mean([getattr(r, field) for r in results[name]]))


def test_numerical_core(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    replay_ok = beta_ok = True
    for _ in range(10_000):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        embs = rng.normal(size=(n, d))
        bank = MemoryBank()
        bank.new_track(0)
        betas = [bank.append_observation(0, t, e) for t, e in enumerate(embs)]
        beta_ok &= all(0.0 <= b <= 1.0 for b in betas)
        replay_ok &= np.array_equal(replay_ma(embs), bank.tracks[0].ma_embedding)

    worst_stoch = 0.0
    for _ in range(1000):
        n, m, c = (int(x) for x in rng.integers(1, 10, size=3))
        D, E = rng.normal(size=(n, c)) * 2, rng.normal(size=(m, c)) * 2
        logits = D @ E.T
        f = bi_softmax_matrix(D, E)
        row = np.exp(logits - logits.max(1, keepdims=True))
        row /= row.sum(1, keepdims=True)
        col = 2 * f - row  # the second half, recovered from f
        worst_stoch = max(worst_stoch, np.abs(row.sum(1) - 1).max(), np.abs(col.sum(0) - 1).max())

    worst_grad = 0.0
    h = 1e-5
    for _ in range(100):
        dim, k = int(rng.integers(8, 65)), int(rng.integers(1, 9))
        v, kp, kn = rng.normal(size=dim) * 0.5, rng.normal(size=dim) * 0.5, rng.normal(size=(k, dim)) * 0.5
        loss = lambda a: float(np.log1p(np.exp(kn @ a - kp @ a).sum()))
        fd = np.array([(loss(v + h * e) - loss(v - h * e)) / (2 * h) for e in np.eye(dim)])
        g = emb_loss_grad(ContrastiveItem.from_vectors(v, kp, kn)).anchor
        worst_grad = max(worst_grad, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - t0

    ok = replay_ok and beta_ok and worst_stoch <= 1e-9 and worst_grad <= 1e-6 and elapsed < 30
    acceptance_log("numerical core", ok, f"stoch={worst_stoch:.1e} grad_rel={worst_grad:.1e} t={elapsed:.1f}s")
    assert replay_ok and beta_ok
    assert worst_stoch <= 1e-9
    assert worst_grad <= 1e-6
    assert elapsed < 30


def test_assignment_oracle(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    mismatches = 0
    for n in range(2, 8):
        perms = np.array(list(itertools.permutations(range(n))))
        cols = np.arange(n)
        for _ in range(1000):
            c = rng.random((n, n))
            best = c[perms, cols].sum(1).min()
            got = sum(c[r, j] for r, j in hungarian(c))
            mismatches += abs(got - best) > 1e-9
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    acceptance_log("assignment oracle", ok, f"mismatches={mismatches} t={elapsed:.1f}s")
    assert mismatches == 0
    assert elapsed < 60


def test_component_ablation(grid, acceptance_log):
    results, seconds = grid
    acc = {k: mean(results, k) for k in COMPONENT_ROWS}
    reid = {k: mean(results, k, "reid_assoc_accuracy") for k in COMPONENT_ROWS}
    idsw = {k: mean(results, k, "id_switches") for k in COMPONENT_ROWS}
    elapsed = sum(seconds[k] for k in COMPONENT_ROWS)
    checks = {
        "baseline<=+memory_bank": acc["baseline"] <= acc["+memory_bank"],
        "+memory_bank<=+momentum": acc["+memory_bank"] <= acc["+momentum"],
        "reid:+noise>=+momentum": reid["+noise"] >= reid["+momentum"],
        "full-baseline>=0.03": acc["+noise"] - acc["baseline"] >= 0.03,
        "fewer_idsw": idsw["+noise"] < idsw["baseline"],
        "runtime<15min": elapsed < 900,
    }
    detail = (" ".join(f"{k}={v:.4f}" for k, v in acc.items())
              + f" reid(+momentum)={reid['+momentum']:.4f} reid(+noise)={reid['+noise']:.4f}"
              + " failed=" + ",".join(k for k, v in checks.items() if not v))
    acceptance_log("component ablation ordering", all(checks.values()), detail)
    assert all(checks.values()), detail


def test_negative_sampling_ablation(grid, acceptance_log):
    results, seconds = grid
    order = ["supplementary_only", "major_only", "major_plus_global", "major_plus_local"]
    acc = [mean(results, k) for k in order]
    ok = acc[0] < acc[1] < acc[2] <= acc[3]
    elapsed = sum(seconds[k] for k in order)
    detail = " ".join(f"{k}={a:.4f}" for k, a in zip(order, acc))
    acceptance_log("negative sampling ordering", ok and elapsed < 900, detail)
    assert ok, detail
    assert elapsed < 900


def test_long_clip_benefit(grid, acceptance_log):
    results, _ = grid
    long_, short = mean(results, "+noise"), mean(results, "clip2")
    acceptance_log("clip length 8 >= 2", long_ >= short, f"clip8={long_:.4f} clip2={short:.4f}")
    assert long_ >= short


def test_pseudo_video_invariants_and_metric_fixtures(acceptance_log):
    problems = 0
    for seed in range(1000):
        cfg = AugmentConfig(num_frames=4, width=32, height=32)
        video = make_pseudo_video(np.random.default_rng(seed), cfg)
        classes = {}
        for fr in video.frames:
            cover = np.zeros((32, 32), dtype=np.int32)
            for inst in fr.instances:
                cover += inst.mask
                problems += classes.setdefault(inst.instance_id, inst.class_label) != inst.class_label
            problems += cover.max(initial=0) > 1
        if seed % 50 == 0:
            again = make_pseudo_video(np.random.default_rng(seed), cfg)
            same = all(a.ids() == b.ids() and all(np.array_equal(x.mask, y.mask)
                                                   for x, y in zip(a.instances, b.instances))
                       for a, b in zip(video.frames, again.frames))
            problems += not same

    p = TrackPrediction(0, {t: rect_mask(20, 20, 2, 2, 10, 10) for t in range(3)})
    g = TrackPrediction(1, {t: rect_mask(20, 20, 2, 6, 10, 14) for t in range(3)})
    iou_err = abs(tube_iou(p, g) - 1 / 3)

    ma, mb, mc = (rect_mask(16, 16, *r) for r in [(0, 0, 4, 4), (6, 6, 10, 10), (12, 12, 16, 16)])
    gts = [TrackPrediction(k, {0: m}, category=c) for k, (m, c) in enumerate([(ma, 0), (mb, 1), (mc, 0)])]
    preds = [TrackPrediction(k, {0: m}, np.array(s)) for k, (m, s) in
             enumerate([(ma, [0.9, 0.1]), (mb, [0.8, 0.2]), (mc, [0.7, 0.3])])]
    ap_err = abs(vis_ap(preds, gts)["ap"] - (51 + 50 * 2 / 3) / 101 / 2)

    ok = problems == 0 and iou_err <= 1e-9 and ap_err <= 1e-9
    acceptance_log("pseudo-video invariants + metric fixtures", ok,
                   f"violations={problems} tube_iou_err={iou_err:.1e} ap_err={ap_err:.1e}")
    assert ok


def test_cli_end_to_end(tmp_path, acceptance_log, capsys):
    t0 = time.perf_counter()
    codes = [
        main(["--out", str(tmp_path / "data"), "--seed", "0", "generate", "--set", "count=5"]),
        main(["--out", str(tmp_path / "run"), "train", "--data", str(tmp_path / "data")]),
        main(["--out", str(tmp_path / "tracks"), "track", "--run", str(tmp_path / "run"),
              "--data", str(tmp_path / "data")]),
        main(["--out", str(tmp_path / "eval"), "eval", "--tracks", str(tmp_path / "tracks")]),
    ]
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    fields = set(EvalReport().to_dict())
    rebuilt = EvalReport(**{k: (float("nan") if v is None else v) for k, v in report.items()})
    ok = codes == [0, 0, 0, 0] and set(report) == fields and elapsed < 120
    acceptance_log("CLI generate->train->track->eval", ok,
                   f"codes={codes} t={elapsed:.1f}s ap={rebuilt.ap:.3f} acc={rebuilt.assoc_accuracy:.3f}")
    assert ok
