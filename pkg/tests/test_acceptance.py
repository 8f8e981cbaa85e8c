"""Acceptance suite: one or more tests per criterion, summarised as PASS/FAIL lines at session end.

Criteria 8 and 9 train six desk-scale models end to end and take tens of
minutes on one CPU core.
"""

import json
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from blobsense import synth
from blobsense.annotation import Annotation
from blobsense.cli import run
from blobsense.froc import froc_curve, read_curve
from blobsense.loss import LossConfig, ReferenceBank, center_of_mass, select_reference, total_loss
from blobsense.peaks import PeakParams, find_peaks
from blobsense.pipeline import read_ablation
from blobsense.tensor import (
    Tensor,
    add,
    conv2d,
    downsample2,
    grad_check,
    relu,
    scale,
    sigmoid,
    sub,
    sum_squares,
    upsample2,
    window,
)
from helpers import FIXTURE_ANNOTATIONS, FIXTURE_EXPECTED, fixture_heatmaps
from test_peaks import brute_force_peaks, random_heatmap
from test_tensor import kink_free_pool_input

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = range(20)
STEP = 1e-3
BANK = (1.5, 3.0, 6.0)
P = 33


def blob(shape, center, sigma, amp=1.0, support=None):
    rows = np.arange(shape[0])[:, None]
    cols = np.arange(shape[1])[None, :]
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    out = amp * np.exp(-d2 / (2 * sigma ** 2))
    if support is not None:
        out[d2 > support ** 2] = 0.0
    return out


def centred_box(r, c, half=4, label="malignant"):
    return Annotation((r - half, c - half, r + half, c + half), label)


# ---------------------------------------------------------------------------
# 1. gradient integrity
# ---------------------------------------------------------------------------


def _op_cases(rng):
    """(name, scalar function of one float64 tensor, input) for every differentiable op."""
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    other = rng.standard_normal((2, 6, 6))
    nonzero = rng.standard_normal((2, 6, 6))
    nonzero[np.abs(nonzero) < 10 * STEP] = 0.5
    mask = (rng.random((2, 6, 6)) > 0.3).astype(np.float64)
    return [
        ("conv2d/input", lambda t: sum_squares(conv2d(t, Tensor(w), Tensor(b))), x),
        ("conv2d/weight", lambda t: sum_squares(conv2d(Tensor(x), t, Tensor(b))), w),
        ("conv2d/bias", lambda t: sum_squares(conv2d(Tensor(x), Tensor(w), t)), b),
        ("downsample2/max", lambda t: sum_squares(downsample2(t, "max")), kink_free_pool_input(rng, (2, 6, 6))),
        ("downsample2/mean", lambda t: sum_squares(downsample2(t, "mean")), x),
        ("upsample2", lambda t: sum_squares(upsample2(t)), rng.standard_normal((2, 3, 3))),
        ("relu", lambda t: sum_squares(relu(t)), nonzero),
        ("sigmoid", lambda t: sum_squares(sigmoid(t)), x * 3),
        ("add", lambda t: sum_squares(add(t, Tensor(other))), x),
        ("sub", lambda t: sum_squares(sub(t, Tensor(other))), x),
        ("sub/constant", lambda t: sum_squares(sub(t, other)), x),
        ("scale", lambda t: sum_squares(scale(t, 0.37)), x),
        ("window", lambda t: sum_squares(window(t, -2, 3, 5, 5)), rng.standard_normal((1, 6, 6))),
        ("sum_squares/masked", lambda t: sum_squares(t, mask), x),
    ]


def test_c1_gradient_integrity(criterion):
    start = time.perf_counter()
    worst = {}
    for seed in SEEDS:
        for name, fn, x in _op_cases(np.random.default_rng(seed)):
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, x, STEP))
        rng = np.random.default_rng(1000 + seed)
        O = rng.random((1, P, P)) * 0.5
        O[0] += blob((P, P), (16 + rng.integers(-3, 4), 16 + rng.integers(-3, 4)), 3.0, 0.5)
        anns = [centred_box(16, 16)]
        cfg = LossConfig()
        frozen = total_loss(Tensor(O), anns, cfg)
        err = grad_check(lambda t: total_loss(t, anns, cfg, frozen.targets, frozen.mask).tensor, O, STEP)
        worst["total_loss/33x33"] = max(worst.get("total_loss/33x33", 0.0), err)
    seconds = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    criterion(1, f"{len(worst)} ops x {len(SEEDS)} seeds, worst {name} rel err {err:.2e}, {seconds:.0f}s")
    assert err < 1e-3
    assert seconds < 120


# ---------------------------------------------------------------------------
# 2, 3. recentring and size selection
# ---------------------------------------------------------------------------


def _interior_offsets(sigma):
    """Integer blob centres whose +/-3 sigma support lies inside the 33x33 patch."""
    lo, hi = math.ceil(3 * sigma), math.floor(P - 1 - 3 * sigma)
    return [(r, c) for r in range(lo, hi + 1) for c in range(lo, hi + 1)]


def _detection_loss_at(center, sigma):
    O = blob((P, P), center, sigma)[None].astype(np.float32)
    return total_loss(O, [centred_box(16, 16)], LossConfig(omega=0.0)).l_det


def _sweep(sigma):
    offsets = _interior_offsets(sigma)
    if not offsets:
        # +/-3 sigma exceeds the half patch; the centred blob is the only admissible placement
        offsets = [(16, 16)]
    return offsets, max(_detection_loss_at(o, sigma) for o in offsets)


def test_c2_recentring_exhaustive_sweep(criterion):
    start = time.perf_counter()
    details, worst = [], 0.0
    for sigma in (1.5, 3.0):
        offsets, err = _sweep(sigma)
        details.append(f"sigma {sigma}: {len(offsets)} offsets, max L_DET {err:.1e}")
        worst = max(worst, err)
    seconds = time.perf_counter() - start
    criterion(2, ", ".join(details) + f", {seconds:.0f}s")
    assert worst < 1e-3
    assert seconds < 60


def test_c3_every_bank_width(criterion):
    details, worst = [], 0.0
    for sigma in BANK:
        offsets, err = _sweep(sigma)
        where = f"{len(offsets)} offsets" if _interior_offsets(sigma) else "centred only (3 sigma > half patch)"
        details.append(f"sigma {sigma}: {where}, max L_DET {err:.1e}")
        worst = max(worst, err)
    criterion(3, "; ".join(details))
    assert worst < 1e-3


def test_c3_noisy_selection(criterion):
    bank = ReferenceBank(BANK)
    rng = np.random.default_rng(0)
    correct = Counter()
    for idx, sigma in enumerate(BANK):
        offsets = _interior_offsets(sigma) or [(16, 16)]
        for _ in range(100):
            center = offsets[int(rng.integers(len(offsets)))]
            patch = blob((P, P), center, sigma) + rng.uniform(-0.05, 0.05, (P, P))
            _, chosen = select_reference(patch, center_of_mass(patch), bank)
            correct[sigma] += chosen == idx
    criterion(3, "noisy selection " + ", ".join(f"sigma {s}: {correct[s]}/100" for s in BANK))
    assert all(correct[s] == 100 for s in BANK)


# ---------------------------------------------------------------------------
# 4. top-k forgiveness
# ---------------------------------------------------------------------------


def _with_spurious(n):
    size = 160
    O = blob((size, size), (20, 20), 3.0, support=10)
    for i, (r, c) in enumerate([(20, 80), (20, 140), (80, 20), (80, 80)][:n]):
        O = np.maximum(O, blob((size, size), (r, c), 3.0, amp=0.9 - 0.1 * i, support=10))
    return O[None], [centred_box(20, 20)]


def test_c4_top_k_forgiveness(criterion):
    cfg = LossConfig(k=3)
    values = {}
    for n in (1, 2, 3, 4):
        O, anns = _with_spurious(n)
        values[n] = total_loss(O, anns, cfg).l_bg
    criterion(4, "L_BG by spurious count " + ", ".join(f"{n}: {v:.3g}" for n, v in values.items()))
    assert values[1] == values[2] == values[3] == 0.0
    assert values[4] > 0.0


# ---------------------------------------------------------------------------
# 5. asymmetric weighting
# ---------------------------------------------------------------------------


def test_c5_weighting(criterion):
    anns = [centred_box(20, 20), centred_box(44, 30, 3, "high_risk"), centred_box(10, 50, 3, "benign")]
    exact = True
    for seed in range(20):
        O = (np.random.default_rng(seed).random((1, 64, 64)) * 0.6).astype(np.float32)
        for omega in (0.0, 0.01, 0.25, 1.0):
            bd = total_loss(O, anns, LossConfig(omega=omega))
            exact &= np.float32(bd.total) == np.float32(bd.l_det) + np.float32(omega) * np.float32(bd.l_bg)

    cfg = LossConfig(omega=0.01, k=3)
    shape = (96, 96)
    ann = [centred_box(48, 48)]
    missed = total_loss(np.zeros((1,) + shape), ann, cfg).total
    found = blob(shape, (48, 48), 3.0, support=10)
    fps = [(12, 12), (12, 84), (84, 12), (84, 84)]
    with_k = np.maximum.reduce([found] + [blob(shape, c, 3.0, 0.8, support=10) for c in fps[:3]])
    with_extra = np.maximum(with_k, blob(shape, fps[3], 3.0, 0.8, support=10))
    extra_fp = total_loss(with_extra[None], ann, cfg).total - total_loss(with_k[None], ann, cfg).total
    criterion(5, f"identity bit-exact={exact}; missed finding {missed:.3f} vs one extra FP {extra_fp:.3f}")
    assert exact
    assert missed > extra_fp > 0


# ---------------------------------------------------------------------------
# 6. peak finder
# ---------------------------------------------------------------------------


def test_c6_peak_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(200):
        a = random_heatmap(rng)
        for w in (3, 5):
            for tau in (0.0, 0.3, 0.7):
                got = [(p.row, p.col, p.confidence) for p in find_peaks(a, PeakParams(tau, w))]
                mismatches += got != brute_force_peaks(a, tau, w)
    subset_ok = 0
    for _ in range(50):
        a = random_heatmap(rng)
        w = int(rng.choice([3, 5, 7]))
        taus = np.sort(rng.random(8))
        sets = [set(find_peaks(a, PeakParams(float(t), w))) for t in taus]
        subset_ok += all(hi <= lo for lo, hi in zip(sets, sets[1:]))
    seconds = time.perf_counter() - start
    criterion(6, f"1200 oracle comparisons, {mismatches} mismatches; {subset_ok}/50 monotone sweeps, {seconds:.0f}s")
    assert mismatches == 0 and subset_ok == 50
    assert seconds < 60


# ---------------------------------------------------------------------------
# 7. FROC hand fixture
# ---------------------------------------------------------------------------


def test_c7_froc_fixture(criterion):
    taus = sorted(FIXTURE_EXPECTED)
    curve = froc_curve(fixture_heatmaps(), FIXTURE_ANNOTATIONS, taus)
    got = {p.threshold: (p.sensitivity, p.fpi) for p in curve}
    criterion(7, f"{len(taus)} thresholds")
    assert got == FIXTURE_EXPECTED


# ---------------------------------------------------------------------------
# 8, 9, 10. end-to-end on a generated dataset
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "data"
    assert run(["gen", "--config", str(CONFIGS / "acceptance_gen.json"), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def ablation(dataset):
    out = dataset.parent / "ablation"
    start = time.perf_counter()
    assert run(["ablate", "--data", str(dataset), "--config", str(CONFIGS / "acceptance_train.json"),
                "--out", str(out)]) == 0
    rows = {r.variant: r for r in read_ablation(out / "ablation.csv")}
    return out, rows, time.perf_counter() - start


def _summary(rows):
    return ", ".join(f"{v} {r.max_sensitivity:.3f}@{r.fpi_at_max:.2f}" for v, r in rows.items())


@pytest.mark.slow
def test_c8_end_to_end_ordering(criterion, ablation):
    out, rows, seconds = ablation
    cfg = json.loads((CONFIGS / "acceptance_train.json").read_text())
    epochs = cfg.get("phase1_epochs", 0) + cfg.get("epochs", 0)
    full = rows["full"].max_sensitivity
    others = [v for v in rows if v not in ("full", "l2-baseline")]
    criterion(8, f"{_summary(rows)}; {epochs} epochs, {seconds / 60:.1f} min")
    assert len(rows) == 6
    assert epochs <= 10
    assert full >= 0.90, "full-loss sensitivity at FPI <= 5"
    assert full > rows["l2-baseline"].max_sensitivity
    assert all(full >= rows[v].max_sensitivity for v in others)
    assert seconds < 3600


@pytest.mark.slow
def test_c9_determinism_and_resume(criterion, dataset, ablation):
    out, _, _ = ablation
    rerun = dataset.parent / "rerun"
    rerun.mkdir()
    cfg = str(CONFIGS / "acceptance_train.json")
    assert run(["train", "--data", str(dataset), "--config", cfg, "--out", str(rerun / "model.ckpt"),
                "--checkpoint-dir", str(rerun / "epochs")]) == 0
    assert run(["eval", "--data", str(dataset), "--ckpt", str(rerun / "model.ckpt"),
                "--out", str(rerun / "froc.csv")]) == 0
    same_ckpt = (rerun / "model.ckpt").read_bytes() == (out / "model_full.ckpt").read_bytes()
    same_csv = (rerun / "froc.csv").read_bytes() == (out / "froc_full.csv").read_bytes()

    settings = json.loads(Path(cfg).read_text())
    mid = rerun / "epochs" / f"phase2_epoch{max(1, settings['epochs'] // 2):03d}.ckpt"
    assert run(["train", "--data", str(dataset), "--config", cfg, "--resume", str(mid),
                "--out", str(rerun / "resumed.ckpt")]) == 0
    resumed = (rerun / "resumed.ckpt").read_bytes() == (rerun / "model.ckpt").read_bytes()
    criterion(9, f"checkpoint identical={same_ckpt}, curve identical={same_csv}, resume from {mid.name} identical={resumed}")
    assert same_ckpt and same_csv and resumed
    assert read_curve(rerun / "froc.csv") == read_curve(out / "froc_full.csv")


def test_c10_dataset_statistics(criterion, dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    incidence = manifest["config"]["incidence"]
    worst = 0.0
    for split, n in manifest["config"]["n_images"].items():
        if n == 0:
            continue
        counts = Counter(r.stratum for r in synth.load(dataset, split))
        assert counts == {k: v for k, v in manifest["summary"][split]["images"].items() if v}
        for stratum, p in incidence.items():
            sd = math.sqrt(n * p * (1 - p))
            worst = max(worst, abs(counts[stratum] - n * p) / sd)

    records = synth.load(dataset, "train")
    strata = [r.stratum for r in records]
    sampler = synth.stratified_sampler(records, seed=0)
    draws = Counter(strata[next(sampler)] for _ in range(8000))
    sd = math.sqrt(8000 * 0.25 * 0.75)
    sampler_worst = max(abs(draws[s] - 2000) / sd for s in synth.STRATA)
    criterion(10, f"class counts worst |z| {worst:.2f}; sampler draws {dict(draws)} worst |z| {sampler_worst:.2f}")
    assert worst <= 3.0
    assert sampler_worst <= 3.0
