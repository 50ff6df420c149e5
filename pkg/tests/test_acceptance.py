"""Acceptance criteria, one test per criterion, each recording a PASS/FAIL line.

Sub-checks that must never regress are plain asserts. A criterion that is
measured faithfully but not met records FAIL and ends as an xfail, with the
analysis kept in the decisions ledger.
"""

import itertools
import json
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from swinmamba import fft
from swinmamba import tensor as T
from swinmamba.bam import BAM, MixerConfig, bidirectional_aggregate
from swinmamba.gradcheck import run_suite
from swinmamba.metrics import betti0_error, cldice, count_components, dice, skeletonize
from swinmamba.network import ModelConfig, build_model
from swinmamba.sffu import CBAMAttention, fuse
from swinmamba.swtoken import TokenizerConfig, anchor_grid, extend_anchors, sample_windows
from swinmamba.tensor import Tensor
from swinmamba.trainer import TrainConfig, load_checkpoint, load_training_state, save_checkpoint, train
from swinmamba.data import VesselGenParams, make_split

from oracles import (brute_cldice, brute_dice, direct_anchors, flood_fill_components, literal_aggregate,
                     literal_fuse, naive_windows, numpy_mixer, zhang_suen_literal)

ROOT = Path(__file__).resolve().parents[1]
ABLATION = Path(os.environ.get("SWINMAMBA_ABLATION", ROOT / "results" / "ablation.json"))
REDUCED = ROOT / "results" / "ablation_reduced.json"
ABLATION_PROTOCOL = dict(size=64, n_train=200, n_test=50, epochs=50, lr=1e-4, batch_size=1, data_seed=0)
TRANSFORMS = {"fliplr": np.fliplr, "flipud": np.flipud, "rot90": np.rot90, "rot180": lambda a: np.rot90(a, 2),
              "rot270": lambda a: np.rot90(a, 3)}


def ref_mixer(mixer):
    p = {k: v.data for k, v in mixer.params.items()}
    cfg = mixer.config
    return lambda seq: numpy_mixer(p, seq, cfg.conv_width, mixer.dt_rank, cfg.state_dim)


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_suite(acceptance):
    t0 = time.perf_counter()
    errors = run_suite(points=20)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    required = {"bilinear_sample", "swtoken_input", "swtoken_params", "bam_input", "bam_params",
                "sffu_input", "sffu_params", "loss"}
    ok = required <= set(errors) and errors[worst] < 1e-4 and elapsed < 120
    acceptance(1, ok, f"{len(errors)} checks x 20 points, worst {worst} {errors[worst]:.2e} < 1e-4, "
                      f"{elapsed:.0f}s < 120s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_block_oracles(acceptance):
    rng = np.random.default_rng(2)
    worst_agg = 0.0
    for _ in range(10):
        bam = BAM(2, MixerConfig(state_dim=3), rng)
        tokens = rng.normal(size=(3, 3, 4, 2))  # cells, L=3, s*s=4, C=2
        out = bam(Tensor(tokens)).data
        for i in range(3):
            want = literal_aggregate(list(tokens[i]), ref_mixer(bam.fwd), ref_mixer(bam.bwd))
            worst_agg = max(worst_agg, float(np.abs(out[i] - want).max()))

    anchors_exact = True
    for orientation in ("x", "y"):
        cfg = TokenizerConfig(orientation=orientation)
        for _ in range(50):
            deltas = rng.integers(-63, 64, cfg.L) / 64  # dyadic, so every partial sum is exact
            center = tuple(float(v) for v in cfg.s * rng.integers(0, 8, 2))
            got = extend_anchors(np.array([center]), Tensor(deltas.reshape(cfg.L, 1, 1)), cfg).coords.data[0]
            want = direct_anchors(center, [Fraction(d) for d in deltas], Fraction(cfg.alpha), orientation)
            anchors_exact &= all(Fraction(gx) == wx and Fraction(gy) == wy
                                 for (gx, gy), (wx, wy) in zip(got, want))

    worst_win = 0.0
    cfg = TokenizerConfig(L=5, s=4, alpha=2.0)
    for _ in range(5):
        F = rng.normal(size=(3, 8, 8))
        strings = extend_anchors(anchor_grid(8, 8, cfg), Tensor(rng.uniform(-1, 1, (5, 2, 2))), cfg)
        got = sample_windows(Tensor(F), strings, cfg).tokens.data
        for i in range(len(strings)):
            want = naive_windows(F, [tuple(p) for p in strings.coords.data[i]], 4)
            worst_win = max(worst_win, float(np.abs(got[i] - want).max()))

    worst_fuse = 0.0
    for _ in range(10):
        attn = CBAMAttention(4, rng)
        F_spa, F_fre = rng.normal(size=(2, 4, 8, 8))
        got = fuse(Tensor(F_spa), Tensor(F_fre), attn.params, 4).data
        want = literal_fuse(F_spa, F_fre, {k: v.data for k, v in attn.params.items()}, 4)
        worst_fuse = max(worst_fuse, float(np.abs(got - want).max()))

    ok = worst_agg <= 1e-9 and anchors_exact and worst_win <= 1e-12 and worst_fuse <= 1e-12
    acceptance(2, ok, f"aggregate {worst_agg:.1e} <= 1e-9, anchors exact={anchors_exact}, "
                      f"windows {worst_win:.1e} <= 1e-12, fuse {worst_fuse:.1e} <= 1e-12")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_structural_invariants(acceptance):
    rng = np.random.default_rng(3)
    tokens = rng.normal(size=(4, 9, 64, 3))
    identity = bidirectional_aggregate(Tensor(tokens), lambda s: s, lambda s: s).data
    doubles = np.array_equal(identity, 2 * tokens[:, 4])

    bam = BAM(3, MixerConfig(), rng)
    tokens = rng.normal(size=(1, 5, 4, 3))
    forward_only = lambda tk: bidirectional_aggregate(Tensor(tk), bam.fwd, lambda s: s * 0.0).data
    base = forward_only(tokens)
    causal = True
    for l, k in itertools.product((3, 4), range(4)):
        moved = tokens.copy()
        moved[0, l, k] += 1.0
        causal &= np.array_equal(forward_only(moved), base)
    moved = tokens.copy()
    moved[0, 0, 0] += 1.0
    causal &= not np.array_equal(forward_only(moved), base)  # earlier windows do reach the output

    cfg = TokenizerConfig()
    assert (cfg.L, cfg.s, cfg.alpha) == (9, 8, 2.0)
    straight = overlap = True
    for orientation in ("x", "y"):
        cfg = TokenizerConfig(orientation=orientation)
        strings = extend_anchors(np.array([[24.0, 24.0]]), Tensor(np.zeros((9, 1, 1))), cfg)
        a = strings.coords.data[0]
        along, lat = (0, 1) if orientation == "x" else (1, 0)
        straight &= bool(np.all(np.diff(a[:, along]) == cfg.alpha) and np.all(a[:, lat] == 24.0))
        coords = sample_windows(Tensor(np.zeros((1, 64, 64))), strings, cfg).coords.data[0]
        for l in range(cfg.L - 1):
            shared = {tuple(p) for p in coords[l]} & {tuple(p) for p in coords[l + 1]}
            overlap &= len(shared) == 6 * cfg.s  # s - alpha = 6 shared lines of s pixels

    attn = CBAMAttention(4, rng)
    F_spa, F_fre = rng.normal(size=(2, 4, 16, 16)) * 5
    out = fuse(Tensor(F_spa), Tensor(F_fre), attn.params, 8).data
    between = bool(np.all(out >= np.minimum(F_spa, F_fre)) and np.all(out <= np.maximum(F_spa, F_fre)))

    ok = doubles and causal and straight and overlap and between
    acceptance(3, ok, f"identity 2*T_c={doubles}, forward causal={causal}, straight spacing alpha={straight}, "
                      f"overlap 6={overlap}, fuse between inputs={between}")
    assert ok


# ---------------------------------------------------------------- 4

def metric_cases():
    rng = np.random.default_rng(4)
    pairs = [tuple(rng.integers(0, 2, (2, 8, 8)).astype(np.uint8)) for _ in range(1000)]
    masks3 = [np.array(bits, np.uint8).reshape(3, 3) for bits in itertools.product((0, 1), repeat=9)]
    partners = rng.integers(0, 512, 512)
    pairs += [(masks3[i], masks3[j]) for i, j in enumerate(partners)]
    return pairs


def test_criterion_4_metric_oracles(acceptance):
    pairs = metric_cases()
    for P, G in pairs:
        assert abs(dice(P, G) - brute_dice(P, G)) <= 1e-15
        assert count_components(P) == flood_fill_components(P)
        assert betti0_error(P, G) == abs(flood_fill_components(P) - flood_fill_components(G))
        assert abs(cldice(P, G) - brute_cldice(P, G, zhang_suen_literal)) <= 1e-12
        np.testing.assert_array_equal(skeletonize(P), zhang_suen_literal(P))

    broken = {"dice": 0, "betti0_error": 0, "cldice": 0}
    for P, G in pairs:
        for t in TRANSFORMS.values():
            tP, tG = t(P), t(G)
            broken["dice"] += dice(tP, tG) != dice(P, G)
            broken["betti0_error"] += betti0_error(tP, tG) != betti0_error(P, G)
            broken["cldice"] += cldice(tP, tG) != cldice(P, G)
    total = len(pairs) * len(TRANSFORMS)
    ok = not any(broken.values())
    acceptance(4, ok, f"{len(pairs)} pairs match brute force (clDice <= 1e-12, components exact); "
                      f"flip/rotation invariance broken in dice {broken['dice']}, "
                      f"betti0 {broken['betti0_error']}, cldice {broken['cldice']} of {total} cases")
    # dice and betti-0 invariance are hard requirements; thinning is scan-order dependent
    assert broken["dice"] == 0 and broken["betti0_error"] == 0
    if not ok:
        pytest.xfail(f"clDice changes under flips/rotations in {broken['cldice']}/{total} cases: "
                     "Zhang-Suen thinning is not rotation-equivariant (see decisions ledger)")


# ---------------------------------------------------------------- 5

def ablation_verdict(record: dict) -> tuple[bool, str]:
    runs = {(r["seed"], r["preset"]): r["final"] for r in record["runs"]}
    seeds = sorted(s for s in {s for s, _ in runs} if all((s, p) in runs for p in ("m1", "m2", "full")))
    if not seeds:
        return False, f"[{record['label']}] no seed has all three presets yet"
    m2_beats_m1 = sum(runs[s, "m2"]["betti0_error"] < runs[s, "m1"]["betti0_error"] for s in seeds)
    full_keeps = sum(runs[s, "full"]["cldice"] >= runs[s, "m2"]["cldice"] - 0.01 for s in seeds)
    minutes = record.get("total_seconds", float("nan")) / 60
    full = [runs[s, "full"] for s in seeds]
    ok = len(seeds) == 4 and m2_beats_m1 >= 3 and full_keeps >= 3 and minutes < 60
    detail = (f"[{record['label']}] m2 beta0 < m1 in {m2_beats_m1}/{len(seeds)} seeds (need 3), "
              f"full clDice >= m2 - 0.01 in {full_keeps}/{len(seeds)} (need 3), {minutes:.0f} min (target < 60); "
              f"full dice {np.mean([r['dice'] for r in full]):.3f}, "
              f"cldice {np.mean([r['cldice'] for r in full]):.3f}")
    return ok, detail


def test_criterion_5_ablation_directionality(acceptance):
    if not ABLATION.is_file():
        detail = f"no full-protocol results at {ABLATION.relative_to(ROOT)} (about 40 CPU-hours on this engine)"
        if REDUCED.is_file():
            detail += "; reduced run, not a verdict: " + ablation_verdict(json.loads(REDUCED.read_text()))[1]
        acceptance(5, False, detail)
        pytest.xfail("full ablation protocol not run: it needs about 40 CPU-hours against a 60 minute target")
    record = json.loads(ABLATION.read_text())
    if record["protocol"] != ABLATION_PROTOCOL:
        acceptance(5, False, f"results at {ABLATION} use protocol {record['protocol']}, not the required one")
        pytest.xfail("results file does not follow the required protocol")
    ok, detail = ablation_verdict(record)
    acceptance(5, ok, detail)
    if not ok:
        pytest.xfail("ablation directionality or runtime not met (see decisions ledger)")


# ---------------------------------------------------------------- 6

SMALL = dict(stages=2, base_channels=4, L=3, s=4, input_size=16)


def test_criterion_6_persistence_and_determinism(acceptance, tmp_path):
    rng = np.random.default_rng(6)
    model = build_model(ModelConfig.from_preset("full", **SMALL))
    save_checkpoint(model, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    model_bytes = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    tr, te = make_split(2, 1, seed=6, params=VesselGenParams(size=16, trees=1, steps=12))
    mc = ModelConfig.from_preset("full", **SMALL)
    logs = []
    for run in ("x", "y"):
        (tmp_path / run).mkdir()
        tc = TrainConfig(epochs=2, eval_interval=1, dtype="float64", checkpoint_path=str(tmp_path / run / "m.ckpt"),
                         log_path=str(tmp_path / run / "log.txt"))
        train(tc, mc, tr, te)
        logs.append((tmp_path / run / "log.txt").read_text())
    same_logs = logs[0] == logs[1] and logs[0].count("step") == 4
    m2, adam, meta = load_training_state(tmp_path / "x" / "m.ckpt.last")
    save_checkpoint(m2, tmp_path / "c.ckpt", adam, meta)
    state_bytes = (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "x" / "m.ckpt.last").read_bytes()

    worst_fft = 0.0
    for n in (1, 2, 4, 8, 16, 64):
        z = rng.normal(size=(3, n, n)) + 1j * rng.normal(size=(3, n, n))
        worst_fft = max(worst_fft, float(np.abs(fft.fft2(fft.fft2(z), inverse=True) - z).max()))
    x = rng.normal(size=(2, 5, 8, 8))
    worst_fft = max(worst_fft, float(np.abs(T.fft2(T.fft2(Tensor(x)), inverse=True).data - x).max()))

    ok = model_bytes and state_bytes and same_logs and worst_fft < 1e-10
    acceptance(6, ok, f"checkpoint byte-identical={model_bytes}, with optimizer state={state_bytes}, "
                      f"float64 loss logs identical={same_logs}, FFT round trip {worst_fft:.1e} < 1e-10")
    assert ok
