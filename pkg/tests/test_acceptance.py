"""Acceptance gate. One test per headline criterion; each records a
PASS/FAIL line that the terminal summary prints at the end of the run.

The experiment criteria share one pair of trained models (T=3 joint and
T=1), trained once per session under a fixed recipe."""
import json
import time

import numpy as np
import pytest

from minktrack.ablation import LAMBDA_D_SWEEP, LAMBDA_S_SWEEP, evaluate_settings, sweep_optimum
from minktrack.cli import main as cli_main
from minktrack.dataio import write_config
from minktrack.gradcheck import run_all
from minktrack.metrics import evaluate, mota
from minktrack.pipeline import gt_as_tracks, gt_eval_boxes
from minktrack.sim import SceneConfig, gen_dataset
from minktrack.train import TrainConfig, train
from minktrack.trackmgr import INFEASIBLE, assignment_cost, hungarian

from oracles import brute_force_assignment, random_conv_case, sparse_vs_dense
import test_sparse
from test_trackalign import check_missing_timestep, check_permutation_invariance

RESULTS: dict[str, tuple[bool, str]] = {}

TRAIN_SCENES = SceneConfig(n_frames=30, n_scenes=16, seed=1)
# ten held-out scenes, each drawn from its own seed stream; the default
# per-object point dropout is 0.2
TEST_SCENES = SceneConfig(n_frames=30, n_scenes=10, seed=1000, dropout=0.2)
RECIPE = dict(steps=2500, lr=2e-3, schedule="one_cycle", log_every=0)


def record(name: str, ok: bool, detail: str) -> None:
    RESULTS[name] = (bool(ok), detail)
    assert ok, f"{name}: {detail}"


def summary_lines() -> list[str]:
    return [f"{'PASS' if ok else 'FAIL'}  {name}: {detail}" for name, (ok, detail) in RESULTS.items()]


# ---------------------------------------------------------------------------
# exact and numeric checks

def test_sparse_dense_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = max(sparse_vs_dense(*random_conv_case(rng, max_side=16, n_max=500)) for _ in range(100))
    elapsed = time.perf_counter() - t0
    record("sparse/dense equivalence", worst < 1e-6 and elapsed < 30.0,
           f"100 inputs, max |diff| {worst:.2e} (< 1e-6), {elapsed:.1f} s (< 30 s)")


def test_temporal_stride_prohibition():
    try:
        test_sparse.test_temporal_stride_property()
        test_sparse.test_encoder_config_rejects_any_temporal_stride()
        ok, detail = True, "every temporal stride != 1 rejected (property test)"
    except AssertionError as e:
        ok, detail = False, f"counterexample: {e}"
    record("temporal stride prohibition", ok, detail)


def _assignment_case(rng):
    small = int(rng.integers(1, 8))
    large = int(rng.integers(small, 10 if small <= 5 else 8))
    shape = (small, large) if rng.random() < 0.5 else (large, small)
    if rng.random() < 0.3:
        cost = rng.integers(-3, 4, shape).astype(np.float64)  # ties
    else:
        cost = rng.uniform(-1, 1, shape)
    cost[rng.random(shape) < rng.uniform(0, 0.6)] = INFEASIBLE
    return cost


def test_hungarian_matches_enumeration():
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(1000):
        cost = _assignment_case(rng)
        a = hungarian(cost)
        n, total = brute_force_assignment(cost, INFEASIBLE)
        if len(a.matched) != n or assignment_cost(cost, a) != total:
            bad += 1
    record("hungarian == enumeration", bad == 0, f"1000 matrices, min(N,M) <= 7, {bad} mismatches")


def test_gradient_suite():
    results = run_all(seed=0)
    bad = [r for r in results if not r.ok]
    worst = max(r.rel_err / r.tol for r in results)
    record("gradient suite", not bad,
           f"{len(results)} checks, {len(bad)} failing, worst err/tol {worst:.2e}")


def test_trackalign_invariances():
    rng = np.random.default_rng(99)
    perm = sum(check_permutation_invariance(rng) for _ in range(200))
    miss = sum(check_missing_timestep(rng) for _ in range(200))
    record("trackalign invariances", perm == 200 and miss == 200,
           f"permutation {perm}/200, missing-timestep {miss}/200, exact")


def test_metric_self_consistency():
    ds = gen_dataset(SceneConfig(n_frames=20, n_scenes=3, seed=5))
    rep = evaluate(gt_eval_boxes(ds), gt_as_tracks(ds), ds.class_names)
    perfect = (rep.amota == 1.0 and rep.mota == 1.0 and rep.recall == 1.0
               and rep.fp == 0 and rep.fn == 0 and rep.ids == 0 and rep.frag == 0)
    m = mota(fp=1, fn=2, ids=1, n_gt=10)
    record("metric self-consistency", perfect and abs(m - 0.6) < 1e-12,
           f"GT vs GT AMOTA={rep.amota} MOTA={rep.mota} IDS={rep.ids}; MOTA(10,1,2,1)={m}")


# ---------------------------------------------------------------------------
# trained experiments

@pytest.fixture(scope="session")
def experiment():
    t0 = time.perf_counter()
    tr = gen_dataset(TRAIN_SCENES)
    te = gen_dataset(TEST_SCENES)
    net3, _ = train(tr, TrainConfig(n_frames=3, lambda_track=1.0, **RECIPE))
    net1, _ = train(tr, TrainConfig(n_frames=1, lambda_track=1.0, **RECIPE))
    settings = [(1.0, 0.0), (0.5, 0.0)] + [(ld, 0.2) for ld in LAMBDA_D_SWEEP] \
        + [(0.5, ls) for ls in LAMBDA_S_SWEEP]
    reports3, map3 = evaluate_settings(te, net3, list(dict.fromkeys(settings)))
    _, map1 = evaluate_settings(te, net1, [(0.5, 0.2)])
    return {"r3": reports3, "map3": map3, "map1": map1, "seconds": time.perf_counter() - t0}


@pytest.mark.slow
def test_table3_score_reduces_switches(experiment):
    geo, fused = experiment["r3"][(1.0, 0.0)], experiment["r3"][(0.5, 0.0)]
    record("learned score (lambda_D 0.5 vs 1)", fused.amota >= geo.amota and fused.ids < geo.ids,
           f"AMOTA {fused.amota:.4f} vs {geo.amota:.4f}, IDS {fused.ids} vs {geo.ids} over 10 scenes")


@pytest.mark.slow
def test_table3_confidence(experiment):
    base, conf = experiment["r3"][(0.5, 0.0)], experiment["r3"][(0.5, 0.2)]
    record("track confidence (lambda_S 0.2 vs 0)", conf.amota >= base.amota,
           f"AMOTA {conf.amota:.4f} vs {base.amota:.4f}")


@pytest.mark.slow
def test_table3_temporal_window(experiment):
    m3, m1 = experiment["map3"], experiment["map1"]
    record("4D window (T=3 vs T=1 AP, dropout 0.2)", m3 >= m1, f"mAP {m3:.4f} vs {m1:.4f}")


@pytest.mark.slow
def test_lambda_sweeps(experiment):
    r = experiment["r3"]
    d = sweep_optimum(LAMBDA_D_SWEEP, [r[(ld, 0.2)].amota for ld in LAMBDA_D_SWEEP])
    s = sweep_optimum(LAMBDA_S_SWEEP, [r[(0.5, ls)].amota for ls in LAMBDA_S_SWEEP])
    ok = all(x["location"] == "interior" or x["tied"] for x in (d, s))
    record("lambda sweeps peak inside", ok,
           f"lambda_D argmax {d['argmax']} ({d['location']}), lambda_S argmax {s['argmax']} ({s['location']})")


@pytest.mark.slow
def test_experiment_budget(experiment):
    sec = experiment["seconds"]
    record("experiment runtime", sec < 1800, f"{sec / 60:.1f} min (< 30 min)")


def _cli_run(d, tag):
    data, ckpt = d / f"data{tag}.jsonl", d / f"net{tag}.ckpt"
    tracks, report = d / f"tracks{tag}.jsonl", d / f"report{tag}.json"
    codes = [cli_main(["gen", "--config", str(d / "scene.cfg"), "--out", str(data)]),
             cli_main(["train", "--data", str(data), "--config", str(d / "train.cfg"), "--out", str(ckpt)]),
             cli_main(["track", "--data", str(data), "--ckpt", str(ckpt), "--out", str(tracks)]),
             cli_main(["eval", "--tracks", str(tracks), "--gt", str(data), "--report", str(report)])]
    return codes, report.read_bytes() if report.exists() else b""


@pytest.mark.slow
def test_determinism(tmp_path):
    write_config(tmp_path / "scene.cfg", {"n_frames": 10, "n_scenes": 2, "seed": 3})
    write_config(tmp_path / "train.cfg", {"steps": 100, "log_every": 0})
    ca, a = _cli_run(tmp_path, "a")
    cb, b = _cli_run(tmp_path, "b")
    ok = ca == cb == [0, 0, 0, 0] and a == b and bool(a)
    json.loads(a or b"{}")
    record("determinism", ok, f"gen->train(100)->track->eval twice, reports byte-identical: {a == b}")
