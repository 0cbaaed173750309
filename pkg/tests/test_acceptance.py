"""End-to-end acceptance criteria; each test prints one PASS/FAIL line.

The trend criteria share one batch of reference runs (C=100, Inc20, five
seeds), which takes roughly ten minutes on a single core.
"""

import json
import time

import numpy as np
import pytest

import mozo_lab.optim as O
from mozo_lab import tensor as T
from mozo_lab.allocation import make_policy
from mozo_lab.data import batches, build_task_stream, make_dataset
from mozo_lab.harness import RunConfig, read_run, run_stream, write_run
from mozo_lab.memory import memory_footprint
from mozo_lab.model import BatchObjective, ModelConfig, ParamUnit, init_model
from mozo_lab.optim import GradEstimate, mozo_step, sign_transform, zo_estimate, zo_step_conservative
from mozo_lab.tensor import Rng, Tensor

from conftest import record

SEEDS = range(5)
CONFIGS = {
    "fo": ("none", "all", "zo-conservative"),
    "dual": ("dual", "all", "zo-conservative"),
    "vision": ("vision", "all", "zo-conservative"),
    "language": ("language", "all", "zo-conservative"),
    "hop_odd": ("dual", "hop-odd", "zo-conservative"),
    "hop_even": ("dual", "hop-even", "zo-conservative"),
    "mozo": ("dual", "hop-even", "mozo"),
    "lang_sign": ("language", "all", "zo-sign"),
    "lang_naive": ("language", "all", "zo-naive"),
}


def reference(name, seed):
    branch, pattern, strategy = CONFIGS[name]
    return RunConfig.from_seed(seed, branch=branch, pattern=pattern, strategy=strategy)


@pytest.fixture(scope="module")
def runs():
    out, timing = {}, {}
    for name in CONFIGS:
        start = time.perf_counter()
        out[name] = [run_stream(reference(name, s)) for s in SEEDS]
        timing[name] = time.perf_counter() - start
    out["_timing"] = timing
    return out


def count(pairs):
    return sum(bool(p) for p in pairs)


# -- 1 ---------------------------------------------------------------------------------


def test_c1_zo_estimator():
    start = time.perf_counter()
    unit = ParamUnit("language", 1, "lora", [Tensor([1.0, 2.0])])

    def loss():
        return float((unit.params[0].data ** 2).sum())

    rng = Rng(2024)
    total, collinear = np.zeros(2), True
    n = 10_000
    for _ in range(n):
        probe = rng.normal((2,))
        est = zo_estimate(unit, loss, [probe], 0.001, base_loss=5.0)
        collinear &= bool(np.array_equal(est.values[0], est.coefficient * probe))
        total += est.values[0]
    rel = np.abs(total / n - [2.0, 4.0]) / [2.0, 4.0]
    elapsed = time.perf_counter() - start
    ok = bool(rel.max() < 0.1) and collinear and elapsed < 5.0
    record("criterion 1", ok, f"max rel err {rel.max():.4f}, collinear={collinear}, {elapsed:.2f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------------


def _net(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(6, 8)))
    target = np.eye(5)[r.integers(0, 5, size=6)]
    params = [
        Tensor(r.normal(size=(8, 9)) * 0.6, requires_grad=True),
        Tensor(r.normal(size=(9,)) * 0.1, requires_grad=True),
        Tensor(r.normal(size=(9, 9)) * 0.6, requires_grad=True),
        Tensor(r.normal(size=(9, 5)) * 0.6, requires_grad=True),
    ]
    W1, b1, W2, W3 = params

    def loss():
        h = T.tanh(T.add(T.matmul(x, W1), b1))
        h = T.l2_normalize(T.tanh(T.matmul(h, W2)))
        z = T.mul(T.matmul(h, W3), Tensor(4.0))
        return T.mul(T.sum(T.mul(T.log(T.softmax(z)), Tensor(target))), Tensor(-1.0 / 6))

    return params, loss


def _max_rel_err(seed, samples=100, h=1e-5):
    params, loss = _net(seed)
    with T.recording():
        L = loss()
    T.backward(L)
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    r = np.random.default_rng(10_000 + seed)
    worst = 0.0
    with T.no_record():
        for flat in r.choice(offsets[-1], size=samples, replace=False):
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = np.unravel_index(flat - offsets[pi], params[pi].shape)
            p = params[pi].data
            old = p[idx]
            p[idx] = old + h
            up = loss().item()
            p[idx] = old - h
            down = loss().item()
            p[idx] = old
            numeric = (up - down) / (2 * h)
            analytic = params[pi].grad[idx]
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    return worst


def test_c2_autodiff():
    errs = [_max_rel_err(seed) for seed in range(20)]
    ok = max(errs) < 1e-4
    record("criterion 2", ok, f"max rel err {max(errs):.2e} over 20 nets x 100 params")
    assert ok


# -- 3 ---------------------------------------------------------------------------------


def test_c3_conservative_dominance():
    cfg = RunConfig.from_seed(11, branch="dual")
    ds = make_dataset(cfg.data)
    stream = build_task_stream(ds, cfg.inc_size)
    state = init_model(cfg.model, ds.prototypes)
    units = list(state.units.values())
    rng = Rng(cfg.opt_seed)
    steps, violations, mismatches = 0, 0, 0
    for task in stream.tasks[:2]:
        for _ in range(cfg.epochs):
            for x, y in batches(task, cfg.batch_size, rng):
                obj = BatchObjective(state, x, y, list(task.classes))
                start = [[p.data.copy() for p in u.params] for u in units]
                rep = zo_step_conservative(units, obj, cfg.zo, rng, cfg.lr, keep_candidates=True)
                after = [[p.data.copy() for p in u.params] for u in units]
                replay = []
                for deltas in rep.candidate_updates:
                    for u, s in zip(units, start):
                        for p, v, d in zip(u.params, s, deltas[u.id]):
                            p.data[...] = v + d
                    replay.append(obj())
                for u, a in zip(units, after):
                    for p, v in zip(u.params, a):
                        p.data[...] = v
                mismatches += replay != rep.candidate_losses
                violations += replay[rep.committed] > min(replay)
                steps += 1
    ok = steps >= 500 and violations == 0 and mismatches == 0
    record("criterion 3", ok, f"{steps} steps replayed, {violations} violations, {mismatches} replay mismatches")
    assert ok


# -- 4 ---------------------------------------------------------------------------------


def test_c4_sign_and_mozo_algebra(monkeypatch):
    cfg = RunConfig.from_seed(5, branch="dual", pattern="hop-even", strategy="mozo")
    ds = make_dataset(cfg.data)
    task = build_task_stream(ds, cfg.inc_size)[0]
    state = init_model(cfg.model, ds.prototypes)
    units = [state.units[u] for u in cfg.policy().zo_units()]
    rng = Rng(cfg.opt_seed)
    seen = []
    real = O.perturb_unit

    def spy(u, probe, epsilon, sign):
        seen.append((u.branch, epsilon))
        return real(u, probe, epsilon, sign)

    monkeypatch.setattr(O, "perturb_unit", spy)
    in_range = scale_invariant = updates_ok = True
    eta = cfg.zo.step_size(cfg.lr, sign=True)
    for step in range(20):
        rows = slice(16 * step, 16 * step + 16)
        obj = BatchObjective(state, task.train_x[rows], task.train_y[rows], list(task.classes))
        rep = mozo_step(units, obj, cfg.zo, rng, cfg.lr, keep_candidates=True)
        for est in rep.estimates.values():
            s = est.flat()
            in_range &= set(np.unique(s)) <= {-1.0, 0.0, 1.0}
            raw = est.raw
            for c in (1e-3, 0.7, 250.0):
                scaled = GradEstimate(raw.unit_id, [c * v for v in raw.values], raw.strategy)
                scale_invariant &= np.array_equal(sign_transform(scaled).flat(), s)
        for deltas in rep.candidate_updates[rep.committed].values():
            for d in deltas:
                updates_ok &= set(np.unique(np.abs(d))) <= {0.0, eta}
    eps_v = {e for b, e in seen if b == "vision"}
    eps_l = {e for b, e in seen if b == "language"}
    eps_ok = eps_v == {cfg.zo.epsilon_vision} and eps_l == {cfg.zo.epsilon_language}
    ok = bool(in_range and scale_invariant and updates_ok and eps_ok)
    record(
        "criterion 4",
        ok,
        f"range={in_range}, scale-invariant={scale_invariant}, eps vision={sorted(eps_v)} language={sorted(eps_l)}, "
        f"updates in {{0,+-eta}}={updates_ok}",
    )
    assert ok


# -- 5-9: trends on the reference benchmark ----------------------------------------------


def last(runs, name):
    return [m.last_acc for m in runs[name]]


def test_c5_dual_zo_degrades(runs):
    worse = count(d < f for d, f in zip(last(runs, "dual"), last(runs, "fo")))
    std_dual = [m.task_loss_std(4) for m in runs["dual"]]
    std_fo = [m.task_loss_std(4) for m in runs["fo"]]
    noisier = count(d > f for d, f in zip(std_dual, std_fo))
    budget = runs["_timing"]["fo"] + runs["_timing"]["dual"]
    ok = worse >= 4 and noisier >= 4 and budget <= 600
    record(
        "criterion 5",
        ok,
        f"dual<fo in {worse}/5, loss std dual>fo in {noisier}/5, {budget:.0f}s; "
        f"fo={np.round(last(runs, 'fo'), 3).tolist()} dual={np.round(last(runs, 'dual'), 3).tolist()}",
    )
    assert ok


def test_c6_branch_asymmetry(runs):
    wins = count(l >= v for l, v in zip(last(runs, "language"), last(runs, "vision")))
    ok = wins >= 3
    record(
        "criterion 6",
        ok,
        f"language>=vision in {wins}/5; language={np.round(last(runs, 'language'), 3).tolist()} "
        f"vision={np.round(last(runs, 'vision'), 3).tolist()}",
    )
    assert ok


def test_c7_layerwise_recovery(runs):
    odd, dual, fo = last(runs, "hop_odd"), last(runs, "dual"), last(runs, "fo")
    better = count(o > d for o, d in zip(odd, dual))
    close = count(o >= f - 0.02 for o, f in zip(odd, fo))
    ok = better >= 4 and close >= 3
    record("criterion 7", ok, f"hop-odd>dual in {better}/5, within 2 points of fo in {close}/5; hop-odd={np.round(odd, 3).tolist()}")
    assert ok


def test_c8_mozo_variance(runs):
    var_mozo = [m.mean_gradvar("vision") for m in runs["mozo"]]
    var_plain = [m.mean_gradvar("vision") for m in runs["hop_even"]]
    lower = count(a < b for a, b in zip(var_mozo, var_plain))
    acc = count(a >= b for a, b in zip(last(runs, "mozo"), last(runs, "hop_even")))
    ok = lower >= 4 and acc >= 3
    record(
        "criterion 8",
        ok,
        f"vision variance mozo<plain in {lower}/5, mozo>=hop-even acc in {acc}/5; "
        f"var mozo={[f'{v:.2e}' for v in var_mozo]} plain={[f'{v:.2e}' for v in var_plain]}; "
        f"acc mozo={np.round(last(runs, 'mozo'), 3).tolist()} hop-even={np.round(last(runs, 'hop_even'), 3).tolist()}",
    )
    assert ok


def test_c9_sign_beats_naive(runs):
    wins = count(s >= n for s, n in zip(last(runs, "lang_sign"), last(runs, "lang_naive")))
    ok = wins >= 3
    record(
        "criterion 9",
        ok,
        f"sign>=naive in {wins}/5; sign={np.round(last(runs, 'lang_sign'), 3).tolist()} "
        f"naive={np.round(last(runs, 'lang_naive'), 3).tolist()}",
    )
    assert ok


def test_hop_odd_loss_is_steadier_than_dual(runs):
    steady = [o.task_loss_std(4) <= d.task_loss_std(4) for o, d in zip(runs["hop_odd"], runs["dual"])]
    assert all(steady)


# -- 10 --------------------------------------------------------------------------------


def test_c10_memory_ordering():
    model = ModelConfig()
    rep = {b: memory_footprint(model, make_policy(model, b, "all", "zo-conservative"), 16, 20) for b in ("dual", "vision", "language", "none")}
    t = {b: r.tape_floats for b, r in rep.items()}
    ok = model.vision_width > model.language_width and 0 == t["dual"] < t["vision"] < t["language"] < t["none"] and rep["dual"].grad_floats == 0
    record("criterion 10", ok, f"tape floats {t}, dual grad floats {rep['dual'].grad_floats}")
    assert ok


# -- 11 --------------------------------------------------------------------------------


def test_c11_protocol_identities(runs, tmp_path):
    stream = build_task_stream(make_dataset(RunConfig().data), 20)
    sets = [set(t.classes) for t in stream]
    disjoint = len(stream) == 5 and all(not (a & b) for i, a in enumerate(sets) for b in sets[i + 1 :])
    disjoint &= set().union(*sets) == set(range(100))

    identities = True
    for name in CONFIGS:
        for seed, m in zip(SEEDS, runs[name]):
            d = tmp_path / name / f"seed-{seed}"
            write_run(m, d, seed)
            back = read_run(d)
            summary = json.loads((d / "metrics.jsonl").read_text().splitlines()[-1])
            identities &= summary["avg_acc"] == float(np.mean(back.per_task_accuracy))
            identities &= summary["last_acc"] == back.per_task_accuracy[-1]

    cfg = reference("hop_odd", 3)
    write_run(run_stream(cfg), tmp_path / "again", 3)
    first = tmp_path / "hop_odd" / "seed-3"
    files = ("metrics.jsonl", "loss.csv", "gradvar.csv", "gradvar_norms.csv", "summary.csv")
    identical = all((first / f).read_bytes() == (tmp_path / "again" / f).read_bytes() for f in files)
    ok = bool(disjoint and identities and identical)
    record("criterion 11", ok, f"5 disjoint tasks={disjoint}, avg/last identities={identities}, byte-identical rerun={identical}")
    assert ok
