"""Acceptance criteria, one test per criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion (see conftest.py). Run just this suite with::

    pytest tests/test_acceptance.py -v
"""

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from disagg import baselines
from disagg import autodiff as ad
from disagg.cli import main
from disagg.data import CountFrame
from disagg.geo import aggregate, aggregation_matrix, build_hierarchy
from disagg.models import ModelSpec, build_model
from disagg.synth import SynthConfig, default_config, synth_generate
from disagg.training import (LossScheme, compose_loss, level_weights, reconstruct,
                             scheme_weights)

from conftest import random_hierarchy
from gradcheck import check

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------- baselines: C1 and C2

def _baseline_instances(n=100, seed=2024):
    """Random hierarchy, level pair, coarse inputs and HR training history."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        h = random_hierarchy(rng, max_levels=3, max_fine=64)
        fi = int(rng.integers(1, len(h.levels)))
        ci = int(rng.integers(0, fi))
        fine, coarse = h.levels[fi], h.levels[ci]
        hours = int(rng.integers(1, 6))
        x = rng.integers(0, 60, (hours, coarse.d)).astype(float)
        x[:, rng.random(coarse.d) < 0.2] = 0.0
        train = rng.poisson(3.0, (24, fine.d)) * (rng.random(fine.d) < 0.8)
        # wipe the history of one parent to exercise the uniform fallback
        parent = h.parent_map(fi, ci)
        train[:, parent == rng.integers(0, coarse.d)] = 0
        train_c = aggregate(train.astype(float), aggregation_matrix(h, fi, ci))
        out.append((h, fine.name, coarse.name, x,
                    CountFrame(fine.name, np.arange(24), train),
                    CountFrame(coarse.name, np.arange(24), train_c)))
    return out


def _disaggregate_all(h, fine, coarse, x, train_f, train_c):
    return {"CW": baselines.cw_disaggregate(x, h, fine, coarse),
            "AW": baselines.aw_disaggregate(x, h, fine, coarse),
            "HR": baselines.hr_disaggregate(x, baselines.hr_fit(train_c, train_f, h))}


@pytest.mark.criterion("C1 mass conservation (CW/AW/HR, 100 random hierarchies, 1e-9 rel, <5 s)")
def test_mass_conservation():
    instances = _baseline_instances()
    t0 = time.perf_counter()
    worst = 0.0
    for h, fine, coarse, x, tf, tc in instances:
        M = aggregation_matrix(h, fine, coarse)
        for name, y in _disaggregate_all(h, fine, coarse, x, tf, tc).items():
            back = aggregate(y, M)
            rel = np.abs(back - x) / np.maximum(np.abs(x), np.finfo(float).tiny)
            worst = max(worst, float(rel.max()))
            np.testing.assert_allclose(back, x, rtol=1e-9, atol=0, err_msg=name)
    secs = time.perf_counter() - t0
    print(f"worst relative mass error {worst:.2e} in {secs:.2f}s")
    assert secs < 5.0


def _brute_force(h, fine, coarse, x, train_f):
    """Per-unit loop straight from cell memberships."""
    fl, cl = h.level(fine), h.level(coarse)
    cells = [np.flatnonzero(fl.cell_unit == j) for j in range(fl.d)]
    parent = [int(cl.cell_unit[c[0]]) for c in cells]
    totals = np.asarray(train_f.counts, dtype=float).sum(axis=0)
    out = {k: np.zeros((x.shape[0], fl.d)) for k in ("CW", "AW", "HR")}
    for j in range(fl.d):
        sib = [k for k in range(fl.d) if parent[k] == parent[j]]
        area = sum(len(cells[k]) for k in sib)
        hist = sum(totals[k] for k in sib)
        share = {"CW": 1.0 / len(sib), "AW": len(cells[j]) / area,
                 "HR": totals[j] / hist if hist > 0 else 1.0 / len(sib)}
        for t in range(x.shape[0]):
            for k in out:
                out[k][t, j] = share[k] * x[t, parent[j]]
    return out


@pytest.mark.criterion("C2 oracle equivalence with per-unit loop (1e-12 entrywise, <5 s)")
def test_oracle_equivalence():
    instances = _baseline_instances()
    t0 = time.perf_counter()
    for h, fine, coarse, x, tf, tc in instances:
        fast = _disaggregate_all(h, fine, coarse, x, tf, tc)
        slow = _brute_force(h, fine, coarse, x, tf)
        for name in fast:
            np.testing.assert_allclose(fast[name], slow[name], rtol=0, atol=1e-12, err_msg=name)
    secs = time.perf_counter() - t0
    print(f"{len(instances)} instances in {secs:.2f}s")
    assert secs < 5.0


# ------------------------------------------------------- C3 gradient check

@pytest.fixture(scope="module")
def h3():
    return build_hierarchy({"grid": {"rows": 4, "cols": 4, "cell_size": 10.0},
                            "subdivision": [1, 2, 2], "names": ["L0", "L1", "L2"]})


def _grad_cases(h3, k):
    rng = np.random.default_rng(1000 + k)
    B = 3
    x0 = rng.uniform(1, 10, (B, 1))
    y1, y2 = rng.uniform(0, 4, (B, 4)), rng.uniform(0, 2, (B, 16))

    fnn = build_model(ModelSpec("FNN", "L0", "L2", hidden=(5, 6)), h3, seed=k)
    cot = build_model(ModelSpec("FNN", "L0", "L2", cot=True), h3, seed=k)
    lstm = build_model(ModelSpec("LSTM", "L1", "L2", hidden=(5,), lstm_hidden=3, window=5),
                       h3, seed=k)
    seq = rng.uniform(0, 3, (B, 5, 4))
    rec = LossScheme(True, "full")
    w_cot = scheme_weights(h3, "L0", "L2", LossScheme(True))
    w_rec = scheme_weights(h3, "L0", "L2", rec)
    truths = {"L0": x0, "L1": y1, "L2": y2}

    def composed():
        p = cot(x0)
        return compose_loss(p, reconstruct(p, h3, "full", "L0"), truths, rec, w_rec)[0]

    return {
        "FNN-plain": (lambda: ad.l1_loss(fnn(x0)["L2"], y2), fnn.params),
        "FNN-COT": (lambda: compose_loss(cot(x0), {}, truths, LossScheme(True), w_cot)[0],
                    cot.params),
        "LSTM(T=5)": (lambda: ad.l1_loss(lstm(seq)["L2"], y2), lstm.params),
        "FNN+COT+REC-Full": (composed, cot.params),
    }


@pytest.mark.criterion("C3 reverse-mode vs central FD (step 1e-5, rel err <1e-4, 20 instances x 4, <60 s)")
def test_gradient_check(h3):
    t0 = time.perf_counter()
    worst = {}
    for k in range(20):
        for name, (fn, params) in _grad_cases(h3, k).items():
            err = check(fn, params, step=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)
            assert err < 1e-4, f"{name} instance {k}: relative error {err:.2e}"
    secs = time.perf_counter() - t0
    print("worst relative error per model:",
          ", ".join(f"{k}={v:.1e}" for k, v in worst.items()), f"in {secs:.1f}s")
    assert secs < 60.0


# ---------------------------------------------------- C4 to C6: structure

@pytest.fixture(scope="module")
def city():
    """Bundled 5-level city, shortened to two days for structural checks."""
    records, h, frames = synth_generate(default_config(hours=48))
    return h, frames


@pytest.mark.criterion("C4 COT intermediate widths equal in-between level dims (5 levels)")
def test_cot_structure(city):
    h, _ = city
    assert list(h.dims) == [4, 16, 64, 256, 1024]
    names = h.names
    for si in range(len(names)):
        for ti in range(si + 1, len(names)):
            m = build_model(ModelSpec("FNN", names[si], names[ti], cot=True), h)
            between = names[si + 1:ti]
            assert m.intermediates == list(between)
            assert m.exposed_widths() == {lv: h.level(lv).d for lv in [*between, names[ti]]}
            plain = build_model(ModelSpec("FNN", names[si], names[ti]), h)
            assert plain.widths[-1] == m.widths[-1]
            if between:
                assert m.widths == [h.level(lv).d for lv in names[si:ti + 1]]
            else:  # adjacent levels: COT collapses to the plain head
                assert m.widths == plain.widths


@pytest.mark.criterion("C5 REC zero-point: ground truth reconstructs exactly, zero REC loss")
def test_rec_zero_point(city):
    h, frames = city
    truths = {lv: np.asarray(frames[lv].counts, dtype=float) for lv in h.names}
    preds = {lv: truths[lv] for lv in h.names[1:]}
    for scheme in ("full", "bridge", "bottomup"):
        rec = reconstruct(preds, h, scheme, "PUMA")
        assert set(rec) == set(h.names[:-1])
        for lv, r in rec.items():
            np.testing.assert_array_equal(r.data, truths[lv])
        sch = LossScheme(True, scheme)
        total, parts = compose_loss(preds, rec, truths, sch, scheme_weights(h, "PUMA", "EXTREME", sch))
        rec_terms = {k: v for k, v in parts.items() if k.startswith("rec:")}
        assert len(rec_terms) == 4 and all(v == 0.0 for v in rec_terms.values())
        assert float(total.data) == 0.0


@pytest.mark.criterion("C6 Full/Bridge/BottomUp match hand enumeration on d=[1,4,16] (1e-12)")
def test_scheme_definitions(h3):
    # L1 unit k owns L2 units 4k..4k+3 in this fixture
    assert h3.parent_map("L2", "L1").tolist() == [0] * 4 + [1] * 4 + [2] * 4 + [3] * 4
    p1 = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]])
    p2 = np.arange(32.0).reshape(2, 16)
    l1_from_p2 = np.array([[6.0, 22.0, 38.0, 54.0], [70.0, 86.0, 102.0, 118.0]])
    expected_l0 = {"full": [[(10.0 + 120.0) / 2], [(26.0 + 376.0) / 2]],
                   "bridge": [[10.0], [26.0]],
                   "bottomup": [[120.0], [376.0]]}
    for scheme, l0 in expected_l0.items():
        rec = reconstruct({"L1": p1, "L2": p2}, h3, scheme, "L0")
        np.testing.assert_allclose(rec["L0"].data, l0, rtol=0, atol=1e-12, err_msg=scheme)
        np.testing.assert_allclose(rec["L1"].data, l1_from_p2, rtol=0, atol=1e-12, err_msg=scheme)


# ------------------------------------------ C7 and C8: synthetic benchmark

@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    code = main(["run", "--config", str(CONFIGS / "matrix_ordering.json"), "--out", str(out)])
    secs = time.perf_counter() - t0
    assert code == 0
    med = {(r["task"], r["model"], r["scheme"]): r for r in _rows(out / "metrics_median.csv")}
    return med, secs


TASKS = ["PUMA->NTA", "PUMA->TRACT", "PUMA->BLOCK", "PUMA->EXTREME"]


@pytest.mark.criterion("C7 median test MAE: HR and FNN below CW and AW on every task, <15 min")
def test_qualitative_ordering(benchmark):
    med, secs = benchmark
    print(f"benchmark matrix ran in {secs:.0f}s")
    failures = []
    for task in TASKS:
        v = {m: float(med[(task, m, s)]["mae_raw"])
             for m, s in (("CW", "-"), ("AW", "-"), ("HR", "-"), ("FNN", "plain"))}
        a = {m: float(med[(task, m, s)]["mae_per_area"])
             for m, s in (("CW", "-"), ("AW", "-"), ("HR", "-"), ("FNN", "plain"))}
        print(f"{task:15s} raw " + " ".join(f"{m}={x:.4f}" for m, x in v.items())
              + " | per-area " + " ".join(f"{m}={x:.3e}" for m, x in a.items()))
        for m in ("HR", "FNN"):
            for b in ("CW", "AW"):
                if not v[m] < v[b]:
                    failures.append(f"{task}: raw {m} {v[m]:.4f} !< {b} {v[b]:.4f}")
                if not a[m] < a[b]:
                    failures.append(f"{task}: per-area {m} {a[m]:.3e} !< {b} {a[b]:.3e}")
    assert not failures, failures
    assert secs < 15 * 60


@pytest.mark.criterion("C8 COT trend: median(FNN+COT) <= 1.05 x median(FNN) on two finest tasks")
def test_cot_trend(benchmark):
    med, _ = benchmark
    for task in TASKS[-2:]:
        plain = float(med[(task, "FNN", "plain")]["mae_raw"])
        cot = float(med[(task, "FNN", "cot")]["mae_raw"])
        strict = "strict improvement" if cot < plain else "no strict improvement"
        print(f"{task}: FNN {plain:.4f}, FNN+COT {cot:.4f}, ratio {cot / plain:.3f} ({strict})")
        assert cot <= 1.05 * plain


# ------------------------------------------------------ C9 weighted loss

@pytest.mark.criterion("C9 weights sum to 1 and fall with d; unweighted uniform; both run the full matrix")
def test_weighted_loss_invariants(tmp_path):
    rng = np.random.default_rng(9)
    for _ in range(50):
        dims = np.cumprod(rng.integers(2, 5, int(rng.integers(1, 6))))
        a = level_weights(dims)
        assert abs(a.sum() - 1.0) < 1e-12
        assert np.all(np.diff(a) < 0)
        u = level_weights(dims, weighted=False)
        assert np.all(u == 1.0 / len(dims))

    # every task, model and scheme under both weightings, one epoch each
    cfg = json.loads((CONFIGS / "matrix_default.json").read_text())
    cfg.update(synth=str(CONFIGS / "synth_default.json"), weighted=[True, False], seeds=[0],
               train={**cfg["train"], "max_epochs": 1})
    path = tmp_path / "full.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == 0
    rows = _rows(tmp_path / "out" / "metrics.csv")
    neural = [r for r in rows if r["model"] in ("FNN", "LSTM")]
    # FNN on all four tasks, LSTM everywhere except EXTREME
    assert len(neural) == (4 + 3) * 5 * 2
    assert not any(r["model"] == "LSTM" and r["task"].endswith("EXTREME") for r in neural)
    assert {r["weighted"] for r in neural} == {"true", "false"}
    assert all(np.isfinite(float(r["mae_raw"])) for r in rows)
    by = {(r["task"], r["model"], r["scheme"], r["weighted"]): r["mae_raw"] for r in neural}
    differs = [k for k in by if k[3] == "true" and k[2] != "plain"
               and by[k] != by[(*k[:3], "false")]]
    assert differs, "weighting had no effect on any multi-level scheme"


# ------------------------------------------------------------ C10 and C11

@pytest.mark.criterion("C10 Jan-Jun ingest with May/June split gives 2904/744/720 rows")
def test_pipeline_structure(tmp_path):
    synth = {"rows": 8, "cols": 8, "cell_size": 100.0, "subdivision": [2, 2],
             "level_names": ["COARSE", "FINE"], "hours": 4368, "start": "2016-01-01T00:00:00",
             "background": 0.05}
    (tmp_path / "synth.json").write_text(json.dumps(synth))
    assert SynthConfig.from_dict(synth).window.n_hours == 24 * (31 + 29 + 31 + 30 + 31 + 30)
    assert main(["synth", "--config", str(tmp_path / "synth.json"), "--out",
                 str(tmp_path / "s")]) == 0
    splits = {"train": ["2016-01-01T00:00:00", "2016-05-01T00:00:00"],
              "val": ["2016-05-01T00:00:00", "2016-06-01T00:00:00"],
              "test": ["2016-06-01T00:00:00", "2016-07-01T00:00:00"]}
    (tmp_path / "splits.json").write_text(json.dumps(splits))
    assert main(["ingest", "--points", str(tmp_path / "s" / "records.csv"), "--hierarchy",
                 str(tmp_path / "s" / "hierarchy.json"), "--splits", str(tmp_path / "splits.json"),
                 "--out", str(tmp_path / "i")]) == 0
    counts = {r["split"]: int(r["hours"]) for r in _rows(tmp_path / "i" / "split_summary.csv")}
    print(counts)
    assert counts == {"train": 2904, "val": 744, "test": 720}


@pytest.mark.criterion("C11 two cmd_run invocations give byte-identical metrics CSVs")
def test_determinism(tmp_path):
    cfg = {"synth": str(CONFIGS / "synth_default.json"),
           "splits": {"val_hours": 120, "test_hours": 120},
           "tasks": [["PUMA", "NTA"], ["PUMA", "BLOCK"]],
           "models": ["CW", "AW", "HR", "FNN", "LSTM"],
           "schemes": ["plain", "cot+rec-full"], "weighted": [True], "seeds": [0, 1],
           "train": {"batch_size": 8, "lr": 1e-4, "max_epochs": 2, "patience": 10},
           "model": {"hidden": [64, 256], "lstm_hidden": 16, "window": 5}}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(cfg))
    for name in ("a", "b"):
        assert main(["run", "--config", str(path), "--out", str(tmp_path / name)]) == 0
    for name in ("metrics.csv", "metrics_median.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert len(a.splitlines()) > 1
