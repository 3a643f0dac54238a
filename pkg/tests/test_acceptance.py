"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdict lines are
also repeated in the terminal summary. Criteria 5 and 6 share one session-wide
five-seed experiment, and its wall time is charged in full to both.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from wifiloc import baselines, cli, evaluation, nn, pipeline
from wifiloc.dataset import parse_dataset, serialize_dataset, spacing_stats_xy
from wifiloc.encoder import ApDirectory, FingerprintImage, build_directory, encode_dataset, encode_readings
from wifiloc.wifinet import DEFAULT_WIDTHS, Block, build_wifinet

from oracles import exhaustive_nn, layer_fd_check, naive_conv

SEEDS = (0, 1, 2, 3, 4)


# ---------------------------------------------------------------- 1. encoding


def test_criterion_1_encoding_exactness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    d = ApDirectory([f"02:00:00:00:{i // 256:02x}:{i % 256:02x}" for i in range(113)])
    bad = []
    if d.side != 11:
        bad.append(f"side {d.side}")
    for _ in range(2000):
        seen = rng.random(113) < rng.uniform(0.05, 1.0)
        rss = rng.integers(-99, -29, size=113)
        readings = {ap: int(v) for ap, v, s in zip(d.order, rss, seen) if s}
        px = encode_readings(readings, d).ravel()
        ok = np.isin(px[:113][~seen], [0]).all() and (px[113:] == 0).all()
        ok &= (px[:113][seen] == rss[seen] + 200).all()
        ok &= ((px == 0) | ((px >= 101) & (px <= 170))).all()
        if not ok:
            bad.append(f"scan {readings}")
            break
    one = encode_readings({d.order[0]: -99, d.order[112]: -30}, d).ravel()
    if (one[0], one[112]) != (101, 170):
        bad.append(f"endpoints {one[0]}, {one[112]}")
    secs = time.perf_counter() - t0
    ok = not bad and secs < 1.0
    criterion(1, ok, "side 11, 2000 random scans in {0} U [101,170]" if not bad else "; ".join(bad), secs, 1)
    assert ok


# ---------------------------------------------------------------- 2. gradients


def _layer_cases(rng):
    yield "conv", nn.Conv2D(2, 3, 3, rng), rng.normal(size=(3, 2, 4, 4))
    bn = nn.BatchNorm2D(3)
    bn.gamma[...] = rng.uniform(0.5, 1.5, 3)
    bn.beta[...] = rng.normal(size=3)
    yield "bn", bn, rng.normal(size=(4, 3, 3, 3))
    yield "relu", nn.ReLU(), rng.normal(size=(3, 2, 3, 3))
    yield "dense", nn.Dense(12, 5, rng), rng.normal(size=(4, 12))
    yield "block", Block(2, 3, 3, rng), rng.normal(size=(3, 2, 3, 3))
    yield "residual block", Block(2, 3, 3, rng, skip=True), rng.normal(size=(3, 2, 3, 3))


def _xent_error(rng, h=1e-5):
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    _, g = nn.softmax_xent(z, y)
    worst = 0.0
    for i in np.ndindex(z.shape):
        old = z[i]
        z[i] = old + h
        up = nn.softmax_xent(z, y)[0]
        z[i] = old - h
        down = nn.softmax_xent(z, y)[0]
        z[i] = old
        worst = max(worst, abs(g[i] - (up - down) / (2 * h)) / max(1.0, abs(g[i])))
    return worst


def test_criterion_2_gradient_integrity(criterion):
    t0 = time.perf_counter()
    n_instances = 20
    layer_worst: dict[str, float] = {}
    net_worst = 0.0
    checked = skipped = 0
    for inst in range(n_instances):
        rng = np.random.default_rng(100 + inst)
        for name, layer, x in _layer_cases(rng):
            layer_worst[name] = max(layer_worst.get(name, 0.0), layer_fd_check(layer, x, rng))
        layer_worst["softmax-xent"] = max(layer_worst.get("softmax-xent", 0.0), _xent_error(rng))
        m = build_wifinet(4, 5, DEFAULT_WIDTHS, seed=inst, residual=inst % 2 == 1)
        assert m.layer_counts()["conv"] == 13
        x = rng.normal(size=(4, 1, 4, 4))
        rep = nn.grad_check(m.body, x, rng.integers(0, 5, 4), h=1e-5, n_per_tensor=3, seed=inst)
        net_worst = max(net_worst, rep.max_rel_error)
        checked += rep.n_checked
        skipped += rep.n_skipped
    secs = time.perf_counter() - t0
    per_layer = max(layer_worst.values())
    ok = per_layer <= 1e-5 and net_worst <= 1e-4 and secs < 60
    detail = (f"{n_instances} instances, worst per-layer {per_layer:.2e} "
              f"({max(layer_worst, key=layer_worst.get)}), end-to-end {net_worst:.2e} "
              f"({checked} probes, {skipped} on a ReLU kink redrawn)")
    criterion(2, ok, detail, secs, 60)
    assert ok, layer_worst


# ---------------------------------------------------------------- 3. architecture


def test_criterion_3_architecture_audit(criterion):
    t0 = time.perf_counter()
    m = build_wifinet(11, 30)
    counts = m.layer_counts()
    widths = m.widths[1:]
    x = np.random.default_rng(0).random((2, 1, 11, 11))
    sizes = []
    for layer in m.body.layers[:-1]:
        x = layer.forward(x)
        sizes.append(x.shape[2:])
    secs = time.perf_counter() - t0
    ok = (counts == {"conv": 13, "bn": 13, "relu": 5, "dense": 1, "softmax": 1}
          and all(b > a for a, b in zip(widths, widths[1:]))
          and all(s == (11, 11) for s in sizes)
          and secs < 1.0)
    criterion(3, ok, f"{counts}, widths {m.widths}, 11x11 kept", secs, 1)
    assert ok


# ---------------------------------------------------------------- 4. oracles


def test_criterion_4_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    side = 11
    px = rng.integers(101, 171, size=(150, side, side))
    px[rng.random(px.shape) < 0.4] = 0
    px[75:90] = px[0:15]  # duplicate rows exercise the lowest-index tie rule
    labels = rng.integers(0, 30, 150)
    imgs = [FingerprintImage(p.astype(np.uint8), int(lab)) for p, lab in zip(px, labels)]
    knn = baselines.knn_train(imgs)
    queries = rng.integers(0, 171, size=(1000, side, side))
    queries[:100] = px[rng.integers(0, 150, 100)]
    pred = knn.predict_batch(queries)
    expect = np.array([labels[exhaustive_nn(knn.x, q.ravel())] for q in queries])
    knn_ok = np.array_equal(pred, expect)

    conv_err = 0.0
    for k in (1, 3, 5):
        layer = nn.Conv2D(3, 4, k, rng)
        layer.bias[...] = rng.normal(size=4)
        x = rng.normal(size=(2, 3, 6, 5))
        conv_err = max(conv_err, np.abs(layer.forward(x) - naive_conv(x, layer.weight, layer.bias)).max())

    sub = baselines.subknn_train(imgs, m=1, d=side * side, seed=3)
    sub_ok = np.array_equal(sub.predict_batch(queries), pred)
    secs = time.perf_counter() - t0
    ok = knn_ok and conv_err <= 1e-12 and sub_ok and secs < 30
    criterion(4, ok, f"knn==scan on 1000 queries: {knn_ok}, conv max err {conv_err:.1e}, "
                     f"subknn(1, D)==knn: {sub_ok}", secs, 30)
    assert ok


# ---------------------------------------------------------------- 5 + 6. learnability / generalisation


@pytest.fixture(scope="module")
def seed_runs():
    base = pipeline.ExperimentConfig()
    t0 = time.perf_counter()
    runs = {s: pipeline.run_experiment(dataclasses.replace(base, seed=s), warmup=5) for s in SEEDS}
    return runs, time.perf_counter() - t0


def test_criterion_5_known_position_learnability(seed_runs, criterion):
    runs, secs = seed_runs
    acc = {s: (r.reports["wifinet", "known"].accuracy, r.reports["svm", "known"].accuracy)
           for s, r in runs.items()}
    wins = [s for s, (w, v) in acc.items() if w >= 0.85 and w >= v]
    ok = len(wins) >= 3 and secs < 900
    detail = "wifinet/svm acc " + ", ".join(f"s{s} {w:.3f}/{v:.3f}" for s, (w, v) in acc.items())
    criterion(5, ok, f"{detail}; {len(wins)}/5 seeds pass", secs, 900)
    assert ok


def test_criterion_6_generalisation_ordering(seed_runs, criterion):
    runs, secs = seed_runs
    t0 = time.perf_counter()
    passes, worst_ratio, parts = 0, 0.0, []
    for s, r in runs.items():
        rep = r.reports
        ordered = all(rep["wifinet", p].rmse_m <= rep["svm", p].rmse_m for p in ("unknown", "trajectory"))
        passes += ordered
        spacing = spacing_stats_xy(r.env.train_positions).mean_m
        for name in pipeline.PREDICTORS:
            worst_ratio = max(worst_ratio, rep[name, "unknown"].rmse_m / spacing)
        parts.append(f"s{s} unk {rep['wifinet', 'unknown'].rmse_m:.2f}/{rep['svm', 'unknown'].rmse_m:.2f} "
                     f"traj {rep['wifinet', 'trajectory'].rmse_m:.2f}/{rep['svm', 'trajectory'].rmse_m:.2f}")
    secs += time.perf_counter() - t0
    ok = passes >= 3 and worst_ratio <= 2.0 and secs < 900
    criterion(6, ok, f"wifinet/svm rmse {'; '.join(parts)}; {passes}/5 ordered; "
                     f"worst unknown rmse {worst_ratio:.2f}x spacing", secs, 900)
    assert ok


# ---------------------------------------------------------------- 7. real time


def test_criterion_7_realtime_bound(criterion):
    t0 = time.perf_counter()
    cfg = pipeline.ExperimentConfig()
    env, sets = pipeline.make_datasets(cfg)
    train = sets["train"]
    d = build_directory(train)
    images = encode_dataset(train, d)
    queries = [im.pixels for im in encode_dataset(sets["test-known"], d)]
    lat = {}
    for name in pipeline.PREDICTORS:
        # latency depends on the architecture, not the weight values: one epoch is enough
        model = pipeline.train_predictor(name, images, d, dict(train.positions), 0, cfg, epochs=1)
        lat[name] = evaluation.measure_latency(model.predict_label, queries, n_calls=1000)
    secs = time.perf_counter() - t0
    ok = all(v.realtime for v in lat.values()) and secs < 120
    detail = ", ".join(f"{k} {v.mean_s * 1e3:.2f} ms (p95 {v.p95_s * 1e3:.2f}, "
                       f"{'<' if v.mean_s < evaluation.INFO_BUDGET_S else '>='}20 ms)" for k, v in lat.items())
    criterion(7, ok, detail, secs, 120)
    assert ok


# ---------------------------------------------------------------- 8. scaling


def _bench(predictors, ap_counts, position_counts, scans):
    rows = evaluation.scaling_benchmark(predictors, ap_counts, position_counts, seed=0,
                                        scans_per_point=scans, n_calls=300)
    return {(r.predictor, r.n_ap, r.n_pos, r.n_train): r.latency_mean_s for r in rows}


def test_criterion_8_scaling_shape(criterion):
    t0 = time.perf_counter()
    cls = _bench(["wifinet"], [113], [30, 94], [10])
    w30, w94 = [v for _, v in sorted(cls.items(), key=lambda kv: kv[0][2])]
    class_change = abs(w94 / w30 - 1)

    knn = _bench(["knn"], [113], [30], [50, 500])
    k_small, k_big = [v for _, v in sorted(knn.items(), key=lambda kv: kv[0][3])]
    knn_growth = k_big / k_small

    aps = _bench(["wifinet", "knn", "svm", "subknn"], [113, 1024], [30], [10])
    growth = {}
    for name in ("wifinet", "knn", "svm", "subknn"):
        lo, hi = [v for k, v in sorted(aps.items(), key=lambda kv: kv[0][1]) if k[0] == name]
        growth[name] = hi / lo
    linear = {k: v for k, v in growth.items() if k != "wifinet"}
    secs = time.perf_counter() - t0
    checks = {"classes": class_change < 0.25, "knn": knn_growth >= 5.0,
              "aps": all(growth["wifinet"] < v for v in linear.values())}
    ok = all(checks.values()) and secs < 600
    detail = (f"wifinet 30->94 classes {class_change:+.0%} ({w30 * 1e3:.2f}->{w94 * 1e3:.2f} ms); "
              f"knn 10x samples x{knn_growth:.1f}; 113->1024 APs growth "
              + ", ".join(f"{k} x{v:.1f}" for k, v in growth.items())
              + f"; clauses {checks}")
    criterion(8, ok, detail, secs, 600)
    assert ok


# ---------------------------------------------------------------- 9. determinism


REPRO_TOML = """
seed = 7

[data]
scans_per_point = 20
known_scans = 4

[train]
epochs = 2

[svm]
epochs = 20
"""


def _stable_files(root: Path) -> dict[str, bytes]:
    """Every artefact except the ones that carry wall-clock timings."""
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and not (rel in ("timing.csv", "bench.csv") or rel.endswith(("samples.csv", "metrics.json"))):
            out[rel] = p.read_bytes()
    return out


def test_criterion_9_determinism_and_round_trips(tmp_path, criterion, capsys):
    t0 = time.perf_counter()
    cfg_path = tmp_path / "repro.toml"
    cfg_path.write_text(REPRO_TOML)
    for run in ("a", "b"):
        assert cli.main(["repro", "--config", str(cfg_path), "--out", str(tmp_path / run), "--no-bench"]) == 0
    capsys.readouterr()
    a, b = _stable_files(tmp_path / "a"), _stable_files(tmp_path / "b")
    identical = a == b and "summary.csv" in a and len(a) > 10

    rng = np.random.default_rng(9)
    exact = True
    for name in pipeline.PREDICTORS:
        ckpt = tmp_path / "a" / "models" / f"{name}.ckpt"
        model = pipeline.load_predictor(ckpt)
        pipeline.save_predictor(model, tmp_path / f"{name}.again.ckpt")
        again = pipeline.load_predictor(tmp_path / f"{name}.again.ckpt")
        q = rng.integers(0, 171, size=(200, model.directory.side, model.directory.side))
        q[rng.random(q.shape) < 0.3] = 0
        exact &= np.array_equal(model.predict_batch(q), again.predict_batch(q))
        if name == "wifinet":
            exact &= np.array_equal(model.predict_proba(q), again.predict_proba(q))

    csv_ok = True
    for kind, fname in pipeline.DATA_FILES.items():
        ds = parse_dataset(tmp_path / "a" / "data" / fname, kind)
        serialize_dataset(ds, tmp_path / f"again.{fname}")
        csv_ok &= parse_dataset(tmp_path / f"again.{fname}", kind) == ds
        csv_ok &= (tmp_path / f"again.{fname}").read_bytes() == (tmp_path / "a" / "data" / fname).read_bytes()
    secs = time.perf_counter() - t0
    ok = identical and exact and csv_ok and secs < 300
    criterion(9, ok, f"repro byte-identical over {len(a)} files: {identical}, save/load exact: {exact}, "
                     f"csv round-trip: {csv_ok}", secs, 300)
    assert ok
