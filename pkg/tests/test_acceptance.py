"""Acceptance suite: one test per criterion, each emitting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (verdicts are repeated in the
terminal summary) or directly with ``python tests/test_acceptance.py``.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import verdict  # noqa: E402
from oracles import metrics_from_tally, tally  # noqa: E402
from scenes import UTM, five_cars, four_trees, random_scene  # noqa: E402

from promptgeo import cli  # noqa: E402
from promptgeo.backends.mock import MockBackend  # noqa: E402
from promptgeo.commands import cmd_report, write_mock_fixture  # noqa: E402
from promptgeo.geodata import (  # noqa: E402
    InstanceMask,
    GeoTransform,
    load_labels,
    mosaic,
    rasterize,
    save_raster,
    vectorize,
)
from promptgeo.metrics import METRICS, MetricRow, ReportRow, aggregate, confusion, one_against_all  # noqa: E402
from promptgeo.oneshot import (  # noqa: E402
    TrainConfig,
    binarize,
    combine_scales,
    finetune,
    fit_scale_weights,
    loss_and_grad,
    run_oneshot,
    select_exemplar_text,
)
from promptgeo.promptseg import LoopConfig, RunLog, run_text_loop  # noqa: E402

# Published zero-shot results: (dataset, prompt, dice, iou) for every row.
PUBLISHED_ZERO_SHOT = [
    ("00", "Box", 0.888, 0.799), ("00", "Point", 0.918, 0.848), ("00", "Text", 0.922, 0.852),
    ("01", "Box", 0.927, 0.863), ("01", "Point", 0.708, 0.548), ("01", "Text", 0.892, 0.798),
    ("02", "Box", 0.862, 0.828), ("02", "Point", 0.958, 0.920), ("02", "Text", 0.671, 0.644),
    ("03", "Box", 0.801, 0.689), ("03", "Point", 0.727, 0.571), ("03", "Text", 0.441, 0.328),
    ("04", "Box", 0.697, 0.535), ("04", "Point", 0.691, 0.528), ("04", "Text", 0.663, 0.509),
    ("05", "Box", 0.788, 0.650), ("05", "Point", 0.900, 0.819), ("05", "Text", 0.927, 0.843),
    ("06", "Box", 0.688, 0.524), ("06", "Point", 0.917, 0.847), ("06", "Text", 0.890, 0.822),
    ("07", "Box", 0.861, 0.756), ("07", "Point", 0.863, 0.759), ("07", "Text", 0.846, 0.744),
    ("08", "Box", 0.574, 0.403), ("08", "Point", 0.972, 0.945), ("08", "Text", 0.894, 0.869),
    ("09", "Box", 0.391, 0.225), ("09", "Point", 0.823, 0.567), ("09", "Text", 0.740, 0.510),
    ("10", "Box", 0.261, 0.150), ("10", "Point", 0.549, 0.378), ("10", "Text", 0.494, 0.340),
]

LOW = LoopConfig(box_threshold=0.25, text_threshold=0.25)


def _check(number, title, ok, detail):
    line = verdict(number, title, ok, detail)
    assert ok, line


def test_criterion_01_metric_oracle():
    rng = np.random.default_rng(20240101)
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        # vary density so empty and full masks occur too
        dp, dg = rng.choice([0.0, 0.1, 0.5, 0.9, 1.0], 2)
        pred = rng.random((16, 16)) < dp
        gt = rng.random((16, 16)) < dg
        got = MetricRow.from_counts(confusion(pred, gt)).values()
        ref = metrics_from_tally(*tally(pred.tolist(), gt.tolist()))
        worst = max(worst, max(abs(got[m] - ref[m]) for m in METRICS))
    elapsed = time.perf_counter() - start
    _check(1, "metric oracle", worst <= 1e-12 and elapsed < 5.0,
           f"200 pairs, max |diff| = {worst:.1e}, {elapsed:.2f} s")


def test_criterion_02_published_dice_iou_consistency():
    bad = [(d, p, dice, iou, dice - 2 * iou / (1 + iou)) for d, p, dice, iou in PUBLISHED_ZERO_SHOT
           if abs(dice - 2 * iou / (1 + iou)) > 0.002]
    detail = f"{len(PUBLISHED_ZERO_SHOT) - len(bad)}/{len(PUBLISHED_ZERO_SHOT)} pairs within 0.002"
    if bad:
        worst = max(bad, key=lambda b: abs(b[4]))
        detail += f"; worst {worst[0]} {worst[1]} dice {worst[2]} iou {worst[3]} (off by {worst[4]:+.3f})"
    _check(2, "published dice/iou consistency", not bad, detail)


def test_criterion_03_text_loop():
    scene = five_cars()
    mb = MockBackend(scene)
    img = scene.render()
    start = time.perf_counter()
    inst, labels = run_text_loop(img, "car", LOW, mb)
    high, _ = run_text_loop(img, "car", LoopConfig(0.65, 0.25), mb)
    elapsed = time.perf_counter() - start
    scores = [i.score for i in inst]
    union = np.any(scene.masks(), axis=0)
    ok = (len(inst) == 5 and all(a > b for a, b in zip(scores, scores[1:]))
          and np.array_equal(labels.data != 0, union) and len(high) == 3 and elapsed < 1.0)
    _check(3, "text-loop correctness", ok,
           f"{len(inst)} instances, scores {[round(s, 3) for s in scores]}, "
           f"{len(high)} at box .65, {elapsed * 1000:.0f} ms")


def test_criterion_04_loop_termination():
    over, guards, n_disjoint = [], 0, 0
    for seed in range(50):
        disjoint = seed % 2 == 0
        scene = random_scene(1000 + seed, 20, disjoint=disjoint, names=("car", "car truck"))
        log = RunLog()
        run_text_loop(scene.render(), "car", LOW, MockBackend(scene), log=log)
        last = log.events[-1]["iteration"]
        if last > len(scene.objects) + 1:
            over.append(seed)
        if disjoint:
            n_disjoint += 1
            guards += len(log.of("termination_guard"))
    _check(4, "loop termination", not over and guards == 0,
           f"50 scenes, {len(over)} over budget, {guards} guard warnings on {n_disjoint} disjoint scenes")


def test_criterion_05_gradient_check():
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    worst = 0.0
    h = 1e-5
    for _ in range(100):
        M = rng.normal(scale=rng.uniform(0.5, 6), size=(3, 16, 16))
        gt = rng.random((16, 16)) < rng.uniform(0.1, 0.9)
        theta = rng.uniform(-3, 3, 2)
        grad = loss_and_grad(M, gt, theta)[3]
        num = np.empty(2)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            num[k] = (loss_and_grad(M, gt, theta + e)[2] - loss_and_grad(M, gt, theta - e)[2]) / (2 * h)
        rel = np.linalg.norm(grad - num) / max(np.linalg.norm(grad), np.linalg.norm(num), 1e-12)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    _check(5, "gradient check", worst <= 1e-4 and elapsed < 10.0,
           f"100 instances, max relative error {worst:.1e}, {elapsed:.2f} s")


def _convergence_problem():
    gt = np.zeros((32, 32), bool)
    yy, xx = np.mgrid[:32, :32]
    gt[(yy - 15) ** 2 + (xx - 16) ** 2 <= 81] = True
    cross = ndimage.generate_binary_structure(2, 1)
    scales = [ndimage.binary_erosion(gt, cross), gt, ndimage.binary_dilation(gt, cross)]
    return np.stack([np.where(s, 5.0, -5.0) for s in scales]), gt


def test_criterion_06_finetune_convergence():
    M, gt = _convergence_problem()
    start = time.perf_counter()
    weights, trace = fit_scale_weights(M, gt, TrainConfig(epochs=1000, lr0=1e-3))
    elapsed = time.perf_counter() - start
    pred = binarize(combine_scales(M, weights))
    dice = 2 * (pred & gt).sum() / (pred.sum() + gt.sum())
    w2 = weights.weights[1]
    ok = w2 >= 0.9 and dice >= 0.99 and trace[-1].total < trace[0].total and elapsed < 30.0
    _check(6, "fine-tuning convergence", ok,
           f"w2 = {w2:.3f} (need >= 0.9), dice = {dice:.3f}, loss {trace[0].total:.4f} -> "
           f"{trace[-1].total:.4f}, {elapsed:.2f} s")


def test_criterion_07_oneshot_breakpoint():
    scene = four_trees()
    mb = MockBackend(scene)
    img = scene.render()
    ex = select_exemplar_text(img, "tree", LOW, mb)
    weights, _ = finetune(ex, mb, TrainConfig())
    log = RunLog()
    inst, _ = run_oneshot(img, ex, weights, mb, log=log)
    stop = log.events[-1]["event"] if log.events else "none"
    ok = len(inst) == 4 and stop == "breakpoint" and not log.of("max_iterations")
    _check(7, "one-shot breakpoint", ok, f"{len(inst)} instances, stopped by {stop}: {log.events[-1]['detail']}")


def test_criterion_08_one_against_all_partition():
    good = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 6, (24, 24))
        gt.flat[rng.choice(gt.size, 5, replace=False)] = np.arange(1, 6)
        pos = [one_against_all(gt, k)[0] for k in range(1, 6)]
        disjoint = all(not (pos[i] & pos[j]).any() for i in range(5) for j in range(i + 1, 5))
        covers = np.array_equal(np.any(pos, axis=0), gt != 0)
        good += disjoint and covers
    _check(8, "one-against-all partition", good == 100, f"{good}/100 seeds")


def test_criterion_09_geo_closure(tmp_path):
    import rasterio

    wkt = rasterio.crs.CRS.from_epsg(32633).to_wkt()
    cases = [(UTM, "EPSG:32633"), (GeoTransform(500123.25, 4100456.5, 0.04, -0.04, 0.003, 0.002), wkt)]
    failures = []
    for k, (transform, crs) in enumerate(cases):
        scene = five_cars(transform, crs)
        inst = [InstanceMask(m, i + 1, 1.0 - 0.1 * i) for i, m in enumerate(scene.masks())]
        labels = mosaic(inst, transform, crs)
        save_raster(labels, tmp_path / f"m{k}.tif")
        back = load_labels(tmp_path / f"m{k}.tif")
        burned = rasterize(vectorize(back), back.shape, back.transform)
        if not np.array_equal(burned != 0, labels.data != 0):
            failures.append(f"case {k}: support differs")
        if not back.transform.almost_equal(transform, 1e-9):
            failures.append(f"case {k}: transform drift")
        if back.crs.encode() != crs.encode():
            failures.append(f"case {k}: CRS text changed")
    _check(9, "geospatial closure", not failures,
           "; ".join(failures) or "support, transform (1e-9) and CRS bytes preserved for 2 grids")


def test_criterion_10_end_to_end_determinism(tmp_path):
    scene = five_cars(UTM, "EPSG:32633")
    manifest = write_mock_fixture(scene, tmp_path / "fx", entry_id="cars")
    scene_path = tmp_path / "fx" / "scene.json"
    dirs = []
    for run in ("a", "b"):
        code = cli.main(["run", "--manifest", str(manifest), "--entry", "cars", "--mode", "human_label",
                         "--k-samples", "5", "--seed", "7", "--backend", f"mock:{scene_path}",
                         "--out", str(tmp_path / run)])
        assert code == 0
        dirs.append(tmp_path / run / "cars" / "oneshot" / "human_label")
    names = ["metrics.csv"] + sorted(str(p.relative_to(dirs[0])) for p in dirs[0].rglob("*")
                                     if p.name in ("weights.json", "mosaic.tif"))
    differ = [n for n in names if (dirs[0] / n).read_bytes() != (dirs[1] / n).read_bytes()]
    ok = not differ and len(names) >= 11
    _check(10, "end-to-end determinism", ok,
           f"{len(names) - len(differ)}/{len(names)} files byte-identical"
           + (f"; differing: {differ}" if differ else ""))


def test_criterion_11_report_fidelity():
    rows = [ReportRow("UAV", "Tree", 0.04, "Text", MetricRow(0.922, 0.852, 0.981, 0.921, 0.012), "00"),
            ReportRow("UAV", "Tree", 0.04, "One-shot (human)",
                      aggregate([MetricRow(0.903, 0.832, 0.976, 0.902, 0.015),
                                 MetricRow(0.987, 0.916, 1.0, 0.986, 0.007)]), "00")]
    rep = cmd_report(rows)
    header = rep.to_text().splitlines()[0].split()
    text_order = [h for h in header if h in ("Dice", "IoU", "Pixel", "TPR", "FPR")]
    csv_header = rep.to_csv().splitlines()[0].split(",")
    cell = rep.rows[-1].cells()["dice"]
    import re

    ok = (text_order == ["Dice", "IoU", "Pixel", "TPR", "FPR"] and "Pixel Acc." in rep.to_text()
          and csv_header[-5:] == ["dice", "iou", "pixel_acc", "tpr", "fpr"]
          and re.fullmatch(r"\d\.\d{3} ± \d\.\d{3}", cell) is not None and cell == "0.945 ± 0.042")
    _check(11, "report fidelity", ok, f"columns {csv_header[-5:]}, one-shot dice cell {cell!r}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
