"""Acceptance gate: one test per criterion, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v -s``. The end-to-end phantom
benchmark trains the liver net, the dual-pathway net, and the contrast-only
single-pathway net at the pinned configuration (20 train / 4 test phantoms at
96x96x24; 2000 iterations each) and dominates the runtime. Its wall-clock
budget is 45 minutes on a 4-core desktop CPU; on machines with fewer cores the
budget is scaled by 4/n_cores (the workload is compute-bound and parallelizes
near-linearly across cores).
"""

import os
import time

import numpy as np
import pytest

from hseg.metrics import FROC_THRESHOLDS, detection_match, dsc, hd95, rvd
from hseg.nets import (Network, build_dual_pathway_net, build_liver_net,
                       build_network, build_single_pathway_net, concat_channels,
                       conv_layer_count, forward_volume, receptive_field,
                       save_network)
from hseg.phantom import PhantomConfig, generate_corpus, load_split
from hseg.postprocess import (CLOSING_SE, OPENING_SE, StructuringElement, close,
                              dilate, erode, fill_holes_3d, label_objects_26,
                              largest_cc, open_, postprocess_detect,
                              postprocess_liver, threshold_prob)
from hseg.train import (TrainConfig, detect_input_volume, liver_input_volume,
                        prepare_detect_cases, prepare_liver_cases, train_detect,
                        train_liver)
from hseg.volume import BinaryMask, Volume

from gradient_checks import ALL_CHECKS
from oracles import (dilate_naive, erode_naive, fill_holes_bfs, hd95_all_pairs,
                     label_components_bfs, largest_component_union_find)


def report(name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"[ACCEPTANCE] {name}: {status} {detail}".rstrip(), flush=True)
    assert ok, f"{name} failed: {detail}"


# -- criterion 1: gradient master test -----------------------------------------


def test_gradient_master():
    t0 = time.time()
    worst = {}
    for name, check in ALL_CHECKS.items():
        rng = np.random.default_rng(hash(name) % 2 ** 32)
        worst[name] = check(rng, n_shapes=20)
    elapsed = time.time() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-3}
    report("gradient-master",
           not bad and elapsed < 120,
           f"(worst rel err {max(worst.values()):.2e} over {len(worst)} kinds, "
           f"{elapsed:.0f}s < 120s)")


# -- criterion 2: architecture conformance --------------------------------------


def _impulse_box(net, x0, channel, center, magnitude=5.0):
    base = net.forward(x0, training=False)
    x1 = x0.copy()
    x1[0, center[0], center[1], channel] += magnitude
    diff = np.abs(net.forward(x1, training=False) - base).sum(axis=-1)[0]
    ys, xs = np.nonzero(diff > 1e-7)
    return ys, xs


def _mark_trained(net):
    for layer in net.layers_flat():
        if layer.kind == "bn":
            layer.n_updates = 1


def test_architecture_conformance(rng):
    ok = receptive_field(build_liver_net()) == (67, 67)
    ok &= conv_layer_count(build_liver_net()) == 9
    ok &= concat_channels(build_dual_pathway_net()) == 640
    ok &= concat_channels(build_single_pathway_net(6)) == 320

    # impulse-response receptive-field box test for both pathways of the
    # dual net (contrast channel 0, diffusion channel 6) and the liver net
    rf_details = []
    dual = build_network("dual")
    dual.initialize(rng, "he")
    _mark_trained(dual)
    side = 144
    rf = receptive_field(dual.spec)[0]
    half = rf // 2
    x0 = rng.standard_normal((1, side, side, 9)).astype(np.float32)
    center = (side // 2, side // 2)
    for channel in (0, 6):
        ys, xs = _impulse_box(dual, x0, channel, center)
        inside = (ys.size > 0 and ys.min() >= center[0] - half
                  and ys.max() <= center[0] + half
                  and xs.min() >= center[1] - half and xs.max() <= center[1] + half)
        rf_details.append(inside)
        ok &= inside

    liver = build_network("liver")
    liver.initialize(rng, "glorot")
    _mark_trained(liver)
    x0 = rng.standard_normal((1, 96, 96, 6)).astype(np.float32)
    ys, xs = _impulse_box(liver, x0, 0, (48, 48))
    half = 67 // 2
    ok &= (ys.size > 0 and ys.min() >= 48 - half and ys.max() <= 48 + half
           and xs.min() >= 48 - half and xs.max() <= 48 + half)

    report("architecture-conformance", bool(ok),
           "(rf=67x67, 9 convs, concat 640/320, impulse boxes ok)")


# -- criterion 3: oracle equivalence --------------------------------------------


def test_oracle_equivalence():
    rng = np.random.default_rng(1234)
    t0 = time.time()
    spacing = (1.543, 1.543, 2.0)
    ses = (OPENING_SE, CLOSING_SE, StructuringElement.box2d(3))
    checked = 0
    for trial in range(100):
        dims = tuple(int(d) for d in rng.integers(5, 17, size=3))
        p = float(rng.uniform(0.15, 0.5))
        arr = (rng.random(dims) < p).astype(np.uint8)
        m = BinaryMask.from_array(arr, spacing)
        other = BinaryMask.from_array(rng.random(dims) < p, spacing)

        # segmentation metrics against counting / all-pairs oracles
        if arr.any() and other.data.any():
            inter = int((arr & other.data).sum())
            assert dsc(m, other) == 2 * inter / (int(arr.sum()) + int(other.data.sum()))
            assert rvd(m, other) == (int(arr.sum()) - int(other.data.sum())) \
                / int(other.data.sum()) * 100.0
            assert hd95(m, other) == pytest.approx(
                hd95_all_pairs(arr, other.data, spacing), abs=1e-12)

        # hole filling and components
        assert np.array_equal(fill_holes_3d(m).data, fill_holes_bfs(arr))
        if arr.any():
            assert np.array_equal(largest_cc(m).data, largest_component_union_find(arr))
        objs = label_objects_26(m)
        ref = label_components_bfs(arr, connectivity=26)
        assert sorted(tuple(o.indices) for o in objs) == sorted(tuple(r) for r in ref)

        # morphology against per-voxel sweep oracles
        se = ses[trial % len(ses)]
        assert np.array_equal(dilate(m, se).data, dilate_naive(arr, se.offsets))
        assert np.array_equal(erode(m, se).data, erode_naive(arr, se.offsets))
        pads = tuple(int(np.abs(se.offsets[:, ax]).max()) for ax in range(3))
        padded = np.pad(arr, tuple((q, q) for q in pads))
        closed_ref = erode_naive(dilate_naive(padded, se.offsets), se.offsets)
        pz, py, px = pads
        nz, ny, nx = arr.shape
        closed_ref = closed_ref[pz:pz + nz, py:py + ny, px:px + nx]
        assert np.array_equal(close(m, se).data, closed_ref)
        assert np.array_equal(open_(m, se).data,
                              dilate_naive(erode_naive(arr, se.offsets), se.offsets))
        checked += 1
    elapsed = time.time() - t0
    report("oracle-equivalence", checked == 100 and elapsed < 300,
           f"({checked} randomized masks, {elapsed:.0f}s < 300s)")


# -- criterion 4: pipeline conformance -------------------------------------------


def test_pipeline_conformance():
    # threshold tie rule: probability exactly at the threshold is background
    tie = Volume.from_array(np.full((1, 2, 3, 3), 0.5, dtype=np.float32))
    ok = threshold_prob(tie, 0.5).count() == 0

    # post-processing order: threshold -> 3D hole fill -> largest component
    prob = np.zeros((7, 12, 12), dtype=np.float32)
    prob[1:6, 1:6, 1:6] = 0.9
    prob[2:5, 2:5, 2:5] = 0.1  # cavity: must be filled, not discarded
    prob[3, 8:10, 8:10] = 0.8  # smaller separate blob: must be dropped
    out = postprocess_liver(Volume.from_array(prob[None]))
    expect = np.zeros_like(prob, dtype=np.uint8)
    expect[1:6, 1:6, 1:6] = 1
    ok &= np.array_equal(out.data, expect)

    liver_arr = np.zeros((8, 20, 20), dtype=np.uint8)
    liver_arr[1:7, 2:14, 2:14] = 1
    liver = BinaryMask.from_array(liver_arr)

    # isolated voxel above threshold is removed by the plus opening
    p1 = np.zeros((8, 20, 20), dtype=np.float32)
    p1[3, 5, 5] = 0.9
    ok &= postprocess_detect(Volume.from_array(p1[None]), liver) == []

    # high-probability blob entirely outside the dilated liver yields nothing
    p2 = np.zeros((8, 20, 20), dtype=np.float32)
    p2[2:5, 16:20, 16:20] = 0.95
    ok &= postprocess_detect(Volume.from_array(p2[None]), liver) == []

    # the same blob inside the liver survives as one object
    p3 = np.zeros((8, 20, 20), dtype=np.float32)
    p3[2:5, 5:9, 5:9] = 0.95
    ok &= len(postprocess_detect(Volume.from_array(p3[None]), liver)) == 1

    report("pipeline-conformance", bool(ok),
           "(tie rule, liver order, opening noise removal, liver masking)")


# -- criterion 5: FROC protocol ---------------------------------------------------


def test_froc_protocol():
    ok = FROC_THRESHOLDS == tuple(round(0.9 - 0.1 * i, 2) for i in range(10))
    ok &= len(FROC_THRESHOLDS) == 10

    rng = np.random.default_rng(77)
    for _ in range(5):
        prob = Volume.from_array(rng.random((1, 6, 16, 16)).astype(np.float32))
        truth_arr = np.zeros((6, 16, 16), dtype=np.uint8)
        truth_arr[2:4, 4:8, 4:8] = 1
        truth_arr[1:2, 10:13, 10:13] = 1
        truth = label_objects_26(BinaryMask.from_array(truth_arr))
        tprs = []
        for t in sorted(FROC_THRESHOLDS):  # ascending threshold
            pred = label_objects_26(threshold_prob(prob, t))
            tpr, _, _ = detection_match(pred, truth)
            tprs.append(tpr)
        ok &= all(a >= b for a, b in zip(tprs, tprs[1:]))

    report("froc-protocol", bool(ok),
           "(10 thresholds 0.90..0.00, pre-morphology TPR non-increasing)")


# -- criterion 6: end-to-end phantom benchmark -----------------------------------

BENCH_SEED = 42
BENCH_ITERS = 2000


@pytest.fixture(scope="module")
def phantom_benchmark(tmp_path_factory):
    t0 = time.time()
    corpus = tmp_path_factory.mktemp("bench") / "corpus"
    generate_corpus(str(corpus), 24, PhantomConfig(), seed=BENCH_SEED,
                    split_counts={"train": 20, "test": 4})
    train_cases = load_split(str(corpus), "train")
    test_cases = load_split(str(corpus), "test")

    liver_cfg = TrainConfig(iterations=BENCH_ITERS, batch_size=6, lr=1e-3,
                            seed=11, loss="dice", lesion_slices_only=False,
                            rotation_deg=0.0, val_every=0)
    liver_net, _, _ = train_liver(prepare_liver_cases(train_cases), liver_cfg)

    liver_masks, dscs = [], []
    for case in test_cases:
        prob = forward_volume(liver_net, liver_input_volume(case.dce))
        mask = postprocess_liver(prob)
        liver_masks.append(mask)
        dscs.append(dsc(mask, case.liver))

    detect_cfg = TrainConfig(iterations=BENCH_ITERS, batch_size=4, lr=1e-4,
                             seed=13, loss="wce", patch_size=64,
                             rotation_deg=45.0, val_every=0)
    detection = {}
    for variant in ("dual", "single6"):
        net, _, _, _ = train_detect(prepare_detect_cases(train_cases, variant),
                                    detect_cfg, variant)
        tprs, fpcs = [], []
        for case, lmask in zip(test_cases, liver_masks):
            prob = forward_volume(net, detect_input_volume(case.dce, case.dw, variant))
            objs = postprocess_detect(prob, lmask, t=0.5)
            truth = label_objects_26(case.lesions)
            tpr, fp, _ = detection_match(objs, truth)
            tprs.append(tpr)
            fpcs.append(fp)
        detection[variant] = {"mean_tpr": float(np.mean(tprs)),
                              "median_fpc": float(np.median(fpcs))}
    return {"median_dsc": float(np.median(dscs)), "dscs": dscs,
            "detection": detection, "elapsed": time.time() - t0}


def test_end_to_end_phantom_benchmark(phantom_benchmark):
    b = phantom_benchmark
    budget = 45 * 60 * max(1.0, 4.0 / (os.cpu_count() or 1))
    dual = b["detection"]["dual"]
    single = b["detection"]["single6"]
    ok = b["median_dsc"] >= 0.90
    ok &= dual["mean_tpr"] >= 0.90
    ok &= dual["median_fpc"] <= 3.0
    ok &= dual["mean_tpr"] >= single["mean_tpr"]
    ok &= b["elapsed"] <= budget
    report("end-to-end-phantom", bool(ok),
           f"(median DSC {b['median_dsc']:.3f} >= 0.90; dual TPR "
           f"{dual['mean_tpr']:.3f} >= 0.90, median FPC {dual['median_fpc']:.1f} <= 3; "
           f"dual >= single-DCE TPR {single['mean_tpr']:.3f}; "
           f"{b['elapsed'] / 60:.1f} min <= {budget / 60:.0f} min budget)")


# -- criterion 7: determinism ------------------------------------------------------


def test_determinism(tmp_path):
    corpus = tmp_path / "det_corpus"
    generate_corpus(str(corpus), 2, PhantomConfig(dims=(48, 48, 10),
                                                  lesion_count=(2, 3),
                                                  lesion_radius_mm=(3.0, 5.5)),
                    seed=7, split_counts={"train": 2})
    cases = load_split(str(corpus), "train")
    cfg = TrainConfig(iterations=25, batch_size=4, lr=1e-3, seed=3, loss="dice",
                      lesion_slices_only=False, rotation_deg=0.0, val_every=0)

    artifacts = []
    for run in range(2):
        net, adam, hist = train_liver(prepare_liver_cases(cases), cfg)
        ckpt = tmp_path / f"run{run}.hwgt"
        save_network(ckpt, net, trained_steps=cfg.iterations, adam=adam)
        loss_csv = tmp_path / f"run{run}.csv"
        hist.write_csv(loss_csv)
        prob = forward_volume(net, liver_input_volume(cases[0].dce))
        mask = postprocess_liver(prob)
        from hseg.metrics import evaluate_segmentation, write_seg_reports_csv
        rep_csv = tmp_path / f"run{run}_report.csv"
        write_seg_reports_csv(rep_csv, [evaluate_segmentation("case_000", mask,
                                                              cases[0].liver)])
        artifacts.append((ckpt.read_bytes(), loss_csv.read_bytes(),
                          rep_csv.read_bytes()))

    ok = artifacts[0] == artifacts[1]
    report("determinism", ok,
           "(identical checkpoints, loss histories, and metric reports)")
