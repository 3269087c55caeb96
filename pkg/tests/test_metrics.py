"""Segmentation metrics, detection matching, FROC, and size histograms."""

import numpy as np
import pytest

from hseg.errors import DataError, GeometryError
from hseg.metrics import (FROC_THRESHOLDS, FrocCurve, FrocPoint,
                          boundary_points, detection_match, dsc,
                          evaluate_segmentation, froc, hd95, rvd,
                          size_histogram, write_froc_csv, write_seg_reports_csv)
from hseg.postprocess import label_objects_26
from hseg.volume import BinaryMask, Volume

from oracles import (boundary_points_naive, hausdorff_max_all_pairs,
                     hd95_all_pairs)


def mask_from(arr, spacing=(1, 1, 1)):
    return BinaryMask.from_array(np.asarray(arr), spacing)


def random_mask(rng, spacing=(1, 1, 1), p=0.35, max_side=10):
    dims = rng.integers(4, max_side + 1, size=3)
    arr = rng.random(tuple(dims)) < p
    if not arr.any():
        arr[0, 0, 0] = True
    return mask_from(arr, spacing)


class TestDsc:
    def test_identical_masks(self, rng):
        m = random_mask(rng)
        assert dsc(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((2, 4, 4)); a[0, 0, 0] = 1
        b = np.zeros((2, 4, 4)); b[1, 2, 2] = 1
        assert dsc(mask_from(a), mask_from(b)) == 0.0

    def test_half_overlap(self):
        a = np.zeros((1, 2, 4)); a[0, 0, 0] = a[0, 0, 1] = 1
        b = np.zeros((1, 2, 4)); b[0, 0, 1] = b[0, 0, 2] = 1
        assert dsc(mask_from(a), mask_from(b)) == 0.5

    def test_symmetry_and_errors(self, rng):
        a, b = random_mask(rng), None
        b = mask_from(rng.random(a.data.shape) < 0.5, a.spacing)
        assert dsc(a, b) == dsc(b, a)
        empty = mask_from(np.zeros(a.data.shape), a.spacing)
        with pytest.raises(DataError):
            dsc(empty, empty)
        with pytest.raises(GeometryError):
            dsc(a, mask_from(np.zeros((1, 2, 2))))


class TestRvd:
    def test_identical(self, rng):
        m = random_mask(rng)
        assert rvd(m, m) == 0.0

    def test_double_volume(self):
        a = np.zeros((1, 2, 4)); a[0, 0, :4] = 1
        b = np.zeros((1, 2, 4)); b[0, 0, :2] = 1
        assert rvd(mask_from(a), mask_from(b)) == 100.0

    def test_fifteen_percent_undersegmentation(self):
        a = np.zeros((5, 10, 10)); a.ravel()[:85] = 1
        b = np.zeros((5, 10, 10)); b.ravel()[:100] = 1
        assert rvd(mask_from(a), mask_from(b)) == pytest.approx(-15.0)

    def test_empty_reference(self, rng):
        m = random_mask(rng)
        with pytest.raises(DataError):
            rvd(m, mask_from(np.zeros(m.data.shape), m.spacing))


class TestBoundary:
    def test_single_voxel_is_its_own_boundary(self):
        a = np.zeros((3, 3, 3)); a[1, 1, 1] = 1
        pts = boundary_points(mask_from(a, spacing=(2, 3, 4)))
        assert pts.shape == (1, 3)
        assert tuple(pts[0]) == (1 * 2, 1 * 3, 1 * 4)

    def test_solid_cube_has_26_surface_voxels(self):
        a = np.zeros((5, 5, 5)); a[1:4, 1:4, 1:4] = 1
        assert boundary_points(mask_from(a)).shape[0] == 27 - 1

    def test_grid_border_voxels_are_boundary(self):
        a = np.ones((2, 2, 2))
        assert boundary_points(mask_from(a)).shape[0] == 8

    def test_random_masks_match_neighbor_check_oracle(self, rng):
        for _ in range(15):
            m = random_mask(rng, spacing=(1.5, 1.0, 2.0))
            got = boundary_points(m)
            want = boundary_points_naive(m.data, m.spacing)
            assert sorted(map(tuple, got)) == sorted(map(tuple, want))

    def test_empty_mask(self):
        with pytest.raises(DataError):
            boundary_points(mask_from(np.zeros((2, 2, 2))))


class TestHd95:
    def test_identical_masks_zero(self, rng):
        m = random_mask(rng)
        assert hd95(m, m) == 0.0

    def test_two_voxels_three_apart(self):
        a = np.zeros((3, 3, 8)); a[1, 1, 1] = 1
        b = np.zeros((3, 3, 8)); b[1, 1, 4] = 1
        spacing = (1.543, 1.543, 2.0)
        got = hd95(mask_from(a, spacing), mask_from(b, spacing))
        assert got == pytest.approx(3 * 1.543, abs=1e-6)

    def test_random_masks_equal_all_pairs_brute_force(self, rng):
        for _ in range(10):
            spacing = (1.543, 1.543, 2.0)
            a = random_mask(rng, spacing=spacing)
            b = mask_from(rng.random(a.data.shape) < 0.3, spacing)
            if not b.data.any():
                continue
            assert hd95(a, b) == pytest.approx(hd95_all_pairs(a.data, b.data, spacing),
                                               abs=1e-12)

    def test_never_exceeds_max_hausdorff(self, rng):
        for _ in range(8):
            a = random_mask(rng)
            b = mask_from(rng.random(a.data.shape) < 0.4, a.spacing)
            if not b.data.any():
                continue
            assert hd95(a, b) <= hausdorff_max_all_pairs(a.data, b.data, a.spacing) + 1e-12

    def test_symmetric(self, rng):
        a = random_mask(rng)
        b = mask_from(rng.random(a.data.shape) < 0.4, a.spacing)
        if b.data.any():
            assert hd95(a, b) == hd95(b, a)


class TestDetectionMatch:
    def _objs(self, arr, spacing=(1, 1, 1)):
        return label_objects_26(mask_from(arr, spacing))

    def test_perfect_prediction(self):
        arr = np.zeros((3, 8, 8))
        arr[1, 1:3, 1:3] = 1
        arr[1, 5:7, 5:7] = 1
        truth = self._objs(arr)
        tpr, fp, flags = detection_match(truth, truth)
        assert tpr == 1.0 and fp == 0 and flags == [True, True]

    def test_one_object_spanning_two_lesions(self):
        truth = np.zeros((1, 5, 9))
        truth[0, 1:4, 1:3] = 1
        truth[0, 1:4, 6:8] = 1
        pred = np.zeros((1, 5, 9))
        pred[0, 2, :] = 1  # a bar crossing both
        tpr, fp, flags = detection_match(self._objs(pred), self._objs(truth))
        assert tpr == 1.0 and fp == 0 and flags == [True, True]

    def test_false_positive_counting(self):
        truth = np.zeros((2, 6, 6)); truth[0, 1:3, 1:3] = 1
        pred = np.zeros((2, 6, 6)); pred[1, 4:6, 4:6] = 1
        tpr, fp, flags = detection_match(self._objs(pred), self._objs(truth))
        assert tpr == 0.0 and fp == 1 and flags == [False]

    def test_randomized_against_pairwise_overlap_oracle(self, rng):
        for _ in range(15):
            shape = tuple(rng.integers(5, 10, size=3))
            truth_arr = rng.random(shape) < 0.15
            pred_arr = rng.random(shape) < 0.15
            if not truth_arr.any():
                truth_arr[0, 0, 0] = True
            truth = self._objs(truth_arr)
            pred = self._objs(pred_arr)
            tpr, fp, flags = detection_match(pred, truth)
            # oracle: exhaustive pairwise voxel-set intersections
            detected = 0
            for t in truth:
                t_set = set(t.indices.tolist())
                detected += any(t_set & set(p.indices.tolist()) for p in pred)
            fp_oracle = sum(
                1 for p in pred
                if not any(set(p.indices.tolist()) & set(t.indices.tolist())
                           for t in truth))
            assert tpr == pytest.approx(detected / len(truth))
            assert fp == fp_oracle

    def test_empty_truth_errors(self):
        pred = self._objs(np.ones((1, 2, 2)))
        with pytest.raises(DataError):
            detection_match(pred, [])


def _case(rng, lesion_boxes, shape=(8, 24, 24)):
    """Build (prob volume, lesion mask, liver mask) with box lesions."""
    liver = np.zeros(shape, dtype=np.uint8)
    liver[1:7, 2:22, 2:22] = 1
    lesions = np.zeros(shape, dtype=np.uint8)
    for (z0, z1, y0, y1, x0, x1) in lesion_boxes:
        lesions[z0:z1, y0:y1, x0:x1] = 1
    prob = lesions.astype(np.float32)
    return (Volume.from_array(prob[None]), mask_from(lesions), mask_from(liver))


class TestFroc:
    def test_threshold_grid_is_fixed(self):
        assert FROC_THRESHOLDS == (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0)
        with pytest.raises(DataError):
            FrocCurve(points=tuple(
                FrocPoint(t, 1.0, 0.0, 0) for t in (0.5, 0.4)))

    def test_perfect_probability_maps(self, rng):
        cases = [_case(rng, [(2, 5, 4, 8, 4, 8)]),
                 _case(rng, [(2, 5, 6, 10, 6, 10), (3, 6, 14, 18, 14, 18)])]
        probs = [c[0] for c in cases]
        truths = [c[1] for c in cases]
        livers = [c[2] for c in cases]
        curve = froc(probs, truths, livers)
        assert len(curve.points) == 10
        for p in curve.points:
            assert p.mean_tpr == 1.0
            assert p.median_fpc == 0.0 and p.total_fp == 0

    def test_zero_maps_give_zero_tpr(self, rng):
        prob, truth, liver = _case(rng, [(2, 5, 4, 8, 4, 8)])
        zero = Volume.from_array(np.zeros_like(prob.data))
        curve = froc([zero], [truth], [liver])
        assert all(p.mean_tpr == 0.0 for p in curve.points)

    def test_endpoints_match_per_case_recomputation(self, rng):
        from hseg.postprocess import postprocess_detect
        prob_arr = rng.random((8, 24, 24)).astype(np.float32) * 0.8
        prob_arr[2:5, 5:9, 5:9] = 0.95
        case_prob = Volume.from_array(prob_arr[None])
        _, truth, liver = _case(rng, [(2, 5, 5, 9, 5, 9)])
        curve = froc([case_prob], [truth], [liver])
        for t in (0.9, 0.0):
            pred = postprocess_detect(case_prob, liver, t=t)
            tpr, fp, _ = detection_match(pred, label_objects_26(truth))
            point = next(p for p in curve.points if p.threshold == t)
            assert point.mean_tpr == pytest.approx(tpr)
            assert point.total_fp == fp

    def test_jobs_parallel_matches_serial(self, rng):
        prob, truth, liver = _case(rng, [(2, 5, 4, 8, 4, 8)])
        serial = froc([prob], [truth], [liver], jobs=1)
        parallel = froc([prob], [truth], [liver], jobs=3)
        assert serial == parallel

    def test_premorphology_tpr_monotone_in_threshold(self, rng):
        """Without morphology, lesion-level TPR cannot increase with T."""
        from hseg.postprocess import threshold_prob
        prob_arr = rng.random((6, 16, 16)).astype(np.float32)
        prob = Volume.from_array(prob_arr[None])
        truth_arr = np.zeros((6, 16, 16)); truth_arr[2:4, 4:8, 4:8] = 1
        truth_objs = label_objects_26(mask_from(truth_arr))
        tprs = []
        for t in sorted(FROC_THRESHOLDS):  # ascending T
            pred = label_objects_26(threshold_prob(prob, t))
            tpr, _, _ = detection_match(pred, truth_objs)
            tprs.append(tpr)
        assert all(a >= b for a, b in zip(tprs, tprs[1:]))


class TestSizeHistogram:
    def _obj(self, n_voxels, spacing=(10.0, 10.0, 10.0)):
        # 10 mm cubic voxels -> 1 ml per voxel
        from hseg.postprocess import DetectionObject
        return DetectionObject(label=1, indices=np.arange(n_voxels),
                               dims=(100, 10, 10), spacing=spacing)

    def test_single_small_lesion(self):
        # one 0.5 ml detected lesion with edges [0, 1, 2]
        obj = self._obj(1, spacing=(10.0, 10.0, 5.0))
        totals, detected = size_histogram([obj], [True], bin_edges_ml=(0, 1, 2))
        assert totals.tolist() == [1, 0, 0]
        assert detected.tolist() == [1, 0, 0]

    def test_empty_input(self):
        totals, detected = size_histogram([], [], bin_edges_ml=(0, 1, 2))
        assert totals.tolist() == [0, 0, 0] and detected.tolist() == [0, 0, 0]

    def test_overflow_bin_and_random_binning_oracle(self, rng):
        edges = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0)
        objs = [self._obj(int(v)) for v in rng.integers(1, 30, size=40)]
        flags = (rng.random(40) < 0.5).tolist()
        totals, detected = size_histogram(objs, flags, bin_edges_ml=edges)
        assert totals.sum() == 40
        # recompute full oracle histogram
        want_tot = [0] * len(edges)
        want_det = [0] * len(edges)
        for obj, flag in zip(objs, flags):
            ml = obj.volume_ml
            b = max(i for i, e in enumerate(edges) if ml >= e)
            want_tot[b] += 1
            want_det[b] += int(flag)
        assert totals.tolist() == want_tot
        assert detected.tolist() == want_det

    def test_unsorted_edges_error(self):
        with pytest.raises(DataError):
            size_histogram([], [], bin_edges_ml=(1.0, 0.5))


class TestReports:
    def test_seg_report_csv(self, tmp_path, rng):
        m = random_mask(rng)
        report = evaluate_segmentation("case_7", m, m)
        assert report.dsc == 1.0 and report.rvd_percent == 0.0 and report.hd95_mm == 0.0
        path = tmp_path / "seg.csv"
        write_seg_reports_csv(path, [report])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "case_id,dsc,rvd_percent,hd95_mm"
        assert lines[1].startswith("case_7,1.000000,0.000000,0.000000")

    def test_froc_csv_and_svg(self, tmp_path, rng):
        prob, truth, liver = _case(rng, [(2, 5, 4, 8, 4, 8)])
        curve = froc([prob], [truth], [liver])
        csv_path = tmp_path / "froc.csv"
        write_froc_csv(csv_path, curve)
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 11
        assert lines[1].startswith("0.90,") and lines[-1].startswith("0.00,")
        from hseg.metrics import write_froc_svg
        svg_path = tmp_path / "froc.svg"
        write_froc_svg(svg_path, {"dual": curve})
        assert svg_path.read_text().lstrip().startswith("<?xml")
