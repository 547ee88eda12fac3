import json
import math

import numpy as np
import pytest
from scipy import stats

from rascore.data import Radiograph
from rascore.joints import (
    MIDDLE_TIP,
    N_LANDMARKS,
    N_PER_HAND,
    HeatmapStack,
    LandmarkSet,
    align_to_standard,
    crop_joint_patches,
    crop_square,
    decode_heatmaps,
    default_joint_patch_spec,
    estimate_pixel_spacing,
    hand_offset,
    hands_crossed,
    load_joint_patch_spec,
    load_landmarks,
    mre_sdr,
    perturb_landmarks,
    render_target_heatmaps,
    resize_nearest,
    save_joint_patch_spec,
    save_landmarks,
)

from conftest import random_landmarks


class TestSchema:
    def test_counts(self):
        assert N_PER_HAND == 37 and N_LANDMARKS == 74

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            LandmarkSet(np.zeros((37, 2)))
        with pytest.raises(ValueError):
            LandmarkSet(np.full((74, 2), np.nan))

    def test_hand_views(self, rng):
        lms = random_landmarks(rng)
        np.testing.assert_array_equal(lms.hand("left"), lms.points[:37])
        np.testing.assert_array_equal(lms.hand("right"), lms.points[37:])
        with pytest.raises(ValueError):
            hand_offset("middle")

    def test_hands_crossed(self):
        pts = np.zeros((74, 2))
        pts[:37, 0] = 300.0  # left block on the right side of the image
        pts[37:, 0] = 50.0
        pts[:, 1] = np.arange(74)  # keep wrist endpoints distinct
        assert hands_crossed(LandmarkSet(pts))
        assert not hands_crossed(LandmarkSet(pts[::-1].copy()))

    def test_save_load_round_trip(self, tmp_path, rng):
        lms = random_landmarks(rng)
        path = tmp_path / "lms.csv"
        save_landmarks(lms, path)
        np.testing.assert_array_equal(load_landmarks(path).points, lms.points)

    def test_load_missing_index(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0,1.0,2.0\n", encoding="utf-8")
        with pytest.raises(ValueError, match="missing"):
            load_landmarks(path)

    def test_load_bad_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0,1.0\n", encoding="utf-8")
        with pytest.raises(ValueError, match=":1"):
            load_landmarks(path)


class TestHeatmaps:
    def test_peak_at_landmark(self, rng):
        lms = random_landmarks(rng, width=128, height=96)
        stack = render_target_heatmaps(lms, (96, 128), sigma=2.0)
        for c, (x, y) in enumerate(lms.points):
            iy, ix = np.unravel_index(np.argmax(stack.channels[c]), (96, 128))
            assert abs(ix - x) <= 0.51 and abs(iy - y) <= 0.51
            assert stack.channels[c].max() <= 1.0

    def test_sigma_zero_one_hot(self, rng):
        lms = random_landmarks(rng, width=64, height=64)
        stack = render_target_heatmaps(lms, (64, 64), sigma=0.0)
        sums = stack.channels.reshape(74, -1).sum(axis=1)
        np.testing.assert_array_equal(sums, np.ones(74))
        assert set(np.unique(stack.channels)) <= {0.0, 1.0}

    def test_channel_mass_matches_gaussian_integral(self):
        pts = np.tile([[100.0, 100.0]], (74, 1))
        pts[:, 1] += np.arange(74) * 0.01  # distinct wrist endpoints
        sigma = 3.0
        stack = render_target_heatmaps(LandmarkSet(pts), (200, 200), sigma=sigma)
        expected = 2.0 * math.pi * sigma * sigma
        assert stack.channels[0].sum() == pytest.approx(expected, rel=0.01)

    def test_decode_averages_two_stacks(self):
        a = np.zeros((74, 128, 128))
        b = np.zeros((74, 64, 64))
        a[:, 100, 100] = 1.0  # argmax at (100, 100), scale 1
        b[:, 52, 52] = 1.0  # argmax at (104, 104) in image coords, scale 2
        decoded = decode_heatmaps(HeatmapStack(a, 1.0), HeatmapStack(b, 2.0))
        np.testing.assert_allclose(decoded.points, np.full((74, 2), 102.0))

    def test_decode_rejects_flat_channel(self):
        flat = HeatmapStack(np.zeros((74, 8, 8)), 1.0)
        with pytest.raises(ValueError):
            decode_heatmaps(flat, flat)

    def test_render_decode_round_trip(self, rng):
        for _ in range(5):
            lms = random_landmarks(rng, width=160, height=120)
            hi = render_target_heatmaps(lms, (120, 160), sigma=2.0, scale=1.0)
            lo = render_target_heatmaps(lms, (60, 80), sigma=1.0, scale=2.0)
            err = np.hypot(*(decode_heatmaps(hi, lo).points - lms.points).T)
            assert err.max() <= 1.0 + 1e-9


class TestSpacingAndAlignment:
    def _lms_with_wrist(self, rng, dist, side="left"):
        lms = random_landmarks(rng)
        pts = lms.points.copy()
        off = hand_offset(side)
        pts[off] = (10.0, 10.0)
        pts[off + 1] = (10.0 + dist, 10.0)
        return LandmarkSet(pts)

    def test_spacing_examples(self, rng):
        assert estimate_pixel_spacing(self._lms_with_wrist(rng, 500.0), "left") == pytest.approx(0.1)
        assert estimate_pixel_spacing(self._lms_with_wrist(rng, 250.0), "left") == pytest.approx(0.2)

    def test_spacing_halves_when_image_doubles(self, rng):
        lms = random_landmarks(rng)
        doubled = LandmarkSet(lms.points * 2.0)
        for side in ("left", "right"):
            assert estimate_pixel_spacing(doubled, side) == pytest.approx(
                estimate_pixel_spacing(lms, side) / 2.0
            )

    def test_degenerate_wrist_rejected(self, rng):
        lms = self._lms_with_wrist(rng, 0.0)
        with pytest.raises(ValueError):
            estimate_pixel_spacing(lms, "left")

    def _upright_lms(self):
        """Two simple upright hands: wrist at bottom, middle fingertip straight above."""
        pts = np.zeros((74, 2))
        for off, cx in ((0, 100.0), (37, 300.0)):
            pts[off] = (cx - 20, 250.0)
            pts[off + 1] = (cx + 20, 250.0)
            pts[off + MIDDLE_TIP] = (cx, 100.0)
            for i in range(37):
                if i not in (0, 1, MIDDLE_TIP):
                    pts[off + i] = (cx + (i % 5) * 3, 200.0 + (i % 7) * 4)
        return LandmarkSet(pts)

    def test_upright_is_near_identity(self, rng):
        img = Radiograph("a", rng.integers(0, 255, (320, 400)).astype(np.uint8))
        lms = self._upright_lms()
        aligned, new_lms, _ = align_to_standard(img, lms)
        np.testing.assert_allclose(new_lms.points, lms.points, atol=1e-6)
        np.testing.assert_allclose(aligned.pixels, img.pixels, atol=1e-3)

    def test_rotation_recovered(self, rng):
        img = Radiograph("a", rng.integers(0, 255, (400, 400)).astype(np.uint8))
        lms = self._upright_lms()
        # rotate landmarks by 90 degrees about the image center
        c = np.array([(400 - 1) / 2.0, (400 - 1) / 2.0])
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        rotated = LandmarkSet((lms.points - c) @ rot.T + c)
        _, new_lms, transform = align_to_standard(img, rotated)
        np.testing.assert_allclose(new_lms.points, lms.points, atol=1e-6)
        # transform round-trips through its inverse
        back = transform.inverse().apply_points(new_lms.points)
        np.testing.assert_allclose(back, rotated.points, atol=1e-6)

    def test_landmarks_follow_pixels(self, rng):
        """A bright dot placed at a landmark stays at that landmark after alignment."""
        lms = self._upright_lms()
        c = np.array([199.5, 199.5])
        angle = 0.3
        rot = np.array([[math.cos(angle), -math.sin(angle)],
                        [math.sin(angle), math.cos(angle)]])
        rotated = LandmarkSet((lms.points - c) @ rot.T + c)
        pixels = np.zeros((400, 400), np.uint8)
        tip = rotated.points[MIDDLE_TIP]
        pixels[int(round(tip[1])), int(round(tip[0]))] = 255
        aligned, new_lms, _ = align_to_standard(Radiograph("a", pixels), rotated)
        iy, ix = np.unravel_index(np.argmax(aligned.pixels), aligned.pixels.shape)
        nx, ny = new_lms.points[MIDDLE_TIP]
        assert math.hypot(ix - nx, iy - ny) <= 1.5


class TestJointPatchSpec:
    def test_default_composition(self):
        spec = default_joint_patch_spec()
        assert len(spec.entries) == 25
        singles = [e for e in spec.entries if len(e.anchors) == 1]
        groups = [e for e in spec.entries if len(e.anchors) == 3]
        assert len(singles) == 19 and len(groups) == 6
        assert all(e.side_mm == 24.0 for e in singles)
        assert all(e.side_mm == 36.0 for e in groups)
        assert len({e.name for e in spec.entries}) == 25

    def test_json_round_trip(self, tmp_path):
        spec = default_joint_patch_spec()
        path = tmp_path / "spec.json"
        save_joint_patch_spec(spec, path)
        assert load_joint_patch_spec(path) == spec
        json.loads(path.read_text())  # stored as plain JSON

    def test_bad_entry_counts(self):
        from rascore.joints import JointPatchEntry, JointPatchSpec

        with pytest.raises(ValueError):
            JointPatchSpec((JointPatchEntry("one", (0,), 24.0),))
        with pytest.raises(ValueError):
            JointPatchEntry("bad", (99,), 24.0)
        with pytest.raises(ValueError):
            JointPatchEntry("bad", (0,), -1.0)


class TestCropping:
    def test_bag_size_and_order(self, rng):
        img = Radiograph("a", rng.integers(0, 255, (320, 400)).astype(np.uint8))
        lms = random_landmarks(rng)
        bag = crop_joint_patches(img, lms, default_joint_patch_spec(), spacing=0.4, out_size=31)
        assert len(bag) == 50
        assert bag.scheme == 2
        assert bag.patches[0].tag.startswith("left:")
        assert bag.patches[25].tag.startswith("right:")
        assert all(p.pixels.shape == (31, 31) for p in bag.patches)

    def test_patch_centered_on_landmark(self, rng):
        pixels = np.zeros((320, 400), np.uint8)
        lms = random_landmarks(rng)
        spec = default_joint_patch_spec()
        # put a bright dot at the left-hand anchor of the first single-landmark entry
        anchor = spec.entries[0].anchors[0]
        x, y = lms.points[anchor]
        pixels[int(round(y)), int(round(x))] = 255
        bag = crop_joint_patches(Radiograph("a", pixels), lms, spec, spacing=0.5, out_size=49)
        patch = bag.patches[0].pixels
        iy, ix = np.unravel_index(np.argmax(patch), patch.shape)
        assert patch.max() == 255
        assert abs(ix - 24) <= 2 and abs(iy - 24) <= 2

    def test_odd_sides(self):
        window, rect, padded = crop_square(np.zeros((100, 100), np.uint8), 50, 50, 25)
        assert window.shape == (25, 25)
        from rascore.geom import Rect

        assert rect == Rect(38, 38, 25, 25)
        assert not padded

    def test_edge_padding_flag(self):
        pixels = np.arange(100, dtype=np.uint8).reshape(10, 10)
        window, _, padded = crop_square(pixels, 0, 0, 7)
        assert padded and window.shape == (7, 7)
        assert window[3, 3] == pixels[0, 0]  # center lands on the corner pixel

    def test_translation_equivariance(self, rng):
        base = rng.integers(0, 255, (300, 360)).astype(np.uint8)
        shifted = np.roll(base, (17, 23), axis=(0, 1))
        lms = random_landmarks(rng, width=280, height=220, margin=60)
        bag_a = crop_joint_patches(
            Radiograph("a", base), lms, default_joint_patch_spec(), spacing=0.5, out_size=33
        )
        bag_b = crop_joint_patches(
            Radiograph("b", shifted), lms.translated(23, 17),
            default_joint_patch_spec(), spacing=0.5, out_size=33,
        )
        for pa, pb in zip(bag_a.patches, bag_b.patches):
            if pa.padded or pb.padded:
                continue
            np.testing.assert_array_equal(pa.pixels, pb.pixels)

    def test_resize_nearest_rotation_commutes(self, rng):
        patch = rng.integers(0, 255, (45, 45)).astype(np.uint8)
        a = np.rot90(resize_nearest(patch, 33))
        b = resize_nearest(np.rot90(patch).copy(), 33)
        np.testing.assert_array_equal(a, b)

    def test_spacing_validation(self, rng):
        img = Radiograph("a", np.zeros((100, 100), np.uint8))
        with pytest.raises(ValueError):
            crop_joint_patches(img, random_landmarks(rng), default_joint_patch_spec(), spacing=0.0)


class TestPerturbation:
    def test_sd_zero_is_identity(self, rng):
        lms = random_landmarks(rng)
        out = perturb_landmarks(lms, np.zeros(74), spacing=0.5, rng=rng)
        np.testing.assert_array_equal(out.points, lms.points)

    def test_needs_74_sds(self, rng):
        with pytest.raises(ValueError):
            perturb_landmarks(random_landmarks(rng), np.zeros(10), 0.5, rng)
        with pytest.raises(ValueError):
            perturb_landmarks(random_landmarks(rng), np.full(74, -1.0), 0.5, rng)

    def test_half_normal_radius_mean(self, rng):
        lms = LandmarkSet(np.tile([[500.0, 500.0]], (74, 1))
                          + np.arange(74)[:, None] * [0.0, 0.01])
        sd_mm = 2.0
        spacing = 0.5
        radii = []
        for _ in range(300):
            out = perturb_landmarks(lms, np.full(74, sd_mm), spacing, rng)
            radii.extend(np.hypot(*(out.points - lms.points).T) * spacing)
        expected = sd_mm * math.sqrt(2.0 / math.pi)  # half-normal mean
        assert np.mean(radii) == pytest.approx(expected, rel=0.03)

    def test_directions_uniform(self, rng):
        lms = LandmarkSet(np.tile([[500.0, 500.0]], (74, 1))
                          + np.arange(74)[:, None] * [0.0, 0.01])
        angles = []
        for _ in range(200):
            out = perturb_landmarks(lms, np.full(74, 2.0), 0.5, rng)
            d = out.points - lms.points
            keep = np.hypot(d[:, 0], d[:, 1]) > 1e-9
            angles.extend(np.arctan2(d[keep, 1], d[keep, 0]))
        counts, _ = np.histogram(angles, bins=8, range=(-np.pi, np.pi))
        p = stats.chisquare(counts).pvalue
        assert p > 1e-4


class TestMetrics:
    def test_identity(self, rng):
        lms = random_landmarks(rng)
        mre, sdr = mre_sdr(lms, lms, spacing=0.3)
        assert mre == 0.0
        assert sdr == (100.0, 100.0, 100.0, 100.0)

    def test_single_3mm_error(self, rng):
        truth = random_landmarks(rng)
        pts = truth.points.copy()
        spacing = 0.5
        pts[10, 0] += 3.0 / spacing  # exactly 3 mm off on one landmark
        mre, sdr = mre_sdr(LandmarkSet(pts), truth, spacing)
        assert mre == pytest.approx(3.0 / 74)
        assert sdr[0] == pytest.approx(73 / 74 * 100)  # 2 mm threshold misses it
        assert sdr[1] == pytest.approx(100.0)  # inclusive at exactly 3 mm
        assert sdr[2] == sdr[3] == pytest.approx(100.0)

    def test_brute_force_oracle(self, rng):
        truth = random_landmarks(rng)
        pred = LandmarkSet(truth.points + rng.normal(0, 3, (74, 2)))
        spacing = 0.7
        mre, sdr = mre_sdr(pred, truth, spacing)
        errs = [
            math.hypot(px - tx, py - ty) * spacing
            for (px, py), (tx, ty) in zip(pred.points, truth.points)
        ]
        assert mre == pytest.approx(sum(errs) / 74, abs=1e-12)
        for s, thr in zip(sdr, (2.0, 3.0, 4.0, 10.0)):
            assert s == pytest.approx(sum(e <= thr for e in errs) / 74 * 100, abs=1e-12)

    def test_sdr_monotone(self, rng):
        for _ in range(10):
            truth = random_landmarks(rng)
            pred = LandmarkSet(truth.points + rng.normal(0, 5, (74, 2)))
            _, sdr = mre_sdr(pred, truth, spacing=0.5)
            assert list(sdr) == sorted(sdr)
