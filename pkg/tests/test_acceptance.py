"""Acceptance suite: one test per shipping criterion, named test_criterion_XX_*.

The heavyweight end-to-end criteria share module-scoped fixtures (synthetic
dataset, patch classifier, feature bags) so the whole file stays within the
stated runtime budgets on a commodity CPU.
"""

import math
import time

import numpy as np
import pytest
import torch

from rascore.abmil import GatedAbmil, ensemble_predict, explain, gated_attention, predict
from rascore.data import ScoreStandardizer, fit_standardizer, split_fingerprint
from rascore.evaluation import classification_report, dice, mae, pcc, rmse
from rascore.foreground import ForegroundMask, generate_mask, is_background, postprocess_mask
from rascore.geom import Rect
from rascore.joints import (
    LandmarkSet,
    crop_square,
    decode_heatmaps,
    default_joint_patch_spec,
    estimate_pixel_spacing,
    mre_sdr,
    render_target_heatmaps,
    resize_nearest,
)
from rascore.landmark_model import LandmarkTrainConfig, predict_landmarks, train_landmark_model
from rascore.patch_classifier import (
    PatchClassifier,
    PCTrainConfig,
    abnormality_direction,
    train_patch_classifier,
    truncate_to_feature_extractor,
)
from rascore.pipeline import BagBuilder, build_feature_bags, pc_data_scheme1, pc_data_scheme2
from rascore.synthetic import SyntheticSpec, generate, oracle_best_bag
from rascore.tiling import Tile, rank_and_sample
from rascore.training import TrainConfig, train_abmil, write_history

from conftest import random_landmarks


# ---------------------------------------------------------------------------
# Shared end-to-end fixtures (criteria 6, 7, 8)

@pytest.fixture(scope="module")
def e2e_data():
    """250 synthetic dual-hand images: 170 train / 30 val / 50 test."""
    samples = generate(SyntheticSpec(seed=6), 250, "e2e")
    return {
        "samples": samples,
        "train": samples[:170],
        "val": samples[170:200],
        "test": samples[200:],
    }


@pytest.fixture(scope="module")
def scheme1_state(e2e_data):
    """Scheme 1 pipeline: masks -> 3-class tile classifier -> ranked bags -> ABMIL."""
    torch.manual_seed(0)  # model construction draws from the ambient generator
    rng = np.random.default_rng(0)
    fit = e2e_data["train"] + e2e_data["val"]
    masks = [postprocess_mask(generate_mask(s.image)) for s in fit]
    patches, labels = pc_data_scheme1([s.image for s in fit], masks, rng)
    clf = PatchClassifier("small-conv", n_classes=3, feature_dim=64, input_size=40)
    clf, _ = train_patch_classifier(patches, labels, clf, PCTrainConfig(epochs=30, lr=0.03))

    builder = BagBuilder(
        scheme=1, extractor=truncate_to_feature_extractor(clf), classifier=clf,
        k=30, patch_size=40,
    )
    tr_imgs = [s.image for s in e2e_data["train"]]
    _, tr_fb = build_feature_bags(builder, tr_imgs)
    _, va_fb = build_feature_bags(builder, [s.image for s in e2e_data["val"]])
    std = fit_standardizer(
        [s.score for s in tr_imgs], split_id=split_fingerprint([s.id for s in tr_imgs])
    )
    cfg = TrainConfig(
        scheme=1, k=30, epochs=30, batch_size=4, lr=0.01,
        attention_warm_start_scale=1.0, seed=0,
    )
    result = train_abmil(
        tr_fb, va_fb, std, cfg, attention_direction=abnormality_direction(clf)
    )
    test_bags = [builder.build(s.image) for s in e2e_data["test"]]
    truths = [s.image.score for s in e2e_data["test"]]
    preds = [std.invert(predict(result.model, fb.features)[0]) for _, fb in test_bags]
    return {
        "classifier": clf,
        "tr_fb": tr_fb,
        "va_fb": va_fb,
        "std": std,
        "model": result.model,
        "test_bags": test_bags,
        "preds": preds,
        "truths": truths,
        "cfg": cfg,
    }


# ---------------------------------------------------------------------------

def test_criterion_01_metric_oracles(rng):
    start = time.time()
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        p = rng.normal(0, 10, n)
        t = rng.normal(0, 10, n)
        if np.std(p) == 0 or np.std(t) == 0:
            continue
        # brute-force recomputation from first principles
        mp, mt = sum(p) / n, sum(t) / n
        cov = sum((a - mp) * (b - mt) for a, b in zip(p, t))
        ref_pcc = cov / math.sqrt(
            sum((a - mp) ** 2 for a in p) * sum((b - mt) ** 2 for b in t)
        )
        ref_mae = sum(abs(a - b) for a, b in zip(p, t)) / n
        ref_rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / n)
        assert abs(pcc(p, t) - ref_pcc) < 1e-9
        assert abs(mae(p, t) - ref_mae) < 1e-9
        assert abs(rmse(p, t) - ref_rmse) < 1e-9
        assert rmse(p, t) >= mae(p, t) - 1e-12
    for _ in range(50):
        a = rng.random((12, 12)) > 0.5
        b = rng.random((12, 12)) > 0.5
        inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
        total = int(a.sum() + b.sum())
        ref = 1.0 if total == 0 else 2 * inter / total
        assert abs(dice(a, b) - ref) < 1e-9
    for _ in range(50):
        n = int(rng.integers(1, 30))
        truth = list(rng.integers(0, 3, n))
        pred = list(rng.integers(0, 3, n))
        ref_acc = sum(1 for x, y in zip(pred, truth) if x == y) / n
        assert abs(classification_report(pred, truth).accuracy - ref_acc) < 1e-9
    assert time.time() - start < 10


def test_criterion_02_gated_attention_correctness(rng):
    start = time.time()
    d = 8
    for k in (1, 3, 8):
        v = torch.tensor(rng.normal(0, 1, (4, d)))
        u = torch.tensor(rng.normal(0, 1, (4, d)))
        w = torch.tensor(rng.normal(0, 1, 4))
        c = torch.tensor(rng.normal(0, 1, k))
        h0 = rng.normal(0, 1, (k, d))

        h = torch.tensor(h0, requires_grad=True)
        a = gated_attention(h, v, u, w)
        assert abs(float(a.sum().detach()) - 1.0) < 1e-6
        (a * c).sum().backward()
        analytic = h.grad.numpy()

        def f(h_np):
            return float((gated_attention(torch.tensor(h_np), v, u, w) * c).sum())

        eps = 1e-6
        scale = max(1.0, np.abs(analytic).max())
        for i in range(k):
            for j in range(d):
                hp, hm = h0.copy(), h0.copy()
                hp[i, j] += eps
                hm[i, j] -= eps
                fd = (f(hp) - f(hm)) / (2 * eps)
                assert abs(fd - analytic[i, j]) / scale < 1e-4

    model = GatedAbmil(feature_dim=d, attention_dim=16, dropout=0.0).double()
    h = rng.normal(0, 1, (8, d))
    perm = rng.permutation(8)
    p1, _ = predict(model, h)
    p2, _ = predict(model, h[perm])
    assert abs(p1 - p2) < 1e-6
    # duplication invariance: stacking the bag on itself leaves the prediction alone
    p_dup, _ = predict(model, np.vstack([h, h]))
    assert abs(p1 - p_dup) < 1e-6
    assert time.time() - start < 30


def test_criterion_03_geometry_round_trips(rng):
    start = time.time()
    for _ in range(100):
        lms = random_landmarks(rng, width=160, height=120)
        hi = render_target_heatmaps(lms, (120, 160), sigma=2.0, scale=1.0)
        lo = render_target_heatmaps(lms, (60, 80), sigma=1.0, scale=2.0)
        err = np.hypot(*(decode_heatmaps(hi, lo).points - lms.points).T)
        assert err.max() <= 1.0 + 1e-9

    # crop equivariance: translation, pixel-identical
    base = rng.integers(0, 255, (200, 200)).astype(np.uint8)
    shifted = np.roll(base, (9, 13), axis=(0, 1))
    for cx, cy, side in ((80, 90, 25), (100, 100, 33), (60, 120, 41)):
        w0, _, pad0 = crop_square(base, cx, cy, side)
        w1, _, pad1 = crop_square(shifted, cx + 13, cy + 9, side)
        assert not pad0 and not pad1
        np.testing.assert_array_equal(resize_nearest(w0, 21), resize_nearest(w1, 21))

    # crop equivariance: 90-degree rotation, pixel-identical
    h_img, w_img = base.shape
    rotated = np.rot90(base)  # (x, y) -> (y, W-1-x)
    for cx, cy, side in ((80, 90, 25), (120, 60, 33)):
        w0, _, _ = crop_square(base, cx, cy, side)
        w1, _, _ = crop_square(rotated, cy, w_img - 1 - cx, side)
        np.testing.assert_array_equal(np.rot90(resize_nearest(w0, 21)), resize_nearest(w1, 21))

    lms = random_landmarks(rng)
    m, sdr = mre_sdr(lms, lms, spacing=0.4)
    assert (m,) + sdr == (0.0, 100.0, 100.0, 100.0, 100.0)
    for _ in range(20):
        pred = LandmarkSet(lms.points + rng.normal(0, 6, (74, 2)))
        _, sdr = mre_sdr(pred, lms, spacing=0.4)
        assert list(sdr) == sorted(sdr)
    assert time.time() - start < 60


def test_criterion_04_sampling_contract(rng):
    start = time.time()

    def make_tiles(n):
        tiles = []
        for i in range(n):
            p = rng.dirichlet(np.ones(3))
            tiles.append(
                Tile(index=i, rect=Rect(0, i * 4, 4, 4),
                     pixels=np.zeros((4, 4), np.uint8), class_probs=tuple(p))
            )
        return tiles

    order = {"abnormal": 0, "normal": 1, "background": 2}
    for trial in range(500):
        tiles = make_tiles(int(rng.integers(1, 40)))
        k = int(rng.integers(1, 45))
        bag = rank_and_sample(tiles, k)
        assert len(bag) == k
        n_unique = min(k, len(tiles))
        ranks = [order[p.tag] for p in bag.patches[:n_unique]]
        assert ranks == sorted(ranks)
        shuffled = list(tiles)
        rng.shuffle(shuffled)
        bag2 = rank_and_sample(shuffled, k)
        assert [p.tile_index for p in bag2.patches] == [p.tile_index for p in bag.patches]

    tiles = make_tiles(120)
    for k in (30, 40, 50):
        assert len(rank_and_sample(tiles, k)) == k
    assert time.time() - start < 10


def test_criterion_05_foreground_rule():
    # inclusive 2% boundary
    from rascore.foreground import foreground_fraction

    pixels = np.zeros((100, 100), np.uint8)
    pixels.flat[:200] = 1
    frac = foreground_fraction(ForegroundMask(pixels, "m"), Rect(0, 0, 100, 100))
    assert frac == pytest.approx(0.02)
    assert is_background(frac)
    pixels.flat[200] = 1
    assert not is_background(
        foreground_fraction(ForegroundMask(pixels, "m"), Rect(0, 0, 100, 100))
    )
    # morphological mask vs rendered ground-truth silhouette
    for sample in generate(SyntheticSpec(seed=55), 5):
        mask = postprocess_mask(generate_mask(sample.image))
        assert dice(mask.pixels, sample.fg_mask) >= 0.95


def test_criterion_06_scheme1_end_to_end(e2e_data, scheme1_state):
    preds, truths = scheme1_state["preds"], scheme1_state["truths"]
    test_pcc = pcc(preds, truths)
    test_rmse = rmse(preds, truths)
    assert test_pcc >= 0.90
    assert test_rmse <= 15.0

    hits = total = 0
    for sample, (pb, fb) in zip(e2e_data["test"], scheme1_state["test_bags"]):
        if len(sample.lesions) != 1:
            continue
        total += 1
        report = explain(scheme1_state["model"], fb, scheme1_state["std"])
        top3 = {pb.patches[i].tile_index for i in report.top_indices(3)}
        if top3 & oracle_best_bag(sample):
            hits += 1
    assert total > 0
    assert hits / total >= 0.70


def test_criterion_07_scheme2_end_to_end(e2e_data):
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    spec = default_joint_patch_spec()
    fit_imgs = [s.image for s in e2e_data["train"] + e2e_data["val"]]
    patches, labels = pc_data_scheme2(fit_imgs, spec, rng, out_size=32)
    clf = PatchClassifier("small-conv", n_classes=2, feature_dim=64, input_size=32)
    clf, _ = train_patch_classifier(patches, labels, clf, PCTrainConfig(epochs=30, lr=0.03))

    # landmark noise (2 mm SD) injected into training bags only
    builder = BagBuilder(
        scheme=2, extractor=truncate_to_feature_extractor(clf), joint_spec=spec,
        patch_size=32, perturb_sds_mm=np.full(74, 2.0),
    )
    tr_imgs = [s.image for s in e2e_data["train"]]
    _, tr_fb = build_feature_bags(builder, tr_imgs, rng=rng)
    _, va_fb = build_feature_bags(builder, [s.image for s in e2e_data["val"]], rng=rng)
    std = fit_standardizer(
        [s.score for s in tr_imgs],
        split_id=split_fingerprint([s.id for s in tr_imgs]),
    )
    result = train_abmil(
        tr_fb, va_fb, std,
        TrainConfig(scheme=2, k=30, epochs=30, batch_size=4, lr=0.01, seed=0),
    )
    builder.perturb_sds_mm = None
    test_bags = [builder.build(s.image) for s in e2e_data["test"]]
    assert {len(pb) for pb, _ in test_bags} == {50}
    preds = [std.invert(predict(result.model, fb.features)[0]) for _, fb in test_bags]
    truths = [s.image.score for s in e2e_data["test"]]
    assert pcc(preds, truths) >= 0.90

    # landmark localization on held-out synthetic images
    lm_samples = generate(SyntheticSpec(seed=2), 120, "lm")
    lm_train, lm_test = lm_samples[:100], lm_samples[100:]
    model, _ = train_landmark_model(
        [s.image for s in lm_train],
        [s.landmarks for s in lm_train],
        LandmarkTrainConfig(work_size=128, epochs=15, batch_size=8, seed=0),
    )
    mres = []
    for s in lm_test:
        pred = predict_landmarks(model, s.image, 128)
        spacing = (
            estimate_pixel_spacing(s.landmarks, "left")
            + estimate_pixel_spacing(s.landmarks, "right")
        ) / 2.0
        mres.append(mre_sdr(pred, s.landmarks, spacing)[0])
    assert float(np.mean(mres)) <= 3.0


def test_criterion_08_ensemble_property(scheme1_state):
    result2 = train_abmil(
        scheme1_state["tr_fb"], scheme1_state["va_fb"], scheme1_state["std"],
        TrainConfig(
            scheme=1, k=30, epochs=30, batch_size=4, lr=0.01,
            attention_warm_start_scale=1.0, seed=1,
        ),
        attention_direction=abnormality_direction(scheme1_state["classifier"]),
    )
    std = scheme1_state["std"]
    preds1 = scheme1_state["preds"]
    preds2 = [
        std.invert(predict(result2.model, fb.features)[0])
        for _, fb in scheme1_state["test_bags"]
    ]
    truths = scheme1_state["truths"]
    ens = [ensemble_predict([a, b]) for a, b in zip(preds1, preds2)]
    assert rmse(ens, truths) <= max(rmse(preds1, truths), rmse(preds2, truths)) + 1e-9


def test_criterion_09_standardizer_hygiene(rng):
    from rascore.bags import FeatureBag

    bags = [
        FeatureBag(f"b{i}", rng.normal(0, 1, (4, 6)), score=float(10 * i)) for i in range(5)
    ]
    wrong = ScoreStandardizer(mean=20.0, sd=10.0, split_id="fitted-on-something-else")
    with pytest.raises(ValueError, match="fingerprint"):
        train_abmil(bags, [], wrong, TrainConfig(epochs=1))
    std = fit_standardizer(rng.uniform(0, 200, 40))
    for y in rng.uniform(0, 448, 1000):
        assert abs(std.invert(std.apply(y)) - y) < 1e-9


def test_criterion_10_reproducibility(tmp_path, rng):
    from rascore.bags import FeatureBag

    bags = [
        FeatureBag(f"b{i}", rng.normal(0, 1, (6, 8)), score=float(rng.uniform(0, 80)))
        for i in range(10)
    ]
    std = fit_standardizer(
        [b.score for b in bags[:8]], split_id=split_fingerprint([b.source_id for b in bags[:8]])
    )
    cfg = TrainConfig(epochs=3, batch_size=2, seed=7)
    paths = []
    for run in range(2):
        result = train_abmil(bags[:8], bags[8:], std, cfg)
        path = tmp_path / f"history{run}.csv"
        write_history(result.history, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
