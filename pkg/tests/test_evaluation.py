import numpy as np
import pytest

from busunet.architectures import UNetConfig, build
from busunet.data import FundusImage, preprocess_array
from busunet.evaluation import evaluate, load_maps, score_maps, stitch_predict, window_starts
from busunet.errors import ParameterError, UsageError
from conftest import oracle_network


def constant(value):
    return lambda batch: np.full(batch.shape, value, np.float32)


def test_window_starts():
    assert window_starts(8, 4, 2) == [0, 2, 4]
    assert window_starts(9, 4, 2) == [0, 2, 4, 5]
    assert window_starts(4, 4, 4) == [0]


def test_interior_coverage_is_four_at_half_stride(rng):
    _, cover = stitch_predict(constant(0.3), rng.random((32, 32)), patch_size=8, return_coverage=True)
    assert cover.min() >= 1
    np.testing.assert_array_equal(cover[4:-4, 4:-4], 4)
    assert cover[0, 0] == 1 and cover[0, 10] == 2


def test_coverage_audit_on_ragged_image(rng):
    arr = rng.random((21, 30))
    _, cover = stitch_predict(constant(0.5), arr, patch_size=8, stride=3, return_coverage=True)
    expected = np.zeros((21, 30), int)
    for t in window_starts(21, 8, 3):
        for l in window_starts(30, 8, 3):
            expected[t : t + 8, l : l + 8] += 1
    np.testing.assert_array_equal(cover, expected)


def test_constant_net_any_stride(rng):
    arr = rng.random((24, 24))
    for stride in (1, 3, 8):
        np.testing.assert_array_equal(stitch_predict(constant(0.25), arr, patch_size=8, stride=stride), 0.25)


def test_non_overlapping_tiles_equal_per_tile_predictions(rng):
    net = build(UNetConfig(1, 2), seed=4).eval()
    arr = rng.random((16, 24)).astype(np.float32)
    stitched = stitch_predict(net, arr, patch_size=8, stride=8)
    for t in range(0, 16, 8):
        for l in range(0, 24, 8):
            tile = net.predict(arr[None, None, t : t + 8, l : l + 8])[0, 0]
            np.testing.assert_array_equal(stitched[t : t + 8, l : l + 8], tile)


def test_visit_order_does_not_matter(rng):
    net = build(UNetConfig(1, 2), seed=1).eval()
    arr = rng.random((20, 20)).astype(np.float32)
    a = stitch_predict(net, arr, patch_size=8, stride=4, batch_size=3)
    b = stitch_predict(net, arr, patch_size=8, stride=4, batch_size=5, visit_order=np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_stitch_errors(rng):
    with pytest.raises(ParameterError):
        stitch_predict(constant(0.5), rng.random((6, 20)), patch_size=8)
    for stride in (0, 9):
        with pytest.raises(ParameterError):
            stitch_predict(constant(0.5), rng.random((16, 16)), patch_size=8, stride=stride)


def test_oracle_network_scores_perfectly(clean_images):
    report, maps = evaluate(oracle_network(), clean_images, patch_size=16)
    assert (report.accuracy, report.sensitivity, report.specificity, report.auc, report.f1) == (1, 1, 1, 1, 1)
    for img in clean_images:
        np.testing.assert_array_equal(maps[img.id] >= 0.5, img.mask.astype(bool))


def test_constant_half_predictor(noisy_images):
    report, _ = evaluate(constant(0.5), noisy_images, patch_size=16)
    truth = np.concatenate([im.mask[im.fov.astype(bool)] for im in noisy_images])
    assert report.auc == 0.5
    # 0.5 >= threshold, so every pixel is called a vessel
    assert report.accuracy == pytest.approx(truth.mean())
    assert report.sensitivity == 1.0 and report.specificity == 0.0


def test_fov_toggle(noisy_images):
    with_fov, _ = evaluate(constant(0.2), noisy_images, patch_size=16)
    without, _ = evaluate(constant(0.2), noisy_images, patch_size=16, use_fov=False)
    assert with_fov.counts.total == sum(int(im.fov.sum()) for im in noisy_images)
    assert without.counts.total == sum(im.mask.size for im in noisy_images)


def test_saved_maps_reproduce_report(tmp_path, noisy_images):
    net = build(UNetConfig(2, 2, 2), seed=5)
    report, _ = evaluate(net, noisy_images, out_dir=tmp_path, patch_size=16, method="tiny")
    maps = load_maps(tmp_path, [im.id for im in noisy_images])
    again = score_maps(maps, noisy_images)
    assert again.counts == report.counts
    assert again.auc == report.auc
    for name in ("report.csv", "report.txt", "roc.csv", "pr.csv"):
        assert (tmp_path / name).is_file()
    assert "tiny" in (tmp_path / "report.txt").read_text()


def test_fundus_image_input_is_preprocessed(noisy_images):
    img = noisy_images[0]
    identity = lambda batch: batch  # noqa: E731
    np.testing.assert_allclose(stitch_predict(identity, img, patch_size=16), preprocess_array(img), atol=1e-7)


def test_empty_image_list():
    with pytest.raises(UsageError):
        evaluate(constant(0.5), [])


def test_output_in_unit_interval(rng):
    img = FundusImage((rng.random((24, 24)) * 255).astype(np.uint8), np.zeros((24, 24), np.uint8),
                      np.ones((24, 24), np.uint8))
    out = stitch_predict(build(UNetConfig(1, 2)), img, patch_size=8)
    assert out.min() >= 0 and out.max() <= 1
