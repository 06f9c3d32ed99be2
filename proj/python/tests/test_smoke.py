import numpy as np
import pytest

import regseg


def test_version_and_defaults():
    assert regseg.__version__ == "0.1.0"
    cfg = regseg.default_train_config()
    assert cfg["steps"] == 2000 and cfg["arch"]["levels"] == 3
    assert regseg.default_dataset_config()["n_labeled"] == 4


def test_local_cc_self_and_negation():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16))
    assert regseg.local_cc(a, a) == pytest.approx(-1.0, abs=1e-6)
    # squared local correlation: anti-correlated windows count as aligned
    assert regseg.local_cc(a, -a) == pytest.approx(-1.0, abs=1e-5)
    assert regseg.local_cc(a, 3 * a + 2, window=5) == pytest.approx(-1.0, abs=1e-6)


def test_smoothness_of_zero_and_constant_fields():
    assert regseg.smoothness(np.zeros((2, 8, 8))) == 0.0
    assert regseg.smoothness(np.full((2, 8, 8), 1.5)) == pytest.approx(0.0, abs=1e-12)


def test_warp_identity_and_integer_shift():
    rng = np.random.default_rng(1)
    img = rng.random((1, 12, 12))
    np.testing.assert_allclose(regseg.warp_image(img, np.zeros((2, 12, 12))), img, atol=1e-12)
    phi = np.zeros((2, 12, 12))
    phi[1] = 1.0  # sample one column to the right
    out = regseg.warp_image(img, phi)
    np.testing.assert_allclose(out[0, :, :-1], img[0, :, 1:], atol=1e-12)


def test_bad_shapes_raise():
    with pytest.raises(ValueError):
        regseg.smoothness(np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        regseg.local_cc(np.zeros((4, 4, 4, 4)), np.zeros((4, 4, 4, 4)))


def test_generate_sample_is_deterministic_one_hot():
    img, lab = regseg.generate_sample(11, {"height": 32, "width": 32})
    img2, lab2 = regseg.generate_sample(11, {"height": 32, "width": 32})
    assert img.shape == (1, 32, 32) and lab.shape == (4, 32, 32)
    np.testing.assert_array_equal(img, img2)
    np.testing.assert_array_equal(lab, lab2)
    np.testing.assert_allclose(lab.sum(axis=0), 1.0)
    assert 0.0 <= img.min() and img.max() <= 1.0
    assert regseg.dice(lab, lab) == pytest.approx(100.0)


def test_unknown_config_key():
    with pytest.raises(KeyError):
        regseg.generate_sample(1, {"nonsense": 1})


def test_gradient_suite_passes():
    for name, err, probed in regseg.gradient_suite(size=12):
        assert probed > 0, name
        assert err < 1e-4, name


def test_dataset_train_evaluate(tmp_path):
    man = regseg.make_dataset(tmp_path / "data", {"height": 32, "width": 32, "n_test": 4})
    assert man["counts"]["labeled"] == 4
    with pytest.raises(RuntimeError):
        regseg.make_dataset(tmp_path / "data", {"height": 32, "width": 32})
    res = regseg.train(tmp_path / "data", tmp_path / "run", {"steps": 6})
    assert res["steps"] == 6 and np.isfinite(res["final_L_reg"])
    m = regseg.evaluate(tmp_path / "data", tmp_path / "run" / "final.ckpt")
    assert m["step"] == 6
    assert 0.0 <= m["s_dice"] <= 100.0 and 0.0 <= m["r_dice"] <= 100.0
