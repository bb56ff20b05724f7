"""End-to-end smoke tests for the python bindings."""

import numpy as np
import pytest

import paddit


def checker(n=16):
    x, y = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.sin(x / 3.0) * np.cos(y / 4.0) + 0.5


def test_image_roundtrip(tmp_path):
    img = checker()
    path = str(tmp_path / "img.json")
    paddit.write_image(path, img, spacing=[1.5, 2.0], origin=[1.0, -3.0])
    data, spacing, origin = paddit.read_image(path)
    assert data.shape == (16, 16)
    assert spacing == [1.5, 2.0]
    assert origin == [1.0, -3.0]
    np.testing.assert_allclose(data, img, atol=1e-6)


def test_nifti_roundtrip(tmp_path):
    img = checker()
    path = str(tmp_path / "img.nii.gz")
    paddit.write_image(path, img, spacing=[1.0, 2.0])
    data, spacing, _ = paddit.read_image(path)
    assert spacing == [1.0, 2.0]
    np.testing.assert_allclose(data, img, atol=1e-6)


def test_labels_roundtrip(tmp_path):
    lbl = (checker() > 0.8).astype(np.int32)
    path = str(tmp_path / "lbl.json")
    paddit.write_labels(path, lbl)
    data, _, _ = paddit.read_labels(path)
    np.testing.assert_array_equal(data, lbl)


def test_zero_field_identity_warp():
    img = checker()
    field = np.zeros((16, 16, 2))
    np.testing.assert_array_equal(paddit.warp_image(img, field), img)
    lbl = (img > 0.8).astype(np.int32)
    np.testing.assert_array_equal(paddit.warp_labels(lbl, field), lbl)
    assert paddit.min_jacobian(field) == pytest.approx(1.0)


def test_bspline_field_deterministic():
    a = paddit.bspline_field([20, 20], cp=6, sd=2.0, seed=42)
    b = paddit.bspline_field([20, 20], cp=6, sd=2.0, seed=42)
    c = paddit.bspline_field([20, 20], cp=6, sd=2.0, seed=43)
    assert a.shape == (20, 20, 2)
    np.testing.assert_array_equal(a, b)
    assert np.any(a != c)
    assert paddit.field_checksum(a) == paddit.field_checksum(b)
    assert paddit.field_checksum(a) != paddit.field_checksum(c)


def test_bspline_sd_zero_is_identity():
    f = paddit.bspline_field([16, 16], cp=4, sd=0.0, seed=1)
    np.testing.assert_array_equal(f, np.zeros((16, 16, 2)))


def test_jacobian_of_uniform_scaling():
    # d(x) = 0.1 * x  =>  phi(x) = 1.1 x, det J = 1.1**2 everywhere inside.
    n = 12
    x, y = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float),
                       indexing="ij")
    field = np.stack([0.1 * x, 0.1 * y], axis=-1)
    jac = paddit.jacobian_determinant(field)
    np.testing.assert_allclose(jac[1:-1, 1:-1], 1.1**2, rtol=1e-9)


def test_template_estimation_and_sampling():
    rng = np.random.default_rng(0)
    base = checker(16)
    images = []
    for k in range(3):
        shift = paddit.bspline_field([16, 16], cp=4, sd=0.5, seed=100 + k)
        images.append(paddit.warp_image(base, shift) + 0.01 * rng.standard_normal((16, 16)))

    result = paddit.estimate_template(images, em_iters=1, hmc_samples=2,
                                      burn_in=4, seed=7, control_spacing=8)
    assert result["template"].shape == (16, 16)
    assert result["sigma"] > 0
    assert len(result["trace"]) == 1

    kwargs = dict(sigma=result["sigma"], seed=3, burn_in=30, step_size=0.002)
    draws = paddit.sample_deformations(images[0], result["template"],
                                       samples=2, **kwargs)
    assert draws["fields"].shape == (2, 16, 16, 2)
    assert len(draws["times"]) == 2
    assert all(0.0 <= t <= 1.0 for t in draws["times"])
    for s in range(2):
        assert paddit.min_jacobian(draws["fields"][s]) > 0

    again = paddit.sample_deformations(images[0], result["template"],
                                       samples=2, **kwargs)
    np.testing.assert_array_equal(draws["fields"], again["fields"])

    fixed = paddit.sample_deformations(images[0], result["template"],
                                       samples=1, time_override=0.0, **kwargs)
    np.testing.assert_allclose(fixed["fields"][0], 0.0, atol=1e-12)


def test_rank_errors():
    with pytest.raises(ValueError):
        paddit.warp_image(np.zeros(8), np.zeros((8, 2)))
    with pytest.raises(ValueError):
        paddit.min_jacobian(np.zeros((8, 8, 3)))
    with pytest.raises(OSError):
        paddit.read_image("/nonexistent/volume.json")
