import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from steerer.density import (AnnotationError, PointSet, downscale_points, format_annotations, gaussian_kernel,
                             gt_pyramid, is_interior, level_sigma, parse_annotations, rasterize_density,
                             read_annotations, write_annotations)


def test_downscale_examples():
    p = PointSet([[64.0, 64.0]])
    np.testing.assert_array_equal(downscale_points(p, 0).points, [[16.0, 16.0]])
    np.testing.assert_array_equal(downscale_points(p, 3).points, [[2.0, 2.0]])
    assert len(downscale_points(PointSet(), 2)) == 0
    with pytest.raises(ValueError):
        downscale_points(p, -1)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 1.7, 2.0, 3.3])
def test_kernel_unit_mass_and_support(sigma):
    k = gaussian_kernel(sigma)
    assert k.shape == (2 * math.ceil(3 * sigma) + 1,) * 2
    assert abs(k.sum() - 1.0) < 1e-12
    assert np.unravel_index(k.argmax(), k.shape) == (k.shape[0] // 2,) * 2


@pytest.mark.parametrize("sigma", [1.0, 2.0, 2.5])
def test_single_interior_point_sums_to_one(sigma):
    d = rasterize_density(PointSet([[15.3, 16.8]]), (32, 32), sigma)
    assert abs(d.count() - 1.0) < 1e-9
    assert d.grid.argmax() == 16 * 32 + 15


def test_coincident_points_add():
    d = rasterize_density(PointSet([[10.0, 10.0], [10.0, 10.0]]), (24, 24), 2.0)
    assert abs(d.count() - 2.0) < 1e-9


def test_corner_point_clipped_mass():
    sigma = 2.0
    d = rasterize_density(PointSet([[0.2, 0.7]]), (16, 16), sigma)
    k = gaussian_kernel(sigma)
    r = k.shape[0] // 2
    # the corner cell sits at the kernel center, so only the lower-right quadrant survives
    expect = sum(k[r + dy, r + dx] for dy in range(0, r + 1) for dx in range(0, r + 1))
    assert d.count() < 1.0
    assert d.count() == pytest.approx(expect, abs=1e-12)


def test_rasterize_errors():
    with pytest.raises(ValueError):
        rasterize_density(PointSet(), (0, 4), 1.0)
    with pytest.raises(ValueError):
        rasterize_density(PointSet(), (4, 4), 0.0)


def test_pyramid_shapes_and_sigmas():
    pyr = gt_pyramid(PointSet([[64.0, 64.0]]), (128, 128), 3, 2.0)
    assert [d.shape for d in pyr] == [(32, 32), (16, 16), (8, 8), (4, 4)]
    assert [d.level for d in pyr] == [0, 1, 2, 3]
    assert [d.stride for d in pyr] == [4, 8, 16, 32]
    assert [level_sigma(2.0, j) for j in range(4)] == [2.0, 1.0, 1.0, 1.0]
    with pytest.raises(ValueError, match="divisible"):
        gt_pyramid(PointSet(), (120, 128), 3)


def test_interior_point_every_level_sums_to_one():
    # a 4x4 level-3 map cannot hold a 7x7 kernel, so use 256x256 (8x8 at level 3)
    pyr = gt_pyramid(PointSet([[128.0, 128.0]]), (256, 256), 3, 2.0)
    for d in pyr:
        assert abs(d.count() - 1.0) < 1e-6


def test_ten_interior_points_conserve_count():
    rng = np.random.default_rng(0)
    pts = PointSet(rng.uniform(112, 144, size=(10, 2)))
    for d in gt_pyramid(pts, (256, 256), 3, 2.0):
        assert abs(d.count() - 10.0) < 1e-5
        assert np.all(d.grid >= 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 16), n=st.integers(0, 12), sigma0=st.sampled_from([1.0, 1.5, 2.0]))
def test_count_conservation_for_interior_points(seed, n, sigma0):
    rng = np.random.default_rng(seed)
    shape = (256, 256)
    pts = PointSet(rng.uniform(0, 256, size=(n, 2)))
    pyr = gt_pyramid(pts, shape, 3, sigma0)
    for j, d in enumerate(pyr):
        inside = [is_interior(x, y, shape, sigma0, j) for x, y in pts.points]
        interior = PointSet(pts.points[inside])
        sub = rasterize_density(downscale_points(interior, j), d.shape, level_sigma(sigma0, j))
        assert abs(sub.count() - sum(inside)) < 1e-6 * max(sum(inside), 1)
        assert d.count() <= n + 1e-9
        if j:
            assert d.shape == (pyr[j - 1].shape[0] // 2, pyr[j - 1].shape[1] // 2)


def test_annotation_round_trip(tmp_path):
    pts = PointSet([[1.5, 2.25], [100.0, 3.0 / 7.0]], [2.0, 12.0])
    path = tmp_path / "a.txt"
    write_annotations(path, pts)
    back = read_annotations(path)
    np.testing.assert_array_equal(back.points, pts.points)
    np.testing.assert_array_equal(back.radii, pts.radii)
    assert parse_annotations("# only a comment\n\n").points.shape == (0, 2)
    assert format_annotations(PointSet()) == ""


@pytest.mark.parametrize("text,line", [("1 2\n3\n", 2), ("1 2\n\n4 x\n", 3), ("1 nan\n", 1)])
def test_annotation_errors_name_line(text, line):
    with pytest.raises(AnnotationError, match=f"f.txt:{line}:"):
        parse_annotations(text, "f.txt")


def test_annotation_mixed_and_bad_radius():
    with pytest.raises(AnnotationError, match="radius"):
        parse_annotations("1 2 3\n4 5\n")
    with pytest.raises(AnnotationError, match="radius"):
        parse_annotations("1 2 0\n")
