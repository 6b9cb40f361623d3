import numpy as np
import pytest

from invcascade.synth import (
    PART_CHANNELS, coverage, render_maps, synth_generate, synth_videos,
)


def test_coverage_exact_fractions():
    cov = coverage([0.5, 0, 2, 1.25], 3, 3, 1.0)
    np.testing.assert_allclose(cov, [[0.5, 1, 0], [0.125, 0.25, 0], [0, 0, 0]])
    assert coverage([0, 0, 16, 8], 2, 4, 0.25).sum() == pytest.approx(8)


def test_generate_repeatable():
    a = synth_generate(5, 3)
    b = synth_generate(5, 3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.boxes, y.boxes)
        for tag in x.maps.layers:
            for fa, fb in zip(x.maps.layers[tag], y.maps.layers[tag]):
                assert fa.data.tobytes() == fb.data.tobytes()
    c = synth_generate(6, 3)
    assert not all(np.array_equal(x.boxes, y.boxes) for x, y in zip(a, c))


def test_zero_noise_background_is_exactly_zero():
    rng = np.random.default_rng(0)
    box = [40, 24, 88, 72]
    maps = render_maps("x", [box], 160, 120, rng, noise_level=0.0)
    for tag, fms in maps.layers.items():
        for fm in fms:
            support = coverage(box, fm.height, fm.width, fm.scale_factor) > 0
            active = np.any(fm.data != 0, axis=0)
            # signal lives exactly on the cells the box touches
            np.testing.assert_array_equal(active, support)


def test_layer_geometry_and_channels():
    img = synth_generate(1, 1, objects_per_image=2, channels=6)[0]
    l5, l3, l2 = (img.maps.layer(t) for t in ("L5", "L3", "L2"))
    assert img.maps.n_scales == 2
    for a, b, c in zip(l5, l3, l2):
        assert b.scale_factor == pytest.approx(2 * a.scale_factor)
        assert c.scale_factor == pytest.approx(4 * a.scale_factor)
        assert (b.height, b.width) == (2 * a.height, 2 * a.width)
    assert l5[0].channels == PART_CHANNELS + 6 and l2[0].channels == 6
    assert len(img.maps.edges) == 2
    assert len(img.boxes) == 2


def test_part_channels_sum_to_coverage():
    rng = np.random.default_rng(1)
    box = [16, 16, 64, 48]
    fm = render_maps("x", [box], 160, 120, rng, noise_level=0.0).layer("L3")[0]
    cov = coverage(box, fm.height, fm.width, fm.scale_factor)
    np.testing.assert_allclose(fm.data[:4].sum(axis=0), cov, atol=1e-6)
    assert np.all(fm.data[4] >= -1e-6) and np.all(fm.data[4] <= cov + 1e-6)


def test_videos_repeatable_and_shaped():
    a = synth_videos(3, 2, n_frames=5)
    b = synth_videos(3, 2, n_frames=5)
    assert a[0].tracks.shape == (2, 5, 4)
    np.testing.assert_array_equal(a[1].tracks, b[1].tracks)
    assert len(a[0].frames) == 5
    assert "F5" in a[0].frames[0].layers
