"""Tests for the template codec, map rasterization and peak decoding."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from til.codec import (
    Minutia,
    MinutiaeMap,
    MinutiaeTemplate,
    angle_distance,
    decode_peaks,
    parse_template,
    rasterize,
    read_map,
    read_template,
    serialize_template,
    stack_maps,
    wrap_angle,
    write_map,
    write_template,
)
from til.config import MapConfig
from til.exceptions import ContractError, InvalidInputError, ParseError


def _template(points, size=512):
    return MinutiaeTemplate.from_array(np.asarray(points, dtype=float), size, size)


class TestMinutia:
    """Tests for minutia values and angle helpers."""

    def test_theta_wrapped_into_canonical_range(self):
        """Test that directions are stored in [0, 2π)."""
        assert Minutia(1, 2, -math.pi / 2).theta == pytest.approx(3 * math.pi / 2)
        assert Minutia(1, 2, 2 * math.pi).theta == 0.0

    def test_negative_coordinates_rejected(self):
        """Test that negative coordinates raise InvalidInputError."""
        with pytest.raises(InvalidInputError):
            Minutia(-1, 0, 0)

    def test_equality_tolerates_wraparound(self):
        """Test that theta and theta + 2π compare equal."""
        assert Minutia(3, 4, 0.1) == Minutia(3, 4, 0.1 + 2 * math.pi)

    def test_template_rejects_out_of_bounds_minutia(self):
        """Test that a minutia outside W x H is rejected."""
        with pytest.raises(InvalidInputError, match="outside"):
            MinutiaeTemplate((Minutia(512, 10, 0),), 512, 512)

    def test_wrap_and_distance(self):
        """Test the angle helpers on the wrap boundary."""
        assert wrap_angle(-0.0) == 0.0
        assert float(angle_distance(0.1, 2 * math.pi - 0.1)) == pytest.approx(0.2)
        assert float(angle_distance(0.0, math.pi)) == pytest.approx(math.pi)


class TestTemplateText:
    """Tests for parsing and serializing template documents."""

    def test_serialize_single_minutia(self):
        """Test the documented text form of one minutia."""
        text = serialize_template(_template([(256, 256, math.pi / 2)]))
        assert text == "512 512\n256.0 256.0 90.0\n"

    def test_parse_wraps_degrees(self):
        """Test that 450 degrees parses to π/2."""
        template = parse_template("512 512\n10 20 450\n")
        assert len(template) == 1
        m = template.minutiae[0]
        assert (m.x, m.y) == (10.0, 20.0)
        assert m.theta == pytest.approx(math.pi / 2)

    def test_parse_ignores_blank_lines(self):
        """Test that blank lines between entries are skipped."""
        template = parse_template("\n64 32\n\n1 2 3\n\n4 5 6\n")
        assert (template.width, template.height) == (64, 32)
        assert len(template) == 2

    def test_empty_template(self):
        """Test that a header-only document is an empty template."""
        template = parse_template("300 400\n")
        assert len(template) == 0
        assert serialize_template(template) == "300 400\n"

    @pytest.mark.parametrize(
        "text, line",
        [
            ("", 1),
            ("512\n", 1),
            ("a b\n", 1),
            ("512 512\n1 2\n", 2),
            ("512 512\n1 2 3\n4 five 6\n", 3),
            ("512 512\n1 2 nan\n", 2),
        ],
    )
    def test_malformed_documents_name_the_line(self, text, line):
        """Test that parse errors carry the offending line number."""
        with pytest.raises(ParseError) as excinfo:
            parse_template(text)
        assert excinfo.value.line_number == line
        assert f"line {line}" in str(excinfo.value)

    def test_out_of_bounds_is_invalid_input(self):
        """Test that a coordinate beyond the header is InvalidInputError, not ParseError."""
        with pytest.raises(InvalidInputError):
            parse_template("100 100\n100 5 0\n")

    def test_file_round_trip(self, tmp_path):
        """Test that write_template/read_template preserve minutiae and use LF endings."""
        template = _template([(10.25, 20.5, 1.0), (300.0, 12.0, 5.5)])
        path = tmp_path / "probe.tpl"
        write_template(template, path)
        assert b"\r\n" not in path.read_bytes()
        loaded = read_template(path)
        assert loaded == template
        assert loaded.source_id == "probe"

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(0, 511.99, allow_nan=False),
                st.floats(0, 511.99, allow_nan=False),
                st.floats(-20, 20, allow_nan=False),
            ),
            max_size=20,
        )
    )
    def test_text_round_trip_property(self, points):
        """Test that parse(serialize(t)) == t for arbitrary templates."""
        template = MinutiaeTemplate(
            tuple(Minutia(x, y, t) for x, y, t in points), 512, 512
        )
        assert parse_template(serialize_template(template)) == template


class TestRasterize:
    """Tests for the 6-channel minutiae map encoder."""

    def test_single_minutia_kernel_values(self):
        """Test the peak and one-sigma values of a single minutia at the map center."""
        cfg = MapConfig()
        m = rasterize(_template([(256, 256, 0.0)]), cfg)
        assert m.values.shape == (512, 512, 6)
        assert m.values[256, 256, 0] == pytest.approx(1.0)
        sigma = int(cfg.sigma_s)
        assert m.values[256 + sigma, 256, 0] == pytest.approx(math.exp(-0.5), rel=1e-6)
        assert m.values[256, 256 + sigma, 0] == pytest.approx(math.exp(-0.5), rel=1e-6)
        # neighbouring channel is one channel spacing (2σ_o) away
        assert m.values[256, 256, 1] == pytest.approx(math.exp(-2.0), rel=1e-6)

    def test_empty_template_gives_zero_map(self):
        """Test that an empty template rasterizes to zeros."""
        m = rasterize(_template([], size=64), MapConfig.for_resolution(64))
        assert not m.values.any()

    def test_values_clipped_to_unit_interval(self):
        """Test that overlapping minutiae saturate at 1."""
        m = rasterize(_template([(30, 30, 0.0)] * 4, size=64), MapConfig.for_resolution(64))
        assert m.values.max() == pytest.approx(1.0)
        assert m.values.min() >= 0.0

    def test_dimension_mismatch(self):
        """Test that template and map dimensions must agree."""
        with pytest.raises(InvalidInputError, match="map is"):
            rasterize(_template([(1, 1, 0)], size=512), MapConfig.for_resolution(64))

    def test_direction_periodicity(self):
        """Test that theta and theta + 2π produce identical maps."""
        cfg = MapConfig.for_resolution(64)
        a = rasterize(_template([(20, 30, 0.7)], size=64), cfg)
        b = rasterize(_template([(20, 30, 0.7 + 2 * math.pi)], size=64), cfg)
        np.testing.assert_array_equal(a.values, b.values)

    def test_translation_equivariance(self):
        """Test that an integer shift of the minutia shifts the map."""
        cfg = MapConfig.for_resolution(128)
        a = rasterize(_template([(50, 60, 1.0)], size=128), cfg)
        b = rasterize(_template([(57, 55, 1.0)], size=128), cfg)
        shifted = np.roll(a.values, shift=(-5, 7), axis=(0, 1))
        np.testing.assert_allclose(b.values[20:100, 20:100], shifted[20:100, 20:100], atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(
        st.floats(10, 53.99),
        st.floats(10, 53.99),
        st.floats(0, 2 * math.pi, exclude_max=True),
        st.integers(0, 5),
    )
    def test_single_minutia_decays_with_distance(self, x, y, theta, channel):
        """Test that cell values never grow with distance from the minutia at a fixed channel."""
        m = rasterize(_template([(x, y, theta)], size=64), MapConfig.for_resolution(64))
        rows, cols = np.mgrid[0:64, 0:64]
        distance = np.hypot(cols - x, rows - y).ravel()
        values = m.values[:, :, channel].astype(np.float64).ravel()
        order = np.argsort(distance, kind="stable")
        assert np.all(np.diff(values[order]) <= 1e-7)

    def test_stack_maps_is_channels_first(self):
        """Test that stacked maps are (N, K, H, W)."""
        cfg = MapConfig.for_resolution(32)
        maps = [rasterize(_template([(5, 5, 0)], size=32), cfg)] * 3
        assert stack_maps(maps).shape == (3, 6, 32, 32)


class TestDecodePeaks:
    """Tests for recovering minutiae from maps."""

    def test_recovers_separated_minutiae(self):
        """Test position and direction recovery for well-separated minutiae."""
        cfg = MapConfig.for_resolution(128)
        points = [(20.3, 30.6, 0.0), (80.0, 40.25, math.pi / 3), (60.7, 100.1, 2.5)]
        decoded = decode_peaks(rasterize(_template(points, size=128), cfg), 0.5)
        assert len(decoded) == len(points)
        got = sorted(decoded.as_array().tolist(), key=lambda p: p[0])
        for (x, y, theta), (dx, dy, dtheta) in zip(sorted(points), got):
            assert dx == pytest.approx(x, abs=1e-3)
            assert dy == pytest.approx(y, abs=1e-3)
            assert float(angle_distance(theta, dtheta)) < 0.1

    @settings(max_examples=500, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_round_trip_on_random_separated_templates(self, seed, n_points):
        """Test recovery within 1 px and 0.1 rad whenever minutiae are 6σ_s apart."""
        cfg = MapConfig.for_resolution(128)
        rng = np.random.default_rng(seed)
        points = []
        for _ in range(200):
            if len(points) == n_points:
                break
            x, y = rng.uniform(0, 128, size=2)
            if all(math.hypot(x - px, y - py) >= 6 * cfg.sigma_s for px, py, _ in points):
                points.append((x, y, rng.uniform(0, 2 * math.pi)))
        decoded = decode_peaks(rasterize(_template(points, size=128), cfg), 0.5).minutiae
        assert len(decoded) == len(points)
        for x, y, theta in points:
            nearest = min(decoded, key=lambda d: math.hypot(d.x - x, d.y - y))
            assert math.hypot(nearest.x - x, nearest.y - y) <= 1.0
            assert float(angle_distance(nearest.theta, theta)) <= 0.1

    def test_blank_map_decodes_empty(self):
        """Test that a zero map has no peaks."""
        cfg = MapConfig.for_resolution(32)
        m = MinutiaeMap(np.zeros((32, 32, 6), dtype=np.float32), cfg)
        assert len(decode_peaks(m, 0.5)) == 0

    @pytest.mark.parametrize("threshold", [0.0, 1.0, -0.2, 1.5])
    def test_threshold_must_be_open_unit_interval(self, threshold):
        """Test that thresholds outside (0, 1) are rejected."""
        cfg = MapConfig.for_resolution(32)
        m = MinutiaeMap(np.zeros((32, 32, 6), dtype=np.float32), cfg)
        with pytest.raises(ContractError):
            decode_peaks(m, threshold)

    def test_plateau_keeps_one_peak(self):
        """Test that a flat plateau yields a single minutia at its smallest index."""
        cfg = MapConfig.for_resolution(32)
        values = np.zeros((32, 32, 6), dtype=np.float32)
        values[10:12, 10:12, 0] = 0.9
        decoded = decode_peaks(MinutiaeMap(values, cfg), 0.5)
        assert len(decoded) == 1
        assert (decoded.minutiae[0].x, decoded.minutiae[0].y) == pytest.approx((10.0, 10.0))


class TestMapFiles:
    """Tests for the binary map format."""

    def test_write_read(self, tmp_path):
        """Test that maps survive a write/read cycle bit for bit."""
        cfg = MapConfig.for_resolution(64)
        m = rasterize(_template([(10, 12, 1.2), (40, 50, 4.0)], size=64), cfg)
        path = tmp_path / "impression_0.map"
        write_map(m, path)
        assert path.stat().st_size == 12 + 4 * 64 * 64 * 6
        loaded = read_map(path)
        np.testing.assert_array_equal(loaded.values, m.values)
        assert loaded.config == cfg

    def test_truncated_file(self, tmp_path):
        """Test that a truncated file is rejected."""
        path = tmp_path / "bad.map"
        path.write_bytes(b"\x01\x00")
        with pytest.raises(InvalidInputError, match="truncated"):
            read_map(path)

    def test_size_mismatch(self, tmp_path):
        """Test that a payload of the wrong length is rejected."""
        cfg = MapConfig.for_resolution(32)
        path = tmp_path / "short.map"
        write_map(rasterize(_template([], size=32), cfg), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(InvalidInputError, match="expected"):
            read_map(path)
