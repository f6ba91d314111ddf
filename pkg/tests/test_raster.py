import numpy as np
import pytest

from vizecg.data import EcgRecord
from vizecg.errors import ConfigurationError, DimensionError, FormatError, RenderError
from vizecg.raster import GRID_VALUE, EcgImage, LayoutSpec, read_pgm, render_record, write_pgm


def _pulse_record(amplitude: float = 1.5, length: int = 1000) -> EcgRecord:
    leads = np.zeros((12, length))
    leads[0, 300:600] = amplitude
    return EcgRecord(leads)


class TestRender:

    @pytest.fixture
    def _layout(self):
        return LayoutSpec()

    def test_flat_trace(self, _layout):
        image = render_record(EcgRecord(np.zeros((12, 300))), _layout, 512, 512)
        black = image.pixels == 0.0
        assert set(np.unique(image.pixels).tolist()) == {0.0, 1.0}
        expected_total = 0
        for lead in range(12):
            top, bottom, left, right = _layout.cell_bounds(lead, 512, 512)
            rows = np.flatnonzero(black[top:bottom, left:right].any(axis=1))
            assert len(rows) == 1
            assert abs(top + rows[0] - (top + bottom - 1) / 2) <= 0.5
            assert black[top + rows[0], left:right].all()
            expected_total += right - left
        assert black.sum() == expected_total

    def test_deterministic(self, _layout):
        record = _pulse_record()
        assert render_record(record, _layout).to_bytes() == render_record(record, _layout).to_bytes()

    def test_pulse_ink_matches_polyline_length(self, _layout):
        top, bottom, left, right = _layout.cell_bounds(0, 512, 512)
        width = right - left
        jump = round(1.5 * (bottom - top - 1) / _layout.mv_per_cell_height)
        ys = [0] * (width * 3 // 10) + [jump] * (width * 3 // 10) + [0] * (width - 2 * (width * 3 // 10))
        predicted = pytest.polyline_pixel_count(ys)
        image = render_record(_pulse_record(), _layout)
        counted = int((image.pixels[top:bottom, left:right] == 0.0).sum())
        assert abs(counted - predicted) <= 0.1 * predicted

    def test_monotone_ink(self, _layout):
        flat = render_record(_pulse_record(0.0), _layout)
        pulse = render_record(_pulse_record(0.8), _layout)
        assert (pulse.pixels < 1.0).sum() >= (flat.pixels < 1.0).sum()

    def test_lead_locality(self, _layout):
        leads = np.zeros((12, 500))
        base = render_record(EcgRecord(leads), _layout)
        leads[5] = np.random.default_rng(0).normal(scale=3.0, size=500)
        changed = np.argwhere(render_record(EcgRecord(leads), _layout).pixels != base.pixels)
        top, bottom, left, right = _layout.cell_bounds(5, 512, 512)
        assert len(changed)
        assert ((changed[:, 0] >= top) & (changed[:, 0] < bottom)).all()
        assert ((changed[:, 1] >= left) & (changed[:, 1] < right)).all()

    def test_amplitude_clamped(self, _layout):
        image = render_record(_pulse_record(100.0), _layout)
        top, _, left, right = _layout.cell_bounds(0, 512, 512)
        assert (image.pixels[top, left:right] == 0.0).any()

    def test_grid(self):
        record = _pulse_record()
        plain = render_record(record, LayoutSpec(draw_grid=False), 256, 256)
        grid = render_record(record, LayoutSpec(draw_grid=True), 256, 256)
        assert plain != grid
        assert (grid.pixels == GRID_VALUE).any()

    def test_thickness_adds_ink(self):
        thin = render_record(_pulse_record(), LayoutSpec(thickness=1), 256, 256)
        thick = render_record(_pulse_record(), LayoutSpec(thickness=3), 256, 256)
        assert (thick.pixels == 0.0).sum() > 2 * (thin.pixels == 0.0).sum()

    def test_too_small(self):
        with pytest.raises(DimensionError) as exc:
            render_record(_pulse_record(), LayoutSpec(), 95, 512)
        assert exc.value.extra['min_height'] == 96

    def test_non_finite(self):
        leads = np.zeros((12, 10))
        leads[3, 4] = np.nan
        with pytest.raises(RenderError):
            render_record(EcgRecord(leads), LayoutSpec(), 128, 128)

    def test_invalid_layout(self):
        with pytest.raises(ConfigurationError):
            LayoutSpec(rows=4, cols=4)


class TestPgm:

    @pytest.fixture
    def _image(self):
        return EcgImage(np.random.default_rng(1).uniform(size=(100, 80)))

    def test_round_trip(self, tmp_path, _image):
        path = tmp_path / 'a.pgm'
        write_pgm(_image, path)
        loaded = read_pgm(path)
        assert (loaded.height, loaded.width) == (100, 80)
        assert np.abs(loaded.pixels - _image.pixels).max() <= 1 / 255
        assert loaded == _image.quantized()
        assert path.read_bytes().startswith(b'P5\n80 100\n255\n')

    def test_header_comment(self, tmp_path):
        path = tmp_path / 'c.pgm'
        path.write_bytes(b'P5\n# rendered\n2 1\n255\n\x00\xff')
        assert read_pgm(path).pixels.tolist() == [[0.0, 1.0]]

    def test_ascii_pgm(self, tmp_path):
        path = tmp_path / 'b.pgm'
        path.write_bytes(b'P2\n2 1\n255\n0 255\n')
        with pytest.raises(FormatError):
            read_pgm(path)

    @pytest.mark.parametrize('magic', [b'P5x', b'P55'], ids=['suffix', 'digit'])
    def test_magic_token(self, tmp_path, magic):
        path = tmp_path / 'b.pgm'
        path.write_bytes(magic + b'\n2 1\n255\n\x00\xff')
        with pytest.raises(FormatError) as exc:
            read_pgm(path)
        assert exc.value.extra['offset'] == 0

    def test_from_bytes(self, _image):
        image = _image.quantized()
        assert EcgImage.from_bytes(image.to_bytes(), image.height, image.width) == image

    def test_maxval(self, tmp_path):
        path = tmp_path / 'b.pgm'
        path.write_bytes(b'P5\n2 1\n15\n\x00\x0f')
        with pytest.raises(FormatError):
            read_pgm(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / 'b.pgm'
        path.write_bytes(b'P5\n100 100\n255\n' + bytes(99 * 100))
        with pytest.raises(FormatError) as exc:
            read_pgm(path)
        assert exc.value.extra['expected'] == 10000
        assert exc.value.extra['actual'] == 9900

    def test_pixel_range(self):
        with pytest.raises(RenderError):
            EcgImage(np.full((2, 2), 1.5))
