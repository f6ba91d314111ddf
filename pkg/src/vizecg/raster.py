"""Printed-ECG style rendering of 12-lead records and PGM raster files.

Leads are drawn row-major into a `rows × cols` grid of cells (I, II, III, aVR ... V6 for the default 6×2 layout).
Every lead is linearly resampled to one sample per pixel column of its cell and drawn as connected line segments
in black ink (0.0) over white paper (1.0).

>>> import numpy as np
>>> from vizecg.data import EcgRecord
>>> image = render_record(EcgRecord(np.zeros((12, 100))), LayoutSpec(margin=0), 96, 32)
>>> image.pixels.shape, int((image.pixels == 0.0).sum())
((96, 32), 192)
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from vizecg.data import N_LEADS, EcgRecord
from vizecg.errors import ConfigurationError, DimensionError, FormatError, RenderError

__all__ = ["EcgImage", "LayoutSpec", "render_record", "write_pgm", "read_pgm", "MIN_CELL_SIZE", "GRID_VALUE"]

MIN_CELL_SIZE = 16  #: minimum cell side in pixels
GRID_VALUE = 0.85  #: gray level of the optional paper grid
MAXVAL = 255


@dataclass(frozen=True, eq=False)
class EcgImage:
    """Grayscale raster, 0 is black ink and 1 is white paper."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim != 2 or pixels.size == 0:
            raise DimensionError(f"Expected an H×W pixel matrix, got shape {pixels.shape}.", shape=list(pixels.shape))
        if not np.all((pixels >= 0.0) & (pixels <= 1.0)):
            raise RenderError("Pixel values must lie in [0, 1].")
        pixels.flags.writeable = False
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_bytes(self) -> bytes:
        """8-bit quantized pixel payload, `round(p·255)` per pixel."""
        return np.rint(self.pixels * MAXVAL).astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes, height: int, width: int) -> "EcgImage":
        """Inverse of :py:meth:`to_bytes`, pixel values are `v / 255`."""
        return cls(np.frombuffer(payload, dtype=np.uint8, count=height * width).reshape(height, width) / MAXVAL)

    def quantized(self) -> "EcgImage":
        """Image as it reads back from a PGM file."""
        return EcgImage(np.rint(self.pixels * MAXVAL) / MAXVAL)

    def __eq__(self, other, /) -> bool:
        if not isinstance(other, EcgImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class LayoutSpec:
    """Placement of the 12 leads on the paper."""

    rows: int = 6
    cols: int = 2
    margin: int = 2  #: empty pixels around the trace area of a cell
    draw_grid: bool = False
    grid_spacing: int = 8
    thickness: int = 1
    mv_per_cell_height: float = 4.0  #: millivolts spanned by the full cell height

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols != N_LEADS:
            raise ConfigurationError(
                f"Invalid layout {self.rows}×{self.cols}\n\nFix: Use rows and cols with rows·cols = 12, i.e. 6×2."
            )
        if self.grid_spacing <= 0 or self.thickness < 1 or self.margin < 0 or self.mv_per_cell_height <= 0:
            raise ConfigurationError(
                "Invalid layout values\n\n"
                "Fix: Grid spacing, thickness and mv_per_cell_height must be positive, margin must be non-negative."
            )

    @classmethod
    def from_dict(cls, settings: dict[str, Any], /) -> "LayoutSpec":
        try:
            return cls(**settings)
        except TypeError as exc:
            raise ConfigurationError(
                f"Invalid render settings: {exc}\n\nFix: Check the `render` section keys against LayoutSpec fields."
            ) from exc

    def min_size(self) -> tuple[int, int]:
        """Minimum `(height, width)` of a raster."""
        return self.rows * MIN_CELL_SIZE, self.cols * MIN_CELL_SIZE

    def cell_bounds(self, lead: int, height: int, width: int) -> tuple[int, int, int, int]:
        """Trace area `(top, bottom, left, right)` of a lead cell, bottom and right exclusive."""
        row, col = divmod(lead, self.cols)
        top, bottom = row * height // self.rows, (row + 1) * height // self.rows
        left, right = col * width // self.cols, (col + 1) * width // self.cols
        return top + self.margin, bottom - self.margin, left + self.margin, right - self.margin

    def json_repr(self) -> dict[str, Any]:
        return asdict(self)


def _polyline_pixels(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer DDA rasterization of a polyline through integer vertices."""
    if len(xs) == 1:
        return xs, ys
    dx, dy = np.diff(xs), np.diff(ys)
    steps = np.maximum(np.maximum(np.abs(dx), np.abs(dy)), 1)
    counts = steps + 1
    seg = np.repeat(np.arange(len(steps)), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    frac = offsets / steps[seg]
    px = np.rint(xs[seg] + frac * dx[seg]).astype(np.int64)
    py = np.rint(ys[seg] + frac * dy[seg]).astype(np.int64)
    return px, py


def render_record(
    record: EcgRecord, layout: LayoutSpec = LayoutSpec(), height: int = 512, width: int = 512
) -> EcgImage:
    """Render a record into a printed-ECG style raster.

    Amplitudes outside the cell are clamped to the cell bounds. The output is a pure function of the inputs.

    :raises RenderError: on non-finite samples
    :raises DimensionError: if the raster is smaller than 16 pixels per cell side or margins leave no trace area
    """
    min_height, min_width = layout.min_size()
    if height < min_height or width < min_width:
        raise DimensionError(
            f"Raster {width}x{height} is too small for a {layout.rows}×{layout.cols} layout, "
            f"minimum is {min_width}x{min_height}.",
            min_height=min_height,
            min_width=min_width,
        )
    leads = record.leads
    if not np.all(np.isfinite(leads)):
        raise RenderError("Cannot render a record containing non-finite samples.")

    pixels = np.ones((height, width))
    if layout.draw_grid:
        pixels[:: layout.grid_spacing, :] = GRID_VALUE
        pixels[:, :: layout.grid_spacing] = GRID_VALUE

    source = np.arange(record.length, dtype=np.float64)
    half = layout.thickness - 1
    for lead in range(N_LEADS):
        top, bottom, left, right = layout.cell_bounds(lead, height, width)
        cell_height, cell_width = bottom - top, right - left
        if cell_height < 2 or cell_width < 2:
            raise DimensionError(f"Margin {layout.margin} leaves no trace area in a cell.", margin=layout.margin)
        positions = np.linspace(0.0, record.length - 1, cell_width)
        values = np.interp(positions, source, leads[lead])
        mid = top + (cell_height - 1) / 2
        px_per_mv = (cell_height - 1) / layout.mv_per_cell_height
        ys = np.clip(np.rint(mid - values * px_per_mv), top, bottom - 1).astype(np.int64)
        xs = left + np.arange(cell_width, dtype=np.int64)
        px, py = _polyline_pixels(xs, ys)
        for oy in range(-(half // 2), half - half // 2 + 1):
            for ox in range(-(half // 2), half - half // 2 + 1):
                pixels[np.clip(py + oy, top, bottom - 1), np.clip(px + ox, left, right - 1)] = 0.0
    return EcgImage(pixels)


def write_pgm(image: EcgImage, path: str | Path, /) -> None:
    """Write a binary PGM (P5) file with maxval 255."""
    header = f"P5\n{image.width} {image.height}\n{MAXVAL}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(image.to_bytes())


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and (data[pos : pos + 1].isspace() or data[pos : pos + 1] == b"#"):
            if data[pos : pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("PGM header is truncated.", offset=pos)
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("PGM header must end with a single whitespace byte.", offset=pos)
    return tokens, pos + 1


def read_pgm(path: str | Path, /) -> EcgImage:
    """Read a binary PGM (P5) file with maxval 255, pixel values map back to `v / 255`.

    :raises FormatError: on a non-P5 magic, other maxval or a payload size mismatch
    """
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(
            f"Not a binary PGM file: magic {data[:2]!r} at offset 0, expected b'P5'.", offset=0, magic=data[:2].hex()
        )
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(
            f"Not a binary PGM file: magic token {tokens[0]!r} at offset 0, expected b'P5'.",
            offset=0,
            magic=tokens[0].hex(),
        )
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError:
        raise FormatError(f"Invalid PGM header values: {tokens[1:]!r}.", offset=2) from None
    if maxval != MAXVAL:
        raise FormatError(f"Unsupported PGM maxval {maxval}, expected 255.", maxval=maxval)
    if width < 1 or height < 1:
        raise FormatError(f"Invalid PGM size {width}x{height}.")
    expected, actual = width * height, len(data) - offset
    if actual != expected:
        raise FormatError(
            f"PGM payload size mismatch: expected {expected} bytes for {width}x{height}, got {actual}.",
            offset=offset,
            expected=expected,
            actual=actual,
        )
    return EcgImage.from_bytes(data[offset:], height, width)
