"""Footprint datasets and image preprocessing.

Turns tabular footprint records (GeoJSON or CSV+WKT) into the fixed-size
multi-scale image stacks the encoder consumes:

    polygon -> grayscale raster (pixel value encodes height)
            -> three concentric center crops, widest first
            -> each crop box-resampled to a common side
            -> stacked as channels
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import geometry
from .errors import (
    DatasetIOError,
    DimensionError,
    InvalidBoundsError,
    OutOfCanvasError,
    ValidationError,
)

USE_CLASSES = ("SFH", "MFH", "OTHER")
RESIDENTIAL_CLASSES = ("SFH", "MFH")

# Crop windows relative to the output side: at side_px=112 these give
# 700 / 224 / 112 px windows on a 1410 px canvas, widest first.
WINDOW_RATIOS = (6.25, 2.0, 1.0)

REQUIRED_PROPERTIES = ("id", "height_m", "area_m2", "program", "vintage_year", "use_class")


@dataclass
class FootprintRecord:
    """One building footprint with the metadata the pipeline uses."""

    id: str
    polygon: list[tuple[float, float]]
    height_m: float
    area_m2: float
    program: str
    vintage_year: int
    use_class: str
    shape_family: str | None = None

    def validate(self) -> None:
        if not self.id:
            raise ValidationError("footprint record with empty id")
        if len(self.polygon) < 3:
            raise ValidationError(f"record {self.id}: polygon has {len(self.polygon)} vertices")
        if geometry.area(self.polygon) <= 0.0:
            raise ValidationError(f"record {self.id}: polygon has zero area")
        if not np.isfinite(self.height_m) or self.height_m < 0.0:
            raise ValidationError(f"record {self.id}: bad height {self.height_m}")
        if not np.isfinite(self.area_m2) or self.area_m2 <= 0.0:
            raise ValidationError(f"record {self.id}: bad area {self.area_m2}")
        if self.use_class not in USE_CLASSES:
            raise ValidationError(f"record {self.id}: unknown use class {self.use_class!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["polygon"] = [[float(x), float(y)] for x, y in self.polygon]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FootprintRecord":
        return cls(
            id=str(d["id"]),
            polygon=[(float(x), float(y)) for x, y in d["polygon"]],
            height_m=float(d["height_m"]),
            area_m2=float(d["area_m2"]),
            program=str(d["program"]),
            vintage_year=int(d["vintage_year"]),
            use_class=str(d["use_class"]),
            shape_family=d.get("shape_family"),
        )


@dataclass
class RasterImage:
    """Square grayscale canvas in [0, 1], one footprint centered on it."""

    pixels: np.ndarray  # (side, side) float32
    meters_per_pixel: float
    source_id: str

    @property
    def side_px(self) -> int:
        return self.pixels.shape[0]


@dataclass
class MultiScaleImage:
    """Stacked multi-scale channels for one footprint, widest field first."""

    channels: np.ndarray  # (3, side_px, side_px) float32
    source_id: str

    @property
    def side_px(self) -> int:
        return self.channels.shape[1]


def encode_height_grayscale(height_m: float, h_min: float = 0.0, h_max: float = 100.0) -> int:
    """Map a height to an integer gray level in [0, 255].

    Linear in height between the bounds, clamped outside them; ties round
    half up so the midpoint maps to 128.
    """
    if h_max <= h_min:
        raise InvalidBoundsError(f"height bounds ({h_min}, {h_max}) need h_max > h_min")
    t = (height_m - h_min) / (h_max - h_min)
    t = min(max(t, 0.0), 1.0)
    return int(np.floor(255.0 * t + 0.5))


def _point_on_segment(px, py, x1, y1, x2, y2, eps=1e-9):
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    scale = max(abs(x2 - x1), abs(y2 - y1), 1.0)
    if abs(cross) > eps * scale:
        return False
    if min(x1, x2) - eps <= px <= max(x1, x2) + eps and min(y1, y2) - eps <= py <= max(y1, y2) + eps:
        return True
    return False


def rasterize_footprint(
    record: FootprintRecord,
    canvas_px: int,
    meters_per_pixel: float,
    height_bounds: tuple[float, float] = (0.0, 100.0),
) -> RasterImage:
    """Rasterize one footprint onto a square canvas, centroid at the center.

    A pixel belongs to the footprint when its center lies inside the polygon
    (even-odd rule); centers exactly on the boundary count as inside. Filled
    pixels carry encode_height_grayscale(height)/255, the rest are zero.

    Raises OutOfCanvasError when the centered polygon does not fit.
    """
    record.validate()
    if canvas_px < 1 or meters_per_pixel <= 0.0:
        raise DimensionError(f"bad canvas spec: {canvas_px} px at {meters_per_pixel} m/px")

    extent = canvas_px * meters_per_pixel
    cx, cy = geometry.centroid(record.polygon)
    poly = geometry.translate(record.polygon, extent / 2.0 - cx, extent / 2.0 - cy)

    min_x, min_y, max_x, max_y = geometry.bounds(poly)
    if min_x < 0.0 or min_y < 0.0 or max_x > extent or max_y > extent:
        raise OutOfCanvasError(
            f"record {record.id}: footprint spans "
            f"({max_x - min_x:.1f} x {max_y - min_y:.1f}) m, canvas is {extent:.1f} m"
        )

    value = encode_height_grayscale(record.height_m, *height_bounds) / 255.0
    pixels = np.zeros((canvas_px, canvas_px), dtype=np.float32)

    # Rows count down from the top of the canvas; pixel centers sit at +0.5 px.
    # Only the bounding-box window of the polygon needs testing.
    col_lo = max(int(np.floor(min_x / meters_per_pixel)) - 1, 0)
    col_hi = min(int(np.ceil(max_x / meters_per_pixel)) + 1, canvas_px)
    row_lo = max(int(np.floor((extent - max_y) / meters_per_pixel)) - 1, 0)
    row_hi = min(int(np.ceil((extent - min_y) / meters_per_pixel)) + 1, canvas_px)
    if col_lo >= col_hi or row_lo >= row_hi:
        return RasterImage(pixels, meters_per_pixel, record.id)

    xs = (np.arange(col_lo, col_hi, dtype=np.float64) + 0.5) * meters_per_pixel
    ys = extent - (np.arange(row_lo, row_hi, dtype=np.float64) + 0.5) * meters_per_pixel
    gx = xs[None, :]
    gy = ys[:, None]

    inside = np.zeros((ys.size, xs.size), dtype=bool)
    boundary = np.zeros_like(inside)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > gy) != (y2 > gy)
        if np.any(crosses):
            with np.errstate(divide="ignore", invalid="ignore"):
                x_int = x1 + (gy - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (gx < x_int)
        # boundary test: center within eps of the segment
        scale = max(abs(x2 - x1), abs(y2 - y1), 1.0)
        cross = (x2 - x1) * (gy - y1) - (y2 - y1) * (gx - x1)
        on_line = np.abs(cross) <= 1e-9 * scale
        in_box = (
            (gx >= min(x1, x2) - 1e-9)
            & (gx <= max(x1, x2) + 1e-9)
            & (gy >= min(y1, y2) - 1e-9)
            & (gy <= max(y1, y2) + 1e-9)
        )
        boundary |= on_line & in_box

    pixels[row_lo:row_hi, col_lo:col_hi] = np.where(inside | boundary, value, 0.0).astype(np.float32)
    return RasterImage(pixels, meters_per_pixel, record.id)


def _box_resample_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic weights for exact area-average downsampling."""
    if src == dst:
        return np.eye(src, dtype=np.float64)
    w = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for o in range(dst):
        lo = o * scale
        hi = (o + 1) * scale
        i0 = int(np.floor(lo))
        i1 = min(int(np.ceil(hi)), src)
        for i in range(i0, i1):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                w[o, i] = overlap / scale
    return w


def _center_crop(pixels: np.ndarray, window: int) -> np.ndarray:
    side = pixels.shape[0]
    start = (side - window) // 2
    return pixels[start : start + window, start : start + window]


def build_multiscale(raster: RasterImage, base_px: int, side_px: int = 112) -> MultiScaleImage:
    """Build the 3-channel multi-scale stack from one base raster.

    Channel i is a centered crop of window_i = min(base_px, round(side_px *
    WINDOW_RATIOS[i])) pixels, area-averaged down to side_px. Widest field of
    view first; the last channel is the identity crop when the window equals
    side_px.
    """
    if raster.pixels.ndim != 2 or raster.pixels.shape[0] != raster.pixels.shape[1]:
        raise DimensionError(f"record {raster.source_id}: raster is not square")
    if raster.side_px != base_px:
        raise DimensionError(
            f"record {raster.source_id}: raster side {raster.side_px} != base_px {base_px}"
        )
    if base_px < side_px:
        raise DimensionError(f"base_px {base_px} smaller than output side {side_px}")

    channels = np.empty((len(WINDOW_RATIOS), side_px, side_px), dtype=np.float32)
    for i, ratio in enumerate(WINDOW_RATIOS):
        window = min(base_px, int(round(side_px * ratio)))
        crop = _center_crop(raster.pixels, window).astype(np.float64)
        if window == side_px:
            out = crop
        else:
            w = _box_resample_matrix(window, side_px)
            out = w @ crop @ w.T
        channels[i] = out.astype(np.float32)
    return MultiScaleImage(channels, raster.source_id)


def preprocess_record(
    record: FootprintRecord,
    base_px: int,
    side_px: int,
    meters_per_pixel: float,
    height_bounds: tuple[float, float] = (0.0, 100.0),
) -> MultiScaleImage:
    """rasterize_footprint followed by build_multiscale."""
    raster = rasterize_footprint(record, base_px, meters_per_pixel, height_bounds)
    return build_multiscale(raster, base_px, side_px)


# ---------------------------------------------------------------------------
# dataset io


def _ring_from_coordinates(coords) -> list[tuple[float, float]]:
    ring = [(float(x), float(y)) for x, y in coords]
    if len(ring) >= 2 and ring[0] == ring[-1]:
        ring = ring[:-1]
    return ring


def _record_from_properties(props: dict, polygon) -> FootprintRecord:
    for key in REQUIRED_PROPERTIES:
        if key not in props or props[key] is None:
            raise ValidationError(f"missing property {key!r}")
    rec = FootprintRecord(
        id=str(props["id"]),
        polygon=polygon,
        height_m=float(props["height_m"]),
        area_m2=float(props["area_m2"]),
        program=str(props["program"]),
        vintage_year=int(props["vintage_year"]),
        use_class=str(props["use_class"]),
        shape_family=props.get("shape_family") or None,
    )
    rec.validate()
    return rec


def _parse_wkt_polygon(text: str) -> list[tuple[float, float]]:
    body = text.strip()
    if not body.upper().startswith("POLYGON"):
        raise ValidationError(f"not a WKT polygon: {text[:40]!r}")
    body = body[len("POLYGON") :].strip()
    if not (body.startswith("((") and body.endswith("))")):
        raise ValidationError(f"malformed WKT polygon: {text[:40]!r}")
    outer = body[2:-2].split("),")[0]
    ring = []
    for pair in outer.split(","):
        parts = pair.split()
        if len(parts) != 2:
            raise ValidationError(f"malformed WKT vertex: {pair!r}")
        ring.append((float(parts[0]), float(parts[1])))
    if len(ring) >= 2 and ring[0] == ring[-1]:
        ring = ring[:-1]
    return ring


def parse_footprint_dataset(path: str | Path, fmt: str | None = None) -> tuple[list[FootprintRecord], int]:
    """Read a footprint dataset; returns (records, skipped_count).

    Records that fail validation (missing properties, malformed or degenerate
    geometry) are skipped and counted, never fatal. An unreadable file raises
    DatasetIOError.
    """
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "geojson"
    if fmt not in ("geojson", "csv"):
        raise DatasetIOError(f"unknown dataset format {fmt!r}")
    try:
        text = path.read_text()
    except OSError as e:
        raise DatasetIOError(f"cannot read dataset {path}: {e}") from e

    records: list[FootprintRecord] = []
    skipped = 0
    if fmt == "geojson":
        try:
            doc = json.loads(text)
            features = doc["features"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DatasetIOError(f"malformed GeoJSON in {path}: {e}") from e
        for feat in features:
            try:
                geom = feat["geometry"]
                if geom["type"] != "Polygon":
                    raise ValidationError(f"unsupported geometry {geom['type']!r}")
                ring = _ring_from_coordinates(geom["coordinates"][0])
                records.append(_record_from_properties(feat.get("properties") or {}, ring))
            except (ValidationError, KeyError, TypeError, ValueError, IndexError):
                skipped += 1
    else:
        reader = csv.DictReader(text.splitlines())
        for row in reader:
            try:
                ring = _parse_wkt_polygon(row.pop("geometry"))
                records.append(_record_from_properties(row, ring))
            except (ValidationError, KeyError, TypeError, ValueError):
                skipped += 1
    return records, skipped


def footprints_geojson_text(records: list[FootprintRecord]) -> str:
    """Records as a GeoJSON FeatureCollection string (closed outer rings)."""
    features = []
    for rec in records:
        ring = [[float(x), float(y)] for x, y in rec.polygon]
        ring.append(ring[0])
        props = {
            "id": rec.id,
            "height_m": rec.height_m,
            "area_m2": rec.area_m2,
            "program": rec.program,
            "vintage_year": rec.vintage_year,
            "use_class": rec.use_class,
        }
        if rec.shape_family is not None:
            props["shape_family"] = rec.shape_family
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": props,
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    return json.dumps(doc, indent=1, sort_keys=True)


def write_footprints_geojson(records: list[FootprintRecord], path: str | Path) -> None:
    Path(path).write_text(footprints_geojson_text(records))


def write_footprints_csv(records: list[FootprintRecord], path: str | Path) -> None:
    """Write records as CSV with a WKT geometry column."""
    fields = list(REQUIRED_PROPERTIES) + ["shape_family", "geometry"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for rec in records:
            ring = list(rec.polygon) + [rec.polygon[0]]
            wkt = "POLYGON ((" + ", ".join(f"{x!r} {y!r}" for x, y in ring) + "))"
            writer.writerow(
                {
                    "id": rec.id,
                    "height_m": repr(rec.height_m),
                    "area_m2": repr(rec.area_m2),
                    "program": rec.program,
                    "vintage_year": rec.vintage_year,
                    "use_class": rec.use_class,
                    "shape_family": rec.shape_family or "",
                    "geometry": wkt,
                }
            )


def filter_residential(records: list[FootprintRecord]) -> list[FootprintRecord]:
    """Keep SFH and MFH records, preserving order. Idempotent."""
    return [r for r in records if r.use_class in RESIDENTIAL_CLASSES]
