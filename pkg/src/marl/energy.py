"""Shape metrics, EUI assignment, and stock-level energy accounting.

An archetype's EUI (kWh/m2/yr) scales by the total floor area it represents;
the stock estimate is the fixed-order 64-bit sum of those products. Accuracy
against a metered or synthetic ground truth is 100 * (1 - |est - gt| / gt).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .clustering import Archetype
from .errors import (
    DegenerateBuildingError,
    InputError,
    MetricUndefinedError,
    ProviderError,
)
from .ingest import FootprintRecord
from .tasks import bin_vintage

# Simple-surrogate EUI model: base + shape coefficient * (S/V) * reference
# floor height + vintage offset + use-class offset. Older and less compact
# stock consumes more.
EUI_BASE = 40.0
EUI_SHAPE_COEF = 30.0
REFERENCE_FLOOR_HEIGHT_M = 3.0
VINTAGE_EUI_OFFSETS = (15.0, 8.0, 4.0, 0.0)
CLASS_EUI_OFFSETS = {"SFH": 5.0, "MFH": 0.0}


@dataclass
class ShapeMetrics:
    footprint_area_m2: float
    perimeter_m: float
    height_m: float
    envelope_area_m2: float  # walls + roof
    volume_m3: float
    sv_ratio: float

    def validate(self) -> None:
        for name, v in self.__dict__.items():
            if not np.isfinite(v) or v <= 0.0:
                raise DegenerateBuildingError(f"{name} = {v}")


def compute_shape_metrics(record: FootprintRecord) -> ShapeMetrics:
    """Envelope, volume, and surface-to-volume ratio of an extruded footprint."""
    if record.height_m <= 0.0:
        raise DegenerateBuildingError(f"record {record.id}: height {record.height_m}")
    area = record.area_m2
    if area <= 0.0:
        raise DegenerateBuildingError(f"record {record.id}: area {area}")
    perim = geometry.perimeter(record.polygon)
    envelope = perim * record.height_m + area
    volume = area * record.height_m
    m = ShapeMetrics(
        footprint_area_m2=area,
        perimeter_m=perim,
        height_m=record.height_m,
        envelope_area_m2=envelope,
        volume_m3=volume,
        sv_ratio=envelope / volume,
    )
    m.validate()
    return m


def surrogate_eui(metrics: ShapeMetrics, vintage_bin: int, use_class: str) -> float:
    """Deterministic EUI in kWh/m2/yr from shape, vintage, and use class."""
    if not 0 <= vintage_bin < len(VINTAGE_EUI_OFFSETS):
        raise InputError(f"vintage bin {vintage_bin} outside [0, {len(VINTAGE_EUI_OFFSETS)})")
    return (
        EUI_BASE
        + EUI_SHAPE_COEF * metrics.sv_ratio * REFERENCE_FLOOR_HEIGHT_M
        + VINTAGE_EUI_OFFSETS[vintage_bin]
        + CLASS_EUI_OFFSETS.get(use_class, 0.0)
    )


def surrogate_eui_for_record(record: FootprintRecord) -> float:
    return surrogate_eui(compute_shape_metrics(record), bin_vintage(record.vintage_year),
                         record.use_class)


def aggregate_energy(euis, areas) -> float:
    """Sum of eui * area over aligned sequences, in declared order, float64."""
    euis = list(euis)
    areas = list(areas)
    if len(euis) != len(areas):
        raise InputError(f"{len(euis)} EUIs for {len(areas)} areas")
    total = np.float64(0.0)
    for eui, area in zip(euis, areas):
        if area < 0.0:
            raise InputError(f"negative area {area}")
        total += np.float64(eui) * np.float64(area)
    return float(total)


def accuracy_pct(estimate_kwh: float, ground_truth_kwh: float) -> float:
    """100 * (1 - |est - gt| / gt); undefined for gt <= 0."""
    if ground_truth_kwh <= 0.0:
        raise MetricUndefinedError(f"ground truth {ground_truth_kwh} is not positive")
    return 100.0 * (1.0 - abs(estimate_kwh - ground_truth_kwh) / ground_truth_kwh)


@dataclass
class EuiAssignment:
    label: str
    eui_kwh_per_m2: float
    area_m2: float
    source: str

    def validate(self) -> None:
        if not np.isfinite(self.eui_kwh_per_m2) or self.eui_kwh_per_m2 <= 0.0:
            raise InputError(f"{self.label}: bad EUI {self.eui_kwh_per_m2}")
        if not np.isfinite(self.area_m2) or self.area_m2 < 0.0:
            raise InputError(f"{self.label}: bad area {self.area_m2}")


@dataclass
class EnergyReport:
    estimate_kwh: float
    ground_truth_kwh: float
    absolute_error_kwh: float
    accuracy_ratio: float
    accuracy_pct: float  # percent, rounded to 2 decimals
    per_cluster: list[dict]
    baseline_estimate_kwh: float | None = None
    baseline_accuracy_pct: float | None = None
    improvement_points: float | None = None
    tool_version: str | None = None
    input_digests: dict | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None or k in (
            "baseline_estimate_kwh", "baseline_accuracy_pct", "improvement_points")}


def report_from_rows(rows: list[EuiAssignment], ground_truth_kwh: float,
                     baseline_rows: list[EuiAssignment] | None = None) -> EnergyReport:
    """Assemble the stock report; the per-cluster breakdown sums to the estimate."""
    for row in rows:
        row.validate()
    estimate = aggregate_energy([r.eui_kwh_per_m2 for r in rows], [r.area_m2 for r in rows])
    pct = accuracy_pct(estimate, ground_truth_kwh)
    ratio = 1.0 - abs(estimate - ground_truth_kwh) / ground_truth_kwh
    report = EnergyReport(
        estimate_kwh=estimate,
        ground_truth_kwh=float(ground_truth_kwh),
        absolute_error_kwh=abs(estimate - ground_truth_kwh),
        accuracy_ratio=ratio,
        accuracy_pct=round(pct, 2),
        per_cluster=[
            {
                "label": r.label,
                "eui_kwh_per_m2": r.eui_kwh_per_m2,
                "area_m2": r.area_m2,
                "energy_kwh": float(np.float64(r.eui_kwh_per_m2) * np.float64(r.area_m2)),
                "source": r.source,
            }
            for r in rows
        ],
    )
    if baseline_rows is not None:
        for row in baseline_rows:
            row.validate()
        base = aggregate_energy([r.eui_kwh_per_m2 for r in baseline_rows],
                                [r.area_m2 for r in baseline_rows])
        report.baseline_estimate_kwh = base
        report.baseline_accuracy_pct = round(accuracy_pct(base, ground_truth_kwh), 2)
        report.improvement_points = round(report.accuracy_pct - report.baseline_accuracy_pct, 2)
    return report


def archetype_label(arch: Archetype) -> str:
    return f"{arch.representative.use_class}-{arch.cluster_index}"


def archetype_rows(archetypes: list[Archetype], eui_provider, labels: list[str] | None = None,
                   source: str = "surrogate") -> list[EuiAssignment]:
    """EUI rows for archetypes; the provider maps an archetype to its EUI.

    The provider may raise ProviderError; a None return is converted to one.
    """
    rows = []
    for i, arch in enumerate(archetypes):
        label = labels[i] if labels else archetype_label(arch)
        eui = eui_provider(arch)
        if eui is None:
            raise ProviderError(f"no EUI available for archetype {label}")
        rows.append(EuiAssignment(label, float(eui), arch.cluster_total_area_m2, source))
    return rows


def build_report(archetypes: list[Archetype], eui_provider, ground_truth_kwh: float,
                 baseline_rows: list[EuiAssignment] | None = None,
                 labels: list[str] | None = None,
                 source: str = "surrogate") -> EnergyReport:
    """Archetype-based stock estimate scored against ground truth."""
    rows = archetype_rows(archetypes, eui_provider, labels, source)
    return report_from_rows(rows, ground_truth_kwh, baseline_rows)


def table_provider(table: dict[str, float]):
    """EUI provider backed by an archetype_id -> EUI mapping."""

    def provide(arch: Archetype) -> float:
        label = archetype_label(arch)
        if label not in table:
            raise ProviderError(f"EUI table has no entry for archetype {label}")
        return table[label]

    return provide


def read_ground_truth(path: str | Path) -> float:
    """Single JSON number, or a per-building CSV with a kwh column to sum."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        import csv

        with open(path) as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "kwh" not in reader.fieldnames:
                raise InputError(f"{path}: ground-truth CSV needs a 'kwh' column")
            total = np.float64(0.0)
            for row in reader:
                total += np.float64(row["kwh"])
        return float(total)
    doc = json.loads(path.read_text())
    if isinstance(doc, dict):
        doc = doc.get("total_kwh")
    if not isinstance(doc, (int, float)):
        raise InputError(f"{path}: expected a JSON number or {{'total_kwh': ...}}")
    return float(doc)
