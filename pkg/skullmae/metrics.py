"""
Segmentation metrics for reconstructed defects: DSC, boundary DSC and HD95,
plus per-case reports and mean/median summaries.
"""

import csv
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from skullmae import config
from skullmae.distance import squared_edt
from skullmae.errors import BothEmpty, EmptyVolume, SkullMAEError, VolumeIoError
from skullmae.morphology import boundary
from skullmae.schemas import MetricsReport, SummaryRow
from skullmae.volume import VoxelGrid, check_geometry


@dataclass
class SurfaceDistances:
    """Directed boundary-to-boundary distances in mm"""
    a_to_b: np.ndarray
    b_to_a: np.ndarray

    def pooled(self) -> np.ndarray:
        return np.sort(np.concatenate([self.a_to_b, self.b_to_a]))


def dsc(a: VoxelGrid, b: VoxelGrid) -> float:
    """Dice similarity 2|a & b| / (|a| + |b|)"""
    check_geometry(a, b)
    size_a = int(np.count_nonzero(a.data))
    size_b = int(np.count_nonzero(b.data))
    if size_a + size_b == 0:
        raise BothEmpty(f"dsc of two empty grids ({a.describe()})")
    overlap = int(np.count_nonzero(a.data & b.data))
    return 2.0 * overlap / (size_a + size_b)


def surface_distances(a: VoxelGrid, b: VoxelGrid) -> SurfaceDistances:
    """
    Distances from each boundary voxel of a to the boundary of b, and back.

    Raises:
        GeometryMismatch: grids differ in dims, spacing or origin
        EmptyVolume: either grid has no foreground
    """
    check_geometry(a, b)
    for name, g in (("a", a), ("b", b)):
        if not g.data.any():
            raise EmptyVolume(f"surface distances need a nonempty {name} ({g.describe()})")

    surface_a = boundary(a).data
    surface_b = boundary(b).data
    to_b = squared_edt(surface_b, b.spacing)
    to_a = squared_edt(surface_a, a.spacing)
    return SurfaceDistances(
        a_to_b=np.sqrt(to_b[surface_a]),
        b_to_a=np.sqrt(to_a[surface_b]),
    )


def nearest_rank_index(n: int, percentile: int = 95) -> int:
    """ceil(percentile / 100 * n) - 1 computed in integers"""
    return (percentile * n + 99) // 100 - 1


def hd95(a: VoxelGrid, b: VoxelGrid) -> float:
    """95th percentile (nearest rank) of the pooled directed surface distances"""
    pooled = surface_distances(a, b).pooled()
    return float(pooled[nearest_rank_index(len(pooled))])


def boundary_region(gt: VoxelGrid, width_mm: float) -> np.ndarray:
    """Voxels within width_mm of the ground-truth boundary"""
    if not gt.data.any():
        raise EmptyVolume(f"boundary region of an empty ground truth ({gt.describe()})")
    return np.sqrt(squared_edt(boundary(gt).data, gt.spacing)) <= width_mm


def bdsc(pred: VoxelGrid, gt: VoxelGrid, width_mm: float = config.BDSC_WIDTH_MM) -> float:
    """
    Dice restricted to a tube of width_mm around the boundary of gt.

    Both masks empty inside the tube counts as perfect agreement.
    """
    check_geometry(pred, gt)
    region = boundary_region(gt, width_mm)
    pred_r = pred.with_data(pred.data & region)
    gt_r = gt.with_data(gt.data & region)
    try:
        return dsc(pred_r, gt_r)
    except BothEmpty:
        return 1.0


def evaluate_case(
    pred_defect: VoxelGrid,
    gt_defect: VoxelGrid,
    case_id: str = "",
    seed: Optional[int] = None,
    config_hash: Optional[str] = None,
    width_mm: float = config.BDSC_WIDTH_MM,
) -> MetricsReport:
    """
    Compute DSC, BDSC and HD95 of a predicted defect.

    An empty prediction scores DSC 0 and leaves HD95 undefined
    (hd95_mm is None, hd95_defined False).
    """
    check_geometry(pred_defect, gt_defect)
    if not gt_defect.data.any():
        raise EmptyVolume(f"case {case_id}: ground-truth defect is empty")

    hd = hd95(pred_defect, gt_defect) if pred_defect.data.any() else None
    return MetricsReport(
        case_id=case_id,
        dsc=dsc(pred_defect, gt_defect),
        bdsc=bdsc(pred_defect, gt_defect, width_mm),
        hd95_mm=hd,
        hd95_defined=hd is not None,
        seed=seed,
        config_hash=config_hash,
    )


def failed_report(case_id: str, error: Exception, seed: Optional[int] = None,
                  config_hash: Optional[str] = None) -> MetricsReport:
    """Report row for a case that could not be evaluated"""
    name = type(error).__name__ if isinstance(error, SkullMAEError) else "Error"
    return MetricsReport(case_id=case_id, seed=seed, config_hash=config_hash,
                         error=f"{name}: {error}")


# =============================================================================
# Summaries
# =============================================================================

def _mean_median(values: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    return float(statistics.fmean(values)), float(statistics.median(values))


def summarize(reports: Sequence[MetricsReport], label: str = "all") -> SummaryRow:
    """Mean and median per metric; HD95 over defined cases only"""
    ok = [r for r in reports if r.error is None]
    dsc_mean, dsc_median = _mean_median([r.dsc for r in ok])
    bdsc_mean, bdsc_median = _mean_median([r.bdsc for r in ok])
    hd_values = [r.hd95_mm for r in ok if r.hd95_defined]
    hd_mean, hd_median = _mean_median(hd_values)
    return SummaryRow(
        label=label,
        n_cases=len(reports),
        n_failed=len(reports) - len(ok),
        dsc_mean=dsc_mean,
        dsc_median=dsc_median,
        bdsc_mean=bdsc_mean,
        bdsc_median=bdsc_median,
        hd95_mean=hd_mean,
        hd95_median=hd_median,
        hd95_undefined=len(ok) - len(hd_values),
    )


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def write_summary_csv(rows: Sequence[SummaryRow], path: Path) -> None:
    fields = list(SummaryRow.model_fields)
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(fields)
            for row in rows:
                writer.writerow([_csv_value(getattr(row, name)) for name in fields])
    except OSError as e:
        raise VolumeIoError(f"Cannot write summary {path}: {e}")


def write_metrics_jsonl(reports: Sequence[MetricsReport], path: Path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            for report in reports:
                f.write(report.model_dump_json() + "\n")
    except OSError as e:
        raise VolumeIoError(f"Cannot write metrics {path}: {e}")


def write_reports(reports: Sequence[MetricsReport], out_dir: Path, label: str = "all") -> List[Path]:
    """Write metrics.jsonl and summary.csv into out_dir"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / config.METRICS_FILENAME
    summary_path = out_dir / config.SUMMARY_FILENAME
    write_metrics_jsonl(reports, metrics_path)
    write_summary_csv([summarize(reports, label)], summary_path)
    return [metrics_path, summary_path]
