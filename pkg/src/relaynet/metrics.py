"""Segmentation quality measures: per-class Dice, layer thickness error
(MAD-LT), contour error (CE) and the 9-zone ETDRS thickness grid."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

CLASS_NAMES = ("RaR", "ILM", "NFL-IPL", "INL", "OPL", "ONL-ISM", "ISE", "OS-RPE", "RbR", "Fluid")
LAYER_IDS = (1, 2, 3, 4, 5, 6, 7)
FOREGROUND_IDS = LAYER_IDS + (9,)

# Published per-class results of the reference network on the Duke DME test
# split. Shipped for side-by-side display only; never recomputed here.
PUBLISHED_REFERENCE = {
    "dice": dict(zip(CLASS_NAMES, (0.99, 0.90, 0.94, 0.87, 0.84, 0.93, 0.92, 0.90, 0.99, 0.77))),
    "mad_lt": dict(zip(CLASS_NAMES[1:8], (1.50, 1.20, 1.00, 1.31, 1.35, 0.62, 0.92))),
    "ce": dict(zip(CLASS_NAMES[1:8], (0.85, 1.14, 1.22, 1.35, 2.09, 0.81, 0.81))),
    "etdrs": (0.34, 0.202, 0.161, 0.204, 0.151, 0.127, 0.123, 0.132, 0.160),
}

ZONE_NAMES = (
    "central", "inner_right", "inner_up", "inner_left", "inner_down",
    "outer_right", "outer_up", "outer_left", "outer_down",
)

# B-scan offsets (in acquisition frames) of the 11 annotated Duke frames
DUKE_FRAME_OFFSETS = (-20, -15, -10, -5, -2, 0, 2, 5, 10, 15, 20)


def _check_pair(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return pred, truth


def dice_score(pred, truth, cls: int) -> float:
    """``2|P & T| / (|P| + |T|)``; 1.0 when the class is absent from both."""
    pred, truth = _check_pair(pred, truth)
    p, t = pred == cls, truth == cls
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def thickness_profile(labels, num_classes: int = 10) -> np.ndarray:
    """Pixel count of every class in every column, shape ``(num_classes, W)``."""
    labels = np.asarray(labels)
    classes = np.arange(num_classes).reshape(-1, 1, 1)
    return (labels[None] == classes).sum(axis=1).astype(np.float64)


def mad_lt(pred, truth, layer: int) -> float:
    """Mean over columns of the absolute thickness difference of ``layer``."""
    pred, truth = _check_pair(pred, truth)
    tp = (pred == layer).sum(axis=0)
    tt = (truth == layer).sum(axis=0)
    return float(np.abs(tp - tt).mean())


def _top_rows(labels, layer):
    mask = labels == layer
    present = mask.any(axis=0)
    return np.where(present, mask.argmax(axis=0), -1), present


def contour_error(pred, truth, layer: int, missing_penalty: Optional[float] = None) -> float:
    """Mean per-column displacement of the top boundary of ``layer``.

    Columns where only one map contains the layer cost ``missing_penalty``
    (default: image height); columns where neither does are skipped. Returns
    0.0 if no column is scored.
    """
    pred, truth = _check_pair(pred, truth)
    if missing_penalty is None:
        missing_penalty = float(pred.shape[0])
    rp, pp = _top_rows(pred, layer)
    rt, pt = _top_rows(truth, layer)
    both = pp & pt
    one = pp ^ pt
    n = int(both.sum() + one.sum())
    if n == 0:
        return 0.0
    total = np.abs(rp[both] - rt[both]).sum() + missing_penalty * one.sum()
    return float(total / n)


# --------------------------------------------------------------------- ETDRS


@dataclass(frozen=True)
class EtdrsSpec:
    fovea_frame: int = 5
    lateral_res_um: float = 11.4
    azimuthal_spacing_um: float = 122.0
    ring_diameters_mm: tuple = (1.0, 3.0, 6.0)
    frame_offsets: Optional[tuple] = None
    fovea_column: Optional[float] = None

    def __post_init__(self):
        if self.lateral_res_um <= 0 or self.azimuthal_spacing_um <= 0:
            raise ValueError("resolutions must be positive")


def etdrs_zone(x_mm, y_mm, spec: EtdrsSpec = EtdrsSpec()):
    """Zone index 1..9 for fovea-relative positions, 0 outside the grid.

    Zone 1 is the central disc; 2-5 the inner ring and 6-9 the outer ring, in
    the order right (+x), up (+y), left, down. Quadrants are split by the
    diagonals; points exactly on a diagonal go to the horizontal quadrant.
    """
    x = np.asarray(x_mm, dtype=np.float64)
    y = np.asarray(y_mm, dtype=np.float64)
    r = np.hypot(x, y)
    d1, d2, d3 = spec.ring_diameters_mm
    horizontal = np.abs(x) >= np.abs(y)
    quadrant = np.where(horizontal, np.where(x >= 0, 0, 2), np.where(y > 0, 1, 3))
    zone = np.zeros(r.shape, dtype=np.int64)
    zone = np.where(r <= d3 / 2, 6 + quadrant, zone)
    zone = np.where(r <= d2 / 2, 2 + quadrant, zone)
    zone = np.where(r <= d1 / 2, 1, zone)
    return zone


def sample_positions(n_frames: int, width: int, spec: EtdrsSpec = EtdrsSpec()):
    """Physical ``(x_mm, y_mm)`` of every (frame, column) sample, shape ``(F, W)``."""
    if spec.frame_offsets is not None:
        if len(spec.frame_offsets) != n_frames:
            raise ValueError(f"{len(spec.frame_offsets)} frame offsets for {n_frames} frames")
        offsets = np.asarray(spec.frame_offsets, dtype=np.float64)
        offsets = offsets - offsets[spec.fovea_frame]
    else:
        offsets = np.arange(n_frames, dtype=np.float64) - spec.fovea_frame
    center = (width - 1) / 2 if spec.fovea_column is None else spec.fovea_column
    x = (np.arange(width) - center) * spec.lateral_res_um / 1000.0
    y = offsets * spec.azimuthal_spacing_um / 1000.0
    return np.broadcast_to(x[None, :], (n_frames, width)), np.broadcast_to(y[:, None], (n_frames, width))


def total_thickness(profile: np.ndarray) -> np.ndarray:
    """Sum of the seven retinal layer thicknesses per column."""
    return np.asarray(profile)[list(LAYER_IDS)].sum(axis=0)


def etdrs_grid(profiles: Sequence[np.ndarray], spec: EtdrsSpec = EtdrsSpec()) -> np.ndarray:
    """Mean total retinal thickness in each of the 9 zones (NaN when empty).

    ``profiles`` are per-frame :func:`thickness_profile` arrays ordered
    laterally.
    """
    if not 0 <= spec.fovea_frame < len(profiles):
        raise ValueError(f"fovea frame {spec.fovea_frame} outside {len(profiles)} frames")
    values = np.stack([total_thickness(p) for p in profiles])
    x, y = sample_positions(values.shape[0], values.shape[1], spec)
    zones = etdrs_zone(x, y, spec)
    out = np.full(9, np.nan)
    for z in range(1, 10):
        sel = zones == z
        if sel.any():
            out[z - 1] = values[sel].mean()
    return out


# -------------------------------------------------------------------- report


@dataclass
class MetricsReport:
    dice: Dict[str, float]
    mad_lt: Dict[str, float]
    ce: Dict[str, float]
    etdrs: Optional[List[float]] = None
    n_scans: int = 0
    reference: dict = field(default_factory=lambda: PUBLISHED_REFERENCE)

    def rows(self):
        for name, v in self.dice.items():
            yield "dice", name, v
        for name, v in self.mad_lt.items():
            yield "mad_lt", name, v
        for name, v in self.ce.items():
            yield "ce", name, v
        if self.etdrs is not None:
            for z, v in enumerate(self.etdrs, 1):
                yield "etdrs_abs_diff", f"zone{z}", v

    def _reference_value(self, metric, name):
        if metric == "etdrs_abs_diff":
            return self.reference["etdrs"][int(name[4:]) - 1]
        return self.reference[metric].get(name)

    def to_tsv(self) -> str:
        lines = ["metric\tclass\tvalue\tpublished_reference"]
        for metric, name, v in self.rows():
            ref = self._reference_value(metric, name)
            ref = "NA" if ref is None else f"{ref:.3f}"
            lines.append(f"{metric}\t{name}\t{v:.6f}\t{ref}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = [f"Segmentation metrics over {self.n_scans} scan(s)"]
        out.append(f"{'metric':<16}{'class':<14}{'value':>10}{'publ.*':>10}")
        for metric, name, v in self.rows():
            ref = self._reference_value(metric, name)
            ref = "-" if ref is None else f"{ref:.2f}"
            out.append(f"{metric:<16}{name:<14}{v:>10.4f}{ref:>10}")
        out.append("* published reference results on the Duke DME benchmark, not recomputed")
        return "\n".join(out) + "\n"

    @property
    def mean_foreground_dice(self) -> float:
        return float(np.mean([self.dice[CLASS_NAMES[i]] for i in FOREGROUND_IDS]))


def report(pred_scans, truth_scans, spec: Optional[EtdrsSpec] = None) -> MetricsReport:
    """Aggregate metrics over paired label maps.

    Dice uses pixel counts pooled over all scans; MAD-LT and CE average the
    per-scan values. With ``spec`` the scans are treated as one laterally
    ordered volume and the ETDRS rows hold ``|zone_pred - zone_truth|``.
    """
    pred_scans = [np.asarray(p) for p in pred_scans]
    truth_scans = [np.asarray(t) for t in truth_scans]
    if len(pred_scans) != len(truth_scans):
        raise ValueError(f"{len(pred_scans)} predictions for {len(truth_scans)} truths")
    if not pred_scans:
        raise ValueError("no scans to evaluate")
    for p, t in zip(pred_scans, truth_scans):
        _check_pair(p, t)
    flat_p = np.concatenate([p.ravel() for p in pred_scans])
    flat_t = np.concatenate([t.ravel() for t in truth_scans])
    dice = {name: dice_score(flat_p, flat_t, i) for i, name in enumerate(CLASS_NAMES)}
    mad = {
        CLASS_NAMES[i]: float(np.mean([mad_lt(p, t, i) for p, t in zip(pred_scans, truth_scans)]))
        for i in LAYER_IDS
    }
    ce = {
        CLASS_NAMES[i]: float(np.mean([contour_error(p, t, i) for p, t in zip(pred_scans, truth_scans)]))
        for i in LAYER_IDS
    }
    etdrs = None
    if spec is not None:
        zp = etdrs_grid([thickness_profile(p) for p in pred_scans], spec)
        zt = etdrs_grid([thickness_profile(t) for t in truth_scans], spec)
        etdrs = [float(v) for v in np.abs(zp - zt)]
    return MetricsReport(dice, mad, ce, etdrs, n_scans=len(pred_scans))
