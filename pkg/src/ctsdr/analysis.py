"""Metrology on trajectories and carved cavities."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares

from .kinematics import angle_between_deg
from .voxel import EmptyCavityError, VoxelGrid, entry_holes, slice_diameter


CAVITY_PLANS = ("stepped_rotation", "spiral")


class DegenerateInputError(ValueError):
    """Raised when points cannot determine a circle."""


class AmbiguousCenterlineError(ValueError):
    """Raised when a carved region has no single channel centerline."""


@dataclass(frozen=True)
class CircleFit:
    center: np.ndarray
    radius: float
    rms_mm: float


def fit_circle(points, tol: float = 1e-10) -> CircleFit:
    """Least-squares circle through 2-D points.

    An algebraic (Kasa) fit seeds a geometric refinement that minimises the
    sum of squared radial residuals ``|p - c| - r``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateInputError(f"expected (n, 2) points, got shape {pts.shape}")
    if len(pts) < 3:
        raise DegenerateInputError(f"need at least 3 points, got {len(pts)}")
    # work about the centroid with unit scale so the collinearity test is scale-free
    mean = pts.mean(axis=0)
    scale = np.abs(pts - mean).max()
    if scale == 0:
        raise DegenerateInputError("all points coincide")
    q = (pts - mean) / scale
    sv = np.linalg.svd(q, compute_uv=False)
    if sv[1] <= 1e-9 * sv[0]:
        raise DegenerateInputError("points are collinear")

    a = np.column_stack([2 * q, np.ones(len(q))])
    b = (q ** 2).sum(axis=1)
    (cx, cy, c), *_ = np.linalg.lstsq(a, b, rcond=None)
    r0 = math.sqrt(max(c + cx * cx + cy * cy, 0.0))

    def residuals(p):
        return np.hypot(q[:, 0] - p[0], q[:, 1] - p[1]) - p[2]

    def jacobian(p):
        d = np.hypot(q[:, 0] - p[0], q[:, 1] - p[1])
        d = np.where(d == 0, np.finfo(float).tiny, d)
        return np.column_stack([-(q[:, 0] - p[0]) / d, -(q[:, 1] - p[1]) / d, -np.ones(len(q))])

    sol = least_squares(residuals, [cx, cy, r0], jac=jacobian, method="lm",
                        xtol=tol, ftol=tol, gtol=tol)
    # short arcs leave a flat centre/radius valley where the cost-based stop
    # fires early; Gauss-Newton steps solved by QR settle it to rounding level
    x = sol.x
    for _ in range(20):
        step = np.linalg.lstsq(jacobian(x), -residuals(x), rcond=None)[0]
        x = x + step
        if np.abs(step).max() <= tol * 1e-3 * (1.0 + np.abs(x).max()):
            break
    cx, cy, r = x
    res = residuals(x) * scale
    return CircleFit(mean + scale * np.array([cx, cy]), abs(float(r)) * scale,
                     float(np.sqrt(np.mean(res ** 2))))


def project_to_plane(points) -> np.ndarray:
    """Coordinates of 3-D points in their best-fit plane (first two principal axes)."""
    pts = np.asarray(points, dtype=float)
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def bending_plane_coords(timeline) -> np.ndarray:
    """Guide-tip samples as (radial distance from the insertion axis, z) pairs.

    Undoes the axial rotation, so every sample lands in the common bending plane.
    """
    tips, _ = timeline.tip_poses()
    return np.column_stack([np.hypot(tips[:, 0], tips[:, 1]), tips[:, 2]])


def _slice_centroids(grid: VoxelGrid, min_slice_voxels: int, max_width_mm=None):
    zs = grid.centers(2)
    xs, ys = grid.centers(0), grid.centers(1)
    out = []
    for k in np.flatnonzero(grid.removed.any(axis=(0, 1))):
        layer = grid.removed[:, :, k]
        _, n = ndimage.label(layer)
        if n > 1:
            raise AmbiguousCenterlineError(
                f"slice at z={zs[k]:.3f} mm holds {n} separate regions; centerline is ambiguous"
            )
        ii, jj = np.nonzero(layer)
        if max_width_mm is not None:
            width = grid.h_mm * (1 + max(np.ptp(ii), np.ptp(jj)))
            if width > max_width_mm:
                raise AmbiguousCenterlineError(
                    f"slice at z={zs[k]:.3f} mm is {width:.2f} mm wide; looks like a cavity, not a channel"
                )
        if len(ii) >= min_slice_voxels:
            out.append((xs[ii].mean(), ys[jj].mean(), zs[k]))
    return np.asarray(out)


def channel_centerline(source, *, min_slice_voxels: int = 8, trim_mm: float = 0.0,
                       max_width_mm: float | None = None):
    """Centerline of a single drilled channel.

    ``source`` is either a timeline (guide-tip positions are returned) or a
    :class:`VoxelGrid`. Voxel mode first takes centroids of z-slices; when
    those bend, the removed voxels are re-binned by angle about the fitted
    arc so each centroid comes from a cut normal to the channel. Slices
    that split into several regions (branches, curves turning back to the
    entry face) make the centerline ambiguous and raise, as do slices wider
    than ``max_width_mm``. ``trim_mm`` drops that much channel length at
    both ends.
    """
    if not isinstance(source, VoxelGrid):
        tips, _ = source.tip_poses()
        return tips
    grid = source
    if grid.count == 0:
        raise EmptyCavityError("cavity is empty")
    coarse = _slice_centroids(grid, min_slice_voxels, max_width_mm)
    if len(coarse) < 3:
        return coarse
    try:
        basis_origin = coarse.mean(axis=0)
        _, _, vt = np.linalg.svd(coarse - basis_origin, full_matrices=False)
        plane = vt[:2]
        fit = fit_circle((coarse - basis_origin) @ plane.T)
    except DegenerateInputError:
        fit = None
    span = np.ptp(coarse, axis=0)
    if fit is None or fit.radius > 1e3 * max(span.max(), grid.h_mm):
        keep = (coarse[:, 2] - coarse[0, 2] >= trim_mm) & (coarse[-1, 2] - coarse[:, 2] >= trim_mm)
        return coarse[keep]

    pts = grid.removed_centers()
    uv = (pts - basis_origin) @ plane.T - fit.center
    ang = np.arctan2(uv[:, 1], uv[:, 0])
    # unwrap about the channel's mean direction so the bins never straddle +-pi
    ref = np.angle(np.exp(1j * ang).mean())
    ang = np.angle(np.exp(1j * (ang - ref)))
    width = grid.h_mm / fit.radius
    lo, hi = ang.min() + trim_mm / fit.radius, ang.max() - trim_mm / fit.radius
    if hi <= lo:
        return coarse
    bins = np.floor((ang - lo) / width).astype(np.int64)
    nb = int(np.floor((hi - lo) / width))
    sel = (bins >= 0) & (bins < nb)
    bins, pts = bins[sel], pts[sel]
    counts = np.bincount(bins, minlength=nb)
    sums = np.stack([np.bincount(bins, pts[:, d], minlength=nb) for d in range(3)], axis=1)
    ok = counts >= min_slice_voxels
    return sums[ok] / counts[ok, None]


def fit_centerline_radius(points) -> CircleFit:
    pts = np.asarray(points, dtype=float)
    if pts.shape[1] == 3:
        pts = project_to_plane(pts)
    return fit_circle(pts)


def trajectory_radius(timeline) -> CircleFit:
    """Radius of curvature from the bending-plane projection of the guide-tip path."""
    coords = bending_plane_coords(timeline)
    moving = timeline.s_mm > 0
    coords = np.unique(coords[moving], axis=0)
    return fit_circle(coords)


def helix_pitch(timeline) -> float:
    """Insertion advance per full turn of the tip, measured from tip positions.

    Azimuth comes from the tip's position about the insertion axis and the
    advance from the arc length travelled along the guide.
    """
    tips, _ = timeline.tip_poses()
    moving = np.hypot(tips[:, 0], tips[:, 1]) > 1e-9
    if moving.sum() < 2:
        raise ValueError("tip never leaves the insertion axis; pitch undefined")
    tips = tips[moving]
    az = np.degrees(np.unwrap(np.arctan2(tips[:, 1], tips[:, 0])))
    s = timeline.s_mm[moving]
    turn = az[-1] - az[0]
    if turn == 0:
        raise ValueError("tip does not rotate; pitch undefined")
    return float(abs(s[-1] - s[0]) * 360.0 / abs(turn))


def _inside_block(points, grid: VoxelGrid) -> np.ndarray:
    lo = np.asarray(grid.block.origin_mm)
    hi = lo + np.asarray(grid.block.size_mm)
    return np.all((points >= lo) & (points <= hi), axis=1)


def spiral_radii(timeline, grid: VoxelGrid):
    """Lateral reach of the cutter's distal point at the first and last samples inside the block."""
    _, _, distal = timeline.cutter_points()
    inside = np.flatnonzero(_inside_block(distal, grid))
    if len(inside) == 0:
        raise ValueError("the cutter never enters the block")
    reach = np.hypot(distal[:, 0], distal[:, 1])
    return {"initial_radius_mm": float(reach[inside[0]]),
            "final_radius_mm": float(reach[inside[-1]])}


@dataclass
class CavityReport:
    entry_diameter_mm: float
    slice_diameters: list
    max_lateral_reach_mm: float
    tip_angle_change_deg: float
    removed_volume_mm3: float
    fitted_radius_mm: float
    radius_deviation_pct: float
    plan_label: str
    extras: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("extras")
        d.pop("notes")
        d["slice_diameters"] = [[float(a), float(b)] for a, b in self.slice_diameters]
        return d


def ring_depths(timeline, grid: VoxelGrid) -> list:
    """Depths below the entry face of the cutter's ball centre at each insertion stop.

    A stop is the end of an insertion segment, which for stepped plans is
    where the ring is swept.
    """
    tool = timeline.tool
    def inserting(i):
        label = timeline.labels[seg[i]]
        return label.startswith("insert") or label == "spiral"

    seg = timeline.segment
    # the first sample of the next segment sits on the segment boundary
    ends = [i + 1 for i in np.flatnonzero(np.diff(seg) != 0) if inserting(i)]
    if inserting(len(seg) - 1):
        ends.append(len(seg) - 1)
    if not ends:
        return []
    tips, tans = timeline.tip_poses()
    centers = tips[ends] + (tool.cutter_length_mm - tool.radius_mm) * tans[ends]
    depths = centers[:, 2] - grid.block.entry_z_mm
    out = []
    for d in depths:
        d = float(d)
        if 0 <= d <= grid.block.size_mm[2] and all(abs(d - o) > 1e-9 for o in out):
            out.append(d)
    return out


def build_cavity_report(grid: VoxelGrid, timeline, guide=None, tool=None,
                        reference: dict | None = None) -> CavityReport:
    """Collect every cavity metric for one carved run."""
    guide = guide or timeline.guide
    tool = tool or timeline.tool
    if grid.count == 0:
        raise EmptyCavityError("cavity is empty; nothing was drilled")

    entry, holes = entry_holes(grid)
    slices = []
    for depth in ring_depths(timeline, grid):
        try:
            slices.append((depth, slice_diameter(grid, depth)))
        except EmptyCavityError:
            continue

    tips, tans, distal = timeline.cutter_points()
    reach = np.hypot(distal[:, 0], distal[:, 1])
    angles = np.degrees(np.arctan2(np.linalg.norm(np.cross(tans[0], tans), axis=1),
                                   tans @ tans[0]))
    fit = trajectory_radius(timeline)
    deviation = 100.0 * abs(fit.radius - guide.curve_radius_mm) / guide.curve_radius_mm

    report = CavityReport(
        entry_diameter_mm=float(entry),
        slice_diameters=slices,
        max_lateral_reach_mm=float(reach.max()),
        tip_angle_change_deg=float(angles.max()),
        removed_volume_mm3=grid.count * grid.h_mm ** 3,
        fitted_radius_mm=float(fit.radius),
        radius_deviation_pct=float(deviation),
        plan_label=timeline.plan_label,
    )
    if holes > 1:
        report.notes.append(f"entry face shows {holes} openings: the cutter breaks back out "
                            "through the entry face; entry diameter is the on-axis opening")
    final_angle = angle_between_deg(tans[0], tans[-1])
    report.extras.update({
        "final_lateral_reach_mm": float(reach[-1]),
        "final_tip_angle_change_deg": float(final_angle),
        "fit_rms_mm": fit.rms_mm,
        "removed_count": int(grid.count),
        "voxel_size_mm": grid.h_mm,
    })
    if timeline.plan_label in CAVITY_PLANS:
        report.notes.append("voxel centerline cross-check skipped: cavity plan has no single channel")
    else:
        try:
            centre = channel_centerline(grid, trim_mm=tool.cutter_diameter_mm,
                                        max_width_mm=3 * tool.cutter_diameter_mm)
            if len(centre) >= 3:
                vfit = fit_centerline_radius(centre)
                report.extras["voxel_centerline_radius_mm"] = float(vfit.radius)
                report.extras["voxel_centerline_deviation_pct"] = float(
                    100.0 * abs(vfit.radius - guide.curve_radius_mm) / guide.curve_radius_mm)
        except (AmbiguousCenterlineError, DegenerateInputError) as exc:
            report.notes.append(f"voxel centerline cross-check skipped: {exc}")

    for key, measured in (reference or {}).items():
        simulated = _reference_value(report, key)
        if simulated is None:
            report.notes.append(f"reference {key}={measured}: no simulated counterpart")
            continue
        pct = 100.0 * (simulated - measured) / measured
        report.notes.append(
            f"{key}: simulated {simulated:.4g} vs measured reference {measured:.4g} ({pct:+.1f}%)"
            + _REFERENCE_HINTS.get(key, "")
        )
    return report


_REFERENCE_HINTS = {
    "tip_angle_deg": "; ideal constant-curvature arc, guide deflection and slip are not modelled",
    "lateral_reach_mm": "; cutter distal point of the ideal arc",
}


def _reference_value(report: CavityReport, key: str):
    table = {
        "lateral_reach_mm": report.extras.get("final_lateral_reach_mm"),
        "tip_angle_deg": report.extras.get("final_tip_angle_change_deg"),
        "radius_mm": report.fitted_radius_mm,
        "entry_diameter_mm": report.entry_diameter_mm,
    }
    if key.startswith("ring_diameter_") and key.endswith("_mm"):
        k = int(key[len("ring_diameter_"):-3]) - 1
        return report.slice_diameters[k][1] if 0 <= k < len(report.slice_diameters) else None
    return table.get(key)
