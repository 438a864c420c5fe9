"""Voxel model of the bone block and swept ball-nose material removal."""
from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .kinematics import DrillTool

DENSITY_LABELS = (5, 10, "custom")
MASK_MAGIC = "CTSDR-VOXEL-MASK v1"


class CarveError(RuntimeError):
    """Raised when a sweep cannot be carved faithfully."""


class EmptyCavityError(ValueError):
    """Raised by metrology on an empty (or empty-slice) cavity."""


@dataclass(frozen=True)
class BoneBlock:
    """Axis-aligned bone phantom; ``origin_mm`` is its minimum corner in the base frame.

    The entry face is the ``z = origin_mm[2]`` face. Density only labels the
    phantom grade and has no geometric effect.
    """

    size_mm: tuple = (60.0, 60.0, 90.0)
    origin_mm: tuple = (-30.0, -30.0, 0.0)
    density_pcf: object = 10
    entry_face_normal: str = "-z"

    def __post_init__(self):
        size = tuple(float(v) for v in self.size_mm)
        origin = tuple(float(v) for v in self.origin_mm)
        if len(size) != 3 or len(origin) != 3:
            raise ValueError("size_mm and origin_mm must be 3-vectors")
        if not all(v > 0 and math.isfinite(v) for v in size):
            raise ValueError(f"block sizes must be positive, got {size}")
        if not all(math.isfinite(v) for v in origin):
            raise ValueError("block origin must be finite")
        if self.density_pcf not in DENSITY_LABELS:
            raise ValueError(f"density_pcf must be one of {DENSITY_LABELS}, got {self.density_pcf!r}")
        if self.entry_face_normal != "-z":
            raise ValueError("only the -z entry face (facing the outer tube) is supported")
        object.__setattr__(self, "size_mm", size)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def entry_z_mm(self) -> float:
        return self.origin_mm[2]

    @classmethod
    def centered(cls, size_mm=(60.0, 60.0, 90.0), entry_z_mm: float = 0.0, density_pcf=10):
        """Block centred on the insertion axis with its entry face at ``entry_z_mm``."""
        sx, sy, _ = size_mm
        return cls(tuple(size_mm), (-sx / 2, -sy / 2, entry_z_mm), density_pcf)


@dataclass
class VoxelGrid:
    block: BoneBlock
    h_mm: float = 0.25
    removed: np.ndarray = field(default=None, repr=False)
    count: int = 0

    def __post_init__(self):
        if not (self.h_mm > 0 and math.isfinite(self.h_mm)):
            raise ValueError(f"voxel size must be positive, got {self.h_mm}")
        dims = tuple(int(math.ceil(s / self.h_mm - 1e-9)) for s in self.block.size_mm)
        if self.removed is None:
            self.removed = np.zeros(dims, dtype=np.uint8)
        elif self.removed.shape != dims:
            raise ValueError(f"mask shape {self.removed.shape} does not match grid dims {dims}")
        self.count = int(np.count_nonzero(self.removed))

    @property
    def dims(self) -> tuple:
        return self.removed.shape

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.block.origin_mm, dtype=float)

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.h_mm

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.h_mm

    @property
    def removed_volume_mm3(self) -> float:
        return self.count * self.h_mm ** 3

    def removed_centers(self) -> np.ndarray:
        idx = np.argwhere(self.removed)
        return self.origin + (idx + 0.5) * self.h_mm

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.block, self.h_mm, self.removed.copy())


@dataclass(frozen=True)
class CarveResult:
    removed_count: int
    clamped: bool
    boundary_warning: bool = False
    samples: int = 0
    backend: str = ""


def default_workers() -> int:
    value = os.environ.get("CTSDR_WORKERS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise ValueError(f"CTSDR_WORKERS must be an integer, got {value!r}") from None


def _unique_consecutive(tips, tangents):
    if len(tips) < 2:
        return tips, tangents
    same = np.all(tips[1:] == tips[:-1], axis=1) & np.all(tangents[1:] == tangents[:-1], axis=1)
    keep = np.concatenate([[True], ~same])
    return tips[keep], tangents[keep]


def check_sampling(tips, distal, tool: DrillTool) -> None:
    """Consecutive cutter poses must stay within a quarter cutter diameter."""
    if len(tips) < 2:
        return
    limit = tool.cutter_diameter_mm / 4
    step = np.maximum(np.linalg.norm(np.diff(tips, axis=0), axis=1),
                      np.linalg.norm(np.diff(distal, axis=0), axis=1))
    worst = int(np.argmax(step))
    if step[worst] > limit:
        raise CarveError(
            f"under-sampled sweep: cutter moves {step[worst]:.4g} mm between samples "
            f"{worst} and {worst + 1} (limit {limit:.4g} mm); reduce dt"
        )


def carve_poses(grid: VoxelGrid, tips, tangents, tool: DrillTool, workers: int | None = None,
                use_numba: bool | None = None) -> CarveResult:
    """Mark every voxel whose centre lies inside the cutter at any of the given poses.

    Poses may be supplied in any order; the resulting mask is the same set union.
    """
    tips = np.ascontiguousarray(tips, dtype=np.float64).reshape(-1, 3)
    tangents = np.ascontiguousarray(tangents, dtype=np.float64).reshape(-1, 3)
    if len(tips) != len(tangents):
        raise ValueError("tips and tangents differ in length")
    workers = default_workers() if workers is None else max(1, int(workers))
    r = tool.radius_mm
    cyl_len = tool.cutter_length_mm - r

    tips, tangents = _unique_consecutive(tips, tangents)
    lo, hi = _kernels.solid_bounds(tips, tangents, r, cyl_len)
    origin, upper = grid.origin, grid.upper
    clamped = bool(np.any(lo < origin) or np.any(hi > upper))
    i0, i1 = _kernels.index_ranges(lo, hi, origin, grid.h_mm, grid.dims)
    hit = np.all(i1 >= i0, axis=1)
    tips, tangents, i0, i1 = tips[hit], tangents[hit], i0[hit], i1[hit]

    kernel = _kernels.carve_kernel(use_numba)
    xs, ys, zs = (np.ascontiguousarray(grid.centers(a)) for a in range(3))
    before = grid.count
    mask = grid.removed
    chunks = _kernels.partition(len(tips), workers)
    if len(chunks) == 1 or len(tips) == 0:
        kernel(mask, xs, ys, zs, tips, tangents, i0, i1, r, cyl_len)
    else:
        def run(bounds):
            a, b = bounds
            kernel(mask, xs, ys, zs, tips[a:b], tangents[a:b], i0[a:b], i1[a:b], r, cyl_len)

        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            list(pool.map(run, chunks))
    grid.count = int(np.count_nonzero(mask))
    return CarveResult(grid.count - before, clamped, False, int(len(tips)),
                       _kernels.backend_name(use_numba))


def carve(grid: VoxelGrid, timeline, guide=None, tool: DrillTool | None = None,
          workers: int | None = None, use_numba: bool | None = None) -> CarveResult:
    """Remove the material swept by the cutter over every sample of ``timeline``."""
    if len(timeline) == 0:
        raise CarveError("empty timeline")
    tool = tool or timeline.tool
    if guide is not None and guide != timeline.guide:
        raise CarveError("timeline was integrated for a different guide")
    tips, tangents = timeline.tip_poses()
    distal = tips + tool.cutter_length_mm * tangents
    check_sampling(tips, distal, tool)
    warning = _initial_boundary_overlap(grid, tips[0], tangents[0], tool)
    res = carve_poses(grid, tips, tangents, tool, workers, use_numba)
    return CarveResult(res.removed_count, res.clamped, warning, res.samples, res.backend)


def _initial_boundary_overlap(grid, tip, tangent, tool) -> bool:
    """True when the starting cutter straddles a block face other than the entry face."""
    r = tool.radius_mm
    lo, hi = _kernels.solid_bounds(tip[None], tangent[None], r, tool.cutter_length_mm - r)
    lo, hi = lo[0], hi[0]
    origin, upper = grid.origin, grid.upper
    if np.any(hi <= origin) or np.any(lo >= upper):
        return False
    crosses = [lo[0] < origin[0], hi[0] > upper[0], lo[1] < origin[1], hi[1] > upper[1],
               hi[2] > upper[2]]
    return bool(any(crosses))


# -- metrology on the removal mask --------------------------------------------

def _max_pairwise_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    if len(points) > 64:
        from scipy.spatial import ConvexHull, QhullError

        try:
            points = points[ConvexHull(points).vertices]
        except QhullError:
            pass
    diff = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def entry_hole_diameter(grid: VoxelGrid) -> float:
    """Largest centre-to-centre span of the first interior slice, plus one voxel width."""
    return entry_holes(grid)[0]


def entry_holes(grid: VoxelGrid):
    """Diameter of the hole on the insertion axis and the number of holes in the entry slice.

    More than one hole means the cutter broke back out through the entry face.
    """
    from scipy import ndimage

    layer = grid.removed[:, :, 0]
    labels, n = ndimage.label(layer)
    if n == 0:
        raise EmptyCavityError("no removed voxels on the entry face slice")
    idx = np.argwhere(layer)
    pts = grid.origin[:2] + (idx + 0.5) * grid.h_mm
    if n > 1:
        own = labels[tuple(idx.T)]
        nearest = own[np.argmin(np.hypot(pts[:, 0], pts[:, 1]))]
        pts = pts[own == nearest]
    return _max_pairwise_distance(pts) + grid.h_mm, int(n)


def slice_layer(grid: VoxelGrid, depth_mm: float) -> int:
    if not (0 <= depth_mm <= grid.block.size_mm[2]):
        raise ValueError(f"depth {depth_mm} mm outside the block (0..{grid.block.size_mm[2]})")
    return min(int(math.floor(depth_mm / grid.h_mm)), grid.dims[2] - 1)


def slice_diameter(grid: VoxelGrid, depth_mm: float) -> float:
    """Twice the largest radial distance from the insertion axis at ``depth_mm`` below the entry face."""
    k = slice_layer(grid, depth_mm)
    idx = np.argwhere(grid.removed[:, :, k])
    if len(idx) == 0:
        raise EmptyCavityError(f"no removed voxels at depth {depth_mm} mm")
    pts = grid.origin[:2] + (idx + 0.5) * grid.h_mm
    return 2.0 * float(np.hypot(pts[:, 0], pts[:, 1]).max()) + grid.h_mm


# -- surface export -------------------------------------------------------------

# corner offsets per (axis, outward sign) in counter-clockwise order seen from outside
_QUADS = {
    0: ((0, 0, 0), (0, 1, 0), (0, 1, 1), (0, 0, 1)),
    1: ((0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 0, 0)),
    2: ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)),
}


def cavity_mesh(grid: VoxelGrid):
    """Boundary faces of the removed region as an indexed triangle mesh.

    Returns ``(vertices_mm, triangles)``; vertices are shared between faces and
    sorted lexicographically by lattice corner, so output is deterministic.
    """
    if grid.count == 0:
        raise EmptyCavityError("cavity is empty; nothing to mesh")
    padded = np.pad(grid.removed.astype(bool), 1)
    quads = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        a, b = padded[tuple(lo)], padded[tuple(hi)]
        base = np.asarray(_QUADS[axis])
        for sign, faces in ((1, a & ~b), (-1, ~a & b)):
            idx = np.argwhere(faces)
            if len(idx) == 0:
                continue
            # padded cell indices -> lattice corner of the face's minimum corner
            corner = idx - 1
            corner[:, axis] += 1
            order = base if sign > 0 else base[::-1]
            quads.append(corner[:, None, :] + order[None, :, :])
    quads = np.concatenate(quads)
    corners, inverse = np.unique(quads.reshape(-1, 3), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1, 4)
    tris = np.concatenate([inverse[:, [0, 1, 2]], inverse[:, [0, 2, 3]]])
    tris = tris.reshape(2, -1, 3).transpose(1, 0, 2).reshape(-1, 3)
    verts = grid.origin + corners * grid.h_mm
    return verts, tris.astype(np.int64)


def mesh_area(verts, tris) -> float:
    v = verts[tris]
    return float(0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum())


def mesh_volume(verts, tris) -> float:
    v = verts[tris]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def mesh_edges(tris) -> np.ndarray:
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    return np.sort(e, axis=1)


def euler_characteristic(verts, tris) -> int:
    edges = np.unique(mesh_edges(tris), axis=0)
    return len(verts) - len(edges) + len(tris)


def is_watertight(tris) -> bool:
    _, counts = np.unique(mesh_edges(tris), axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def write_ply(path, verts, tris, binary: bool = True) -> None:
    verts = np.asarray(verts, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int64)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        "comment units mm",
        f"element vertex {len(verts)}",
        "property double x", "property double y", "property double z",
        f"element face {len(tris)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(verts.astype("<f8").tobytes())
            faces = np.zeros(len(tris), dtype=[("n", "u1"), ("idx", "<i4", 3)])
            faces["n"] = 3
            faces["idx"] = tris
            fh.write(faces.tobytes())
        else:
            lines = [f"{x!r} {y!r} {z!r}" for x, y, z in verts.tolist()]
            lines += [f"3 {a} {b} {c}" for a, b, c in tris.tolist()]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path):
    """Minimal reader for files produced by :func:`write_ply`."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = int(next(l for l in header if l.startswith("element vertex")).split()[-1])
    nf = int(next(l for l in header if l.startswith("element face")).split()[-1])
    body = data[end:]
    if "format ascii 1.0" in header:
        rows = body.decode("ascii").split("\n")
        verts = np.array([[float(v) for v in r.split()] for r in rows[:nv]])
        tris = np.array([[int(v) for v in r.split()[1:]] for r in rows[nv:nv + nf]], dtype=np.int64)
        return verts, tris
    verts = np.frombuffer(body[:nv * 24], dtype="<f8").reshape(nv, 3)
    faces = np.frombuffer(body[nv * 24:], dtype=[("n", "u1"), ("idx", "<i4", 3)], count=nf)
    return verts.copy(), faces["idx"].astype(np.int64)


def write_stl(path, verts, tris, binary: bool = True, name: str = "cavity") -> None:
    v = np.asarray(verts, dtype=np.float64)[np.asarray(tris)]
    normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 0)
    if binary:
        rec = np.zeros(len(v), dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
        rec["n"] = normals
        rec["v"] = v
        with open(path, "wb") as fh:
            fh.write(f"{name} (mm)".encode("ascii").ljust(80, b"\0"))
            fh.write(struct.pack("<I", len(v)))
            fh.write(rec.tobytes())
        return
    out = [f"solid {name}"]
    for n, tri in zip(normals, v):
        out.append(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
        out.append("    outer loop")
        out.extend(f"      vertex {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in tri)
        out.append("    endloop")
        out.append("  endfacet")
    out.append(f"endsolid {name}")
    Path(path).write_text("\n".join(out) + "\n", encoding="ascii")


def export_cavity_mesh(grid: VoxelGrid, path=None, fmt: str = "ply", binary: bool = True):
    verts, tris = cavity_mesh(grid)
    if path is not None:
        if fmt == "ply":
            write_ply(path, verts, tris, binary)
        elif fmt == "stl":
            write_stl(path, verts, tris, binary)
        else:
            raise ValueError(f"unknown mesh format {fmt!r} (ply or stl)")
    return verts, tris


# -- removal mask file ----------------------------------------------------------

def write_mask(path, grid: VoxelGrid) -> None:
    """Text header followed by one byte per voxel, x varying fastest."""
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.block.origin_mm
    header = (
        f"{MASK_MAGIC}\n"
        f"dims {nx} {ny} {nz}\n"
        f"h_mm {grid.h_mm!r}\n"
        f"origin_mm {ox!r} {oy!r} {oz!r}\n"
        f"size_mm {' '.join(repr(v) for v in grid.block.size_mm)}\n"
        f"density_pcf {grid.block.density_pcf}\n"
        "order x-fastest\n"
        "dtype uint8\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(grid.removed.transpose(2, 1, 0)).tobytes())


def read_mask(path) -> VoxelGrid:
    data = Path(path).read_bytes()
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(MASK_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a voxel mask file")
    fields = {}
    for line in data[:end].decode("ascii").splitlines()[1:]:
        key, _, value = line.partition(" ")
        fields[key] = value.split()
    nx, ny, nz = (int(v) for v in fields["dims"])
    h = float(fields["h_mm"][0])
    origin = tuple(float(v) for v in fields["origin_mm"])
    size = tuple(float(v) for v in fields.get("size_mm", [nx * h, ny * h, nz * h]))
    density = fields.get("density_pcf", ["custom"])[0]
    density = int(density) if density.isdigit() else density
    body = np.frombuffer(data[end + len(marker):], dtype=np.uint8)
    if body.size != nx * ny * nz:
        raise ValueError(f"{path}: expected {nx * ny * nz} mask bytes, found {body.size}")
    removed = body.reshape(nz, ny, nx).transpose(2, 1, 0).copy()
    return VoxelGrid(BoneBlock(size, origin, density), h, removed)
