"""Meshes, voxel grids and procedural synthetic shapes.

A shape lives on a dense cubic grid (default 30x30x30) whose central
payload region (default 24x24x24, i.e. a 3-cell padding shell on every
side) carries the actual geometry.  Voxel (i, j, k) covers the half-open
box [i, i+1) x [j, j+1) x [k, k+1) in grid coordinates; its center is at
(i+0.5, j+0.5, k+0.5).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from voxbelief.errors import DataError
from voxbelief.rng import substream

VOX_MAGIC = b"VOX1"

SYNTHETIC_CLASSES = ("block", "sphere", "pyramid", "l_bracket", "block_with_handle")


class NonWatertightWarning(UserWarning):
    """Raised as a warning when a mesh fails the closed-surface check."""


@dataclass
class TriangleMesh:
    """Indexed triangle mesh in model units."""

    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray  # (M, 3) int indices into vertices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.vertices.size == 0:
            z = np.zeros(3)
            return z, z
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def is_watertight(self) -> bool:
        """Every undirected edge must be shared by exactly two faces."""
        if self.is_empty:
            return False
        f = self.faces
        if (f[:, 0] == f[:, 1]).any() or (f[:, 1] == f[:, 2]).any() or (f[:, 0] == f[:, 2]).any():
            return False
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool((counts == 2).all())


@dataclass
class GridSpec:
    """Grid geometry plus the world-to-grid placement of a shape.

    ``world_center`` maps to the grid center and one voxel spans
    ``world_scale`` model units.
    """

    dims: tuple[int, int, int] = (30, 30, 30)
    payload_origin: int = 3
    world_scale: float = 1.0
    world_center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.world_center = np.asarray(self.world_center, dtype=np.float64).reshape(3)
        if any(d < 2 * self.payload_origin + 1 for d in self.dims):
            raise DataError("dims must be at least 2*payload_origin + 1")
        if self.world_scale <= 0:
            raise DataError("world_scale must be positive")

    @property
    def payload_extent(self) -> tuple[int, int, int]:
        return tuple(d - 2 * self.payload_origin for d in self.dims)

    @property
    def grid_center(self) -> np.ndarray:
        """Center of the grid in voxel units."""
        return np.asarray(self.dims, dtype=np.float64) / 2.0

    def payload_half_diagonal(self) -> float:
        return float(np.linalg.norm(self.payload_extent)) / 2.0

    def world_to_grid(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.world_center) / self.world_scale + self.grid_center

    @classmethod
    def fit_to_mesh(cls, mesh: TriangleMesh, dims=(30, 30, 30), payload_origin=3) -> "GridSpec":
        """Scale/center so the longest bounding-box side spans the payload."""
        lo, hi = mesh.bounds()
        side = float((hi - lo).max())
        extent = min(d - 2 * payload_origin for d in dims)
        scale = side / extent if side > 0 else 1.0
        return cls(dims=dims, payload_origin=payload_origin, world_scale=scale,
                   world_center=(lo + hi) / 2.0)


@dataclass
class VoxelGrid:
    """Dense binary occupancy tensor indexed [x, y, z]."""

    dims: tuple[int, int, int]
    payload_origin: int
    occupancy: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.occupancy = np.ascontiguousarray(self.occupancy, dtype=np.uint8)
        if self.occupancy.shape != self.dims:
            raise DataError("occupancy shape does not match dims")
        if not np.isin(self.occupancy, (0, 1)).all():
            raise DataError("occupancy values must be 0 or 1")
        if any(d < 2 * self.payload_origin + 1 for d in self.dims):
            raise DataError("dims must be at least 2*payload_origin + 1")

    @classmethod
    def empty(cls, dims=(30, 30, 30), payload_origin=3) -> "VoxelGrid":
        return cls(tuple(dims), payload_origin, np.zeros(tuple(dims), dtype=np.uint8))

    def count(self) -> int:
        return int(self.occupancy.sum())

    def padding_is_clear(self) -> bool:
        p = self.payload_origin
        if p == 0:
            return True
        m = np.zeros(self.dims, dtype=bool)
        m[p:self.dims[0] - p, p:self.dims[1] - p, p:self.dims[2] - p] = True
        return not self.occupancy[~m].any()

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.payload_origin, self.occupancy.copy())


# ---------------------------------------------------------------------------
# OFF mesh I/O
# ---------------------------------------------------------------------------

def load_off(source) -> TriangleMesh:
    """Parse an OFF file (path or text) into a TriangleMesh."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        try:
            with open(source, "r", encoding="ascii") as fh:
                text = fh.read()
        except OSError:
            text = str(source)
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise DataError("not an OFF file (missing OFF header)")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4  # skip edge count
        verts = np.array(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        faces = []
        for _ in range(nf):
            cnt = int(tokens[pos])
            if cnt != 3:
                raise DataError("only triangular faces are supported")
            faces.append([int(t) for t in tokens[pos + 1:pos + 4]])
            pos += 1 + cnt
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed OFF data: {exc}") from exc
    return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def dump_off(mesh: TriangleMesh) -> str:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    lines += [f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in mesh.vertices]
    lines += [f"3 {f[0]} {f[1]} {f[2]}" for f in mesh.faces]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Voxel grid file format
# ---------------------------------------------------------------------------

def voxel_grid_to_bytes(grid: VoxelGrid) -> bytes:
    """Serialize as magic, three u32 dims, then x-fastest 0/1 bytes."""
    header = VOX_MAGIC + struct.pack("<III", *grid.dims)
    # x-fastest row-major order = C order of the [z, y, x] transpose
    payload = np.ascontiguousarray(grid.occupancy.transpose(2, 1, 0)).tobytes()
    return header + payload


def voxel_grid_from_bytes(data: bytes, payload_origin: int = 3) -> VoxelGrid:
    if len(data) < 16 or data[:4] != VOX_MAGIC:
        raise DataError("bad voxel grid file: magic mismatch")
    nx, ny, nz = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data[16:], dtype=np.uint8)
    if body.size != nx * ny * nz:
        raise DataError("bad voxel grid file: truncated payload")
    occ = body.reshape(nz, ny, nx).transpose(2, 1, 0)
    return VoxelGrid((nx, ny, nz), payload_origin, occ.copy())


def save_voxel_grid(grid: VoxelGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(voxel_grid_to_bytes(grid))


def load_voxel_grid(path, payload_origin: int = 3) -> VoxelGrid:
    with open(path, "rb") as fh:
        return voxel_grid_from_bytes(fh.read(), payload_origin)


# ---------------------------------------------------------------------------
# Voxelization
# ---------------------------------------------------------------------------

_BARY_TOL = 1e-11


def _column_crossings(py, pz, v0, e1y, e1z, e2y, e2z, det, x0, x1, x2):
    """X coordinates where the +x ray through (py, pz) crosses the mesh.

    Returns (crossings, ambiguous) where ambiguous means some crossing was
    too close to a triangle edge for the parity count to be trusted.
    """
    qy = py - v0[:, 0]
    qz = pz - v0[:, 1]
    inv = 1.0 / det
    u = (qy * e2z - qz * e2y) * inv
    v = (e1y * qz - e1z * qy) * inv
    w = 1.0 - u - v
    tol = _BARY_TOL
    inside = (u > tol) & (v > tol) & (w > tol)
    near_edge = ((np.abs(u) <= tol) | (np.abs(v) <= tol) | (np.abs(w) <= tol)) \
        & (u > -tol) & (v > -tol) & (w > -tol)
    xs = w[inside] * x0[inside] + u[inside] * x1[inside] + v[inside] * x2[inside]
    return xs, bool(near_edge.any())


def _parity_fill(verts_g: np.ndarray, faces: np.ndarray, dims) -> np.ndarray:
    """Inside test per voxel center: parity of ray-triangle crossings along +x.

    Rays are cast through every (y, z) column of voxel centers with a tiny
    fixed perturbation; columns that graze a projected triangle edge are
    re-cast with a different perturbation until unambiguous.
    """
    nx, ny, nz = dims
    occ = np.zeros(dims, dtype=np.uint8)
    if faces.shape[0] == 0:
        return occ

    tri = verts_g[faces]  # (M, 3, 3)
    v0 = tri[:, 0, 1:]  # projected (y, z)
    e1 = tri[:, 1, 1:] - v0
    e2 = tri[:, 2, 1:] - v0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    keep = np.abs(det) > 1e-12  # drop triangles edge-on to the ray direction
    tri, v0, e1, e2, det = tri[keep], v0[keep], e1[keep], e2[keep], det[keep]
    if det.size == 0:
        return occ
    x0, x1, x2 = tri[:, 0, 0], tri[:, 1, 0], tri[:, 2, 0]
    e1y, e1z, e2y, e2z = e1[:, 0], e1[:, 1], e2[:, 0], e2[:, 1]

    centers_x = np.arange(nx) + 0.5
    for j in range(ny):
        for k in range(nz):
            for attempt in range(8):
                dy = 3.21e-7 * (attempt + 1)
                dz = 1.73e-7 * (attempt + 1) ** 2
                xs, ambiguous = _column_crossings(
                    j + 0.5 + dy, k + 0.5 + dz, v0, e1y, e1z, e2y, e2z, det, x0, x1, x2)
                if ambiguous:
                    continue
                if xs.size and np.abs(xs[:, None] - centers_x[None, :]).min() < 1e-9:
                    continue  # crossing lands exactly on a voxel center
                break
            if xs.size == 0:
                continue
            xs = np.sort(xs)
            # inside iff an odd number of crossings lie beyond the center
            greater = xs.size - np.searchsorted(xs, centers_x, side="right")
            occ[:, j, k] = (greater % 2).astype(np.uint8)
    return occ


def _rasterize_surface(verts_g: np.ndarray, faces: np.ndarray, dims) -> np.ndarray:
    """Mark every voxel touched by a surface sample point (spacing <= 0.5)."""
    occ = np.zeros(dims, dtype=np.uint8)
    hi = np.asarray(dims) - 1
    for f in faces:
        a, b, c = verts_g[f[0]], verts_g[f[1]], verts_g[f[2]]
        n = max(1, int(np.ceil(max(np.linalg.norm(b - a), np.linalg.norm(c - a),
                                   np.linalg.norm(c - b)) / 0.5)))
        ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        sel = ii + jj <= n
        u = ii[sel] / n
        v = jj[sel] / n
        pts = a[None, :] + u[:, None] * (b - a)[None, :] + v[:, None] * (c - a)[None, :]
        idx = np.clip(np.floor(pts - 1e-9).astype(np.int64), 0, hi)
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return occ


def voxelize_mesh(mesh: TriangleMesh, spec: GridSpec) -> VoxelGrid:
    """Voxelize a closed mesh: a voxel is occupied iff its center is inside.

    The caller is responsible for a spec that places the mesh inside the
    payload region (see ``GridSpec.fit_to_mesh``).  Non-watertight meshes
    fall back to surface rasterization only and emit NonWatertightWarning.
    Empty meshes yield an all-zero grid.
    """
    if mesh.is_empty:
        return VoxelGrid.empty(spec.dims, spec.payload_origin)
    verts_g = spec.world_to_grid(mesh.vertices)
    lo, hi = verts_g.min(axis=0), verts_g.max(axis=0)
    p = spec.payload_origin
    if (lo < p - 1e-6).any() or (hi > np.asarray(spec.dims) - p + 1e-6).any():
        raise DataError("mesh does not fit inside the payload region; "
                        "normalize the GridSpec first")
    if mesh.is_watertight():
        occ = _parity_fill(verts_g, mesh.faces, spec.dims)
    else:
        warnings.warn("mesh is not watertight; surface rasterization only",
                      NonWatertightWarning, stacklevel=2)
        occ = _rasterize_surface(verts_g, mesh.faces, spec.dims)
    grid = VoxelGrid(spec.dims, spec.payload_origin, occ)
    assert grid.padding_is_clear()
    return grid


def rotate_augment(mesh: TriangleMesh, step_degrees: float) -> list[TriangleMesh]:
    """Rotations of the mesh about the vertical axis through its bbox center.

    ``step_degrees`` must divide 360; pose 0 is the identity.
    """
    step = float(step_degrees)
    if step <= 0 or abs(360.0 / step - round(360.0 / step)) > 1e-9:
        raise DataError("step_degrees must divide 360")
    n = int(round(360.0 / step))
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2.0
    out = []
    for i in range(n):
        if i == 0:
            out.append(TriangleMesh(mesh.vertices.copy(), mesh.faces.copy()))
            continue
        t = np.radians(step * i)
        c, s = np.cos(t), np.sin(t)
        rel = mesh.vertices - center
        rot = np.empty_like(rel)
        rot[:, 0] = c * rel[:, 0] - s * rel[:, 1]
        rot[:, 1] = s * rel[:, 0] + c * rel[:, 1]
        rot[:, 2] = rel[:, 2]
        out.append(TriangleMesh(rot + center, mesh.faces.copy()))
    return out


# ---------------------------------------------------------------------------
# Procedural synthetic shapes
# ---------------------------------------------------------------------------

def _payload_box(spec: GridSpec):
    p = spec.payload_origin
    return np.full(3, p, dtype=np.int64), np.asarray(spec.dims, dtype=np.int64) - p


def _fill_block(occ, lo, hi):
    occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1


def _block_params(rng, spec: GridSpec):
    """Base block dims/position; leaves >= 2 voxels of margin per side."""
    p0, p1 = _payload_box(spec)
    extent = p1 - p0
    size = np.array([rng.integers(max(3, int(0.4 * e)), max(4, int(0.6 * e)) + 1)
                     for e in extent])
    slack = extent - size - 4  # reserve a 2-voxel shell for handles
    slack = np.maximum(slack, 0)
    off = np.array([rng.integers(0, s + 1) for s in slack])
    lo = p0 + 2 + off
    return lo, lo + size


def _synth_block(rng, spec):
    occ = np.zeros(spec.dims, dtype=np.uint8)
    lo, hi = _block_params(rng, spec)
    _fill_block(occ, lo, hi)
    return occ


def _synth_sphere(rng, spec):
    occ = np.zeros(spec.dims, dtype=np.uint8)
    p0, p1 = _payload_box(spec)
    extent = (p1 - p0).min()
    r = rng.uniform(0.22 * extent, 0.38 * extent)
    margin = r + 0.6
    center = np.array([rng.uniform(p0[a] + margin, p1[a] - margin) for a in range(3)])
    g = np.stack(np.meshgrid(*(np.arange(d) + 0.5 for d in spec.dims), indexing="ij"), axis=-1)
    occ[((g - center) ** 2).sum(axis=-1) <= r * r] = 1
    return occ


def _synth_pyramid(rng, spec):
    occ = np.zeros(spec.dims, dtype=np.uint8)
    p0, p1 = _payload_box(spec)
    extent = p1 - p0
    base = int(rng.integers(max(4, int(0.5 * extent[:2].min())), extent[:2].min() + 1))
    height = int(rng.integers(max(3, int(0.5 * extent[2])), extent[2] + 1))
    cx = int(rng.integers(p0[0], p1[0] - base + 1))
    cy = int(rng.integers(p0[1], p1[1] - base + 1))
    z0 = p0[2]
    for dz in range(height):
        shrink = int(round(dz * (base - 1) / (2.0 * max(1, height - 1))))
        side = base - 2 * shrink
        if side <= 0:
            break
        lo = np.array([cx + shrink, cy + shrink, z0 + dz])
        _fill_block(occ, lo, lo + np.array([side, side, 1]))
    return occ


def _synth_l_bracket(rng, spec):
    occ = np.zeros(spec.dims, dtype=np.uint8)
    p0, p1 = _payload_box(spec)
    extent = p1 - p0
    w = int(rng.integers(max(2, extent[1] // 4), max(3, extent[1] // 2)))
    lx = int(rng.integers(int(0.6 * extent[0]), extent[0] + 1))
    lz = int(rng.integers(int(0.6 * extent[2]), extent[2] + 1))
    th = int(rng.integers(2, max(3, min(lx, lz) // 2) + 1))
    ox = int(rng.integers(p0[0], p1[0] - lx + 1))
    oy = int(rng.integers(p0[1], p1[1] - w + 1))
    oz = int(rng.integers(p0[2], p1[2] - lz + 1))
    _fill_block(occ, np.array([ox, oy, oz]), np.array([ox + lx, oy + w, oz + th]))
    _fill_block(occ, np.array([ox, oy, oz]), np.array([ox + th, oy + w, oz + lz]))
    return occ


_HANDLE_SIDES = ("+x", "-x", "+y", "-y")


def _synth_block_with_handle(seed: int, rng_handle, spec):
    # same base block as _synth_block for this seed, then a protruding bar
    occ = _synth_block(substream(seed, 0), spec)
    lo, hi = _block_params(substream(seed, 0), spec)
    p0, p1 = _payload_box(spec)
    side = _HANDLE_SIDES[int(rng_handle.integers(0, len(_HANDLE_SIDES)))]
    axis = 0 if side in ("+x", "-x") else 1
    positive = side[0] == "+"
    if positive:
        room = p1[axis] - hi[axis]
        start, stop = hi[axis], hi[axis] + min(3, room)
    else:
        room = lo[axis] - p0[axis]
        start, stop = lo[axis] - min(3, room), lo[axis]
    if stop <= start:  # no room on the drawn side: fall back to the opposite
        return _synth_block_with_handle_fallback(occ, lo, hi, axis, not positive, p0, p1)
    other = 1 - axis
    c_other = (lo[other] + hi[other]) // 2
    c_z = (lo[2] + hi[2]) // 2
    sel_lo = np.array([0, 0, 0])
    sel_hi = np.array([0, 0, 0])
    sel_lo[axis], sel_hi[axis] = start, stop
    sel_lo[other], sel_hi[other] = c_other - 1, c_other + 2
    sel_lo[2], sel_hi[2] = c_z - 1, c_z + 2
    _fill_block(occ, sel_lo, sel_hi)
    return occ, side


def _synth_block_with_handle_fallback(occ, lo, hi, axis, positive, p0, p1):
    if positive:
        start, stop = hi[axis], min(hi[axis] + 3, p1[axis])
    else:
        start, stop = max(lo[axis] - 3, p0[axis]), lo[axis]
    other = 1 - axis
    c_other = (lo[other] + hi[other]) // 2
    c_z = (lo[2] + hi[2]) // 2
    sel_lo = np.array([0, 0, 0])
    sel_hi = np.array([0, 0, 0])
    sel_lo[axis], sel_hi[axis] = start, stop
    sel_lo[other], sel_hi[other] = c_other - 1, c_other + 2
    sel_lo[2], sel_hi[2] = c_z - 1, c_z + 2
    _fill_block(occ, sel_lo, sel_hi)
    side = ("+" if positive else "-") + ("x" if axis == 0 else "y")
    return occ, side


def handle_side(seed: int) -> str:
    """Which side the handle of block_with_handle(seed) protrudes from."""
    rng_handle = substream(seed, 1)
    return _HANDLE_SIDES[int(rng_handle.integers(0, len(_HANDLE_SIDES)))]


def generate_synthetic(class_id: str, seed: int, spec: GridSpec | None = None) -> VoxelGrid:
    """Deterministic jittered shape of the given class on the grid.

    Classes: block, sphere, pyramid, l_bracket, block_with_handle.  The
    handle variant reuses the exact base block of ``block`` for the same
    seed and adds a side bar whose side is drawn from a separate stream.
    """
    spec = spec or GridSpec()
    name = str(class_id).replace("-", "_")
    if name not in SYNTHETIC_CLASSES:
        raise DataError(f"unknown synthetic class {class_id!r}")
    if name == "block":
        occ = _synth_block(substream(seed, 0), spec)
    elif name == "sphere":
        occ = _synth_sphere(substream(seed, 0), spec)
    elif name == "pyramid":
        occ = _synth_pyramid(substream(seed, 0), spec)
    elif name == "l_bracket":
        occ = _synth_l_bracket(substream(seed, 0), spec)
    else:
        occ, _ = _synth_block_with_handle(seed, substream(seed, 1), spec)
    grid = VoxelGrid(spec.dims, spec.payload_origin, occ)
    assert grid.padding_is_clear()
    return grid
