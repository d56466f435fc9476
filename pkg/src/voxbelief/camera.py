"""Simulated depth camera over voxel grids.

Rendering casts one ray per pixel through the grid with an integer DDA
traversal and reports the distance to the first occupied-voxel boundary.
Converting a depth map back to the grid retraces those rays: every voxel
a ray passes well in front of its measured depth is free space, the voxel
containing the measured surface point is surface, and everything else
stays unknown.  Retracing the exact render rays is what makes the
free-space carving exact: a voxel is only marked Free if a ray was
observed to travel through it, so an occupied voxel can never be
classified Free from its own rendering.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from voxbelief.errors import DataError
from voxbelief.geometry import GridSpec, VoxelGrid
from voxbelief.rng import substream

DPT_MAGIC = b"DPT1"
OBS_MAGIC = b"OBS1"


class ObservationState(IntEnum):
    FREE = 0
    SURFACE = 1
    UNKNOWN = 2


@dataclass
class CameraPose:
    """Camera position and look-at point in voxel units."""

    position: np.ndarray
    look_at: np.ndarray
    up_hint: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        self.up_hint = np.asarray(self.up_hint, dtype=np.float64).reshape(3)
        if np.allclose(self.position, self.look_at):
            raise DataError("camera position must differ from look_at")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, down, forward) for a pinhole camera.

        Pixel u grows along right, pixel v along down, rays leave along
        forward.
        """
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        up = self.up_hint
        if np.linalg.norm(np.cross(forward, up)) < 1e-8:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return right, down, forward

    def to_string(self) -> str:
        vals = np.concatenate([self.position, self.look_at, self.up_hint])
        return " ".join(f"{v:.9g}" for v in vals)

    @classmethod
    def from_string(cls, text: str) -> "CameraPose":
        vals = [float(t) for t in text.split()]
        if len(vals) != 9:
            raise DataError("camera pose requires nine decimals")
        return cls(vals[0:3], vals[3:6], vals[6:9])


@dataclass
class DepthMap:
    """Per-pixel distance along the ray to the first surface; +inf on miss.

    Depths are kept in float64 in memory so surface voxels can be located
    exactly from the hit points; the file format rounds them to float32.
    """

    width: int
    height: int
    focal_px: float
    depths: np.ndarray  # (height, width) float64

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(self.height, self.width)
        finite = self.depths[np.isfinite(self.depths)]
        if finite.size and (finite <= 0).any():
            raise DataError("finite depths must be positive")

    def to_bytes(self) -> bytes:
        header = DPT_MAGIC + struct.pack("<IIf", self.width, self.height, self.focal_px)
        return header + self.depths.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DepthMap":
        if len(data) < 16 or data[:4] != DPT_MAGIC:
            raise DataError("bad depth map file: magic mismatch")
        w, h, focal = struct.unpack("<IIf", data[4:16])
        body = np.frombuffer(data[16:], dtype="<f4")
        if body.size != w * h:
            raise DataError("bad depth map file: truncated payload")
        return cls(w, h, focal, body.reshape(h, w).astype(np.float64))


@dataclass
class ObservationGrid:
    """Per-voxel ternary observation state on the same lattice as VoxelGrid."""

    dims: tuple[int, int, int]
    states: np.ndarray  # uint8 codes from ObservationState

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.states = np.ascontiguousarray(self.states, dtype=np.uint8)
        if self.states.shape != self.dims:
            raise DataError("states shape does not match dims")
        if not np.isin(self.states, (0, 1, 2)).all():
            raise DataError("observation states must be 0, 1 or 2")

    @classmethod
    def all_unknown(cls, dims) -> "ObservationGrid":
        return cls(tuple(dims), np.full(tuple(dims), ObservationState.UNKNOWN, dtype=np.uint8))

    def observed_mask(self) -> np.ndarray:
        return self.states != ObservationState.UNKNOWN

    def surface_mask(self) -> np.ndarray:
        return self.states == ObservationState.SURFACE

    def free_mask(self) -> np.ndarray:
        return self.states == ObservationState.FREE

    def unknown_count(self) -> int:
        return int((self.states == ObservationState.UNKNOWN).sum())

    def binarize(self) -> np.ndarray:
        """Surface -> 1, Free/Unknown -> 0 (the recognition input convention)."""
        return (self.states == ObservationState.SURFACE).astype(np.float32)

    def to_bytes(self) -> bytes:
        header = OBS_MAGIC + struct.pack("<III", *self.dims)
        return header + np.ascontiguousarray(self.states.transpose(2, 1, 0)).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ObservationGrid":
        if len(data) < 16 or data[:4] != OBS_MAGIC:
            raise DataError("bad observation file: magic mismatch")
        nx, ny, nz = struct.unpack("<III", data[4:16])
        body = np.frombuffer(data[16:], dtype=np.uint8)
        if body.size != nx * ny * nz:
            raise DataError("bad observation file: truncated payload")
        return cls((nx, ny, nz), body.reshape(nz, ny, nx).transpose(2, 1, 0).copy())

    def copy(self) -> "ObservationGrid":
        return ObservationGrid(self.dims, self.states.copy())


def save_observation(obs: ObservationGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(obs.to_bytes())


def load_observation(path) -> ObservationGrid:
    with open(path, "rb") as fh:
        return ObservationGrid.from_bytes(fh.read())


@dataclass
class NewObservedMask:
    """Voxels a candidate view would newly observe (subset of Unknown)."""

    dims: tuple[int, int, int]
    mask: np.ndarray  # bool

    def count(self) -> int:
        return int(self.mask.sum())


# ---------------------------------------------------------------------------
# Ray generation and DDA traversal
# ---------------------------------------------------------------------------

def half_voxel_diagonal() -> float:
    """Surface band half-width: half the diagonal of a unit voxel."""
    return math.sqrt(3.0) / 2.0


def _pixel_rays(pose: CameraPose, width: int, height: int, focal_px: float) -> np.ndarray:
    """Unit direction for every pixel center, shape (height*width, 3)."""
    right, down, forward = pose.basis()
    u = (np.arange(width) + 0.5 - width / 2.0) / focal_px
    v = (np.arange(height) + 0.5 - height / 2.0) / focal_px
    uu, vv = np.meshgrid(u, v)
    dirs = (uu[..., None] * right + vv[..., None] * down + forward)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs.reshape(-1, 3)


def _ray_grid_interval(origin, dirs, dims):
    """Entry/exit parameters of each ray with the grid box [0,nx]x[0,ny]x[0,nz]."""
    n = dirs.shape[0]
    t0 = np.zeros(n)
    t1 = np.full(n, np.inf)
    for ax in range(3):
        d = dirs[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (0.0 - origin[ax]) / d
            tb = (dims[ax] - origin[ax]) / d
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        parallel = d == 0.0
        inside = (origin[ax] > 0.0) & (origin[ax] < dims[ax])
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
    return t0, t1


def _traverse(occupancy: np.ndarray, origin: np.ndarray, dirs: np.ndarray,
              mark_free_until=None, free_out=None):
    """Vectorized DDA over all rays; returns first-hit depth per ray (+inf miss).

    If ``mark_free_until`` (per-ray parameter values) and ``free_out`` (bool
    grid) are given, every traversed voxel fully exited before that value is
    flagged in ``free_out`` instead of looking for hits.
    """
    dims = occupancy.shape
    n = dirs.shape[0]
    t0, t1 = _ray_grid_interval(origin, dirs, dims)
    eps = 1e-9
    start = np.maximum(t0, 0.0) + eps
    active = start < t1
    depth = np.full(n, np.inf)

    pos = origin[None, :] + start[:, None] * dirs
    cell = np.clip(np.floor(pos).astype(np.int64), 0, np.asarray(dims) - 1)
    step = np.where(dirs > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta = np.where(dirs != 0.0, 1.0 / np.abs(dirs), np.inf)
        next_boundary = np.where(step > 0, cell + 1, cell).astype(np.float64)
        t_max = np.where(dirs != 0.0,
                         (next_boundary - origin[None, :]) / dirs,
                         np.inf)
    t_entry = np.maximum(t0, 0.0)

    carving = mark_free_until is not None
    while active.any():
        idx = np.nonzero(active)[0]
        c = cell[idx]
        if carving:
            exit_t = t_max[idx].min(axis=1)
            ok = exit_t < mark_free_until[idx]
            sel = idx[ok]
            if sel.size:
                cc = cell[sel]
                free_out[cc[:, 0], cc[:, 1], cc[:, 2]] = True
            active[idx[~ok]] = False
            idx = idx[ok]
            if idx.size == 0:
                break
        else:
            hit = occupancy[c[:, 0], c[:, 1], c[:, 2]] != 0
            hit_idx = idx[hit]
            depth[hit_idx] = t_entry[hit_idx]
            active[hit_idx] = False
            idx = idx[~hit]
            if idx.size == 0:
                break
        ax = np.argmin(t_max[idx], axis=1)
        t_entry[idx] = t_max[idx, ax]
        cell[idx, ax] += step[idx, ax]
        t_max[idx, ax] += t_delta[idx, ax]
        out = (cell[idx, ax] < 0) | (cell[idx, ax] >= np.asarray(dims)[ax]) \
            | (t_entry[idx] > t1[idx])
        active[idx[out]] = False
    return depth


def render_depth(grid: VoxelGrid, pose: CameraPose, width: int = 64, height: int = 64,
                 focal_px: float = 64.0) -> DepthMap:
    """Render a depth map: distance to the first occupied-voxel boundary.

    The camera must be outside the occupied region (being outside the grid
    entirely is fine).
    """
    if focal_px <= 0 or width < 1 or height < 1:
        raise DataError("invalid camera intrinsics")
    origin = pose.position
    cam_cell = np.floor(origin).astype(np.int64)
    if ((cam_cell >= 0).all() and (cam_cell < np.asarray(grid.dims)).all()
            and grid.occupancy[tuple(cam_cell)]):
        raise DataError("camera is inside an occupied voxel")
    dirs = _pixel_rays(pose, width, height, focal_px)
    depth = _traverse(grid.occupancy, origin, dirs)
    return DepthMap(width, height, focal_px, depth.reshape(height, width))


def depth_to_observation(depth: DepthMap, pose: CameraPose, spec: GridSpec,
                         tau: float | None = None) -> ObservationGrid:
    """Convert a depth map into per-voxel Free / Surface / Unknown states.

    Retraces each pixel ray through the grid: voxels fully crossed more
    than ``tau`` in front of the measured depth become Free, the voxel
    containing the measured surface point becomes Surface, and voxels
    behind the surface, outside the frustum or missed by every ray stay
    Unknown.  ``tau`` defaults to half the voxel diagonal.
    """
    if depth.focal_px <= 0:
        raise DataError("degenerate intrinsics: focal_px must be positive")
    tau = half_voxel_diagonal() if tau is None else float(tau)
    dims = spec.dims
    states = np.full(dims, ObservationState.UNKNOWN, dtype=np.uint8)
    origin = pose.position
    dirs = _pixel_rays(pose, depth.width, depth.height, depth.focal_px)
    z = depth.depths.reshape(-1).astype(np.float64)

    free = np.zeros(dims, dtype=bool)
    cutoff = np.where(np.isfinite(z), z - tau, np.inf)
    _traverse(np.zeros(dims, dtype=np.uint8), origin, dirs,
              mark_free_until=cutoff, free_out=free)
    states[free] = ObservationState.FREE

    finite = np.isfinite(z)
    if finite.any():
        # advance a hair past the boundary so the hit voxel, not its
        # empty neighbor, receives the surface label
        pts = origin[None, :] + (z[finite, None] + 1e-6) * dirs[finite]
        cells = np.floor(pts).astype(np.int64)
        ok = ((cells >= 0) & (cells < np.asarray(dims))).all(axis=1)
        cells = cells[ok]
        states[cells[:, 0], cells[:, 1], cells[:, 2]] = ObservationState.SURFACE
    return ObservationGrid(dims, states)


def new_observed_mask(sample: VoxelGrid, current: ObservationGrid, pose: CameraPose,
                      width: int = 64, height: int = 64,
                      focal_px: float = 64.0, spec: GridSpec | None = None) -> NewObservedMask:
    """Voxels the candidate view would newly observe on this shape sample.

    Renders the sample from the pose, converts the result, and removes the
    already observed set.  The sample must agree with the current
    observation: occupied on Surface voxels, empty on Free voxels.
    """
    if sample.dims != current.dims:
        raise DataError("sample and observation dims differ")
    occ = sample.occupancy
    if (occ[current.surface_mask()] != 1).any() or (occ[current.free_mask()] != 0).any():
        raise DataError("sample disagrees with the observed voxels")
    spec = spec or GridSpec(dims=sample.dims, payload_origin=sample.payload_origin)
    dm = render_depth(sample, pose, width, height, focal_px)
    fresh = depth_to_observation(dm, pose, spec)
    mask = fresh.observed_mask() & ~current.observed_mask()
    return NewObservedMask(sample.dims, mask)


def merge_observations(a: ObservationGrid, b: ObservationGrid) -> tuple[ObservationGrid, int]:
    """Merge per voxel: Surface wins, then Free, else Unknown.

    Returns the merged grid and the count of Surface-vs-Free conflicts
    (resolved in favor of Surface).
    """
    if a.dims != b.dims:
        raise DataError("cannot merge observations with different dims")
    surf = a.surface_mask() | b.surface_mask()
    free = (a.free_mask() | b.free_mask()) & ~surf
    conflicts = int((a.surface_mask() & b.free_mask()).sum()
                    + (b.surface_mask() & a.free_mask()).sum())
    states = np.full(a.dims, ObservationState.UNKNOWN, dtype=np.uint8)
    states[free] = ObservationState.FREE
    states[surf] = ObservationState.SURFACE
    return ObservationGrid(a.dims, states), conflicts


def generate_view_candidates(n: int, radius: float, spec: GridSpec,
                             seed: int) -> list[CameraPose]:
    """Random camera poses on a sphere around the grid center.

    Positions are uniform on the sphere; each look-at point is the grid
    center plus a jitter of at most 2 voxels.  Deterministic per seed.
    """
    if n < 1:
        raise DataError("need at least one candidate view")
    if radius <= spec.payload_half_diagonal():
        raise DataError("radius must exceed the payload half-diagonal")
    rng = substream(seed, 97)
    center = spec.grid_center
    poses = []
    for _ in range(n):
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
        while norm < 1e-9:
            v = rng.normal(size=3)
            norm = np.linalg.norm(v)
        pos = center + radius * v / norm
        jitter = rng.uniform(-1.0, 1.0, size=3)
        jnorm = np.linalg.norm(jitter)
        if jnorm > 1e-9:
            jitter = jitter / jnorm * (2.0 * rng.uniform() ** (1.0 / 3.0))
        poses.append(CameraPose(pos, center + jitter))
    return poses
