"""Procedural lunar-like RGB-D scene generator.

A seeded value-noise heightfield over an 80 m square patch carries cosine
crater bowls (raised rims outside the labeled footprint) and ellipsoidal
rock caps.  A forward-tilted pinhole camera ray-marches the field; shading
is Lambertian with a preset sun elevation plus a seeded albedo texture.
Labels: 0 background, 1 crater bowl, 2 rock, decided by footprint
membership of each ray's hit point.  Every sample derives its own child
seed from (master seed, split, preset, index), so serial and parallel
generation produce identical bytes.
"""

import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import kernels, storage
from .errors import DataError, DomainError, ShapeError

PATCH_SIZE = 80.0  # meters
GRID_N = 512
CELL = PATCH_SIZE / GRID_N
SCENE_SCALE = 20.0  # base noise wavelength, meters

ROUGHNESS_FRAC = {"flat": 0.02, "rough": 0.12}  # amplitude as a fraction of SCENE_SCALE
SUN_ELEV_DEG = {"high": 55.0, "low": 15.0}
SUN_AZ_DEG = 125.0
AMBIENT = 0.06

CAM_XY = (PATCH_SIZE / 2.0, 6.0)
CAM_HEIGHT = 1.8
PITCH_DEG = 12.0
FOV_DEG = 60.0
FAR = 60.0
MARCH_DT = 0.05
MARCH_BISECT = 22

PRESETS: Dict[str, Tuple[str, str]] = {
    "hf": ("high", "flat"),
    "hr": ("high", "rough"),
    "lf": ("low", "flat"),
    "lr": ("low", "rough"),
}
PRESET_ORDER = ("hf", "hr", "lf", "lr")

_LATTICE_N = 64
_OCTAVES = 5
_PERSISTENCE = 0.55
_LACUNARITY = 2.0

DEFAULT_CRATERS = (2, 5)
DEFAULT_ROCKS = (2, 6)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 96
    height: int = 96
    illumination: str = "high"
    roughness: str = "flat"
    n_craters: Tuple[int, int] = DEFAULT_CRATERS
    n_rocks: Tuple[int, int] = DEFAULT_ROCKS
    seed: int = 0

    def __post_init__(self):
        if self.width % 32 or self.height % 32 or self.width < 32 or self.height < 32:
            raise ShapeError(f"resolution {self.width}x{self.height} must be divisible by 32")
        if self.illumination not in SUN_ELEV_DEG:
            raise DomainError(f"unknown illumination {self.illumination!r}")
        if self.roughness not in ROUGHNESS_FRAC:
            raise DomainError(f"unknown roughness {self.roughness!r}")
        for lo, hi in (self.n_craters, self.n_rocks):
            if lo < 0 or hi < lo:
                raise DomainError(f"bad obstacle count range ({lo}, {hi})")


@dataclass
class Heightfield:
    grid: np.ndarray  # (GRID_N+1, GRID_N+1) elevations, meters
    albedo: np.ndarray  # same shape, value noise in [0,1]
    cell: float
    size: float
    craters: np.ndarray  # (K,4): cx, cy, bowl radius, depth
    rocks: np.ndarray  # (M,4): cx, cy, radius, height


@dataclass
class RenderedSample:
    rgb: np.ndarray  # (H,W,3) uint8
    depth: np.ndarray  # (H,W) uint16, 65535 = far plane / sky
    labels: np.ndarray  # (H,W) uint8 in {0,1,2}


# ---------------------------------------------------------------------------
# terrain
# ---------------------------------------------------------------------------


def _lattice(ss: np.random.SeedSequence) -> np.ndarray:
    return np.random.default_rng(ss).random((_LATTICE_N, _LATTICE_N))


def _value_noise(lattice, u, v):
    iu = np.floor(u)
    iv = np.floor(v)
    fu = u - iu
    fv = v - iv
    fu = fu * fu * (3.0 - 2.0 * fu)
    fv = fv * fv * (3.0 - 2.0 * fv)
    i0 = iu.astype(np.int64) % _LATTICE_N
    j0 = iv.astype(np.int64) % _LATTICE_N
    i1 = (i0 + 1) % _LATTICE_N
    j1 = (j0 + 1) % _LATTICE_N
    v00 = lattice[j0, i0]
    v10 = lattice[j0, i1]
    v01 = lattice[j1, i0]
    v11 = lattice[j1, i1]
    a = v00 + (v10 - v00) * fu
    b = v01 + (v11 - v01) * fu
    return a + (b - a) * fv


def _fbm(lattice, x, y):
    """Octave sum of value noise, normalized into [0,1]."""
    total = np.zeros_like(x)
    amp_sum = 0.0
    wl = SCENE_SCALE
    amp = 1.0
    for o in range(_OCTAVES):
        total += amp * _value_noise(lattice, x / wl + o * 19.73, y / wl + o * 7.31)
        amp_sum += amp
        amp *= _PERSISTENCE
        wl /= _LACUNARITY
    return total / amp_sum


def _grid_coords():
    ax = np.arange(GRID_N + 1) * CELL
    return np.meshgrid(ax, ax)  # X varies along columns, Y along rows


def base_terrain(spec: SceneSpec, terr_ss) -> np.ndarray:
    amp = ROUGHNESS_FRAC[spec.roughness] * SCENE_SCALE
    x, y = _grid_coords()
    return (_fbm(_lattice(terr_ss), x, y) - 0.5) * 2.0 * amp


def crater_profile(rho, r, depth):
    """Signed elevation change inside the bowl (rho <= r)."""
    return -depth * 0.5 * (1.0 + np.cos(np.pi * rho / r))


def rim_profile(rho, r, depth):
    """Raised rim bump on the annulus r < rho <= 1.4 r, zero at both edges."""
    rim_w = 0.4 * r
    u = (rho - r) / rim_w
    return 0.2 * depth * 0.5 * (1.0 - np.cos(2.0 * np.pi * u))


def apply_obstacles(base: np.ndarray, craters, rocks, cell=CELL, size=PATCH_SIZE) -> np.ndarray:
    grid = base.copy()
    n = base.shape[0]
    ax = np.arange(n) * cell
    x, y = np.meshgrid(ax, ax)
    for cx, cy, r, depth in craters:
        if not (0 < r < size / 2):
            raise DomainError(f"crater radius {r} outside (0, {size / 2})")
        rho = np.hypot(x - cx, y - cy)
        bowl = rho <= r
        grid[bowl] += crater_profile(rho[bowl], r, depth)
        rim = (rho > r) & (rho <= 1.4 * r)
        grid[rim] += rim_profile(rho[rim], r, depth)
    for cx, cy, r, h in rocks:
        if not (0 < r < size / 2):
            raise DomainError(f"rock radius {r} outside (0, {size / 2})")
        rho = np.hypot(x - cx, y - cy)
        cap = rho <= r
        grid[cap] += h * np.sqrt(np.maximum(0.0, 1.0 - (rho[cap] / r) ** 2))
    return grid


def _place_obstacles(spec: SceneSpec, rng):
    """Rejection-sample obstacle centers inside the camera's view wedge."""
    cam_x, cam_y = CAM_XY
    wedge = np.radians(FOV_DEG / 2.0 - 4.0)
    craters: List[Tuple[float, float, float, float]] = []
    rocks: List[Tuple[float, float, float, float]] = []

    def admissible(cx, cy, extent, others):
        if not (1.0 + extent <= cx <= PATCH_SIZE - 1.0 - extent):
            return False
        if not (1.0 + extent <= cy <= PATCH_SIZE - 1.0 - extent):
            return False
        for ox, oy, oext in others:
            if np.hypot(cx - ox, cy - oy) < extent + oext + 0.5:
                return False
        return True

    placed: List[Tuple[float, float, float]] = []
    n_craters = int(rng.integers(spec.n_craters[0], spec.n_craters[1] + 1))
    n_rocks = int(rng.integers(spec.n_rocks[0], spec.n_rocks[1] + 1))
    for kind, count in (("crater", n_craters), ("rock", n_rocks)):
        for _ in range(count):
            for _attempt in range(120):
                bearing = rng.uniform(-wedge, wedge)
                if kind == "crater":
                    dist = rng.uniform(8.0, 30.0)
                    r = rng.uniform(2.2, 5.0)
                    depth = r * rng.uniform(0.3, 0.5)
                    extent = 1.4 * r
                else:
                    dist = rng.uniform(5.0, 28.0)
                    r = rng.uniform(0.8, 2.0)
                    depth = r * rng.uniform(0.55, 0.95)  # height for rocks
                    extent = r
                cx = cam_x + dist * np.sin(bearing)
                cy = cam_y + dist * np.cos(bearing)
                if admissible(cx, cy, extent, placed):
                    placed.append((cx, cy, extent))
                    (craters if kind == "crater" else rocks).append((cx, cy, r, depth))
                    break
    return (
        np.array(craters, dtype=np.float64).reshape(-1, 4),
        np.array(rocks, dtype=np.float64).reshape(-1, 4),
    )


def gen_heightfield(spec: SceneSpec) -> Heightfield:
    ss = np.random.SeedSequence(spec.seed)
    terr_ss, alb_ss, place_ss = ss.spawn(3)
    base = base_terrain(spec, terr_ss)
    x, y = _grid_coords()
    albedo = _fbm(_lattice(alb_ss), x, y)
    craters, rocks = _place_obstacles(spec, np.random.default_rng(place_ss))
    grid = apply_obstacles(base, craters, rocks)
    return Heightfield(grid, albedo, CELL, PATCH_SIZE, craters, rocks)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _ray_grid(w, h):
    pitch = np.radians(PITCH_DEG)
    fwd = np.array([0.0, np.cos(pitch), -np.sin(pitch)])
    right = np.array([1.0, 0.0, 0.0])
    up = np.array([0.0, np.sin(pitch), np.cos(pitch)])
    tan_x = np.tan(np.radians(FOV_DEG) / 2.0)
    tan_y = tan_x * h / w
    ndc_x = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    ndc_y = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    dirs = (
        fwd[None, None, :]
        + ndc_x[None, :, None] * tan_x * right[None, None, :]
        + ndc_y[:, None, None] * tan_y * up[None, None, :]
    )
    dirs /= np.sqrt((dirs * dirs).sum(axis=2, keepdims=True))
    return np.ascontiguousarray(dirs.reshape(-1, 3))


def camera_rays(hf: Heightfield, spec: SceneSpec):
    """Camera origin (terrain height + eye height) and unit ray directions."""
    cam_x, cam_y = CAM_XY
    cam_z = (
        kernels.sample_height_numpy(hf.grid, hf.cell, np.array([cam_x]), np.array([cam_y]))[0]
        + CAM_HEIGHT
    )
    return np.array([cam_x, cam_y, cam_z]), _ray_grid(spec.width, spec.height)


def render_fields(hf: Heightfield, spec: SceneSpec) -> dict:
    """Float-precision render products, for inspection and tests."""
    w, h = spec.width, spec.height
    origin, dirs = camera_rays(hf, spec)
    t, hit = kernels.march_rays(hf.grid, hf.cell, origin, dirs, FAR, MARCH_DT, MARCH_BISECT)
    px = origin[0] + t * dirs[:, 0]
    py = origin[1] + t * dirs[:, 1]
    pz = origin[2] + t * dirs[:, 2]

    labels = np.zeros(t.shape, dtype=np.uint8)
    for cx, cy, r, _d in hf.craters:
        labels[hit & (np.hypot(px - cx, py - cy) <= r)] = 1
    for cx, cy, r, _hgt in hf.rocks:
        labels[hit & (np.hypot(px - cx, py - cy) <= r)] = 2

    eps = hf.cell
    hx = (
        kernels.sample_height_numpy(hf.grid, hf.cell, px + eps, py)
        - kernels.sample_height_numpy(hf.grid, hf.cell, px - eps, py)
    ) / (2.0 * eps)
    hy = (
        kernels.sample_height_numpy(hf.grid, hf.cell, px, py + eps)
        - kernels.sample_height_numpy(hf.grid, hf.cell, px, py - eps)
    ) / (2.0 * eps)
    inv_n = 1.0 / np.sqrt(hx * hx + hy * hy + 1.0)

    elev = np.radians(SUN_ELEV_DEG[spec.illumination])
    az = np.radians(SUN_AZ_DEG)
    sun = np.array([np.cos(elev) * np.sin(az), np.cos(elev) * np.cos(az), np.sin(elev)])
    lamb = np.maximum(0.0, (-hx * sun[0] - hy * sun[1] + sun[2]) * inv_n)
    shade = AMBIENT + (1.0 - AMBIENT) * lamb

    albedo = 0.35 + 0.30 * kernels.sample_height_numpy(hf.albedo, hf.cell, px, py)
    # obstacle material contrast: basalt-dark rocks, dust-darkened crater bowls
    albedo = np.where(labels == 2, albedo * 0.45, albedo)
    albedo = np.where(labels == 1, albedo * 0.70, albedo)

    return {
        "t": t.reshape(h, w),
        "hit": hit.reshape(h, w),
        "labels": labels.reshape(h, w),
        "shade": (shade * hit).reshape(h, w),
        "albedo": albedo.reshape(h, w),
        "hit_x": px.reshape(h, w),
        "hit_y": py.reshape(h, w),
        "hit_z": pz.reshape(h, w),
    }


def render(hf: Heightfield, spec: SceneSpec) -> RenderedSample:
    f = render_fields(hf, spec)
    h, w = spec.height, spec.width
    hit = f["hit"]
    lum = f["albedo"] * f["shade"]
    tint = np.array([1.0, 0.97, 0.93])
    rgb = np.where(hit[:, :, None], lum[:, :, None] * tint[None, None, :], 0.0)
    rgb_u8 = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    depth = np.where(hit, np.rint(np.clip(f["t"] / FAR, 0.0, 1.0) * 65535.0), 65535.0).astype(np.uint16)
    return RenderedSample(rgb=rgb_u8, depth=depth, labels=f["labels"].astype(np.uint8))


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def child_seed(master_seed: int, split: str, preset_idx: int, index: int) -> int:
    ss = np.random.SeedSequence((master_seed, zlib.crc32(split.encode("utf-8")), preset_idx, index))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def make_spec(preset: str, seed: int, width=96, height=96, n_craters=DEFAULT_CRATERS, n_rocks=DEFAULT_ROCKS) -> SceneSpec:
    if preset not in PRESETS:
        raise DomainError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    illum, rough = PRESETS[preset]
    return SceneSpec(width, height, illum, rough, tuple(n_craters), tuple(n_rocks), seed)


def _gen_one(args):
    root, split, preset, sample_id, spec = args
    sample = render(gen_heightfield(spec), spec)
    storage.write_sample(root, split, sample_id, sample.rgb, sample.depth, sample.labels)
    npix = sample.labels.size
    return storage.ManifestRow(
        sample_id=sample_id,
        split=split,
        preset=preset,
        crater_px_ratio=float((sample.labels == 1).sum() / npix),
        rock_px_ratio=float((sample.labels == 2).sum() / npix),
    )


def gen_dataset(
    out_dir,
    per_preset: int,
    master_seed: int,
    split: str = "train",
    width: int = 96,
    height: int = 96,
    n_craters=DEFAULT_CRATERS,
    n_rocks=DEFAULT_ROCKS,
    jobs: int = 1,
) -> List[storage.ManifestRow]:
    if per_preset < 1:
        raise DomainError(f"per_preset must be >= 1, got {per_preset}")
    if jobs < 1:
        raise DomainError(f"jobs must be >= 1, got {jobs}")
    tasks = []
    for pidx, preset in enumerate(PRESET_ORDER):
        for idx in range(per_preset):
            spec = make_spec(
                preset,
                child_seed(master_seed, split, pidx, idx),
                width=width,
                height=height,
                n_craters=n_craters,
                n_rocks=n_rocks,
            )
            tasks.append((str(out_dir), split, preset, f"{preset}_{idx:04d}", spec))
    if jobs == 1:
        rows = [_gen_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_gen_one, tasks))
    rows.sort(key=lambda r: (r.split, r.sample_id))
    try:
        existing = [r for r in storage.read_manifest(out_dir) if r.split != split]
    except DataError:
        existing = []
    merged = sorted(existing + rows, key=lambda r: (r.split, r.sample_id))
    storage.write_manifest(out_dir, merged)
    return rows
