"""Bit-exact persistence.

Checkpoint container layout (all integers little-endian):

    magic   4 bytes  b"LUSG"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated: name_len u32, name bytes (UTF-8), rank u32,
             dims u64 each, dtype tag u8 (1 = float64), raw values f64
    check   u64      blake2b-8 digest of every preceding byte

Magic, version, and checksum are validated before any tensor is built.
Dataset samples live as PNGs under `<root>/<split>/{rgb,depth,label}/<id>.png`
with a tab-separated manifest at the root.
"""

import hashlib
import os
import struct
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from . import network as netmod
from .autodiff import Tensor
from .errors import (
    CheckpointCorruptError,
    CheckpointFormatError,
    CheckpointVersionError,
    DataError,
    ShapeError,
    StructureMismatchError,
)

MAGIC = b"LUSG"
VERSION = 1
_DTYPE_F64 = 1
_VEL_PREFIX = "velocity/"


def _entry_bytes(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    parts = [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
    for d in arr.shape:
        parts.append(struct.pack("<Q", d))
    parts.append(struct.pack("<B", _DTYPE_F64))
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def _as_array(v) -> np.ndarray:
    if isinstance(v, Tensor):
        return v.data
    return np.asarray(v, dtype=np.float64)


def save_checkpoint(params: Dict[str, object], path, optimizer_state: Optional[Dict[str, np.ndarray]] = None):
    entries: List[Tuple[str, np.ndarray]] = []
    for name, v in params.items():
        if name.startswith(_VEL_PREFIX):
            raise ShapeError(f"parameter name {name!r} collides with the optimizer-state namespace")
        entries.append((name, _as_array(v)))
    if optimizer_state is not None:
        for name, v in optimizer_state.items():
            entries.append((_VEL_PREFIX + name, _as_array(v)))
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise ShapeError("checkpoint entry names must be unique")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        blob += _entry_bytes(name, arr)
    blob += hashlib.blake2b(bytes(blob), digest_size=8).digest()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (params, optimizer_state-or-None), both name -> float64 array."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointCorruptError(f"cannot read {path}: {e}") from e
    if len(blob) >= 4 and blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 20:
        raise CheckpointCorruptError(f"{path}: truncated ({len(blob)} bytes)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    digest = hashlib.blake2b(blob[:-8], digest_size=8).digest()
    if digest != blob[-8:]:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")
    count = struct.unpack_from("<I", blob, 8)[0]
    body = memoryview(blob)[:-8]
    off = 12
    params: Dict[str, np.ndarray] = {}
    velocities: Dict[str, np.ndarray] = {}

    def need(n):
        if off + n > len(body):
            raise CheckpointFormatError(f"{path}: entry overruns the payload")

    for _ in range(count):
        need(4)
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        need(name_len)
        name = bytes(body[off : off + name_len]).decode("utf-8")
        off += name_len
        need(4)
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        need(8 * rank)
        dims = struct.unpack_from(f"<{rank}Q" if rank else "<0Q", body, off)
        off += 8 * rank
        need(1)
        (tag,) = struct.unpack_from("<B", body, off)
        off += 1
        if tag != _DTYPE_F64:
            raise CheckpointFormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(8 * size)
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(dims).copy()
        off += 8 * size
        target = velocities if name.startswith(_VEL_PREFIX) else params
        key = name[len(_VEL_PREFIX) :] if name.startswith(_VEL_PREFIX) else name
        if key in target:
            raise CheckpointFormatError(f"{path}: duplicate entry {name!r}")
        target[key] = arr
    if off != len(body):
        raise CheckpointFormatError(f"{path}: {len(body) - off} trailing payload bytes")
    return params, (velocities or None)


# ---------------------------------------------------------------------------
# network-aware checkpoint helpers
# ---------------------------------------------------------------------------

_MODALITY_CODE = {"rgb": 0.0, "depth": 1.0}
_CODE_MODALITY = {0: "rgb", 1: "depth"}


def _meta_vec(stage, modality_code, num_classes, kernel, widths):
    return np.array([stage, modality_code, num_classes, kernel, *widths], dtype=np.float64)


def save_stage1(net: netmod.NetworkParams, path):
    cfg = net.encoder.cfg
    entries = {"meta": _meta_vec(1, _MODALITY_CODE[net.modality], net.num_classes, cfg.kernel_size, cfg.stage_channels)}
    entries.update(net.named())
    save_checkpoint(entries, path)


def save_stage2(net2: netmod.Stage2Network, path):
    cfg = net2.rgb_encoder.cfg
    entries = {"meta": _meta_vec(2, 0.0, net2.num_classes, cfg.kernel_size, cfg.stage_channels)}
    entries.update(net2.named())
    save_checkpoint(entries, path)


def _parse_meta(params, path):
    meta = params.get("meta")
    if meta is None or meta.shape != (4 + netmod.N_STAGES,):
        raise StructureMismatchError(f"{path}: missing or malformed network meta entry")
    vals = [int(round(float(v))) for v in meta]
    stage, modality_code, num_classes, kernel = vals[:4]
    widths = tuple(vals[4:])
    if stage not in (1, 2) or modality_code not in _CODE_MODALITY:
        raise StructureMismatchError(f"{path}: unrecognized stage/modality in meta")
    if num_classes < 2 or kernel < 1 or any(w < 1 for w in widths):
        raise StructureMismatchError(f"{path}: implausible network meta {vals}")
    return stage, _CODE_MODALITY[modality_code], num_classes, kernel, widths


def _fill(named: Dict[str, Tensor], params: Dict[str, np.ndarray], path):
    want = list(named)
    have = [n for n in params if n != "meta"]
    if set(want) != set(have):
        missing = sorted(set(want) - set(have))
        extra = sorted(set(have) - set(want))
        raise StructureMismatchError(f"{path}: entry names differ (missing {missing[:3]}, extra {extra[:3]})")
    for name in want:
        t = named[name]
        arr = params[name]
        if arr.shape != t.data.shape:
            raise StructureMismatchError(f"{path}: {name} has shape {arr.shape}, expected {t.data.shape}")
        t.data = np.ascontiguousarray(arr)


def load_network(path):
    """Rebuild a NetworkParams (stage 1) or Stage2Network (stage 2) from a file."""
    params, _ = load_checkpoint(path)
    stage, modality, num_classes, kernel, widths = _parse_meta(params, path)
    if stage == 1:
        in_ch = 3 if modality == "rgb" else 1
        cfg = netmod.EncoderConfig(in_ch, widths, kernel)
        net = netmod.build_network(cfg, num_classes, seed=0, modality=modality)
        _fill(net.named(), params, path)
        return net
    rng = np.random.default_rng(0)
    rgb_enc = netmod.build_encoder(netmod.EncoderConfig(3, widths, kernel), rng)
    depth_enc = netmod.build_encoder(netmod.EncoderConfig(1, widths, kernel), rng)
    decoder = netmod.build_decoder(widths, num_classes, rng)
    net2 = netmod.Stage2Network(rgb_enc, depth_enc, decoder, netmod._clone_encoder(rgb_enc, False))
    _fill(net2.named(), params, path)
    return net2


def load_stage1(path) -> netmod.NetworkParams:
    net = load_network(path)
    if not isinstance(net, netmod.NetworkParams):
        raise StructureMismatchError(f"{path}: expected a stage-1 checkpoint")
    return net


# ---------------------------------------------------------------------------
# dataset PNG layout
# ---------------------------------------------------------------------------


@dataclass
class SegSample:
    sample_id: str
    rgb: np.ndarray  # (3,H,W) float64 in [0,1]
    depth: np.ndarray  # (1,H,W) float64 in [0,1]
    labels: np.ndarray  # (H,W) uint8 in {0,1,2}
    preset: str = ""
    split: str = ""


def _paths(root, split, sample_id):
    base = os.path.join(str(root), split)
    return (
        os.path.join(base, "rgb", f"{sample_id}.png"),
        os.path.join(base, "depth", f"{sample_id}.png"),
        os.path.join(base, "label", f"{sample_id}.png"),
    )


def write_sample(root, split, sample_id, rgb_u8, depth_u16, labels_u8):
    rgb_u8 = np.asarray(rgb_u8, dtype=np.uint8)
    depth_u16 = np.asarray(depth_u16, dtype=np.uint16)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    if rgb_u8.ndim != 3 or rgb_u8.shape[2] != 3:
        raise ShapeError(f"rgb must be (H,W,3) uint8, got {rgb_u8.shape}")
    if depth_u16.shape != rgb_u8.shape[:2] or labels_u8.shape != rgb_u8.shape[:2]:
        raise ShapeError("rgb/depth/label resolutions differ")
    rp, dp, lp = _paths(root, split, sample_id)
    for p in (rp, dp, lp):
        os.makedirs(os.path.dirname(p), exist_ok=True)
    Image.fromarray(rgb_u8, mode="RGB").save(rp)
    Image.fromarray(depth_u16.astype("<u2")).save(dp)
    Image.fromarray(labels_u8, mode="L").save(lp)


def _center_crop(a: np.ndarray, h: int, w: int) -> np.ndarray:
    top = (a.shape[0] - h) // 2
    left = (a.shape[1] - w) // 2
    return a[top : top + h, left : left + w]


def read_sample(root, split, sample_id, preset="") -> SegSample:
    rp, dp, lp = _paths(root, split, sample_id)
    for p in (rp, dp, lp):
        if not os.path.exists(p):
            raise DataError(f"missing dataset file {p}")
    rgb = np.asarray(Image.open(rp).convert("RGB"), dtype=np.uint8)
    depth = np.asarray(Image.open(dp), dtype=np.uint16)
    labels = np.asarray(Image.open(lp), dtype=np.uint8)
    if depth.shape != rgb.shape[:2] or labels.shape != rgb.shape[:2]:
        raise DataError(
            f"{sample_id}: resolution mismatch rgb {rgb.shape[:2]} depth {depth.shape} label {labels.shape}"
        )
    bad = np.setdiff1d(np.unique(labels), [0, 1, 2])
    if bad.size:
        raise DataError(f"{sample_id}: label values {bad.tolist()} outside {{0,1,2}}")
    h, w = labels.shape
    ch, cw = (h // 32) * 32, (w // 32) * 32
    if ch == 0 or cw == 0:
        raise DataError(f"{sample_id}: resolution {h}x{w} too small (need >= 32)")
    if (ch, cw) != (h, w):
        warnings.warn(f"{sample_id}: center-cropping {h}x{w} to {ch}x{cw} for the /32 contract")
        rgb = _center_crop(rgb, ch, cw)
        depth = _center_crop(depth, ch, cw)
        labels = _center_crop(labels, ch, cw)
    return SegSample(
        sample_id=sample_id,
        rgb=np.ascontiguousarray(rgb.transpose(2, 0, 1).astype(np.float64) / 255.0),
        depth=np.ascontiguousarray(depth[None].astype(np.float64) / 65535.0),
        labels=np.ascontiguousarray(labels),
        preset=preset,
        split=split,
    )


def read_rgb_png(path) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"missing image {path}")
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def read_depth_png(path) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"missing image {path}")
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DataError(f"{path}: depth must be single-channel, got shape {arr.shape}")
    return arr.astype(np.uint16)


def write_mask_png(path, mask: np.ndarray):
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be (H,W), got {mask.shape}")
    d = os.path.dirname(str(path))
    if d:
        os.makedirs(d, exist_ok=True)
    Image.fromarray(mask, mode="L").save(path)


def crop_to_grid(arr: np.ndarray, what: str = "image") -> np.ndarray:
    """Center-crop to the largest height/width divisible by 32, warning when
    anything is trimmed."""
    h, w = arr.shape[:2]
    ch, cw = (h // 32) * 32, (w // 32) * 32
    if ch == 0 or cw == 0:
        raise DataError(f"{what}: resolution {h}x{w} too small (need >= 32)")
    if (ch, cw) != (h, w):
        warnings.warn(f"{what}: center-cropping {h}x{w} to {ch}x{cw} for the /32 contract")
        return _center_crop(arr, ch, cw)
    return arr


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

_MANIFEST_COLS = ("id", "split", "preset", "crater_px_ratio", "rock_px_ratio")


@dataclass
class ManifestRow:
    sample_id: str
    split: str
    preset: str
    crater_px_ratio: float
    rock_px_ratio: float


def manifest_path(root):
    return os.path.join(str(root), "manifest.tsv")


def write_manifest(root, rows: List[ManifestRow]):
    lines = ["\t".join(_MANIFEST_COLS)]
    for r in rows:
        lines.append(
            f"{r.sample_id}\t{r.split}\t{r.preset}\t{r.crater_px_ratio:.9f}\t{r.rock_px_ratio:.9f}"
        )
    tmp = manifest_path(root) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest_path(root))


def read_manifest(root) -> List[ManifestRow]:
    p = manifest_path(root)
    if not os.path.exists(p):
        raise DataError(f"no manifest at {p}")
    with open(p, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != _MANIFEST_COLS:
        raise DataError(f"{p}: unrecognized manifest header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != len(_MANIFEST_COLS):
            raise DataError(f"{p}: malformed row {ln!r}")
        rows.append(ManifestRow(parts[0], parts[1], parts[2], float(parts[3]), float(parts[4])))
    return rows


def load_split(root, split) -> List[SegSample]:
    rows = [r for r in read_manifest(root) if r.split == split]
    if not rows:
        raise DataError(f"split {split!r} has no manifest rows under {root}")
    return [read_sample(root, split, r.sample_id, preset=r.preset) for r in rows]
