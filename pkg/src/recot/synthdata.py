"""Deterministic synthetic benchmark for cross-view object localization.

Each sample is a flat-shaded 2-D scene observed twice: the reference view
renders the scene directly on the unit square, while the query view looks at
the same scene through a similarity transform (scale, rotation, translation)
aimed loosely at one designated target object, then suffers photometric
jitter, optional occluding shapes, and sensor noise.  Everything is analytic:
object membership is an exact inside-test, so ground-truth boxes, footprint
masks, and prompts come from geometry rather than from rendered pixels.

Samples are written as zero-dependency binary rasters (P6/P5) plus JSON
metadata, quantized to 8 bits before being returned so that the in-memory
arrays equal a disk round-trip bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import PromptPoint
from .losses import GtBox

__all__ = [
    "SceneConfig",
    "Warp",
    "CvoglSample",
    "PRESETS",
    "SPLITS",
    "generate_sample",
    "generate_dataset",
    "load_sample",
    "load_manifest",
    "sample_dirs",
    "dataset_hash",
    "write_ppm",
    "read_ppm",
    "write_pgm",
    "read_pgm",
    "template_match_box",
    "solvability_fraction",
]

SPLITS = ("train", "val", "test")

# Seed offsets keep per-sample seeds disjoint across splits for a fixed
# dataset seed; indices must stay below the stride.
_SPLIT_STRIDE = 1 << 20
_SPLIT_OFFSET = {"train": 0, "val": 1, "test": 2}

_SHAPES = ("rect", "ellipse", "lshape")


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for scene content and the cross-view gap."""

    query_size: int = 64
    ref_size: int = 128
    min_objects: int = 3
    max_objects: int = 8
    target_span: tuple[float, float] = (0.14, 0.3)
    distractor_span: tuple[float, float] = (0.08, 0.26)
    # Similarity warp from reference coordinates to query coordinates.
    scale_range: tuple[float, float] = (0.5, 1.5)
    rotation_max_deg: float = 30.0
    aim_jitter: float = 0.08
    # Query-only photometric nuisance.
    color_gain: float = 0.12
    color_offset: float = 0.06
    noise_sigma: float = 0.015
    occluder_prob: float = 0.3
    max_occluders: int = 2

    def __post_init__(self) -> None:
        if self.query_size < 8 or self.ref_size < 8:
            raise ValueError("raster sizes must be at least 8")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range is empty")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"bad scale range {self.scale_range}")


PRESETS = {
    # Mild viewpoint gap: near-nadir capture of the same scene.
    "drone": SceneConfig(
        scale_range=(0.8, 1.25),
        rotation_max_deg=15.0,
        aim_jitter=0.06,
        color_gain=0.08,
        color_offset=0.04,
        noise_sigma=0.01,
        occluder_prob=0.15,
        max_occluders=1,
    ),
    # Severe gap: strong zoom/rotation plus heavy photometric drift.
    "ground": SceneConfig(
        scale_range=(0.5, 1.5),
        rotation_max_deg=30.0,
        aim_jitter=0.12,
        color_gain=0.2,
        color_offset=0.1,
        noise_sigma=0.03,
        occluder_prob=0.5,
        max_occluders=3,
    ),
}


@dataclass(frozen=True)
class Warp:
    """Similarity transform mapping reference coordinates to query coordinates.

    p_query = scale * R(theta) @ p_ref + t.  ``to_reference`` is the exact
    inverse, used to render the query raster by pulling scene colors.
    """

    scale: float
    theta: float
    tx: float
    ty: float

    def _rot(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def to_query(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return (self.scale * (self._rot() @ p.T)).T + np.array([self.tx, self.ty])

    def to_reference(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64) - np.array([self.tx, self.ty])
        return (self._rot().T @ (p.T / self.scale)).T

    def as_dict(self) -> dict:
        return {"scale": self.scale, "theta": self.theta, "t": [self.tx, self.ty]}


@dataclass(frozen=True)
class _Shape:
    kind: str
    cx: float
    cy: float
    w: float
    h: float
    angle: float
    color: np.ndarray  # (3,)

    def inside(self, pts: np.ndarray) -> np.ndarray:
        """Exact membership test for (n, 2) points in scene coordinates."""
        d = np.asarray(pts, dtype=np.float64) - (self.cx, self.cy)
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = d[:, 0] * c + d[:, 1] * s
        v = -d[:, 0] * s + d[:, 1] * c
        hw, hh = 0.5 * self.w, 0.5 * self.h
        if self.kind == "rect":
            return (np.abs(u) <= hw) & (np.abs(v) <= hh)
        if self.kind == "ellipse":
            return (u / hw) ** 2 + (v / hh) ** 2 <= 1.0
        if self.kind == "lshape":
            # Full rectangle minus its first-quadrant corner block.
            return (np.abs(u) <= hw) & (np.abs(v) <= hh) & ~((u > 0) & (v > 0))
        raise ValueError(f"unknown shape kind {self.kind!r}")

    def bounds(self) -> tuple[float, float, float, float]:
        """Tight axis-aligned extent in scene coordinates."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw, hh = 0.5 * self.w, 0.5 * self.h
        if self.kind == "ellipse":
            bx = math.sqrt((hw * c) ** 2 + (hh * s) ** 2)
            by = math.sqrt((hw * s) ** 2 + (hh * c) ** 2)
            return self.cx - bx, self.cy - by, self.cx + bx, self.cy + by
        if self.kind == "rect":
            local = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
        else:
            # The L's extremes sit on its polygon vertices; the rectangle
            # corner removed by the cut must not contribute.
            local = [(-hw, -hh), (hw, -hh), (hw, 0.0), (0.0, 0.0), (0.0, hh), (-hw, hh)]
        xs = [self.cx + u * c - v * s for u, v in local]
        ys = [self.cy + u * s + v * c for u, v in local]
        return min(xs), min(ys), max(xs), max(ys)


@dataclass
class _Scene:
    bg_grid: np.ndarray  # (gh, gw, 3) coarse color lattice
    objects: list[_Shape]  # painter's order; target is last

    def background_at(self, pts: np.ndarray) -> np.ndarray:
        gh, gw, _ = self.bg_grid.shape
        x = np.clip(np.asarray(pts)[:, 0] * (gw - 1), 0.0, gw - 1)
        y = np.clip(np.asarray(pts)[:, 1] * (gh - 1), 0.0, gh - 1)
        x0 = np.clip(np.floor(x).astype(int), 0, gw - 2)
        y0 = np.clip(np.floor(y).astype(int), 0, gh - 2)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        g = self.bg_grid
        top = g[y0, x0] * (1 - fx) + g[y0, x0 + 1] * fx
        bot = g[y0 + 1, x0] * (1 - fx) + g[y0 + 1, x0 + 1] * fx
        return top * (1 - fy) + bot * fy

    def colors_at(self, pts: np.ndarray) -> np.ndarray:
        out = self.background_at(pts)
        for obj in self.objects:
            hit = obj.inside(pts)
            out[hit] = obj.color
        return out


@dataclass(frozen=True)
class CvoglSample:
    """One paired observation: two views, a prompt, and exact supervision."""

    query: np.ndarray       # (3, H_q, W_q) float32 in [0, 1]
    reference: np.ndarray   # (3, H_r, W_r) float32 in [0, 1]
    prompt: PromptPoint
    gt_box: GtBox
    oracle_mask: np.ndarray  # (H_q, W_q) float32 in {0, 1}, query frame
    sample_id: str
    seed: int
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------- generation


def _pixel_centers(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1)


def _random_color(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, 3)


def _separated_color(rng: np.random.Generator, anchor: np.ndarray) -> np.ndarray:
    # Distractors share the palette but must not mimic the target exactly;
    # the prompt resolves which same-looking shape is meant, the color floor
    # only rules out pixel-identical twins.
    for _ in range(32):
        c = _random_color(rng)
        if np.abs(c - anchor).sum() >= 0.3:
            return c
    return 1.0 - anchor


def _make_shape(rng, kind, span, color, margin) -> _Shape:
    w = rng.uniform(*span)
    h = w * rng.uniform(0.6, 1.6)
    h = min(h, span[1])
    angle = rng.uniform(0.0, math.pi)
    half = 0.5 * math.hypot(w, h)  # conservative extent bound
    lo = margin + half
    hi = 1.0 - margin - half
    if lo >= hi:  # shape too large for the margin; center it
        cx = cy = 0.5
    else:
        cx, cy = rng.uniform(lo, hi, 2)
    return _Shape(kind, cx, cy, w, h, angle, color)


def _build_scene(rng: np.random.Generator, cfg: SceneConfig) -> _Scene:
    bg = rng.uniform(0.15, 0.85, (4, 4, 3))
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    target_color = _random_color(rng)
    objects = []
    for _ in range(count - 1):
        objects.append(
            _make_shape(
                rng,
                _SHAPES[rng.integers(len(_SHAPES))],
                cfg.distractor_span,
                _separated_color(rng, target_color),
                margin=0.0,
            )
        )
    # Target last: drawn on top, so its reference footprint is never occluded
    # and the analytic box stays exact.  Margin keeps the box inside [0,1]^2.
    target = _make_shape(
        rng, _SHAPES[rng.integers(len(_SHAPES))], cfg.target_span, target_color, margin=0.02
    )
    objects.append(target)
    return _Scene(bg, objects)


def _draw_warp(rng: np.random.Generator, cfg: SceneConfig, aim: np.ndarray) -> Warp:
    scale = rng.uniform(*cfg.scale_range)
    theta = math.radians(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    center = aim + rng.uniform(-cfg.aim_jitter, cfg.aim_jitter, 2)
    # Solve t so that the aimed scene point lands at the query center.
    c, s = math.cos(theta), math.sin(theta)
    tx = 0.5 - scale * (c * center[0] - s * center[1])
    ty = 0.5 - scale * (s * center[0] + c * center[1])
    return Warp(scale, theta, tx, ty)


def _render_reference(scene: _Scene, cfg: SceneConfig) -> np.ndarray:
    pts = _pixel_centers(cfg.ref_size, cfg.ref_size)
    img = scene.colors_at(pts).reshape(cfg.ref_size, cfg.ref_size, 3)
    return img


def _render_query(scene, warp, occluders, rng, cfg) -> np.ndarray:
    pts_q = _pixel_centers(cfg.query_size, cfg.query_size)
    img = scene.colors_at(warp.to_reference(pts_q))
    for occ in occluders:
        img[occ.inside(pts_q)] = occ.color
    gain = 1.0 + rng.uniform(-cfg.color_gain, cfg.color_gain, 3)
    offset = rng.uniform(-cfg.color_offset, cfg.color_offset, 3)
    img = img * gain + offset
    img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).reshape(cfg.query_size, cfg.query_size, 3)


def _quantize(img_hw3: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """uint8 raster plus the float32 (3, H, W) array models consume."""
    u8 = np.round(np.clip(img_hw3, 0.0, 1.0) * 255.0).astype(np.uint8)
    f32 = (u8.astype(np.float32) / 255.0).transpose(2, 0, 1)
    return u8, np.ascontiguousarray(f32)


def _target_footprint(target, warp, cfg) -> np.ndarray:
    """Query-frame geometric footprint of the target, ignoring occluders."""
    pts_q = _pixel_centers(cfg.query_size, cfg.query_size)
    hit = target.inside(warp.to_reference(pts_q))
    return hit.reshape(cfg.query_size, cfg.query_size)


def generate_sample(
    seed: int, cfg: SceneConfig, preset: str = "custom", sample_id: str | None = None
) -> CvoglSample:
    """Build one fully deterministic sample from a seed and a config."""
    rng = np.random.default_rng(seed)
    scene = _build_scene(rng, cfg)
    target = scene.objects[-1]
    x1, y1, x2, y2 = target.bounds()
    gt_box = GtBox(
        cx=float(np.clip(0.5 * (x1 + x2), 0.0, 1.0)),
        cy=float(np.clip(0.5 * (y1 + y2), 0.0, 1.0)),
        w=float(min(x2 - x1, 1.0)),
        h=float(min(y2 - y1, 1.0)),
    )
    aim = np.array([target.cx, target.cy])

    warp = None
    footprint = None
    occluders: list[_Shape] = []
    for attempt in range(24):
        warp = _draw_warp(rng, cfg, aim)
        occluders = []
        if rng.uniform() < cfg.occluder_prob:
            for _ in range(int(rng.integers(1, cfg.max_occluders + 1))):
                occluders.append(
                    _make_shape(
                        rng,
                        _SHAPES[rng.integers(len(_SHAPES))],
                        (0.1, 0.3),
                        _separated_color(rng, target.color),
                        margin=0.0,
                    )
                )
        footprint = _target_footprint(target, warp, cfg)
        if not footprint.any():
            continue
        # Keep the target findable: occluders may not swallow it whole.
        pts_q = _pixel_centers(cfg.query_size, cfg.query_size)
        covered = np.zeros(pts_q.shape[0], dtype=bool)
        for occ in occluders:
            covered |= occ.inside(pts_q)
        visible = footprint & ~covered.reshape(footprint.shape)
        if visible.sum() >= 0.3 * footprint.sum():
            break
    else:
        raise RuntimeError(f"no usable view found for seed {seed}")

    ref_u8, reference = _quantize(_render_reference(scene, cfg))
    qry_u8, query = _quantize(_render_query(scene, warp, occluders, rng, cfg))

    ys, xs = np.nonzero(footprint)
    pick = int(rng.integers(len(ys)))
    prompt = PromptPoint(
        x=float((xs[pick] + 0.5) / cfg.query_size),
        y=float((ys[pick] + 0.5) / cfg.query_size),
    )

    meta = {
        "seed": int(seed),
        "preset": preset,
        "prompt": [prompt.x, prompt.y],
        "gt_box": [gt_box.cx, gt_box.cy, gt_box.w, gt_box.h],
        "warp": warp.as_dict(),
        "query_size": cfg.query_size,
        "ref_size": cfg.ref_size,
        "target_kind": target.kind,
    }
    return CvoglSample(
        query=query,
        reference=reference,
        prompt=prompt,
        gt_box=gt_box,
        oracle_mask=footprint.astype(np.float32),
        sample_id=sample_id or f"seed{seed}",
        seed=int(seed),
        meta=meta,
    )


# ------------------------------------------------------------------ raster IO


def _read_netpbm_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1


def write_ppm(path, img_u8: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary P6."""
    h, w, c = img_u8.shape
    if c != 3 or img_u8.dtype != np.uint8:
        raise ValueError(f"expected (h, w, 3) uint8, got {img_u8.shape} {img_u8.dtype}")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img_u8.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, offset = _read_netpbm_header(data, b"P6")
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} in {path}")
    body = data[offset : offset + h * w * 3]
    if len(body) != h * w * 3:
        raise ValueError(f"truncated raster in {path}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_pgm(path, img_u8: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary P5."""
    if img_u8.ndim != 2 or img_u8.dtype != np.uint8:
        raise ValueError(f"expected (h, w) uint8, got {img_u8.shape} {img_u8.dtype}")
    h, w = img_u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img_u8.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, offset = _read_netpbm_header(data, b"P5")
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} in {path}")
    body = data[offset : offset + h * w]
    if len(body) != h * w:
        raise ValueError(f"truncated raster in {path}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


# ------------------------------------------------------------------ datasets


def _f32_to_u8(img_3hw: np.ndarray) -> np.ndarray:
    return np.round(img_3hw.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def save_sample(sample_dir: str, sample: CvoglSample) -> None:
    os.makedirs(sample_dir, exist_ok=True)
    write_ppm(os.path.join(sample_dir, "query.ppm"), _f32_to_u8(sample.query))
    write_ppm(os.path.join(sample_dir, "reference.ppm"), _f32_to_u8(sample.reference))
    write_pgm(
        os.path.join(sample_dir, "mask.pgm"),
        (sample.oracle_mask * 255.0).astype(np.uint8),
    )
    with open(os.path.join(sample_dir, "meta.json"), "w") as f:
        json.dump(sample.meta, f, indent=1)


def load_sample(sample_dir: str, manifest: dict | None = None) -> CvoglSample:
    """Read one sample directory back; optionally verify manifest hashes."""
    sample_id = os.path.basename(os.path.normpath(sample_dir))
    meta_path = os.path.join(sample_dir, "meta.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise ValueError(f"sample {sample_id}: missing meta.json") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"sample {sample_id}: corrupt meta.json: {e}") from None

    if manifest is not None:
        split = os.path.basename(os.path.dirname(os.path.normpath(sample_dir)))
        for name in ("query.ppm", "reference.ppm", "mask.pgm", "meta.json"):
            rel = f"{split}/{sample_id}/{name}"
            want = manifest.get("files", {}).get(rel)
            if want is None:
                raise ValueError(f"sample {sample_id}: {name} not in manifest")
            got = _sha256_file(os.path.join(sample_dir, name))
            if got != want:
                raise ValueError(f"sample {sample_id}: hash mismatch for {name}")

    try:
        qry = read_ppm(os.path.join(sample_dir, "query.ppm"))
        ref = read_ppm(os.path.join(sample_dir, "reference.ppm"))
        mask_u8 = read_pgm(os.path.join(sample_dir, "mask.pgm"))
    except FileNotFoundError as e:
        raise ValueError(f"sample {sample_id}: missing raster {e.filename}") from None
    except ValueError as e:
        raise ValueError(f"sample {sample_id}: {e}") from None

    qs, rs = meta.get("query_size"), meta.get("ref_size")
    if qry.shape != (qs, qs, 3):
        raise ValueError(f"sample {sample_id}: query shape {qry.shape} != meta size {qs}")
    if ref.shape != (rs, rs, 3):
        raise ValueError(f"sample {sample_id}: reference shape {ref.shape} != meta size {rs}")
    if mask_u8.shape != (qs, qs):
        raise ValueError(f"sample {sample_id}: mask shape {mask_u8.shape} != meta size {qs}")
    bad = ~np.isin(mask_u8, (0, 255))
    if bad.any():
        raise ValueError(f"sample {sample_id}: mask holds non-binary values")
    mask = (mask_u8 == 255).astype(np.float32)
    if not mask.any():
        raise ValueError(f"sample {sample_id}: empty oracle mask")

    px, py = meta["prompt"]
    prompt = PromptPoint(float(px), float(py))
    gt_box = GtBox(*(float(v) for v in meta["gt_box"]))
    j = min(int(prompt.x * qs), qs - 1)
    i = min(int(prompt.y * qs), qs - 1)
    if mask[i, j] != 1.0:
        raise ValueError(f"sample {sample_id}: prompt does not hit the oracle mask")

    return CvoglSample(
        query=np.ascontiguousarray(qry.astype(np.float32).transpose(2, 0, 1) / 255.0),
        reference=np.ascontiguousarray(ref.astype(np.float32).transpose(2, 0, 1) / 255.0),
        prompt=prompt,
        gt_box=gt_box,
        oracle_mask=mask,
        sample_id=sample_id,
        seed=int(meta.get("seed", -1)),
        meta=meta,
    )


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def dataset_hash(files: dict[str, str]) -> str:
    """Order-independent digest of the per-file hash listing."""
    digest = hashlib.sha256()
    for rel in sorted(files):
        digest.update(rel.encode())
        digest.update(files[rel].encode())
    return digest.hexdigest()


def generate_dataset(
    seed: int,
    cfg: SceneConfig,
    counts: dict[str, int],
    root: str,
    preset: str = "custom",
) -> dict:
    """Write `<root>/<split>/<sample_id>/...` plus a hashed manifest.

    Per-sample seeds are ``seed + split_offset * 2^20 + index``, so splits
    never share a seed and regeneration with the same arguments reproduces
    every byte.
    """
    for split in counts:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected subset of {SPLITS}")
        if counts[split] >= _SPLIT_STRIDE:
            raise ValueError(f"split {split} too large ({counts[split]})")
    os.makedirs(root, exist_ok=True)

    files: dict[str, str] = {}
    split_listing: dict[str, dict] = {}
    for split in SPLITS:
        n = counts.get(split, 0)
        if n == 0:
            continue
        ids = []
        for index in range(n):
            sample_seed = seed + _SPLIT_OFFSET[split] * _SPLIT_STRIDE + index
            sid = f"{split}_{index:06d}"
            sample = generate_sample(sample_seed, cfg, preset=preset, sample_id=sid)
            sdir = os.path.join(root, split, sid)
            save_sample(sdir, sample)
            ids.append(sid)
            for name in ("query.ppm", "reference.ppm", "mask.pgm", "meta.json"):
                rel = f"{split}/{sid}/{name}"
                files[rel] = _sha256_file(os.path.join(sdir, name))
        split_listing[split] = {
            "count": n,
            "seed_base": seed + _SPLIT_OFFSET[split] * _SPLIT_STRIDE,
            "sample_ids": ids,
        }

    manifest = {
        "format": 1,
        "preset": preset,
        "seed": int(seed),
        "query_size": cfg.query_size,
        "ref_size": cfg.ref_size,
        "splits": split_listing,
        "files": files,
        "content_hash": dataset_hash(files),
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_manifest(root: str) -> dict:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ValueError(f"no manifest.json under {root}") from None


def sample_dirs(root: str, split: str, manifest: dict | None = None) -> list[str]:
    """Sample directories of one split, in manifest (generation) order."""
    manifest = manifest or load_manifest(root)
    listing = manifest.get("splits", {}).get(split)
    if listing is None:
        raise ValueError(f"split {split!r} not present in dataset at {root}")
    return [os.path.join(root, split, sid) for sid in listing["sample_ids"]]


# ------------------------------------------------------- solvability oracle


def template_match_box(sample: CvoglSample) -> GtBox:
    """Locate the target in the reference by sliding the warped query patch.

    The patch is the query view resampled into reference scale/orientation
    over the ground-truth box extent (the geometry is known to the oracle;
    appearance still has to match).  Masked normalized cross-correlation over
    all translations picks the best placement; the returned box reuses the
    patch extent at that placement.
    """
    meta = sample.meta
    warp = Warp(
        scale=meta["warp"]["scale"],
        theta=meta["warp"]["theta"],
        tx=meta["warp"]["t"][0],
        ty=meta["warp"]["t"][1],
    )
    gt = sample.gt_box
    rs = sample.reference.shape[1]
    qs = sample.query.shape[1]

    x1, y1, x2, y2 = gt.corners()
    ph = max(int(round(gt.h * rs)), 4)
    pw = max(int(round(gt.w * rs)), 4)
    ys = y1 + (np.arange(ph) + 0.5) * (y2 - y1) / ph
    xs = x1 + (np.arange(pw) + 0.5) * (x2 - x1) / pw
    grid = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    q_pts = warp.to_query(grid)

    # Nearest-pixel lookup into the query raster; off-view points are masked.
    qx = np.floor(q_pts[:, 0] * qs).astype(int)
    qy = np.floor(q_pts[:, 1] * qs).astype(int)
    valid = (qx >= 0) & (qx < qs) & (qy >= 0) & (qy < qs)
    patch = np.zeros((ph * pw, 3))
    patch[valid] = sample.query[:, qy[valid], qx[valid]].T
    patch = patch.reshape(ph, pw, 3)
    pmask = valid.reshape(ph, pw).astype(np.float64)
    area = pmask.sum()
    if area < 4:
        return gt  # degenerate; nothing to slide

    ref = sample.reference.transpose(1, 2, 0).astype(np.float64)
    fh, fw = rs + ph - 1, rs + pw - 1

    def corr(a, b):  # cross-correlation via FFT, full size
        fa = np.fft.rfft2(a, (fh, fw))
        fb = np.fft.rfft2(b[::-1, ::-1], (fh, fw))
        return np.fft.irfft2(fa * fb, (fh, fw))

    num = np.zeros((fh, fw))
    ref_sq = np.zeros((fh, fw))
    patch_energy = 0.0
    for ch in range(3):
        p = patch[:, :, ch] * pmask
        p_mean = p.sum() / area
        p_zero = (patch[:, :, ch] - p_mean) * pmask
        patch_energy += (p_zero**2).sum()
        s1 = corr(ref[:, :, ch], pmask)
        s2 = corr(ref[:, :, ch] ** 2, pmask)
        c = corr(ref[:, :, ch], p_zero)
        num += c - s1 * (p_zero.sum() / area)
        ref_sq += np.maximum(s2 - s1**2 / area, 0.0)

    score = num / np.sqrt(ref_sq * patch_energy + 1e-12)
    # Valid placements keep the whole patch inside the reference.
    score_valid = score[ph - 1 : rs, pw - 1 : rs]
    iy, ix = np.unravel_index(np.argmax(score_valid), score_valid.shape)
    cx = (ix + 0.5 * pw) / rs
    cy = (iy + 0.5 * ph) / rs
    return GtBox(
        cx=float(np.clip(cx, gt.w / 2, 1 - gt.w / 2)),
        cy=float(np.clip(cy, gt.h / 2, 1 - gt.h / 2)),
        w=gt.w,
        h=gt.h,
    )


def solvability_fraction(samples, iou_threshold: float = 0.5) -> float:
    """Fraction of samples the template matcher localizes at IoU >= t."""
    hits = 0
    total = 0
    for sample in samples:
        pred = template_match_box(sample)
        gt = sample.gt_box
        ax1, ay1, ax2, ay2 = pred.corners()
        bx1, by1, bx2, by2 = gt.corners()
        iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
        ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
        inter = iw * ih
        union = pred.w * pred.h + gt.w * gt.h - inter
        hits += (inter / union) >= iou_threshold
        total += 1
    return hits / max(total, 1)
