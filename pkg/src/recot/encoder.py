"""Toy convolutional view encoders and coordinate embeddings.

Both views run through a three-stage conv pyramid.  The query side strides
down to 1/8 resolution; the reference side stops at 1/4 (its last stage is
stride 1) and adds one stride-2 stage for the coarse map at 1/8.  The finer
reference grids matter: boxes are regressed from attention over these cells,
and the aggregation-map supervision only carries signal when a typical
target covers several cells.  The two views never share weights: appearance
statistics differ across views, so each encoder adapts independently.

Every encoder output is layer-normalized per cell.  Raw ReLU stacks emit
nonnegative rows that all share one large positive direction, so dot
products against them measure magnitude instead of content and the
similarity maps downstream degenerate to a constant.  Centering each row
removes that common mode and leaves unit-scale features whose inner
products express contrast.

Coordinates (the click prompt and grid cell centers) map to sin/cos features
at log-spaced frequencies so that nearby points get similar codes at coarse
frequencies and distinct codes at fine ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nm

__all__ = [
    "EncoderConfig", "PromptPoint", "QueryEncoder", "ReferenceEncoder",
    "PromptEmbedder", "fourier_features", "grid_positional_rows",
    "raster_to_rows", "rows_to_raster",
]

QUERY_STRIDE = 8
REF_STRIDE = 4  # fine reference stride; the coarse map is 2x this


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes shared by the encoders and the model."""
    c: int = 64
    query_size: int = 64
    ref_size: int = 128

    def __post_init__(self):
        if self.c % 4:
            raise ValueError(f"channel count must be divisible by 4, got {self.c}")
        if self.query_size % QUERY_STRIDE:
            raise ValueError(f"query_size must be divisible by {QUERY_STRIDE}")
        if self.ref_size % (2 * REF_STRIDE):
            raise ValueError(f"ref_size must be divisible by {2 * REF_STRIDE}")

    @property
    def query_grid(self) -> int:
        return self.query_size // QUERY_STRIDE

    @property
    def ref_grid_hr(self) -> int:
        return self.ref_size // REF_STRIDE

    @property
    def ref_grid_lr(self) -> int:
        return self.ref_size // (2 * REF_STRIDE)


@dataclass(frozen=True)
class PromptPoint:
    """Click location in the query view, normalized to [0, 1]^2."""
    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"prompt ({self.x}, {self.y}) outside [0, 1]^2")


def fourier_features(points: np.ndarray, c: int, max_freq: float = 16.0) -> np.ndarray:
    """sin/cos features of (x, y) points at log-spaced frequencies.

    points: (n, 2) in [0, 1]^2.  Returns (n, c) float64 with c/2 sin-cos
    pairs split evenly between the two coordinates.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if c % 4:
        raise ValueError(f"feature count must be divisible by 4, got {c}")
    per_coord = c // 4
    freqs = np.geomspace(1.0, max_freq, per_coord)
    parts = []
    for coord in (points[:, 0], points[:, 1]):
        phase = 2.0 * np.pi * coord[:, None] * freqs[None, :]
        parts.append(np.sin(phase))
        parts.append(np.cos(phase))
    return np.concatenate(parts, axis=1)


@lru_cache(maxsize=32)
def _grid_rows_cached(h: int, w: int, c: int) -> np.ndarray:
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    pts = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    rows = fourier_features(pts, c)
    rows.setflags(write=False)
    return rows


def grid_positional_rows(h: int, w: int, c: int) -> nm.Node:
    """Constant positional code for each cell center of an h x w grid."""
    return nm.constant(_grid_rows_cached(h, w, c).astype(nm.default_dtype()))


def raster_to_rows(x: nm.Node) -> nm.Node:
    """(c, h, w) raster -> (h*w, c) rows in row-major spatial order."""
    c, h, w = x.shape
    return nm.transpose2d(nm.reshape(x, (c, h * w)))


def rows_to_raster(x: nm.Node, h: int, w: int) -> nm.Node:
    rows, c = x.shape
    if rows != h * w:
        raise nm.ShapeError(f"{rows} rows cannot fill a {h}x{w} grid")
    return nm.reshape(nm.transpose2d(x), (c, h, w))


class _RowNorm:
    """Learnable per-cell layer norm over the channel axis."""

    def __init__(self, registry: nm.ParamRegistry, prefix: str, c: int):
        self.gamma = registry.ones(f"{prefix}.g", (c,))
        self.beta = registry.zeros(f"{prefix}.b", (c,))

    def rows(self, x: nm.Node) -> nm.Node:
        return nm.layer_norm(x, self.gamma, self.beta)

    def raster(self, x: nm.Node) -> nm.Node:
        c, h, w = x.shape
        return rows_to_raster(self.rows(raster_to_rows(x)), h, w)


class _ConvTrunk:
    """Three conv+ReLU stages, 3 channels in, c out; strides configurable."""

    def __init__(self, registry: nm.ParamRegistry, prefix: str, c: int,
                 rng: np.random.Generator, strides: tuple[int, int, int] = (2, 2, 2)):
        widths = (max(c // 4, 4), max(c // 2, 8), c)
        self.layers = []
        c_in = 3
        for i, (c_out, s) in enumerate(zip(widths, strides)):
            w = registry.kaiming(f"{prefix}.conv{i}.w", (c_out, c_in, 3, 3), rng)
            b = registry.zeros(f"{prefix}.conv{i}.b", (c_out,))
            self.layers.append((w, b, s))
            c_in = c_out

    def __call__(self, img: nm.Node) -> nm.Node:
        x = img
        for w, b, s in self.layers:
            x = nm.relu(nm.conv2d(x, w, b, stride=s, pad=1))
        return x


class QueryEncoder:
    """Query raster (3, H, W) -> flattened feature rows (H/8 * W/8, c)."""

    def __init__(self, registry: nm.ParamRegistry, cfg: EncoderConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.trunk = _ConvTrunk(registry, "enc_q", cfg.c, rng)
        self.norm = _RowNorm(registry, "enc_q.norm", cfg.c)

    def __call__(self, img: nm.Node) -> nm.Node:
        if img.shape != (3, self.cfg.query_size, self.cfg.query_size):
            raise nm.ShapeError(
                f"query raster {img.shape} != (3, {self.cfg.query_size}, {self.cfg.query_size})")
        return self.norm.rows(raster_to_rows(self.trunk(img)))


class ReferenceEncoder:
    """Reference raster -> (fine raster at stride 4, coarse raster at stride 8)."""

    def __init__(self, registry: nm.ParamRegistry, cfg: EncoderConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.trunk = _ConvTrunk(registry, "enc_r", cfg.c, rng, strides=(2, 2, 1))
        self.w_lr = registry.kaiming("enc_r.conv_lr.w", (cfg.c, cfg.c, 3, 3), rng)
        self.b_lr = registry.zeros("enc_r.conv_lr.b", (cfg.c,))
        self.norm_hr = _RowNorm(registry, "enc_r.norm_hr", cfg.c)
        self.norm_lr = _RowNorm(registry, "enc_r.norm_lr", cfg.c)

    def __call__(self, img: nm.Node) -> tuple[nm.Node, nm.Node]:
        if img.shape != (3, self.cfg.ref_size, self.cfg.ref_size):
            raise nm.ShapeError(
                f"reference raster {img.shape} != (3, {self.cfg.ref_size}, {self.cfg.ref_size})")
        f_hr = self.trunk(img)
        # the coarse branch reads the raw trunk, not the normalized fine map
        f_lr = nm.relu(nm.conv2d(f_hr, self.w_lr, self.b_lr, stride=2, pad=1))
        return self.norm_hr.raster(f_hr), self.norm_lr.raster(f_lr)


class PromptEmbedder:
    """Fourier code of the click point through one trainable linear map."""

    def __init__(self, registry: nm.ParamRegistry, c: int, rng: np.random.Generator):
        self.c = c
        self.w = registry.kaiming("prompt.w", (c, c), rng)
        self.b = registry.zeros("prompt.b", (c,))

    def __call__(self, prompt: PromptPoint) -> nm.Node:
        feats = fourier_features(np.array([[prompt.x, prompt.y]]), self.c)
        code = nm.constant(feats.astype(nm.default_dtype()))
        return nm.linear(code, self.w, self.b)
