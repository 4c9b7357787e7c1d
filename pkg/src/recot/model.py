"""Recurrent cross-view localization model.

A fixed set of learnable tokens first mixes with query features and the click
prompt, then repeatedly cross-attends to enhanced reference features; after
every refinement step the same shared linear head decodes each token into a
candidate box, so extra steps add compute but never parameters.  Reference
features are enhanced once up front: a query-token gate suppresses irrelevant
regions of the fine reference map, the surviving cells attend back to the
query-side features, and a small spatial-attention block cleans up the result.

All attention sublayers are pre-norm residual blocks: ``x + attn(norm(x), kv)``.
Fixed sinusoidal position codes are added to the flattened feature rows of
both views so attention output can carry location, which the box head needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .encoder import (
    EncoderConfig, PromptEmbedder, PromptPoint, QueryEncoder, ReferenceEncoder,
    grid_positional_rows, raster_to_rows, rows_to_raster,
)

__all__ = ["ModelConfig", "StepPrediction", "ForwardTrace", "RecurrentLocalizer"]

# Keeps every sigmoid output strictly inside (0, 1) in float32 so box areas
# and map values never collapse to degenerate exact 0/1.
_SIGMOID_MARGIN = 1e-6


def _bounded_sigmoid(x: nm.Node) -> nm.Node:
    return nm.clip(nm.sigmoid(x), _SIGMOID_MARGIN, 1.0 - _SIGMOID_MARGIN)


def _standardize_col(col: nm.Node, eps: float = 1e-5) -> nm.Node:
    """Z-score one (n, 1) column; no learnable parts."""
    mu = nm.mean_(col, axis=0, keepdims=True)
    centered = col - mu
    var = nm.mean_(centered * centered, axis=0, keepdims=True)
    return centered / nm.exp(0.5 * nm.log(var + eps))


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_tokens: int = 16
    heads: int = 4
    seed: int = 0
    # Structural ablation switches; parameters are registered either way so
    # the registry layout never depends on the variant under test.
    no_rfem: bool = False
    no_gate: bool = False
    replace_flr_with_fhr: bool = False
    replace_fhr_with_flr: bool = False

    def __post_init__(self):
        if self.n_tokens < 1:
            raise ValueError("need at least one token")
        if self.encoder.c % self.heads:
            raise ValueError(f"c={self.encoder.c} not divisible by heads={self.heads}")


@dataclass
class StepPrediction:
    """Per-token candidates after one refinement step."""
    boxes: nm.Node        # (n, 4) as (cx, cy, w, h), each in (0, 1)
    confidence: nm.Node   # (n, 1) in (0, 1)
    agg_map: nm.Node      # (1, h_r, w_r) in (0, 1)
    step_index: int

    @property
    def boxes_value(self) -> np.ndarray:
        return self.boxes.array

    @property
    def confidence_value(self) -> np.ndarray:
        return self.confidence.array[:, 0]

    def best_box(self) -> np.ndarray:
        """Box of the max-confidence token."""
        return self.boxes.array[int(self.confidence_value.argmax())]


@dataclass
class ForwardTrace:
    steps: list[StepPrediction]
    seg_map: nm.Node                       # (1, h_q, w_q)
    attention: Optional[list[np.ndarray]]  # per step: (heads, n, h_r * w_r)


class _AttnBlock:
    """Residual attention block, pre-norm or post-norm.

    Pre-norm (default): x + mha(norm(x), kv, kv).  Post-norm:
    norm(x + mha(x, kv, kv)); used where the output feeds raw dot products,
    because it pins the row scale and so removes the "shrink everything
    upstream" direction that multiplicative gates otherwise offer the loss.
    """

    def __init__(self, registry: nm.ParamRegistry, prefix: str, c: int,
                 rng: np.random.Generator, post: bool = False):
        self.params = nm.MhaParams.create(registry, prefix, c, rng)
        self.gamma = registry.ones(f"{prefix}_ln.g", (c,))
        self.beta = registry.zeros(f"{prefix}_ln.b", (c,))
        self.post = post

    def __call__(self, x: nm.Node, kv: nm.Node | None, heads: int,
                 record: list | None = None) -> nm.Node:
        if self.post:
            y = nm.add(x, nm.mha(x, x if kv is None else kv, x if kv is None else kv,
                                 heads=heads, params=self.params, record=record))
            return nm.layer_norm(y, self.gamma, self.beta)
        h = nm.layer_norm(x, self.gamma, self.beta)
        if kv is None:
            kv = h  # self-attention
        return nm.add(x, nm.mha(h, kv, kv, heads=heads, params=self.params, record=record))


class RecurrentLocalizer:
    """Full forward graph from raw rasters to per-step box predictions."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        enc = cfg.encoder
        self.c = enc.c
        self.n = cfg.n_tokens
        self.registry = nm.ParamRegistry()
        rng = np.random.default_rng(cfg.seed)

        self.tokens = self.init_tokens(self.n, self.c, rng)
        self.enc_q = QueryEncoder(self.registry, enc, rng)
        self.enc_r = ReferenceEncoder(self.registry, enc, rng)
        # Mirror the query trunk's initial weights into the reference trunk
        # (still separate parameters).  Starting from one embedding makes the
        # same object correlate across views at step zero, so the matching
        # losses amplify real signal instead of having to invent it.
        for (wq, _, _), (wr, _, _) in zip(self.enc_q.trunk.layers,
                                          self.enc_r.trunk.layers):
            wr.value.array[...] = wq.value.array
        self.prompt_embed = PromptEmbedder(self.registry, self.c, rng)
        self.block_self = _AttnBlock(self.registry, "interact.self", self.c, rng)
        self.block_prompt = _AttnBlock(self.registry, "interact.prompt", self.c, rng)
        # Second mixing round after the prompt lands.  The first self-attn
        # runs before tokens know the prompt point, so without this pass a
        # token could learn where to look but never fetch what is there.
        self.block_fetch = _AttnBlock(self.registry, "interact.fetch", self.c, rng)
        self.block_rfem_cross = _AttnBlock(self.registry, "rfem.cross", self.c, rng)
        self.w_cbam = self.registry.kaiming("rfem.cbam.w", (1, 2, 7, 7), rng)
        self.b_cbam = self.registry.zeros("rfem.cbam.b", (1,))
        self.block_rfem_self = _AttnBlock(self.registry, "rfem.self", self.c, rng,
                                          post=True)
        self.block_loop = _AttnBlock(self.registry, "loop.mhca", self.c, rng)
        # Affine calibration for the similarity-map logits.  Most grid cells
        # are background, so without an explicit bias the uniform push toward
        # zero travels through the token descriptor and flattens the map
        # before any contrast can form; the bias soaks up that class prior
        # (initialized to ~6% positive, a quarter-frame box on the map grid).
        self.g_map = self.registry.ones("head.map.g", (1,))
        self.b_map = self.registry.zeros("head.map.b", (1,))
        self.b_map.value.array[0] = _logit(0.0625)
        # Readout norm, shared by every step.  The token stream accumulates
        # one residual read per step, so its scale grows with depth; heads
        # reading the raw stream saturate their sigmoids after a few steps
        # and later refinements stop moving the outputs.
        self.g_read = self.registry.ones("head.read_ln.g", (self.c,))
        self.b_read = self.registry.zeros("head.read_ln.b", (self.c,))
        self.w_box = self.registry.kaiming("head.box.w", (self.c, 5), rng)
        self.b_box = self.registry.zeros("head.box.b", (5,))
        # Bias the head toward plausible initial decodes: mid-frame center,
        # quarter-frame extent, and a one-in-n confidence prior so matching
        # starts from calibrated scores instead of 0.5 everywhere.
        self.b_box.value.array[2:4] = _logit(0.25)
        self.b_box.value.array[4] = _logit(1.0 / self.n)
        self.w_seg0 = self.registry.kaiming("seg.conv0.w", (self.c // 2, self.c, 3, 3), rng)
        self.b_seg0 = self.registry.zeros("seg.conv0.b", (self.c // 2,))
        self.w_seg1 = self.registry.kaiming("seg.conv1.w", (1, self.c // 2, 3, 3), rng)
        self.b_seg1 = self.registry.zeros("seg.conv1.b", (1,))
        # Same prior trick for the query-mask head (footprints cover ~15%).
        self.b_seg1.value.array[0] = _logit(0.15)

    # ------------------------------------------------------------- stages

    def init_tokens(self, n: int, c: int, rng: np.random.Generator) -> nm.Node:
        return self.registry.normal("tokens", (n, c), rng, std=0.02)

    def query_interaction(self, tokens: nm.Node, f_q: nm.Node, p: nm.Node
                          ) -> tuple[nm.Node, nm.Node, nm.Node]:
        """Token/feature self-attention, then prompt injection.

        Returns (T_q, T', F'_qc): tokens before the prompt stage, tokens
        after it, and the full updated row matrix.
        """
        g = self.cfg.encoder.query_grid
        pos = grid_positional_rows(g, g, self.c)
        f_qc = nm.cat_rows([tokens, nm.add(f_q, pos)])
        f_qc = self.block_self(f_qc, None, self.cfg.heads)
        t_q = nm.narrow(f_qc, 0, 0, self.n)
        f_qc = self.block_prompt(f_qc, p, self.cfg.heads)
        f_qc = self.block_fetch(f_qc, None, self.cfg.heads)
        t_prime = nm.narrow(f_qc, 0, 0, self.n)
        return t_q, t_prime, f_qc

    def aggregate_tokens(self, t: nm.Node) -> nm.Node:
        """Collapse token rows to one global descriptor.

        Reads the normalized view of the stream, then a per-channel softmax
        across the n rows weights each token's contribution; the weighted
        rows are summed away.
        """
        t = nm.layer_norm(t, self.g_read, self.b_read)
        w = nm.softmax(t, axis=0)
        return nm.sum_(nm.mul(t, w), axis=0, keepdims=True)

    def token_map(self, t_agg: nm.Node, f_r: nm.Node) -> nm.Node:
        """Correlate the global descriptor with every reference cell.

        Logits are tempered by 1/sqrt(c) like attention scores; otherwise
        c-dim dot products saturate the sigmoid to exact 0/1 in float32.
        The learned affine (g_map, b_map) calibrates scale and base rate so
        the correlation itself only has to express contrast.
        """
        g = self.cfg.encoder.ref_grid_lr
        sim = nm.matmul(t_agg, nm.transpose2d(f_r)) * (1.0 / np.sqrt(self.c))
        logits = nm.add(nm.mul(sim, self.g_map), self.b_map)
        return nm.reshape(_bounded_sigmoid(logits), (1, g, g))

    def reference_gate(self, t_q: nm.Node, f_lr: nm.Node) -> nm.Node:
        """Query-token relevance gate over the coarse reference grid."""
        g = self.cfg.encoder.ref_grid_lr
        t_agg = self.aggregate_tokens(t_q)
        logits = nm.matmul(t_agg, nm.transpose2d(f_lr)) * (1.0 / np.sqrt(self.c))
        return nm.reshape(nm.sigmoid(logits), (1, g, g))

    def gated_fine_rows(self, t_q: nm.Node, f_lr: nm.Node, f_hr_pos: nm.Node) -> nm.Node:
        """Upsample the coarse gate and scale the fine reference rows by it."""
        hr = self.cfg.encoder.ref_grid_hr
        gate = nm.resize_bilinear(self.reference_gate(t_q, f_lr), hr, hr)
        return nm.mul(f_hr_pos, raster_to_rows(gate))

    def rfem(self, t_q: nm.Node, f_qc: nm.Node, f_lr: nm.Node, f_hr: nm.Node) -> nm.Node:
        """Reference feature enhancement.

        f_lr: (h_r*w_r, c) coarse rows; f_hr: (2h_r*2w_r, c) fine rows.
        Pipeline: token gate on the coarse grid, upsampled onto the fine
        rows, cross-attention back to the query-side rows, 2x2 average-pool
        down, spatial attention, one self-attention block.
        """
        lr = self.cfg.encoder.ref_grid_lr
        hr = self.cfg.encoder.ref_grid_hr
        cfg = self.cfg

        if cfg.replace_fhr_with_flr:
            f_hr = raster_to_rows(nm.resize_bilinear(rows_to_raster(f_lr, lr, lr), hr, hr))
        if cfg.replace_flr_with_fhr:
            f_lr = raster_to_rows(nm.avg_pool2d(rows_to_raster(f_hr, hr, hr), 2))

        x = nm.add(f_hr, grid_positional_rows(hr, hr, self.c))
        if not cfg.no_gate:
            x = self.gated_fine_rows(t_q, f_lr, x)
        x = self.block_rfem_cross(x, f_qc, cfg.heads)
        x = raster_to_rows(nm.avg_pool2d(rows_to_raster(x, hr, hr), 2))   # (lr*lr, c)

        # Spatial attention: per-cell channel max+mean -> 7x7 conv -> gate.
        # The two stat maps are z-scored across cells first; their raw scale
        # floats freely during training, and a scale excursion would let the
        # sigmoid saturate to an all-zero gate that no gradient can reopen.
        mx = _standardize_col(nm.reduce_max(x, axis=1, keepdims=True))
        mn = _standardize_col(nm.mean_(x, axis=1, keepdims=True))
        pooled = nm.cat_rows([rows_to_raster(mx, lr, lr), rows_to_raster(mn, lr, lr)])
        gate = nm.sigmoid(nm.conv2d(pooled, self.w_cbam, self.b_cbam, stride=1, pad=3))
        x = nm.mul(x, raster_to_rows(gate))
        return self.block_rfem_self(x, None, cfg.heads)

    def recurrent_step(self, t: nm.Node, f_r_kv: nm.Node,
                       record: list | None = None) -> nm.Node:
        """One shared refinement step: tokens cross-attend to F'_r.

        ``f_r_kv`` is F'_r with the fixed positional code re-added.  The
        box head decodes coordinates linearly from token state, so the
        attended values must carry position explicitly; relying on whatever
        positional residue survives the enhancement stack is not enough.
        """
        return self.block_loop(t, f_r_kv, self.cfg.heads, record=record)

    def predict_boxes(self, t: nm.Node) -> tuple[nm.Node, nm.Node]:
        """Shared linear head: token row -> sigmoid (cx, cy, w, h, conf).

        Normalizes the raw stream row first; see ``g_read``.
        """
        t = nm.layer_norm(t, self.g_read, self.b_read)
        out = _bounded_sigmoid(nm.linear(t, self.w_box, self.b_box))
        return nm.narrow(out, 1, 0, 4), nm.narrow(out, 1, 4, 1)

    def seg_head(self, f_q_rows: nm.Node) -> nm.Node:
        """Query-side mask logits from the prompt-conditioned feature rows."""
        g = self.cfg.encoder.query_grid
        raster = rows_to_raster(f_q_rows, g, g)
        h = nm.relu(nm.conv2d(raster, self.w_seg0, self.b_seg0, stride=1, pad=1))
        return _bounded_sigmoid(nm.conv2d(h, self.w_seg1, self.b_seg1, stride=1, pad=1))

    # ------------------------------------------------------------- forward

    def enhanced_reference(self, t_q: nm.Node, f_qc: nm.Node,
                           f_lr_rows: nm.Node, f_hr_rows: nm.Node) -> nm.Node:
        if self.cfg.no_rfem:
            # Bypass keeps the positional plumbing so box decoding stays possible.
            lr = self.cfg.encoder.ref_grid_lr
            return nm.add(f_lr_rows, grid_positional_rows(lr, lr, self.c))
        return self.rfem(t_q, f_qc, f_lr_rows, f_hr_rows)

    def forward(self, sample, m: int, record_attention: bool = False) -> ForwardTrace:
        """Run the full graph for ``m`` refinement steps on one sample.

        ``sample`` needs ``query``/``reference`` rasters and a ``prompt``
        point.  Step predictions are emitted after every refinement step.
        """
        if m < 1:
            raise ValueError(f"need m >= 1 refinement steps, got {m}")
        dt = nm.default_dtype()
        query = nm.constant(np.asarray(sample.query, dtype=dt))
        reference = nm.constant(np.asarray(sample.reference, dtype=dt))
        prompt = sample.prompt
        if not isinstance(prompt, PromptPoint):
            prompt = PromptPoint(float(prompt[0]), float(prompt[1]))

        f_q = self.enc_q(query)
        f_hr_raster, f_lr_raster = self.enc_r(reference)
        f_hr = raster_to_rows(f_hr_raster)
        f_lr = raster_to_rows(f_lr_raster)
        p = self.prompt_embed(prompt)

        t_q, t, f_qc = self.query_interaction(self.tokens, f_q, p)
        f_r = self.enhanced_reference(t_q, f_qc, f_lr, f_hr)
        # Keys/values for the refinement readout get the positional code;
        # the similarity map keeps reading the content rows unchanged.
        lr = self.cfg.encoder.ref_grid_lr
        f_r_kv = nm.add(f_r, grid_positional_rows(lr, lr, self.c))

        attention: list[np.ndarray] | None = [] if record_attention else None
        steps: list[StepPrediction] = []
        for i in range(1, m + 1):
            t = self.recurrent_step(t, f_r_kv, record=attention)
            boxes, conf = self.predict_boxes(t)
            agg = self.token_map(self.aggregate_tokens(t), f_r)
            steps.append(StepPrediction(boxes, conf, agg, i))

        n = self.n
        g = self.cfg.encoder.query_grid
        seg = self.seg_head(nm.narrow(f_qc, 0, n, g * g))
        return ForwardTrace(steps=steps, seg_map=seg, attention=attention)
