"""Multi-head cross-attention built from tape primitives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .registry import ParamRegistry
from .tensor import Node, ShapeError

__all__ = ["MhaParams", "mha"]


@dataclass
class MhaParams:
    """Projection parameters for one attention block."""
    wq: Node
    bq: Node
    wk: Node
    bk: Node
    wv: Node
    bv: Node
    wo: Node
    bo: Node

    @classmethod
    def create(cls, registry: ParamRegistry, prefix: str, c: int, rng: np.random.Generator) -> "MhaParams":
        nodes = {}
        for name in ("wq", "wk", "wv", "wo"):
            nodes[name] = registry.kaiming(f"{prefix}.{name}", (c, c), rng)
            bias = name.replace("w", "b")
            nodes[bias] = registry.zeros(f"{prefix}.{bias}", (c,))
        # Damp the output projection so a fresh residual branch starts small
        # relative to its stream; full-scale init lets one block blow the
        # row norms up several-fold and desaturate every later sigmoid/softmax.
        nodes["wo"].value.array *= 0.25
        return cls(**nodes)


def mha(q, k, v, heads: int, params: MhaParams, record: list | None = None) -> Node:
    """Scaled dot-product attention over row matrices.

    q: (L_q, c), k/v: (L_k, c).  Rows are projected per head, attention
    weights are softmax(QK^T / sqrt(c / heads)) and therefore row-stochastic,
    and the concatenated head outputs pass through the output projection.
    Self-attention is the q = k = v call.  When ``record`` is given the
    per-head weight array (heads, L_q, L_k) is appended for inspection.
    """
    c = q.shape[1]
    if k.shape[1] != c or v.shape[1] != c:
        raise ShapeError(f"mha channel mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"mha key/value length mismatch: {k.shape} vs {v.shape}")
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    d = c // heads

    qh = ops.split_heads(ops.linear(q, params.wq, params.bq), heads)
    kh = ops.split_heads(ops.linear(k, params.wk, params.bk), heads)
    vh = ops.split_heads(ops.linear(v, params.wv, params.bv), heads)
    logits = ops.bmm_nt(qh, kh) * (1.0 / np.sqrt(d))
    weights = ops.softmax(logits, axis=-1)
    if record is not None:
        record.append(weights.array.copy())
    context = ops.bmm(weights, vh)
    return ops.linear(ops.merge_heads(context), params.wo, params.bo)
