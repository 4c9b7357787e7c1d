"""Training, evaluation, and ablation drivers.

The loop is deliberately plain: serial per-sample forward/backward with the
gradient seeded at 1/batch so accumulated parameter gradients equal the batch
mean, a decoupled-weight-decay adaptive optimizer, global-norm clipping, and
newline-delimited JSON logging.  Everything is deterministic given the config
seed; evaluation may fan out over threads (capped by RECOT_THREADS) because
forward passes are read-only.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nm
from .encoder import EncoderConfig
from .losses import GtBox, coerce_box, total_loss
from .model import ModelConfig, RecurrentLocalizer
from .synthdata import CvoglSample, load_manifest, load_sample, sample_dirs

__all__ = [
    "TrainConfig",
    "EvalReport",
    "TrainAbortError",
    "CheckpointError",
    "AdamW",
    "clip_global_norm",
    "iou",
    "acc_at_t",
    "SampleStore",
    "build_model",
    "train",
    "evaluate",
    "ablate",
    "save_checkpoint",
    "load_checkpoint",
    "ABLATION_VARIANTS",
]


class TrainAbortError(RuntimeError):
    """Raised when training hits a non-finite loss."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint is missing, corrupt, or mismatched."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and model-size settings for one training run."""

    lr: float = 0.0025
    weight_decay: float = 0.0001
    batch_size: int = 16
    epochs: int = 30
    m_train: int = 6
    n_tokens: int = 16
    alpha: float = 1.0
    seed: int = 0
    eval_every: int = 1
    channels: int = 64
    heads: int = 4
    # Architecture ablations (forwarded into ModelConfig).
    no_rfem: bool = False
    no_gate: bool = False
    replace_flr_with_fhr: bool = False
    replace_fhr_with_flr: bool = False
    # Objective ablations.
    include_token: bool = True
    include_sam: bool = True

    def __post_init__(self) -> None:
        if min(self.lr, self.weight_decay) < 0 or min(self.batch_size, self.epochs) < 1:
            raise ValueError("optimizer settings must be positive")
        if self.m_train < 1 or self.n_tokens < 1 or self.eval_every < 1:
            raise ValueError("m_train, n_tokens, eval_every must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def build_model(cfg: TrainConfig, query_size: int, ref_size: int) -> RecurrentLocalizer:
    enc = EncoderConfig(c=cfg.channels, query_size=query_size, ref_size=ref_size)
    return RecurrentLocalizer(
        ModelConfig(
            encoder=enc,
            n_tokens=cfg.n_tokens,
            heads=cfg.heads,
            seed=cfg.seed,
            no_rfem=cfg.no_rfem,
            no_gate=cfg.no_gate,
            replace_flr_with_fhr=cfg.replace_flr_with_fhr,
            replace_fhr_with_flr=cfg.replace_fhr_with_flr,
        )
    )


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay (both scaled by lr)."""

    def __init__(
        self,
        registry,
        lr: float = 0.0025,
        weight_decay: float = 0.0001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.registry = registry
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(node.array) for name, node in registry.items()}
        self._v = {name: np.zeros_like(node.array) for name, node in registry.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, node in self.registry.items():
            g = node.grad
            if g is None:
                g = np.zeros_like(node.array)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p = node.value.array
            p -= (self.lr * (update + self.weight_decay * p)).astype(p.dtype, copy=False)


def clip_global_norm(registry, max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, node in registry.items():
        if node.grad is not None:
            total += float(np.sum(node.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for _, node in registry.items():
            if node.grad is not None:
                node.grad = node.grad * node.grad.dtype.type(scale)
    return norm


# ------------------------------------------------------------------ metrics


def _corners(box) -> tuple[float, float, float, float]:
    if isinstance(box, GtBox):
        return box.corners()
    cx, cy, w, h = (float(v) for v in box)
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def iou(a, b) -> float:
    """Intersection over union of two center-form rectangles."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ValueError("boxes must have positive area")
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def acc_at_t(preds, gts, t: float) -> float:
    """Fraction of (pred, gt) pairs with IoU at least ``t``."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} targets")
    if not preds:
        return 0.0
    hits = sum(iou(p, g) >= t for p, g in zip(preds, gts))
    return hits / len(preds)


# ------------------------------------------------------------- data access


class SampleStore:
    """One split held in memory in quantized form.

    Rasters stay uint8 (exactly what the files hold) and are converted to the
    float32 model inputs on access, so a store round-trips bit-identically
    with the on-disk representation while using a quarter of the memory.
    """

    def __init__(self, root: str, split: str, manifest: dict | None = None):
        manifest = manifest or load_manifest(root)
        self.split = split
        self._samples: list[CvoglSample] = []
        self._q_u8: list[np.ndarray] = []
        self._r_u8: list[np.ndarray] = []
        for sdir in sample_dirs(root, split, manifest):
            s = load_sample(sdir, manifest)
            self._q_u8.append(np.round(s.query * 255.0).astype(np.uint8))
            self._r_u8.append(np.round(s.reference * 255.0).astype(np.uint8))
            self._samples.append(
                CvoglSample(
                    query=np.empty(0, dtype=np.float32),  # placeholder, see get()
                    reference=np.empty(0, dtype=np.float32),
                    prompt=s.prompt,
                    gt_box=s.gt_box,
                    oracle_mask=s.oracle_mask,
                    sample_id=s.sample_id,
                    seed=s.seed,
                    meta=s.meta,
                )
            )

    def __len__(self) -> int:
        return len(self._samples)

    def get(self, i: int) -> CvoglSample:
        base = self._samples[i]
        return CvoglSample(
            query=self._q_u8[i].astype(np.float32) / np.float32(255.0),
            reference=self._r_u8[i].astype(np.float32) / np.float32(255.0),
            prompt=base.prompt,
            gt_box=base.gt_box,
            oracle_mask=base.oracle_mask,
            sample_id=base.sample_id,
            seed=base.seed,
            meta=base.meta,
        )

    def __iter__(self):
        return (self.get(i) for i in range(len(self)))


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RECOT_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    """Per-step localization metrics over one split."""

    acc25_per_step: list[float]
    acc50_per_step: list[float]
    mean_iou_per_step: list[float]
    m_star: int  # 1-based step index with the best Acc@0.25 (first on ties)
    sample_count: int
    losses: dict | None = None

    @property
    def headline(self) -> dict:
        i = self.m_star - 1
        return {
            "step": self.m_star,
            "acc25": self.acc25_per_step[i],
            "acc50": self.acc50_per_step[i],
            "mean_iou": self.mean_iou_per_step[i],
        }

    def as_dict(self) -> dict:
        out = {
            "sample_count": self.sample_count,
            "m_star": self.m_star,
            "acc25_per_step": self.acc25_per_step,
            "acc50_per_step": self.acc50_per_step,
            "mean_iou_per_step": self.mean_iou_per_step,
            "headline": self.headline,
        }
        if self.losses is not None:
            out["losses"] = self.losses
        return out


def _eval_one(model, sample, m_eval, cfg: TrainConfig | None):
    with nm.no_grad():
        trace = model.forward(sample, m_eval)
        ious = [iou(step.best_box(), sample.gt_box) for step in trace.steps]
        losses = None
        if cfg is not None:
            b = total_loss(
                trace,
                sample,
                cfg.alpha,
                include_token=cfg.include_token,
                include_sam=cfg.include_sam,
            )
            losses = (b.total, b.det, b.token, b.l_sam)
        return ious, losses


def evaluate(
    model: RecurrentLocalizer,
    samples,
    m_eval: int,
    cfg: TrainConfig | None = None,
) -> EvalReport:
    """Per-step metrics over ``samples``; loss averages when cfg is given."""
    items = list(samples) if not isinstance(samples, SampleStore) else samples
    n = len(items)
    getter = items.get if isinstance(items, SampleStore) else items.__getitem__

    workers = min(_worker_count(), max(n, 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: _eval_one(model, getter(i), m_eval, cfg), range(n)))
    else:
        results = [_eval_one(model, getter(i), m_eval, cfg) for i in range(n)]

    per_step_ious = np.array([r[0] for r in results])  # (n, m)
    acc25 = [float((per_step_ious[:, j] >= 0.25).mean()) for j in range(m_eval)]
    acc50 = [float((per_step_ious[:, j] >= 0.50).mean()) for j in range(m_eval)]
    miou = [float(per_step_ious[:, j].mean()) for j in range(m_eval)]
    m_star = int(np.argmax(acc25)) + 1

    losses = None
    if cfg is not None:
        stacked = np.array([r[1] for r in results])  # (n, 4)
        means = stacked.mean(axis=0)
        losses = {
            "loss_total": float(means[0]),
            "loss_det": float(means[1]),
            "loss_token": float(means[2]),
            "loss_sam": float(means[3]),
        }
    return EvalReport(acc25, acc50, miou, m_star, n, losses)


# -------------------------------------------------------------- checkpoints


_CKPT_FORMAT = 1


def save_checkpoint(
    ckpt_dir: str,
    model: RecurrentLocalizer,
    cfg: TrainConfig,
    *,
    epoch: int,
    rng_state: dict | None = None,
    m_star: int | None = None,
) -> None:
    """Write `manifest.json` + `weights.bin` (LE float32, manifest order)."""
    os.makedirs(ckpt_dir, exist_ok=True)
    params = []
    offset = 0
    blobs = []
    for name, node in model.registry.items():
        arr = node.array.astype("<f4", copy=False)
        params.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "size": arr.size}
        )
        offset += arr.size
        blobs.append(arr.tobytes())
    manifest = {
        "format": _CKPT_FORMAT,
        "dtype": "<f4",
        "params": params,
        "scalar_count": offset,
        "config": cfg.as_dict(),
        "query_size": model.cfg.encoder.query_size,
        "ref_size": model.cfg.encoder.ref_size,
        "epoch": epoch,
        "rng_state": rng_state,
        "m_star": m_star,
    }
    with open(os.path.join(ckpt_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    with open(os.path.join(ckpt_dir, "weights.bin"), "wb") as f:
        f.write(b"".join(blobs))


def load_checkpoint(ckpt_dir: str) -> tuple[RecurrentLocalizer, TrainConfig, dict]:
    """Rebuild the model and restore weights; raises CheckpointError on any
    structural mismatch so callers can map it to a dedicated exit code."""
    man_path = os.path.join(ckpt_dir, "manifest.json")
    bin_path = os.path.join(ckpt_dir, "weights.bin")
    try:
        with open(man_path) as f:
            manifest = json.load(f)
        blob = open(bin_path, "rb").read()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint file missing: {e.filename}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}") from None

    if manifest.get("format") != _CKPT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')}")
    try:
        cfg = TrainConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad config snapshot: {e}") from None

    model = build_model(cfg, manifest["query_size"], manifest["ref_size"])
    want = manifest["scalar_count"]
    if len(blob) != want * 4:
        raise CheckpointError(
            f"weights.bin holds {len(blob)} bytes, manifest expects {want * 4}"
        )
    flat = np.frombuffer(blob, dtype="<f4")

    names = model.registry.names()
    listed = [p["name"] for p in manifest["params"]]
    if listed != names:
        raise CheckpointError(
            "parameter names do not match this build "
            f"(first difference: {next((a, b) for a, b in zip(listed + ['<end>'], names + ['<end>']) if a != b)})"
        )
    for p in manifest["params"]:
        node = model.registry[p["name"]]
        if list(node.shape) != p["shape"]:
            raise CheckpointError(
                f"shape mismatch for {p['name']}: file {p['shape']} vs model {list(node.shape)}"
            )
        chunk = flat[p["offset"] : p["offset"] + p["size"]]
        node.value.array = np.ascontiguousarray(
            chunk.reshape(p["shape"]).astype(np.float32)
        )

    extras = {
        "epoch": manifest.get("epoch"),
        "rng_state": manifest.get("rng_state"),
        "m_star": manifest.get("m_star"),
        "query_size": manifest["query_size"],
        "ref_size": manifest["ref_size"],
    }
    return model, cfg, extras


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint_dir: str
    log_path: str | None
    history: list[dict] = field(default_factory=list)
    best: dict | None = None


def _append_log(log_path, record, history):
    history.append(record)
    if log_path is not None:
        with open(log_path, "a") as f:
            f.write(json.dumps(record) + "\n")


def train(
    cfg: TrainConfig,
    data_root: str,
    out_dir: str,
    *,
    max_train_samples: int | None = None,
    max_val_samples: int | None = None,
    quiet: bool = True,
) -> TrainResult:
    """Optimize the full objective; keep the checkpoint with the best val
    Acc@0.25 (at its own best step) and an ndjson log of every epoch."""
    manifest = load_manifest(data_root)
    train_store = SampleStore(data_root, "train", manifest)
    val_split = "val" if "val" in manifest.get("splits", {}) else "test"
    val_store = SampleStore(data_root, val_split, manifest)

    n_train = len(train_store) if max_train_samples is None else min(
        len(train_store), max_train_samples
    )
    val_samples = (
        val_store
        if max_val_samples is None
        else [val_store.get(i) for i in range(min(len(val_store), max_val_samples))]
    )

    model = build_model(cfg, manifest["query_size"], manifest["ref_size"])
    opt = AdamW(model.registry, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.ndjson")
    with open(log_path, "w"):
        pass
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    history: list[dict] = []
    best: dict | None = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_train)
        sums = np.zeros(4)
        for start in range(0, n_train, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            seed = 1.0 / len(batch)
            for idx in batch:
                sample = train_store.get(int(idx))
                try:
                    trace = model.forward(sample, cfg.m_train)
                    breakdown = total_loss(
                        trace,
                        sample,
                        cfg.alpha,
                        include_token=cfg.include_token,
                        include_sam=cfg.include_sam,
                    )
                    if not math.isfinite(breakdown.total):
                        raise nm.NonFiniteError(f"loss={breakdown.total}")
                    nm.backward(breakdown.node, seed=seed)
                except nm.NonFiniteError as e:
                    raise TrainAbortError(
                        f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}, "
                        f"sample {sample.sample_id}: {e}"
                    ) from None
                sums += (breakdown.total, breakdown.det, breakdown.token, breakdown.l_sam)
            clip_global_norm(model.registry, 1.0)
            opt.step()
            model.registry.zero_grad()

        means = [float(v) for v in sums / n_train]
        _append_log(
            log_path,
            {
                "epoch": epoch,
                "split": "train",
                "loss_total": means[0],
                "loss_det": means[1],
                "loss_token": means[2],
                "loss_sam": means[3],
                "acc25_per_step": None,
                "acc50_per_step": None,
            },
            history,
        )

        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            try:
                report = evaluate(model, val_samples, cfg.m_train, cfg)
            except nm.NonFiniteError as e:
                raise TrainAbortError(
                    f"non-finite values in the validation pass after epoch {epoch}: {e}"
                ) from None
            _append_log(
                log_path,
                {
                    "epoch": epoch,
                    "split": val_split,
                    **report.losses,
                    "acc25_per_step": report.acc25_per_step,
                    "acc50_per_step": report.acc50_per_step,
                },
                history,
            )
            score = report.headline["acc25"]
            if best is None or score > best["acc25"]:
                best = {"epoch": epoch, "acc25": score, "m_star": report.m_star}
                save_checkpoint(
                    ckpt_dir,
                    model,
                    cfg,
                    epoch=epoch,
                    rng_state=rng.bit_generator.state,
                    m_star=report.m_star,
                )
        if not quiet:
            print(f"epoch {epoch}: train loss {means[0]:.4f}")

    return TrainResult(checkpoint_dir=ckpt_dir, log_path=log_path, history=history, best=best)


# ---------------------------------------------------------------- ablations


ABLATION_VARIANTS = {
    "full": {},
    "no_rfem": {"no_rfem": True},
    "no_M": {"no_gate": True},
    "no_l_sam": {"include_sam": False},
    "no_l_token": {"include_token": False},
    "replace_flr_with_fhr": {"replace_flr_with_fhr": True},
    "replace_fhr_with_flr": {"replace_fhr_with_flr": True},
}


def ablate(
    cfg: TrainConfig,
    data_root: str,
    out_dir: str,
    variants: list[str] | None = None,
    *,
    eval_split: str = "test",
    max_train_samples: int | None = None,
    max_val_samples: int | None = None,
) -> list[dict]:
    """Train and evaluate the full model plus one-switch variants.

    All runs share the same seed and budget; rows come back in request order
    with the full model first.
    """
    names = ["full"] + [v for v in (variants or []) if v != "full"]
    for name in names:
        if name not in ABLATION_VARIANTS:
            raise ValueError(
                f"unknown ablation {name!r}; expected one of {sorted(ABLATION_VARIANTS)}"
            )

    manifest = load_manifest(data_root)
    split = eval_split if eval_split in manifest.get("splits", {}) else "val"
    rows = []
    for name in names:
        variant_cfg = replace(cfg, **ABLATION_VARIANTS[name])
        run_dir = os.path.join(out_dir, name)
        result = train(
            variant_cfg,
            data_root,
            run_dir,
            max_train_samples=max_train_samples,
            max_val_samples=max_val_samples,
        )
        model, _, extras = load_checkpoint(result.checkpoint_dir)
        store = SampleStore(data_root, split, manifest)
        samples = (
            store
            if max_val_samples is None
            else [store.get(i) for i in range(min(len(store), max_val_samples))]
        )
        report = evaluate(model, samples, cfg.m_train)
        rows.append(
            {
                "variant": name,
                "split": split,
                "m_star": report.m_star,
                "acc25": report.headline["acc25"],
                "acc50": report.headline["acc50"],
                "acc25_per_step": report.acc25_per_step,
                "acc50_per_step": report.acc50_per_step,
                "best_epoch": extras["epoch"],
            }
        )
    return rows
