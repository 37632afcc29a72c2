"""Segmentation head, combined objective, AdamW loop, metrics and reports.

The segmentation head is a per-patch affine classifier over the twelve
concatenated frozen layer features (12*D inputs, C+1 logits including
background). Training touches only the adapter and this head; encoder
weights are never written.
"""

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .blobio import load_tensors, save_tensors
from .dynamic_calibration import (
    AdapterParams,
    adapter_diversity_loss,
    build_affinity_batch,
    diversity_loss_gradient,
    dynamic_cam,
    init_adapter,
)
from .encoder import LAYER_COUNT, EncoderWeights, LayerTrace, encode
from .errors import DataError, NumericError, UsageError
from .numerics import Rng
from .static_calibration import IGNORE_LABEL, run_static_pipeline
from .text_enrichment import TextRepresentation


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    gamma: float = 0.1
    iterations: int = 500
    batch_size: int = 4
    seed: int = 0
    tau_fg: float = 0.55
    tau_bg: float = 0.25
    alpha: float = 3.0
    beta: float = 1.0
    calib_layers: int = 5
    calib_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    topk: int = 8
    lam: float = 0.5
    clusters: int = 16
    d_proj: int = 64
    d_dyn: int = 256
    fusion_kernel: int = 1
    adapter_init_sigma: float = 0.02
    pair_sample_limit: int = 4096
    ms_refresh: str = "epoch"  # "epoch" or "once"
    checkpoint_every: int = 0  # 0 = final checkpoint only
    divergence_threshold: float = 1000.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        checks = [
            (self.lr > 0, f"lr must be positive, got {self.lr}"),
            (self.weight_decay >= 0, f"weight decay must be >= 0, got {self.weight_decay}"),
            (self.gamma >= 0, f"gamma must be >= 0, got {self.gamma}"),
            (self.iterations >= 0, f"iterations must be >= 0, got {self.iterations}"),
            (self.batch_size >= 1, f"batch size must be >= 1, got {self.batch_size}"),
            (
                0 <= self.tau_bg < self.tau_fg <= 1,
                f"thresholds must satisfy 0 <= tau_bg < tau_fg <= 1, got bg={self.tau_bg} fg={self.tau_fg}",
            ),
            (self.alpha > 0, f"alpha must be positive, got {self.alpha}"),
            (0 <= self.calib_layers <= LAYER_COUNT, f"calib_layers outside 0..{LAYER_COUNT}"),
            (
                len(self.calib_weights) == 3 and all(w >= 0 for w in self.calib_weights),
                f"calib_weights must be 3 non-negative values, got {self.calib_weights}",
            ),
            (self.topk >= 1, f"topk must be >= 1, got {self.topk}"),
            (self.lam >= 0, f"lambda must be >= 0, got {self.lam}"),
            (self.clusters >= 1, f"clusters must be >= 1, got {self.clusters}"),
            (self.d_proj >= 1 and self.d_dyn >= 1, "adapter dims must be >= 1"),
            (self.fusion_kernel in (1, 3), f"fusion kernel must be 1 or 3, got {self.fusion_kernel}"),
            (self.adapter_init_sigma >= 0, "adapter init sigma must be >= 0"),
            (self.pair_sample_limit >= 1, "pair sample limit must be >= 1"),
            (self.ms_refresh in ("epoch", "once"), f"ms_refresh must be 'epoch' or 'once', got {self.ms_refresh!r}"),
            (self.checkpoint_every >= 0, "checkpoint_every must be >= 0"),
            (self.divergence_threshold > 0, "divergence threshold must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise UsageError(msg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["calib_weights"] = list(self.calib_weights)
        return d


# --------------------------------------------------------------------------
# segmentation head


@dataclass
class SegHead:
    w: np.ndarray  # (num_labels, 12*D)
    b: np.ndarray  # (num_labels,)

    @property
    def num_labels(self) -> int:
        return self.b.shape[0]


def init_seg_head(rng: Rng, dim: int, num_labels: int, sigma: float = 0.02) -> SegHead:
    gen = rng.generator()
    return SegHead(
        w=(sigma * gen.standard_normal((num_labels, LAYER_COUNT * dim))).astype(np.float32),
        b=np.zeros(num_labels, dtype=np.float32),
    )


def _stacked_patch_features(trace: LayerTrace) -> np.ndarray:
    """(hw, 12*D) float64: per-layer features concatenated channel-wise."""
    return np.concatenate([f[1:].astype(np.float64) for f in trace.features], axis=1)


def seg_logits(trace: LayerTrace, head: SegHead) -> np.ndarray:
    """Per-patch logits (num_labels, h, w)."""
    x = _stacked_patch_features(trace)
    logits = x @ head.w.astype(np.float64).T + head.b.astype(np.float64)
    gh, gw = trace.grid
    return np.ascontiguousarray(logits.astype(np.float32).T).reshape(head.num_labels, gh, gw)


def seg_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over non-ignored pixels."""
    logits = nm.as_f32(logits, "logits")
    labels = np.asarray(labels)
    if logits.ndim != 3 or logits.shape[1:] != labels.shape:
        raise DataError(f"logit shape {logits.shape} does not match labels {labels.shape}")
    flat_logits = logits.reshape(logits.shape[0], -1).T.astype(np.float64)
    flat_labels = labels.reshape(-1).astype(np.int64)
    valid = flat_labels != IGNORE_LABEL
    if not valid.any():
        raise NumericError("segmentation loss undefined: every pixel is ignored")
    if flat_labels[valid].max(initial=0) >= logits.shape[0]:
        raise DataError(
            f"label value {int(flat_labels[valid].max())} outside 0..{logits.shape[0] - 1}"
        )
    z = flat_logits[valid]
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = log_probs[np.arange(z.shape[0]), flat_labels[valid]]
    return float(-picked.mean())


def seg_loss_gradient(trace: LayerTrace, head: SegHead, labels: np.ndarray):
    """(loss, {"w": gw, "b": gb}) for the affine head under cross-entropy."""
    x = _stacked_patch_features(trace)
    logits = x @ head.w.astype(np.float64).T + head.b.astype(np.float64)
    flat_labels = np.asarray(labels).reshape(-1).astype(np.int64)
    valid = flat_labels != IGNORE_LABEL
    if not valid.any():
        raise NumericError("segmentation loss undefined: every pixel is ignored")
    z = logits[valid] - logits[valid].max(axis=1, keepdims=True)
    exp = np.exp(z)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = int(valid.sum())
    picked = np.log(probs[np.arange(n), flat_labels[valid]])
    loss = float(-picked.mean())
    g_logits = probs.copy()
    g_logits[np.arange(n), flat_labels[valid]] -= 1.0
    g_logits /= n
    return loss, {"w": g_logits.T @ x[valid], "b": g_logits.sum(axis=0)}


def total_loss(seg: float, div: float, gamma: float) -> float:
    """Combined objective seg + gamma * div."""
    out = float(seg) + float(gamma) * float(div)
    if not math.isfinite(out):
        raise NumericError(f"total loss is not finite: seg={seg} div={div}")
    return out


# --------------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p, dtype=np.float32) for k, p in params.items()},
        v={k: np.zeros_like(p, dtype=np.float32) for k, p in params.items()},
        step=0,
    )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One decoupled-weight-decay Adam update; returns new params and state.

    Decay multiplies weights by (1 - lr*wd) and skips biases (names ending
    '.b'). Moments are bias-corrected; math runs in float64, storage stays
    float32.
    """
    lr = float(config.lr)
    wd = float(config.weight_decay)
    b1 = float(getattr(config, "adam_beta1", 0.9))
    b2 = float(getattr(config, "adam_beta2", 0.999))
    eps = float(getattr(config, "adam_eps", 1e-8))
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        if name not in grads:
            raise DataError(f"no gradient supplied for parameter '{name}'")
        p = params[name].astype(np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} != param shape {p.shape} for '{name}'")
        m = state.m[name].astype(np.float64) * b1 + (1 - b1) * g
        v = state.v[name].astype(np.float64) * b2 + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        decay = 0.0 if name.endswith(".b") else wd
        updated = p * (1 - lr * decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(updated).all():
            raise NumericError(f"non-finite update for parameter '{name}'")
        new_params[name] = updated.astype(np.float32)
        new_m[name] = m.astype(np.float32)
        new_v[name] = v.astype(np.float32)
    return new_params, AdamState(m=new_m, v=new_v, step=t)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, adapter: AdapterParams, head: SegHead, meta: dict, state: AdamState | None = None, provenance=None) -> Path:
    tensors = {f"adapter.{k}": v for k, v in adapter.to_dict().items()}
    tensors["seghead.w"] = head.w
    tensors["seghead.b"] = head.b
    full_meta = dict(meta)
    full_meta.update(
        {
            "alpha": adapter.alpha,
            "beta": adapter.beta,
            "fusion_kernel": adapter.fusion_kernel,
        }
    )
    path = Path(path)
    out = save_tensors(path, tensors, meta=full_meta, provenance=provenance)
    if state is not None:
        opt_tensors = {}
        for name in sorted(state.m):
            opt_tensors[f"m.{name}"] = state.m[name]
            opt_tensors[f"v.{name}"] = state.v[name]
        save_tensors(
            path.with_name(path.stem + ".opt.json"),
            opt_tensors,
            meta={"step": state.step},
            provenance=provenance,
        )
    return out


def load_checkpoint(path):
    """Returns (adapter, head, meta, state-or-None)."""
    tf = load_tensors(path)
    meta = tf.meta
    adapter = AdapterParams(
        deltas_w=[tf.require(f"adapter.delta.{i:02d}.w") for i in range(LAYER_COUNT)],
        deltas_b=[tf.require(f"adapter.delta.{i:02d}.b") for i in range(LAYER_COUNT)],
        fusion_w=tf.require("adapter.fusion.w"),
        fusion_b=tf.require("adapter.fusion.b"),
        alpha=float(meta["alpha"]),
        beta=float(meta["beta"]),
        fusion_kernel=int(meta["fusion_kernel"]),
    )
    head = SegHead(w=tf.require("seghead.w"), b=tf.require("seghead.b"))
    state = None
    opt_path = Path(path).with_name(Path(path).stem + ".opt.json")
    if opt_path.exists():
        otf = load_tensors(opt_path)
        names = sorted({n[2:] for n in otf.names() if n.startswith("m.")})
        state = AdamState(
            m={n: otf.require(f"m.{n}") for n in names},
            v={n: otf.require(f"v.{n}") for n in names},
            step=int(otf.meta["step"]),
        )
    return adapter, head, meta, state


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    adapter: AdapterParams
    head: SegHead
    curve: list[tuple[int, float, float, float]]
    state: AdamState
    checkpoint_paths: list[Path] = field(default_factory=list)


def _split_params(params: dict, adapter: AdapterParams, head: SegHead):
    adapter_new = adapter.replace(
        {k[len("adapter.") :]: v for k, v in params.items() if k.startswith("adapter.")}
    )
    head_new = SegHead(w=params["seghead.w"], b=params["seghead.b"])
    return adapter_new, head_new


def _static_results(dataset, weights, bank, config):
    return {
        rec.name: run_static_pipeline(rec.image, weights, bank, rec.labels, config)
        for rec in dataset.images
    }


def _batch_records(dataset, config, iteration):
    n = len(dataset.images)
    return [
        dataset.images[(iteration * config.batch_size + j) % n]
        for j in range(config.batch_size)
    ]


def _iteration_losses(records, static_cache, weights, bank, config, adapter, head, rng):
    """Mean losses and summed gradients for one iteration's batch."""
    seg_sum, div_sum = 0.0, 0.0
    grad_acc: dict[str, np.ndarray] = {}
    for j, rec in enumerate(records):
        sres = static_cache[rec.name]
        batch = build_affinity_batch(
            sres.labels, sample_limit=config.pair_sample_limit, rng=rng.child(f"pairs.{j}")
        )
        div, div_grads = diversity_loss_gradient(sres.trace, adapter, batch)
        dyn = dynamic_cam(
            rec.image, weights, adapter, bank, rec.labels, config, static_trace=sres.trace
        )
        seg, seg_grads = seg_loss_gradient(sres.trace, head, dyn.labels)
        seg_sum += seg
        div_sum += div
        for k, g in div_grads.items():
            key = f"adapter.{k}"
            grad_acc[key] = grad_acc.get(key, 0.0) + config.gamma * g
        grad_acc["seghead.w"] = grad_acc.get("seghead.w", 0.0) + seg_grads["w"]
        grad_acc["seghead.b"] = grad_acc.get("seghead.b", 0.0) + seg_grads["b"]
    n = len(records)
    grads = {k: v / n for k, v in grad_acc.items()}
    return seg_sum / n, div_sum / n, grads


def train_loop(dataset, weights: EncoderWeights, bank: TextRepresentation, config: TrainConfig, out_dir=None, provenance=None) -> TrainResult:
    """Seeded single-writer optimization of the adapter and segmentation head.

    Per iteration: static pseudo labels (cached, refreshed per epoch),
    adapter forward and diversity loss, dynamic pseudo labels, seg loss on
    them, one AdamW step on the mean batch gradients. Emits a loss-curve
    CSV and checkpoints when `out_dir` is given.
    """
    config.validate()
    rng = Rng(config.seed)
    num_labels = len(bank.class_names) + 1
    adapter = init_adapter(
        rng.child("adapter"),
        weights.dim,
        d_proj=config.d_proj,
        d_dyn=config.d_dyn,
        fusion_kernel=config.fusion_kernel,
        sigma=config.adapter_init_sigma,
        alpha=config.alpha,
        beta=config.beta,
    )
    head = init_seg_head(rng.child("seghead"), weights.dim, num_labels, config.adapter_init_sigma)
    params = {f"adapter.{k}": v for k, v in adapter.to_dict().items()}
    params["seghead.w"] = head.w
    params["seghead.b"] = head.b
    state = init_adam_state(params)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    iters_per_epoch = max(1, math.ceil(len(dataset.images) / config.batch_size))
    static_cache = None
    curve: list[tuple[int, float, float, float]] = []
    ckpt_paths: list[Path] = []
    meta = {"train_config": config.to_dict(), "num_labels": num_labels, "dim": weights.dim}

    def maybe_checkpoint(iteration):
        if out_dir and config.checkpoint_every and iteration % config.checkpoint_every == 0:
            p = save_checkpoint(
                out_dir / f"checkpoint_{iteration:06d}.json",
                adapter,
                head,
                {**meta, "iteration": iteration},
                state,
                provenance=provenance,
            )
            ckpt_paths.append(p)

    for it in range(config.iterations):
        if static_cache is None or (config.ms_refresh == "epoch" and it % iters_per_epoch == 0 and it > 0):
            static_cache = _static_results(dataset, weights, bank, config)
        maybe_checkpoint(it)
        records = _batch_records(dataset, config, it)
        seg_mean, div_mean, grads = _iteration_losses(
            records, static_cache, weights, bank, config, adapter, head, rng.child(f"it.{it}")
        )
        tot = total_loss(seg_mean, div_mean, config.gamma)
        curve.append((it, seg_mean, div_mean, tot))
        if tot > config.divergence_threshold:
            raise NumericError(
                f"training diverged at iteration {it}: total loss {tot:.3f} "
                f"(seg {seg_mean:.3f}, div {div_mean:.3f})"
            )
        params, state = adamw_step(params, grads, state, config)
        adapter, head = _split_params(params, adapter, head)
    if out_dir:
        final = save_checkpoint(
            out_dir / f"checkpoint_{config.iterations:06d}.json",
            adapter,
            head,
            {**meta, "iteration": config.iterations},
            state,
            provenance=provenance,
        )
        ckpt_paths.append(final)
        write_loss_curve(out_dir / "loss_curve.csv", curve)
    return TrainResult(adapter=adapter, head=head, curve=curve, state=state, checkpoint_paths=ckpt_paths)


def replay_iteration(iteration, dataset, weights, bank, config, adapter, head):
    """Recompute the logged batch losses for `iteration` from checkpointed
    parameters; mirrors the loop's batch selection and static cache."""
    static_cache = _static_results(dataset, weights, bank, config)
    records = _batch_records(dataset, config, iteration)
    rng = Rng(config.seed).child(f"it.{iteration}")
    seg_mean, div_mean, _ = _iteration_losses(
        records, static_cache, weights, bank, config, adapter, head, rng
    )
    return seg_mean, div_mean, total_loss(seg_mean, div_mean, config.gamma)


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "seg", "div", "total"])
        for it, seg, div, tot in curve:
            writer.writerow([it, repr(float(seg)), repr(float(div)), repr(float(tot))])
    return Path(path)


def read_loss_curve(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows.append((int(row[0]), float(row[1]), float(row[2]), float(row[3])))
    return rows


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_class_iou: dict[int, float]
    miou: float
    macro_precision: float
    macro_recall: float
    confusion: np.ndarray  # (L, L+1); last column counts pred-ignore
    classes_evaluated: list[int]

    def to_dict(self) -> dict:
        return {
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "miou": self.miou,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "classes_evaluated": self.classes_evaluated,
            "confusion": self.confusion.astype(int).tolist(),
        }


def evaluate(preds, gts, num_labels: int) -> EvalReport:
    """Confusion-matrix metrics over aligned prediction/ground-truth maps.

    Ignored ground-truth pixels (255) are excluded everywhere. A predicted
    255 matches no class: it can only produce false negatives. IoU, then
    macro precision/recall, are averaged over the classes present in
    ground truth or prediction.
    """
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions vs {len(gts)} ground-truth maps")
    conf = np.zeros((num_labels, num_labels + 1), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
        keep = gt != IGNORE_LABEL
        p = pred[keep].astype(np.int64)
        g = gt[keep].astype(np.int64)
        if g.size and g.max() >= num_labels:
            raise DataError(f"ground-truth label {int(g.max())} outside 0..{num_labels - 1}")
        if p.size and p[p != IGNORE_LABEL].max(initial=0) >= num_labels:
            raise DataError(f"prediction label outside 0..{num_labels - 1}")
        p = np.where(p == IGNORE_LABEL, num_labels, p)
        np.add.at(conf, (g, p), 1)
    gt_present = conf.sum(axis=1) > 0
    pred_present = conf[:, :num_labels].sum(axis=0) > 0
    union = np.nonzero(gt_present | pred_present)[0]
    per_class = {}
    precisions, recalls = [], []
    for c in union:
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        per_class[int(c)] = float(tp / (tp + fp + fn))
        if tp + fp > 0:
            precisions.append(tp / (tp + fp))
        if tp + fn > 0:
            recalls.append(tp / (tp + fn))
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(
        per_class_iou=per_class,
        miou=miou,
        macro_precision=float(np.mean(precisions)) if precisions else 0.0,
        macro_recall=float(np.mean(recalls)) if recalls else 0.0,
        confusion=conf,
        classes_evaluated=[int(c) for c in union],
    )


def report_text(report: EvalReport, class_names=None) -> str:
    lines = ["class                     iou"]
    for cid, iou in sorted(report.per_class_iou.items()):
        name = class_names[cid] if class_names and cid < len(class_names) else str(cid)
        lines.append(f"{name:<22}{iou:>9.4f}")
    lines.append(f"{'mIoU':<22}{report.miou:>9.4f}")
    lines.append(f"{'macro precision':<22}{report.macro_precision:>9.4f}")
    lines.append(f"{'macro recall':<22}{report.macro_recall:>9.4f}")
    return "\n".join(lines) + "\n"


def upsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsample of a token-grid label map."""
    return np.repeat(np.repeat(labels, factor, axis=0), factor, axis=1)


# --------------------------------------------------------------------------
# attention diagnostics


def mean_row_entropy(attention: np.ndarray) -> float:
    """Mean entropy of row-normalized attention over heads and rows."""
    a = attention.astype(np.float64)
    if a.ndim == 2:
        a = a[None]
    rows = a / a.sum(axis=2, keepdims=True)
    live = rows > 0
    terms = np.zeros_like(rows)
    terms[live] = -rows[live] * np.log(rows[live])
    return float(terms.sum(axis=2).mean())


def attn_report(image, weights: EncoderWeights, policies: dict) -> dict:
    """Per policy: mean row entropy of last-layer attention plus the
    token-relation (cosine) matrix of the final patch features."""
    if not policies:
        raise UsageError("attention report needs at least one policy")
    out = {}
    for name, policy in policies.items():
        trace = encode(image, weights, policy)
        dim = trace.patch_features.shape[0]
        flat = trace.patch_features.reshape(dim, -1)
        out[name] = {
            "mean_row_entropy": mean_row_entropy(trace.attentions[-1]),
            "token_relation": nm.cosine_matrix(flat, flat),
        }
    return out
