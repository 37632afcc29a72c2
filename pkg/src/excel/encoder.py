"""Minimal 12-layer pre-norm ViT with pluggable attention policies.

The encoder is deliberately small and bit-reproducible: float32 weights,
float64 accumulation, no dropout, no batch dimension. Every forward pass
captures the per-layer tensors (normalized layer inputs, per-head q/k/v,
attention maps) that the calibration stages consume.

Shapes: token matrices are (T, D) with the CLS token at row 0 and
T = h*w + 1 grid tokens; per-head tensors are (H, T, D_s) with
D_s = D // H. Final patch features are returned as (D, h, w) with CLS
dropped.

Attention policies:
  VanillaQK             softmax(q k^T / sqrt(D_s)) at every layer.
  ValueValueLast        v-v self-similarity attention in the last layer only.
  IntraCorrelation      w1*SA(q,q) + w2*SA(k,k) + w3*SA(v,v) in the last
                        `layers` blocks; the mix replaces q-k attention.
  IntraCorrelationBiased  IntraCorrelation plus softmax(R) added row-wise,
                        where R is a (hw x hw) token-relation matrix. R is
                        embedded into the (T x T) map with zero bias on the
                        CLS row/column, so grid rows sum to sum(w) + 1 and
                        the CLS row to sum(w).
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .blobio import TensorFile, load_tensors, save_tensors
from .errors import DataError, ShapeError

LAYER_COUNT = 12
LN_EPS = 1e-5


@dataclass
class LayerWeights:
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    q_w: np.ndarray
    q_b: np.ndarray
    k_w: np.ndarray
    k_b: np.ndarray
    v_w: np.ndarray
    v_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray


@dataclass
class EncoderWeights:
    dim: int
    heads: int
    patch_size: int
    grid: tuple[int, int]
    mlp_dim: int
    patch_w: np.ndarray  # (D, 3 * patch^2)
    patch_b: np.ndarray  # (D,)
    cls_token: np.ndarray  # (D,)
    pos_embed: np.ndarray  # (h*w + 1, D)
    layers: list[LayerWeights]
    final_scale: np.ndarray
    final_shift: np.ndarray

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def tokens(self) -> int:
        return self.grid[0] * self.grid[1] + 1

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "patch_embed.w": self.patch_w,
            "patch_embed.b": self.patch_b,
            "cls_token": self.cls_token,
            "pos_embed": self.pos_embed,
        }
        for i, lw in enumerate(self.layers):
            p = f"layers.{i:02d}."
            out[p + "ln1.scale"] = lw.ln1_scale
            out[p + "ln1.shift"] = lw.ln1_shift
            out[p + "attn.q.w"] = lw.q_w
            out[p + "attn.q.b"] = lw.q_b
            out[p + "attn.k.w"] = lw.k_w
            out[p + "attn.k.b"] = lw.k_b
            out[p + "attn.v.w"] = lw.v_w
            out[p + "attn.v.b"] = lw.v_b
            out[p + "attn.out.w"] = lw.out_w
            out[p + "attn.out.b"] = lw.out_b
            out[p + "ln2.scale"] = lw.ln2_scale
            out[p + "ln2.shift"] = lw.ln2_shift
            out[p + "mlp.fc.w"] = lw.fc_w
            out[p + "mlp.fc.b"] = lw.fc_b
            out[p + "mlp.proj.w"] = lw.proj_w
            out[p + "mlp.proj.b"] = lw.proj_b
        out["ln_final.scale"] = self.final_scale
        out["ln_final.shift"] = self.final_shift
        return out

    def meta(self) -> dict:
        return {
            "dim": self.dim,
            "heads": self.heads,
            "layers": LAYER_COUNT,
            "patch_size": self.patch_size,
            "grid": list(self.grid),
            "mlp_dim": self.mlp_dim,
        }


def save_weights(path, weights: EncoderWeights, provenance=None) -> Path:
    return save_tensors(path, weights.to_tensors(), meta=weights.meta(), provenance=provenance)


def load_weights(manifest_path) -> EncoderWeights:
    """Load and shape-check encoder weights from a manifest + blob pair."""
    tf = load_tensors(manifest_path)
    return weights_from_tensorfile(tf)


def weights_from_tensorfile(tf: TensorFile) -> EncoderWeights:
    meta = tf.meta
    for key in ("dim", "heads", "layers", "patch_size", "grid", "mlp_dim"):
        if key not in meta:
            raise DataError(f"encoder manifest {tf.path} lacks meta key '{key}'")
    dim = int(meta["dim"])
    heads = int(meta["heads"])
    depth = int(meta["layers"])
    patch = int(meta["patch_size"])
    grid = (int(meta["grid"][0]), int(meta["grid"][1]))
    mlp_dim = int(meta["mlp_dim"])
    if depth != LAYER_COUNT:
        raise DataError(f"encoder depth must be {LAYER_COUNT}, manifest declares {depth}")
    if dim % heads != 0:
        raise DataError(f"dim {dim} not divisible by heads {heads}")
    tokens = grid[0] * grid[1] + 1
    layers = []
    for i in range(LAYER_COUNT):
        p = f"layers.{i:02d}."
        layers.append(
            LayerWeights(
                ln1_scale=tf.require(p + "ln1.scale", (dim,)),
                ln1_shift=tf.require(p + "ln1.shift", (dim,)),
                q_w=tf.require(p + "attn.q.w", (dim, dim)),
                q_b=tf.require(p + "attn.q.b", (dim,)),
                k_w=tf.require(p + "attn.k.w", (dim, dim)),
                k_b=tf.require(p + "attn.k.b", (dim,)),
                v_w=tf.require(p + "attn.v.w", (dim, dim)),
                v_b=tf.require(p + "attn.v.b", (dim,)),
                out_w=tf.require(p + "attn.out.w", (dim, dim)),
                out_b=tf.require(p + "attn.out.b", (dim,)),
                ln2_scale=tf.require(p + "ln2.scale", (dim,)),
                ln2_shift=tf.require(p + "ln2.shift", (dim,)),
                fc_w=tf.require(p + "mlp.fc.w", (mlp_dim, dim)),
                fc_b=tf.require(p + "mlp.fc.b", (mlp_dim,)),
                proj_w=tf.require(p + "mlp.proj.w", (dim, mlp_dim)),
                proj_b=tf.require(p + "mlp.proj.b", (dim,)),
            )
        )
    return EncoderWeights(
        dim=dim,
        heads=heads,
        patch_size=patch,
        grid=grid,
        mlp_dim=mlp_dim,
        patch_w=tf.require("patch_embed.w", (dim, 3 * patch * patch)),
        patch_b=tf.require("patch_embed.b", (dim,)),
        cls_token=tf.require("cls_token", (dim,)),
        pos_embed=tf.require("pos_embed", (tokens, dim)),
        layers=layers,
        final_scale=tf.require("ln_final.scale", (dim,)),
        final_shift=tf.require("ln_final.shift", (dim,)),
    )


# --------------------------------------------------------------------------
# attention policies


@dataclass(frozen=True)
class VanillaQK:
    name = "vanilla"

    def modified_layers(self) -> set[int]:
        return set()


@dataclass(frozen=True)
class ValueValueLast:
    name = "value_value"

    def modified_layers(self) -> set[int]:
        return {LAYER_COUNT - 1}


@dataclass(frozen=True)
class IntraCorrelation:
    layers: int = 5
    weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    name = "intra_correlation"

    def __post_init__(self):
        if not 0 <= self.layers <= LAYER_COUNT:
            raise DataError(f"calibrated layer count {self.layers} outside 0..{LAYER_COUNT}")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise DataError(f"correlation weights must be 3 non-negative values, got {self.weights}")

    def modified_layers(self) -> set[int]:
        return set(range(LAYER_COUNT - self.layers, LAYER_COUNT))


@dataclass(frozen=True)
class IntraCorrelationBiased(IntraCorrelation):
    relation: np.ndarray = None  # (hw, hw) raw-masked, or (T, T) pre-embedded
    name = "intra_correlation_biased"

    def __post_init__(self):
        super().__post_init__()
        if self.relation is None:
            raise DataError("biased policy requires a relation matrix")


AttentionPolicy = VanillaQK | ValueValueLast | IntraCorrelation | IntraCorrelationBiased


def expected_row_sums(policy: AttentionPolicy, layer: int, tokens: int) -> np.ndarray:
    """Declared per-row attention sums at `layer` for an input of `tokens` rows."""
    if layer not in policy.modified_layers():
        return np.full(tokens, 1.0)
    if isinstance(policy, IntraCorrelationBiased):
        total = float(sum(policy.weights))
        sums = np.full(tokens, total + 1.0)
        if policy.relation.shape[0] == tokens - 1:
            sums[0] = total  # CLS row carries no relation bias
        return sums
    if isinstance(policy, IntraCorrelation):
        return np.full(tokens, float(sum(policy.weights)))
    return np.full(tokens, 1.0)


# --------------------------------------------------------------------------
# forward pass


@dataclass
class LayerTrace:
    """Per-layer capture of one encoder forward pass."""

    grid: tuple[int, int]
    features: list[np.ndarray]  # 12 x (T, D): normalized input projected to q/k/v
    queries: list[np.ndarray]  # 12 x (H, T, D_s)
    keys: list[np.ndarray]
    values: list[np.ndarray]
    attentions: list[np.ndarray]  # 12 x (H, T, T)
    tokens: np.ndarray  # (T, D) after the final norm
    patch_features: np.ndarray  # (D, h, w), CLS dropped

    @property
    def patch_count(self) -> int:
        return self.grid[0] * self.grid[1]


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = x64.var(axis=1, keepdims=True)
    normed = (x64 - mu) / np.sqrt(var + LN_EPS)
    return (normed * scale.astype(np.float64) + shift.astype(np.float64)).astype(np.float32)


def gelu(x: np.ndarray) -> np.ndarray:
    # sigmoid-weighted linear unit, the usual cheap GELU stand-in
    return (x.astype(np.float64) * nm.sigmoid(1.702 * x).astype(np.float64)).astype(np.float32)


def patchify(image: np.ndarray, weights: EncoderWeights) -> np.ndarray:
    """Image (3, H, W) -> (h*w + 1, D) tokens: CLS, then row-major patches, plus
    positional embeddings.

    Patch vectors flatten as (channel, row, col) in C order. The positional
    table is sized for the manifest grid, so image dimensions must match it.
    """
    image = nm.as_f32(image, "image")
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"image must be (3, H, W), got {image.shape}")
    p = weights.patch_size
    _, h_img, w_img = image.shape
    if h_img % p or w_img % p:
        raise DataError(f"image dims {h_img}x{w_img} not divisible by patch size {p}")
    gh, gw = h_img // p, w_img // p
    if (gh, gw) != weights.grid:
        raise DataError(
            f"image grid {gh}x{gw} does not match positional embedding grid "
            f"{weights.grid[0]}x{weights.grid[1]}"
        )
    patches = (
        image.reshape(3, gh, p, gw, p)
        .transpose(1, 3, 0, 2, 4)
        .reshape(gh * gw, 3 * p * p)
    )
    embedded = nm.matmul(patches, nm.transpose(weights.patch_w)) + weights.patch_b
    tokens = np.concatenate([weights.cls_token[None, :], embedded], axis=0)
    return (tokens + weights.pos_embed).astype(np.float32)


def _scaled_self_logits(o: np.ndarray, head_dim: int) -> np.ndarray:
    logits = nm.matmul(o, nm.transpose(o))
    return (logits.astype(np.float64) / math.sqrt(head_dim)).astype(np.float32)


def self_attention(o: np.ndarray, head_dim: int) -> np.ndarray:
    """softmax(o o^T / sqrt(head_dim)) for one head's (T, D_s) tokens."""
    return nm.softmax_rows(_scaled_self_logits(o, head_dim))


def relation_bias(relation: np.ndarray, tokens: int) -> np.ndarray:
    """Row-softmaxed relation embedded into the (T, T) attention map.

    A grid-sized (T-1, T-1) relation lands on the patch block with zero
    bias on the CLS row and column; a full (T, T) relation is softmaxed
    as given.
    """
    relation = nm.as_f32(relation, "relation matrix", allow_neg_inf=True)
    if relation.shape == (tokens, tokens):
        return nm.softmax_rows(relation)
    if relation.shape == (tokens - 1, tokens - 1):
        bias = np.zeros((tokens, tokens), dtype=np.float32)
        bias[1:, 1:] = nm.softmax_rows(relation)
        return bias
    raise ShapeError(
        f"relation matrix shape {relation.shape} matches neither ({tokens}, {tokens}) "
        f"nor ({tokens - 1}, {tokens - 1})"
    )


def _head_attention(
    policy: AttentionPolicy,
    layer: int,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    head_dim: int,
    bias: np.ndarray | None,
) -> np.ndarray:
    if layer not in policy.modified_layers():
        logits = nm.matmul(q, nm.transpose(k))
        logits = (logits.astype(np.float64) / math.sqrt(head_dim)).astype(np.float32)
        return nm.softmax_rows(logits)
    if isinstance(policy, ValueValueLast):
        return self_attention(v, head_dim)
    w1, w2, w3 = policy.weights
    attn = (
        w1 * self_attention(q, head_dim).astype(np.float64)
        + w2 * self_attention(k, head_dim).astype(np.float64)
        + w3 * self_attention(v, head_dim).astype(np.float64)
    ).astype(np.float32)
    if bias is not None:
        attn = (attn.astype(np.float64) + bias.astype(np.float64)).astype(np.float32)
    return attn


def encode(image: np.ndarray, weights: EncoderWeights, policy: AttentionPolicy) -> LayerTrace:
    """Run the full encoder, substituting the policy's attention map in its
    modified layers, and capture the per-layer tensors."""
    tokens = patchify(image, weights)
    t_count, dim = tokens.shape
    heads, d_s = weights.heads, weights.head_dim
    bias = None
    if isinstance(policy, IntraCorrelationBiased):
        bias = relation_bias(policy.relation, t_count)
    features, qs, ks, vs, attns = [], [], [], [], []
    x = tokens
    for layer, lw in enumerate(weights.layers):
        h = layer_norm(x, lw.ln1_scale, lw.ln1_shift)
        q = nm.matmul(h, nm.transpose(lw.q_w)) + lw.q_b
        k = nm.matmul(h, nm.transpose(lw.k_w)) + lw.k_b
        v = nm.matmul(h, nm.transpose(lw.v_w)) + lw.v_b
        q_h = np.ascontiguousarray(q.reshape(t_count, heads, d_s).transpose(1, 0, 2))
        k_h = np.ascontiguousarray(k.reshape(t_count, heads, d_s).transpose(1, 0, 2))
        v_h = np.ascontiguousarray(v.reshape(t_count, heads, d_s).transpose(1, 0, 2))
        attn = np.empty((heads, t_count, t_count), dtype=np.float32)
        ctx = np.empty((heads, t_count, d_s), dtype=np.float32)
        for head in range(heads):
            a = _head_attention(policy, layer, q_h[head], k_h[head], v_h[head], d_s, bias)
            attn[head] = a
            ctx[head] = nm.matmul(a, v_h[head])
        merged = np.ascontiguousarray(ctx.transpose(1, 0, 2)).reshape(t_count, dim)
        attn_out = nm.matmul(merged, nm.transpose(lw.out_w)) + lw.out_b
        x = (x.astype(np.float64) + attn_out.astype(np.float64)).astype(np.float32)
        h2 = layer_norm(x, lw.ln2_scale, lw.ln2_shift)
        hidden = gelu(nm.matmul(h2, nm.transpose(lw.fc_w)) + lw.fc_b)
        mlp_out = nm.matmul(hidden, nm.transpose(lw.proj_w)) + lw.proj_b
        x = (x.astype(np.float64) + mlp_out.astype(np.float64)).astype(np.float32)
        features.append(h)
        qs.append(q_h)
        ks.append(k_h)
        vs.append(v_h)
        attns.append(attn)
    final = layer_norm(x, weights.final_scale, weights.final_shift)
    gh, gw = weights.grid
    patch_features = np.ascontiguousarray(final[1:].T).reshape(dim, gh, gw)
    return LayerTrace(
        grid=weights.grid,
        features=features,
        queries=qs,
        keys=ks,
        values=vs,
        attentions=attns,
        tokens=final,
        patch_features=patch_features,
    )
