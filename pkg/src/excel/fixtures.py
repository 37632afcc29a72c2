"""Deterministic desk-scale fixtures: encoder weights, knowledge file, dataset.

Everything derives from one seed through named substreams, so a fixture
tree regenerates byte-for-byte. The toy dataset is colored rectangles and
disks on a textured gray background, placed on the patch grid in
quadrant-sized blocks. Class text embeddings are built by probing the
generated encoder itself: each class's template is the mean calibrated
patch feature over its shape tokens, so patch-text cosine scores separate
the classes by construction; description embeddings are noisy copies of
the template.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .blobio import save_tensors
from .dataset import save_dataset
from .encoder import LAYER_COUNT, EncoderWeights, IntraCorrelation, LayerWeights, encode, save_weights
from .errors import UsageError
from .hashing import config_digest
from .numerics import Rng
from .text_enrichment import TEMPLATE_TEXT

PALETTE = [
    ("red", (220, 30, 30)),
    ("green", (40, 190, 60)),
    ("blue", (40, 80, 220)),
    ("yellow", (230, 200, 30)),
    ("purple", (170, 40, 200)),
    ("teal", (20, 190, 190)),
    ("orange", (240, 130, 30)),
    ("pink", (240, 90, 160)),
]


@dataclass
class FixtureSpec:
    classes: int = 3
    images: int = 32
    image_size: int = 64
    dim: int = 64
    heads: int = 4
    patch_size: int = 16
    mlp_dim: int = 256
    n_descriptions: int = 20
    description_noise: float = 0.35
    weight_sigma: float = 0.02
    calib_layers: int = 5
    calib_gain: float = 16.0

    def validate(self):
        if not 1 <= self.classes <= len(PALETTE):
            raise UsageError(f"classes must be 1..{len(PALETTE)}, got {self.classes}")
        if self.image_size % (2 * self.patch_size):
            raise UsageError(
                f"image size {self.image_size} must be a multiple of two patches "
                f"({2 * self.patch_size})"
            )
        if self.dim % self.heads:
            raise UsageError(f"dim {self.dim} not divisible by heads {self.heads}")

    def class_names(self) -> list[str]:
        return ["background"] + [f"{PALETTE[i][0]}-shape" for i in range(self.classes)]


# --------------------------------------------------------------------------
# encoder weights


def make_encoder_weights(rng: Rng, spec: FixtureSpec) -> EncoderWeights:
    """Gaussian weights (sigma from the fixture parameters) with identity
    out-projections and zero biases.

    Layer-norm scales are 1 except in the last `calib_layers` blocks, where
    they are `calib_gain`: boosted projection norms there make value-space
    self-similarity content-selective (and plain q-k attention sharply
    random), so attention policies actually separate on random weights.
    Early layers stay gentle so patch identity survives to that depth.
    """
    gen = rng.generator()
    d, p = spec.dim, spec.patch_size
    grid = spec.image_size // p
    sigma = spec.weight_sigma

    def g(*shape):
        return (sigma * gen.standard_normal(shape)).astype(np.float32)

    layers = []
    for layer_idx in range(LAYER_COUNT):
        boosted = layer_idx >= LAYER_COUNT - spec.calib_layers
        layers.append(
            LayerWeights(
                ln1_scale=np.full(d, spec.calib_gain if boosted else 1.0, dtype=np.float32),
                ln1_shift=np.zeros(d, dtype=np.float32),
                q_w=g(d, d),
                q_b=np.zeros(d, dtype=np.float32),
                k_w=g(d, d),
                k_b=np.zeros(d, dtype=np.float32),
                v_w=g(d, d),
                v_b=np.zeros(d, dtype=np.float32),
                out_w=np.eye(d, dtype=np.float32),
                out_b=np.zeros(d, dtype=np.float32),
                ln2_scale=np.ones(d, dtype=np.float32),
                ln2_shift=np.zeros(d, dtype=np.float32),
                fc_w=g(spec.mlp_dim, d),
                fc_b=np.zeros(spec.mlp_dim, dtype=np.float32),
                proj_w=g(d, spec.mlp_dim),
                proj_b=np.zeros(d, dtype=np.float32),
            )
        )
    return EncoderWeights(
        dim=d,
        heads=spec.heads,
        patch_size=p,
        grid=(grid, grid),
        mlp_dim=spec.mlp_dim,
        patch_w=g(d, 3 * p * p),
        patch_b=np.zeros(d, dtype=np.float32),
        cls_token=g(d),
        pos_embed=g(grid * grid + 1, d),
        layers=layers,
        final_scale=np.ones(d, dtype=np.float32),
        final_shift=np.zeros(d, dtype=np.float32),
    )


# --------------------------------------------------------------------------
# dataset rendering


def _background(gen, size) -> np.ndarray:
    # dark, noise-dominated: background patches decorrelate from the
    # saturated shape colors once layer norm rescales them
    base = 15 + int(gen.integers(0, 15))
    noise = gen.integers(-10, 11, size=(size, size, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def _paint_rect(rgb, mask, quadrant, color, class_id, size):
    """Fill one image quadrant (a 2x2 patch block) exactly."""
    half = size // 2
    y0 = (quadrant // 2) * half
    x0 = (quadrant % 2) * half
    rgb[y0 : y0 + half, x0 : x0 + half] = color
    mask[y0 : y0 + half, x0 : x0 + half] = class_id


def _paint_disk(rgb, mask, origin_patch, color, class_id, patch_size):
    """Disk inscribed in a 3x3 patch block: its rim tokens are only partly
    covered, which is what gives the trained calibration something to
    recover over the static labels."""
    span = 3 * patch_size
    y0, x0 = origin_patch[0] * patch_size, origin_patch[1] * patch_size
    yy, xx = np.mgrid[0:span, 0:span]
    c = (span - 1) / 2.0
    region = (yy - c) ** 2 + (xx - c) ** 2 <= (span / 2.0) ** 2
    ys, xs = np.nonzero(region)
    rgb[y0 + ys, x0 + xs] = color
    mask[y0 + ys, x0 + xs] = class_id


def render_image(gen, spec: FixtureSpec, class_id, kind, position):
    """One image with a single shape; returns (rgb, mask, labels).

    `position` is a quadrant index for rects and a patch-block origin in
    {0,1}x{0,1} for disks.
    """
    size = spec.image_size
    rgb = _background(gen, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    color = PALETTE[class_id - 1][1]
    if kind == "rect":
        _paint_rect(rgb, mask, position, color, class_id, size)
    else:
        _paint_disk(rgb, mask, position, color, class_id, spec.patch_size)
    return rgb, mask, [class_id]


def render_dataset(rng: Rng, spec: FixtureSpec):
    """Deterministic list of (name, rgb, mask, labels) records.

    Classes rotate so every class appears equally often; even-indexed
    images hold a patch-aligned rectangle, odd-indexed ones a larger disk
    whose rim tokens are mixed.
    """
    gen = rng.generator()
    records = []
    for i in range(spec.images):
        class_id = (i % spec.classes) + 1
        if i % 2 == 0:
            rgb, mask, labels = render_image(gen, spec, class_id, "rect", int(gen.integers(0, 4)))
        else:
            origin = (int(gen.integers(0, 2)), int(gen.integers(0, 2)))
            rgb, mask, labels = render_image(gen, spec, class_id, "disk", origin)
        records.append((f"img_{i:04d}", rgb, mask, labels))
    return records


# --------------------------------------------------------------------------
# knowledge embeddings


def _probe_feature_means(weights, spec: FixtureSpec, probe_gen):
    """Per-class and background mean calibrated patch features, probed from
    rectangle renders across all four quadrant placements."""
    policy = IntraCorrelation(layers=spec.calib_layers)
    p = spec.patch_size
    class_means = {}
    bg_acc = np.zeros(spec.dim, dtype=np.float64)
    bg_count = 0
    for class_id in range(1, spec.classes + 1):
        acc = np.zeros(spec.dim, dtype=np.float64)
        count = 0
        for quadrant in range(4):
            rgb, mask, _ = render_image(probe_gen, spec, class_id, "rect", quadrant)
            image = np.ascontiguousarray(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
            trace = encode(image, weights, policy)
            gh, gw = trace.grid
            token_class = mask.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh, gw, -1)
            inside = (token_class == class_id).all(axis=2).reshape(-1)
            outside = (token_class == 0).all(axis=2).reshape(-1)
            feats = trace.patch_features.reshape(spec.dim, -1).astype(np.float64)
            acc += feats[:, inside].sum(axis=1)
            count += int(inside.sum())
            bg_acc += feats[:, outside].sum(axis=1)
            bg_count += int(outside.sum())
        class_means[class_id] = acc / count
    return class_means, bg_acc / bg_count


def build_knowledge_tensors(rng: Rng, spec: FixtureSpec, weights: EncoderWeights):
    """Templates are background-contrast prototypes (class mean minus
    background mean of the probed calibrated features), so background
    tokens anchor the low end of every class map. Descriptions are noisy
    unit-normalized copies of the template."""
    probe_gen = rng.child("probes").generator()
    noise_gen = rng.child("descriptions").generator()
    class_means, bg_mean = _probe_feature_means(weights, spec, probe_gen)
    tensors = {}
    for c in range(1, spec.classes + 1):
        proto = class_means[c] - bg_mean
        template = proto / np.linalg.norm(proto)
        descs = template[None, :] + spec.description_noise * noise_gen.standard_normal(
            (spec.n_descriptions, spec.dim)
        )
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
        tensors[f"template.{c - 1:02d}"] = template.astype(np.float32)
        tensors[f"descriptions.{c - 1:02d}"] = descs.astype(np.float32)
    return tensors


# --------------------------------------------------------------------------
# top level


def generate_fixtures(seed: int, spec: FixtureSpec, out_dir) -> dict:
    """Write encoder weights, knowledge file and toy dataset under out_dir."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    provenance = {
        "stage": "fixtures",
        "seed": seed,
        "config_hash": config_digest(asdict(spec)),
    }
    weights = make_encoder_weights(rng.child("encoder"), spec)
    weights_path = save_weights(out_dir / "encoder.json", weights, provenance=provenance)
    knowledge = build_knowledge_tensors(rng.child("knowledge"), spec, weights)
    knowledge_path = save_tensors(
        out_dir / "knowledge.json",
        knowledge,
        meta={
            "classes": spec.class_names()[1:],
            "n": spec.n_descriptions,
            "dim": spec.dim,
            "template_text": TEMPLATE_TEXT,
        },
        provenance=provenance,
    )
    records = render_dataset(rng.child("dataset"), spec)
    comment = f"provenance stage=fixtures seed={seed} config={provenance['config_hash']}"
    dataset_dir = save_dataset(out_dir / "dataset", spec.class_names(), records, comment=comment)
    (out_dir / "fixture_spec.json").write_text(
        json.dumps({"spec": asdict(spec), "provenance": provenance}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    return {
        "weights": weights_path,
        "knowledge": knowledge_path,
        "dataset": dataset_dir,
        "spec": out_dir / "fixture_spec.json",
    }
