"""Enriched per-class text embeddings built from a description knowledge base.

The knowledge file carries precomputed embeddings (one template plus n
description vectors per class); no text encoder runs here. Descriptions
are clustered into attribute centroids, each class template hunts its
top-K most similar centroids, and the weighted neighbors are folded back
into the template to form the enriched embedding.

Column conventions follow the math: embeddings, templates, centroids and
enriched vectors are all (D, count) matrices with one item per column,
L2-normalized at ingestion.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .blobio import load_tensors, save_tensors
from .errors import DataError, UsageError
from .numerics import Rng

TEMPLATE_TEXT = "a clean origami of [CLASS]"


@dataclass
class KnowledgeBase:
    embeddings: np.ndarray  # (D, n*C), unit columns, class-major order
    class_index: np.ndarray  # (n*C,) int32 column -> class
    texts: list[str]
    templates: np.ndarray  # (D, C), unit columns
    class_names: list[str]
    n: int
    dim: int

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _normalize_columns(m: np.ndarray, what: str) -> np.ndarray:
    m64 = m.astype(np.float64)
    norms = np.sqrt(np.einsum("di,di->i", m64, m64))
    if norms.min(initial=np.inf) < 1e-12:
        raise DataError(f"zero embedding: column {int(np.argmin(norms))} of {what}")
    return (m64 / norms).astype(np.float32)


def ingest_knowledge(path) -> KnowledgeBase:
    """Load a knowledge file and L2-normalize every embedding column."""
    tf = load_tensors(path)
    meta = tf.meta
    for key in ("classes", "n", "dim"):
        if key not in meta:
            raise DataError(f"knowledge manifest {tf.path} lacks meta key '{key}'")
    class_names = list(meta["classes"])
    n = int(meta["n"])
    dim = int(meta["dim"])
    templates = []
    blocks = []
    class_index = []
    texts = []
    desc_texts = meta.get("description_texts") or {}
    for c, name in enumerate(class_names):
        template = tf.require(f"template.{c:02d}", (dim,))
        desc = tf.require(f"descriptions.{c:02d}")
        if desc.ndim != 2 or desc.shape[1] != dim:
            raise DataError(
                f"descriptions for class '{name}' have shape {desc.shape}, "
                f"expected (n, {dim})"
            )
        if desc.shape[0] != n:
            raise DataError(
                f"ragged description count: class '{name}' has {desc.shape[0]} "
                f"descriptions, expected {n}"
            )
        templates.append(template)
        blocks.append(desc.T)
        class_index.extend([c] * n)
        names = desc_texts.get(str(c), [])
        for i in range(n):
            texts.append(names[i] if i < len(names) else f"{name} description {i}")
    embeddings = _normalize_columns(np.concatenate(blocks, axis=1), "descriptions")
    template_mat = _normalize_columns(np.stack(templates, axis=1), "templates")
    return KnowledgeBase(
        embeddings=embeddings,
        class_index=np.asarray(class_index, dtype=np.int32),
        texts=texts,
        templates=template_mat,
        class_names=class_names,
        n=n,
        dim=dim,
    )


# --------------------------------------------------------------------------
# clustering


@dataclass
class AttributeSpace:
    centroids: np.ndarray  # (D, B), unit columns (normalized after convergence)
    raw_centroids: np.ndarray  # (D, B), member means in embedding space
    assignment: np.ndarray  # (M,) int32 column -> centroid
    inertia: float
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def count(self) -> int:
        return self.centroids.shape[1]


def _kmeans_pp_seed(points: np.ndarray, b: int, gen: np.random.Generator) -> np.ndarray:
    """k-means++ seeding over row-points; returns (b, D) initial centroids."""
    m = points.shape[0]
    chosen = [int(gen.integers(0, m))]
    d2 = np.einsum("ij,ij->i", points - points[chosen[0]], points - points[chosen[0]])
    while len(chosen) < b:
        total = d2.sum()
        if total <= 0:
            remaining = [i for i in range(m) if i not in set(chosen)]
            chosen.append(remaining[0])
        else:
            idx = int(gen.choice(m, p=d2 / total))
            chosen.append(idx)
        diff = points - points[chosen[-1]]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    return points[chosen].copy()


def cluster_attributes(kb: KnowledgeBase, b: int, rng: Rng, max_iters: int = 100) -> AttributeSpace:
    """Lloyd k-means with k-means++ seeding over the knowledge columns.

    The sum-of-squared-distances objective is checked to be non-increasing
    after every iteration; empty clusters are re-seeded at the point
    farthest from its assigned centroid. Centroids are L2-normalized after
    convergence so downstream dot-product scores stay commensurate with
    unit templates.
    """
    m = kb.embeddings.shape[1]
    if not 1 <= b <= m:
        raise UsageError(f"cluster count {b} outside 1..{m}")
    points = kb.embeddings.T.astype(np.float64)  # (M, D)
    gen = rng.generator()
    centroids = _kmeans_pp_seed(points, b, gen)
    assignment = np.full(m, -1, dtype=np.int32)
    history: list[float] = []
    prev_obj = np.inf
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        d2 = (
            np.einsum("ij,ij->i", points, points)[:, None]
            - 2.0 * points @ centroids.T
            + np.einsum("kj,kj->k", centroids, centroids)[None, :]
        )
        new_assignment = np.argmin(d2, axis=1).astype(np.int32)
        for j in range(b):
            members = points[new_assignment == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        # re-seed empty clusters at the point farthest from its own centroid
        empties = [j for j in range(b) if not np.any(new_assignment == j)]
        if empties:
            residual = points - centroids[new_assignment]
            far_order = np.argsort(-np.einsum("ij,ij->i", residual, residual), kind="stable")
            for rank, j in enumerate(empties):
                centroids[j] = points[far_order[rank]]
        diff = points - centroids[new_assignment]
        obj = float(np.einsum("ij,ij->i", diff, diff).sum())
        if obj > prev_obj * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means objective increased: {prev_obj} -> {obj}")
        history.append(obj)
        prev_obj = obj
        if np.array_equal(new_assignment, assignment) and not empties:
            assignment = new_assignment
            break
        assignment = new_assignment
    raw = np.empty((kb.dim, b), dtype=np.float64)
    for j in range(b):
        members = points[assignment == j]
        raw[:, j] = members.mean(axis=0) if len(members) else centroids[j]
    return AttributeSpace(
        centroids=_normalize_columns(raw.astype(np.float32), "centroids"),
        raw_centroids=raw.astype(np.float32),
        assignment=assignment,
        inertia=prev_obj,
        objective_history=history,
        iterations=iterations,
    )


# --------------------------------------------------------------------------
# hunting and enrichment


def hunt_attributes(template: np.ndarray, attrs: AttributeSpace, k: int):
    """Top-k centroids by dot-product score; ties break toward lower index.

    Returns (indices, scores) sorted by descending score. k past the
    centroid count returns everything.
    """
    if k < 1:
        raise UsageError(f"neighbor count must be >= 1, got {k}")
    template = nm.as_f32(template, "template").reshape(-1)
    scores = np.einsum(
        "d,db->b", template.astype(np.float64), attrs.centroids.astype(np.float64)
    )
    order = np.argsort(-scores, kind="stable")[: min(k, attrs.count)]
    return order.astype(np.int32), scores[order].astype(np.float32)


def enrich(template: np.ndarray, neighbors: np.ndarray, lam: float) -> np.ndarray:
    """Fold softmax-weighted neighbor columns into the template.

    neighbors is (D, K); the softmax runs over exactly the K selected
    scores. lam = 0 returns the template bit-for-bit.
    """
    template = nm.as_f32(template, "template").reshape(-1)
    neighbors = nm.as_f32(neighbors, "neighbors")
    if neighbors.ndim != 2 or neighbors.shape[0] != template.shape[0]:
        raise DataError(f"neighbor matrix shape {neighbors.shape} does not match dim {template.shape[0]}")
    if neighbors.shape[1] == 0:
        raise DataError("enrich: empty neighbor set")
    if lam == 0.0:
        return template.copy()
    scores = np.einsum("d,dk->k", template.astype(np.float64), neighbors.astype(np.float64))
    weights = nm.softmax_rows(scores[None, :].astype(np.float32))[0]
    folded = np.einsum(
        "dk,k->d", neighbors.astype(np.float64), weights.astype(np.float64)
    )
    return (template.astype(np.float64) + lam * folded).astype(np.float32)


@dataclass
class TextRepresentation:
    class_names: list[str]
    templates: np.ndarray  # (D, C)
    enriched: np.ndarray  # (D, C)
    neighbor_indices: list[np.ndarray]
    neighbor_scores: list[np.ndarray]
    lam: float
    topk: int
    attributes: AttributeSpace | None = None

    @property
    def dim(self) -> int:
        return self.templates.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def column_for_class_id(self, class_id: int) -> np.ndarray:
        """Enriched embedding for a dataset label value (1-based foreground)."""
        if not 1 <= class_id <= self.num_classes:
            raise DataError(f"class id {class_id} outside 1..{self.num_classes}")
        return self.enriched[:, class_id - 1]


def build_text_bank(
    kb: KnowledgeBase,
    clusters: int,
    topk: int,
    lam: float,
    rng: Rng,
    max_iters: int = 100,
    clustered: bool = True,
) -> TextRepresentation:
    """Cluster the knowledge base and enrich every class template.

    clustered=False skips the attribute space and folds each class's own
    description embeddings directly (the no-clustering baseline).
    """
    indices, scores, columns = [], [], []
    attrs = None
    if clustered:
        attrs = cluster_attributes(kb, clusters, rng.child("clustering"), max_iters=max_iters)
    for c in range(kb.num_classes):
        template = kb.templates[:, c]
        if clustered:
            idx, sc = hunt_attributes(template, attrs, topk)
            neighbors = attrs.centroids[:, idx]
        else:
            idx = np.nonzero(kb.class_index == c)[0].astype(np.int32)
            neighbors = kb.embeddings[:, idx]
            sc = np.einsum(
                "d,dk->k", template.astype(np.float64), neighbors.astype(np.float64)
            ).astype(np.float32)
        indices.append(idx)
        scores.append(sc)
        columns.append(enrich(template, neighbors, lam))
    return TextRepresentation(
        class_names=list(kb.class_names),
        templates=kb.templates.copy(),
        enriched=np.stack(columns, axis=1),
        neighbor_indices=indices,
        neighbor_scores=scores,
        lam=lam,
        topk=topk,
        attributes=attrs,
    )


# --------------------------------------------------------------------------
# bank serialization


def save_bank(path, bank: TextRepresentation, provenance=None) -> Path:
    tensors = {
        "templates": nm.transpose(bank.templates),
        "enriched": nm.transpose(bank.enriched),
    }
    if bank.attributes is not None:
        tensors["centroids"] = nm.transpose(bank.attributes.centroids)
        tensors["raw_centroids"] = nm.transpose(bank.attributes.raw_centroids)
    meta = {
        "classes": bank.class_names,
        "dim": bank.dim,
        "lambda": bank.lam,
        "topk": bank.topk,
        "clustered": bank.attributes is not None,
        "neighbors": [
            {"indices": [int(i) for i in idx], "scores": [float(s) for s in sc]}
            for idx, sc in zip(bank.neighbor_indices, bank.neighbor_scores)
        ],
        "template_text": TEMPLATE_TEXT,
    }
    return save_tensors(path, tensors, meta=meta, provenance=provenance)


def load_bank(path) -> TextRepresentation:
    tf = load_tensors(path)
    meta = tf.meta
    class_names = list(meta["classes"])
    dim = int(meta["dim"])
    templates = nm.transpose(tf.require("templates", (len(class_names), dim)))
    enriched = nm.transpose(tf.require("enriched", (len(class_names), dim)))
    attrs = None
    if meta.get("clustered"):
        centroids = nm.transpose(tf.require("centroids"))
        raw = nm.transpose(tf.require("raw_centroids"))
        attrs = AttributeSpace(
            centroids=centroids,
            raw_centroids=raw,
            assignment=np.zeros(0, dtype=np.int32),
            inertia=0.0,
        )
    neighbors = meta.get("neighbors", [])
    return TextRepresentation(
        class_names=class_names,
        templates=templates,
        enriched=enriched,
        neighbor_indices=[np.asarray(e["indices"], dtype=np.int32) for e in neighbors],
        neighbor_scores=[np.asarray(e["scores"], dtype=np.float32) for e in neighbors],
        lam=float(meta["lambda"]),
        topk=int(meta["topk"]),
        attributes=attrs,
    )
