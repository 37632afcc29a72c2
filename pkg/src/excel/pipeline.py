"""Stage orchestration: attributes -> static CAMs -> training -> dynamic
CAMs -> evaluation, each stage writing provenance-stamped artifacts.

Every artifact embeds {stage, seed, config_hash}; resuming into an output
directory whose artifacts carry a different config hash is refused.
"""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blobio import load_tensors
from .config import PipelineConfig, save_config
from .dataset import ToyDataset, load_dataset
from .dynamic_calibration import dynamic_cam
from .encoder import load_weights
from .errors import UsageError
from .images import write_pgm
from .static_calibration import run_static_pipeline, save_cams
from .text_enrichment import build_text_bank, ingest_knowledge, load_bank, save_bank
from .training_eval import (
    evaluate,
    load_checkpoint,
    report_text,
    train_loop,
    upsample_labels,
)
from .numerics import Rng


@dataclass
class PipelineArtifacts:
    bank: Path
    static_dir: Path
    train_dir: Path | None
    dynamic_dir: Path | None
    report: Path


def _provenance(cfg: PipelineConfig, stage: str) -> dict:
    return {"stage": stage, "seed": cfg.seed, "config_hash": cfg.digest()}


def _check_resume(path: Path, cfg: PipelineConfig, resume: bool) -> bool:
    """True when `path` holds a reusable artifact for this config."""
    if not path.exists():
        return False
    if not resume:
        return False
    recorded = load_tensors(path).provenance.get("config_hash")
    if recorded != cfg.digest():
        raise UsageError(
            f"refusing to resume: {path} was produced with config hash "
            f"{recorded}, current config hashes to {cfg.digest()}"
        )
    return True


def _pgm_comment(prov: dict) -> str:
    return f"provenance stage={prov['stage']} seed={prov['seed']} config={prov['config_hash']}"


def stage_attributes(cfg: PipelineConfig, resume: bool = False):
    out = Path(cfg.out_dir) / "attrs.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    if _check_resume(out, cfg, resume):
        return load_bank(out), out
    kb = ingest_knowledge(cfg.knowledge)
    bank = build_text_bank(
        kb,
        clusters=cfg.train.clusters,
        topk=cfg.train.topk,
        lam=cfg.train.lam,
        rng=Rng(cfg.seed).child("attributes"),
    )
    save_bank(out, bank, provenance=_provenance(cfg, "attributes"))
    return bank, out


def _export_label_map(path, labels, patch_size, prov):
    pixels = upsample_labels(labels, patch_size).astype(np.uint8)
    write_pgm(path, pixels, comment=_pgm_comment(prov))


def stage_static(cfg: PipelineConfig, weights, bank, dataset: ToyDataset):
    out_dir = Path(cfg.out_dir) / "static"
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, "static")
    results = {}
    for rec in dataset.images:
        res = run_static_pipeline(rec.image, weights, bank, rec.labels, cfg)
        save_cams(out_dir / f"{rec.name}.cams.json", res.cams, provenance=prov)
        _export_label_map(out_dir / f"{rec.name}.pseudo.pgm", res.labels, weights.patch_size, prov)
        results[rec.name] = res
    return results, out_dir


def stage_train(cfg: PipelineConfig, weights, bank, dataset: ToyDataset, resume: bool = False):
    out_dir = Path(cfg.out_dir) / "train"
    final = out_dir / f"checkpoint_{cfg.train.iterations:06d}.json"
    if _check_resume(final, cfg, resume):
        adapter, head, _, _ = load_checkpoint(final)
        return adapter, head, out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train_loop(
        dataset, weights, bank, cfg.train, out_dir=out_dir, provenance=_provenance(cfg, "train")
    )
    return result.adapter, result.head, out_dir


def stage_dynamic(cfg: PipelineConfig, weights, bank, dataset: ToyDataset, adapter, static_results):
    out_dir = Path(cfg.out_dir) / "dynamic"
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, "dynamic")
    # the adapter consumes the calibrated trace; reuse the static pass only
    # when it ran under the calibrated policy (dynamic_cam recomputes otherwise)
    reuse_traces = cfg.policy == "intra_correlation"
    results = {}
    for rec in dataset.images:
        res = dynamic_cam(
            rec.image,
            weights,
            adapter,
            bank,
            rec.labels,
            cfg,
            static_trace=static_results[rec.name].trace if reuse_traces else None,
        )
        save_cams(out_dir / f"{rec.name}.cams.json", res.cams, provenance=prov)
        _export_label_map(out_dir / f"{rec.name}.pseudo.pgm", res.labels, weights.patch_size, prov)
        results[rec.name] = res
    return results, out_dir


def stage_eval(cfg: PipelineConfig, dataset: ToyDataset, label_maps: dict, patch_size: int, stage_name: str):
    preds = [upsample_labels(label_maps[rec.name], patch_size) for rec in dataset.images]
    gts = [rec.mask for rec in dataset.images]
    report = evaluate(preds, gts, num_labels=len(dataset.class_names))
    prov = _provenance(cfg, "eval")
    payload = {"provenance": prov, "evaluated_stage": stage_name, **report.to_dict()}
    report_path = Path(cfg.out_dir) / "report.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (Path(cfg.out_dir) / "report.txt").write_text(
        report_text(report, dataset.class_names), encoding="utf-8"
    )
    return report, report_path


def run_pipeline(cfg: PipelineConfig, mode: str = "full", resume: bool = False):
    """Run every stage; `mode='static-only'` skips training and dynamic CAMs
    and evaluates the training-free pseudo labels."""
    if mode not in ("full", "static-only"):
        raise UsageError(f"unknown pipeline mode '{mode}'")
    cfg.validate()
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    report_path = out_root / "report.json"
    if report_path.exists() and resume:
        recorded = json.loads(report_path.read_text(encoding="utf-8")).get("provenance", {})
        if recorded.get("config_hash") != cfg.digest():
            raise UsageError(
                f"refusing to resume into {out_root}: existing report has config hash "
                f"{recorded.get('config_hash')}, current config hashes to {cfg.digest()}"
            )
    # the recorded copy points out_dir at its own directory, so identical
    # runs into different locations leave byte-identical trees
    save_config(out_root / "run_config.json", dataclasses.replace(cfg, out_dir="."))
    weights = load_weights(cfg.weights)
    dataset = load_dataset(cfg.dataset, patch_size=weights.patch_size)
    bank, bank_path = stage_attributes(cfg, resume=resume)
    static_results, static_dir = stage_static(cfg, weights, bank, dataset)
    train_dir = dynamic_dir = None
    if mode == "full":
        adapter, head, train_dir = stage_train(cfg, weights, bank, dataset, resume=resume)
        dynamic_results, dynamic_dir = stage_dynamic(
            cfg, weights, bank, dataset, adapter, static_results
        )
        labels = {name: res.labels for name, res in dynamic_results.items()}
        report, report_path = stage_eval(cfg, dataset, labels, weights.patch_size, "dynamic")
    else:
        labels = {name: res.labels for name, res in static_results.items()}
        report, report_path = stage_eval(cfg, dataset, labels, weights.patch_size, "static")
    return PipelineArtifacts(
        bank=bank_path,
        static_dir=static_dir,
        train_dir=train_dir,
        dynamic_dir=dynamic_dir,
        report=report_path,
    ), report
