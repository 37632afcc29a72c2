"""Command-line entry point.

Subcommands: gen-fixtures, build-attrs, cam, train, eval, attn-report, run.
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .blobio import save_tensors
from .config import load_config
from .dataset import load_dataset
from .dynamic_calibration import dynamic_cam
from .encoder import IntraCorrelation, IntraCorrelationBiased, VanillaQK, ValueValueLast, load_weights
from .errors import EXIT_OK, ExcelError, UsageError
from .fixtures import FixtureSpec, generate_fixtures
from .hashing import config_digest
from .images import read_pgm, write_pgm
from .numerics import Rng
from .pipeline import run_pipeline, stage_attributes
from .static_calibration import run_static_pipeline, save_cams
from .text_enrichment import build_text_bank, ingest_knowledge, load_bank, save_bank
from .training_eval import attn_report, evaluate, load_checkpoint, report_text, train_loop, upsample_labels


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="excel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixtures", help="write deterministic weights, knowledge and dataset")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--images", type=int, default=32)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=16)

    p = sub.add_parser("build-attrs", help="cluster a knowledge file into an attribute bank")
    p.add_argument("--kb", required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--topk", type=int, default=8)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cam", help="CAMs and pseudo labels for a single image")
    p.add_argument("--mode", choices=("static", "dynamic"), default="static")
    p.add_argument("--weights", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True, help="comma-separated present class ids")
    p.add_argument("--adapter", help="checkpoint manifest (dynamic mode)")
    p.add_argument("--config", help="pipeline config for thresholds and policy")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train adapter and segmentation head")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="evaluate predicted label maps against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--classes", required=True, help="classes.json from the dataset root")
    p.add_argument("--out")

    p = sub.add_parser("attn-report", help="attention diagnostics per policy")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--policies", default="qk,vv,ic", help="subset of qk,vv,ic,icb")
    p.add_argument("--adapter", help="checkpoint for the icb policy")
    p.add_argument("--calib-layers", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("full", "static-only"), default="full")
    p.add_argument("--resume", action="store_true")
    return parser


def _load_image(path) -> np.ndarray:
    from .images import read_ppm

    rgb = read_ppm(path)
    return np.ascontiguousarray(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)


def _cmd_gen_fixtures(args) -> int:
    spec = FixtureSpec(
        classes=args.classes,
        images=args.images,
        image_size=args.image_size,
        dim=args.dim,
        heads=args.heads,
        patch_size=args.patch_size,
    )
    paths = generate_fixtures(args.seed, spec, args.out)
    for key, value in paths.items():
        print(f"{key}: {value}")
    return EXIT_OK


def _cmd_build_attrs(args) -> int:
    kb = ingest_knowledge(args.kb)
    bank = build_text_bank(
        kb, clusters=args.clusters, topk=args.topk, lam=args.lam, rng=Rng(args.seed).child("attributes")
    )
    prov = {"stage": "attributes", "seed": args.seed, "config_hash": config_digest(vars(args) | {"command": "build-attrs"})}
    out = save_bank(args.out, bank, provenance=prov)
    print(f"bank: {out}")
    return EXIT_OK


def _cam_config(args):
    if args.config:
        return load_config(args.config)
    from .config import PipelineConfig

    return PipelineConfig()


def _cmd_cam(args) -> int:
    cfg = _cam_config(args)
    weights = load_weights(args.weights)
    bank = load_bank(args.bank)
    image = _load_image(args.image)
    present = [int(v) for v in args.labels.split(",") if v.strip()]
    if not present:
        raise UsageError("--labels must list at least one class id")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    prov = {"stage": f"cam-{args.mode}", "seed": cfg.seed, "config_hash": cfg.digest()}
    if args.mode == "static":
        res = run_static_pipeline(image, weights, bank, present, cfg)
        cams, labels = res.cams, res.labels
    else:
        if not args.adapter:
            raise UsageError("dynamic mode requires --adapter")
        adapter, _, _, _ = load_checkpoint(args.adapter)
        res = dynamic_cam(image, weights, adapter, bank, present, cfg)
        cams, labels = res.cams, res.labels
    save_cams(out_dir / f"{stem}.cams.json", cams, provenance=prov)
    pixels = upsample_labels(labels, weights.patch_size).astype(np.uint8)
    write_pgm(out_dir / f"{stem}.pseudo.pgm", pixels, comment=f"provenance stage={prov['stage']} seed={prov['seed']} config={prov['config_hash']}")
    print(f"cams: {out_dir / (stem + '.cams.json')}")
    print(f"pseudo: {out_dir / (stem + '.pseudo.pgm')}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg.validate()
    weights = load_weights(cfg.weights)
    dataset = load_dataset(cfg.dataset, patch_size=weights.patch_size)
    bank, _ = stage_attributes(cfg)
    out_dir = Path(cfg.out_dir) / "train"
    result = train_loop(
        dataset,
        weights,
        bank,
        cfg.train,
        out_dir=out_dir,
        provenance={"stage": "train", "seed": cfg.seed, "config_hash": cfg.digest()},
    )
    final = result.curve[-1] if result.curve else (0, 0.0, 0.0, 0.0)
    print(f"trained {cfg.train.iterations} iterations; final total loss {final[3]:.4f}")
    print(f"checkpoints: {out_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    class_names = json.loads(Path(args.classes).read_text(encoding="utf-8"))["classes"]
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    preds, gts = [], []
    for gt_path in sorted(gt_dir.glob("*.pgm")):
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            pred_path = pred_dir / f"{gt_path.stem}.pseudo.pgm"
        if not pred_path.exists():
            raise UsageError(f"no prediction found for {gt_path.name} in {pred_dir}")
        preds.append(read_pgm(pred_path))
        gts.append(read_pgm(gt_path))
    if not gts:
        raise UsageError(f"no ground-truth maps in {gt_dir}")
    report = evaluate(preds, gts, num_labels=len(class_names))
    text = report_text(report, class_names)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return EXIT_OK


def _cmd_attn_report(args) -> int:
    weights = load_weights(args.weights)
    image = _load_image(args.image)
    policies = {}
    for name in args.policies.split(","):
        name = name.strip()
        if name == "qk":
            policies["qk"] = VanillaQK()
        elif name == "vv":
            policies["vv"] = ValueValueLast()
        elif name == "ic":
            policies["ic"] = IntraCorrelation(layers=args.calib_layers)
        elif name == "icb":
            hw = weights.grid[0] * weights.grid[1]
            if args.adapter:
                from .dynamic_calibration import adapter_forward, dynamic_relation
                from .encoder import encode

                adapter, _, _, _ = load_checkpoint(args.adapter)
                trace = encode(image, weights, IntraCorrelation(layers=args.calib_layers))
                relation = dynamic_relation(
                    adapter_forward(trace, adapter), adapter.alpha, adapter.beta
                ).masked
            else:
                relation = np.zeros((hw, hw), dtype=np.float32)  # uniform bias
            policies["icb"] = IntraCorrelationBiased(layers=args.calib_layers, relation=relation)
        else:
            raise UsageError(f"unknown policy '{name}' (use qk,vv,ic,icb)")
    report = attn_report(image, weights, policies)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, entry in report.items():
        save_tensors(
            out_dir / f"relations_{name}.json", {"token_relation": entry["token_relation"]}
        )
        summary[name] = {"mean_row_entropy": entry["mean_row_entropy"]}
        print(f"{name}: mean row entropy {entry['mean_row_entropy']:.4f}")
    (out_dir / "attn_report.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    artifacts, report = run_pipeline(cfg, mode=args.mode, resume=args.resume)
    print(f"report: {artifacts.report}")
    print(f"mIoU: {report.miou:.4f}")
    return EXIT_OK


_COMMANDS = {
    "gen-fixtures": _cmd_gen_fixtures,
    "build-attrs": _cmd_build_attrs,
    "cam": _cmd_cam,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "attn-report": _cmd_attn_report,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ExcelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
