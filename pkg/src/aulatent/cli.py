"""Command-line lifecycle: dataset synthesis through training, evaluation,
annotation, and serving. Every verb takes --config/--seed/--out; artifacts
land under --out with config hash and seed embedded for provenance."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import Config, load_config, stage_seed


def _base_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=None, help="JSON config path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", type=Path, default=Path("runs/toy"), help="run directory")
    return p


def _load(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `{hint}` first")
    return path


def cmd_dataset_gen(args) -> int:
    from .toyface.dataset import make_dataset

    cfg = _load(args)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    ds = make_dataset(args.out / "dataset", cfg.dataset, stage_seed(cfg.seed, "dataset"))
    print(f"dataset hash={ds.dataset_hash} frames_train={len(ds.train)} "
          f"frames_test={len(ds.test)}")
    return 0


def cmd_pretrain_inversion(args) -> int:
    from .toyface.dataset import load_dataset
    from .toyface.inversion import pretrain_inversion_pair, save_inversion

    cfg = _load(args)
    ds = load_dataset(_require(args.out / "dataset", "aulatent dataset-gen"))
    seed = stage_seed(cfg.seed, "inversion")
    pair = pretrain_inversion_pair(ds, cfg.inversion, seed, cfg.dims)
    save_inversion(args.out / "inversion.pt", pair, seed, cfg.config_hash)
    print(f"inversion reconstruction_mse={pair.gate_mse:.6f} gate={cfg.inversion.recon_gate}")
    return 0


def cmd_train_estimators(args) -> int:
    from .estimators import (save_estimator, save_identity, train_estimator,
                             train_identity_embedder)
    from .toyface.dataset import load_dataset
    from .toyface.inversion import load_inversion

    cfg = _load(args)
    ds = load_dataset(_require(args.out / "dataset", "aulatent dataset-gen"))
    pair = load_inversion(_require(args.out / "inversion.pt",
                                   "aulatent pretrain-inversion"))
    fpre = train_estimator(ds, "vgg-ish", stage_seed(cfg.seed, "estimator_fpre"),
                           cfg.estimator_fpre, inversion=pair)
    save_estimator(args.out / "fpre.pt", fpre, stage_seed(cfg.seed, "estimator_fpre"),
                   cfg.config_hash)
    hest = train_estimator(ds, "resnet-ish", stage_seed(cfg.seed, "estimator_hest"),
                           cfg.estimator_hest, inversion=pair)
    save_estimator(args.out / "hest.pt", hest, stage_seed(cfg.seed, "estimator_hest"),
                   cfg.config_hash)
    ident = train_identity_embedder(ds, stage_seed(cfg.seed, "identity"), cfg.identity)
    save_identity(args.out / "idemb.pt", ident, stage_seed(cfg.seed, "identity"),
                  cfg.config_hash)
    print(f"estimators fpre_mse={fpre.held_out_mse:.4f} hest_mse={hest.held_out_mse:.4f} "
          f"identity_gap={ident.separation_gap:.4f}")
    return 0


def _load_frozen(args):
    from .estimators import load_estimator, load_identity
    from .toyface.dataset import load_dataset
    from .toyface.inversion import load_inversion

    ds = load_dataset(_require(args.out / "dataset", "aulatent dataset-gen"))
    pair = load_inversion(_require(args.out / "inversion.pt", "aulatent pretrain-inversion"))
    fpre = load_estimator(_require(args.out / "fpre.pt", "aulatent train-estimators"))
    hest = load_estimator(_require(args.out / "hest.pt", "aulatent train-estimators"))
    ident = load_identity(_require(args.out / "idemb.pt", "aulatent train-estimators"))
    return ds, pair, fpre, hest, ident


def cmd_train(args) -> int:
    from .training import AUEditModel, train

    cfg = _load(args)
    ds, pair, fpre, hest, ident = _load_frozen(args)
    model = AUEditModel(cfg.dims, label_mapping=cfg.training.label_mapping,
                        dual_branch=cfg.training.dual_branch).attach(pair, fpre, ident)
    result = train(model, ds, cfg, out_dir=args.out)
    print(f"train iterations={cfg.training.iterations} "
          f"final_total={result['log'][-1]['total']:.4f} model_hash={result['model_hash']}")
    return 0


def _load_bundle(args):
    from .service import load_bundle

    if not (args.out / "config.json").exists():
        _load(args).save(args.out / "config.json")
    return load_bundle(args.out)


def cmd_eval(args) -> int:
    from .evaluation import eval_editing

    bundle = _load_bundle(args)
    anchor = args.anchor or bundle.config.eval.anchor_mode
    report = eval_editing(bundle.model, bundle.hest, bundle.dataset, anchor_mode=anchor,
                          condition_source=args.condition_source,
                          hard_gates=bundle.config.eval.hard_gates)
    prefix = args.out / "reports" / f"eval_{anchor}_{args.condition_source}"
    report.save(prefix)
    print(f"eval anchor={anchor} icc_avg={report.icc_average:.4f} "
          f"mse_avg={report.mse_average:.4f} neutral_mse={report.neutral_mse_average:.4f} "
          f"identity={report.identity_distance_mean:.4f} report={prefix}.csv")
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import ablation_grid, ablation_rows_to_csv

    cfg = _load(args)
    ds, pair, fpre, hest, ident = _load_frozen(args)
    variants = args.variants.split(",") if args.variants else \
        ["sngl", "dual", "label_mapping", "wo_pretrained_fn"]
    rows = ablation_grid(ds, variants, cfg, pair, fpre, ident, hest,
                         iterations=args.iterations)
    path = args.out / "reports" / "ablation.csv"
    ablation_rows_to_csv(rows, path)
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_augment_study(args) -> int:
    from .evaluation import augmentation_study

    bundle = _load_bundle(args)
    cfg = bundle.config
    result = augmentation_study(bundle.model, bundle.dataset,
                                seed=stage_seed(cfg.seed, "augmentation"),
                                n_synthetic=args.synthetic)
    path = args.out / "reports" / "augmentation.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=2))
    print(f"augmentation baseline_icc={result['baseline_icc']:.4f} "
          f"augmented_icc={result['augmented_icc']:.4f}")
    return 0


def cmd_annotate(args) -> int:
    from PIL import Image

    from .annotate import annotate, make_model_generator

    bundle = _load_bundle(args)
    images_dir = Path(args.images)
    paths = sorted(images_dir.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG files under {images_dir}")
    out_path = args.out / "annotations.jsonl"
    with open(out_path, "w") as fh:
        for p in paths:
            img = np.asarray(Image.open(p).convert("L"), dtype=np.float32) / 255.0
            res = annotate(make_model_generator(bundle.model, img), img,
                           passes=args.passes, weights=bundle.config.weights)
            fh.write(json.dumps({
                "image_path": str(p),
                "intensities": [float(v) for v in res.intensities],
                "final_loss": res.final_loss,
            }) + "\n")
    print(f"annotated {len(paths)} images -> {out_path}")
    return 0


def cmd_transfer(args) -> int:
    from .io_utils import image_to_png_bytes
    from .nets import images_to_tensor
    import torch

    bundle = _load_bundle(args)
    _, src = bundle.frame(args.source_frame)
    rec_t, tgt = bundle.frame(args.target_frame)
    res = bundle.model.transfer_images(src[None], tgt[None])
    out = args.out / "transfer"
    out.mkdir(parents=True, exist_ok=True)
    for name, img in (("source", src), ("neutral", res["neutral"][0]),
                      ("edited", res["edited"][0]), ("target", tgt)):
        (out / f"{name}.png").write_bytes(image_to_png_bytes(img))
    anchor = bundle.subject_anchor(rec_t.subject_id)
    with torch.no_grad():
        est = bundle.hest(images_to_tensor(res["edited"][0]), images_to_tensor(anchor))
    print(f"transfer estimated={[round(float(v), 2) for v in est.squeeze(0)]} out={out}")
    return 0


def cmd_export_grid(args) -> int:
    from .evaluation import export_contact_sheet

    bundle = _load_bundle(args)
    n = min(args.rows, len(bundle.dataset.test))
    rng = np.random.Generator(np.random.PCG64(stage_seed(bundle.config.seed, "eval")))
    frames = sorted(rng.choice(len(bundle.dataset.test), size=n, replace=False).tolist())
    path = args.out / "grids" / "contact_sheet.png"
    export_contact_sheet(bundle.model, bundle.dataset, frames, path)
    print(f"grid rows={n} path={path}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.out, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aulatent",
                                     description="toy AU-intensity editing pipeline")
    sub = parser.add_subparsers(dest="verb", required=True)
    base = _base_parser()

    sub.add_parser("dataset-gen", parents=[base]).set_defaults(fn=cmd_dataset_gen)
    sub.add_parser("pretrain-inversion", parents=[base]).set_defaults(fn=cmd_pretrain_inversion)
    sub.add_parser("train-estimators", parents=[base]).set_defaults(fn=cmd_train_estimators)
    sub.add_parser("train", parents=[base]).set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[base])
    p.add_argument("--anchor", choices=["real", "synthetic"], default=None)
    p.add_argument("--condition-source", choices=["labels", "target_image"],
                   default="labels")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", parents=[base])
    p.add_argument("--variants", default=None, help="comma-separated variant names")
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("augment-study", parents=[base])
    p.add_argument("--synthetic", type=int, default=1200)
    p.set_defaults(fn=cmd_augment_study)

    p = sub.add_parser("annotate", parents=[base])
    p.add_argument("--images", required=True, help="directory of input PNGs")
    p.add_argument("--passes", type=int, default=2)
    p.set_defaults(fn=cmd_annotate)

    p = sub.add_parser("transfer", parents=[base])
    p.add_argument("--source-frame", required=True)
    p.add_argument("--target-frame", required=True)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("export-grid", parents=[base])
    p.add_argument("--rows", type=int, default=6)
    p.set_defaults(fn=cmd_export_grid)

    p = sub.add_parser("serve", parents=[base])
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8750)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error kind={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
