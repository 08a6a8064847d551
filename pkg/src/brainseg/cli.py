"""`brainseg` command-line entry point chaining the pipeline end to end.

Subcommands and exit codes: preprocess (2 on failure), build (3),
train (4), eval/viz (5). 0 means every declared output was written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import dataset as ds
from . import fallback, metrics, tools, trainer, viz
from .config import PipelineConfig, load_pipeline_config
from .errors import BrainsegError, ConfigError, DegenerateInput, ToolNotFound
from .model import PromptSpec, SegModel, init_tiny, load_pretrained, save_checkpoint
from .volume import (
    SOURCE_EXTERNAL_FAST,
    SOURCE_KMEANS_FALLBACK,
    load_volume,
    save_probability_maps,
    save_volume,
)

log = logging.getLogger("brainseg")

EXIT_PREPROCESS = 2
EXIT_BUILD = 3
EXIT_TRAIN = 4
EXIT_EVAL = 5


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _list_raw_volumes(raw_dir: Path) -> list[Path]:
    vols = sorted(p for p in raw_dir.iterdir() if p.name.endswith((".nii", ".nii.gz")))
    return vols


def cmd_preprocess(cfg: PipelineConfig, allow_fallback: bool) -> int:
    if not cfg.raw_dir.is_dir():
        log.error("raw volume directory %s does not exist", cfg.raw_dir)
        return EXIT_PREPROCESS
    volumes = _list_raw_volumes(cfg.raw_dir)
    if not volumes:
        log.error("no .nii/.nii.gz volumes in %s", cfg.raw_dir)
        return EXIT_PREPROCESS

    extracted_dir = cfg.work_dir / "extracted"
    maps_dir = cfg.work_dir / "maps"
    provenance = []
    for path in volumes:
        vol = load_volume(path)
        entry: dict = {"subject_id": vol.subject_id, "seed": cfg.seed}
        try:
            exe = tools.resolve_executable(cfg.bet)
            extracted = tools.run_brain_extraction(vol, cfg.bet, work_dir=cfg.work_dir)
            entry["brain_extraction"] = {
                "tool": cfg.bet.executable_path,
                "executable_sha256": _sha256_file(Path(exe)),
            }
        except ToolNotFound as e:
            if not allow_fallback:
                log.error(
                    "brain-extraction tool %r unavailable (%s); "
                    "rerun with --allow-fallback to pass volumes through unmodified",
                    cfg.bet.executable_path, e,
                )
                return EXIT_PREPROCESS
            log.warning(
                "brain-extraction tool %r unavailable; passing %s through unmodified",
                cfg.bet.executable_path, vol.subject_id,
            )
            extracted = vol
            entry["brain_extraction"] = {"tool": "identity_fallback"}
        save_volume(extracted, extracted_dir / f"{vol.subject_id}.nii.gz")

        try:
            exe = tools.resolve_executable(cfg.fast)
            maps = tools.run_tissue_segmentation(
                extracted, cfg.fast, work_dir=cfg.work_dir,
                gm_pattern=cfg.gm_pattern, wm_pattern=cfg.wm_pattern,
            )
            entry["tissue_segmentation"] = {
                "tool": cfg.fast.executable_path,
                "source": SOURCE_EXTERNAL_FAST,
                "executable_sha256": _sha256_file(Path(exe)),
            }
        except ToolNotFound as e:
            if not allow_fallback:
                log.error(
                    "tissue-segmentation tool %r unavailable (%s); "
                    "rerun with --allow-fallback to use the built-in k-means pseudo-labeler",
                    cfg.fast.executable_path, e,
                )
                return EXIT_PREPROCESS
            log.warning(
                "tissue-segmentation tool %r unavailable; using k-means fallback for %s",
                cfg.fast.executable_path, vol.subject_id,
            )
            try:
                maps = fallback.kmeans_tissue_prior(extracted, seed=cfg.seed)
            except DegenerateInput as err:
                log.error("%s: %s", vol.subject_id, err)
                return EXIT_PREPROCESS
            entry["tissue_segmentation"] = {"tool": "kmeans", "source": SOURCE_KMEANS_FALLBACK}
        save_probability_maps(
            maps,
            maps_dir / f"{vol.subject_id}_gm.nii.gz",
            maps_dir / f"{vol.subject_id}_wm.nii.gz",
            spacing=extracted.spacing,
        )
        provenance.append(entry)

    prov_path = cfg.work_dir / "provenance.json"
    prov_path.write_text(json.dumps(provenance, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    log.info("preprocessed %d subjects -> %s", len(provenance), cfg.work_dir)
    return 0


def _map_source(cfg: PipelineConfig) -> dict[str, str]:
    prov_path = cfg.work_dir / "provenance.json"
    if not prov_path.is_file():
        raise BrainsegError(f"no provenance log at {prov_path}; run `brainseg preprocess` first")
    sources = {}
    for entry in json.loads(prov_path.read_text(encoding="utf-8")):
        sources[entry["subject_id"]] = entry["tissue_segmentation"]["source"]
    return sources


def cmd_build(cfg: PipelineConfig) -> int:
    extracted_dir = cfg.work_dir / "extracted"
    maps_dir = cfg.work_dir / "maps"
    if not extracted_dir.is_dir():
        log.error("no extracted volumes under %s; run `brainseg preprocess` first", extracted_dir)
        return EXIT_BUILD
    sources = _map_source(cfg)
    subjects = sorted(p.name[: -len(".nii.gz")] for p in extracted_dir.glob("*.nii.gz"))
    if not subjects:
        log.error("no extracted volumes under %s", extracted_dir)
        return EXIT_BUILD

    volumes = {s: extracted_dir / f"{s}.nii.gz" for s in subjects}
    maps = {
        s: (maps_dir / f"{s}_gm.nii.gz", maps_dir / f"{s}_wm.nii.gz", sources[s])
        for s in subjects
    }
    train_ids, val_ids, test_ids = ds.split_subjects(subjects, cfg.fractions, cfg.seed)
    manifests = ds.build_dataset(
        volumes,
        maps,
        cfg.dataset_root,
        cfg.build,
        {"train": train_ids, "val": val_ids, "test": test_ids},
        seed=cfg.seed,
    )
    for split, manifest in manifests.items():
        log.info("built %s: %d slices", split, len(manifest.entries))
    return 0


def _load_model(cfg: PipelineConfig, tiny: bool, checkpoint: str | None = None) -> SegModel:
    if checkpoint:
        return load_pretrained(checkpoint)
    if tiny:
        return init_tiny(cfg.seed)
    if cfg.pretrained_checkpoint is None:
        raise BrainsegError(
            "no pretrained checkpoint configured; set train.pretrained_checkpoint "
            "or pass --tiny for a desk-scale run"
        )
    return load_pretrained(cfg.pretrained_checkpoint)


def cmd_train(cfg: PipelineConfig, plan: str, tiny: bool) -> int:
    model = _load_model(cfg, tiny)
    cap = cfg.tiny_cap if tiny else None
    best_state, history, n_train = trainer.run_experiment(
        model, plan, cfg.dataset_root, cfg.train, cap=cap
    )
    model.net.load_state_dict(best_state)
    model.model_id = plan

    plan_dir = cfg.out_dir / plan
    manifest_hashes = {
        split: _sha256_file(ds.manifest_path(cfg.dataset_root, split))
        for split in ("train", "val")
    }
    save_checkpoint(
        model,
        plan_dir / "checkpoint.pt",
        extra_meta={
            "plan": plan,
            "seed": cfg.seed,
            "train_config": {
                "learning_rate": cfg.train.learning_rate,
                "batch_size": cfg.train.batch_size,
                "max_epochs": cfg.train.max_epochs,
                "class_weights": list(cfg.train.class_weights),
                "weight_decay": cfg.train.weight_decay,
                "early_stop_patience": cfg.train.early_stop_patience,
                "seed": cfg.train.seed,
                "prompt_mode": cfg.train.prompt_mode,
            },
            "manifest_hashes": manifest_hashes,
        },
    )
    trainer.write_history_csv(history, plan_dir / "history.csv")
    trainer.write_history_json(
        history, plan_dir / "history.json",
        extra={"plan": plan, "seed": cfg.seed, "n_train_slices": n_train},
    )
    log.info(
        "trained plan %s on %d slices; best epoch %d (val_loss %.6f)",
        plan, n_train, history.best_epoch,
        min(r.val_loss for r in history.epochs),
    )
    return 0


def _panels(cfg, model, manifest, entries_idx, plan: str) -> None:
    panel_dir = cfg.out_dir / plan / "panels"
    for i in entries_idx:
        pair = ds.load_slice_pair(cfg.dataset_root, manifest.entries[i])
        pred, probs = model.predict(pair.image, PromptSpec())
        viz.compose_panel(
            pair.image, pair.label, pred, probs,
            panel_dir / viz.panel_filename(model.model_id, pair.plane, pair.subject_id, pair.index),
        )


def cmd_eval(cfg: PipelineConfig, plan: str, checkpoint: str | None, tiny: bool, panels: int) -> int:
    model = _load_model(cfg, tiny, checkpoint or str(cfg.out_dir / plan / "checkpoint.pt"))
    model.model_id = plan
    test_manifest = ds.read_manifest(ds.manifest_path(cfg.dataset_root, "test"))
    entries = trainer.select_plan_entries(test_manifest, plan)
    if tiny:
        entries = entries[: cfg.tiny_cap]
    manifest = ds.DatasetManifest(
        split="test",
        seed=test_manifest.seed,
        build_config_hash=test_manifest.build_config_hash,
        entries=entries,
    )
    report = metrics.evaluate_model(
        model,
        manifest,
        sample_n=min(cfg.eval_sample_n, len(entries)) if entries else cfg.eval_sample_n,
        seed=cfg.seed,
        aggregation=cfg.eval_aggregation,
        root=cfg.dataset_root,
        exclude_empty=cfg.eval_exclude_empty,
        model_id=plan,
    )
    plan_dir = cfg.out_dir / plan
    metrics.write_report_json(report, plan_dir / "report.json")
    metrics.write_report_csv(report, plan_dir / "report.csv")
    if panels > 0:
        _panels(cfg, model, manifest, range(min(panels, len(entries))), plan)
    log.info(
        "evaluated %s on %d slices: dice %.4f iou %.4f",
        plan, report.n_slices_evaluated, report.overall_dice, report.overall_iou,
    )
    return 0


def cmd_viz(cfg: PipelineConfig, plan: str, checkpoint: str | None, tiny: bool, panels: int) -> int:
    model = _load_model(cfg, tiny, checkpoint or str(cfg.out_dir / plan / "checkpoint.pt"))
    model.model_id = plan
    test_manifest = ds.read_manifest(ds.manifest_path(cfg.dataset_root, "test"))
    entries = trainer.select_plan_entries(test_manifest, plan)
    manifest = ds.DatasetManifest(
        split="test",
        seed=test_manifest.seed,
        build_config_hash=test_manifest.build_config_hash,
        entries=entries,
    )
    _panels(cfg, model, manifest, range(min(panels, len(entries))), plan)
    log.info("wrote %d panels for plan %s", min(panels, len(entries)), plan)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brainseg",
        description="Brain MRI gray/white matter segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="path to the JSON pipeline config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("preprocess", help="brain-extract volumes and compute tissue maps")
    add_common(p)
    p.add_argument(
        "--allow-fallback", action="store_true",
        help="proceed without external tools (identity extraction, k-means maps)",
    )

    p = sub.add_parser("build", help="slice volumes into per-split 2D datasets")
    add_common(p)

    for name, help_text in (
        ("train", "fine-tune a model for one plan"),
        ("eval", "score a checkpoint on the test split"),
        ("viz", "emit qualitative panels"),
    ):
        p = sub.add_parser(name, help=help_text)
        add_common(p)
        p.add_argument(
            "--plan", choices=trainer.PLANS, default="axial",
            help="which orientation dataset to use (unified = all three)",
        )
        p.add_argument("--tiny", action="store_true", help="desk-scale model and capped data")
        if name in ("eval", "viz"):
            p.add_argument("--checkpoint", default=None, help="checkpoint path (default: out dir)")
            p.add_argument("--panels", type=int, default=0 if name == "eval" else 4,
                           help="number of qualitative panels to write")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    fail_code = {
        "preprocess": EXIT_PREPROCESS,
        "build": EXIT_BUILD,
        "train": EXIT_TRAIN,
        "eval": EXIT_EVAL,
        "viz": EXIT_EVAL,
    }[args.command]
    try:
        cfg = load_pipeline_config(args.config, seed_override=args.seed)
        if args.command == "preprocess":
            return cmd_preprocess(cfg, allow_fallback=args.allow_fallback)
        if args.command == "build":
            return cmd_build(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.plan, args.tiny)
        if args.command == "eval":
            return cmd_eval(cfg, args.plan, args.checkpoint, args.tiny, args.panels)
        if args.command == "viz":
            return cmd_viz(cfg, args.plan, args.checkpoint, args.tiny, args.panels)
    except ConfigError as e:
        log.error("%s", e)
        return fail_code
    except BrainsegError as e:
        log.error("%s", e)
        return fail_code
    return fail_code


if __name__ == "__main__":
    sys.exit(main())
