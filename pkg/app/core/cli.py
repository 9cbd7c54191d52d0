import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from app.core.configs import PipelineConfig, config
from app.core.exceptions import ContractError, TryOnError

logger = logging.getLogger(__name__)


def _require(args: argparse.Namespace, name: str) -> str:
    value = getattr(args, name.replace("-", "_"), None)
    if not value:
        raise ContractError(f"--{name} is required for {args.command}", field=f"--{name}")
    return value


def _require_file(args: argparse.Namespace, name: str) -> Path:
    path = Path(_require(args, name))
    if not path.exists():
        raise ContractError(f"--{name} path does not exist: {path}", field=f"--{name}")
    return path


def _emit(obj: Any) -> None:
    print(obj if isinstance(obj, str) else json.dumps(obj, indent=2, sort_keys=True))


def _user_input(args: argparse.Namespace, manifest, cfg: PipelineConfig):
    from app.services.dataset_service import load_user, load_user_files

    if args.user_record:
        return load_user(manifest, args.user_record)
    if args.user_image and args.user_pose and args.user_mask:
        return load_user_files(args.user_image, args.user_pose, args.user_mask, cfg.seg.labelmap)
    raise ContractError("pass --user-record or all of --user-image, --user-pose, --user-mask", field="--user-record")


# -----------------------
# Subcommands
# -----------------------
def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.helpers.synthetic import generate_dataset

    written = generate_dataset(
        _require(args, "out"),
        n_garments=args.garments,
        models_per_garment=args.models_per_garment,
        seed=cfg.train.seed,
        long_hair_fraction=args.long_hair_fraction,
    )
    _emit({"images": len(written), "out": args.out})
    return 0


def cmd_ingest(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.services.dataset_service import ingest_dataset

    manifest = ingest_dataset(_require_file(args, "source"), _require(args, "out"), cfg, layout=args.layout)
    splits: Dict[str, int] = {}
    for r in manifest.records:
        splits[r.split] = splits.get(r.split, 0) + 1
    _emit({"records": len(manifest.records), "groups": len(manifest.groups()), "skipped": len(manifest.skipped), "splits": splits})
    return 0


def cmd_train_general(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.services.dataset_service import build_pairs, load_manifest
    from app.services.training_service import train_general

    manifest = load_manifest(_require_file(args, "manifest"))
    pairs = build_pairs(manifest, split=args.split, max_pairs=cfg.train.max_pairs)
    ref = train_general(pairs, cfg, _require(args, "out"), progress=args.progress)
    _emit(ref.model_dump(mode="json"))
    return 0


def cmd_train_specialized(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.services.dataset_service import build_pairs, load_manifest
    from app.services.training_service import train_specialized

    manifest = load_manifest(_require_file(args, "manifest"))
    pairs = build_pairs(manifest, split="catalog", max_pairs=cfg.train.max_pairs, garment_id=args.garment)
    ref = train_specialized(_require_file(args, "checkpoint"), pairs, cfg, _require(args, "out"), progress=args.progress)
    _emit(ref.model_dump(mode="json"))
    return 0


def cmd_train_texture(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.services.dataset_service import build_texture_triplets, load_manifest
    from app.services.training_service import train_texture_translation

    manifest = load_manifest(_require_file(args, "manifest"))
    triplets = build_texture_triplets(manifest, split=args.split, max_items=cfg.train.max_pairs)
    ref = train_texture_translation(triplets, cfg, _require(args, "out"), progress=args.progress)
    _emit(ref.model_dump(mode="json"))
    return 0


def cmd_match(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.services.dataset_service import load_catalog, load_manifest
    from app.services.pose_service import PoseMatcher, load_pose

    manifest = load_manifest(_require_file(args, "manifest"))
    if args.user_pose:
        pose = load_pose(Path(args.user_pose).read_text(encoding="utf-8"))
    else:
        pose = _user_input(args, manifest, cfg).pose
    ranked = PoseMatcher(load_catalog(manifest, args.split), cfg.oks).rank(pose, garment_id=args.garment, top_k=args.top_k)
    if args.json:
        _emit([r.model_dump() for r in ranked])
        return 0
    print("rank\toks\trecord_id\tgarment_id\tmodel_id")
    for r in ranked:
        print(f"{r.rank}\t{r.score:.6f}\t{r.record_id}\t{r.garment_id}\t{r.model_id}")
    return 0


def _pipeline(args: argparse.Namespace, cfg: PipelineConfig):
    from app.services.pipeline_service import TryOnPipeline

    manifest_path = _require_file(args, "manifest")
    checkpoint = _require_file(args, "checkpoint")
    texture = _require_file(args, "texture-checkpoint") if args.texture_checkpoint else None
    return TryOnPipeline.from_paths(manifest_path, checkpoint, cfg, texture, device=args.device)


def cmd_transfer(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.helpers.preprocessor import save_image
    from app.services.dataset_service import load_manifest
    from app.services.pipeline_service import write_result

    out = Path(_require(args, "out"))
    garment = _require(args, "garment")
    pipeline = _pipeline(args, cfg)
    user = _user_input(args, load_manifest(args.manifest), cfg)
    result = pipeline.run_transfer(user, garment)
    write_result(result, out)
    save_image(user.image, out / "user.png")
    save_image(pipeline.catalog[result.selected.index].image, out / "catalog.png")
    for w in result.warnings:
        logger.warning("%s", w)
    _emit({
        "out": str(out),
        "selected": result.selected.model_dump(),
        "method": result.method.model_dump(mode="json"),
        "stage_seconds": result.stage_seconds,
        "warnings": result.warnings,
    })
    return 0


def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.services.dataset_service import build_pairs, load_manifest
    from app.services.metrics_service import build_provider, evaluate_generator
    from app.services.pipeline_service import load_generator

    manifest = load_manifest(_require_file(args, "manifest"))
    generator = load_generator(_require_file(args, "checkpoint"), args.device)
    pairs = build_pairs(manifest, split=args.split, max_pairs=cfg.metrics.max_pairs)
    reports = evaluate_generator(generator, pairs, cfg, build_provider(cfg.metrics, args.device), progress=args.progress)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("".join(r.model_dump_json() + "\n" for r in reports), encoding="utf-8")
    for r in reports:
        print(r.model_dump_json())
    return 0


def cmd_bench(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.schemas import RequestMix
    from app.services.dataset_service import load_manifest, load_users
    from app.services.metrics_service import throughput_benchmark

    pipeline = _pipeline(args, cfg)
    manifest = load_manifest(args.manifest)
    users = load_users(manifest, args.user_split) or load_users(manifest, "train")

    def run(user, garment_id):
        return pipeline.run_transfer(user, garment_id).stage_seconds

    stats = throughput_benchmark(
        run,
        args.n_requests or cfg.bench.n_requests,
        RequestMix(garment_ids=[args.garment] if args.garment else None, seed=cfg.train.seed),
        users,
        garment_ids=pipeline.garment_ids,
        concurrency=cfg.bench.concurrency,
        trace_path=args.trace,
        progress=args.progress,
    )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(stats.model_dump_json(indent=2), encoding="utf-8")
    print(stats.model_dump_json(indent=2))
    return 0


def cmd_grid(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from app.helpers.grid_builder import grid_from_results

    if not args.inputs:
        raise ContractError("--inputs needs at least one transfer output directory", field="--inputs")
    out = grid_from_results(args.inputs, _require(args, "out"))
    _emit({"out": str(out)})
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, PipelineConfig], int]] = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train-general": cmd_train_general,
    "train-specialized": cmd_train_specialized,
    "train-texture": cmd_train_texture,
    "match": cmd_match,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "grid": cmd_grid,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=config.TRYON_CONFIG or None, help="flat key-value YAML config")
    common.add_argument("--seed", type=int, default=None, help="overrides train.seed and ingest.seed")
    common.add_argument("--manifest", default=config.TRYON_MANIFEST or None)
    common.add_argument("--checkpoint", default=config.TRYON_CHECKPOINT or None)
    common.add_argument("--texture-checkpoint", default=config.TRYON_TEXTURE_CHECKPOINT or None)
    common.add_argument("--garment", default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--device", default=config.TRYON_DEVICE)
    common.add_argument("--progress", action="store_true", help="show progress bars")

    user = argparse.ArgumentParser(add_help=False)
    user.add_argument("--user-record", default=None, help="record id of the user in the manifest")
    user.add_argument("--user-image", default=None)
    user.add_argument("--user-pose", default=None)
    user.add_argument("--user-mask", default=None)

    parser = argparse.ArgumentParser(prog="tryon", description="Pose-transfer virtual try-on pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic garment-grouped dataset")
    p.add_argument("--garments", type=int, default=5)
    p.add_argument("--models-per-garment", type=int, default=4)
    p.add_argument("--long-hair-fraction", type=float, default=0.25)

    p = sub.add_parser("ingest", parents=[common], help="crop, resize and index a source directory")
    p.add_argument("--source", required=True)
    p.add_argument("--layout", choices=["flat", "grouped"], default=None)

    for name, default_split in (("train-general", "train"), ("train-texture", "train")):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--split", choices=["train", "test", "catalog"], default=default_split)
    sub.add_parser("train-specialized", parents=[common], help="fine-tune a general checkpoint on the catalog groups")

    p = sub.add_parser("match", parents=[common, user], help="rank catalog entries by OKS")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--split", choices=["train", "test", "catalog"], default="catalog")
    p.add_argument("--json", action="store_true")

    sub.add_parser("transfer", parents=[common, user], help="run one end-to-end transfer")

    p = sub.add_parser("evaluate", parents=[common], help="SSIM, MS-SSIM and IS over held-out pairs")
    p.add_argument("--split", choices=["train", "test", "catalog"], default="test")

    p = sub.add_parser("bench", parents=[common], help="amortized per-request latency")
    p.add_argument("--n-requests", type=int, default=None)
    p.add_argument("--user-split", choices=["train", "test", "catalog"], default="test")
    p.add_argument("--trace", default=None, help="per-request JSON lines")

    p = sub.add_parser("grid", parents=[common], help="tile transfer outputs into one comparison image")
    p.add_argument("--inputs", nargs="+", default=[])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)

    try:
        overrides = {"train.seed": args.seed, "ingest.seed": args.seed} if args.seed is not None else None
        cfg = PipelineConfig.load(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except TryOnError as e:
        print(json.dumps(e.to_record(), sort_keys=True), file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception("Unhandled failure in %s", args.command)
        print(json.dumps({"error": "internal_error", "message": str(e)}, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
