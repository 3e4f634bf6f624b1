"""Command-line entry point: train, generate, eval, synth-data.

Exit codes: 0 success, 2 usage/config error, 3 runtime numeric failure.
"""
from __future__ import annotations

import argparse
import importlib
import logging
import sys
from pathlib import Path

import torch
from PIL import Image

from . import config as config_mod
from . import data as data_mod
from . import evaluation as eval_mod
from .conditioning import AgeGroupScheme, onehot_batch
from .errors import AgemorphError, CheckpointError, ConfigError, NumericError
from .models import compose
from .trainer import checkpoint_load, checkpoint_scheme, fit, init_state

log = logging.getLogger(__name__)

USAGE_ERROR = 2
NUMERIC_ERROR = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agemorph",
        description="Train and evaluate an attention-masked conditional GAN "
                    "for age-group image translation.",
        epilog=config_mod.document_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser(
        "train", help="run the training loop",
        epilog=config_mod.document_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p_train.add_argument("--config", required=True, help="YAML config file")
    p_train.add_argument("--resume", help="checkpoint to resume from")

    p_gen = sub.add_parser("generate", help="translate images to target age groups")
    p_gen.add_argument("--ckpt", required=True)
    p_gen.add_argument("--input", required=True, help="image file or directory")
    p_gen.add_argument("--targets", default="0,1,2,3,4",
                       help="comma-separated target group indices")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--resize", action="store_true",
                       help="resize inputs to the checkpoint resolution instead of "
                            "failing on mismatch")

    p_eval = sub.add_parser("eval", help="age-distribution and verification reports")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True,
                        help="image directory (with metadata.csv) or synth[:n[:seed]]")
    p_eval.add_argument("--metadata", help="metadata CSV (defaults to <data>/metadata.csv)")
    p_eval.add_argument("--estimator", default="oracle",
                        help="'oracle', 'oracle:<ckpt>', or module:callable")
    p_eval.add_argument("--embedder", default="oracle",
                        help="'oracle', 'oracle:<ckpt>', or module:callable")
    p_eval.add_argument("--threshold", type=float,
                        default=eval_mod.DEFAULT_VERIFICATION_THRESHOLD)
    p_eval.add_argument("--source-group", type=int, default=0)
    p_eval.add_argument("--targets", default="1,2,3,4")
    p_eval.add_argument("--max-sources", type=int, default=64)
    p_eval.add_argument("--oracle-epochs", type=int, default=5)
    p_eval.add_argument("--oracle-seed", type=int, default=0)
    p_eval.add_argument("--train-fraction", type=float, default=0.9)
    p_eval.add_argument("--split-seed", type=int, default=0)
    p_eval.add_argument("--out", default="eval_out", help="report output directory")

    p_synth = sub.add_parser("synth-data", help="materialize the synthetic dataset")
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--resolution", type=int, default=32)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "generate": cmd_generate,
                "eval": cmd_eval, "synth-data": cmd_synth_data}
    try:
        return handlers[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except AgemorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


def _load_records(cfg: config_mod.RunConfig, resolution: tuple[int, int],
                  scheme: AgeGroupScheme) -> list[data_mod.DatasetRecord]:
    d = cfg.data
    if d.source == "synth":
        return data_mod.synth_dataset(d.synth_n, resolution, d.synth_seed, scheme)
    root = Path(d.source)
    metadata = Path(d.metadata) if d.metadata else root / "metadata.csv"
    if not root.is_dir():
        raise ConfigError(f"data.source directory not found: {root}")
    if not metadata.exists():
        raise ConfigError(f"metadata file not found: {metadata}")
    records, _errors = data_mod.ingest_directory(root, metadata, resolution, scheme)
    if not records:
        raise ConfigError(f"no usable records under {root}")
    return records


def cmd_train(args) -> int:
    cfg = config_mod.RunConfig.load(args.config)
    scheme = cfg.scheme()
    train_cfg = cfg.train_config()
    records = _load_records(cfg, train_cfg.resolution, scheme)
    train_records, _ = data_mod.split(records, data_mod.SplitSpec(
        train_fraction=cfg.data.train_fraction, seed=cfg.data.split_seed,
        by_subject=cfg.data.split_by_subject))
    bundle = data_mod.to_tensors(train_records, scheme)

    if args.resume:
        state, meta = checkpoint_load(args.resume, expected_resolution=train_cfg.resolution)
        log.info("resumed from %s at step %d", args.resume, state.step)
    else:
        state = init_state(train_cfg, cfg.model_config())

    run_dir = Path(cfg.train.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    metrics_path = fit(state, bundle, train_cfg, run_dir, scheme)
    log.info("training complete at step %d; metrics in %s", state.step, metrics_path)
    return 0


def _parse_targets(text: str) -> list[int]:
    try:
        targets = [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise ConfigError(f"targets must be comma-separated integers, got {text!r}")
    if not targets or any(t < 0 or t > 4 for t in targets):
        raise ConfigError(f"target groups must lie in 0..4, got {text!r}")
    return targets


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in data_mod.IMAGE_EXTENSIONS)
        if not files:
            raise ConfigError(f"no images found in {path}")
        return files
    if not path.exists():
        raise ConfigError(f"input not found: {path}")
    return [path]


def cmd_generate(args) -> int:
    state, meta = checkpoint_load(args.ckpt)
    generator = state.generator.eval()
    h, w = generator.resolution
    targets = _parse_targets(args.targets)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    for path in _input_images(Path(args.input)):
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (w, h) and not args.resize:
                raise CheckpointError(
                    f"{path.name} is {img.size[1]}x{img.size[0]} but the checkpoint "
                    f"expects {h}x{w}; pass --resize to rescale"
                )
            tensor = data_mod.image_to_tensor(img, (h, w))
        batch = tensor.unsqueeze(0).expand(len(targets), -1, -1, -1)
        onehots = onehot_batch(torch.tensor(targets))
        with torch.no_grad():
            masks = generator(batch, onehots)
            outputs = compose(batch, masks)
        for t, output in zip(targets, outputs):
            data_mod.tensor_to_image(output).save(out_dir / f"{path.stem}_to_g{t}.png")
        eval_mod.export_triptych(outputs, masks, out_dir / f"{path.stem}_triptych.png")
        log.info("generated %d targets for %s", len(targets), path.name)
    return 0


def _resolve_backend(spec: str, oracle: "_OracleCache", role: str,
                     bundle: data_mod.TensorBundle, scheme: AgeGroupScheme,
                     args):
    if spec == "oracle" or spec.startswith("oracle:"):
        _, _, ckpt = spec.partition(":")
        model = oracle.get(ckpt or None, bundle, args)
        if role == "estimator":
            return eval_mod.ClassifierAgeEstimator(model, scheme)
        return eval_mod.ClassifierEmbedder(model)
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise ConfigError(f"{role} backend '{spec}' is not 'oracle' or module:callable")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load {role} backend '{spec}': {exc}") from exc
    return factory(bundle, scheme, args.oracle_seed)


class _OracleCache:
    def __init__(self):
        self.models: dict[str | None, eval_mod.AgeClassifier] = {}

    def get(self, ckpt: str | None, bundle: data_mod.TensorBundle, args):
        if ckpt not in self.models:
            if ckpt is not None:
                self.models[ckpt] = eval_mod.load_age_classifier(ckpt)
            else:
                log.info("training oracle age classifier (%d epochs)", args.oracle_epochs)
                self.models[ckpt] = eval_mod.train_age_classifier(
                    bundle, epochs=args.oracle_epochs, seed=args.oracle_seed)
        return self.models[ckpt]


def _eval_records(args, resolution: tuple[int, int],
                  scheme: AgeGroupScheme) -> list[data_mod.DatasetRecord]:
    if args.data.startswith("synth"):
        parts = args.data.split(":")
        n = int(parts[1]) if len(parts) > 1 else 2000
        seed = int(parts[2]) if len(parts) > 2 else 0
        return data_mod.synth_dataset(n, resolution, seed, scheme)
    root = Path(args.data)
    metadata = Path(args.metadata) if args.metadata else root / "metadata.csv"
    if not root.is_dir() or not metadata.exists():
        raise ConfigError(f"eval data not found: {root} (metadata {metadata})")
    records, _ = data_mod.ingest_directory(root, metadata, resolution, scheme)
    if not records:
        raise ConfigError(f"no usable records under {root}")
    return records


def cmd_eval(args) -> int:
    state, meta = checkpoint_load(args.ckpt)
    generator = state.generator.eval()
    scheme = checkpoint_scheme(meta)
    resolution = generator.resolution
    targets = _parse_targets(args.targets)

    records = _eval_records(args, resolution, scheme)
    train_records, test_records = data_mod.split(records, data_mod.SplitSpec(
        train_fraction=args.train_fraction, seed=args.split_seed))
    train_bundle = data_mod.to_tensors(train_records, scheme)
    test_bundle = data_mod.to_tensors(test_records, scheme)

    oracle = _OracleCache()
    estimator = _resolve_backend(args.estimator, oracle, "estimator",
                                 train_bundle, scheme, args)
    embedder = _resolve_backend(args.embedder, oracle, "embedder",
                                train_bundle, scheme, args)

    source_mask = test_bundle.group_indices == args.source_group
    if not bool(source_mask.any()):
        raise ConfigError(f"no test images in source group {args.source_group}")
    sources = test_bundle.images[source_mask][:args.max_sources]

    generated: dict[int, torch.Tensor] = {}
    generic: dict[int, torch.Tensor] = {}
    pairs: list[tuple[torch.Tensor, torch.Tensor]] = []
    group_pairs: list[tuple[int, int]] = []
    for t in targets:
        real_t = test_bundle.images[test_bundle.group_indices == t]
        if len(real_t) == 0:
            raise ConfigError(f"no generic test images in target group {t}")
        onehots = onehot_batch(torch.full((len(sources),), t))
        with torch.no_grad():
            fakes = compose(sources, generator(sources, onehots))
        generated[t] = fakes
        generic[t] = real_t
        pairs.extend((src, fake) for src, fake in zip(sources, fakes))
        group_pairs.extend((args.source_group, t) for _ in range(len(sources)))

    age_report = eval_mod.age_discrepancy(estimator, generated, generic, scheme)
    ver_report = eval_mod.verification(embedder, pairs, args.threshold, group_pairs)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "age_report.csv").write_text(age_report.to_csv() + "\n")
    (out_dir / "age_report.md").write_text(age_report.to_markdown() + "\n")
    (out_dir / "verification.csv").write_text(ver_report.to_csv() + "\n")
    (out_dir / "verification.md").write_text(ver_report.to_markdown(scheme) + "\n")
    print(age_report.to_markdown())
    print()
    print(ver_report.to_markdown(scheme))
    return 0


def cmd_synth_data(args) -> int:
    records = data_mod.synth_dataset(args.n, (args.resolution, args.resolution), args.seed)
    meta_path = data_mod.save_records(records, args.out)
    log.info("wrote %d images and %s", len(records), meta_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
