"""Batch entry points: ``gau synth-data | train | generate | eval | classify``.

Every command is deterministic given its flags and seeds.  Reports carry a
``[footer]`` with the wall-clock timestamp; everything above it is
reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from gau.config import ExperimentConfig, dump_config, load_config
from gau.dataset import (ImageSet, ManifestError, load_manifest, make_synthetic_dataset,
                         read_image, split_patient_level, write_image_set, write_png)
from gau.evaluation import (AugmentationResult, ClassifierConfig, MetricsReport, augmentation_study,
                            conditional_accuracy, conditioning_draw, config_hash, fid_between,
                            generate_images, generated_set, per_class_accuracy, save_grid,
                            train_embedder, with_footer)
from gau.sections import ConfigError
from gau.training import (CheckpointError, LossRecord, TrainingDiverged, TrainState, Trainer,
                          load_checkpoint, parameter_digest)

log = logging.getLogger("gau")

SEED_ENV = "GAU_SEED"
CHECKPOINT_NAME = "checkpoint.gau"
LOSS_LOG_NAME = "loss.log"
RESOLVED_NAME = "resolved.cfg"
REPORT_NAME = "report.txt"
GRID_NAME = "grid.png"
GENERATED_NAME = re.compile(r"^(\d+)_(\d+)\.png$")


class CliError(RuntimeError):
    """A user-facing failure; the message names the offending input."""


def resolve_seed(flag: int | None, configured: int) -> int:
    """``--seed`` beats ``GAU_SEED`` beats the config value."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV, "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return configured


def timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- shared plumbing ------------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> ImageSet:
    d = cfg.data
    if d.manifest:
        data = load_manifest(d.manifest, d.image_size)
    else:
        data = make_synthetic_dataset(d.synthetic_classes, d.synthetic_per_class, d.image_size,
                                      d.synthetic_noise, d.synthetic_seed)
    if data.num_classes != cfg.generator.num_classes:
        raise CliError(f"data has {data.num_classes} classes but generator.num_classes = "
                       f"{cfg.generator.num_classes}")
    return data


def split_data(cfg: ExperimentConfig, data: ImageSet) -> tuple[ImageSet, ImageSet, ImageSet]:
    sp = split_patient_level(data.records, (0.7, 0.1, 0.2), cfg.data.split_seed)
    return data.subset(sp.train_idx), data.subset(sp.val_idx), data.subset(sp.test_idx)


def config_beside(checkpoint: Path) -> ExperimentConfig:
    path = checkpoint.parent / RESOLVED_NAME
    if not path.is_file():
        raise CliError(f"no {RESOLVED_NAME} next to checkpoint {checkpoint}")
    return load_config(path)


def open_checkpoint(path: str) -> tuple[Path, TrainState, ExperimentConfig]:
    ckpt = Path(path)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    state = load_checkpoint(ckpt)
    cfg = config_beside(ckpt)
    cfg.generator, cfg.critic, cfg.training = state.gen_config, state.critic_config, state.config
    return ckpt, state, cfg


def output_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc.strerror or exc}") from None
    return out


def format_loss(r: LossRecord) -> str:
    return f"{r.step} {r.critic_loss!r} {r.gp!r} {r.gen_loss!r}\n"


def generator_fn(state: TrainState):
    return lambda x, c, s: generate_images(state.generator, x, c, s)


# -- commands -------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    out = output_dir(args.out)
    seed = resolve_seed(args.seed, 0)
    data = make_synthetic_dataset(args.classes, args.per_class, args.size, args.noise, seed)
    manifest = write_image_set(data, out)
    log.info("wrote %d images and %s", len(data.records), manifest)
    return 0


def cmd_train(args) -> int:
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.is_file():
            raise CliError(f"checkpoint not found: {ckpt}")
        cfg = load_config(args.config) if args.config else config_beside(ckpt)
        state = load_checkpoint(ckpt)
        if args.seed is not None:
            log.warning("--seed is ignored on resume; the checkpoint carries its RNG state")
        cfg.generator, cfg.critic, cfg.training = state.gen_config, state.critic_config, state.config
        out = output_dir(args.out or str(ckpt.parent))
    else:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg.training.seed = resolve_seed(args.seed, cfg.training.seed)
        state = None
        out = output_dir(args.out or cfg.output_dir)
    if cfg.data.manifest:
        cfg.data.manifest = str(Path(cfg.data.manifest).resolve())
    cfg.output_dir = str(out)
    train_set, _, _ = split_data(cfg, load_data(cfg))
    if state is None:
        state = TrainState.initial(cfg.training, cfg.generator, cfg.critic)
    (out / RESOLVED_NAME).write_text(dump_config(cfg))

    n = cfg.training.total_steps - state.step if args.steps is None else args.steps
    loss_path = out / LOSS_LOG_NAME
    with open(loss_path, "w") as fh:
        # rewritten from the stored history so a resumed log has no gaps
        fh.writelines(format_loss(r) for r in state.history)
        fh.flush()

        def on_step(record):
            fh.write(format_loss(record))
            fh.flush()

        try:
            Trainer(state, train_set).run(max(0, n), out / CHECKPOINT_NAME, on_step=on_step)
        except TrainingDiverged as exc:
            raise CliError(f"{exc}; last good checkpoint kept at {out / CHECKPOINT_NAME}") from None
    log.info("trained to step %d; checkpoint %s", state.step, out / CHECKPOINT_NAME)
    return 0


def cmd_generate(args) -> int:
    ckpt, state, cfg = open_checkpoint(args.checkpoint)
    k = state.gen_config.num_classes
    if not 0 <= args.class_id < k:
        raise CliError(f"class {args.class_id} is not in checkpoint {ckpt}'s class set 0..{k - 1}")
    if args.count < 1:
        raise CliError(f"--count must be positive, got {args.count}")
    out = output_dir(args.out)
    seed = resolve_seed(args.seed, cfg.training.seed)
    train_set, _, _ = split_data(cfg, load_data(cfg))
    idx = conditioning_draw(train_set, args.class_id, args.count, np.random.default_rng(seed))
    classes = np.full(args.count, args.class_id, dtype=np.int64)
    images = generate_images(state.generator, train_set.images[idx], classes, seed)
    with open(out / "conditioning.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("file", "class", "conditioning_path"))
        for i, (img, j) in enumerate(zip(images, idx)):
            name = f"{args.class_id}_{i}.png"
            write_png(out / name, img)
            writer.writerow((name, args.class_id, train_set.records[j].image_path))
    return 0


def read_png_dir(path: str, what: str) -> tuple[list[Path], np.ndarray]:
    d = Path(path)
    if not d.is_dir():
        raise CliError(f"{what} directory not found: {d}")
    files = sorted(d.glob("*.png"))
    if not files:
        raise CliError(f"{what} directory {d} contains no PNG images")
    sizes = set()
    images = []
    for f in files:
        with Image.open(f) as im:
            size = im.size
        sizes.add(size)
        if len(sizes) > 1:
            raise CliError(f"{what} directory {d} mixes image sizes {sorted(sizes)} (at {f.name})")
        images.append(read_image(f, size[0]))
    w, h = sizes.pop()
    if w != h:
        raise CliError(f"{what} images in {d} are not square ({w}x{h})")
    return files, np.stack(images)


def read_real_dir(path: str) -> np.ndarray:
    manifest = Path(path) / "manifest.csv"
    if manifest.is_file():
        # decode at the stored resolution so a size mismatch is reported, not resampled away
        with open(manifest, newline="") as fh:
            first = next(csv.DictReader(fh), None)
        if first is None:
            raise CliError(f"real manifest {manifest} has no rows")
        with Image.open(manifest.parent / first["path"]) as im:
            native = im.size[0]
        return load_manifest(manifest, native).images
    _, images = read_png_dir(path, "real")
    return images


def cmd_eval(args) -> int:
    out = output_dir(args.out)
    if args.checkpoint:
        _, state, cfg = open_checkpoint(args.checkpoint)
        seed = resolve_seed(args.seed, cfg.training.seed)
        train_set, _, test_set = split_data(cfg, load_data(cfg))
        n = args.n_generated if args.n_generated is not None else cfg.evaluation.n_generated
        per_class = n // train_set.num_classes
        if per_class < 2:
            raise CliError(f"--n-generated {n} leaves fewer than 2 images per class")
        fake, intended, _ = generated_set(generator_fn(state), train_set, per_class, seed)
        real = test_set.images
        meta = {"checkpoint_step": str(state.step), "generator_digest": parameter_digest(state.generator)[:16]}
    else:
        if not (args.real and args.generated):
            raise CliError("eval needs --checkpoint, or both --real and --generated directories")
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        seed = resolve_seed(args.seed, cfg.training.seed)
        files, fake = read_png_dir(args.generated, "generated")
        size = fake.shape[1]
        if size != cfg.data.image_size:
            raise CliError(f"generated images in {args.generated} are {size}x{size}, "
                           f"the embedder expects {cfg.data.image_size}x{cfg.data.image_size}")
        real = read_real_dir(args.real)
        names = [GENERATED_NAME.match(f.name) for f in files]
        intended = np.array([int(m.group(1)) for m in names]) if all(names) else None
        train_set, _, _ = split_data(cfg, load_data(cfg))
        meta = {"real": str(Path(args.real)), "generated": str(Path(args.generated))}
    if real.shape[1:] != fake.shape[1:]:
        raise CliError(f"dimension mismatch: real images {real.shape[1:]} vs generated {fake.shape[1:]}")
    if len(real) < 2 or len(fake) < 2:
        raise CliError("FID needs at least 2 real and 2 generated images")
    ev = cfg.evaluation
    embedder = train_embedder(train_set, ev.embedder_steps, ev.embedder_seed)
    report = MetricsReport(fid=max(0.0, fid_between(real, fake, embedder)))
    if intended is not None:
        report.conditional_accuracy = conditional_accuracy(fake, intended, embedder)
        report.per_class = per_class_accuracy(fake, intended, embedder)
    meta.update(seed=str(seed), n_real=str(len(real)), n_generated=str(len(fake)),
                config_hash=config_hash(dump_config(cfg)))
    report.metadata = meta
    report = MetricsReport.from_text(report.to_text())  # rounds through the file format
    (out / REPORT_NAME).write_text(with_footer(report.to_text(), timestamp()))
    save_grid(out / GRID_NAME, fake)
    log.info("fid %.4f conditional accuracy %.4f", report.fid, report.conditional_accuracy)
    return 0


def cmd_classify(args) -> int:
    _, state, cfg = open_checkpoint(args.checkpoint)
    out = output_dir(args.out)
    seed = resolve_seed(args.seed, cfg.training.seed)
    train_set, _, test_set = split_data(cfg, load_data(cfg))
    if args.real_per_class is not None:
        rng = np.random.default_rng(seed)
        keep = []
        for c in range(train_set.num_classes):
            pool = train_set.class_indices(c)
            if len(pool) < args.real_per_class:
                raise CliError(f"class {c} has only {len(pool)} training images, "
                               f"--real-per-class asks for {args.real_per_class}")
            keep.append(rng.choice(pool, size=args.real_per_class, replace=False))
        train_set = train_set.subset(np.sort(np.concatenate(keep)))
    n = args.n_generated if args.n_generated is not None else cfg.evaluation.n_generated
    ev = cfg.evaluation
    clf = ClassifierConfig(num_classes=train_set.num_classes, image_size=train_set.image_size,
                           steps=ev.classifier_steps, alpha=ev.classifier_alpha,
                           beta1=ev.classifier_beta1, beta2=ev.classifier_beta2, seed=seed)
    meta = {"checkpoint_step": str(state.step), "n_real": str(len(train_set.records)),
            "config_hash": config_hash(dump_config(cfg))}
    gen = generator_fn(state)
    result: AugmentationResult = augmentation_study(train_set, test_set, gen, clf,
                                                    n // train_set.num_classes, seed,
                                                    ev.bootstrap, meta)
    (out / REPORT_NAME).write_text(with_footer(result.to_text(), timestamp()))
    per_class = n // train_set.num_classes
    if per_class > 0:
        sample, _, _ = generated_set(gen, train_set, per_class, seed)
    else:
        sample = train_set.images
    save_grid(out / GRID_NAME, sample)
    for name, rep in (("without", result.without), ("with", result.with_aug)):
        log.info("%s generated: accuracy %.4f", name, rep.classification["accuracy"][0])
    return 0


# -- argument parsing -----------------------------------------------------------------


def class_count(raw: str) -> int:
    value = int(raw)
    if not 2 <= value <= 10:
        raise argparse.ArgumentTypeError(f"needs between 2 and 10 classes, got {value}")
    return value


def positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def nonneg_int(raw: str) -> int:
    value = int(raw)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gau", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="render a synthetic shape dataset with a manifest")
    s.add_argument("--classes", type=class_count, default=2)
    s.add_argument("--per-class", type=positive_int, default=500)
    s.add_argument("--size", type=positive_int, default=64)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train generator and critic")
    s.add_argument("--config", help="sectioned key = value config file")
    s.add_argument("--steps", type=nonneg_int, help="steps to run now (default: up to training.total_steps)")
    s.add_argument("--resume", metavar="CHECKPOINT")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="write generated images of one class")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--class", dest="class_id", type=int, required=True)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", help="FID and conditional accuracy")
    s.add_argument("--checkpoint")
    s.add_argument("--real", help="directory of real PNGs (or one holding manifest.csv)")
    s.add_argument("--generated", help="directory of <class>_<index>.png images")
    s.add_argument("--config", help="config whose training split fits the embedder")
    s.add_argument("--n-generated", type=positive_int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("classify", help="augmentation study: classifier with vs without generated data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n-generated", type=nonneg_int)
    s.add_argument("--real-per-class", type=positive_int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_classify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"gau {args.command}: config error: {problem}", file=sys.stderr)
        return 1
    except (CliError, ManifestError, CheckpointError, ValueError, OSError) as exc:
        print(f"gau {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
