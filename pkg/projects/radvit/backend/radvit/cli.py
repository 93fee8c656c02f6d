"""
radvit command line.

Training commands (pretrain, train-cls, train-seg, train-cap) write into a
run directory holding the resolved config.json, the seed, run.log, metric
CSVs and checkpoints. Exit codes: 0 success, 2 usage, 3 config,
4 data, 5 numeric failure.
"""
import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from glom import glom
from loguru import logger as log
from PIL import Image
from radvit import __version__, settings
from radvit.config import (
    CaptioningSchema,
    dump_config,
    load_config,
    parse_overrides,
    structural_keys,
    validate_config,
)
from radvit.core.checkpoint import load_checkpoint
from radvit.core.seeding import config_digest, seed_everything
from radvit.data.convert import convert_medmnist
from radvit.data.manifest import make_loader
from radvit.data.synthetic import GENERATORS, export_synthetic
from radvit.exceptions import (
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    DataError,
    RadvitException,
    UsageError,
)
from radvit.metrics import caption_report, classification_report, seg_metrics
from radvit.models.caption import Tokenizer
from radvit.models.lora import LORA_PRESETS
from radvit.plotting import plot_metrics, plot_overlays
from radvit.tasks import captioning, classification, pretrain, segmentation
from radvit.tasks.common import load_data, load_encoder, resolve_device

LOCK_FILE = ".lock"


def configure_logging(level: Optional[str] = None) -> None:
    log.remove()
    log.add(sys.stderr, level=(level or settings.LOG_LEVEL).upper())


@contextmanager
def run_directory(path: Path) -> Iterator[Path]:
    """Locked run directory with a run.log sink for the duration of the run"""

    path.mkdir(parents=True, exist_ok=True)
    lock = path / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise ConfigError(
            f"{path} is used by another run (remove {lock} if that run is dead)"
        ) from e
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)

    sink = log.add(path / "run.log", level="DEBUG", mode="w")
    try:
        yield path
    finally:
        log.remove(sink)
        lock.unlink(missing_ok=True)


def resolve_run_dir(
    command: str, conf: Mapping[str, Any], output: Optional[str]
) -> Path:
    if output:
        return Path(output)
    return settings.OUTPUT_ROOT / f"{command}-{config_digest(conf)[:10]}"


def write_run_files(run_dir: Path, conf: Mapping[str, Any]) -> None:
    dump_config(conf, run_dir / "config.json")
    (run_dir / "seed").write_text(f"{conf['seed']}\n")


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values: Dict[str, Any] = dict(parse_overrides(args.set or []))
    if args.seed is not None:
        values["seed"] = args.seed
    for key in ("regime", "lora_r", "lora_alpha", "lora_preset"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return values


def _resolve(args: argparse.Namespace) -> Dict[str, Any]:
    return load_config(args.command, args.config, _overrides(args))


def cmd_pretrain(args: argparse.Namespace) -> int:
    conf = _resolve(args)
    run_dir = resolve_run_dir(args.command, conf, args.output)
    with run_directory(run_dir):
        write_run_files(run_dir, conf)
        data = load_data(conf, "pretrain")
        pretrain.run_pretraining(conf, data, run_dir)
    log.info("Pretraining run written to {}", run_dir)
    return EXIT_OK


def cmd_train_cls(args: argparse.Namespace) -> int:
    conf = _resolve(args)
    run_dir = resolve_run_dir(args.command, conf, args.output)
    with run_directory(run_dir):
        write_run_files(run_dir, conf)
        data = load_data(conf, "classification")
        result = classification.train_classifier(data, conf, run_dir=run_dir)

        split = "test" if len(data.test) else "val"
        device = resolve_device(conf.get("device"))
        labels, probs = classification.predict(
            result.model, data.split(split), conf["batch_size"], device
        )
        columns = [f"prob_{i}" for i in range(probs.shape[1])]
        frame = pd.DataFrame(probs, columns=columns)
        frame.insert(0, "label", labels)
        frame.insert(0, "name", data.split(split).names)
        frame.to_csv(run_dir / f"predictions_{split}.csv", index=False)
    log.info("Classification run written to {}", run_dir)
    return EXIT_OK


def cmd_train_seg(args: argparse.Namespace) -> int:
    conf = _resolve(args)
    run_dir = resolve_run_dir(args.command, conf, args.output)
    with run_directory(run_dir):
        write_run_files(run_dir, conf)
        data = load_data(conf, "segmentation")
        result = segmentation.train_segmenter(data, conf, run_dir=run_dir)
        split = "test" if len(data.test) else "val"
        segmentation.export_predictions(
            result.model,
            data.split(split),
            run_dir / "predictions",
            conf["batch_size"],
            resolve_device(conf.get("device")),
        )
    log.info("Segmentation run written to {}", run_dir)
    return EXIT_OK


def cmd_train_cap(args: argparse.Namespace) -> int:
    conf = _resolve(args)
    run_dir = resolve_run_dir(args.command, conf, args.output)
    with run_directory(run_dir):
        write_run_files(run_dir, conf)
        data = load_data(conf, "captioning")
        result = captioning.train_captioner(data, conf, run_dir=run_dir)
        split = "test" if len(data.test) else "val"
        if len(data.split(split)):
            device = resolve_device(conf.get("device"))
            sweep = captioning.decode_sweep(
                result.model,
                result.tokenizer,
                data.split(split),
                beams=sorted({1, conf["beams"]}),
                max_tokens=sorted({min(m, conf["max_len"]) for m in (64, 128)}),
                batch_size=conf["micro_batch"],
                device=device,
            )
            sweep.to_csv(run_dir / f"decoding_{split}.csv", index=False)
    log.info("Captioning run written to {}", run_dir)
    return EXIT_OK


def cmd_embed(args: argparse.Namespace) -> int:
    conf = _resolve(args)
    seed_everything(conf["seed"])
    data = load_data(conf, "pretrain")
    dataset = data.split(conf["split"])
    device = resolve_device(conf.get("device"))
    encoder = load_encoder(conf).to(device).eval()

    rows, targets = [], []
    with torch.no_grad():
        loader = make_loader(dataset, conf["batch_size"], shuffle=False)
        for images, batch_targets in loader:
            embedding = classification.extract_embedding(encoder, images.to(device))
            rows.append(embedding.cpu())
            if data.task == "classification":
                targets.extend(int(t) for t in batch_targets)
            elif data.task == "captioning":
                targets.extend(batch_targets)
    embeddings = torch.cat(rows).double().numpy()

    frame = pd.DataFrame(
        embeddings, columns=[f"e{i}" for i in range(embeddings.shape[1])]
    )
    if targets:
        frame.insert(0, "target", targets)
    frame.insert(0, "name", dataset.names)

    output = Path(args.output or settings.OUTPUT_ROOT / "embeddings.csv")
    output.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(output, index=False)
    log.info("{} embeddings of dimension {} written to {}", *embeddings.shape, output)
    return EXIT_OK


def _mask_stem(path: Path) -> str:
    return path.stem.removesuffix("_mask")


def _read_masks(directory: Path) -> Dict[str, np.ndarray]:
    if not directory.is_dir():
        raise DataError(f"Not a directory: {directory}")
    masks = {}
    for path in sorted(directory.glob("*.png")):
        with Image.open(path) as img:
            masks[_mask_stem(path)] = np.asarray(img.convert("L"), dtype=np.int64)
    if not masks:
        raise DataError(f"No PNG mask in {directory}")
    return masks


def evaluate_segmentation(
    pred_dir: Path, truth_dir: Path, n_classes: Optional[int] = None
) -> Dict[str, Any]:
    preds, truths = _read_masks(pred_dir), _read_masks(truth_dir)
    missing = sorted(set(truths) - set(preds))
    if missing:
        raise DataError(f"No prediction for {missing[:5]}")
    names = sorted(truths)
    if n_classes is None:
        n_classes = max(int(max(preds[n].max(), truths[n].max())) for n in names) + 1
        n_classes = max(n_classes, 2)
    shapes = {truths[n].shape for n in names}
    if len(shapes) == 1:
        return seg_metrics(
            np.stack([preds[n] for n in names]),
            np.stack([truths[n] for n in names]),
            n_classes,
        )
    # masks of different sizes: pixel counts are pooled by concatenation
    return seg_metrics(
        np.concatenate([preds[n].ravel() for n in names])[None],
        np.concatenate([truths[n].ravel() for n in names])[None],
        n_classes,
    )


def evaluate_classification(
    pred_csv: Path, truth_csv: Path, n_classes: Optional[int] = None
) -> Dict[str, Any]:
    preds = pd.read_csv(pred_csv)
    truth = pd.read_csv(truth_csv)
    if len(preds) != len(truth):
        raise DataError(f"{len(preds)} predictions for {len(truth)} labels")
    if "label" not in truth.columns:
        raise DataError(f"{truth_csv} has no label column")
    labels = truth["label"].to_numpy()

    prob_columns = [c for c in preds.columns if c.startswith("prob_")]
    if prob_columns:
        scores = preds[prob_columns].to_numpy(dtype=np.float64)
    elif "label" in preds.columns:
        n = n_classes or int(max(labels.max(), preds["label"].max())) + 1
        scores = np.eye(n)[preds["label"].to_numpy()]
    else:
        raise DataError(f"{pred_csv} has neither prob_* nor label columns")
    return classification_report(labels, scores, n_classes or scores.shape[1])


def _read_jsonl(path: Path) -> Dict[str, str]:
    records = {}
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{number} is not valid JSON: {e}") from e
            records[glom(record, "image")] = glom(record, "caption", default="")
    return records


def evaluate_captioning(pred_jsonl: Path, truth_jsonl: Path) -> Dict[str, Any]:
    preds, truths = _read_jsonl(pred_jsonl), _read_jsonl(truth_jsonl)
    missing = sorted(set(truths) - set(preds))
    if missing:
        raise DataError(f"No caption generated for {missing[:5]}")
    names = sorted(truths)
    return caption_report(
        [Tokenizer.split(preds[n]) for n in names],
        [Tokenizer.split(truths[n]) for n in names],
    )


def _jsonable(report: Mapping[str, Any]) -> Dict[str, Any]:
    return {
        k: v.tolist() if isinstance(v, np.ndarray) else v for k, v in report.items()
    }


def cmd_eval(args: argparse.Namespace) -> int:
    pred, truth = Path(args.pred), Path(args.truth)
    for path in (pred, truth):
        if not path.exists():
            raise DataError(f"Not found: {path}")

    if args.task == "seg":
        report = evaluate_segmentation(pred, truth, args.n_classes)
    elif args.task == "cls":
        report = evaluate_classification(pred, truth, args.n_classes)
    else:
        report = evaluate_captioning(pred, truth)

    text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text + "\n")
        log.info("Report written to {}", args.output)
    else:
        print(text)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    if args.input:
        plot_metrics(args.input, args.output, args.columns or None)
    elif args.images and args.masks:
        plot_overlays(args.images, args.masks, args.output)
    else:
        raise UsageError("plot needs --input, or --images with --masks")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    export_synthetic(
        args.kind,
        args.n,
        args.seed if args.seed is not None else 0,
        args.output,
        size=args.size,
        n_classes=args.n_classes,
    )
    return EXIT_OK


def cmd_convert(args: argparse.Namespace) -> int:
    convert_medmnist(args.input, args.output)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise ConfigError(f"{run_dir} is not a captioning run directory")
    with open(config_path) as f:
        stored = json.load(f)
    stored.pop("checkpoint", None)
    if args.manifest:
        stored.update(manifest=args.manifest, synthetic=None)
    conf = validate_config(CaptioningSchema, stored)

    tokenizer = Tokenizer.load(run_dir / captioning.TOKENIZER_FILE)
    encoder = load_encoder(conf)
    model = captioning.build_captioner(encoder, conf, tokenizer)
    store = load_checkpoint(
        run_dir / captioning.CHECKPOINT_FILE, expected_config=structural_keys(conf)
    )
    store.load_into(model)

    device = resolve_device(conf.get("device"))
    model.to(device)
    data = load_data(conf, "captioning")
    dataset = data.split(args.split)
    beams = args.beams or conf["beams"]
    max_tokens = args.max_tokens or conf["max_tokens"]

    records = []
    names = iter(dataset.names)
    for images, _ in make_loader(dataset, conf["micro_batch"], shuffle=False):
        for caption, score in captioning.decode_captions(
            model, tokenizer, images.to(device), beams, max_tokens
        ):
            records.append({"image": next(names), "caption": caption, "score": score})

    default = run_dir / f"captions_{args.split}.jsonl"
    output = Path(args.output) if args.output else default
    captioning.write_jsonl(records, output)
    log.info("{} captions written to {}", len(records), output)
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-cls": cmd_train_cls,
    "train-seg": cmd_train_seg,
    "train-cap": cmd_train_cap,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "plot": cmd_plot,
    "synth": cmd_synth,
    "convert-medmnist": cmd_convert,
    "generate": cmd_generate,
}


def _run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON or key=value configuration file")
    parser.add_argument("--seed", type=int, help="overrides the configured seed")
    parser.add_argument("--output", help="output directory (or file for embed)")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="configuration override, repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radvit", description=__doc__.split("\n")[1])
    parser.add_argument("--version", action="version", version=f"radvit {__version__}")
    parser.add_argument("--log-level", help=f"default {settings.LOG_LEVEL}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    for name, description in (
        ("pretrain", "self-distillation pretraining of the encoder"),
        ("train-seg", "dense adapter on a frozen encoder"),
        ("train-cap", "caption bridge on a frozen encoder"),
        ("embed", "class-token embeddings as CSV"),
    ):
        _run_options(sub.add_parser(name, help=description))

    cls = sub.add_parser("train-cls", help="classification adaptation")
    _run_options(cls)
    cls.add_argument("--regime", choices=["full", "head_only", "lora"])
    cls.add_argument("--lora-r", dest="lora_r", type=int)
    cls.add_argument("--lora-alpha", dest="lora_alpha", type=float)
    cls.add_argument(
        "--lora-preset", dest="lora_preset", choices=sorted(LORA_PRESETS)
    )

    ev = sub.add_parser("eval", help="metrics from prediction and ground truth files")
    ev.add_argument("--task", required=True, choices=["cls", "seg", "cap"])
    ev.add_argument("--pred", required=True, help="CSV, mask directory or JSON-lines")
    ev.add_argument("--truth", required=True, help="CSV, mask directory or JSON-lines")
    ev.add_argument("--n-classes", dest="n_classes", type=int)
    ev.add_argument("--output", help="report file, stdout when omitted")

    plot = sub.add_parser("plot", help="figures from metric CSVs or masks")
    plot.add_argument("--input", help="metric CSV")
    plot.add_argument("--columns", nargs="*", help="metric columns to draw")
    plot.add_argument("--images", help="directory of input images")
    plot.add_argument("--masks", help="directory of label masks")
    plot.add_argument("--output", required=True, help="image file or directory")

    synth = sub.add_parser("synth", help="write a synthetic dataset with its manifest")
    synth.add_argument("--kind", required=True, choices=sorted(GENERATORS))
    synth.add_argument("--n", type=int, default=64)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--size", type=int)
    synth.add_argument("--n-classes", dest="n_classes", type=int, default=2)
    synth.add_argument("--output", required=True)

    convert = sub.add_parser("convert-medmnist", help="MedMNIST .npz to a manifest")
    convert.add_argument("--input", required=True)
    convert.add_argument("--output", required=True)

    gen = sub.add_parser("generate", help="captions from a trained captioning run")
    gen.add_argument("--run", required=True, help="train-cap run directory")
    gen.add_argument("--manifest", help="captioning manifest, default: the run data")
    gen.add_argument("--split", default="test", choices=["train", "val", "test"])
    gen.add_argument("--beams", type=int)
    gen.add_argument("--max-tokens", dest="max_tokens", type=int)
    gen.add_argument("--output", help="JSON-lines file")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    configure_logging(args.log_level)
    if settings.NUM_THREADS > 0:
        torch.set_num_threads(settings.NUM_THREADS)

    try:
        return COMMANDS[args.command](args)
    except RadvitException as e:
        log.error("{} error: {}", e.category, e)
        return e.exit_code

