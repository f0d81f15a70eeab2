"""Command line interface.

Exit codes: 0 ok, 2 input/decode error, 3 dataset ingestion error,
4 training error, 5 model archive error. Diagnostics go to stderr.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import kernels
from .dataset import CACHE_ENV, ElaCache, scan_directory, split_stratified
from .ela import DEFAULT_QUALITY, ElaConfig, ela_image, load_image, save_png
from .errors import (ArchiveError, CodecError, ContractError, DataItemError, IngestionError,
                     SplitError, TrainingError, TrainingInterrupted)
from .layers import build_model
from .training import (PRESET_SEEDS, ManifestSource, TrainConfig, evaluate, export_history,
                       load_model, plot_history, predict, read_header, save_model, train)

EXIT_INPUT = 2
EXIT_INGEST = 3
EXIT_TRAIN = 4
EXIT_ARCHIVE = 5


def fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_archive(path):
    try:
        return load_model(path), read_header(path)
    except FileNotFoundError:
        fail(f"model archive not found: {path}", EXIT_ARCHIVE)
    except ArchiveError as exc:
        fail(f"{path}: {exc}", EXIT_ARCHIVE)


def _ela_from_header(header, quality=None) -> ElaConfig:
    ela = dict(header.get("ela") or {})
    h, w, _ = header.get("input_shape", [128, 128, 3])
    ela.setdefault("target_height", h)
    ela.setdefault("target_width", w)
    if quality is not None:
        ela["jpeg_quality"] = quality
    return ElaConfig(**ela)


def _cache(cache_dir, no_cache):
    if no_cache:
        return None
    return ElaCache(cache_dir)


@click.group(context_settings={"show_default": True})
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress to stderr.")
def main(verbose):
    """Detect tampered images with error level analysis and a CNN."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command("ela")
@click.option("--input", "input_path", required=True, help="Image to analyse.")
@click.option("--output", "output_path", required=True, help="PNG file to write.")
@click.option("--quality", default=DEFAULT_QUALITY, show_default=True,
              type=click.IntRange(1, 100), help="JPEG recompression quality.")
def cmd_ela(input_path, output_path, quality):
    """Write the native-resolution ELA image of INPUT as PNG."""
    try:
        img = load_image(input_path)
    except FileNotFoundError:
        fail(f"input not found: {input_path}", EXIT_INPUT)
    except CodecError as exc:
        fail(str(exc), EXIT_INPUT)
    save_png(ela_image(img, quality), output_path)
    click.echo(f"wrote {output_path}")


def _train_config(config_file, preset, ctx, **flags) -> TrainConfig:
    values = {}
    if preset:
        values.update(epochs=int(preset), seed=PRESET_SEEDS[int(preset)])
    if config_file:
        values.update(json.loads(Path(config_file).read_text()))
    ela = dict(values.pop("ela", {}) or {})
    for key, value in flags.items():
        explicit = ctx.get_parameter_source(key) != click.core.ParameterSource.DEFAULT
        target = ela if key == "jpeg_quality" else values
        name = {"split": "split_ratio"}.get(key, key)
        if explicit or name not in target:
            target[name] = value
    values["ela"] = ElaConfig(**ela)
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise click.BadParameter(f"unknown config keys: {sorted(unknown)}", param_hint="--config")
    return TrainConfig(**values)


@main.command("train")
@click.option("--data-root", required=True, type=click.Path(file_okay=False),
              help="Dataset root holding the authentic and tampered directories.")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with training settings; flags override it.")
@click.option("--preset", type=click.Choice([str(k) for k in PRESET_SEEDS]), default=None,
              help="Reference run: 50 epochs with seed 42, or 100 epochs with seed 43.")
@click.option("--epochs", default=50, show_default=True, type=click.IntRange(min=1),
              help="Epochs to train (reference runs use 50 and 100).")
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--batch-size", default=32, show_default=True, type=click.IntRange(min=1))
@click.option("--lr", default=1e-3, show_default=True, type=float, help="Adam learning rate.")
@click.option("--split", default=0.8, show_default=True,
              type=click.FloatRange(0, 1, min_open=True, max_open=True),
              help="Fraction of each class used for training.")
@click.option("--quality", "jpeg_quality", default=DEFAULT_QUALITY, show_default=True,
              type=click.IntRange(1, 100), help="ELA JPEG quality.")
@click.option("--out", "out_path", default="model.elacnn", show_default=True,
              help="Final model archive; the best-validation archive goes next to it.")
@click.option("--history", "history_path", default="history.csv", show_default=True,
              help="Per-epoch metrics CSV.")
@click.option("--plot", "plot_path", default=None, help="Also render accuracy/loss curves to PNG.")
@click.option("--authentic-dir", default="Au", show_default=True)
@click.option("--tampered-dir", default="Tp", show_default=True)
@click.option("--cache-dir", default=None,
              help=f"ELA tensor cache directory [default: ${CACHE_ENV} or ~/.cache/elacnn].")
@click.option("--no-cache", is_flag=True, help="Recompute ELA tensors every epoch.")
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1),
              help="Threads used to decode images.")
@click.pass_context
def cmd_train(ctx, data_root, config_file, preset, epochs, seed, batch_size, lr, split,
              jpeg_quality, out_path, history_path, plot_path, authentic_dir, tampered_dir,
              cache_dir, no_cache, workers):
    """Train the network on a CASIA-style tree and write archive and history.

    Settings resolve in order: built-in defaults, --preset, --config, then
    any flag given explicitly on the command line.
    """
    try:
        cfg = _train_config(config_file, preset, ctx, epochs=epochs, seed=seed,
                            batch_size=batch_size, lr=lr, split=split, jpeg_quality=jpeg_quality)
    except (ContractError, TypeError, ValueError) as exc:
        fail(f"bad configuration: {exc}", EXIT_INPUT)
    blob = json.dumps(cfg.to_dict(), sort_keys=True)
    click.echo(f"config {blob} digest={cfg.digest()[:16]} backend={kernels.backend_name()}",
               err=True)
    try:
        manifest = scan_directory(data_root, authentic_dir, tampered_dir)
        manifest.require_both_classes()
        split_stratified(manifest, cfg.split_ratio, cfg.seed)
    except (IngestionError, SplitError) as exc:
        fail(str(exc), EXIT_INGEST)

    model = build_model(cfg.seed, input_shape=(cfg.ela.target_height, cfg.ela.target_width, 3))
    out_path = Path(out_path)
    best_path = out_path.with_name(out_path.stem + ".best" + out_path.suffix)
    try:
        _, history, _ = train(model, manifest, cfg, _cache(cache_dir, no_cache),
                              checkpoint=best_path, workers=workers)
    except TrainingInterrupted as exc:
        if exc.history:
            export_history(exc.history, history_path)
        fail(f"{exc}; partial history written to {history_path}", EXIT_TRAIN)
    except (DataItemError, TrainingError, ContractError) as exc:
        fail(str(exc), EXIT_TRAIN)

    save_model(model, out_path, cfg)
    export_history(history, history_path)
    if plot_path:
        plot_history(history, plot_path)
    last = history[-1]
    click.echo(f"train loss {last.train_loss:.6f} acc {last.train_acc:.4f}")
    click.echo(f"val   loss {last.val_loss:.6f} acc {last.val_acc:.4f}")


@main.command("eval")
@click.option("--model", "model_path", required=True, help="Model archive.")
@click.option("--data-root", required=True, type=click.Path(file_okay=False))
@click.option("--split-side", type=click.Choice(["val", "train"]), default="val", show_default=True)
@click.option("--split", "split_ratio", default=None, type=float,
              help="Override the split ratio recorded in the archive.")
@click.option("--authentic-dir", default="Au", show_default=True)
@click.option("--tampered-dir", default="Tp", show_default=True)
@click.option("--cache-dir", default=None)
@click.option("--no-cache", is_flag=True)
def cmd_eval(model_path, data_root, split_side, split_ratio, authentic_dir, tampered_dir,
             cache_dir, no_cache):
    """Loss and accuracy on one side of the split the archive was trained with."""
    model, header = _load_archive(model_path)
    seed = header.get("seed") if header.get("seed") is not None else 42
    ratio = split_ratio or header.get("split_ratio") or 0.8
    ela = _ela_from_header(header)
    click.echo(f"eval seed={seed} split={ratio} side={split_side}", err=True)
    try:
        manifest = scan_directory(data_root, authentic_dir, tampered_dir)
        split = split_stratified(manifest, ratio, seed)
    except (IngestionError, SplitError) as exc:
        fail(str(exc), EXIT_INGEST)
    indices = split.val if split_side == "val" else split.train
    try:
        loss, acc = evaluate(model, ManifestSource(manifest, ela, _cache(cache_dir, no_cache)),
                             indices)
    except DataItemError as exc:
        fail(str(exc), EXIT_INPUT)
    click.echo(f"loss {loss:.6f}")
    click.echo(f"accuracy {acc:.4f}")


@main.command("predict")
@click.option("--model", "model_path", required=True, help="Model archive.")
@click.option("--input", "input_path", required=True, help="Image to classify.")
@click.option("--json", "as_json", is_flag=True, help="Emit a JSON object.")
def cmd_predict(model_path, input_path, as_json):
    """Class probabilities for a single image."""
    model, header = _load_archive(model_path)
    try:
        result = predict(model, input_path, _ela_from_header(header))
    except FileNotFoundError:
        fail(f"input not found: {input_path}", EXIT_INPUT)
    except CodecError as exc:
        fail(str(exc), EXIT_INPUT)
    if as_json:
        click.echo(json.dumps(result.to_dict()))
    else:
        click.echo(f"label {result.label}")
        click.echo(f"authentic {result.p_authentic:.6f}")
        click.echo(f"tampered {result.p_tampered:.6f}")


@main.command("inspect")
@click.option("--model", "model_path", required=True, help="Model archive.")
def cmd_inspect(model_path):
    """Per-layer output shapes and parameter counts."""
    model, _ = _load_archive(model_path)
    shape = model.input_shape
    click.echo(f"{'#':>2}  {'layer':<10} {'output shape':<16} {'params':>10}")
    click.echo(f"{'':>2}  {'input':<10} {str(shape):<16} {0:>10}")
    for i, (layer, out) in enumerate(zip(model.layers, model.shape_trace()), 1):
        click.echo(f"{i:>2}  {layer.kind:<10} {str(out):<16} {layer.param_count:>10}")
    click.echo(f"{'':>2}  {'total':<10} {'':<16} {model.total_params:>10,}")


if __name__ == "__main__":
    main()
