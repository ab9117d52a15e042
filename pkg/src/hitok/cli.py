"""
The `hitok` command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure, 3 I/O error.
"""

import contextlib
import enum
import json
import logging
import pathlib
from collections.abc import Iterator
from typing import Annotated, Optional

import rich
import typer
from rich.logging import RichHandler
from rich.table import Table

from hitok import arsr, config, experiments, formats, toycodec, verify


EXIT_USAGE = 1
EXIT_VERIFICATION = 2
EXIT_IO = 3

app = typer.Typer(no_args_is_help=True, help="Hierarchical image tokenization experiments.")
logger = logging.getLogger("hitok")


ConfigOption = Annotated[
    Optional[pathlib.Path],
    typer.Option("--config", help="Experiment configuration (JSON). Defaults when omitted."),
]
SeedOption = Annotated[
    Optional[int], typer.Option("--seed", help="Replace every seed of the configuration.")
]
ThreadsOption = Annotated[
    Optional[int],
    typer.Option("--threads", min=1, help="Worker threads; 1 makes every command bit-reproducible."),
]
VerboseOption = Annotated[bool, typer.Option("--verbose", "-v", help="Log at DEBUG level.")]


class Mode(str, enum.Enum):
    baseline = "baseline"
    hit = "hit"


class Suite(str, enum.Enum):
    quick = "quick"
    full = "full"


def _setup_logging(verbose: bool) -> None:
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        logger.addHandler(RichHandler(show_path=False))
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


@contextlib.contextmanager
def _exit_codes() -> Iterator[None]:
    try:
        yield
    except (OSError, formats.FormatError) as e:
        rich.print(f"[red]I/O error:[/] {e}")
        raise typer.Exit(EXIT_IO)
    except (config.ConfigError, ValueError) as e:
        rich.print(f"[red]Error:[/] {e}")
        raise typer.Exit(EXIT_USAGE)


def _prepare(
    config_path: pathlib.Path | None, seed: int | None, threads: int | None, verbose: bool
) -> config.ExperimentConfig:
    _setup_logging(verbose)
    cfg = config.load_config(config_path).with_overrides(seed=seed, threads=threads)
    experiments.pin_threads(cfg.worker_threads)
    return cfg


def _load_image(path: pathlib.Path) -> toycodec.Image:
    if path.suffix == ".raw":
        return formats.read_raw_image(path)
    return toycodec.load_png(path)


@app.command("train-codebook")
def train_codebook(
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """
    Train the vocabulary on the synthetic corpus.
    """
    with _exit_codes():
        cfg = _prepare(config_path, seed, threads, verbose)
        path, result = experiments.run_train_codebook(cfg)
    table = Table("epoch", "mean residual")
    for epoch, residual in enumerate(result.residuals):
        table.add_row(str(epoch), f"{residual:.4f}")
    rich.print(table)
    rich.print(f"[green]Codebook written to[/] {path}")


@app.command()
def tokenize(
    image_path: Annotated[pathlib.Path, typer.Argument(help="PNG or .raw image.")],
    mode: Annotated[Mode, typer.Option(help="Tokenizer to use.")] = Mode.hit,
    out: Annotated[Optional[pathlib.Path], typer.Option(help="Token file to write.")] = None,
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """
    Tokenize one image; writes the token file and a JSON report beside it.
    """
    with _exit_codes():
        cfg = _prepare(config_path, seed, threads, verbose)
        cb = experiments.load_codebook(cfg)
        image = _load_image(image_path)
        t, report = experiments.tokenize(
            image, mode.value, cfg.build_schedule(), cfg.build_codec(), cb, cfg.build_phi()
        )
        if out is None:
            cfg.output_dir.mkdir(parents=True, exist_ok=True)
            out = cfg.output_dir / f"{image_path.stem}.{mode.value}.tok"
        formats.write_tokens(t, out)
        out.with_suffix(".json").write_text(json.dumps(report, indent=2))
    rich.print(f"[green]{t.schedule.token_count} tokens written to[/] {out}")
    rich.print(f"Group boundaries: {report['group_boundaries']}")


@app.command()
def reconstruct(
    tokens_path: Annotated[pathlib.Path, typer.Argument(help="Token file.")],
    scale: Annotated[int, typer.Option(help="Scale to decode, 1..N.")] = 1,
    reference: Annotated[
        Optional[pathlib.Path], typer.Option(help="Full-resolution ground truth for metrics.")
    ] = None,
    out: Annotated[Optional[pathlib.Path], typer.Option(help="PNG to write.")] = None,
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """
    Decode a token file at one scale, optionally scoring it against a reference.
    """
    with _exit_codes():
        cfg = _prepare(config_path, seed, threads, verbose)
        cb = experiments.load_codebook(cfg)
        t = formats.read_tokens(tokens_path)
        ref = _load_image(reference) if reference is not None else None
        image, metrics = experiments.reconstruct(t, scale, cfg.build_codec(), cb, cfg.build_phi(), ref)
        if out is None:
            out = tokens_path.with_name(f"{tokens_path.stem}.scale{scale}.png")
        toycodec.save_png(image, out)
        out.with_suffix(".json").write_text(json.dumps(metrics, indent=2))
    rich.print(json.dumps(metrics))


@app.command("train-ar")
def train_ar(
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """
    Train the next-scale super-resolution model; needs a trained codebook.
    """
    with _exit_codes():
        cfg = _prepare(config_path, seed, threads, verbose)
        path, result = experiments.run_train_ar(cfg)
    last = result.records[-1]
    rich.print(f"[green]Checkpoint written to[/] {path}")
    rich.print(f"Final losses: ce={last.ce:.4f} dpo={last.dpo:.4f}")


@app.command("super-resolve")
def super_resolve(
    lr_path: Annotated[pathlib.Path, typer.Argument(help="Low-resolution PNG or .raw image.")],
    checkpoint: Annotated[Optional[pathlib.Path], typer.Option(help="Model checkpoint.")] = None,
    top_k: Annotated[Optional[int], typer.Option(min=1, help="Sample from the top k instead of greedy.")] = None,
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """
    Upscale one image in a single sampling pass; writes an image per scale.
    """
    with _exit_codes():
        cfg = _prepare(config_path, seed, threads, verbose)
        cb = experiments.load_codebook(cfg)
        model = arsr.load_checkpoint(checkpoint or cfg.output_dir / cfg.training.checkpoint)
        if model.schedule != cfg.build_schedule():
            raise arsr.ShapeMismatch("The checkpoint was trained for a different schedule.")
        strategy: arsr.Greedy | arsr.TopK = (
            arsr.Greedy() if top_k is None else arsr.TopK(top_k, cfg.training.seed)
        )
        _, images = experiments.super_resolve(
            model, _load_image(lr_path), cfg.build_codec(), cb, cfg.build_phi(), cfg.cond_side, strategy
        )
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        for n, image in enumerate(images, start=1):
            path = cfg.output_dir / f"{lr_path.stem}.sr{n}.png"
            toycodec.save_png(image, path)
            rich.print(f"Scale {n}: {image.height}×{image.width} written to {path}")


@app.command("sweep-allocation")
def sweep_allocation(
    schedules: Annotated[
        Optional[pathlib.Path],
        typer.Option(help="JSON list of schedules; the 1-, 2- and 3-scale partitions when omitted."),
    ] = None,
    out: Annotated[Optional[pathlib.Path], typer.Option(help="CSV to write.")] = None,
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """
    Reconstruction quality and token count for each way of splitting the levels into scales.
    """
    with _exit_codes():
        cfg = _prepare(config_path, seed, threads, verbose)
        cb = experiments.load_codebook(cfg)
        if schedules is None:
            candidates = experiments.default_partitions(cfg.build_schedule().resolutions)
        else:
            candidates = experiments.parse_schedules(schedules.read_text())
        rows = experiments.sweep_allocation(
            experiments.corpus(cfg), candidates, cfg.build_codec(), cb, cfg.build_phi(), cfg.worker_threads
        )
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        out = out or cfg.output_dir / "sweep.csv"
        experiments.write_sweep_csv(rows, out)
    rich.print(f"[green]{len(rows)} schedules written to[/] {out}")


@app.command("verify")
def verify_suite(
    suite: Annotated[Suite, typer.Option(help="quick runs in seconds; full trains models.")] = Suite.quick,
    check: Annotated[Optional[list[str]], typer.Option(help="Run only the named checks.")] = None,
    threads: ThreadsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """
    Run the invariant suite; exits with 2 when any check fails.
    """
    _setup_logging(verbose)
    experiments.pin_threads(threads or 1)
    try:
        results = verify.run(suite.value, check or ())
    except KeyError as e:
        rich.print(f"[red]Error:[/] {e}")
        raise typer.Exit(EXIT_USAGE)
    table = Table("check", "result", "seconds", "detail")
    for result in results:
        status = "[green]pass" if result.passed else "[red]FAIL"
        table.add_row(result.name, status, f"{result.seconds:.1f}", result.detail)
    rich.print(table)
    if not all(result.passed for result in results):
        raise typer.Exit(EXIT_VERIFICATION)


def main() -> None:
    app()
