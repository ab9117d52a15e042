"""
The experiments behind the command-line interface.

Every function here is deterministic given its configuration, and returns its results
instead of printing them. Files are only written where a function says so.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import itertools
import json
import logging
import pathlib
from collections.abc import Callable, Iterable, Sequence
from typing import Any, TypeVar

import numpy as np
import torch

from hitok import arsr, config, formats, grid, hit, msrq, toycodec
from hitok import codebook as cb_module


logger = logging.getLogger(__name__)

_A = TypeVar("_A")
_B = TypeVar("_B")

# Relative rise of the per-epoch residual that is reported as a regression.
RESIDUAL_TOLERANCE = 0.01


def parallel_map(fn: Callable[[_A], _B], items: Iterable[_A], threads: int) -> list[_B]:
    """
    Map fn over items with a thread pool, keeping the input order.
    """
    if threads <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def pin_threads(threads: int) -> None:
    torch.set_num_threads(threads)


def corpus(cfg: config.ExperimentConfig, *, count: int | None = None, seed: int | None = None) -> list[toycodec.Image]:
    return toycodec.synthetic_corpus(
        cfg.corpus.count if count is None else count,
        cfg.corpus.size,
        cfg.corpus.seed if seed is None else seed,
    )


def multiscale_features(
    images: Sequence[toycodec.Image],
    codec: toycodec.PatchCodec,
    sched: msrq.ScaleSchedule,
    threads: int = 1,
) -> list[hit.MultiScaleFeatures]:
    return parallel_map(
        lambda image: hit.MultiScaleFeatures.from_image(image, codec, sched), images, threads
    )


# Codebook training
# -----------------


@dataclasses.dataclass(frozen=True)
class CodebookTraining:
    codebook: cb_module.Codebook
    # Mean final residual norm over the corpus: before every epoch, then after the last.
    residuals: tuple[float, ...]


def multilevel_samples(
    feats: Sequence[hit.MultiScaleFeatures], sched: msrq.ScaleSchedule
) -> grid.FloatArray:
    samples = []
    for f in feats:
        native = f.per_scale[-1]
        for rho in sched.resolutions:
            pooled = grid.area_downsample(native, (rho, rho))
            samples.append(pooled.data.reshape(pooled.channels, -1).T)
    return np.concatenate(samples)


def mean_final_residual(
    feats: Sequence[hit.MultiScaleFeatures],
    sched: msrq.ScaleSchedule,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
) -> float:
    norms = []
    for f in feats:
        t = hit.encode_hierarchical(f, sched, cb, phi)
        norms.append(msrq.residual_norms(f.per_scale[-1], t, cb, phi)[-1])
    return float(np.mean(norms))


def train_codebook(
    feats: Sequence[hit.MultiScaleFeatures],
    sched: msrq.ScaleSchedule,
    cb_cfg: config.CodebookConfig,
    phi: grid.PhiBank,
) -> CodebookTraining:
    """
    Fit a codebook to the residuals the hierarchical tokenizer actually quantizes.

    The codes start from k-means++ over the native latents pooled to every level
    resolution. Each epoch then encodes the corpus, moves every used code toward
    the mean of the residual features assigned to it, and reseeds unused codes.

    Raises:
        codebook.NotEnoughSamples: If the corpus has fewer feature vectors than codes.
    """
    metric = cb_module.Metric(cb_cfg.metric)
    cb = cb_module.init_codebook(multilevel_samples(feats, sched), cb_cfg.size, cb_cfg.seed, metric=metric)
    residuals: list[float] = []
    for epoch in range(cb_cfg.epochs):
        pairs: list[tuple[grid.LatentGrid, cb_module.IndexArray]] = []
        norms = []
        for f in feats:
            t = hit.encode_hierarchical(f, sched, cb, phi, record=pairs)
            norms.append(msrq.residual_norms(f.per_scale[-1], t, cb, phi)[-1])
        residuals.append(float(np.mean(norms)))
        _warn_on_rise(epoch, residuals)

        features = np.concatenate([target.data.reshape(target.channels, -1).T for target, _ in pairs])
        indices = np.concatenate([chosen.reshape(-1) for _, chosen in pairs])
        cb = cb_module.ema_update(cb, features, indices, cb_cfg.decay)
        usage = np.bincount(indices, minlength=cb.size)
        cb = cb_module.reseed_dead_codes(cb, features, usage)
        logger.info(
            "codebook epoch=%d residual=%.4f used=%d/%d",
            epoch,
            residuals[-1],
            int(np.count_nonzero(usage)),
            cb.size,
        )
    residuals.append(mean_final_residual(feats, sched, cb, phi))
    _warn_on_rise(cb_cfg.epochs, residuals)
    return CodebookTraining(cb, tuple(residuals))


def _warn_on_rise(epoch: int, residuals: Sequence[float]) -> None:
    if len(residuals) >= 2 and residuals[-1] > residuals[-2] * (1 + RESIDUAL_TOLERANCE):
        logger.warning(
            "codebook residual rose epoch=%d before=%.4f after=%.4f",
            epoch,
            residuals[-2],
            residuals[-1],
        )


def run_train_codebook(cfg: config.ExperimentConfig) -> tuple[pathlib.Path, CodebookTraining]:
    """
    Train a codebook on the configured corpus and write it to the output directory.
    """
    sched = cfg.build_schedule()
    feats = multiscale_features(corpus(cfg), cfg.build_codec(), sched, cfg.worker_threads)
    result = train_codebook(feats, sched, cfg.codebook, cfg.build_phi())
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / cfg.codebook.path
    formats.write_codebook(result.codebook, path)
    (out / "codebook-residuals.json").write_text(json.dumps({"residuals": list(result.residuals)}))
    return path, result


def load_codebook(cfg: config.ExperimentConfig) -> cb_module.Codebook:
    """
    Raises:
        FileNotFoundError: If the codebook has not been trained yet.
    """
    path = cfg.output_dir / cfg.codebook.path
    if not path.exists():
        raise FileNotFoundError(f"No codebook at {path}; run train-codebook first.")
    return formats.read_codebook(path)


# Tokenizing and reconstructing
# -----------------------------


MODES = ("baseline", "hit")


def tokenize(
    image: toycodec.Image,
    mode: str,
    sched: msrq.ScaleSchedule,
    codec: toycodec.PatchCodec,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
) -> tuple[msrq.TokenSequence, dict[str, Any]]:
    """
    Tokenize one image, with plain next-scale quantization or hierarchically.

    The report holds the group boundaries and the residual norms after every level:
    at the native resolution for the baseline, per scale group for the hierarchical mode.

    Raises:
        ValueError: If mode is not one of MODES.
    """
    if mode == "baseline":
        z = codec.encode_image(image)
        t = msrq.encode_nextscale(z, sched, cb, phi)
        norms: Any = msrq.residual_norms(z, t, cb, phi)
    elif mode == "hit":
        feats = hit.MultiScaleFeatures.from_image(image, codec, sched)
        t = hit.encode_hierarchical(feats, sched, cb, phi)
        norms = hit.group_residual_norms(feats, t, cb, phi)
    else:
        raise ValueError(f"Unknown mode {mode!r}; expected one of {', '.join(MODES)}.")
    report = {
        "mode": mode,
        "schedule": sched.to_json(),
        "digest": sched.digest.hex(),
        "token_count": sched.token_count,
        "group_boundaries": list(sched.group_boundaries),
        "residual_norms": norms,
    }
    return t, report


def reconstruct(
    t: msrq.TokenSequence,
    n: int,
    codec: toycodec.PatchCodec,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    reference: toycodec.Image | None = None,
) -> tuple[toycodec.Image, dict[str, float | int]]:
    """
    Decode the image at (1-based) scale n, and score it against the reference
    downsampled to the same size when one is given.

    Raises:
        hit.ScaleOutOfRange: If n is outside 1..N.
        msrq.InvalidTokens: If t and cb disagree on the vocabulary size.
    """
    z = hit.decode_at_scale(t, n, cb, phi)
    image = codec.decode_latent(z)
    metrics: dict[str, float | int] = {"scale": n, "height": image.height, "width": image.width}
    if reference is not None:
        target = toycodec.resize_image(reference, image.height)
        metrics["psnr"] = toycodec.psnr(image, target)
        metrics["ssim"] = toycodec.ssim(image, target)
    return image, metrics


def scale_psnrs(
    image: toycodec.Image,
    t: msrq.TokenSequence,
    codec: toycodec.PatchCodec,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
) -> list[float]:
    """PSNR of the decode at every scale against the image resized to that scale."""
    results = []
    for n in range(1, t.schedule.scale_count + 1):
        _, metrics = reconstruct(t, n, codec, cb, phi, image)
        results.append(float(metrics["psnr"]))
    return results


# Super-resolution
# ----------------


def sr_examples(
    cfg: config.ExperimentConfig,
    images: Sequence[toycodec.Image],
    cb: cb_module.Codebook,
) -> list[arsr.SrExample]:
    sched = cfg.build_schedule()
    codec = cfg.build_codec()
    phi = cfg.build_phi()
    d = cfg.degradation

    def build(item: tuple[int, toycodec.Image]) -> arsr.SrExample:
        index, hr = item
        lr = toycodec.degrade(hr, d.blur_sigma, d.factor, d.noise_sigma, seed=d.seed + index)
        return arsr.build_example(hr, lr, codec, sched, cb, phi, cfg.cond_side)

    return parallel_map(build, list(enumerate(images)), cfg.worker_threads)


def ar_config(cfg: config.ExperimentConfig, cb: cb_module.Codebook) -> arsr.ArConfig:
    m = cfg.model
    return arsr.ArConfig(
        vocab_size=cb.size,
        latent_dim=cb.dim,
        depth=m.depth,
        heads=m.heads,
        width=m.width,
        mlp_ratio=m.mlp_ratio,
        max_grid=m.max_grid,
        cond_grid=cfg.cond_side,
        zero_head=m.zero_head,
    )


@dataclasses.dataclass(frozen=True)
class ArTraining:
    model: arsr.ArModel
    records: tuple[arsr.TrainRecord, ...]
    examples: tuple[arsr.SrExample, ...]


def train_ar(
    cfg: config.ExperimentConfig,
    cb: cb_module.Codebook,
    images: Sequence[toycodec.Image],
    *,
    use_dpo: bool | None = None,
    log_path: pathlib.Path | None = None,
) -> ArTraining:
    """
    Train the next-scale model on (degraded, original) pairs of the given images.
    """
    t = cfg.training
    examples = sr_examples(cfg, images, cb)
    model = arsr.build_model(ar_config(cfg, cb), cfg.build_schedule(), t.seed)
    records = arsr.train(
        model,
        examples,
        steps=t.steps,
        lr=t.lr,
        beta=t.beta,
        use_dpo=t.use_dpo if use_dpo is None else use_dpo,
        batch_size=t.batch_size,
        seed=t.seed,
        log_path=log_path,
    )
    return ArTraining(model, tuple(records), tuple(examples))


def run_train_ar(cfg: config.ExperimentConfig) -> tuple[pathlib.Path, ArTraining]:
    """
    Train on the configured corpus; write the checkpoint and a JSON-lines loss log.

    Raises:
        FileNotFoundError: If the codebook has not been trained yet.
    """
    cb = load_codebook(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train-log.jsonl"
    log_path.unlink(missing_ok=True)
    result = train_ar(cfg, cb, corpus(cfg), log_path=log_path)
    path = out / cfg.training.checkpoint
    arsr.save_checkpoint(result.model, path)
    return path, result


def super_resolve(
    model: arsr.ArModel,
    lr: toycodec.Image,
    codec: toycodec.PatchCodec,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    cond_side: int | None = None,
    strategy: arsr.Greedy | arsr.TopK = arsr.Greedy(),
) -> tuple[msrq.TokenSequence, list[toycodec.Image]]:
    """
    Sample one token sequence for the LR image and decode it at every scale group boundary.
    """
    sched = model.schedule
    cond = arsr.conditioning(lr, sched.native * codec.patch, codec, cond_side)
    t = arsr.sample_nextscale(model, cond, sched, cb, phi, strategy)
    images = [
        codec.decode_latent(hit.decode_at_scale(t, n, cb, phi))
        for n in range(1, sched.scale_count + 1)
    ]
    return t, images


# Allocation sweep
# ----------------


def default_partitions(resolutions: Sequence[int], max_scales: int = 3) -> list[msrq.ScaleSchedule]:
    """
    Every schedule over resolutions with 1..max_scales target scales.

    The intermediate scales are chosen among the level sides below ρ_L.
    """
    native = resolutions[-1]
    schedules = []
    for count in range(max_scales):
        for sides in itertools.combinations(resolutions[:-1], count):
            scales = tuple(side / native for side in sides) + (1.0,)
            schedules.append(msrq.ScaleSchedule(tuple(resolutions), scales))
    return schedules


@dataclasses.dataclass(frozen=True)
class SweepRow:
    schedule: msrq.ScaleSchedule
    token_count: int
    # Mean PSNR over the images at every scale of the schedule, the last being full resolution.
    psnr: tuple[float, ...]

    @property
    def full_psnr(self) -> float:
        return self.psnr[-1]


def sweep_allocation(
    images: Sequence[toycodec.Image],
    schedules: Sequence[msrq.ScaleSchedule],
    codec: toycodec.PatchCodec,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    threads: int = 1,
) -> list[SweepRow]:
    """
    Reconstruction quality at every scale, and the token count, of each schedule.
    """
    rows = []
    for sched in schedules:

        def score(image: toycodec.Image, sched: msrq.ScaleSchedule = sched) -> list[float]:
            feats = hit.MultiScaleFeatures.from_image(image, codec, sched)
            return scale_psnrs(image, hit.encode_hierarchical(feats, sched, cb, phi), codec, cb, phi)

        scores = np.asarray(parallel_map(score, images, threads))
        row = SweepRow(sched, sched.token_count, tuple(float(v) for v in scores.mean(axis=0)))
        logger.info("sweep scales=%s tokens=%d psnr=%.2f", sched.target_scales, row.token_count, row.full_psnr)
        rows.append(row)
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: pathlib.Path) -> None:
    width = max(len(row.psnr) for row in rows)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["resolutions", "target_scales", "token_count"]
            + [f"psnr_scale_{n}" for n in range(1, width + 1)]
            + ["psnr_full"]
        )
        for row in rows:
            padded = [f"{v:.4f}" for v in row.psnr] + [""] * (width - len(row.psnr))
            writer.writerow(
                [
                    " ".join(str(r) for r in row.schedule.resolutions),
                    " ".join(f"{s:g}" for s in row.schedule.target_scales),
                    row.token_count,
                ]
                + padded
                + [f"{row.full_psnr:.4f}"]
            )


def parse_schedules(text: str) -> list[msrq.ScaleSchedule]:
    """
    Read a JSON list of {"resolutions": [...], "target_scales": [...]} objects.

    Raises:
        msrq.InvalidSchedule: If an entry is not a valid schedule.
    """
    entries = json.loads(text)
    if not isinstance(entries, list):
        raise msrq.InvalidSchedule("Expected a list of schedules.")
    schedules = []
    for entry in entries:
        try:
            schedules.append(
                msrq.ScaleSchedule(tuple(entry["resolutions"]), tuple(entry["target_scales"]))
            )
        except (KeyError, TypeError) as e:
            raise msrq.InvalidSchedule(f"Malformed schedule entry {entry!r}.") from e
    return schedules
