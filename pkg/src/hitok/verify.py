"""
The invariant suite behind `hitok verify`.

Checks are registered by name into a suite: "quick" holds the structural constants,
oracles and invariants that run in seconds; "full" adds the experiments that need a
trained codebook or a trained model.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections.abc import Callable, Sequence

import numpy as np
import torch

from hitok import arsr, config, experiments, grid, hit, msrq, toycodec
from hitok import codebook as cb_module


logger = logging.getLogger(__name__)

SUITES = ("quick", "full")


@dataclasses.dataclass(frozen=True)
class Outcome:
    passed: bool
    detail: str


@dataclasses.dataclass(frozen=True)
class Check:
    name: str
    suite: str
    passed: bool
    detail: str
    seconds: float


_REGISTRY: dict[str, tuple[str, Callable[[], Outcome]]] = {}


def check(name: str, suite: str = "quick") -> Callable[[Callable[[], Outcome]], Callable[[], Outcome]]:
    def register(fn: Callable[[], Outcome]) -> Callable[[], Outcome]:
        _REGISTRY[name] = (suite, fn)
        return fn

    return register


def names(suite: str = "full") -> list[str]:
    """The checks run by suite; "full" includes the quick ones."""
    if suite not in SUITES:
        raise ValueError(f"Unknown suite {suite!r}.")
    return [n for n, (s, _) in _REGISTRY.items() if suite == "full" or s == suite]


def run(suite: str = "quick", only: Sequence[str] = ()) -> list[Check]:
    """
    Run every check of the suite (or just the named ones) and collect the results.

    A check that raises is reported as failed with the exception as its detail.
    """
    selected = list(only) or names(suite)
    results = []
    for name in selected:
        if name not in _REGISTRY:
            raise KeyError(f"Unknown check {name!r}.")
        check_suite, fn = _REGISTRY[name]
        start = time.perf_counter()
        try:
            outcome = fn()
        except Exception as e:
            outcome = Outcome(False, f"{type(e).__name__}: {e}")
        seconds = time.perf_counter() - start
        logger.info("check name=%s passed=%s seconds=%.1f", name, outcome.passed, seconds)
        results.append(Check(name, check_suite, outcome.passed, outcome.detail, seconds))
    return results


# Shared toy setups
# -----------------


SMALL_SCHEDULE = msrq.ScaleSchedule((1, 2, 3, 4, 6, 8), (0.25, 0.5, 1.0))
TOY_SCHEDULE = msrq.ScaleSchedule((1, 2, 4, 8), (0.25, 0.5, 1.0))


def toy_experiment(**training: object) -> config.ExperimentConfig:
    """The 128-pixel memorization setup used by the trained-model checks."""
    return config.from_mapping(
        {
            "schedule": {"resolutions": [1, 2, 4, 8], "target_scales": [0.25, 0.5, 1.0]},
            "codebook": {"size": 256, "epochs": 3, "seed": 0},
            "corpus": {"count": 10, "size": 128, "seed": 0},
            "model": {"depth": 2, "heads": 4, "width": 64, "max_grid": 8},
            "training": {"steps": 300, "lr": 3e-3, "batch_size": 10, "use_dpo": False, **training},
            "threads": 1,
        }
    )


def random_codebook(k: int, dim: int, seed: int, *, with_zero: bool = False) -> cb_module.Codebook:
    vectors = np.random.default_rng(seed).normal(size=(k, dim))
    if with_zero:
        vectors[0] = 0.0
    return cb_module.Codebook(vectors, cb_module.Metric.L2)


def _non_increasing(values: Sequence[float]) -> bool:
    return all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(values, values[1:]))


def toy_model(seed: int = 0, *, width: int = 32) -> tuple[arsr.ArModel, arsr.PackedBatch]:
    """A float64 width-32, depth-2 model and one random packed sequence for it."""
    sched = TOY_SCHEDULE
    dim, k = 4, 16
    rng = np.random.default_rng(seed)
    cb = random_codebook(k, dim, seed)
    levels = tuple(rng.integers(0, k, (rho, rho)) for rho in sched.resolutions)
    t = msrq.TokenSequence(levels, sched, k)
    cond = grid.LatentGrid(rng.normal(size=(dim, 4, 4)))
    cfg = arsr.ArConfig(vocab_size=k, latent_dim=dim, depth=2, heads=4, width=width, max_grid=8, cond_grid=4)
    model = arsr.build_model(cfg, sched, seed).double()
    return model, arsr.pack_sequence(t, cond, cb, grid.PhiParams.identity(dim))


# Quick checks
# ------------


@check("structural-constants")
def structural_constants() -> Outcome:
    sched = msrq.DEFAULT_SCHEDULE
    codec = toycodec.PatchCodec()
    cond = codec.encode_image(toycodec.Image(np.zeros((3, 512, 512))))
    groups = tuple(tuple(sched.group_levels(n)) for n in range(sched.scale_count))
    found = (sched.token_count, sched.group_boundaries, cond.height * cond.width, groups)
    expected = (3452, (116, 668, 3452), 1024, ((0, 1, 2), (3, 4, 5), (6, 7, 8, 9)))
    return Outcome(found == expected, f"found {found}")


@check("prefix-sharing")
def prefix_sharing(count: int = 50) -> Outcome:
    sched = SMALL_SCHEDULE
    codec = toycodec.PatchCodec()
    phi = grid.PhiParams.identity(codec.n_z)
    images = toycodec.synthetic_corpus(count, sched.native * codec.patch, seed=1)
    feats = experiments.multiscale_features(images, codec, sched)
    cb = cb_module.init_codebook(
        experiments.multilevel_samples(feats[:10], sched), 64, seed=0, metric=cb_module.Metric.L2
    )
    failures = 0
    for f in feats:
        t_full = hit.encode_hierarchical(f, sched, cb, phi)
        for n, t_small in enumerate(hit.prefix_encodings(f, sched, cb, phi)):
            failures += not hit.prefix_overlap_check(t_full, t_small, n + 1)
    return Outcome(failures == 0, f"{failures} mismatching prefixes over {count} images")


@check("quantization-oracle")
def quantization_oracle(cases: int = 1000) -> Outcome:
    rng = np.random.default_rng(5)
    failures = 0
    for case in range(cases):
        k, dim, side = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 3))
        metric = (cb_module.Metric.L2, cb_module.Metric.COSINE)[case % 2]
        cb = cb_module.Codebook(rng.normal(size=(k, dim)), metric)
        g = grid.LatentGrid(rng.normal(size=(dim, side, side)))
        found = cb_module.quantize_grid(g, cb).indices
        for i in range(side):
            for j in range(side):
                v = g.data[:, i, j]
                if metric is cb_module.Metric.L2:
                    scores = [-float(((v - c) ** 2).sum()) for c in cb.vectors]
                else:
                    scores = [float(np.dot(v / np.linalg.norm(v), c)) for c in cb.vectors]
                best = max(range(k), key=lambda index: (scores[index], -index))
                failures += int(found[i, j] != best or cb_module.nearest_code(v, cb) != best)
    return Outcome(failures == 0, f"{failures} disagreements with the exhaustive scan")


@check("monotone-residuals")
def monotone_residuals(count: int = 100) -> Outcome:
    sched = msrq.DEFAULT_SCHEDULE
    dim = 8
    rng = np.random.default_rng(7)
    cb = random_codebook(256, dim, seed=7, with_zero=True)
    phi = grid.PhiParams.identity(dim)
    violations = 0
    for _ in range(count):
        z = grid.LatentGrid(rng.normal(size=(dim, sched.native, sched.native)))
        t = msrq.encode_nextscale(z, sched, cb, phi)
        violations += not _non_increasing(msrq.residual_norms(z, t, cb, phi))

        feats = hit.MultiScaleFeatures(
            tuple(grid.LatentGrid(rng.normal(size=(dim, s, s))) for s in sched.scale_sizes)
        )
        t_hit = hit.encode_hierarchical(feats, sched, cb, phi)
        violations += sum(
            not _non_increasing(group) for group in hit.group_residual_norms(feats, t_hit, cb, phi)
        )
    return Outcome(violations == 0, f"{violations} non-monotone residual sequences")


@check("dpo-arithmetic")
def dpo_arithmetic() -> Outcome:
    logits = torch.randn(2, 7, 5, dtype=torch.float64, requires_grad=True)
    same = torch.randint(0, 5, (2, 7))
    loss = arsr.dpo_loss(logits, same, same)
    loss.backward()
    assert logits.grad is not None
    equal_ok = abs(loss.item() - 0.5 * math.log(2)) < 1e-9 and logits.grad.norm().item() < 1e-7

    hand = torch.tensor([[[5.0, 0.0]]], dtype=torch.float64)
    hand_loss = arsr.dpo_loss(hand, torch.tensor([[0]]), torch.tensor([[1]]), beta=0.2).item()
    hand_ok = abs(hand_loss - 0.5 * math.log1p(math.exp(-1))) < 1e-9
    return Outcome(equal_ok and hand_ok, f"equal={loss.item():.12f} hand={hand_loss:.12f}")


@check("gradients")
def gradients(samples: int = 24, step: float = 1e-6, tolerance: float = 1e-4) -> Outcome:
    model, batch = toy_model()
    rng = np.random.default_rng(3)
    lr_targets = rng.integers(0, model.config.vocab_size, batch.targets.shape)

    def losses() -> dict[str, torch.Tensor]:
        logits = arsr.forward_logits(model, batch)
        ce = arsr.ce_loss(logits, batch.targets)
        dpo = arsr.dpo_loss(logits, batch.targets, lr_targets)
        return {"ce": ce, "dpo": dpo, "composite": ce + dpo}

    params = [p for p in model.parameters() if p.requires_grad]
    worst = 0.0
    for name in ("ce", "dpo", "composite"):
        model.zero_grad()
        losses()[name].backward()
        for _ in range(samples):
            p = params[int(rng.integers(len(params)))]
            assert p.grad is not None
            index = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = p.grad[index].item()
            with torch.no_grad():
                original = p[index].item()
                p[index] = original + step
                plus = losses()[name].item()
                p[index] = original - step
                minus = losses()[name].item()
                p[index] = original
            numeric = (plus - minus) / (2 * step)
            worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-3))
    return Outcome(worst < tolerance, f"worst relative error {worst:.2e}")


@check("causality")
def causality(trials: int = 200) -> Outcome:
    model, batch = toy_model(seed=1)
    rng = np.random.default_rng(11)
    base = arsr.forward_logits(model, batch).detach()
    violations = 0
    for trial in range(trials):
        level = trial % (len(batch.level_spans) - 1)
        end = batch.level_spans[level][1]
        inputs = batch.inputs.copy()
        inputs[:, end:] += rng.normal(size=inputs[:, end:].shape)
        perturbed = dataclasses.replace(batch, inputs=inputs)
        logits = arsr.forward_logits(model, perturbed).detach()
        violations += not torch.equal(logits[:, :end], base[:, :end])
    return Outcome(violations == 0, f"{violations} of {trials} perturbations leaked backwards")


# Full checks
# -----------


def _trained_codebook(cfg: config.ExperimentConfig, images: Sequence[toycodec.Image]) -> cb_module.Codebook:
    sched = cfg.build_schedule()
    feats = experiments.multiscale_features(images, cfg.build_codec(), sched, cfg.worker_threads)
    return experiments.train_codebook(feats, sched, cfg.codebook, cfg.build_phi()).codebook


@check("scale-decodability", suite="full")
def scale_decodability(count: int = 16) -> Outcome:
    cfg = config.from_mapping({"codebook": {"epochs": 3}, "corpus": {"count": count}})
    images = experiments.corpus(cfg)
    cb = _trained_codebook(cfg, images)
    sched, codec, phi = cfg.build_schedule(), cfg.build_codec(), cfg.build_phi()
    gains = []
    for image in images:
        t_hit, _ = experiments.tokenize(image, "hit", sched, codec, cb, phi)
        t_base, _ = experiments.tokenize(image, "baseline", sched, codec, cb, phi)
        _, hit_metrics = experiments.reconstruct(t_hit, 1, codec, cb, phi, image)
        _, base_metrics = experiments.reconstruct(t_base, 1, codec, cb, phi, image)
        gains.append(float(hit_metrics["psnr"]) - float(base_metrics["psnr"]))
    mean, share = float(np.mean(gains)), float(np.mean(np.asarray(gains) > 0))
    return Outcome(mean >= 3.0 and share >= 0.9, f"mean gain {mean:.2f} dB, better on {share:.0%}")


@check("toy-super-resolution", suite="full")
def toy_super_resolution() -> Outcome:
    cfg = toy_experiment()
    images = experiments.corpus(cfg)
    cb = _trained_codebook(cfg, images)
    codec, phi = cfg.build_codec(), cfg.build_phi()
    trained = experiments.train_ar(cfg, cb, images)
    d = cfg.degradation
    reproduced = 0
    gains = []
    for index, (example, hr) in enumerate(zip(trained.examples, images)):
        lr = toycodec.degrade(hr, d.blur_sigma, d.factor, d.noise_sigma, seed=d.seed + index)
        t, outputs = experiments.super_resolve(trained.model, lr, codec, cb, phi, cfg.cond_side)
        if t != example.z_hr:
            continue
        reproduced += 1
        bilinear = toycodec.bilinear_resize(lr, (hr.height, hr.width))
        gains.append(toycodec.psnr(outputs[-1], hr) - toycodec.psnr(bilinear, hr))
    ok = reproduced >= 9 and all(g >= 2.0 for g in gains)
    return Outcome(ok, f"{reproduced}/10 reproduced, worst gain {min(gains, default=math.nan):.2f} dB")


@check("dpo-margin", suite="full")
def dpo_margin() -> Outcome:
    cfg = toy_experiment(steps=200)
    images = experiments.corpus(cfg)
    held_out = experiments.corpus(cfg, count=5, seed=99)
    cb = _trained_codebook(cfg, images)
    test = experiments.sr_examples(cfg, held_out, cb)
    margins = {}
    for use_dpo in (False, True):
        model = experiments.train_ar(cfg, cb, images, use_dpo=use_dpo).model
        margins[use_dpo] = arsr.preference_margin(model, test)
    return Outcome(margins[True] > margins[False], f"with {margins[True]:.3f}, without {margins[False]:.3f}")


@check("allocation-tradeoff", suite="full")
def allocation_tradeoff() -> Outcome:
    cfg = toy_experiment()
    images = experiments.corpus(cfg)
    cb = _trained_codebook(cfg, images)
    sched = cfg.build_schedule()
    rows = experiments.sweep_allocation(
        images, experiments.default_partitions(sched.resolutions), cfg.build_codec(), cb, cfg.build_phi()
    )
    best = max(rows, key=lambda row: row.full_psnr)
    single = rows[0]
    return Outcome(
        single.schedule.scale_count == 1 and best is single,
        f"single-scale {single.full_psnr:.2f} dB, best {best.full_psnr:.2f} dB at {best.schedule.target_scales}",
    )
