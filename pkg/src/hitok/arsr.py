"""
A small next-scale autoregressive transformer for super-resolution.

The sequence is the conditioning tokens (latent features of the upsampled
low-resolution image) followed by every level of a TokenSequence, coarse to fine.
All tokens of one level are predicted together: attention is full inside a level,
sees every coarser level and the conditioning, and never sees a finer level.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import math
import pathlib
from collections.abc import Sequence
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from hitok import codebook as cb_module
from hitok import formats, grid, hit, msrq, toycodec


logger = logging.getLogger(__name__)

DPO_BETA = 0.2

npt_bool = np.ndarray[Any, np.dtype[np.bool_]]


class ShapeMismatch(ValueError):
    """
    Raised when packed inputs, conditioning or logits do not fit the model.
    """


class InvalidTarget(ValueError):
    """
    Raised when a target index is outside the vocabulary.
    """


class SequenceMismatch(ValueError):
    """
    Raised when token sequences disagree with the logits or with each other in length.
    """


# Masks and packing
# -----------------


@functools.lru_cache(maxsize=32)
def _block_causal_mask(resolutions: tuple[int, ...], cond_len: int) -> npt_bool:
    level_of = np.concatenate(
        [np.full(cond_len, -1)] + [np.full(rho * rho, i) for i, rho in enumerate(resolutions)]
    )
    # Conditioning rows see the conditioning only; token rows see the conditioning,
    # every coarser level and their own level.
    mask = level_of[None, :] <= level_of[:, None]
    mask[:cond_len, :cond_len] = True
    mask.setflags(write=False)
    return mask


def block_causal_mask(sched: msrq.ScaleSchedule, cond_len: int) -> npt_bool:
    """
    Which positions may attend to which, conditioning first.

    mask[p, q] is True when position p may attend to position q. A token at level l
    sees all conditioning positions, every position of levels ≤ l, and nothing finer.
    Conditioning positions see each other.
    """
    return _block_causal_mask(sched.resolutions, cond_len)


@dataclasses.dataclass(frozen=True)
class PackedBatch:
    """
    A teacher-forcing layout of B sequences.

    inputs holds the latent input vector of every token position (B×T×C), targets the
    index to predict there (B×T), cond the conditioning latent vectors (B×Lc×C)
    laid out on a cond_side × cond_side grid.
    """

    inputs: grid.FloatArray
    targets: cb_module.IndexArray
    cond: grid.FloatArray
    cond_side: int
    level_spans: tuple[tuple[int, int], ...]

    @property
    def cond_span(self) -> tuple[int, int]:
        return 0, int(self.cond.shape[1])

    @property
    def positions(self) -> int:
        return int(self.cond.shape[1] + self.inputs.shape[1])

    @classmethod
    def stack(cls, batches: Sequence[PackedBatch]) -> PackedBatch:
        first = batches[0]
        for other in batches[1:]:
            if other.level_spans != first.level_spans or other.cond.shape[1:] != first.cond.shape[1:]:
                raise ShapeMismatch("Cannot stack batches with different layouts.")
        return cls(
            inputs=np.concatenate([b.inputs for b in batches]),
            targets=np.concatenate([b.targets for b in batches]),
            cond=np.concatenate([b.cond for b in batches]),
            cond_side=first.cond_side,
            level_spans=first.level_spans,
        )


def _cond_tokens(cond: grid.LatentGrid) -> grid.FloatArray:
    return cond.data.reshape(cond.channels, -1).T.copy()


def level_input(
    levels: Sequence[cb_module.IndexArray],
    level: int,
    sched: msrq.ScaleSchedule,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    cond_summary: grid.FloatArray,
    cache: dict[tuple[int, int], grid.FloatArray] | None = None,
) -> grid.FloatArray:
    """
    The ρ_l² × C input vectors for (0-based) level, from the levels before it.

    Level 0 gets the mean-pooled conditioning at every position. Any later level gets
    the cumulative decode of the levels before it, made at the side of its own scale
    group and area-downsampled to ρ_l.
    """
    rho = sched.resolutions[level]
    if level == 0:
        return np.repeat(cond_summary[None, :], rho * rho, axis=0)
    side = sched.scale_sizes[sched.group_of_level[level]]
    total = np.zeros((cb.dim, side, side))
    for k in range(level):
        key = (k, side)
        if cache is None or key not in cache:
            contribution = msrq.level_contribution(
                levels[k], cb, grid.phi_for_level(phi, k), side
            ).data
            if cache is None:
                total += contribution
                continue
            cache[key] = contribution
        total += cache[key]
    pooled = grid.resize_area(total, (rho, rho)) if rho != side else total
    return pooled.reshape(cb.dim, -1).T


def pack_sequence(
    t: msrq.TokenSequence,
    cond: grid.LatentGrid,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
) -> PackedBatch:
    """
    Lay a token sequence out for teacher-forced training.

    Raises:
        SequenceMismatch: If the tokens, codebook and conditioning disagree.
    """
    sched = t.schedule
    if t.vocab_size != cb.size or cond.channels != cb.dim:
        raise SequenceMismatch("Tokens, codebook and conditioning do not agree.")
    if cond.height != cond.width:
        raise SequenceMismatch(f"Conditioning must be square, got {cond.size}.")
    summary = cond.data.mean(axis=(1, 2))
    cache: dict[tuple[int, int], grid.FloatArray] = {}
    inputs = np.concatenate(
        [
            level_input(t.levels, level, sched, cb, phi, summary, cache)
            for level in range(sched.levels)
        ]
    )
    offsets = sched.level_offsets
    return PackedBatch(
        inputs=inputs[None],
        targets=t.flat()[None],
        cond=_cond_tokens(cond)[None],
        cond_side=cond.height,
        level_spans=tuple((offsets[i], offsets[i + 1]) for i in range(sched.levels)),
    )


# Model
# -----


@dataclasses.dataclass(frozen=True)
class ArConfig:
    vocab_size: int
    latent_dim: int
    depth: int = 2
    heads: int = 4
    width: int = 64
    mlp_ratio: int = 4
    # Side of the learnable positional tables; they are area-downsampled to each level.
    max_grid: int = 32
    cond_grid: int = 32
    zero_head: bool = False


def _downsample_table(table: torch.Tensor, side: int) -> torch.Tensor:
    """Area-downsample a C×G×G table to side×side, flattened to (side², C)."""
    weights = torch.from_numpy(grid.area_matrix(table.shape[-1], side).copy()).to(table)
    return torch.einsum("ih,chw,jw->ijc", weights, table, weights).reshape(side * side, -1)


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int) -> None:
        super().__init__()
        if width % heads:
            raise ShapeMismatch(f"width {width} is not divisible by {heads} heads.")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        batch, length, width = x.shape
        head_dim = width // self.heads
        q, k, v = (
            self.qkv(x).view(batch, length, 3, self.heads, head_dim).permute(2, 0, 3, 1, 4)
        )
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(batch, length, width))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


class ArModel(nn.Module):
    """
    Pre-norm transformer over [conditioning, level 1, …, level L].
    """

    def __init__(self, config: ArConfig, schedule: msrq.ScaleSchedule) -> None:
        super().__init__()
        if schedule.native > config.max_grid:
            raise ShapeMismatch(
                f"ρ_L={schedule.native} is larger than the positional table ({config.max_grid})."
            )
        self.config = config
        self.schedule = schedule
        width = config.width
        init_std = math.sqrt(1 / width / 3)

        self.word_embed = nn.Linear(config.latent_dim, width)
        self.cond_embed = nn.Linear(config.latent_dim, width)
        self.pos_table = nn.Parameter(torch.empty(width, config.max_grid, config.max_grid))
        self.cond_pos_table = nn.Parameter(torch.empty(width, config.cond_grid, config.cond_grid))
        self.level_embed = nn.Embedding(schedule.levels, width)
        for parameter in (self.pos_table, self.cond_pos_table, self.level_embed.weight):
            nn.init.trunc_normal_(parameter, mean=0.0, std=init_std)

        self.blocks = nn.ModuleList(
            Block(width, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.head_norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, config.vocab_size)
        if config.zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

        level_ids = torch.cat(
            [torch.full((rho * rho,), i) for i, rho in enumerate(schedule.resolutions)]
        )
        self.register_buffer("level_ids", level_ids, persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def positional(self, length: int) -> torch.Tensor:
        """Positional plus level embeddings of the first length token positions."""
        tables = [_downsample_table(self.pos_table, rho) for rho in self.schedule.resolutions]
        pos = torch.cat(tables)[:length]
        return pos + self.level_embed(self.level_ids[:length])

    def forward(self, inputs: torch.Tensor, cond: torch.Tensor, cond_side: int) -> torch.Tensor:
        """
        Logits for every token position.

        inputs is B×T×C for a prefix of T positions that ends on a level boundary,
        cond is B×Lc×C with Lc == cond_side².
        """
        if inputs.shape[-1] != self.config.latent_dim or cond.shape[-1] != self.config.latent_dim:
            raise ShapeMismatch("Input vectors do not have the model's latent dimension.")
        if cond.shape[1] != cond_side * cond_side or cond_side > self.config.cond_grid:
            raise ShapeMismatch(f"{cond.shape[1]} conditioning tokens do not form a {cond_side}² grid.")
        length = inputs.shape[1]
        if length not in self.schedule.level_offsets[1:]:
            raise ShapeMismatch(f"{length} positions do not end on a level boundary.")

        cond_len = cond.shape[1]
        x_cond = self.cond_embed(cond) + _downsample_table(self.cond_pos_table, cond_side)
        x_tokens = self.word_embed(inputs) + self.positional(length)
        x = torch.cat([x_cond, x_tokens], dim=1)

        full = block_causal_mask(self.schedule, cond_len)[: cond_len + length, : cond_len + length]
        mask = torch.from_numpy(full.copy())
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.head_norm(x[:, cond_len:]))


def build_model(config: ArConfig, schedule: msrq.ScaleSchedule, seed: int) -> ArModel:
    torch.manual_seed(seed)
    return ArModel(config, schedule)


def _as_tensor(array: np.ndarray[Any, Any], dtype: torch.dtype) -> torch.Tensor:
    return torch.tensor(np.asarray(array), dtype=dtype)


def forward_logits(m: ArModel, b: PackedBatch) -> torch.Tensor:
    """
    B×T×K logits of a packed batch.

    Raises:
        ShapeMismatch: If the batch does not fit the model.
    """
    if b.inputs.shape[1] != m.schedule.token_count:
        raise ShapeMismatch(
            f"Expected {m.schedule.token_count} positions, got {b.inputs.shape[1]}."
        )
    return m(_as_tensor(b.inputs, m.dtype), _as_tensor(b.cond, m.dtype), b.cond_side)


# Losses
# ------


def _targets(
    tokens: msrq.TokenSequence | torch.Tensor | np.ndarray[Any, Any], logits: torch.Tensor
) -> torch.Tensor:
    if isinstance(tokens, msrq.TokenSequence):
        tokens = tokens.flat()[None]
    target = torch.as_tensor(tokens, dtype=torch.long)
    if target.dim() == 1:
        target = target[None]
    if target.shape != logits.shape[:2]:
        raise SequenceMismatch(f"Targets {tuple(target.shape)} do not match logits {tuple(logits.shape)}.")
    if target.numel() and (target.min() < 0 or target.max() >= logits.shape[-1]):
        raise InvalidTarget(f"Target indices must be in [0, {logits.shape[-1]}).")
    return target


def ce_loss(
    logits: torch.Tensor, targets: msrq.TokenSequence | torch.Tensor | np.ndarray[Any, Any]
) -> torch.Tensor:
    """
    Mean token-level negative log-likelihood of the targets.

    Call backward() on the result for parameter gradients.

    Raises:
        InvalidTarget: If a target is outside [0, K).
        SequenceMismatch: If targets and logits differ in shape.
    """
    target = _targets(targets, logits)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))


def dpo_loss(
    logits: torch.Tensor,
    z_hr: msrq.TokenSequence | torch.Tensor | np.ndarray[Any, Any],
    z_lr: msrq.TokenSequence | torch.Tensor | np.ndarray[Any, Any],
    beta: float = DPO_BETA,
    *,
    sequence_level: bool = False,
) -> torch.Tensor:
    """
    Preference loss favouring the high-resolution tokens over the low-resolution ones.

    Per position this is −log σ(β·(o[z_HR] − o[z_LR])), averaged and halved.
    The softmax normalizer cancels in the difference, so the logit gap is also the
    log-probability gap. With sequence_level the log-probability gaps are summed over
    each sequence before a single sigmoid.

    Gradients flow through both gathered logits.

    Raises:
        SequenceMismatch: If either sequence does not match the logits.
    """
    hr = _targets(z_hr, logits)
    lr = _targets(z_lr, logits)
    if sequence_level:
        log_probs = logits.log_softmax(dim=-1)
        gap = (
            log_probs.gather(-1, hr[..., None]) - log_probs.gather(-1, lr[..., None])
        ).squeeze(-1).sum(dim=-1)
    else:
        gap = (logits.gather(-1, hr[..., None]) - logits.gather(-1, lr[..., None])).squeeze(-1)
    return -F.logsigmoid(beta * gap).mean() * 0.5


# Sampling
# --------


@dataclasses.dataclass(frozen=True)
class Greedy:
    pass


@dataclasses.dataclass(frozen=True)
class TopK:
    k: int
    seed: int = 0


def _choose(
    logits: torch.Tensor, strategy: Greedy | TopK, generator: torch.Generator | None
) -> cb_module.IndexArray:
    if isinstance(strategy, Greedy):
        return logits.argmax(dim=-1).numpy().astype(np.int64)
    values, indices = logits.topk(min(strategy.k, logits.shape[-1]), dim=-1)
    picks = torch.multinomial(values.softmax(dim=-1), 1, generator=generator)
    return indices.gather(-1, picks).squeeze(-1).numpy().astype(np.int64)


@torch.no_grad()
def sample_nextscale(
    m: ArModel,
    cond: grid.LatentGrid,
    sched: msrq.ScaleSchedule,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    strategy: Greedy | TopK = Greedy(),
) -> msrq.TokenSequence:
    """
    Generate a token sequence level by level; every level is one parallel step.

    Raises:
        ShapeMismatch: If the schedule is not the one the model was built for.
    """
    if sched != m.schedule:
        raise ShapeMismatch("The model was built for a different schedule.")
    generator = None
    if isinstance(strategy, TopK):
        generator = torch.Generator().manual_seed(strategy.seed)
    summary = cond.data.mean(axis=(1, 2))
    cond_tokens = _as_tensor(_cond_tokens(cond)[None], m.dtype)
    offsets = sched.level_offsets
    levels: list[cb_module.IndexArray] = []
    inputs: list[grid.FloatArray] = []
    cache: dict[tuple[int, int], grid.FloatArray] = {}
    for level, rho in enumerate(sched.resolutions):
        inputs.append(level_input(levels, level, sched, cb, phi, summary, cache))
        prefix = _as_tensor(np.concatenate(inputs)[None], m.dtype)
        logits = m(prefix, cond_tokens, cond.height)[0, offsets[level] : offsets[level + 1]]
        levels.append(_choose(logits, strategy, generator).reshape(rho, rho))
    return msrq.TokenSequence(tuple(levels), sched, cb.size)


# Training
# --------


@dataclasses.dataclass(frozen=True)
class SrExample:
    """
    One training pair: conditioning features, HR tokens, and tokens of the upsampled LR.
    """

    cond: grid.LatentGrid
    z_hr: msrq.TokenSequence
    z_lr: msrq.TokenSequence
    packed: PackedBatch


def conditioning(
    lr: toycodec.Image,
    size: int,
    codec: toycodec.PatchCodec,
    cond_side: int | None = None,
) -> grid.LatentGrid:
    """
    Encode the LR image bilinearly upsampled to size × size pixels.

    With cond_side the features are area-downsampled to cond_side × cond_side tokens.
    """
    features = codec.encode_image(toycodec.bilinear_resize(lr, (size, size)))
    if cond_side is not None and cond_side != features.height:
        features = grid.area_downsample(features, (cond_side, cond_side))
    return features


def build_example(
    hr: toycodec.Image,
    lr: toycodec.Image,
    codec: toycodec.PatchCodec,
    sched: msrq.ScaleSchedule,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    cond_side: int | None = None,
) -> SrExample:
    """
    Tokenize the HR image and the upsampled LR image with the hierarchical tokenizer,
    and pack the HR tokens behind the LR conditioning.
    """
    z_hr = hit.encode_hierarchical(
        hit.MultiScaleFeatures.from_image(hr, codec, sched), sched, cb, phi
    )
    upsampled = toycodec.bilinear_resize(lr, (hr.height, hr.width))
    z_lr = hit.encode_hierarchical(
        hit.MultiScaleFeatures.from_image(upsampled, codec, sched), sched, cb, phi
    )
    cond = conditioning(lr, hr.height, codec, cond_side)
    return SrExample(cond, z_hr, z_lr, pack_sequence(z_hr, cond, cb, phi))


@dataclasses.dataclass(frozen=True)
class TrainRecord:
    step: int
    ce: float
    dpo: float
    total: float


def train(
    m: ArModel,
    examples: Sequence[SrExample],
    *,
    steps: int,
    lr: float = 1e-3,
    beta: float = DPO_BETA,
    use_dpo: bool = True,
    batch_size: int = 16,
    seed: int = 0,
    log_path: pathlib.Path | None = None,
) -> list[TrainRecord]:
    """
    Minimise cross-entropy plus (optionally) the DPO term, with equal weights.

    Each step draws batch_size examples without replacement (all of them when there are
    fewer). One record per step is returned, and appended to log_path as a JSON line.
    """
    optimizer = torch.optim.RMSprop(m.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    records: list[TrainRecord] = []
    log = log_path.open("a") if log_path is not None else None
    try:
        m.train()
        for step in range(steps):
            if batch_size >= len(examples):
                chosen = list(examples)
            else:
                order = torch.randperm(len(examples), generator=generator)[:batch_size]
                chosen = [examples[int(i)] for i in order]
            batch = PackedBatch.stack([e.packed for e in chosen])
            logits = forward_logits(m, batch)
            ce = ce_loss(logits, batch.targets)
            if use_dpo:
                lr_targets = np.stack([e.z_lr.flat() for e in chosen])
                dpo = dpo_loss(logits, batch.targets, lr_targets, beta)
            else:
                dpo = torch.zeros((), dtype=logits.dtype)
            total = ce + dpo
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            record = TrainRecord(step, ce.item(), dpo.item(), total.item())
            records.append(record)
            if log is not None:
                log.write(json.dumps(dataclasses.asdict(record)) + "\n")
            if step % 50 == 0 or step == steps - 1:
                logger.info("train step=%d ce=%.4f dpo=%.4f", step, record.ce, record.dpo)
    finally:
        m.eval()
        if log is not None:
            log.close()
    return records


@torch.no_grad()
def preference_margin(m: ArModel, examples: Sequence[SrExample]) -> float:
    """
    Mean over positions of logit[z_HR] − logit[z_LR] under teacher forcing.
    """
    gaps = []
    for example in examples:
        logits = forward_logits(m, example.packed)[0]
        hr = torch.from_numpy(example.z_hr.flat())
        lr = torch.from_numpy(example.z_lr.flat())
        gaps.append(
            (logits.gather(-1, hr[:, None]) - logits.gather(-1, lr[:, None])).mean().item()
        )
    return float(np.mean(gaps))


# Checkpoints
# -----------


def save_checkpoint(m: ArModel, path: pathlib.Path) -> None:
    metadata = {
        "config": dataclasses.asdict(m.config),
        "schedule": m.schedule.to_json(),
    }
    arrays = {name: p.detach().cpu().numpy() for name, p in m.state_dict().items()}
    formats.write_checkpoint(path, metadata, arrays)


def load_checkpoint(path: pathlib.Path) -> ArModel:
    """
    Raises:
        formats.FormatError: If the file is not a checkpoint or its arrays do not fit.
    """
    metadata, arrays = formats.read_checkpoint(path)
    try:
        config = ArConfig(**metadata["config"])
        schedule = msrq.ScaleSchedule(
            tuple(metadata["schedule"]["resolutions"]),
            tuple(metadata["schedule"]["target_scales"]),
        )
        model = ArModel(config, schedule)
        model.load_state_dict({name: torch.from_numpy(a.copy()) for name, a in arrays.items()})
    except (KeyError, TypeError, RuntimeError, msrq.InvalidSchedule) as e:
        raise formats.FormatError(f"Invalid checkpoint: {e}") from e
    model.eval()
    return model
