"""Plain and differentially private training loops.

DP steps follow the usual recipe: Poisson-sample a virtual batch, compute
per-example gradients in micro-batches, clip each to L2 norm ``C``, sum, add
``N(0, sigma^2 C^2 I)`` once, divide by the expected batch size and hand the
result to the optimizer. Only trainable parameters (tuning parameters in
prompt/prefix mode) are touched.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch.func import functional_call, grad, vmap

from privbench.accountant import DEFAULT_ORDERS, RdpAccountant, calibrate_sigma
from privbench.errors import ConfigError, TrainingError
from privbench.tinylm import TinyLM, scoring_batch

logger = logging.getLogger(__name__)

# Values used by the original full-scale experiments. Desk runs override
# several of them (see TrainConfig defaults).
FULL_SCALE_EPSILON = 8.0
FULL_SCALE_DELTA = 1e-5
FULL_SCALE_CLIP_NORM = 0.1
FULL_SCALE_EPOCHS = 5
FULL_SCALE_VIRTUAL_BATCH = 1024
FULL_SCALE_LR_FULL = 1e-4
FULL_SCALE_LR_PROMPT_PREFIX = 1e-2


@dataclass
class PrivacySpec:
    """DP parameters. Give either `epsilon` (calibrate sigma) or `noise_multiplier`."""

    epsilon: float | None = FULL_SCALE_EPSILON
    delta: float = FULL_SCALE_DELTA
    clip_norm: float = FULL_SCALE_CLIP_NORM
    noise_multiplier: float | None = None
    sampling_rate: float | None = None
    steps: int | None = None
    orders: tuple[float, ...] = DEFAULT_ORDERS

    def __post_init__(self):
        if self.epsilon is not None and self.noise_multiplier is not None:
            raise ConfigError("give either a target epsilon or an explicit noise multiplier, not both")
        if self.epsilon is None and self.noise_multiplier is None:
            raise ConfigError("one of epsilon or noise_multiplier is required")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ConfigError("clip norm must be positive")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ConfigError("noise multiplier must be non-negative")
        if self.sampling_rate is not None and not 0 < self.sampling_rate <= 1:
            raise ConfigError("sampling rate must lie in (0, 1]")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = FULL_SCALE_EPOCHS
    virtual_batch_size: int = 128
    micro_batch_size: int = 64
    learning_rate: float = 1e-3
    lr_schedule: str = "linear"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.virtual_batch_size % self.micro_batch_size:
            raise ConfigError("virtual batch size must be a multiple of the micro-batch size")
        if self.lr_schedule not in ("linear", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LedgerRow:
    step: int
    sampling_rate: float
    noise_multiplier: float
    epsilon: float


@dataclass
class TrainResult:
    model: TinyLM
    steps: int
    epoch_losses: list[float] = field(default_factory=list)
    noise_multiplier: float | None = None
    sampling_rate: float | None = None
    epsilon: float | None = None
    delta: float | None = None
    ledger: list[LedgerRow] = field(default_factory=list)


# -- gradient primitives -----------------------------------------------------------


def per_example_gradients(model: TinyLM, inputs, targets, mask) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    """Gradients of each example's mean token loss w.r.t. trainable parameters.

    Returns ``({name: (B, *shape)}, losses (B,))``.
    """
    trainable = {n: p.detach() for n, p in model.trainable_parameters().items()}
    frozen = {n: p.detach() for n, p in model.named_parameters() if n not in trainable}

    def loss_fn(params, inp, tgt, msk):
        logp = functional_call(model, {**frozen, **params}, (inp.unsqueeze(0),))
        ll = (logp[0].gather(-1, tgt.unsqueeze(-1)).squeeze(-1) * msk).sum()
        loss = -ll / msk.sum().clamp_min(1)
        return loss, loss

    grads, losses = vmap(grad(loss_fn, has_aux=True), in_dims=(None, 0, 0, 0))(
        trainable, inputs, targets, mask)
    return grads, losses


def _flat_norms(grads: dict[str, torch.Tensor]) -> torch.Tensor:
    return torch.sqrt(sum(g.reshape(g.shape[0], -1).pow(2).sum(1) for g in grads.values()))


def clip_per_example(grads, clip_norm: float, sample_ids: Sequence | None = None):
    """Scale each example's gradient to L2 norm at most `clip_norm`.

    `grads` is either a ``(B, P)`` tensor or a dict of ``(B, ...)`` tensors
    whose joint per-example norm is clipped. Gradients already within the
    bound are returned unchanged.
    """
    if not clip_norm > 0:
        raise ConfigError("clip norm must be positive")
    as_dict = isinstance(grads, dict)
    gdict = grads if as_dict else {"g": torch.as_tensor(grads)}
    norms = _flat_norms(gdict)
    bad = ~torch.isfinite(norms)
    if bad.any():
        idx = int(bad.nonzero()[0])
        sid = sample_ids[idx] if sample_ids is not None else idx
        raise TrainingError(f"non-finite gradient for sample {sid}", sample_id=sid)
    scale = torch.where(norms > clip_norm, clip_norm / norms, torch.ones_like(norms))
    out = {n: g * scale.view(-1, *([1] * (g.dim() - 1))).to(g.dtype) for n, g in gdict.items()}
    return out if as_dict else out["g"]


def gaussian_noise(shape, std: float, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    return torch.normal(0.0, std, size=tuple(shape), generator=generator).to(dtype)


def make_optimizer(model: TinyLM, config: TrainConfig, total_steps: int):
    params = list(model.trainable_parameters().values())
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=config.learning_rate)
    else:
        opt = torch.optim.Adam(params, lr=config.learning_rate)
    if config.lr_schedule == "linear":
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda t: max(0.0, 1.0 - t / max(total_steps, 1)))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda t: 1.0)
    return opt, sched


def _apply_gradient(model: TinyLM, optimizer, grads: dict[str, torch.Tensor]) -> None:
    params = model.trainable_parameters()
    for name, p in params.items():
        p.grad = grads[name].to(p.dtype)
    optimizer.step()
    for p in params.values():
        p.grad = None


def _summed_gradients(model: TinyLM, sequences, micro_batch_size: int, clip_norm: float | None = None,
                      sample_ids: Sequence | None = None):
    """Sum of (optionally clipped) per-example gradients, plus the summed loss.

    Plain and DP steps share this path so that the zero-noise, infinite-clip
    DP step is bit-identical to the plain step.
    """
    params = model.trainable_parameters()
    total = {n: torch.zeros_like(p) for n, p in params.items()}
    loss_sum = 0.0
    for start in range(0, len(sequences), micro_batch_size):
        chunk = sequences[start:start + micro_batch_size]
        ids = None if sample_ids is None else sample_ids[start:start + micro_batch_size]
        grads, losses = per_example_gradients(model, *scoring_batch(model, chunk))
        if clip_norm is not None:
            grads = clip_per_example(grads, clip_norm, ids)
        for n, g in grads.items():
            total[n] += g.sum(0)
        loss_sum += float(losses.sum())
    return total, loss_sum


def plain_step(model: TinyLM, optimizer, sequences: Sequence[Sequence[int]], micro_batch_size: int = 64) -> float:
    """One non-private step on the mean per-example loss of `sequences`."""
    total, loss_sum = _summed_gradients(model, sequences, micro_batch_size)
    _apply_gradient(model, optimizer, {n: g / len(sequences) for n, g in total.items()})
    return loss_sum / len(sequences)


def dp_step(model: TinyLM, optimizer, sequences: Sequence[Sequence[int]], spec: PrivacySpec,
            generator: torch.Generator, expected_batch_size: float | None = None,
            micro_batch_size: int = 64, sample_ids: Sequence | None = None) -> float:
    """One DP step on an already-sampled batch. Returns the mean example loss.

    The update is ``(sum of clipped grads + N(0, sigma^2 C^2)) / expected_batch_size``;
    with Poisson sampling the expected (not realized) size keeps the sensitivity fixed.
    """
    sigma = spec.noise_multiplier
    if sigma is None or sigma < 0:
        raise ConfigError("dp_step needs a non-negative noise multiplier")
    total, loss_sum = _summed_gradients(model, sequences, micro_batch_size, spec.clip_norm, sample_ids)
    if sigma > 0:
        std = sigma * spec.clip_norm
        for n, p in model.trainable_parameters().items():
            total[n] = total[n] + gaussian_noise(p.shape, std, generator, p.dtype)
    denom = expected_batch_size if expected_batch_size is not None else max(len(sequences), 1)
    _apply_gradient(model, optimizer, {n: g / denom for n, g in total.items()})
    return loss_sum / max(len(sequences), 1)


# -- training loops ------------------------------------------------------------------


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, round(n / batch_size))


def resolve_privacy(spec: PrivacySpec, n: int, config: TrainConfig) -> PrivacySpec:
    """Fill in sampling rate, step count and (if needed) a calibrated sigma."""
    q = spec.sampling_rate or min(1.0, config.virtual_batch_size / n)
    steps = spec.steps or config.epochs * steps_per_epoch(n, config.virtual_batch_size)
    sigma = spec.noise_multiplier
    if sigma is None:
        sigma = calibrate_sigma(spec.epsilon, spec.delta, q, steps, spec.orders)
    return PrivacySpec(epsilon=None, delta=spec.delta, clip_norm=spec.clip_norm,
                       noise_multiplier=sigma, sampling_rate=q, steps=steps, orders=spec.orders)


def train(model: TinyLM, sequences: Sequence[Sequence[int]], config: TrainConfig,
          privacy: PrivacySpec | None = None, generator: torch.Generator | None = None) -> TrainResult:
    """Train `model` in place on token sequences (each ending in ``<eos>``)."""
    if not sequences:
        raise ConfigError("empty training set")
    gen = generator if generator is not None else torch.Generator().manual_seed(config.seed)
    n = len(sequences)
    if privacy is None:
        return _train_plain(model, sequences, config, gen)
    return _train_dp(model, sequences, config, resolve_privacy(privacy, n, config), gen)


def _train_plain(model, sequences, config, gen) -> TrainResult:
    n = len(sequences)
    per_epoch = math.ceil(n / config.virtual_batch_size)
    optimizer, sched = make_optimizer(model, config, config.epochs * per_epoch)
    result = TrainResult(model=model, steps=0)
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen).tolist()
        losses = []
        for start in range(0, n, config.virtual_batch_size):
            batch = [sequences[i] for i in order[start:start + config.virtual_batch_size]]
            losses.append(plain_step(model, optimizer, batch, config.micro_batch_size))
            sched.step()
            result.steps += 1
        result.epoch_losses.append(sum(losses) / len(losses))
        logger.debug("epoch %d loss %.4f", epoch, result.epoch_losses[-1])
    return result


def _train_dp(model, sequences, config, spec: PrivacySpec, gen) -> TrainResult:
    n = len(sequences)
    q, sigma, total_steps = spec.sampling_rate, spec.noise_multiplier, spec.steps
    optimizer, sched = make_optimizer(model, config, total_steps)
    accountant = RdpAccountant(spec.orders)
    result = TrainResult(model=model, steps=0, noise_multiplier=sigma, sampling_rate=q, delta=spec.delta)
    per_epoch = max(1, math.ceil(total_steps / config.epochs))
    losses = []
    for step in range(total_steps):
        chosen = (torch.rand(n, generator=gen) < q).nonzero().flatten().tolist()
        batch = [sequences[i] for i in chosen]
        if batch:
            losses.append(dp_step(model, optimizer, batch, spec, gen, q * n,
                                  config.micro_batch_size, chosen))
        else:
            # an empty Poisson draw still releases pure noise
            dp_step_noise_only(model, optimizer, spec, gen, q * n)
        sched.step()
        accountant.step(q, sigma)
        eps, _ = accountant.get_epsilon(spec.delta)
        result.ledger.append(LedgerRow(step + 1, q, sigma, eps))
        result.steps += 1
        if (step + 1) % per_epoch == 0 or step + 1 == total_steps:
            result.epoch_losses.append(sum(losses) / max(len(losses), 1))
            losses = []
    result.epsilon = result.ledger[-1].epsilon
    return result


def dp_step_noise_only(model, optimizer, spec, generator, expected_batch_size) -> None:
    params = model.trainable_parameters()
    std = spec.noise_multiplier * spec.clip_norm
    noise = {n: gaussian_noise(p.shape, std, generator, p.dtype) / expected_batch_size
             for n, p in params.items()}
    _apply_gradient(model, optimizer, noise)


def write_ledger(rows: Sequence[LedgerRow], path: str | Path, delta: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "sampling_rate", "noise_multiplier", "epsilon", "delta"])
        for r in rows:
            w.writerow([r.step, *(repr(float(v)) for v in (r.sampling_rate, r.noise_multiplier, r.epsilon, delta))])
