"""Alternating critic/generator optimization with resumable state.

Per step: critic_steps_per_gen_step discriminator updates, then one
generator update. Gradient routing:

  discriminator minimizes  -L_adv + lambda_cls * cls_real   (fake detached)
  generator     minimizes  lambda_adv * (-mean critic(fake))
                           + lambda_att * L_att + lambda_cls * cls_fake
                           (discriminator parameters frozen)

so a discriminator phase never touches generator parameters and vice versa.
The reported LossBreakdown.total is the weighted three-term combination
lambda_adv*adv + lambda_att*att + lambda_cls*cls, with adv the critic value
from the last discriminator update and cls = cls_fake + cls_real.

All stochastic draws inside a step (target labels, interpolation epsilons)
come from one checkpointed torch.Generator; epoch shuffles are derived from
(seed, epoch) so a resumed run replays the exact batch order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
from torch import optim

from .conditioning import AgeGroupScheme, onehot_batch
from .data import TensorBundle
from .errors import CheckpointError, InvariantError, NumericError
from .losses import (LossBreakdown, LossWeights, adversarial_loss, attention_loss,
                     classification_term, total_loss)
from .models import Discriminator, Generator, ModelConfig, compose

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 100
    max_steps: int = 0  # 0 = run all epochs
    critic_steps_per_gen_step: int = 1
    seed: int = 0
    resolution: tuple[int, int] = (64, 64)
    checkpoint_interval: int = 1000
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    exclude_source_targets: bool = False
    log_interval: int = 50

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise InvariantError("batch_size must be >= 2 (gradient penalty pairs samples)")
        if self.critic_steps_per_gen_step < 1:
            raise InvariantError("critic_steps_per_gen_step must be >= 1")


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: optim.Adam
    opt_d: optim.Adam
    step: int
    rng: torch.Generator


def init_state(config: TrainConfig, model_config: ModelConfig | None = None) -> TrainState:
    """Builds freshly seeded models and optimizers."""
    torch.manual_seed(config.seed)
    generator = Generator(config.resolution, model_config)
    discriminator = Discriminator(config.resolution, model_config)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = optim.Adam(generator.parameters(), lr=config.learning_rate, betas=betas)
    opt_d = optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=betas)
    rng = torch.Generator()
    rng.manual_seed(config.seed)
    return TrainState(generator=generator, discriminator=discriminator,
                      opt_g=opt_g, opt_d=opt_d, step=0, rng=rng)


def sample_target_labels(source_onehots: torch.Tensor, rng: torch.Generator,
                         exclude_source: bool = False) -> torch.Tensor:
    """Uniform target groups, independently per sample.

    With exclude_source, draws uniformly over the four groups differing
    from each sample's source group.
    """
    b, k = source_onehots.shape
    if exclude_source:
        offsets = torch.randint(1, k, (b,), generator=rng)
        idx = (source_onehots.argmax(1) + offsets) % k
    else:
        idx = torch.randint(0, k, (b,), generator=rng)
    return onehot_batch(idx)


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def discriminator_phase(state: TrainState, real: torch.Tensor,
                        source_onehots: torch.Tensor, config: TrainConfig
                        ) -> tuple[float, float, float]:
    """One critic/classifier update on a detached fake batch.

    Minimizes -L_adv + lambda_cls * cls_real; the generator is outside the
    graph entirely (fakes detached), so its parameters stay bit-identical.
    Returns (adv, gp, cls_real) values.
    """
    g, d, w = state.generator, state.discriminator, config.weights
    targets = sample_target_labels(source_onehots, state.rng,
                                   config.exclude_source_targets)
    with torch.no_grad():
        fake = compose(real, g(real, targets))
    adv, gp = adversarial_loss(d, real, fake, w.lambda_gp, rng=state.rng)
    cls_real = classification_term(d, real, source_onehots)
    d_total = -adv + w.lambda_cls * cls_real
    values = _f(adv), _f(gp), _f(cls_real)
    if not torch.isfinite(d_total):
        raise NumericError(
            f"non-finite discriminator loss at step {state.step}: "
            f"adv={values[0]} gp={values[1]} cls_real={values[2]}"
        )
    state.opt_d.zero_grad()
    d_total.backward()
    state.opt_d.step()
    return values


def generator_phase(state: TrainState, real: torch.Tensor,
                    source_onehots: torch.Tensor, config: TrainConfig
                    ) -> tuple[float, float, float, float, float]:
    """One generator update against the frozen discriminator.

    Minimizes lambda_adv * (-mean critic(fake)) + lambda_att * L_att
    + lambda_cls * cls_fake. Discriminator parameters have requires_grad
    off for the whole phase, so the fake classification term deposits no
    gradient on them. Returns (adv_g, att, tv, l2, cls_fake) values.
    """
    g, d, w = state.generator, state.discriminator, config.weights
    _set_requires_grad(d, False)
    try:
        targets = sample_target_labels(source_onehots, state.rng,
                                       config.exclude_source_targets)
        masks = g(real, targets)
        fake = compose(real, masks)
        adv_g = -_mean_critic(d, fake)
        att, tv, l2 = attention_loss(masks.attention, w.lambda_tv)
        cls_fake = classification_term(d, fake, targets)
        g_total = w.lambda_adv * adv_g + w.lambda_att * att + w.lambda_cls * cls_fake
        values = _f(adv_g), _f(att), _f(tv), _f(l2), _f(cls_fake)
        if not torch.isfinite(g_total):
            raise NumericError(
                f"non-finite generator loss at step {state.step}: "
                f"adv_g={values[0]} att={values[1]} cls_fake={values[4]}"
            )
        state.opt_g.zero_grad()
        g_total.backward()
        state.opt_g.step()
    finally:
        _set_requires_grad(d, True)
    return values


def train_step(state: TrainState, real: torch.Tensor, source_onehots: torch.Tensor,
               config: TrainConfig) -> LossBreakdown:
    """One alternation: n critic updates, then one generator update."""
    w = config.weights
    adv = gp = cls_real = 0.0
    for _ in range(config.critic_steps_per_gen_step):
        adv, gp, cls_real = discriminator_phase(state, real, source_onehots, config)
    _adv_g, att, tv, l2, cls_fake = generator_phase(state, real, source_onehots, config)
    state.step += 1
    return total_loss(adv=adv, att=att, cls=cls_fake + cls_real, weights=w,
                      gp=gp, tv=tv, l2=l2, cls_fake=cls_fake, cls_real=cls_real)


def _mean_critic(d: Discriminator, images: torch.Tensor) -> torch.Tensor:
    return d(images).critic.mean()


def _f(value: torch.Tensor) -> float:
    return float(value.detach())


def _epoch_permutation(n: int, seed: int, epoch: int) -> torch.Tensor:
    gen = torch.Generator()
    gen.manual_seed(((seed & 0x7FFFFFFF) << 24) + epoch)
    return torch.randperm(n, generator=gen)


def fit(state: TrainState, bundle: TensorBundle, config: TrainConfig,
        run_dir: str | Path, scheme: AgeGroupScheme | None = None) -> Path:
    """Runs the training loop, appending per-step metrics and checkpoints.

    Resumable: with a state restored from a checkpoint, batch order and all
    per-step draws continue exactly where the interrupted run stopped.
    Returns the metrics CSV path.
    """
    scheme = scheme or AgeGroupScheme()
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    n = bundle.images.shape[0]
    steps_per_epoch = n // config.batch_size
    if steps_per_epoch == 0:
        raise InvariantError(
            f"dataset of {n} records too small for batch_size {config.batch_size}"
        )
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps:
        total_steps = min(total_steps, config.max_steps)

    metrics_path = run_dir / "metrics.csv"
    mode = "a" if state.step > 0 and metrics_path.exists() else "w"
    state.generator.train()
    state.discriminator.train()
    with open(metrics_path, mode) as metrics:
        if mode == "w":
            metrics.write(LossBreakdown.CSV_HEADER + "\n")
        while state.step < total_steps:
            epoch = state.step // steps_per_epoch
            perm = _epoch_permutation(n, config.seed, epoch)
            first = state.step % steps_per_epoch
            for b in range(first, steps_per_epoch):
                idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
                breakdown = train_step(state, bundle.images[idx], bundle.onehots[idx],
                                       config)
                metrics.write(breakdown.csv_row(state.step) + "\n")
                if config.log_interval and state.step % config.log_interval == 0:
                    log.info("step %d adv=%.4f att=%.4f cls=%.4f total=%.4f",
                             state.step, breakdown.adv, breakdown.att,
                             breakdown.cls, breakdown.total)
                if config.checkpoint_interval and \
                        state.step % config.checkpoint_interval == 0:
                    checkpoint_save(state, ckpt_dir / f"step_{state.step:07d}.pt", scheme)
                if state.step >= total_steps:
                    break
    checkpoint_save(state, ckpt_dir / "last.pt", scheme)
    return metrics_path


def checkpoint_save(state: TrainState, path: str | Path,
                    scheme: AgeGroupScheme | None = None) -> None:
    """Single-archive checkpoint: parameter arrays plus a versioned metadata record."""
    scheme = scheme or AgeGroupScheme()
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "metadata": {
            "resolution": list(state.generator.resolution),
            "scheme_lower_bounds": list(scheme.lower_bounds),
            "model": asdict(state.generator.config),
            "step": state.step,
        },
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng_state": state.rng.get_state(),
    }
    torch.save(payload, path)


def checkpoint_load(path: str | Path,
                    expected_resolution: tuple[int, int] | None = None
                    ) -> tuple[TrainState, dict]:
    """Restores a TrainState; forward passes after load are bit-identical."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    meta = payload["metadata"]
    resolution = tuple(meta["resolution"])
    if expected_resolution is not None and tuple(expected_resolution) != resolution:
        raise CheckpointError(
            f"checkpoint resolution {resolution} does not match configured "
            f"{tuple(expected_resolution)}"
        )
    model_config = ModelConfig(**meta["model"])
    generator = Generator(resolution, model_config)
    discriminator = Discriminator(resolution, model_config)
    generator.load_state_dict(payload["generator"])
    discriminator.load_state_dict(payload["discriminator"])
    opt_g = optim.Adam(generator.parameters())
    opt_d = optim.Adam(discriminator.parameters())
    opt_g.load_state_dict(payload["opt_g"])
    opt_d.load_state_dict(payload["opt_d"])
    rng = torch.Generator()
    rng.set_state(payload["rng_state"])
    state = TrainState(generator=generator, discriminator=discriminator,
                       opt_g=opt_g, opt_d=opt_d, step=int(meta["step"]), rng=rng)
    return state, meta


def checkpoint_scheme(meta: dict) -> AgeGroupScheme:
    return AgeGroupScheme(tuple(meta["scheme_lower_bounds"]))
