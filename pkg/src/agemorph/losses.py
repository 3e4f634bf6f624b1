"""The three training losses and their weighted combination.

Sign conventions follow the minimax setup: the adversarial value

    L_adv = E[critic(real)] - E[critic(fake)] - lambda_gp * E[(||grad|| - 1)^2]

is what the critic maximizes; the generator's adversarial objective is
-mean critic(fake). The age-classification loss is returned as separate
fake/real terms so the trainer can route the fake term to the generator
and the real term to the discriminator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Union

import torch
import torch.nn.functional as F

from .conditioning import validate_onehot
from .errors import InvariantError, NumericError, ShapeError
from .models import Discriminator, DiscriminatorOutput

CriticLike = Union[Discriminator, Callable[[torch.Tensor], torch.Tensor]]


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the loss terms; defaults are the trained settings."""

    lambda_adv: float = 10.0
    lambda_att: float = 2.0
    lambda_cls: float = 100.0
    lambda_gp: float = 10.0
    lambda_tv: float = 5e-5

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise InvariantError(f"{f.name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term scalars for one training step.

    adv/att/cls are the three combined terms; gp, tv, l2 and the two
    classification halves are their sub-terms. total is the weighted sum
    lambda_adv*adv + lambda_att*att + lambda_cls*cls.
    """

    adv: float
    att: float
    cls: float
    total: float
    gp: float
    tv: float
    l2: float
    cls_fake: float
    cls_real: float

    CSV_HEADER = "step,adv,gp,tv,l2,cls_fake,cls_real,total"

    def csv_row(self, step: int) -> str:
        values = (self.adv, self.gp, self.tv, self.l2,
                  self.cls_fake, self.cls_real, self.total)
        return f"{step}," + ",".join(repr(v) for v in values)


def _critic_scores(critic: CriticLike, images: torch.Tensor) -> torch.Tensor:
    out = critic(images)
    if isinstance(out, DiscriminatorOutput):
        out = out.critic
    elif isinstance(out, tuple):
        out = out[0]
    if out.ndim == 2 and out.shape[1] == 1:
        out = out.squeeze(1)
    if out.ndim != 1:
        raise ShapeError(f"critic must score one scalar per image, got {tuple(out.shape)}")
    return out


def _classifier_logits(classifier: CriticLike, images: torch.Tensor) -> torch.Tensor:
    out = classifier(images)
    if isinstance(out, DiscriminatorOutput):
        out = out.logits
    elif isinstance(out, tuple):
        out = out[1]
    return out


def gradient_penalty(critic: CriticLike, real: torch.Tensor, fake: torch.Tensor,
                     rng: torch.Generator | None = None,
                     eps: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1.

    Evaluated at per-sample random interpolates eps*real + (1-eps)*fake.
    The result keeps the graph so it can be backpropagated into the critic.
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    b = real.shape[0]
    if eps is None:
        eps = torch.rand(b, generator=rng, dtype=real.dtype, device=real.device)
    eps = eps.view(b, *([1] * (real.ndim - 1)))
    with torch.enable_grad():  # the penalty needs the input gradient even under no_grad
        interp = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
        scores = _critic_scores(critic, interp)
        if scores.requires_grad:
            grads = torch.autograd.grad(outputs=scores.sum(), inputs=interp,
                                        create_graph=True, allow_unused=True)[0]
            if grads is None:
                grads = torch.zeros_like(interp)
        else:  # critic ignores its input; gradient is identically zero
            grads = torch.zeros_like(interp)
    norms = grads.flatten(1).norm(dim=1)
    if not torch.isfinite(norms).all():
        bad = int((~torch.isfinite(norms)).nonzero()[0])
        raise NumericError(f"non-finite gradient norm at sample index {bad}")
    return ((norms - 1.0) ** 2).mean()


def adversarial_loss(critic: CriticLike, real: torch.Tensor, fake: torch.Tensor,
                     lambda_gp: float, rng: torch.Generator | None = None,
                     eps: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Wasserstein critic value with gradient penalty.

    Returns (loss, gp) where gp = lambda_gp * E[(||grad|| - 1)^2] and
    loss = mean critic(real) - mean critic(fake) - gp. The critic maximizes
    this; callers negate it for a critic minimization step.
    """
    gp = lambda_gp * gradient_penalty(critic, real, fake, rng=rng, eps=eps)
    loss = _critic_scores(critic, real).mean() - _critic_scores(critic, fake).mean() - gp
    return loss, gp


def attention_loss(attention: torch.Tensor, lambda_tv: float
                   ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Smoothness + magnitude penalty on attention masks.

    tv is lambda_tv times the batch mean of the summed squared forward
    differences (truncated at the borders); l2 is the batch mean Euclidean
    norm of each flattened mask. Returns (tv + l2, tv, l2).
    """
    if attention.ndim != 4 or attention.shape[1] != 1:
        raise ShapeError(f"expected (B,1,H,W) attention masks, got {tuple(attention.shape)}")
    if (attention < 0).any() or (attention > 1).any():
        raise InvariantError("attention mask outside [0,1]")
    down = attention[:, :, 1:, :] - attention[:, :, :-1, :]
    right = attention[:, :, :, 1:] - attention[:, :, :, :-1]
    tv_per_sample = down.pow(2).flatten(1).sum(1) + right.pow(2).flatten(1).sum(1)
    tv = lambda_tv * tv_per_sample.mean()
    l2 = attention.flatten(1).norm(dim=1).mean()
    return tv + l2, tv, l2


def classification_term(classifier: CriticLike, images: torch.Tensor,
                        onehots: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of the age classifier against one-hot labels."""
    validate_onehot(onehots)
    return F.cross_entropy(_classifier_logits(classifier, images), onehots.argmax(1))


def classification_loss(classifier: CriticLike,
                        fake: torch.Tensor, target_onehots: torch.Tensor,
                        real: torch.Tensor, source_onehots: torch.Tensor
                        ) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy on fake images (vs targets) and real images (vs sources).

    Returned separately so the trainer can route gradients: the fake term
    trains the generator, the real term trains the classifier.
    """
    return (classification_term(classifier, fake, target_onehots),
            classification_term(classifier, real, source_onehots))


def total_loss(adv: float, att: float, cls: float, weights: LossWeights,
               gp: float = 0.0, tv: float = 0.0, l2: float = 0.0,
               cls_fake: float = 0.0, cls_real: float = 0.0) -> LossBreakdown:
    """Combines the three terms into a reported breakdown with no hidden terms."""
    terms = {"adv": adv, "att": att, "cls": cls, "gp": gp, "tv": tv, "l2": l2,
             "cls_fake": cls_fake, "cls_real": cls_real}
    for name, value in terms.items():
        if not math.isfinite(float(value)):
            raise NumericError(f"loss term '{name}' is non-finite: {value}")
    total = (weights.lambda_adv * float(adv)
             + weights.lambda_att * float(att)
             + weights.lambda_cls * float(cls))
    return LossBreakdown(adv=float(adv), att=float(att), cls=float(cls), total=total,
                         gp=float(gp), tv=float(tv), l2=float(l2),
                         cls_fake=float(cls_fake), cls_real=float(cls_real))
