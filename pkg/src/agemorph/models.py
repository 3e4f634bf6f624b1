"""Generator/discriminator networks and the mask composition operator.

The generator is a conv encoder, residual bottleneck, deconv decoder trunk
with two single-layer heads on top: an attention head (sigmoid, 1 channel)
and a color head (tanh, 3 channels). Everything up to the heads is shared,
so the two masks differ only in their final layer, and the composed output

    out = (1 - A) * C + A * x

is a per-pixel convex blend of the input and the color mask.

The discriminator is a strided-conv trunk shared by a critic head (one
unbounded score per image) and an age-classifier head (5 logits). No
batch-coupled normalization anywhere in the discriminator: the gradient
penalty needs per-sample critic semantics.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .conditioning import NUM_GROUPS, broadcast_condition, concat_input
from .errors import InvariantError, NumericError, ShapeError

IMAGE_CHANNELS = 3


@dataclass(frozen=True)
class ModelConfig:
    """Layer counts and channel widths for both networks."""

    gen_base_channels: int = 32
    gen_down_blocks: int = 2
    gen_res_blocks: int = 2
    disc_base_channels: int = 32
    disc_layers: int = 3

    def __post_init__(self) -> None:
        if self.gen_base_channels < 1 or self.disc_base_channels < 1:
            raise InvariantError("channel widths must be >= 1")
        if self.gen_down_blocks < 0 or self.gen_res_blocks < 0 or self.disc_layers < 1:
            raise InvariantError("invalid layer counts")

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Minimal variant used by the gradient-check tests (8x8 inputs)."""
        return cls(gen_base_channels=4, gen_down_blocks=0, gen_res_blocks=0,
                   disc_base_channels=4, disc_layers=1)


class MaskPair(NamedTuple):
    attention: torch.Tensor  # (B,1,H,W) in [0,1]
    color: torch.Tensor      # (B,3,H,W) in [-1,1]


class DiscriminatorOutput(NamedTuple):
    critic: torch.Tensor  # (B,) unbounded scores
    logits: torch.Tensor  # (B,NUM_GROUPS) unnormalized


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Maps (images, target one-hot labels) to an attention/color mask pair."""

    def __init__(self, resolution: tuple[int, int], config: ModelConfig | None = None):
        super().__init__()
        config = config or ModelConfig()
        h, w = resolution
        if h % (2 ** config.gen_down_blocks) or w % (2 ** config.gen_down_blocks):
            raise ShapeError(
                f"resolution {resolution} not divisible by 2^{config.gen_down_blocks}"
            )
        self.resolution = (int(h), int(w))
        self.config = config

        ch = config.gen_base_channels
        layers: list[nn.Module] = [
            nn.Conv2d(IMAGE_CHANNELS + NUM_GROUPS, ch, 7, 1, 3),
            nn.InstanceNorm2d(ch, affine=True),
            nn.ReLU(inplace=True),
        ]
        for _ in range(config.gen_down_blocks):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, 2, 1),
                nn.InstanceNorm2d(ch * 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        for _ in range(config.gen_res_blocks):
            layers.append(ResidualBlock(ch))
        for _ in range(config.gen_down_blocks):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1),
                nn.InstanceNorm2d(ch // 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        self.trunk = nn.Sequential(*layers)
        # Heads: the only parameters not shared between the two mask paths.
        self.attention_head = nn.Conv2d(ch, 1, 7, 1, 3)
        self.color_head = nn.Conv2d(ch, IMAGE_CHANNELS, 7, 1, 3)
        # Bias the mask toward keeping the input at init; edits are then
        # carved out by the losses instead of recovered from a collapsed mask.
        nn.init.constant_(self.attention_head.bias, 3.0)

    def forward(self, images: torch.Tensor, target_onehots: torch.Tensor) -> MaskPair:
        _check_images(images, self.resolution)
        cond = broadcast_condition(target_onehots.to(images.dtype), *self.resolution)
        net_in = concat_input(images, cond)
        features = self.trunk(net_in)
        attention = torch.sigmoid(self.attention_head(features))
        color = torch.tanh(self.color_head(features))
        if not torch.isfinite(attention).all() or not torch.isfinite(color).all():
            raise NumericError(_locate_nonfinite(
                net_in, list(self.trunk.named_children()),
                {"attention_head": self.attention_head, "color_head": self.color_head},
            ))
        return MaskPair(attention=attention, color=color)


class Discriminator(nn.Module):
    """Shared-trunk critic and age classifier."""

    def __init__(self, resolution: tuple[int, int], config: ModelConfig | None = None):
        super().__init__()
        config = config or ModelConfig()
        h, w = resolution
        if h % (2 ** config.disc_layers) or w % (2 ** config.disc_layers):
            raise ShapeError(f"resolution {resolution} not divisible by 2^{config.disc_layers}")
        self.resolution = (int(h), int(w))
        self.config = config

        layers: list[nn.Module] = []
        in_ch = IMAGE_CHANNELS
        ch = config.disc_base_channels
        for _ in range(config.disc_layers):
            layers += [nn.Conv2d(in_ch, ch, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            in_ch = ch
            ch *= 2
        self.trunk = nn.Sequential(*layers)
        feat = in_ch * (h // 2 ** config.disc_layers) * (w // 2 ** config.disc_layers)
        self.critic_head = nn.Linear(feat, 1)
        self.classifier_head = nn.Linear(feat, NUM_GROUPS)

    def forward(self, images: torch.Tensor) -> DiscriminatorOutput:
        _check_images(images, self.resolution)
        features = self.trunk(images).flatten(1)
        critic = self.critic_head(features).squeeze(1)
        logits = self.classifier_head(features)
        if not torch.isfinite(critic).all() or not torch.isfinite(logits).all():
            raise NumericError(_locate_nonfinite(
                images, list(self.trunk.named_children()),
                {"critic_head": self.critic_head, "classifier_head": self.classifier_head},
                flatten_before_heads=True,
            ))
        return DiscriminatorOutput(critic=critic, logits=logits)

    def critic_score(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images).critic


def compose(images: torch.Tensor, masks: MaskPair) -> torch.Tensor:
    """Blends the input with the color mask under the attention mask.

    Per pixel: out = (1 - A) * C + A * x. A must lie in [0,1]; the output
    is then channel-wise bounded between x and C.
    """
    attention, color = masks
    if images.shape[-2:] != attention.shape[-2:] or images.shape != color.shape:
        raise ShapeError(
            f"compose dims disagree: image {tuple(images.shape)}, "
            f"A {tuple(attention.shape)}, C {tuple(color.shape)}"
        )
    if (attention < 0).any() or (attention > 1).any():
        raise InvariantError(
            f"attention mask outside [0,1]: min={float(attention.min()):.4g} "
            f"max={float(attention.max()):.4g}"
        )
    return (1.0 - attention) * color + attention * images


def _check_images(images: torch.Tensor, resolution: tuple[int, int]) -> None:
    if images.ndim != 4 or images.shape[1] != IMAGE_CHANNELS:
        raise ShapeError(f"expected (B,{IMAGE_CHANNELS},H,W) images, got {tuple(images.shape)}")
    if tuple(images.shape[-2:]) != resolution:
        raise ShapeError(
            f"image resolution {tuple(images.shape[-2:])} does not match model {resolution}"
        )


def _locate_nonfinite(net_in: torch.Tensor,
                      trunk_stages: list[tuple[str, nn.Module]],
                      heads: dict[str, nn.Module],
                      flatten_before_heads: bool = False) -> str:
    """Walks the trunk stage by stage to name the first non-finite layer."""
    with torch.no_grad():
        x = net_in
        for name, stage in trunk_stages:
            x = stage(x)
            if not torch.isfinite(x).all():
                return f"non-finite activation in layer 'trunk.{name}'"
        if flatten_before_heads:
            x = x.flatten(1)
        for name, head in heads.items():
            if not torch.isfinite(head(x)).all():
                return f"non-finite activation in layer '{name}'"
    return "non-finite activation in model output"
