"""Age-group binning, one-hot labels, and spatial condition maps.

Images are channel-first float tensors. A condition map for a label is a
(num_groups, H, W) tensor in which exactly one channel is all ones; it is
concatenated after the image channels, so a 3-channel image becomes an
8-channel network input under the default 5-group scheme.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import AgeOutOfRangeError, InvariantError, ShapeError

NUM_GROUPS = 5

# Default year ranges: [11,20], [21,30], [31,40], [41,50], [51,inf).
DEFAULT_LOWER_BOUNDS = (11, 21, 31, 41, 51)


@dataclass(frozen=True)
class AgeGroupScheme:
    """Five nonoverlapping age ranges given by ascending integer lower bounds.

    Range k spans [lower_bounds[k], lower_bounds[k+1] - 1]; the last range
    is open-ended above its lower bound.
    """

    lower_bounds: tuple[int, ...] = DEFAULT_LOWER_BOUNDS

    def __post_init__(self) -> None:
        if len(self.lower_bounds) != NUM_GROUPS:
            raise InvariantError(
                f"scheme needs {NUM_GROUPS} lower bounds, got {len(self.lower_bounds)}"
            )
        if any(later <= earlier for earlier, later
               in zip(self.lower_bounds, self.lower_bounds[1:])):
            raise InvariantError(f"lower bounds must be strictly ascending: {self.lower_bounds}")
        object.__setattr__(self, "lower_bounds", tuple(int(b) for b in self.lower_bounds))

    @classmethod
    def from_config(cls, lower_bounds: Sequence[int] | None) -> "AgeGroupScheme":
        if lower_bounds is None:
            return cls()
        return cls(tuple(int(b) for b in lower_bounds))

    def range_of(self, group_index: int) -> tuple[int, int | None]:
        """Inclusive (low, high) years for a group; high is None for the open-ended last group."""
        low = self.lower_bounds[group_index]
        if group_index == NUM_GROUPS - 1:
            return low, None
        return low, self.lower_bounds[group_index + 1] - 1

    def describe(self) -> str:
        parts = []
        for k in range(NUM_GROUPS):
            low, high = self.range_of(k)
            parts.append(f"[{low},{high}]" if high is not None else f"[{low},+)")
        return " ".join(parts)


@dataclass(frozen=True)
class AgeGroupLabel:
    """One-hot label over the five age groups."""

    group_index: int
    onehot: torch.Tensor = field(compare=False, default=None)  # (NUM_GROUPS,) float32

    def __post_init__(self) -> None:
        if not 0 <= self.group_index < NUM_GROUPS:
            raise InvariantError(f"group_index {self.group_index} outside [0,{NUM_GROUPS - 1}]")
        if self.onehot is None:
            vec = torch.zeros(NUM_GROUPS)
            vec[self.group_index] = 1.0
            object.__setattr__(self, "onehot", vec)
        else:
            validate_onehot(self.onehot.unsqueeze(0))
            if int(self.onehot.argmax()) != self.group_index:
                raise InvariantError("onehot does not match group_index")

    @classmethod
    def from_onehot(cls, onehot: torch.Tensor) -> "AgeGroupLabel":
        validate_onehot(onehot.unsqueeze(0))
        return cls(int(onehot.argmax()), onehot.to(torch.float32))


def validate_onehot(onehots: torch.Tensor) -> None:
    """Checks a (B, NUM_GROUPS) batch of labels is exactly one-hot."""
    if onehots.ndim != 2 or onehots.shape[1] != NUM_GROUPS:
        raise ShapeError(f"expected (B,{NUM_GROUPS}) labels, got {tuple(onehots.shape)}")
    is_binary = ((onehots == 0) | (onehots == 1)).all()
    if not is_binary or not (onehots.sum(dim=1) == 1).all():
        raise InvariantError("labels must be exactly one-hot over the age groups")


def bin_age(age: int, scheme: AgeGroupScheme | None = None) -> AgeGroupLabel:
    """Maps an integer age in years to its group label.

    Raises AgeOutOfRangeError for ages below the first lower bound.
    """
    scheme = scheme or AgeGroupScheme()
    age = int(age)
    if age < scheme.lower_bounds[0]:
        raise AgeOutOfRangeError(
            f"age {age} outside every range of scheme {scheme.describe()}"
        )
    index = NUM_GROUPS - 1
    for k in range(NUM_GROUPS - 1):
        if age <= scheme.lower_bounds[k + 1] - 1:
            index = k
            break
    return AgeGroupLabel(index)


def onehot_batch(group_indices: torch.Tensor) -> torch.Tensor:
    """(B,) long indices -> (B, NUM_GROUPS) float32 one-hot rows."""
    return torch.nn.functional.one_hot(group_indices.long(), NUM_GROUPS).to(torch.float32)


def broadcast_condition(label: AgeGroupLabel | torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Spatially broadcasts label(s) into constant-valued condition channels.

    A single label yields (NUM_GROUPS, h, w); a (B, NUM_GROUPS) batch yields
    (B, NUM_GROUPS, h, w). The channel matching the label is all ones, the
    rest all zeros.
    """
    if h <= 0 or w <= 0:
        raise ShapeError(f"condition map dims must be positive, got h={h}, w={w}")
    if isinstance(label, AgeGroupLabel):
        return label.onehot.view(NUM_GROUPS, 1, 1).expand(NUM_GROUPS, h, w).contiguous()
    validate_onehot(label)
    b = label.shape[0]
    return label.view(b, NUM_GROUPS, 1, 1).expand(b, NUM_GROUPS, h, w).contiguous()


def concat_input(image: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Concatenates image channels (first) with condition channels (after).

    Accepts (3,H,W)+(5,H,W) or batched (B,3,H,W)+(B,5,H,W).
    """
    if image.ndim not in (3, 4) or image.ndim != cond.ndim:
        raise ShapeError(
            f"image/cond rank mismatch: {tuple(image.shape)} vs {tuple(cond.shape)}"
        )
    if image.shape[-2:] != cond.shape[-2:]:
        raise ShapeError(
            f"spatial dims differ: image {tuple(image.shape[-2:])} vs cond {tuple(cond.shape[-2:])}"
        )
    return torch.cat([image, cond], dim=-3)
