"""Quantitative evaluation: age-distribution discrepancy, identity
verification, mask triptych export, and the attention locality score.

Age estimation and identity verification run through pluggable backends,
so a hosted face-analysis service can stand behind them. The default
desk-scale backend is a small age classifier trained independently of the
GAN; its softmax over group midpoints gives an age estimate and its
penultimate features give a unit-norm identity embedding. Verification
confidence maps cosine similarity affinely from [-1,1] onto [0,100].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn, optim
from PIL import Image

from .conditioning import NUM_GROUPS, AgeGroupScheme
from .data import TensorBundle
from .errors import CheckpointError, InvariantError, ShapeError
from .models import MaskPair

log = logging.getLogger(__name__)

DEFAULT_VERIFICATION_THRESHOLD = 73.975
FAR_NOTE = "default threshold corresponds to FAR = 1e-5 on the backend that calibrated it"

# Open-ended last group gets this synthetic span when computing midpoints.
DEFAULT_LAST_GROUP_SPAN = 20

AgeEstimator = Callable[[torch.Tensor], torch.Tensor]      # (B,3,H,W) -> (B,) years
IdentityEmbedder = Callable[[torch.Tensor], torch.Tensor]  # (B,3,H,W) -> (B,D) unit-norm


class AgeClassifier(nn.Module):
    """Small standalone CNN used as the evaluation oracle (not the GAN critic)."""

    def __init__(self, resolution: tuple[int, int], base_channels: int = 16,
                 embed_dim: int = 64):
        super().__init__()
        h, w = resolution
        if h % 8 or w % 8:
            raise ShapeError(f"classifier resolution {resolution} must be divisible by 8")
        self.resolution = (int(h), int(w))
        ch = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(3, ch, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch * 2, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(ch * 2, ch * 4, 3, 2, 1), nn.ReLU(inplace=True),
        )
        self.embed = nn.Linear(ch * 4 * (h // 8) * (w // 8), embed_dim)
        self.head = nn.Linear(embed_dim, NUM_GROUPS)
        self.base_channels = base_channels
        self.embed_dim = embed_dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(F.relu(self.embedding(images)))

    def embedding(self, images: torch.Tensor) -> torch.Tensor:
        return self.embed(self.features(images).flatten(1))

    def predict_groups(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self(images).argmax(1)


def train_age_classifier(bundle: TensorBundle, epochs: int = 5, lr: float = 1e-3,
                         batch_size: int = 64, seed: int = 0) -> AgeClassifier:
    """Fits the oracle classifier on real images with their source groups."""
    torch.manual_seed(seed)
    resolution = tuple(bundle.images.shape[-2:])
    model = AgeClassifier(resolution)
    opt = optim.Adam(model.parameters(), lr=lr)
    rng = torch.Generator()
    rng.manual_seed(seed)
    n = bundle.images.shape[0]
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=rng)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(bundle.images[idx]), bundle.group_indices[idx])
            loss.backward()
            opt.step()
        log.info("oracle epoch %d loss=%.4f", epoch, float(loss.detach()))
    model.eval()
    return model


def classifier_accuracy(model: AgeClassifier, images: torch.Tensor,
                        group_indices: torch.Tensor) -> float:
    return float((model.predict_groups(images) == group_indices).float().mean())


def save_age_classifier(model: AgeClassifier, path: str | Path) -> None:
    torch.save({
        "kind": "age_classifier",
        "resolution": list(model.resolution),
        "base_channels": model.base_channels,
        "embed_dim": model.embed_dim,
        "state": model.state_dict(),
    }, path)


def load_age_classifier(path: str | Path) -> AgeClassifier:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read classifier checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != "age_classifier":
        raise CheckpointError(f"{path} is not an age-classifier checkpoint")
    model = AgeClassifier(tuple(payload["resolution"]), payload["base_channels"],
                          payload["embed_dim"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def group_midpoints(scheme: AgeGroupScheme,
                    last_group_span: int = DEFAULT_LAST_GROUP_SPAN) -> torch.Tensor:
    mids = []
    for k in range(NUM_GROUPS):
        low, high = scheme.range_of(k)
        if high is None:
            high = low + last_group_span - 1
        mids.append((low + high) / 2.0)
    return torch.tensor(mids)


class ClassifierAgeEstimator:
    """Expected age under the classifier's softmax over group midpoints."""

    def __init__(self, model: AgeClassifier, scheme: AgeGroupScheme | None = None,
                 last_group_span: int = DEFAULT_LAST_GROUP_SPAN):
        self.model = model
        self.midpoints = group_midpoints(scheme or AgeGroupScheme(), last_group_span)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            probs = F.softmax(self.model(images), dim=1)
        return probs @ self.midpoints.to(probs.dtype)


class ClassifierEmbedder:
    """Unit-norm identity embedding from the classifier's penultimate layer."""

    def __init__(self, model: AgeClassifier):
        self.model = model

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            emb = self.model.embedding(images)
        return F.normalize(emb, dim=1)


def similarity_to_confidence(similarity: torch.Tensor | float) -> torch.Tensor | float:
    """Affine map of cosine similarity from [-1,1] to [0,100]."""
    return (similarity + 1.0) * 50.0


@dataclass(frozen=True)
class GroupAgeStats:
    mean_generated: float
    mean_generic: float
    discrepancy: float
    n_generated: int
    n_generic: int


@dataclass(frozen=True)
class AgeDistributionReport:
    per_group: dict[int, GroupAgeStats]
    group_names: dict[int, str]

    def cell(self, group: int) -> str:
        stats = self.per_group[group]
        return format_mean_cell(stats.mean_generated, stats.discrepancy)

    def to_markdown(self) -> str:
        groups = sorted(self.per_group)
        header = "| | " + " | ".join(self.group_names[g] for g in groups) + " |"
        sep = "|---" * (len(groups) + 1) + "|"
        generic = "| generic | " + " | ".join(
            f"{self.per_group[g].mean_generic:.2f}" for g in groups) + " |"
        generated = "| generated | " + " | ".join(self.cell(g) for g in groups) + " |"
        return "\n".join([header, sep, generic, generated])

    def to_csv(self) -> str:
        lines = ["group,mean_generated,mean_generic,discrepancy,n_generated,n_generic"]
        for g in sorted(self.per_group):
            s = self.per_group[g]
            lines.append(f"{self.group_names[g]},{s.mean_generated!r},"
                         f"{s.mean_generic!r},{s.discrepancy!r},"
                         f"{s.n_generated},{s.n_generic}")
        return "\n".join(lines)


def format_mean_cell(mean: float, discrepancy: float) -> str:
    """The mean(discrepancy) table cell syntax, e.g. 25.92(0.80)."""
    return f"{mean:.2f}({discrepancy:.2f})"


def group_name(scheme: AgeGroupScheme, group: int) -> str:
    low, high = scheme.range_of(group)
    return f"{low}-{high}" if high is not None else f"{low}+"


def age_discrepancy(estimator: AgeEstimator,
                    generated: Mapping[int, torch.Tensor],
                    generic: Mapping[int, torch.Tensor],
                    scheme: AgeGroupScheme | None = None) -> AgeDistributionReport:
    """Per-group mean estimated ages of generated vs generic images.

    discrepancy = |mean(generated ages) - mean(generic ages)| per group.
    """
    scheme = scheme or AgeGroupScheme()
    per_group: dict[int, GroupAgeStats] = {}
    for group in sorted(generated):
        gen_images = generated[group]
        real_images = generic.get(group)
        if gen_images is None or len(gen_images) == 0:
            raise InvariantError(f"no generated images for group {group}")
        if real_images is None or len(real_images) == 0:
            raise InvariantError(f"no generic images for group {group}")
        mean_gen = float(estimator(gen_images).mean())
        mean_real = float(estimator(real_images).mean())
        per_group[group] = GroupAgeStats(
            mean_generated=mean_gen, mean_generic=mean_real,
            discrepancy=abs(mean_gen - mean_real),
            n_generated=len(gen_images), n_generic=len(real_images),
        )
    names = {g: group_name(scheme, g) for g in per_group}
    return AgeDistributionReport(per_group=per_group, group_names=names)


@dataclass(frozen=True)
class PairStats:
    mean_confidence: float
    rate: float
    n_pairs: int


@dataclass(frozen=True)
class VerificationReport:
    overall: PairStats
    by_group_pair: dict[tuple[int, int], PairStats]
    threshold: float
    n_excluded: int
    far_note: str = FAR_NOTE

    def to_markdown(self, scheme: AgeGroupScheme | None = None) -> str:
        scheme = scheme or AgeGroupScheme()
        lines = [
            f"Verification (threshold = {self.threshold}; {self.far_note})",
            "",
            "| source | target | mean confidence | rate | pairs |",
            "|---|---|---|---|---|",
        ]
        for (sg, tg) in sorted(self.by_group_pair):
            s = self.by_group_pair[(sg, tg)]
            lines.append(f"| {group_name(scheme, sg)} | {group_name(scheme, tg)} | "
                         f"{s.mean_confidence:.2f} | {100.0 * s.rate:.2f} | {s.n_pairs} |")
        lines.append(f"| all | all | {self.overall.mean_confidence:.2f} | "
                     f"{100.0 * self.overall.rate:.2f} | {self.overall.n_pairs} |")
        if self.n_excluded:
            lines.append(f"\nexcluded pairs (embedding failures): {self.n_excluded}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["source_group,target_group,mean_confidence,rate,n_pairs"]
        for (sg, tg) in sorted(self.by_group_pair):
            s = self.by_group_pair[(sg, tg)]
            lines.append(f"{sg},{tg},{s.mean_confidence!r},{s.rate!r},{s.n_pairs}")
        s = self.overall
        lines.append(f"all,all,{s.mean_confidence!r},{s.rate!r},{s.n_pairs}")
        return "\n".join(lines)


def _pair_stats(confidences: list[float], threshold: float) -> PairStats:
    n = len(confidences)
    above = sum(1 for c in confidences if c >= threshold)
    return PairStats(mean_confidence=sum(confidences) / n, rate=above / n, n_pairs=n)


def verification(embedder: IdentityEmbedder,
                 pairs: Sequence[tuple[torch.Tensor, torch.Tensor]],
                 threshold: float = DEFAULT_VERIFICATION_THRESHOLD,
                 group_pairs: Sequence[tuple[int, int]] | None = None
                 ) -> VerificationReport:
    """Identity confidence between each (input, generated) pair.

    A pair whose embedding fails is excluded and counted. rate is the
    fraction of pairs at or above the threshold.
    """
    if not pairs:
        raise InvariantError("verification needs at least one pair")
    if group_pairs is not None and len(group_pairs) != len(pairs):
        raise ShapeError("group_pairs must align with pairs")
    confidences: list[float] = []
    kept_groups: list[tuple[int, int]] = []
    n_excluded = 0
    for i, (source, generated) in enumerate(pairs):
        try:
            emb = torch.stack([_single_embedding(embedder, source),
                               _single_embedding(embedder, generated)])
        except Exception as exc:
            n_excluded += 1
            log.warning("verification: pair %d excluded (%s)", i, exc)
            continue
        sim = float((emb[0] * emb[1]).sum())
        confidences.append(float(similarity_to_confidence(sim)))
        if group_pairs is not None:
            kept_groups.append(tuple(group_pairs[i]))
    if not confidences:
        raise InvariantError("all verification pairs failed to embed")
    by_group: dict[tuple[int, int], PairStats] = {}
    if group_pairs is not None:
        buckets: dict[tuple[int, int], list[float]] = {}
        for key, conf in zip(kept_groups, confidences):
            buckets.setdefault(key, []).append(conf)
        by_group = {key: _pair_stats(vals, threshold) for key, vals in buckets.items()}
    return VerificationReport(overall=_pair_stats(confidences, threshold),
                              by_group_pair=by_group, threshold=threshold,
                              n_excluded=n_excluded)


def _single_embedding(embedder: IdentityEmbedder, image: torch.Tensor) -> torch.Tensor:
    emb = embedder(image.unsqueeze(0)).squeeze(0)
    norm = float(emb.norm())
    if abs(norm - 1.0) > 1e-5:
        raise InvariantError(f"embedding norm {norm} not unit")
    return emb


def attention_locality_score(attention: torch.Tensor, region: torch.Tensor) -> float:
    """Fraction of total edit mass (1 - A) that falls inside the aging region.

    1.0 means all editing is confined to the region; a uniform mask scores
    the region's area fraction. An all-ones mask has no edit mass and
    scores 0 with a warning.
    """
    if attention.ndim != 4 or attention.shape[1] != 1:
        raise ShapeError(f"expected (B,1,H,W) attention, got {tuple(attention.shape)}")
    if region.dtype != torch.bool or region.shape != attention.shape[-2:]:
        raise ShapeError("region must be a (H,W) boolean mask matching the attention dims")
    inverse = 1.0 - attention
    total = float(inverse.sum())
    if total == 0.0:
        log.warning("attention_locality_score: zero edit mass (A is all ones)")
        return 0.0
    inside = float(inverse[:, :, region].sum())
    return inside / total


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3,H,W) in [-1,1] -> (H,W,3) uint8."""
    arr = image.detach().clamp(-1, 1).permute(1, 2, 0).numpy()
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def attention_to_uint8(attention: torch.Tensor) -> np.ndarray:
    """(1,H,W) in [0,1] -> (H,W,3) grayscale uint8; 0 -> black, 1 -> white."""
    arr = attention.detach().clamp(0, 1).squeeze(0).numpy()
    gray = np.round(arr * 255.0).astype(np.uint8)
    return np.stack([gray] * 3, axis=-1)


def triptych_array(outputs: torch.Tensor, masks: MaskPair) -> np.ndarray:
    """Stacks output / attention / color rows, one column per target.

    outputs (T,3,H,W), masks batched over the same T targets; result is a
    (3H, T*W, 3) uint8 image.
    """
    if outputs.ndim != 4:
        raise ShapeError(f"expected (T,3,H,W) outputs, got {tuple(outputs.shape)}")
    if masks.attention.shape[0] != outputs.shape[0]:
        raise ShapeError("mask batch does not match outputs")
    out_row = np.concatenate([to_uint8(img) for img in outputs], axis=1)
    att_row = np.concatenate([attention_to_uint8(a) for a in masks.attention], axis=1)
    col_row = np.concatenate([to_uint8(c) for c in masks.color], axis=1)
    return np.concatenate([out_row, att_row, col_row], axis=0)


def export_triptych(outputs: torch.Tensor, masks: MaskPair, path: str | Path) -> np.ndarray:
    """Writes the composite PNG and returns the array that was written."""
    grid = triptych_array(outputs, masks)
    Image.fromarray(grid).save(path)
    return grid
