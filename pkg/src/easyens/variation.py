"""Channel-axis input diversification for grouped ensembles.

A grouped model sees its input as N channel blocks. The variationers here
assemble those blocks on the data path: verbatim repeats, randomly drawn
augmentations, sensor-modality grouping, and input masking (zeroing whole
groups per instance to emulate bootstrap subsets). Stages compose; the
total group count is the product of the stage factors.

All operations take and return plain float arrays of shape
(batch, channels, width) and are pure given an explicit generator, so
per-batch application parallelizes with split rng streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


# -- elementary waveform transforms ---------------------------------------------------


def jitter(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise with standard deviation ``sigma``."""
    if sigma < 0:
        raise ValueError(f"jitter sigma must be >= 0, got {sigma}")
    return x + rng.normal(0.0, sigma, size=x.shape)


def scale(x: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    """Multiply each channel of each instance by one draw from [1-r, 1+r]."""
    if not 0 <= amount < 1:
        raise ValueError(f"scale amount must lie in [0, 1), got {amount}")
    factors = rng.uniform(1.0 - amount, 1.0 + amount, size=x.shape[:-1] + (1,))
    return x * factors


def shift(x: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    """Add one per-channel constant offset drawn from [-s, s]."""
    if amount < 0:
        raise ValueError(f"shift amount must be >= 0, got {amount}")
    offsets = rng.uniform(-amount, amount, size=x.shape[:-1] + (1,))
    return x + offsets


def rotation_augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Randomly permute and sign-flip each 3-axis channel triplet.

    Emulates sensors mounted in arbitrary orientations: per instance and per
    triplet, one of the 48 axis-permutation/sign combinations is drawn
    uniformly. Value magnitudes within a triplet are preserved.
    """
    b, c, w = x.shape
    if c % 3:
        raise ValueError(f"rotation needs 3-axis channel triplets, got {c} channels")
    t = c // 3
    xt = x.reshape(b, t, 3, w)
    perms = np.argsort(rng.random((b, t, 3)), axis=-1)
    signs = rng.integers(0, 2, size=(b, t, 3)) * 2 - 1
    out = np.take_along_axis(xt, perms[..., None], axis=2) * signs[..., None]
    return out.reshape(b, c, w)


@dataclass(frozen=True)
class AugmentationSet:
    """Ordered set of named waveform transforms to draw from."""

    transforms: tuple[tuple[str, Callable[[np.ndarray, np.random.Generator], np.ndarray]], ...]

    def __len__(self) -> int:
        return len(self.transforms)

    @classmethod
    def default(cls, *, jitter_lo: float = 0.05, jitter_hi: float = 0.2,
                scale_amount: float = 0.2, shift_amount: float = 0.2) -> "AugmentationSet":
        return cls(transforms=(
            ("jitter_lo", lambda x, rng: jitter(x, jitter_lo, rng)),
            ("jitter_hi", lambda x, rng: jitter(x, jitter_hi, rng)),
            ("scale", lambda x, rng: scale(x, scale_amount, rng)),
            ("shift", lambda x, rng: shift(x, shift_amount, rng)),
        ))


# -- channel-axis assembly ---------------------------------------------------------------


def repeat_rn(x: np.ndarray, n: int) -> np.ndarray:
    """Concatenate ``n`` verbatim copies of ``x`` along the channel axis."""
    if n < 1:
        raise ValueError(f"repeat count must be >= 1, got {n}")
    if n == 1:
        return x.copy()
    return np.concatenate([x] * n, axis=1)


def augment_an(x: np.ndarray, aug_set: AugmentationSet, n: int,
               rng: np.random.Generator) -> np.ndarray:
    """Apply ``n`` distinct transforms (drawn without replacement) to copies.

    The copies concatenate along the channel axis in draw order, so each
    channel group sees a differently perturbed view of the same input.
    """
    if len(aug_set) < n:
        raise ValueError(f"augmentation set of size {len(aug_set)} cannot supply "
                         f"{n} distinct transforms")
    idx = rng.choice(len(aug_set), size=n, replace=False)
    parts = [aug_set.transforms[i][1](x, rng) for i in idx]
    return np.concatenate(parts, axis=1)


@dataclass
class MaskTensor:
    """Boolean (batch, N) matrix selecting which groups see which instances."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError(f"mask must be 2-d (batch, groups), got shape "
                             f"{self.bits.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


def generate_mask(batch: int, n: int, rng: np.random.Generator) -> MaskTensor:
    """Random mask with exactly N-1 valid groups per instance.

    Which group an instance drops is assigned like dealing cross-validation
    folds: group drop counts across the batch stay balanced within one.
    """
    if n < 2:
        raise ValueError(f"masking needs at least 2 groups, got {n}")
    reps = -(-batch // n)
    pool = np.tile(rng.permutation(n), reps)[:batch]
    dropped = rng.permutation(pool)
    bits = np.ones((batch, n), dtype=bool)
    bits[np.arange(batch), dropped] = False
    return MaskTensor(bits)


def mask_mn(x_repeated: np.ndarray, mask: MaskTensor | np.ndarray) -> np.ndarray:
    """Zero whole channel groups per instance: block g of row i survives iff
    mask[i, g]. The input must already be repeated/grouped into N blocks."""
    bits = mask.bits if isinstance(mask, MaskTensor) else np.asarray(mask, dtype=bool)
    b, c, w = x_repeated.shape
    if bits.shape[0] != b:
        raise ValueError(f"mask batch {bits.shape[0]} does not match input batch {b}")
    n = bits.shape[1]
    if c % n:
        raise ValueError(f"{c} channels do not divide into {n} mask groups")
    factors = np.repeat(bits, c // n, axis=1)[:, :, None]
    return x_repeated * factors


# -- modality grouping ------------------------------------------------------------------


@dataclass(frozen=True)
class ModalityLayout:
    """Named channel ranges, one per sensor modality.

    ``groups`` maps names to half-open channel ranges of the raw input.
    After grouping, every modality occupies ``uniform_width`` channels
    (narrow modalities are cyclically replicated, mirroring the usual trick
    of copying a 1-d sensor to three dimensions).
    """

    groups: tuple[tuple[str, tuple[int, int]], ...]
    uniform_width: int | None = None

    def validate(self, num_channels: int) -> None:
        covered = np.zeros(num_channels, dtype=int)
        for name, (start, stop) in self.groups:
            if not 0 <= start < stop <= num_channels:
                raise ValueError(f"modality {name!r} range ({start}, {stop}) out of "
                                 f"bounds for {num_channels} channels")
            covered[start:stop] += 1
        if (covered > 1).any():
            raise ValueError("modality ranges overlap")
        if (covered == 0).any():
            raise ValueError("modality ranges do not cover every channel")

    def resolved_width(self) -> int:
        widths = [stop - start for _, (start, stop) in self.groups]
        width = self.uniform_width if self.uniform_width is not None else max(widths)
        if any(w > width for w in widths):
            raise ValueError(f"cannot equalize: a modality is wider than "
                             f"uniform_width={width}")
        return width

    def to_dict(self) -> dict:
        return {"groups": [[name, list(rng)] for name, rng in self.groups],
                "uniform_width": self.uniform_width}

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityLayout":
        return cls(groups=tuple((name, (int(r[0]), int(r[1])))
                                for name, r in d["groups"]),
                   uniform_width=d.get("uniform_width"))


def modality_group(x: np.ndarray, layout: ModalityLayout) -> tuple[np.ndarray, int]:
    """Rearrange channels so each modality forms one equal-width group.

    Returns the regrouped tensor and the implied ensemble count (the number
    of modality groups), which the grouped model must be configured with.
    """
    b, c, w = x.shape
    layout.validate(c)
    width = layout.resolved_width()
    indices = []
    for _, (start, stop) in layout.groups:
        span = np.arange(start, stop)
        indices.append(np.resize(span, width))
    order = np.concatenate(indices)
    return x[:, order, :], len(layout.groups)


# -- composition --------------------------------------------------------------------------


@dataclass
class _Stage:
    kind: str
    n: int = 1
    aug_set: AugmentationSet | None = None
    layout: ModalityLayout | None = None

    @property
    def group_factor(self) -> int:
        if self.kind == "modality":
            return len(self.layout.groups)
        if self.kind in ("repeat", "augment", "mask"):
            return self.n
        return 1


class Pipeline:
    """Ordered variationer stages applied at batch-assembly time.

    ``apply_train`` runs the stochastic form (augmentations drawn, masks
    generated) and returns the assembled batch plus the per-group keep mask
    (or ``None`` when no mask stage is present). ``apply_eval`` runs the
    deterministic form: augmentation stages degrade to verbatim repeats and
    no groups are masked.
    """

    def __init__(self, stages: Sequence[_Stage]):
        self.stages = list(stages)
        mask_stages = [s for s in self.stages if s.kind == "mask"]
        if len(mask_stages) > 1:
            raise ValueError("at most one mask stage is supported")
        mod_positions = [i for i, s in enumerate(self.stages) if s.kind == "modality"]
        if mod_positions and mod_positions[0] != min(
                i for i, s in enumerate(self.stages) if s.kind != "rotation"):
            raise ValueError("a modality stage must precede repeat/augment/mask stages")
        self.mask_n = mask_stages[0].n if mask_stages else None

    @property
    def group_factor(self) -> int:
        total = 1
        for s in self.stages:
            total *= s.group_factor
        return total

    def implied_lambda(self) -> float:
        """Merge weight matching the number of groups left valid per instance."""
        total = self.group_factor
        valid = total if self.mask_n is None else total - total // self.mask_n
        return 1.0 / valid

    def output_channels(self, input_channels: int) -> int:
        c = input_channels
        for s in self.stages:
            if s.kind == "modality":
                c = len(s.layout.groups) * s.layout.resolved_width()
            elif s.kind in ("repeat", "augment", "mask"):
                c = c * s.n
        return c

    def apply_train(self, x: np.ndarray,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
        mask: np.ndarray | None = None
        groups = 1
        for stage in self.stages:
            if stage.kind == "rotation":
                x = rotation_augment(x, rng)
            elif stage.kind == "modality":
                x, groups = modality_group(x, stage.layout)
            elif stage.kind == "repeat":
                x = repeat_rn(x, stage.n)
                if mask is not None:
                    mask = np.tile(mask, (1, stage.n))
                groups *= stage.n
            elif stage.kind == "augment":
                x = augment_an(x, stage.aug_set, stage.n, rng)
                if mask is not None:
                    mask = np.tile(mask, (1, stage.n))
                groups *= stage.n
            elif stage.kind == "mask":
                m = generate_mask(x.shape[0], stage.n, rng)
                x = mask_mn(repeat_rn(x, stage.n), m)
                # each of the n copies spans the groups assembled so far
                mask = np.repeat(m.bits, groups, axis=1)
                groups *= stage.n
        if mask is not None:
            # re-zero in case a later stochastic stage perturbed masked groups
            x = mask_mn(x, mask)
        return x, mask

    def apply_eval(self, x: np.ndarray) -> np.ndarray:
        for stage in self.stages:
            if stage.kind == "rotation":
                continue
            if stage.kind == "modality":
                x, _ = modality_group(x, stage.layout)
            elif stage.kind in ("repeat", "augment", "mask"):
                x = repeat_rn(x, stage.n)
        return x


def compose(stage_descriptors: Sequence, layout: ModalityLayout | None = None,
            aug_set: AugmentationSet | None = None) -> Pipeline:
    """Build a pipeline from config descriptors.

    Descriptors are either a bare kind string (``"rotation"``, ``"mod"``) or
    a one-entry mapping of kind to count, e.g. ``{"repeat": 4}``,
    ``{"augment": 4}``, ``{"mask": 4}``. A modality stage requires the
    dataset's layout.
    """
    if aug_set is None:
        aug_set = AugmentationSet.default()
    stages: list[_Stage] = []
    for desc in stage_descriptors:
        if isinstance(desc, str):
            kind, value = desc, None
        elif isinstance(desc, dict) and len(desc) == 1:
            kind, value = next(iter(desc.items()))
        elif isinstance(desc, dict) and "kind" in desc:
            kind, value = desc["kind"], desc.get("n")
        else:
            raise ValueError(f"cannot parse pipeline stage {desc!r}")
        kind = {"mod": "modality", "rot": "rotation"}.get(kind, kind)
        if kind == "rotation":
            stages.append(_Stage("rotation"))
        elif kind == "modality":
            if layout is None:
                raise ValueError("a modality stage needs the dataset's modality layout")
            stages.append(_Stage("modality", layout=layout))
        elif kind in ("repeat", "augment", "mask"):
            n = int(value)
            if kind == "mask" and n < 2:
                raise ValueError("mask stage needs n >= 2")
            if n < 1:
                raise ValueError(f"{kind} stage needs n >= 1")
            stages.append(_Stage(kind, n=n, aug_set=aug_set))
        else:
            raise ValueError(f"unknown pipeline stage kind {kind!r}")
    return Pipeline(stages)
