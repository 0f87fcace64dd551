"""Build and convert the four ensemble styles of grouped 1-D CNNs.

One declarative architecture description yields any of:

* ``BL`` - a single VGG-style encoder with a dense classification head.
* ``PE`` - N independent copies, trained separately, logits averaged.
* ``ME`` - N encoders trained jointly under one merged output.
* ``EE`` - a single model whose convolutions and normalizations are grouped
  with N channel groups, so the groups never mix; the head is a grouped
  kernel-1 convolution producing per-group logits that are merged with a
  fixed weight (1/N by default).

Because a grouped layer computes exactly what N independent per-group
layers compute, an ME bundle's weights can be packed block-diagonally into
an EE model (``transplant_me_to_ee``) and the two produce matching logits
and gradients. ``filters`` in a block always means the per-path width: an
EE/ME/PE model with N=4 carries four times the physical channels of the BL
built from the same blocks.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layers import Conv1d, Dense, NormLayer, global_average_pool, max_pool, relu
from .tensor import Tensor, mul, reshape, sum_axis

MODES = ("BL", "PE", "ME", "EE")

_CKPT_MAGIC = b"EENS"
_CKPT_VERSION = 1


# -- architecture description -------------------------------------------------------


@dataclass(frozen=True)
class BlockSpec:
    """One convolutional block of the encoder.

    ``filters`` is the per-path width; the built model multiplies it by the
    block's group count in grouped modes. ``n_groups`` overrides the global
    ensemble count for this block (stepwise ensembles); ``None`` follows the
    architecture-level N.
    """

    filters: int
    kernel_size: int = 3
    conv_layers_in_block: int = 1
    norm: str = "layer"
    pool: int | None = 2
    n_groups: int | None = None


@dataclass
class ArchitectureSpec:
    """Declarative description of an encoder plus its ensemble configuration."""

    blocks: list[BlockSpec]
    input_channels: int = 3
    input_width: int = 256
    num_classes: int = 6
    ensemble_mode: str = "BL"
    n_ensemble: int = 1
    lambda_weight: float | None = None
    filter_multiplier: float = 1.0

    def validate(self) -> None:
        if not self.blocks:
            raise ValueError("architecture needs at least one block")
        if self.ensemble_mode not in MODES:
            raise ValueError(f"unknown ensemble mode {self.ensemble_mode!r}; "
                             f"expected one of {MODES}")
        if self.n_ensemble < 1:
            raise ValueError(f"n_ensemble must be >= 1, got {self.n_ensemble}")
        if self.ensemble_mode == "BL" and self.n_ensemble != 1:
            raise ValueError("BL mode implies n_ensemble == 1")
        if self.lambda_weight is not None and self.lambda_weight <= 0:
            raise ValueError(f"lambda_weight must be positive, got {self.lambda_weight}")
        if self.filter_multiplier <= 0:
            raise ValueError("filter_multiplier must be positive")
        if self.input_channels < 1 or self.input_width < 1 or self.num_classes < 2:
            raise ValueError("invalid input/output dimensions")
        for b in self.blocks:
            if b.filters < 1:
                raise ValueError("block filters must be >= 1")
            if b.norm not in ("layer", "group", "batch"):
                raise ValueError(f"unknown norm kind {b.norm!r}")
            if b.pool is not None and b.pool < 1:
                raise ValueError("pool window must be >= 1")
            if b.n_groups is not None and b.n_groups < 1:
                raise ValueError("block n_groups must be >= 1")

    def scaled_filters(self) -> list[int]:
        return [max(1, int(round(b.filters * self.filter_multiplier)))
                for b in self.blocks]

    def block_groups(self) -> list[int]:
        """Effective per-block group counts in grouped (EE) mode."""
        return [b.n_groups if b.n_groups is not None else self.n_ensemble
                for b in self.blocks]

    def replace(self, **changes) -> "ArchitectureSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        blocks = [BlockSpec(**b) for b in d["blocks"]]
        rest = {k: v for k, v in d.items() if k != "blocks"}
        return cls(blocks=blocks, **rest)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        return cls.from_dict(json.loads(text))


_VGG8_CONVS = (1, 1, 2, 2, 2)


def vgg_spec(num_blocks: int = 5, base_filters: int = 16, *,
             input_channels: int = 3, input_width: int = 256, num_classes: int = 6,
             kernel_size: int = 3, conv_layers: Sequence[int] | None = None,
             norm: str = "layer", pool: int = 2, mode: str = "BL",
             n_ensemble: int = 1, lambda_weight: float | None = None,
             filter_multiplier: float = 1.0,
             n_groups: Sequence[int] | None = None) -> ArchitectureSpec:
    """VGG-style spec with widths doubling per block.

    The 5-block default distributes 8 convolution layers as (1, 1, 2, 2, 2).
    """
    if conv_layers is None:
        conv_layers = _VGG8_CONVS[:num_blocks] if num_blocks <= 5 else (1,) * num_blocks
    if len(conv_layers) != num_blocks:
        raise ValueError("conv_layers length must match num_blocks")
    if n_groups is not None and len(n_groups) != num_blocks:
        raise ValueError("n_groups length must match num_blocks")
    blocks = [
        BlockSpec(filters=base_filters * (2 ** i), kernel_size=kernel_size,
                  conv_layers_in_block=conv_layers[i], norm=norm, pool=pool,
                  n_groups=None if n_groups is None else n_groups[i])
        for i in range(num_blocks)
    ]
    return ArchitectureSpec(blocks=blocks, input_channels=input_channels,
                            input_width=input_width, num_classes=num_classes,
                            ensemble_mode=mode, n_ensemble=n_ensemble,
                            lambda_weight=lambda_weight,
                            filter_multiplier=filter_multiplier)


ARCH_PRESETS = {
    "vgg8": dict(num_blocks=5, base_filters=16),
    "vgg8-desk": dict(num_blocks=5, base_filters=4),
}


def preset_spec(name: str, **overrides) -> ArchitectureSpec:
    if name not in ARCH_PRESETS:
        raise ValueError(f"unknown architecture preset {name!r}; "
                         f"expected one of {sorted(ARCH_PRESETS)}")
    kw = dict(ARCH_PRESETS[name])
    kw.update(overrides)
    return vgg_spec(**kw)


# -- network ------------------------------------------------------------------------


@dataclass
class _Block:
    units: list[tuple[Conv1d, NormLayer]]
    pool: int | None


class Network:
    """Encoder blocks + pooled head with a uniform forward contract.

    ``group_mask`` (batch x head_groups, 1=keep / 0=drop) zeroes both the
    per-group feature slice and the per-group logits of dropped groups, so a
    dropped group contributes exactly nothing to the output - including its
    head bias - and receives exactly zero gradient from that instance.
    """

    def __init__(self, *, input_channels: int, num_classes: int,
                 block_cfgs: Sequence[dict], head_grouped: bool, head_groups: int,
                 merge_weight: float, dtype, streams):
        self.input_channels = input_channels
        self.num_classes = num_classes
        self.head_grouped = head_grouped
        self.head_groups = head_groups
        self.merge_weight = float(merge_weight)
        self.dtype = np.dtype(dtype)
        self.blocks: list[_Block] = []

        cur = input_channels
        for cfg in block_cfgs:
            out = cfg["out_channels"]
            units = []
            for _ in range(cfg["n_convs"]):
                conv = Conv1d(cur, out, cfg["kernel_size"], groups=cfg["conv_groups"],
                              dtype=dtype, rng=streams)
                norm = NormLayer(cfg["norm_kind"], out, groups=cfg["norm_groups"],
                                 dtype=dtype)
                units.append((conv, norm))
                cur = out
            self.blocks.append(_Block(units=units, pool=cfg["pool"]))

        self.feature_dim = cur
        if head_grouped:
            if cur % head_groups:
                raise ValueError(f"feature width {cur} not divisible into "
                                 f"{head_groups} head groups")
            self.head = Conv1d(cur, num_classes * head_groups, 1,
                               groups=head_groups, dtype=dtype, rng=streams)
        else:
            self.head = Dense(cur, num_classes, dtype=dtype, rng=streams[0])

    # forward -------------------------------------------------------------

    @staticmethod
    def _tap(taps, name, t: Tensor):
        if taps is not None:
            taps[name] = t.data

    def _apply_group_mask(self, t: Tensor, mask: np.ndarray) -> Tensor:
        expanded = np.broadcast_to(
            np.asarray(mask, dtype=self.dtype)[:, :, None], t.shape)
        return mul(t, Tensor(expanded))

    def forward(self, x: Tensor, group_mask: np.ndarray | None = None,
                taps: dict | None = None) -> Tensor:
        if x.shape[1] != self.input_channels:
            raise ValueError(f"expected {self.input_channels} input channels, "
                             f"got {x.shape[1]}")
        h = x
        for bi, block in enumerate(self.blocks):
            for ui, (conv, norm) in enumerate(block.units):
                h = conv(h)
                self._tap(taps, f"block{bi}.conv{ui}", h)
                h = norm(h)
                self._tap(taps, f"block{bi}.norm{ui}", h)
                h = relu(h)
            if block.pool:
                h = max_pool(h, block.pool)
                self._tap(taps, f"block{bi}.pool", h)
        z = global_average_pool(h)
        self._tap(taps, "gap", z)

        if not self.head_grouped:
            if group_mask is not None:
                raise ValueError("group masking requires a grouped head")
            if self.merge_weight != 1.0:
                z = mul(z, self.merge_weight)
            logits = self.head(z)
        else:
            b = z.shape[0]
            n, k = self.head_groups, self.num_classes
            m = self.feature_dim // n
            if group_mask is not None:
                group_mask = np.asarray(group_mask)
                if group_mask.shape != (b, n):
                    raise ValueError(f"group mask shape {group_mask.shape} does not "
                                     f"match (batch={b}, groups={n})")
                z = reshape(self._apply_group_mask(reshape(z, (b, n, m)), group_mask),
                            (b, n * m))
            per = self.head(reshape(z, (b, n * m, 1)))
            per = reshape(per, (b, n, k))
            if group_mask is not None:
                per = self._apply_group_mask(per, group_mask)
            self._tap(taps, "per_group_logits", per)
            logits = mul(sum_axis(per, 1), self.merge_weight)
        self._tap(taps, "logits", logits)
        return logits

    __call__ = forward

    # bookkeeping -----------------------------------------------------------

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        for bi, block in enumerate(self.blocks):
            for ui, (conv, _) in enumerate(block.units):
                yield f"block{bi}.conv{ui}.weight", conv.weight
                yield f"block{bi}.conv{ui}.bias", conv.bias
        yield "head.weight", self.head.weight
        yield "head.bias", self.head.bias

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> Iterable[tuple[str, np.ndarray]]:
        for bi, block in enumerate(self.blocks):
            for ui, (_, norm) in enumerate(block.units):
                for name, buf in norm.buffers():
                    yield f"block{bi}.norm{ui}.{name}", buf

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        bi, ui = name.split(".")[:2]
        norm = self.blocks[int(bi[5:])].units[int(ui[4:])][1]
        buf = name.split(".")[-1]
        setattr(norm, buf, np.asarray(value, dtype=self.dtype))

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def set_training(self, training: bool) -> None:
        for block in self.blocks:
            for _, norm in block.units:
                norm.training = training

    def describe(self) -> dict:
        """Structural signature, used to compare architecture variants."""
        return {
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "blocks": [
                {
                    "out_channels": blk.units[0][0].out_channels,
                    "n_convs": len(blk.units),
                    "kernel_size": blk.units[0][0].kernel_size,
                    "pool": blk.pool,
                    "conv_groups": blk.units[0][0].groups,
                    "norm_kind": blk.units[0][1].kind,
                    "norm_groups": blk.units[0][1].groups,
                }
                for blk in self.blocks
            ],
            "head": "grouped" if self.head_grouped else "dense",
            "head_groups": self.head_groups if self.head_grouped else 1,
            "merge_weight": self.merge_weight,
        }


# -- resolution ----------------------------------------------------------------------


def _path_cfg(spec: ArchitectureSpec) -> dict:
    """Network configuration for BL or for a single PE/ME path."""
    widths = spec.scaled_filters()
    block_cfgs = []
    for b, w in zip(spec.blocks, widths):
        norm_groups = 1
        if b.norm == "group":
            norm_groups = b.n_groups or 1
        block_cfgs.append(dict(out_channels=w, kernel_size=b.kernel_size,
                               n_convs=b.conv_layers_in_block, pool=b.pool,
                               conv_groups=1, norm_kind=b.norm,
                               norm_groups=norm_groups))
    return dict(input_channels=spec.input_channels, num_classes=spec.num_classes,
                block_cfgs=block_cfgs, head_grouped=False, head_groups=1,
                merge_weight=1.0)


def _grouped_cfg(spec: ArchitectureSpec, *, conv_grouped: bool = True,
                 norm_kind: str = "group", merge_weight: float | None = None) -> dict:
    """Network configuration for EE and its ablation variants.

    Physical channel counts are per-path ``filters`` times the block group
    count, whether or not the convolutions actually group (an ungrouped
    ablation keeps the same model size, it just lets channels mix).
    """
    widths = spec.scaled_filters()
    groups = spec.block_groups()
    in_channels = spec.input_channels * groups[0]
    cur = in_channels
    block_cfgs = []
    for b, w, g in zip(spec.blocks, widths, groups):
        out = w * g
        conv_groups = g if conv_grouped else 1
        if cur % conv_groups or out % conv_groups:
            raise ValueError(f"channels not divisible by groups at block with "
                             f"filters={b.filters}: in={cur}, out={out}, groups={conv_groups}")
        norm_groups = {"group": g, "layer": 1, "batch": 1}[norm_kind]
        block_cfgs.append(dict(out_channels=out, kernel_size=b.kernel_size,
                               n_convs=b.conv_layers_in_block, pool=b.pool,
                               conv_groups=conv_groups, norm_kind=norm_kind,
                               norm_groups=norm_groups))
        cur = out
    head_groups = groups[-1]
    if merge_weight is None:
        merge_weight = (spec.lambda_weight if spec.lambda_weight is not None
                        else 1.0 / head_groups)
    return dict(input_channels=in_channels, num_classes=spec.num_classes,
                block_cfgs=block_cfgs, head_grouped=conv_grouped,
                head_groups=head_groups if conv_grouped else 1,
                merge_weight=merge_weight)


def _spawn_streams(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


# -- bundle --------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """One or more parameterized networks behind a uniform forward contract."""

    spec: ArchitectureSpec
    mode: str
    models: list[Network]
    merge_weight: float
    ablation: str | None = None

    def forward(self, x: Tensor, group_mask: np.ndarray | None = None,
                taps: dict | None = None) -> Tensor:
        if self.mode in ("BL", "EE"):
            return self.models[0].forward(x, group_mask=group_mask, taps=taps)
        if group_mask is not None:
            raise ValueError(f"group masking is not defined for {self.mode} bundles")
        per_path = []
        for g, model in enumerate(self.models):
            path_taps = {} if taps is not None else None
            per_path.append(model.forward(x, taps=path_taps))
            if taps is not None:
                for name, val in path_taps.items():
                    taps[f"path{g}.{name}"] = val
        merged = merge_outputs(per_path, self.merge_weight)
        if taps is not None:
            taps["logits"] = merged.data
        return merged

    __call__ = forward

    def per_path_logits(self, x: Tensor) -> list[Tensor]:
        if self.mode in ("BL", "EE"):
            raise ValueError(f"{self.mode} bundles expose a single output path")
        return [model.forward(x) for model in self.models]

    def parameters(self) -> list[Tensor]:
        return [t for model in self.models for t in model.parameters()]

    def param_count(self) -> int:
        return sum(m.param_count() for m in self.models)

    def train(self) -> None:
        for m in self.models:
            m.set_training(True)

    def eval(self) -> None:
        for m in self.models:
            m.set_training(False)

    @property
    def input_channels(self) -> int:
        return self.models[0].input_channels

    @property
    def input_repeat(self) -> int:
        """How many channel-wise copies of the raw input the bundle expects."""
        return self.input_channels // self.spec.input_channels

    def describe(self) -> dict:
        d = {"mode": self.mode, "num_models": len(self.models),
             "merge_weight": self.merge_weight, "ablation": self.ablation}
        d["model"] = self.models[0].describe()
        return d


def merge_outputs(per_path_logits: Sequence[Tensor], weight: float) -> Tensor:
    """Weighted sum of per-path logits: ``weight * sum(paths)``."""
    if len(per_path_logits) == 0:
        raise ValueError("merge_outputs needs at least one path")
    if weight <= 0:
        raise ValueError(f"merge weight must be positive, got {weight}")
    first = per_path_logits[0]
    for t in per_path_logits[1:]:
        if t.shape != first.shape:
            raise ValueError(f"path shape mismatch: {first.shape} vs {t.shape}")
    acc = first
    for t in per_path_logits[1:]:
        acc = acc + t
    return mul(acc, weight)


# -- builders ------------------------------------------------------------------------


def build(spec: ArchitectureSpec, seed: int, *, dtype=np.float64) -> ModelBundle:
    """Construct a BL/PE/ME/EE bundle from one architecture description.

    Every ensemble path (or channel group) initializes from its own random
    stream spawned off ``seed``, so grouped models and their per-path
    counterparts draw identical parameters for corresponding slices.
    """
    spec.validate()
    mode = spec.ensemble_mode
    if mode == "BL":
        streams = _spawn_streams(seed, 1)
        net = Network(**_path_cfg(spec), dtype=dtype, streams=streams)
        return ModelBundle(spec, "BL", [net], 1.0)
    if mode in ("PE", "ME"):
        n = spec.n_ensemble
        streams = _spawn_streams(seed, n)
        cfg = _path_cfg(spec)
        nets = [Network(**cfg, dtype=dtype, streams=[streams[g]]) for g in range(n)]
        if mode == "PE":
            merge = 1.0 / n  # uniform logit averaging at inference
        else:
            merge = (spec.lambda_weight if spec.lambda_weight is not None
                     else 1.0 / n)
        return ModelBundle(spec, mode, nets, merge)
    # EE
    cfg = _grouped_cfg(spec)
    max_groups = max(max(spec.block_groups()), cfg["head_groups"])
    streams = _spawn_streams(seed, max_groups)
    net = Network(**cfg, dtype=dtype, streams=streams)
    return ModelBundle(spec, "EE", [net], net.merge_weight)


def build_stepwise(spec: ArchitectureSpec, seed: int, *, dtype=np.float64) -> ModelBundle:
    """Build an EE model whose group count varies per block.

    Transitions between blocks re-partition the channel axis contiguously:
    more groups split each block's channels further, fewer groups merge
    adjacent ones. A constant per-block list reproduces uniform EE exactly.
    """
    if any(b.n_groups is None for b in spec.blocks):
        raise ValueError("build_stepwise requires n_groups on every block")
    return build(spec.replace(ensemble_mode="EE"), seed, dtype=dtype)


# -- ablation -------------------------------------------------------------------------


_ABLATION_NORMS = {"G": "group", "L": "layer", "B": "batch"}


@dataclass(frozen=True)
class AblationCode:
    """Three-letter variant code: conv {G,C}, norm {G,L,B}, weight {N,1}."""

    conv: str
    norm: str
    weight: str

    @classmethod
    def parse(cls, code: str) -> "AblationCode":
        if len(code) != 3:
            raise ValueError(f"ablation code must have three letters, got {code!r}")
        conv, norm, weight = code[0], code[1], code[2]
        if conv not in "GC":
            raise ValueError(f"invalid convolution letter {conv!r} (expected G or C)")
        if norm not in "GLB":
            raise ValueError(f"invalid normalization letter {norm!r} (expected G, L, or B)")
        if weight not in "N1":
            raise ValueError(f"invalid weight letter {weight!r} (expected N or 1)")
        return cls(conv, norm, weight)

    def __str__(self) -> str:
        return self.conv + self.norm + self.weight


def build_ablation_variant(code, spec: ArchitectureSpec, seed: int, *,
                           dtype=np.float64) -> ModelBundle:
    """Build one ablation arm of the grouped ensemble.

    All arms share the physical channel counts of the full grouped model
    (per-path filters times N) and take the N-times-repeated input; the
    letters independently toggle convolution grouping, normalization kind,
    and the merge weight. GGN is exactly the grouped ensemble; CL1 is the
    plain baseline fed with repeated input.
    """
    if isinstance(code, str):
        code = AblationCode.parse(code)
    spec.validate()
    n = spec.n_ensemble
    merge = (1.0 / n) if code.weight == "N" else 1.0
    cfg = _grouped_cfg(spec, conv_grouped=(code.conv == "G"),
                       norm_kind=_ABLATION_NORMS[code.norm], merge_weight=merge)
    streams = _spawn_streams(seed, max(max(spec.block_groups()), 1))
    net = Network(**cfg, dtype=dtype, streams=streams)
    return ModelBundle(spec, "EE", [net], net.merge_weight, ablation=str(code))


# -- parameter accounting ---------------------------------------------------------------


def parameter_count(spec: ArchitectureSpec) -> int:
    """Closed-form trainable-parameter count, independent of model building."""
    spec.validate()
    widths = spec.scaled_filters()
    mode = spec.ensemble_mode

    def path_params() -> int:
        total = 0
        cin = spec.input_channels
        for b, w in zip(spec.blocks, widths):
            for _ in range(b.conv_layers_in_block):
                total += w * cin * b.kernel_size + w
                cin = w
        total += spec.num_classes * cin + spec.num_classes
        return total

    if mode == "BL":
        return path_params()
    if mode in ("PE", "ME"):
        return spec.n_ensemble * path_params()

    groups = spec.block_groups()
    total = 0
    cin = spec.input_channels * groups[0]
    for b, w, g in zip(spec.blocks, widths, groups):
        out = w * g
        for _ in range(b.conv_layers_in_block):
            total += out * (cin // g) * b.kernel_size + out
            cin = out
    head_groups = groups[-1]
    total += (spec.num_classes * head_groups) * (cin // head_groups) \
        + spec.num_classes * head_groups
    return total


# -- transplant ---------------------------------------------------------------------------


def _structural_error(detail: str) -> ValueError:
    return ValueError(f"structural mismatch: {detail}")


def transplant_me_to_ee(me: ModelBundle, ee: ModelBundle) -> None:
    """Pack the N per-path weights of an ME bundle into a grouped EE model.

    Convolution weights stack along the output-channel axis (one slice per
    group); the per-path dense heads become the slices of the grouped
    kernel-1 head. This is a pure copy: after it, the EE forward on the
    N-times-repeated input matches the merged ME forward, and every EE
    parameter slice receives the same gradient as its ME counterpart.
    """
    if me.mode != "ME":
        raise ValueError(f"transplant source must be an ME bundle, got {me.mode}")
    if ee.mode != "EE" or ee.ablation is not None:
        raise ValueError(f"transplant target must be a plain EE bundle, got {ee.mode}")
    n = len(me.models)
    net = ee.models[0]
    if not net.head_grouped or net.head_groups != n:
        raise _structural_error(f"EE head has {net.head_groups} groups, ME has {n} paths")
    if abs(net.merge_weight - me.merge_weight) > 0:
        raise _structural_error(
            f"merge weights differ: EE {net.merge_weight} vs ME {me.merge_weight}")
    paths = me.models
    if any(len(p.blocks) != len(net.blocks) for p in paths):
        raise _structural_error("block depth differs between ME paths and EE model")

    has_batch_norm = False
    for bi, block in enumerate(net.blocks):
        for ui, (conv, norm) in enumerate(block.units):
            if conv.groups != n:
                raise _structural_error(
                    f"EE conv block{bi}.conv{ui} has groups={conv.groups}, expected {n}")
            cout_g = conv.out_channels // n
            packed_w = np.empty_like(conv.weight.data)
            packed_b = np.empty_like(conv.bias.data)
            for g, path in enumerate(paths):
                try:
                    pconv, pnorm = path.blocks[bi].units[ui]
                except IndexError:
                    raise _structural_error(
                        f"ME path {g} lacks unit block{bi}.conv{ui}") from None
                if pconv.weight.shape != (cout_g,) + conv.weight.shape[1:] \
                        or pconv.stride != conv.stride or pconv.padding != conv.padding:
                    raise _structural_error(
                        f"conv block{bi}.conv{ui}: path shape {pconv.weight.shape} does "
                        f"not slice into EE shape {conv.weight.shape}")
                packed_w[g * cout_g:(g + 1) * cout_g] = pconv.weight.data
                packed_b[g * cout_g:(g + 1) * cout_g] = pconv.bias.data
                if pnorm.kind == "batch":
                    has_batch_norm = True
                    norm.running_mean[g * cout_g:(g + 1) * cout_g] = pnorm.running_mean
                    norm.running_var[g * cout_g:(g + 1) * cout_g] = pnorm.running_var
            conv.weight.data = packed_w
            conv.bias.data = packed_b

    k = net.num_classes
    m = net.feature_dim // n
    packed_w = np.empty_like(net.head.weight.data)
    packed_b = np.empty_like(net.head.bias.data)
    for g, path in enumerate(paths):
        if not isinstance(path.head, Dense) or path.head.weight.shape != (k, m):
            raise _structural_error(
                f"ME path {g} head {path.head.weight.shape} does not slice into "
                f"EE head {net.head.weight.shape}")
        packed_w[g * k:(g + 1) * k] = path.head.weight.data[:, :, None]
        packed_b[g * k:(g + 1) * k] = path.head.bias.data
    net.head.weight.data = packed_w
    net.head.bias.data = packed_b

    if has_batch_norm:
        warnings.warn("transplanted models use batch normalization; grouped and "
                      "per-path forwards are only equivalent while batch statistics "
                      "coincide", stacklevel=2)


# -- checkpoints -----------------------------------------------------------------------


def _dtype_code(dtype) -> str:
    return np.dtype(dtype).newbyteorder("<").str


def _checkpoint_paths(path, num_models: int) -> list[Path]:
    base = Path(path)
    if num_models == 1:
        return [base]
    return [base.with_name(f"{base.stem}.model{i}{base.suffix}")
            for i in range(num_models)]


def save_checkpoint(bundle: ModelBundle, path) -> list[Path]:
    """Write the bundle's parameters; one file for BL/EE, one per ME/PE model.

    Each file is a versioned binary container: a JSON header (architecture
    echo, parameter manifest) followed by the raw little-endian buffers in
    declaration order.
    """
    num = len(bundle.models)
    paths = _checkpoint_paths(path, num)
    for i, (model, fpath) in enumerate(zip(bundle.models, paths)):
        params = list(model.named_parameters())
        buffers = list(model.named_buffers())
        code = _dtype_code(model.dtype)
        header = {
            "format": "easyens-checkpoint",
            "version": _CKPT_VERSION,
            "mode": bundle.mode,
            "ablation": bundle.ablation,
            "merge_weight": bundle.merge_weight,
            "model_index": i,
            "num_models": num,
            "dtype": code,
            "spec": bundle.spec.to_dict(),
            "params": [[name, list(t.shape)] for name, t in params],
            "buffers": [[name, list(b.shape)] for name, b in buffers],
        }
        blob = json.dumps(header).encode("utf-8")
        fpath = Path(fpath)
        with open(fpath, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
            fh.write(blob)
            for _, t in params:
                fh.write(np.ascontiguousarray(t.data).astype(code).tobytes())
            for _, b in buffers:
                fh.write(np.ascontiguousarray(b).astype(code).tobytes())
    return paths


def _read_checkpoint_file(fpath: Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(fpath).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{fpath} is not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    dtype = np.dtype(header["dtype"])
    offset = 12 + hlen
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["params"] + header["buffers"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise ValueError(f"{fpath} is truncated at buffer {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=count,
                                     offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{fpath} has {len(raw) - offset} trailing bytes")
    return header, arrays


def load_checkpoint(path, spec: ArchitectureSpec | None = None) -> ModelBundle:
    """Rebuild a bundle from checkpoint file(s) written by save_checkpoint.

    ``path`` is the base path given at save time (or any member file of a
    multi-model family). When ``spec`` is given it must match the stored
    architecture exactly.
    """
    fpath = Path(path)
    if not fpath.exists():
        probe = fpath.with_name(f"{fpath.stem}.model0{fpath.suffix}")
        if probe.exists():
            fpath = probe
        else:
            raise FileNotFoundError(f"no checkpoint at {path}")
    header, _ = _read_checkpoint_file(fpath)
    num = header["num_models"]
    if num > 1:
        idx = header["model_index"]
        marker = f".model{idx}"
        if marker not in fpath.stem:
            raise ValueError(f"cannot locate sibling checkpoints of {fpath}")
        stem_base = fpath.stem[:fpath.stem.rindex(marker)]
        files = [fpath.with_name(f"{stem_base}.model{i}{fpath.suffix}")
                 for i in range(num)]
    else:
        files = [fpath]

    stored_spec = ArchitectureSpec.from_dict(header["spec"])
    if spec is not None and spec.to_dict() != stored_spec.to_dict():
        raise _structural_error(
            "checkpoint architecture does not match the requested one")
    dtype = np.dtype(header["dtype"]).newbyteorder("=")
    if header["ablation"] is not None:
        bundle = build_ablation_variant(header["ablation"], stored_spec, 0, dtype=dtype)
    else:
        bundle = build(stored_spec, 0, dtype=dtype)
    if len(bundle.models) != num:
        raise _structural_error(
            f"checkpoint stores {num} models, architecture builds {len(bundle.models)}")
    bundle.merge_weight = header["merge_weight"]

    for i, (model, file_i) in enumerate(zip(bundle.models, files)):
        hdr, arrays = _read_checkpoint_file(file_i)
        if hdr["model_index"] != i or hdr["num_models"] != num \
                or hdr["spec"] != header["spec"]:
            raise _structural_error(f"{file_i} does not belong to this checkpoint family")
        for name, t in model.named_parameters():
            if name not in arrays or arrays[name].shape != t.data.shape:
                raise _structural_error(f"parameter {name!r} missing or misshapen "
                                        f"in {file_i}")
            t.data = arrays[name].astype(model.dtype)
        for name, _ in model.named_buffers():
            if name not in arrays:
                raise _structural_error(f"buffer {name!r} missing in {file_i}")
            model.set_buffer(name, arrays[name])
    return bundle
