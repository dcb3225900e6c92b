"""Three stage-decomposable classifier families: CNN, attention (MSA), mixer (MLP).

Every model is split into four sequential stages plus a pooling head so that a
fused model can borrow an arbitrary stage range. CNN stages carry pixel grids
(B,C,H,W) and own the stem convolution in stage 1; MSA/MLP models carry a
constant token grid (B,T,D) produced by a separate patch-embedding stem.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .layers import (
    ConvStem,
    LayerNorm,
    Linear,
    MixerBlock,
    Module,
    ModuleList,
    PatchEmbed,
    ResidualBlock,
    TransformerBlock,
)
from .tensor import ShapeError, Tensor

CNN = "cnn"
MSA = "msa"
MLP = "mixer"

FAMILIES = (CNN, MSA, MLP)


@dataclass(frozen=True)
class GridSpec:
    """Pixel-grid feature geometry (channels, height, width)."""

    channels: int
    height: int
    width: int

    def matches(self, shape) -> bool:
        return tuple(shape[1:]) == (self.channels, self.height, self.width)


@dataclass(frozen=True)
class TokenSpec:
    """Token-grid feature geometry (tokens, dim). Attention stages accept any
    token count; mixer stages require the exact one."""

    tokens: int
    dim: int
    flexible_tokens: bool = False

    def matches(self, shape) -> bool:
        if len(shape) != 3 or shape[2] != self.dim:
            return False
        return self.flexible_tokens or shape[1] == self.tokens


FeatureSpec = Union[GridSpec, TokenSpec]


@dataclass
class Knowledge:
    """What a model exposes for transfer: pooled final features and logits."""

    f: Tensor  # (batch, embed)
    p: Tensor  # (batch, num_classes)


class Stage(Module):
    def __init__(self, family: str, index: int, blocks: ModuleList,
                 input_spec: FeatureSpec, output_spec: FeatureSpec):
        super().__init__()
        self.family = family
        self.index = index
        self.blocks = blocks
        self.input_spec = input_spec
        self.output_spec = output_spec

    def forward(self, x, train: bool = False):
        if not self.input_spec.matches(x.shape):
            raise ShapeError(
                f"stage {self.index} ({self.family}): input {x.shape} does not match {self.input_spec}")
        return self.blocks(x, train)


class Head(Module):
    """Global average pooling over space or tokens, then a linear classifier."""

    def __init__(self, in_features: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(in_features, num_classes, rng)

    def pool(self, features) -> Tensor:
        return T.global_avg_pool(features)

    def forward(self, features, train: bool = False):
        return self.fc(self.pool(features))


class ModelSpec(Module):
    def __init__(self, family: str, stages: list, head: Head, num_classes: int,
                 feature_width: int, patch_embed: Optional[PatchEmbed] = None):
        super().__init__()
        if len(stages) != 4:
            raise ValueError(f"a model needs exactly 4 stages, got {len(stages)}")
        self.family = family
        self.patch_embed = patch_embed
        self.stages = ModuleList(stages)
        self.head = head
        self.num_classes = num_classes
        self.feature_width = feature_width
        self.assign_parameter_names()

    def stage_input(self, x, train: bool = False) -> Tensor:
        """Map an image batch to the stage-1 input (token stem for MSA/MLP)."""
        return self.patch_embed(x, train) if self.patch_embed is not None else x

    def forward(self, x, train: bool = False):
        t = self.stage_input(x, train)
        for stage in self.stages:
            t = stage(t, train)
        return self.head(t, train)


@dataclass
class CNNConfig:
    widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10


@dataclass
class MSAConfig:
    patch: int = 4
    dim: int = 64
    blocks_per_stage: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10


@dataclass
class MixerConfig:
    patch: int = 4
    dim: int = 64
    blocks_per_stage: int = 2
    token_mlp_ratio: float = 1.0
    channel_mlp_ratio: float = 2.0
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10


ModelConfig = Union[CNNConfig, MSAConfig, MixerConfig]


def build_tiny_cnn(cfg: CNNConfig, seed: int = 0) -> ModelSpec:
    """Residual CNN: stage 1 keeps the input resolution, stages 2-4 halve it."""
    if len(cfg.widths) != 4 or len(cfg.blocks_per_stage) != 4:
        raise ValueError("cnn config needs 4 stage widths and 4 block counts")
    if cfg.image_size % 8:
        raise ShapeError(f"cnn: image size {cfg.image_size} not divisible by total downsampling 8")
    rng = np.random.default_rng(seed)
    stages = []
    size = cfg.image_size
    in_ch = cfg.in_channels
    for i, (width, depth) in enumerate(zip(cfg.widths, cfg.blocks_per_stage), start=1):
        blocks = ModuleList()
        stride = 1 if i == 1 else 2
        out_size = size // stride
        if i == 1:
            blocks.append(ConvStem(in_ch, width, rng))
            first_in = width
        else:
            first_in = in_ch
        for b in range(depth):
            blocks.append(ResidualBlock(first_in if b == 0 else width, width, rng,
                                        stride=stride if b == 0 else 1))
        stages.append(Stage(CNN, i, blocks,
                            GridSpec(in_ch, size, size),
                            GridSpec(width, out_size, out_size)))
        in_ch, size = width, out_size
    head = Head(cfg.widths[-1], cfg.num_classes, rng)
    return ModelSpec(CNN, stages, head, cfg.num_classes, cfg.widths[-1])


def _token_stages(family: str, make_block, blocks_per_stage: int, tokens: int, dim: int):
    flexible = family == MSA
    spec = TokenSpec(tokens, dim, flexible_tokens=flexible)
    stages = []
    for i in range(1, 5):
        blocks = ModuleList(make_block() for _ in range(blocks_per_stage))
        if i == 4:
            blocks.append(_FinalNorm(dim))
        stages.append(Stage(family, i, blocks, spec, spec))
    return stages


class _FinalNorm(LayerNorm):
    """Closing layer norm folded into stage 4 so pooled features see it."""


def build_tiny_msa(cfg: MSAConfig, seed: int = 0) -> ModelSpec:
    if cfg.image_size % cfg.patch:
        raise ShapeError(f"msa: patch {cfg.patch} does not divide image size {cfg.image_size}")
    if cfg.dim % cfg.heads:
        raise ShapeError(f"msa: dim {cfg.dim} not divisible by {cfg.heads} heads")
    rng = np.random.default_rng(seed)
    tokens = (cfg.image_size // cfg.patch) ** 2
    stem = PatchEmbed(cfg.in_channels, cfg.patch, cfg.dim, tokens, rng, pos_embed=True)
    stages = _token_stages(MSA, lambda: TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng),
                           cfg.blocks_per_stage, tokens, cfg.dim)
    head = Head(cfg.dim, cfg.num_classes, rng)
    return ModelSpec(MSA, stages, head, cfg.num_classes, cfg.dim, patch_embed=stem)


def build_tiny_mixer(cfg: MixerConfig, seed: int = 0) -> ModelSpec:
    if cfg.image_size % cfg.patch:
        raise ShapeError(f"mixer: patch {cfg.patch} does not divide image size {cfg.image_size}")
    rng = np.random.default_rng(seed)
    tokens = (cfg.image_size // cfg.patch) ** 2
    stem = PatchEmbed(cfg.in_channels, cfg.patch, cfg.dim, tokens, rng, pos_embed=False)
    token_hidden = max(1, int(tokens * cfg.token_mlp_ratio))
    channel_hidden = max(1, int(cfg.dim * cfg.channel_mlp_ratio))
    stages = _token_stages(MLP, lambda: MixerBlock(tokens, cfg.dim, token_hidden, channel_hidden, rng),
                           cfg.blocks_per_stage, tokens, cfg.dim)
    head = Head(cfg.dim, cfg.num_classes, rng)
    return ModelSpec(MLP, stages, head, cfg.num_classes, cfg.dim, patch_embed=stem)


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelSpec:
    if isinstance(cfg, CNNConfig):
        return build_tiny_cnn(cfg, seed)
    if isinstance(cfg, MSAConfig):
        return build_tiny_msa(cfg, seed)
    if isinstance(cfg, MixerConfig):
        return build_tiny_mixer(cfg, seed)
    raise TypeError(f"unknown model config {type(cfg).__name__}")


def forward_through(model: ModelSpec, x, from_stage: int, to_stage: int,
                    train: bool = False) -> Tensor:
    """Apply stages ``from_stage..to_stage`` (1-based, inclusive) to ``x``.

    ``x`` is a stage input, not an image: for CNN models stage 1 contains the
    stem and accepts the image directly, for MSA/MLP models use
    ``model.stage_input`` first.
    """
    if not (1 <= from_stage <= to_stage <= 4):
        raise ValueError(f"invalid stage range {from_stage}..{to_stage}")
    t = x
    for stage in list(model.stages)[from_stage - 1 : to_stage]:
        t = stage(t, train)
    return t


def extract_knowledge(model: ModelSpec, x, train: bool = False) -> Knowledge:
    """Run the full model, returning pooled final features and logits."""
    t = model.stage_input(x, train)
    t = forward_through(model, t, 1, 4, train)
    f = model.head.pool(t)
    p = model.head.fc(f)
    return Knowledge(f=f, p=p)
