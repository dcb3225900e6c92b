"""Fused-model construction: early stages of one model, late stages of another.

The fused classifier borrows the pixel-grid stages of the CNN-family model (or
the student, when no CNN is involved), converts the feature map into a token
grid with a trainable local-to-global (L2G) projector, and finishes with the
borrowed late token stages and classifier head. Borrowed stages alias their
owners' parameters; teacher-owned pieces are frozen, student-owned pieces and
the L2G train jointly with the student.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import Conv2d, Linear, Module, Parameter, TransformerBlock
from .models import (
    CNN,
    FeatureSpec,
    GridSpec,
    Head,
    Knowledge,
    ModelSpec,
    TokenSpec,
)
from .tensor import ShapeError

HEAD_ONLY = 5  # msa_start value meaning "borrow only the classifier head"


class GeometryError(ShapeError):
    """The two models cannot be bridged at the requested cut point."""


@dataclass
class AblationFlags:
    no_attn_block: bool = False  # L2G keeps only its patch embedding
    no_msa_stage: bool = False   # drop borrowed late stages; fresh learnable head

    def any(self) -> bool:
        return self.no_attn_block or self.no_msa_stage


class L2GProjector(Module):
    """Patch embedding plus one self-attention block bridging grid to tokens."""

    def __init__(self, grid: GridSpec, target: TokenSpec, rng: np.random.Generator,
                 heads: int = 4, mlp_ratio: float = 2.0, with_attn: bool = True):
        super().__init__()
        if grid.height != grid.width:
            raise GeometryError(f"l2g: non-square feature map {grid}")
        side = int(math.isqrt(target.tokens))
        if side * side == target.tokens and side <= grid.height and grid.height % side == 0:
            patch = grid.height // side
            tokens = target.tokens
        elif target.flexible_tokens:
            # Feature map too small (or oddly shaped) for the native token
            # count; fall back to one token per pixel, which attention-family
            # stages accept.
            patch = 1
            tokens = grid.height * grid.width
        else:
            raise GeometryError(
                f"l2g: cannot produce {target.tokens} tokens from feature map {grid} "
                f"for a fixed-token downstream stage {target}")
        self.patch = patch
        self.tokens = tokens
        self.dim = target.dim
        self.patch_embed = Conv2d(grid.channels, target.dim, patch, rng,
                                  stride=patch, padding=0, bias=True)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(tokens, target.dim)))
        if heads and target.dim % heads:
            heads = 1
        self.attn_block = TransformerBlock(target.dim, heads, mlp_ratio, rng) if with_attn else None

    def forward(self, x, train: bool = False):
        b, c, h, w = x.shape
        y = self.patch_embed(x, train)
        y = T.transpose(T.reshape(y, (b, self.dim, self.tokens)), (0, 2, 1))
        y = y + self.pos
        if self.attn_block is not None:
            y = self.attn_block(y, train)
        return y


class GridAdapter(Module):
    """Homogeneous CNN-to-CNN seam: 1x1 projection plus nearest resize."""

    def __init__(self, src: GridSpec, dst: GridSpec, rng: np.random.Generator):
        super().__init__()
        if src.height % dst.height or src.width % dst.width:
            if dst.height % src.height or dst.width % src.width:
                raise GeometryError(f"grid adapter: incompatible spatial sizes {src} -> {dst}")
        self.proj = Conv2d(src.channels, dst.channels, 1, rng, stride=1, padding=0, bias=True)
        self.src = src
        self.dst = dst

    def forward(self, x, train: bool = False):
        y = self.proj(x, train)
        h, w = self.src.height, self.src.width
        if (h, w) != (self.dst.height, self.dst.width):
            if h >= self.dst.height:
                y = T.avg_pool2d(y, h // self.dst.height)
            else:
                factor = self.dst.height // h
                y = _nearest_upsample(y, factor)
        return y


def _nearest_upsample(x, factor: int):
    b, c, h, w = x.shape
    y = T.reshape(x, (b, c, h, 1, w, 1))
    ones = T.Tensor(np.ones((1, 1, 1, factor, 1, factor), dtype=x.data.dtype))
    y = T.mul(y, ones)
    return T.reshape(y, (b, c, h * factor, w * factor))


class TokenAdapter(Module):
    """Homogeneous token-to-token seam: learnable linear width map."""

    def __init__(self, src: TokenSpec, dst: TokenSpec, rng: np.random.Generator):
        super().__init__()
        if not dst.flexible_tokens and src.tokens != dst.tokens:
            raise GeometryError(f"token adapter: token counts differ ({src} -> {dst})")
        self.proj = Linear(src.dim, dst.dim, rng)

    def forward(self, x, train: bool = False):
        return self.proj(x)


@dataclass
class FusionSpec:
    """Cut points, borrowed pieces, and the ownership/freezing map.

    ``cnn_source`` provides stages 1..cnn_cut (its stem included) and
    ``msa_source`` provides stages msa_start..4 plus the head. For pairs
    without a CNN, cnn_source is the student-owned early half and msa_source
    the teacher-owned late half.
    """

    cnn_source: ModelSpec
    msa_source: ModelSpec
    cnn_cut: int
    msa_start: int
    l2g: Module
    early_owner: str  # "student" | "teacher"
    late_owner: str
    ownership: dict = field(default_factory=dict)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    replacement_head: Optional[Head] = None
    path_grad_scale: float = 1.0

    def to_config_dict(self) -> dict:
        return {
            "cnn_source": self.early_owner,
            "msa_source": self.late_owner,
            "k": self.cnn_cut,
            "j": "fc" if self.msa_start == HEAD_ONLY else self.msa_start,
            "no_attn_block": self.ablation.no_attn_block,
            "no_msa_stage": self.ablation.no_msa_stage,
        }

    def trainable_modules(self) -> list:
        mods = [self.l2g]
        if self.replacement_head is not None:
            mods.append(self.replacement_head)
        if self.early_owner == "student":
            mods.append(_EarlyView(self.cnn_source, self.cnn_cut))
        if self.late_owner == "student" and not self.ablation.no_msa_stage:
            mods.append(_LateView(self.msa_source, self.msa_start))
        return mods

    def trainable_parameters(self) -> list:
        seen: set[int] = set()
        out = []
        for mod in self.trainable_modules():
            for p in mod.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out


class _EarlyView(Module):
    def __init__(self, model: ModelSpec, cut: int):
        super().__init__()
        if model.patch_embed is not None:
            self.patch_embed = model.patch_embed
        for i in range(cut):
            setattr(self, f"stage{i + 1}", model.stages[i])


class _LateView(Module):
    def __init__(self, model: ModelSpec, start: int):
        super().__init__()
        if start <= 4:
            for i in range(start - 1, 4):
                setattr(self, f"stage{i + 1}", model.stages[i])
        self.head = model.head


def _stage_boundary_specs(spec: FusionSpec) -> tuple:
    early_out = spec.cnn_source.stages[spec.cnn_cut - 1].output_spec
    if spec.msa_start == HEAD_ONLY:
        late_in = spec.msa_source.stages[3].output_spec
    else:
        late_in = spec.msa_source.stages[spec.msa_start - 1].input_spec
    return early_out, late_in


def _build_seam(early_out: FeatureSpec, late_in: FeatureSpec, rng, heads, mlp_ratio,
                with_attn: bool) -> Module:
    if isinstance(early_out, GridSpec) and isinstance(late_in, TokenSpec):
        return L2GProjector(early_out, late_in, rng, heads=heads, mlp_ratio=mlp_ratio,
                            with_attn=with_attn)
    if isinstance(early_out, GridSpec) and isinstance(late_in, GridSpec):
        return GridAdapter(early_out, late_in, rng)
    if isinstance(early_out, TokenSpec) and isinstance(late_in, TokenSpec):
        return TokenAdapter(early_out, late_in, rng)
    raise GeometryError(f"unsupported seam {early_out} -> {late_in}")


def plan_fusion(teacher: ModelSpec, student: ModelSpec, k: int = 3, j: int = 4,
                ablation: Optional[AblationFlags] = None, seed: int = 0,
                l2g_heads: int = 4, l2g_mlp_ratio: float = 2.0,
                path_grad_scale: float = 1.0) -> FusionSpec:
    """Build the fusion plan for a teacher-student pair.

    Orientation: if exactly one model is CNN-family it supplies the early
    stages regardless of role; otherwise the student supplies the early stages
    and the teacher the late ones. The teacher is frozen end to end as a side
    effect; student-owned stages and the seam module stay trainable.

    ``k`` is the last borrowed early stage, ``j`` the first borrowed late
    stage; ``j == 5`` borrows only the head.
    """
    if not 1 <= k <= 4:
        raise ValueError(f"invalid cnn cut k={k}")
    if not 2 <= j <= HEAD_ONLY:
        raise ValueError(f"invalid msa start j={j}")
    ablation = ablation or AblationFlags()

    if (teacher.family == CNN) != (student.family == CNN):
        if teacher.family == CNN:
            early, early_owner = teacher, "teacher"
            late, late_owner = student, "student"
        else:
            early, early_owner = student, "student"
            late, late_owner = teacher, "teacher"
    else:
        early, early_owner = student, "student"
        late, late_owner = teacher, "teacher"

    teacher.freeze()

    spec = FusionSpec(
        cnn_source=early, msa_source=late, cnn_cut=k, msa_start=j,
        l2g=None, early_owner=early_owner, late_owner=late_owner,
        ablation=ablation, path_grad_scale=path_grad_scale,
    )
    early_out, late_in = _stage_boundary_specs(spec)
    rng = np.random.default_rng(seed)
    spec.l2g = _build_seam(early_out, late_in, rng, l2g_heads, l2g_mlp_ratio,
                           with_attn=not ablation.no_attn_block)

    if ablation.no_msa_stage:
        width = late_in.dim if isinstance(late_in, TokenSpec) else late_in.channels
        spec.replacement_head = Head(width, late.num_classes, rng)

    ownership = {}
    for i in range(1, k + 1):
        ownership[f"stage{i}"] = {"owner": early_owner, "frozen": early_owner == "teacher"}
    if early.patch_embed is not None:
        ownership["stem"] = {"owner": early_owner, "frozen": early_owner == "teacher"}
    if not ablation.no_msa_stage:
        for i in range(j, 5):
            if i <= 4:
                ownership[f"stage{i}"] = {"owner": late_owner, "frozen": late_owner == "teacher"}
        ownership["head"] = {"owner": late_owner, "frozen": late_owner == "teacher"}
    else:
        ownership["head"] = {"owner": "fusion", "frozen": False}
    ownership["l2g"] = {"owner": "fusion", "frozen": False}
    spec.ownership = ownership

    spec.l2g.assign_parameter_names("l2g.")
    if spec.replacement_head is not None:
        spec.replacement_head.assign_parameter_names("fused_head.")
    return spec


def fused_forward(spec: FusionSpec, x, train: bool = False) -> Knowledge:
    """Run the fused model: early stages, seam, late stages, head.

    Frozen batch-norm layers keep their running statistics regardless of
    ``train``. Gradients reach student-owned stages and the seam only.
    """
    early = spec.cnn_source
    t = early.stage_input(x, train)
    for stage in list(early.stages)[: spec.cnn_cut]:
        t = stage(t, train)
    if spec.path_grad_scale != 1.0:
        t = T.scale_grad(t, spec.path_grad_scale)
    try:
        t = spec.l2g(t, train)
    except ShapeError as err:
        raise GeometryError(
            f"fused seam failed between {early.family} stage {spec.cnn_cut} and "
            f"{spec.msa_source.family} stage {spec.msa_start}: {err}") from err

    if spec.ablation.no_msa_stage:
        head = spec.replacement_head
    else:
        head = spec.msa_source.head
        if spec.msa_start <= 4:
            for stage in list(spec.msa_source.stages)[spec.msa_start - 1 : 4]:
                t = stage(t, train)
    f = head.pool(t)
    p = head.fc(f)
    return Knowledge(f=f, p=p)


GRID_CELLS = ((1, 2), (2, 3), (4, HEAD_ONLY), (3, 2), (3, 3), (1, 4), (2, 4), (4, 4), (3, 4))


def enumerate_fusion_grid(teacher: ModelSpec, student: ModelSpec, seed: int = 0,
                          **plan_kwargs) -> list[FusionSpec]:
    """The nine cut-point combinations of the fusion sweep (default last)."""
    if teacher.family == student.family:
        raise ValueError("fusion grid needs a heterogeneous teacher-student pair")
    return [plan_fusion(teacher, student, k=k, j=j, seed=seed + 17 * idx, **plan_kwargs)
            for idx, (k, j) in enumerate(GRID_CELLS)]
