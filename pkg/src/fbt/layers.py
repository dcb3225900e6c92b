"""Parameterized layers built on the autodiff tensor.

Modules register parameters and children through attribute assignment and
expose them with stable hierarchical names, which the checkpoint format and
the freezing contract rely on. Every forward takes an explicit ``train`` flag;
only batch normalization behaves differently between modes.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter


class Module:
    """Base class tracking parameters, buffers, and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, array: np.ndarray):
        self._buffers[key] = array
        object.__setattr__(self, key, array)

    def named_parameters(self, prefix: str = ""):
        for key, p in self._params.items():
            yield (f"{prefix}{key}", p)
        for key, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for key, b in self._buffers.items():
            yield (f"{prefix}{key}", b)
        for key, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{key}.")

    def assign_parameter_names(self, prefix: str = ""):
        """Stamp hierarchical names onto parameters; names must be unique."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]

    def forward(self, x, train: bool = False):
        for m in self._items:
            x = m(x, train)
        return x


class Linear(Module):
    """Affine map with weight stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x, train: bool = False):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        std = np.sqrt(2.0 / fan_in)  # He init for ReLU stacks
        self.weight = Parameter(rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x, train: bool = False):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train: bool = False):
        # A frozen layer keeps eval statistics even inside a training step.
        use_batch_stats = train and not self.gamma.frozen
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            momentum=self.momentum, eps=self.eps, train=use_batch_stats)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x, train: bool = False):
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Mlp(Module):
    """Two-layer GELU MLP used inside attention and mixer blocks."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: int | None = None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def forward(self, x, train: bool = False):
        return self.fc2(T.gelu(self.fc1(x)))


class SelfAttention(Module):
    """Multi-head global self-attention with a combined qkv projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x, train: bool = False):
        d = self.dim
        qkv = self.qkv(x)
        q = T.narrow(qkv, -1, 0, d)
        k = T.narrow(qkv, -1, d, d)
        v = T.narrow(qkv, -1, 2 * d, d)
        return self.proj(T.multi_head_attention(q, k, v, self.heads))


class TransformerBlock(Module):
    """Pre-norm attention block: x + attn(norm(x)), x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def forward(self, x, train: bool = False):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class MixerBlock(Module):
    """Token-mixing MLP across patches followed by channel-mixing MLP."""

    def __init__(self, tokens: int, dim: int, token_hidden: int, channel_hidden: int,
                 rng: np.random.Generator):
        super().__init__()
        self.tokens = tokens
        self.norm1 = LayerNorm(dim)
        self.token_mlp = Mlp(tokens, token_hidden, rng)
        self.norm2 = LayerNorm(dim)
        self.channel_mlp = Mlp(dim, channel_hidden, rng)

    def forward(self, x, train: bool = False):
        if x.shape[1] != self.tokens:
            raise T.ShapeError(f"mixer block: expected {self.tokens} tokens, got input {x.shape}")
        y = T.transpose(self.norm1(x), (0, 2, 1))  # (B, D, T)
        y = T.transpose(self.token_mlp(y), (0, 2, 1))
        x = x + y
        return x + self.channel_mlp(self.norm2(x))


class ResidualBlock(Module):
    """Two 3x3 conv-BN pairs with an identity or projected skip connection."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride, padding=0)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x, train: bool = False):
        y = T.relu(self.bn1(self.conv1(x, train), train))
        y = self.bn2(self.conv2(y, train), train)
        skip = x if self.proj is None else self.proj_bn(self.proj(x, train), train)
        return T.relu(y + skip)


class ConvStem(Module):
    """3x3 stem convolution mapping the image into the first stage width."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng, stride=1, padding=1)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x, train: bool = False):
        return T.relu(self.bn(self.conv(x, train), train))


class PatchEmbed(Module):
    """Non-overlapping patch embedding with optional learnable position table."""

    def __init__(self, in_ch: int, patch: int, dim: int, tokens: int,
                 rng: np.random.Generator, pos_embed: bool = True):
        super().__init__()
        self.patch = patch
        self.proj = Conv2d(in_ch, dim, patch, rng, stride=patch, padding=0, bias=True)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(tokens, dim))) if pos_embed else None

    def forward(self, x, train: bool = False):
        y = self.proj(x, train)  # (B, D, gh, gw)
        b, d, gh, gw = y.shape
        y = T.reshape(y, (b, d, gh * gw))
        y = T.transpose(y, (0, 2, 1))  # (B, T, D)
        if self.pos is not None:
            y = y + self.pos
        return y
