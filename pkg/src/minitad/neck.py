"""Stage 1 temporal modeling: macro blocks around swappable sequential modules,
stacked into a multi-scale feature pyramid.

The two axes vary independently. A *sequential module* mixes information along
time: depthwise convolution, graph convolution over feature-space plus
temporal neighbours, multi-head self-attention, a bidirectional LSTM, or a
diagonal gated state-space scan. A *macro block* decides how that module is
wrapped: ``conv`` and ``gcn`` use a bare pre-norm residual, ``transformer``
adds a second residual MLP sub-block, ``mamba`` gates the module's output with
a parallel SiLU branch, and ``mix`` alternates two macros down the stack. Any
module can sit inside any block, so the full grid of combinations builds by
construction.

Every residual branch ends in a zero-initialized projection, making the whole
neck an identity (up to downsampling) at initialization. All modules obey the
mask contract: rows whose mask is False are zeroed on entry and exit and can
never influence a valid row's output. Convolutions are the one documented
exception in spirit: a valid row near the valid/invalid boundary reads the
masked rows as zeros, exactly as it would read real zero padding at the end
of an unpadded sequence, so padded and unpadded forwards still agree bit for
bit.

Level ``l`` of the pyramid has stride ``2**l`` and length ``ceil(T / 2**l)``;
valid lengths downsample the same way.
"""

from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn.functional as F
from torch import nn

MACRO_BLOCKS = ("conv", "gcn", "transformer", "mamba", "mix")
SEQUENTIAL_MODULES = ("conv", "graphconv", "selfattn", "lstm", "ssm")
DOWNSAMPLE_KINDS = ("maxpool", "conv")

# each macro block's native sequential module, used when none is configured
DEFAULT_MODULE = {
    "conv": "conv",
    "gcn": "graphconv",
    "transformer": "selfattn",
    "mamba": "ssm",
}

# inside a mix stack the transformer slot pairs with the LSTM by default, so
# the two alternating blocks mix a gated scan with a gated recurrence
MIX_DEFAULT_MODULE = {
    "conv": "conv",
    "gcn": "graphconv",
    "transformer": "lstm",
    "mamba": "ssm",
}


@dataclasses.dataclass(slots=True)
class NeckConfig:
    macro_block: str = "transformer"
    sequential_module: str | tuple[str, str] | None = None
    width: int = 128
    depth: int = 2
    levels: int = 4
    downsample: str = "maxpool"
    attn_heads: int = 4
    graph_k: int = 8
    mix_order: tuple[str, str] = ("mamba", "transformer")

    def __post_init__(self) -> None:
        if self.macro_block not in MACRO_BLOCKS:
            raise ValueError(f"macro_block must be one of {MACRO_BLOCKS}")
        if isinstance(self.sequential_module, list):
            self.sequential_module = tuple(self.sequential_module)
        if isinstance(self.mix_order, list):
            self.mix_order = tuple(self.mix_order)
        mods = self.sequential_module
        if mods is not None:
            flat = mods if isinstance(mods, tuple) else (mods,)
            for m in flat:
                if m not in SEQUENTIAL_MODULES:
                    raise ValueError(f"unknown sequential module {m!r}; "
                                     f"choose from {SEQUENTIAL_MODULES}")
        if self.macro_block != "mix" and isinstance(mods, tuple):
            raise ValueError("a module pair only makes sense with macro_block='mix'")
        for m in self.mix_order:
            if m not in ("conv", "gcn", "transformer", "mamba"):
                raise ValueError(f"mix_order entries must be concrete blocks, got {m!r}")
        if self.downsample not in DOWNSAMPLE_KINDS:
            raise ValueError(f"downsample must be one of {DOWNSAMPLE_KINDS}")
        if self.width % 2:
            raise ValueError("width must be even (the LSTM module splits it)")
        if self.width % self.attn_heads:
            raise ValueError("attn_heads must divide width")
        if self.depth < 1 or self.levels < 1:
            raise ValueError("depth and levels must be positive")


def masked_fill_zero(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero rows whose mask is False; mask is (B, T), x is (B, T, D)."""
    return torch.where(mask.unsqueeze(-1), x, torch.zeros((), dtype=x.dtype,
                                                          device=x.device))


def _zero_init(layer: nn.Linear) -> nn.Linear:
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


# ---------------------------------------------------------------------------
# sequential modules
# ---------------------------------------------------------------------------

class ConvModule(nn.Module):
    """Depthwise k=3 temporal convolution followed by a pointwise projection."""

    def __init__(self, width: int, config: NeckConfig, zero_init: bool = True):
        super().__init__()
        self.depthwise = nn.Conv1d(width, width, kernel_size=3, padding=1,
                                   groups=width)
        self.pointwise = nn.Conv1d(width, width, kernel_size=1)
        if zero_init:
            nn.init.zeros_(self.pointwise.weight)
            nn.init.zeros_(self.pointwise.bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = masked_fill_zero(x, mask).transpose(1, 2)
        h = self.pointwise(F.gelu(self.depthwise(h))).transpose(1, 2)
        return masked_fill_zero(h, mask)


class GraphConvModule(nn.Module):
    """One aggregation step over k nearest feature-space neighbours plus the
    two temporal neighbours, mean-combined and projected.

    Neighbour selection is recomputed from the current input every call.
    Masked rows are excluded both as queries and as neighbours; a boundary
    row whose temporal neighbour is invalid simply loses that edge.
    """

    def __init__(self, width: int, graph_k: int, zero_init: bool = True):
        super().__init__()
        self.k = graph_k
        self.combine = nn.Linear(2 * width, width)
        self.out_proj = nn.Linear(width, width)
        if zero_init:
            _zero_init(self.out_proj)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        z = masked_fill_zero(x, mask)
        b, t, d = z.shape
        agg_sum = torch.zeros_like(z)
        agg_cnt = torch.zeros(b, t, 1, dtype=z.dtype, device=z.device)

        k_eff = min(self.k, t - 1)
        if k_eff > 0:
            dist = torch.cdist(z, z)
            inf = torch.tensor(float("inf"), dtype=dist.dtype, device=dist.device)
            dist = dist.masked_fill(~mask.unsqueeze(1), inf)
            eye = torch.eye(t, dtype=torch.bool, device=z.device)
            dist = dist.masked_fill(eye.unsqueeze(0), inf)
            vals, idx = torch.topk(dist, k_eff, dim=2, largest=False)
            w = torch.isfinite(vals).to(z.dtype)  # inf = no such neighbour
            neigh = torch.gather(
                z.unsqueeze(1).expand(b, t, t, d), 2,
                idx.unsqueeze(-1).expand(b, t, k_eff, d))
            agg_sum = agg_sum + (neigh * w.unsqueeze(-1)).sum(dim=2)
            agg_cnt = agg_cnt + w.sum(dim=2, keepdim=True)

        pos = torch.arange(t, device=z.device)
        for step in (-1, 1):
            nb = (pos + step).clamp(0, t - 1)
            ok = ((pos + step >= 0) & (pos + step < t)).unsqueeze(0) \
                & mask.gather(1, nb.unsqueeze(0).expand(b, t))
            ok = ok.to(z.dtype).unsqueeze(-1)
            agg_sum = agg_sum + z[:, nb] * ok
            agg_cnt = agg_cnt + ok

        agg = agg_sum / agg_cnt.clamp(min=1.0)
        h = F.gelu(self.combine(torch.cat([z, agg], dim=-1)))
        return masked_fill_zero(self.out_proj(h), mask)


class SelfAttentionModule(nn.Module):
    """Multi-head self-attention with padded keys excluded."""

    def __init__(self, width: int, config: NeckConfig, zero_init: bool = True):
        super().__init__()
        self.attn = nn.MultiheadAttention(width, config.attn_heads,
                                          batch_first=True)
        if zero_init:
            nn.init.zeros_(self.attn.out_proj.weight)
            nn.init.zeros_(self.attn.out_proj.bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        z = masked_fill_zero(x, mask)
        out, _ = self.attn(z, z, z, key_padding_mask=~mask, need_weights=False)
        return masked_fill_zero(out, mask)


class LSTMModule(nn.Module):
    """Bidirectional LSTM over the valid prefix only.

    Packing restricts the recurrence to each sample's valid rows, so the
    backward direction starts at the last real row and padding never seeds
    hidden state.
    """

    def __init__(self, width: int, config: NeckConfig, zero_init: bool = True):
        super().__init__()
        self.lstm = nn.LSTM(width, width // 2, batch_first=True,
                            bidirectional=True)
        self.out_proj = nn.Linear(width, width)
        if zero_init:
            _zero_init(self.out_proj)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        z = masked_fill_zero(x, mask)
        lengths = mask.sum(dim=1).clamp(min=1).cpu()
        packed = nn.utils.rnn.pack_padded_sequence(z, lengths, batch_first=True,
                                                   enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True,
                                                  total_length=z.shape[1])
        return masked_fill_zero(self.out_proj(out), mask)


class SSMModule(nn.Module):
    """Diagonal selective scan: h_t = a_t * h_{t-1} + (1 - a_t) * u_t.

    The per-channel transition a_t = sigmoid(W_a x_t + b_a) is input-dependent
    (the selection mechanism), u_t is a projected input, and a causal pass
    plus a time-flipped pass are summed before the output projection. The
    decay bias starts positive so memory is long at initialization. With
    a == 0 the scan collapses to a per-position linear map.
    """

    def __init__(self, width: int, config: NeckConfig, zero_init: bool = True):
        super().__init__()
        self.in_proj = nn.Linear(width, width)
        self.decay = nn.Linear(width, width)
        nn.init.constant_(self.decay.bias, 2.0)
        self.out_proj = nn.Linear(width, width)
        if zero_init:
            _zero_init(self.out_proj)

    @staticmethod
    def _scan(u: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        h = torch.zeros_like(u[:, 0])
        out = []
        for t in range(u.shape[1]):
            h = a[:, t] * h + (1.0 - a[:, t]) * u[:, t]
            out.append(h)
        return torch.stack(out, dim=1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        z = masked_fill_zero(x, mask)
        a = torch.sigmoid(self.decay(z))
        u = masked_fill_zero(self.in_proj(z), mask)  # padding injects nothing
        fwd = self._scan(u, a)
        bwd = self._scan(u.flip(1), a.flip(1)).flip(1)
        return masked_fill_zero(self.out_proj(fwd + bwd), mask)


_SEQUENTIAL = {
    "conv": ConvModule,
    "graphconv": GraphConvModule,
    "selfattn": SelfAttentionModule,
    "lstm": LSTMModule,
    "ssm": SSMModule,
}


def build_sequential_module(kind: str, width: int, config: NeckConfig,
                            zero_init: bool = True) -> nn.Module:
    if kind == "graphconv":
        return GraphConvModule(width, config.graph_k, zero_init=zero_init)
    return _SEQUENTIAL[kind](width, config, zero_init=zero_init)


# ---------------------------------------------------------------------------
# macro blocks
# ---------------------------------------------------------------------------

class PlainBlock(nn.Module):
    """x + module(norm(x)): the bare residual wrapper of the conv/gcn stacks."""

    def __init__(self, width: int, module: nn.Module):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.module = module

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        z = masked_fill_zero(self.norm(x), mask)
        return masked_fill_zero(x + self.module(z, mask), mask)


class TransformerBlock(nn.Module):
    """Pre-norm residual module followed by a pre-norm residual MLP."""

    def __init__(self, width: int, module: nn.Module, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.module = module
        self.norm2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = _zero_init(nn.Linear(mlp_ratio * width, width))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        z = masked_fill_zero(self.norm1(x), mask)
        x = masked_fill_zero(x + self.module(z, mask), mask)
        z = masked_fill_zero(self.norm2(x), mask)
        x = x + self.fc2(F.gelu(self.fc1(z)))
        return masked_fill_zero(x, mask)


class GatedBlock(nn.Module):
    """Module branch multiplied by a SiLU gate branch, then projected:
    x + proj(module(A(norm(x))) * silu(B(norm(x))))."""

    def __init__(self, width: int, module: nn.Module):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.in_a = nn.Linear(width, width)
        self.in_b = nn.Linear(width, width)
        self.module = module
        self.out_proj = _zero_init(nn.Linear(width, width))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        z = masked_fill_zero(self.norm(x), mask)
        branch = self.module(masked_fill_zero(self.in_a(z), mask), mask)
        gated = branch * F.silu(self.in_b(z))
        return masked_fill_zero(x + self.out_proj(gated), mask)


_BLOCK_WRAPPER = {
    "conv": PlainBlock,
    "gcn": PlainBlock,
    "transformer": TransformerBlock,
    "mamba": GatedBlock,
}


def build_block(macro: str, module_kind: str, config: NeckConfig) -> nn.Module:
    module = build_sequential_module(module_kind, config.width, config)
    return _BLOCK_WRAPPER[macro](config.width, module)


def _block_plan(config: NeckConfig) -> list[tuple[str, str]]:
    """(macro, module) for each of the ``depth`` blocks in one level."""
    if config.macro_block != "mix":
        kind = config.sequential_module or DEFAULT_MODULE[config.macro_block]
        return [(config.macro_block, kind)] * config.depth
    mods = config.sequential_module
    if mods is None:
        mods = tuple(MIX_DEFAULT_MODULE[m] for m in config.mix_order)
    elif not isinstance(mods, tuple):
        mods = (mods, mods)
    plan = []
    for i in range(config.depth):
        j = i % len(config.mix_order)
        plan.append((config.mix_order[j], mods[j % len(mods)]))
    return plan


# ---------------------------------------------------------------------------
# downsampling
# ---------------------------------------------------------------------------

class MaxPoolDown(nn.Module):
    """Stride-2 max pool; output length ceil(T / 2), masked rows excluded."""

    def forward(self, x, mask):
        neg = torch.tensor(float("-inf"), dtype=x.dtype, device=x.device)
        h = torch.where(mask.unsqueeze(-1), x, neg).transpose(1, 2)
        pooled = F.max_pool1d(h, kernel_size=2, stride=2, ceil_mode=True)
        new_mask = F.max_pool1d(mask.to(x.dtype).unsqueeze(1), 2, stride=2,
                                ceil_mode=True).squeeze(1) > 0
        return masked_fill_zero(pooled.transpose(1, 2), new_mask), new_mask


class ConvDown(nn.Module):
    """Stride-2 k=3 convolution; same ceil(T / 2) length arithmetic."""

    def __init__(self, width: int):
        super().__init__()
        self.conv = nn.Conv1d(width, width, kernel_size=3, stride=2, padding=1)

    def forward(self, x, mask):
        h = masked_fill_zero(x, mask).transpose(1, 2)
        out = self.conv(h).transpose(1, 2)
        new_mask = mask[:, ::2]
        return masked_fill_zero(out, new_mask), new_mask


# ---------------------------------------------------------------------------
# pyramid
# ---------------------------------------------------------------------------

@dataclasses.dataclass(slots=True)
class FeaturePyramid:
    """Per-level (B, T_l, D) features with (B, T_l) masks; strides are 2**l."""

    levels: list[torch.Tensor]
    masks: list[torch.Tensor]
    strides: tuple[int, ...]

    def __post_init__(self) -> None:
        if not (len(self.levels) == len(self.masks) == len(self.strides)):
            raise ValueError("levels, masks, and strides must align")

    def __len__(self) -> int:
        return len(self.levels)

    def level_lengths(self) -> list[int]:
        return [int(x.shape[1]) for x in self.levels]


class Neck(nn.Module):
    """Stack of macro blocks per level with downsampling in between.

    Level 0 runs at the input stride; each further level halves length with
    the configured downsampler, then applies ``depth`` fresh blocks. Weights
    are not shared across levels.
    """

    def __init__(self, config: NeckConfig, in_dim: int):
        super().__init__()
        self.config = config
        self.in_proj = (nn.Identity() if in_dim == config.width
                        else nn.Linear(in_dim, config.width))
        plan = _block_plan(config)
        self.stages = nn.ModuleList(
            nn.ModuleList(build_block(macro, kind, config) for macro, kind in plan)
            for _ in range(config.levels))
        if config.downsample == "maxpool":
            downs = [MaxPoolDown() for _ in range(config.levels - 1)]
        else:
            downs = [ConvDown(config.width) for _ in range(config.levels - 1)]
        self.downs = nn.ModuleList(downs)

    @property
    def min_input_length(self) -> int:
        return 2 ** (self.config.levels - 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> FeaturePyramid:
        if x.shape[1] < self.min_input_length:
            raise ValueError(
                f"input length {x.shape[1]} is too short for "
                f"{self.config.levels} pyramid levels; need at least "
                f"{self.min_input_length}")
        x = masked_fill_zero(self.in_proj(x), mask)
        levels, masks, strides = [], [], []
        for lvl, blocks in enumerate(self.stages):
            if lvl > 0:
                x, mask = self.downs[lvl - 1](x, mask)
            for block in blocks:
                x = block(x, mask)
            levels.append(x)
            masks.append(mask)
            strides.append(2 ** lvl)
        return FeaturePyramid(levels, masks, tuple(strides))


def expected_level_lengths(input_length: int, levels: int) -> list[int]:
    return [math.ceil(input_length / 2 ** lvl) for lvl in range(levels)]
