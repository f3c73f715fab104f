"""Core enhancement blocks: the gated expert-fusion block, its three expert
sub-networks, and the shallow feature attention block (SFEB).

All blocks map (B, C, H, W) float tensors to the same shape and are pure
functions of (input, parameters), so concurrent forward passes over frozen
parameters are safe.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputTooSmallError


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    """Split channels into two halves and multiply them elementwise.

    (B, 2C, H, W) -> (B, C, H, W); parameter-free.
    """
    if x.shape[1] % 2 != 0:
        raise ConfigurationError(
            f"simple_gate needs an even channel count, got {x.shape[1]}"
        )
    a, b = x.chunk(2, dim=1)
    return a * b


def fuse_expert_outputs(outputs, weights) -> torch.Tensor:
    """Weighted sum of expert outputs with a fixed accumulation order.

    outputs: sequence of (B, C, H, W) tensors; weights: (B, n) with one
    column per output. The explicit loop keeps dtype and accumulation
    order fixed, so exact one-hot weights reproduce the selected expert
    bit for bit.
    """
    if len(outputs) == 0:
        raise ConfigurationError("fuse_expert_outputs needs at least one output")
    if weights.shape[-1] != len(outputs):
        raise ConfigurationError(
            f"got {len(outputs)} outputs but {weights.shape[-1]} weight columns"
        )
    w = weights.view(weights.shape[0], weights.shape[-1], 1, 1, 1)
    out = w[:, 0] * outputs[0]
    for i in range(1, len(outputs)):
        out = out + w[:, i] * outputs[i]
    return out


def bilinear_resize(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resampling to `size` = (H, W).

    The interpolation kernel is a partition of unity (weights sum to 1),
    so constant inputs stay constant and newly inserted samples between
    two grid points take midpoint values.
    """
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


@dataclass
class GmMoeBlockConfig:
    """Per-block architecture switches.

    `channels` is the feature width the block operates at. Expert and gate
    toggles drive the ablation presets; when the gate is disabled, fusion
    uses fixed uniform weights over the enabled experts.
    """

    channels: int
    enable_expert1: bool = True
    enable_expert2: bool = True
    enable_expert3: bool = True
    enable_gate: bool = True
    sfeb_kernel: int = 3
    sfeb_dilations: tuple = (1, 2, 3)
    attention_kernel: int = 7

    def validate(self) -> None:
        if self.channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {self.channels}")
        if not (self.enable_expert1 or self.enable_expert2 or self.enable_expert3):
            raise ConfigurationError("at least one expert must be enabled")
        if self.attention_kernel < 1 or self.attention_kernel % 2 == 0:
            raise ConfigurationError(
                f"attention_kernel must be a positive odd int, got {self.attention_kernel}"
            )
        if len(tuple(self.sfeb_dilations)) == 0:
            raise ConfigurationError("sfeb_dilations must not be empty")
        if any(int(d) < 1 for d in self.sfeb_dilations):
            raise ConfigurationError(f"dilations must be positive, got {self.sfeb_dilations}")
        if self.sfeb_kernel < 1 or self.sfeb_kernel % 2 == 0:
            raise ConfigurationError(
                f"sfeb_kernel must be a positive odd int, got {self.sfeb_kernel}"
            )

    @property
    def enabled_experts(self) -> tuple:
        return tuple(
            i
            for i, on in enumerate(
                (self.enable_expert1, self.enable_expert2, self.enable_expert3)
            )
            if on
        )


class GateNetwork(nn.Module):
    """Per-sample routing weights over the three experts.

    Global average pooling -> FC (width max(C//4, 8), ReLU) -> FC to 3
    logits -> softmax. Logits of disabled experts are masked to -inf
    before the softmax so the remaining weights stay on the simplex.
    """

    def __init__(self, channels: int, n_experts: int = 3):
        super().__init__()
        hidden = max(channels // 4, 8)
        self.channels = channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, n_experts)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ConfigurationError(
                f"gate expects {self.channels} channels, got {x.shape[1]}"
            )
        v = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc2(F.relu(self.fc1(v)))

    def forward(self, x: torch.Tensor, enabled_mask=None) -> torch.Tensor:
        logits = self.logits(x)
        if enabled_mask is not None:
            mask = torch.as_tensor(enabled_mask, dtype=torch.bool, device=logits.device)
            logits = logits.masked_fill(~mask, float("-inf"))
        return torch.softmax(logits, dim=-1)


class ColorExpert(nn.Module):
    """Color restoration expert.

    Stride-2 conv (C -> 2C), 3x3 feature learning, max pooling, 1x1
    projection back to C, bilinear upsample to the input resolution,
    residual add, sigmoid. The sigmoid clamps every output into (0, 1).
    """

    def __init__(self, channels: int):
        super().__init__()
        wide = channels * 2
        self.down = nn.Conv2d(channels, wide, 3, stride=2, padding=1)
        self.body = nn.Conv2d(wide, wide, 3, padding=1)
        self.pool = nn.MaxPool2d(3, stride=1, padding=1)
        self.proj = nn.Conv2d(wide, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2], x.shape[-1]
        if h < 2 or w < 2:
            raise InputTooSmallError(f"cannot downsample a {h}x{w} input")
        y = F.relu(self.down(x))
        y = F.relu(self.body(y))
        y = self.pool(y)
        y = self.proj(y)
        y = bilinear_resize(y, (h, w))
        return torch.sigmoid(x + y)


class DetailExpert(nn.Module):
    """Detail enhancement expert with channel and spatial attention.

    Channel branch: global avg+max descriptors through a shared MLP,
    sigmoid per-channel scale. Spatial branch: channel-wise max/mean maps,
    k x k conv, sigmoid per-pixel scale. The two attended maps are
    concatenated, projected back to C, and added to the input. Zeroing
    `fuse` makes the block an exact identity.
    """

    def __init__(self, channels: int, attention_kernel: int = 7):
        super().__init__()
        hidden = max(channels // 4, 4)
        self.ca_fc1 = nn.Conv2d(channels, hidden, 1)
        self.ca_fc2 = nn.Conv2d(hidden, channels, 1)
        self.sa_conv = nn.Conv2d(2, 1, attention_kernel, padding=attention_kernel // 2)
        self.fuse = nn.Conv2d(2 * channels, channels, 1)

    def channel_scale(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, 1, 1) sigmoid scale from pooled descriptors."""
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        shared = lambda v: self.ca_fc2(F.relu(self.ca_fc1(v)))
        return torch.sigmoid(shared(avg) + shared(mx))

    def spatial_map(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) sigmoid map from channel-wise max and mean."""
        mx = x.max(dim=1, keepdim=True).values
        mean = x.mean(dim=1, keepdim=True)
        return torch.sigmoid(self.sa_conv(torch.cat([mx, mean], dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ca_out = x * self.channel_scale(x)
        sa_out = x * self.spatial_map(x)
        return x + self.fuse(torch.cat([ca_out, sa_out], dim=1))


class SimplifiedChannelAttention(nn.Module):
    """x * P(GAP(x)) with P a 1x1 convolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.proj(F.adaptive_avg_pool2d(x, 1))


class FeatureExpert(nn.Module):
    """Advanced feature enhancement expert.

    Parallel 1x1 / 3x3 / 5x5 convolutions fused by concatenation and a 1x1
    projection to 2C, then the channel-split gate (2C -> C), simplified
    channel attention, a final 1x1 projection, and a residual add.
    Zeroing `proj` makes the block an exact identity.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.scale1 = nn.Conv2d(channels, channels, 1)
        self.scale3 = nn.Conv2d(channels, channels, 3, padding=1)
        self.scale5 = nn.Conv2d(channels, channels, 5, padding=2)
        self.merge = nn.Conv2d(3 * channels, 2 * channels, 1)
        self.sca = SimplifiedChannelAttention(channels)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = torch.cat([self.scale1(x), self.scale3(x), self.scale5(x)], dim=1)
        y = self.merge(y)
        y = simple_gate(y)
        y = self.sca(y)
        return x + self.proj(y)


def fuse_weighted_branches(f1, f2, a1, a2) -> torch.Tensor:
    """F1' * A1 + F2' * A2, the weighted two-branch fusion used by SFEB."""
    return f1 * a1 + f2 * a2


class SFEB(nn.Module):
    """Shallow feature attention block.

    Branch F1: depthwise-separable conv. Branch F2: parallel dilated convs
    at the configured rates, summed. Both are compressed to C' = max(C//2, 1)
    by 1x1 convs; channel-wise avg/max descriptors of the fused map pass
    through a k x k conv producing sigmoid weights A1, A2 for the branch
    fusion F_w = F1'*A1 + F2'*A2. A final 1x1 conv + sigmoid turns F_w into
    the attention map that multiplicatively masks the input.
    """

    def __init__(self, channels: int, kernel: int = 3, dilations=(1, 2, 3),
                 attention_kernel: int = 7):
        super().__init__()
        dilations = tuple(int(d) for d in dilations)
        if len(dilations) == 0:
            raise ConfigurationError("SFEB needs at least one dilation rate")
        if any(d < 1 for d in dilations):
            raise ConfigurationError(f"dilations must be positive, got {dilations}")
        squeezed = max(channels // 2, 1)
        self.dilations = dilations
        self.dw = nn.Conv2d(channels, channels, kernel, padding=kernel // 2,
                            groups=channels)
        self.pw = nn.Conv2d(channels, channels, 1)
        self.dilated = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=d, dilation=d) for d in dilations
        )
        self.compress1 = nn.Conv2d(channels, squeezed, 1)
        self.compress2 = nn.Conv2d(channels, squeezed, 1)
        self.squeeze = nn.Conv2d(2, 2, attention_kernel, padding=attention_kernel // 2)
        self.final = nn.Conv2d(squeezed, channels, 1)

    def branches(self, x: torch.Tensor):
        """Compressed branch features (F1', F2'), each (B, C', H, W)."""
        f1 = self.pw(self.dw(x))
        f2 = self.dilated[0](x)
        for conv in self.dilated[1:]:
            f2 = f2 + conv(x)
        return self.compress1(f1), self.compress2(f2)

    def attention_pair(self, f1c: torch.Tensor, f2c: torch.Tensor):
        """Sigmoid branch weights (A1, A2), each (B, 1, H, W)."""
        fe = torch.cat([f1c, f2c], dim=1)
        desc = torch.cat(
            [fe.mean(dim=1, keepdim=True), fe.max(dim=1, keepdim=True).values], dim=1
        )
        a = torch.sigmoid(self.squeeze(desc))
        return a[:, 0:1], a[:, 1:2]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f1c, f2c = self.branches(x)
        a1, a2 = self.attention_pair(f1c, f2c)
        fw = fuse_weighted_branches(f1c, f2c, a1, a2)
        attn = torch.sigmoid(self.final(fw))
        return x * attn


_EXPERT_NAMES = ("expert_color", "expert_detail", "expert_feature")


class GmMoeBlock(nn.Module):
    """Gated mixture of the three enhancement experts.

    Every enabled expert processes the input; the gate network (or fixed
    uniform weights when disabled) produces per-sample simplex weights, and
    the outputs are fused as a weighted sum in expert order.
    """

    def __init__(self, cfg: GmMoeBlockConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.channels
        if cfg.enable_expert1:
            self.expert_color = ColorExpert(c)
        if cfg.enable_expert2:
            self.expert_detail = DetailExpert(c, cfg.attention_kernel)
        if cfg.enable_expert3:
            self.expert_feature = FeatureExpert(c)
        if cfg.enable_gate:
            self.gate = GateNetwork(c)
        enabled = (cfg.enable_expert1, cfg.enable_expert2, cfg.enable_expert3)
        self._enabled_mask = enabled

    def experts(self):
        """Enabled expert modules in fixed (color, detail, feature) order."""
        return [
            getattr(self, name)
            for name, on in zip(_EXPERT_NAMES, self._enabled_mask)
            if on
        ]

    def gate_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Per-sample weights over all 3 expert slots; disabled slots get 0."""
        if self.cfg.enable_gate:
            return self.gate(x, enabled_mask=self._enabled_mask)
        n = sum(self._enabled_mask)
        w = torch.tensor(
            [1.0 / n if on else 0.0 for on in self._enabled_mask],
            dtype=x.dtype, device=x.device,
        )
        return w.expand(x.shape[0], 3)

    def forward(self, x: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[1] != self.cfg.channels:
            raise ConfigurationError(
                f"block expects {self.cfg.channels} channels, got {x.shape[1]}"
            )
        outputs = [expert(x) for expert in self.experts()]
        if weights is None:
            weights = self.gate_weights(x)
        if weights.shape[-1] == 3 and len(outputs) != 3:
            cols = [i for i, on in enumerate(self._enabled_mask) if on]
            weights = weights[:, cols]
        return fuse_expert_outputs(outputs, weights)
