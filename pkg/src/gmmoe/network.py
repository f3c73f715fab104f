"""Encoder-decoder enhancement network.

Pixel-unshuffle downsampling with channel doubling, mirrored pixel-shuffle
upsampling, concatenate-and-project skip connections, an optional SFEB on
the stem features, one refinement stage at full resolution, and a residual
output head: enhanced = clamp(input + residual, 0, 1).
"""

import hashlib
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import SFEB, GmMoeBlock, GmMoeBlockConfig
from .errors import ConfigurationError, ShapeError


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, C*r^2, H/r, W/r); pure rearrangement."""
    if r < 1:
        raise ConfigurationError(f"shuffle factor must be >= 1, got {r}")
    if r == 1:
        return x
    if x.shape[-2] % r or x.shape[-1] % r:
        raise ShapeError(
            f"spatial dims {tuple(x.shape[-2:])} not divisible by {r}"
        )
    return F.pixel_unshuffle(x, r)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, C/r^2, H*r, W*r); exact inverse of pixel_unshuffle."""
    if r < 1:
        raise ConfigurationError(f"shuffle factor must be >= 1, got {r}")
    if r == 1:
        return x
    if x.shape[1] % (r * r):
        raise ShapeError(f"channel count {x.shape[1]} not divisible by {r * r}")
    return F.pixel_shuffle(x, r)


@dataclass
class ModelConfig:
    """Architecture hyperparameters and component toggles.

    Channel width at level l is base_channels * 2^l; blocks_per_level lists
    the trunk-block count for each encoder level plus the bottleneck (the
    decoder mirrors the encoder). Expert/gate/SFEB toggles drive the
    ablation presets.
    """

    base_channels: int = 16
    num_levels: int = 3
    blocks_per_level: tuple = (1, 1, 1, 2)
    enable_sfeb: bool = True
    enable_expert1: bool = True
    enable_expert2: bool = True
    enable_expert3: bool = True
    enable_gate: bool = True
    sfeb_kernel: int = 3
    sfeb_dilations: tuple = (1, 2, 3)
    attention_kernel: int = 7
    zero_init_output: bool = True

    def validate(self) -> None:
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_levels < 1:
            raise ConfigurationError(f"num_levels must be >= 1, got {self.num_levels}")
        bpl = tuple(int(b) for b in self.blocks_per_level)
        if len(bpl) != self.num_levels + 1:
            raise ConfigurationError(
                f"blocks_per_level needs {self.num_levels + 1} entries "
                f"(levels + bottleneck), got {len(bpl)}"
            )
        if any(b < 1 for b in bpl):
            raise ConfigurationError(f"blocks_per_level entries must be >= 1, got {bpl}")
        if self.any_expert_enabled:
            self.block_cfg(self.base_channels).validate()
        elif self.enable_gate:
            raise ConfigurationError("enable_gate requires at least one enabled expert")
        if self.enable_sfeb:
            # reuse the block-level checks for the shared SFEB fields
            GmMoeBlockConfig(
                channels=self.base_channels,
                sfeb_kernel=self.sfeb_kernel,
                sfeb_dilations=tuple(self.sfeb_dilations),
                attention_kernel=self.attention_kernel,
            ).validate()

    @property
    def any_expert_enabled(self) -> bool:
        return self.enable_expert1 or self.enable_expert2 or self.enable_expert3

    def block_cfg(self, channels: int) -> GmMoeBlockConfig:
        return GmMoeBlockConfig(
            channels=channels,
            enable_expert1=self.enable_expert1,
            enable_expert2=self.enable_expert2,
            enable_expert3=self.enable_expert3,
            enable_gate=self.enable_gate,
            sfeb_kernel=self.sfeb_kernel,
            sfeb_dilations=tuple(self.sfeb_dilations),
            attention_kernel=self.attention_kernel,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks_per_level"] = list(self.blocks_per_level)
        d["sfeb_dilations"] = list(self.sfeb_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "blocks_per_level" in kwargs:
            kwargs["blocks_per_level"] = tuple(kwargs["blocks_per_level"])
        if "sfeb_dilations" in kwargs:
            kwargs["sfeb_dilations"] = tuple(kwargs["sfeb_dilations"])
        return cls(**kwargs)


MODEL_PRESETS = {
    "tiny": ModelConfig(base_channels=8, num_levels=2, blocks_per_level=(1, 1, 1)),
    "small": ModelConfig(base_channels=16, num_levels=3, blocks_per_level=(1, 1, 1, 2)),
    "full": ModelConfig(base_channels=48, num_levels=3, blocks_per_level=(2, 2, 4, 4)),
}


class BaselineBlock(nn.Module):
    """Plain residual conv block, the trunk present in every ablation row."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class TrunkBlock(nn.Module):
    """Baseline conv block followed by the optional gated expert fusion."""

    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        self.base = BaselineBlock(channels)
        self.moe = GmMoeBlock(cfg.block_cfg(channels)) if cfg.any_expert_enabled else None

    def forward(self, x):
        x = self.base(x)
        if self.moe is not None:
            x = self.moe(x)
        return x


class Downsample(nn.Module):
    """Pixel-unshuffle by 2 (4x channels) then 1x1 conv to 2x channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(4 * channels, 2 * channels, 1)

    def forward(self, x):
        return self.proj(pixel_unshuffle(x, 2))


class Upsample(nn.Module):
    """1x1 conv to 2x channels then pixel-shuffle by 2 (to channels/2)."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels, 2 * channels, 1)

    def forward(self, x):
        return pixel_shuffle(self.proj(x), 2)


class GMMoENet(nn.Module):
    """The full enhancement network; forward maps (B, 3, H, W) in [0,1] to
    clamp(input + residual, 0, 1) of identical shape."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.base_channels
        bpl = tuple(config.blocks_per_level)

        self.stem = nn.Conv2d(3, c, 3, padding=1)
        if config.enable_sfeb:
            self.sfeb = SFEB(c, config.sfeb_kernel, config.sfeb_dilations,
                             config.attention_kernel)

        def stage(width, count):
            return nn.ModuleList(TrunkBlock(width, config) for _ in range(count))

        self.encoder = nn.ModuleList()
        self.downs = nn.ModuleList()
        width = c
        for lvl in range(config.num_levels):
            self.encoder.append(stage(width, bpl[lvl]))
            self.downs.append(Downsample(width))
            width *= 2
        self.bottleneck = stage(width, bpl[config.num_levels])

        self.ups = nn.ModuleList()
        self.skip_projs = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for lvl in reversed(range(config.num_levels)):
            self.ups.append(Upsample(width))
            width //= 2
            self.skip_projs.append(nn.Conv2d(2 * width, width, 1))
            self.decoder.append(stage(width, bpl[lvl]))

        self.refine = TrunkBlock(c, config)
        self.head = nn.Conv2d(c, 3, 3, padding=1)
        if config.zero_init_output:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def _pad(self, x):
        m = 2 ** self.config.num_levels
        ph = (m - x.shape[-2] % m) % m
        pw = (m - x.shape[-1] % m) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        return x

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(
                f"expected a (B, 3, H, W) image batch, got {tuple(image.shape)}"
            )
        if image.shape[0] < 1:
            raise ShapeError("empty batch")
        h, w = image.shape[-2], image.shape[-1]
        padded = self._pad(image)

        x = self.stem(padded)
        if self.config.enable_sfeb:
            x = self.sfeb(x)

        skips = []
        for blocks, down in zip(self.encoder, self.downs):
            for blk in blocks:
                x = blk(x)
            skips.append(x)
            x = down(x)
        for blk in self.bottleneck:
            x = blk(x)
        for up, proj, blocks, skip in zip(
            self.ups, self.skip_projs, self.decoder, reversed(skips)
        ):
            x = up(x)
            x = proj(torch.cat([x, skip], dim=1))
            for blk in blocks:
                x = blk(x)

        x = self.refine(x)
        residual = self.head(x)
        out = torch.clamp(padded + residual, 0.0, 1.0)
        return out[..., :h, :w]


def build_model(config: ModelConfig, seed: int) -> GMMoENet:
    """Deterministic construction: same (config, seed) gives bit-identical
    initial parameters; the output head is zeroed when configured."""
    config.validate()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = GMMoENet(config)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_digest(model: nn.Module) -> str:
    """sha256 over all parameters in name order; stable across runs."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def model_components(model: nn.Module) -> set:
    """Which toggleable component subtrees exist in the parameter tree."""
    markers = {
        "sfeb": "sfeb.",
        "expert_color": ".expert_color.",
        "expert_detail": ".expert_detail.",
        "expert_feature": ".expert_feature.",
        "gate": ".gate.",
    }
    names = [n for n, _ in model.named_parameters()]
    found = set()
    for comp, marker in markers.items():
        if any(marker in n or n.startswith(marker.lstrip(".")) for n in names):
            found.add(comp)
    return found
