"""Modified U-Net feature extractor.

Channels start at `base_channels` and double at every 2x2 max-pool step; the
expansion path mirrors the contraction path.  Every convolution uses same
padding, so spatial size changes only at pooling (halved) and upsampling
(doubled) and skip connections concatenate without cropping.

Parameter naming (stable, used by checkpoints):
    enc{i}.conv{j}   encoder level i (0 = finest), conv j in {0, 1}
    dec{i}.up        2x2 transposed conv producing decoder level i
    dec{i}.conv{j}   decoder level i convs after skip concatenation
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigurationError(ValueError):
    """Raised for network configurations that cannot be instantiated."""


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int
    levels: int = 5
    base_channels: int = 32
    input_channels: int = 3
    conv_kernel: int = 3

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigurationError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.conv_kernel % 2 != 1:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.input_size % (1 << (self.levels - 1)) != 0:
            raise ConfigurationError(
                f"input_size {self.input_size} not divisible by 2^{self.levels - 1}"
            )

    def encoder_channels(self) -> list[int]:
        """Channel ladder, finest encoder level first: base * 2^i."""
        return [self.base_channels * (1 << i) for i in range(self.levels)]

    def level_sizes(self) -> list[int]:
        """Spatial ladder, finest first: input_size / 2^i."""
        return [self.input_size >> i for i in range(self.levels)]

    def probmap_sizes(self) -> list[int]:
        """Supervised prob-map sizes, coarsest first."""
        return list(reversed(self.level_sizes()))


def _conv_block(in_ch: int, out_ch: int, kernel: int) -> nn.Sequential:
    pad = kernel // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=pad),
        nn.ReLU(),
    )


class EncoderLevel(nn.Module):
    def __init__(self, in_ch, out_ch, kernel):
        super().__init__()
        self.conv0 = _conv_block(in_ch, out_ch, kernel)
        self.conv1 = _conv_block(out_ch, out_ch, kernel)

    def forward(self, x):
        return self.conv1(self.conv0(x))


class DecoderStep(nn.Module):
    """Upsample the coarse map 2x, concatenate the skip, apply two convs."""

    def __init__(self, coarse_ch, out_ch, kernel):
        super().__init__()
        self.up = nn.ConvTranspose2d(coarse_ch, out_ch, kernel_size=2, stride=2)
        self.conv0 = _conv_block(2 * out_ch, out_ch, kernel)
        self.conv1 = _conv_block(out_ch, out_ch, kernel)

    def forward(self, coarse, skip):
        if skip.shape[-2:] != tuple(2 * s for s in coarse.shape[-2:]):
            raise ValueError(
                f"skip spatial size {tuple(skip.shape[-2:])} is not twice "
                f"coarse {tuple(coarse.shape[-2:])}"
            )
        up = self.up(coarse)
        return self.conv1(self.conv0(torch.cat([up, skip], dim=1)))


class UNetBackbone(nn.Module):
    """Contraction and expansion paths; exposes per-level decoder features."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        chans = config.encoder_channels()
        for i in range(config.levels):
            in_ch = config.input_channels if i == 0 else chans[i - 1]
            self.add_module(f"enc{i}", EncoderLevel(in_ch, chans[i], config.conv_kernel))
        for i in range(config.levels - 1):
            self.add_module(f"dec{i}", DecoderStep(chans[i + 1], chans[i], config.conv_kernel))

    def encode(self, x) -> list[torch.Tensor]:
        """Encoder feature maps, one per level, finest first."""
        if x.shape[-2:] != (self.config.input_size, self.config.input_size):
            raise ConfigurationError(
                f"input spatial size {tuple(x.shape[-2:])} does not match "
                f"configured {self.config.input_size}"
            )
        feats = []
        for i in range(self.config.levels):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = getattr(self, f"enc{i}")(x)
            feats.append(x)
        return feats

    def decode(self, encoder_feats) -> list[torch.Tensor]:
        """Decoder feature maps, coarsest first (index 0 is the bottleneck)."""
        x = encoder_feats[-1]
        feats = [x]
        for i in reversed(range(self.config.levels - 1)):
            x = getattr(self, f"dec{i}")(x, encoder_feats[i])
            feats.append(x)
        return feats

    def forward(self, x) -> list[torch.Tensor]:
        return self.decode(self.encode(x))


def init_parameters(module: nn.Module, seed: int) -> None:
    """He-style fan-in normal init for conv weights, zero biases, seeded."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            if isinstance(m, nn.ConvTranspose2d):
                # each output pixel of a k=stride transposed conv sees
                # in_channels contributions
                fan_in = m.in_channels
            else:
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Checkpoints: a .npz archive of named parameter arrays plus a JSON meta entry
# carrying the model kind and NetworkConfig.  Arrays round-trip bit-exactly.

_META_KEY = "__meta__"


def save_checkpoint(path, model_kind: str, config: NetworkConfig, state) -> None:
    """Write named parameters (a state_dict or name->array mapping) to .npz."""
    arrays = {}
    for name, value in state.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arrays[name] = arr
    meta = json.dumps({"model": model_kind, "config": asdict(config)})
    arrays[_META_KEY] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path):
    """Return (model_kind, NetworkConfig, {name: np.ndarray})."""
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    raw = arrays.pop(_META_KEY, None)
    if raw is None:
        raise ValueError(f"{path}: not a checkpoint (missing {_META_KEY})")
    meta = json.loads(raw.tobytes().decode("utf-8"))
    config = NetworkConfig(**meta["config"])
    return meta["model"], config, arrays
