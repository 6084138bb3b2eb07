"""Residual prob-map refinement head and the network assemblies built on it.

A refinement unit upsamples a coarse probability map, concatenates it with
the finer decoder features, predicts a bounded residual through a 3x3 conv
followed by tanh, adds it to the upsampled map and clamps the sum to [0, 1]
with a truncated ReLU.  Under the "fixed" scheme the incoming prob-map is
gradient-detached at both of its uses (the concatenation and the additive
skip), so each stage learns only the correction for the map it received;
under "nonfixed" gradients flow through both uses.  The two schemes are
forward-identical.

Model kinds:
    ResSegFixed / ResSegNonFixed  bottom head + one refinement per decoder
                                  step; levels supervised prob-maps
    ResSegHorz                    full-resolution head + 5 chained
                                  refinements at constant resolution (fixed
                                  scheme); 6 supervised maps
    UNetBaseline                  single 1x1-conv + sigmoid head
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import NetworkConfig, UNetBackbone, init_parameters, read_checkpoint, save_checkpoint

SCHEME_FIXED = "fixed"
SCHEME_NONFIXED = "nonfixed"

MODEL_KINDS = ("ResSegFixed", "ResSegNonFixed", "ResSegHorz", "UNetBaseline")


class _TruncatedReLU(torch.autograd.Function):
    """Clamp to [0, 1] with derivative 1 on (0, 1) and 0 elsewhere.

    The subgradient at exactly 0 and 1 is pinned to 0, matching clamp
    conventions (torch.clamp itself passes gradient at the boundaries).
    """

    generate_vmap_rule = True

    @staticmethod
    def forward(x):
        return x.clamp(0.0, 1.0)

    @staticmethod
    def setup_context(ctx, inputs, output):
        (x,) = inputs
        ctx.save_for_backward(x)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * ((x > 0) & (x < 1)).to(grad.dtype)


def truncated_relu(x: torch.Tensor) -> torch.Tensor:
    """f(x) = max(min(x, 1), 0), elementwise."""
    return _TruncatedReLU.apply(x)


@dataclass
class PyramidOutput:
    """Supervised prob-maps, coarsest first; `final` is the full-resolution one."""

    levels: list[torch.Tensor]

    @property
    def final(self) -> torch.Tensor:
        return self.levels[-1]


class BottomHead(nn.Module):
    """1x1 conv to one channel followed by a logistic sigmoid."""

    def __init__(self, in_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, kernel_size=1)

    def forward(self, feats):
        return torch.sigmoid(self.conv(feats))


class RefineUnit(nn.Module):
    """One residual refinement step on a prob-map."""

    def __init__(self, feature_channels):
        super().__init__()
        self.conv = nn.Conv2d(feature_channels + 1, 1, kernel_size=3, padding=1)

    def forward(self, prob, feats, detach_prob: bool):
        ph, pw = prob.shape[-2:]
        fh, fw = feats.shape[-2:]
        if (fh, fw) == (2 * ph, 2 * pw):
            prob_up = F.interpolate(prob, size=(fh, fw), mode="bilinear", align_corners=False)
        elif (fh, fw) == (ph, pw):
            prob_up = prob
        else:
            raise ValueError(
                f"feature size {(fh, fw)} is neither 1x nor 2x prob-map size {(ph, pw)}"
            )
        if detach_prob:
            prob_up = prob_up.detach()
        residual = torch.tanh(self.conv(torch.cat([feats, prob_up], dim=1)))
        return truncated_relu(prob_up + residual)


class ResSegNet(nn.Module):
    """Backbone plus bottom head and one refinement per decoder step."""

    def __init__(self, config: NetworkConfig, scheme: str = SCHEME_FIXED):
        super().__init__()
        if scheme not in (SCHEME_FIXED, SCHEME_NONFIXED):
            raise ValueError(f"unknown update scheme {scheme!r}")
        self.config = config
        self.scheme = scheme
        self.backbone = UNetBackbone(config)
        chans = config.encoder_channels()
        self.head0 = BottomHead(chans[-1])
        for k in range(1, config.levels):
            # refine{k} runs on decoder level (levels-1-k), i.e. k steps above
            # the bottleneck
            self.add_module(f"refine{k}", RefineUnit(chans[config.levels - 1 - k]))

    @property
    def kind(self) -> str:
        return "ResSegFixed" if self.scheme == SCHEME_FIXED else "ResSegNonFixed"

    def forward(self, x) -> PyramidOutput:
        detach = self.scheme == SCHEME_FIXED
        dec_feats = self.backbone(x)  # coarsest first
        prob = self.head0(dec_feats[0])
        maps = [prob]
        for k in range(1, self.config.levels):
            prob = getattr(self, f"refine{k}")(prob, dec_feats[k], detach_prob=detach)
            maps.append(prob)
        return PyramidOutput(maps)


class ResSegNetHorz(nn.Module):
    """Refinement stack at constant (finest) resolution, fixed scheme."""

    kind = "ResSegHorz"

    def __init__(self, config: NetworkConfig, stages: int = 5):
        super().__init__()
        self.config = config
        self.stages = stages
        self.backbone = UNetBackbone(config)
        self.head0 = BottomHead(config.base_channels)
        for k in range(1, stages + 1):
            self.add_module(f"refine{k}", RefineUnit(config.base_channels))

    def forward(self, x) -> PyramidOutput:
        finest = self.backbone(x)[-1]
        prob = self.head0(finest)
        maps = [prob]
        for k in range(1, self.stages + 1):
            prob = getattr(self, f"refine{k}")(prob, finest, detach_prob=True)
            maps.append(prob)
        return PyramidOutput(maps)


class UNetBaseline(nn.Module):
    """Plain U-Net head: finest decoder features -> 1x1 conv -> sigmoid."""

    kind = "UNetBaseline"

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.backbone = UNetBackbone(config)
        self.head = BottomHead(config.base_channels)

    def forward(self, x) -> torch.Tensor:
        return self.head(self.backbone(x)[-1])


def build_model(kind: str, config: NetworkConfig, seed: int = 0) -> nn.Module:
    if kind == "ResSegFixed":
        model = ResSegNet(config, scheme=SCHEME_FIXED)
    elif kind == "ResSegNonFixed":
        model = ResSegNet(config, scheme=SCHEME_NONFIXED)
    elif kind == "ResSegHorz":
        model = ResSegNetHorz(config)
    elif kind == "UNetBaseline":
        model = UNetBaseline(config)
    else:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    init_parameters(model, seed)
    return model


def supervised_maps(model: nn.Module, x) -> list[torch.Tensor]:
    """All supervised prob-maps, coarsest first ([map] for the baseline)."""
    out = model(x)
    if isinstance(out, PyramidOutput):
        return out.levels
    return [out]


def save_model(path, model: nn.Module) -> None:
    save_checkpoint(path, model.kind, model.config, model.state_dict())


def load_model(path) -> nn.Module:
    """Rebuild a model from a checkpoint, preserving parameters bit-exactly."""
    kind, config, arrays = read_checkpoint(path)
    model = build_model(kind, config)
    tensors = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    dtypes = {t.dtype for t in tensors.values()}
    if len(dtypes) == 1:
        model.to(next(iter(dtypes)))
    model.load_state_dict(tensors)
    return model
