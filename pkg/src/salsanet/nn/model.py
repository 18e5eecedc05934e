"""
SalsaNet encoder-decoder.

Encoder: five residual blocks (32, 64, 128, 256, 256 channels); blocks 1-4
are followed by dropout and 2x2 max pooling, for a total downsampling of 16.
Decoder: four stages, each a 2x2/stride-2 transposed convolution with batch
norm and leaky ReLU, element-wise addition of the pre-pool encoder output at
the same resolution, then two 3x3 conv + bn + leaky-ReLU layers.  A 1x1
convolution maps the last 32 channels to the class logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .functional import ShapeError
from .layers import (BatchNorm2d, Conv2d, Dropout, LeakyReLU, MaxPool2, Mode, Module,
                     Sequential, TransposedConv2d, conv_bn_act)

ENCODER_CHANNELS = (32, 64, 128, 256, 256)
DECODER_CHANNELS = (256, 128, 64, 32)


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 4
    input_hw: Tuple[int, int] = (256, 64)
    num_classes: int = 3
    encoder_channels: Tuple[int, ...] = ENCODER_CHANNELS
    decoder_channels: Tuple[int, ...] = DECODER_CHANNELS
    dropout: float = 0.5
    slope: float = 0.1
    bn_momentum: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if len(self.encoder_channels) != len(self.decoder_channels) + 1:
            raise ValueError("need one more encoder block than decoder stages")
        factor = 2 ** len(self.decoder_channels)
        if any(s % factor for s in self.input_hw):
            raise ShapeError(f"input size {self.input_hw} must be divisible by {factor}")
        skips = list(reversed(self.encoder_channels[:-1]))
        if list(self.decoder_channels) != skips:
            raise ValueError(f"decoder channels {self.decoder_channels} cannot be added to "
                             f"encoder skips {skips}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_hw", "encoder_channels", "decoder_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


class ResNetBlock(Module):
    """Two conv-bn stages with a shortcut, summed before the final activation.

    The shortcut is the identity when channel counts match and a 1x1
    conv + bn projection otherwise.
    """

    def __init__(self, c_in: int, c_out: int, rng, slope: float = 0.1, momentum: float = 0.99):
        super().__init__()
        self.add("conv1", Conv2d(c_in, c_out, 3, rng, bias=False))
        self.add("bn1", BatchNorm2d(c_out, momentum))
        self.add("act1", LeakyReLU(slope))
        self.add("conv2", Conv2d(c_out, c_out, 3, rng, bias=False))
        self.add("bn2", BatchNorm2d(c_out, momentum))
        self.shortcut: Optional[Sequential] = None
        if c_in != c_out:
            self.shortcut = self.add("shortcut", Sequential(
                ("conv", Conv2d(c_in, c_out, 1, rng, bias=False)),
                ("bn", BatchNorm2d(c_out, momentum))))
        self.act = self.add("act2", LeakyReLU(slope))

    def forward(self, x, mode, rng):
        c = self.children
        h = c["act1"](c["bn1"](c["conv1"](x, mode), mode), mode)
        h = c["bn2"](c["conv2"](h, mode), mode)
        s = x if self.shortcut is None else self.shortcut(x, mode)
        return self.act(h + s, mode)

    def backward(self, grad):
        c = self.children
        g = self.act.backward(grad)
        gs = g if self.shortcut is None else self.shortcut.backward(g)
        gh = c["conv1"].backward(c["bn1"].backward(c["act1"].backward(
            c["conv2"].backward(c["bn2"].backward(g)))))
        return gh + gs


class UpStage(Module):
    """Upsample by 2, add the skip tensor, refine with two conv layers."""

    def __init__(self, c_in: int, c_out: int, rng, slope: float, momentum: float):
        super().__init__()
        self.up = self.add("up", Sequential(("deconv", TransposedConv2d(c_in, c_out, rng, bias=False)),
                                            ("bn", BatchNorm2d(c_out, momentum)),
                                            ("act", LeakyReLU(slope))))
        self.refine = self.add("refine", Sequential(("conv1", conv_bn_act(c_out, c_out, rng, slope, momentum)),
                                                    ("conv2", conv_bn_act(c_out, c_out, rng, slope, momentum))))

    def forward(self, x, mode, rng, skip=None):
        u = self.up(x, mode, rng)
        if u.shape != skip.shape:
            raise ShapeError(f"skip {skip.shape} cannot be added to upsampled {u.shape}")
        return self.refine(u + skip, mode, rng)

    def backward(self, grad):
        g = self.refine.backward(grad)
        return self.up.backward(g), g  # (to the lower stage, to the skip)


class SalsaNet(Module):
    def __init__(self, arch: ArchSpec, rng: np.random.Generator):
        super().__init__()
        self.arch = arch
        enc, dec = arch.encoder_channels, arch.decoder_channels
        self.blocks: List[ResNetBlock] = []
        c_prev = arch.in_channels
        for i, c in enumerate(enc, 1):
            self.blocks.append(self.add(f"enc{i}", ResNetBlock(c_prev, c, rng, arch.slope, arch.bn_momentum)))
            c_prev = c
        self.drops = [self.add(f"drop{i}", Dropout(arch.dropout)) for i in range(1, len(enc))]
        self.pools = [self.add(f"pool{i}", MaxPool2()) for i in range(1, len(enc))]
        self.stages: List[UpStage] = []
        for i, c in enumerate(dec, 1):
            self.stages.append(self.add(f"dec{i}", UpStage(c_prev, c, rng, arch.slope, arch.bn_momentum)))
            c_prev = c
        self.head = self.add("head", Conv2d(c_prev, arch.num_classes, 1, rng, bias=True))

    def forward(self, x, mode=Mode.INFER, rng=None, trace: Optional[Dict[str, tuple]] = None):
        n_expected = (self.arch.in_channels, *self.arch.input_hw)
        if x.ndim != 4 or x.shape[1:] != n_expected:
            raise ShapeError(f"network expects input (N, {', '.join(map(str, n_expected))}), got {x.shape}")
        skips = []
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h, mode, rng)
            if trace is not None:
                trace[f"enc{i + 1}"] = h.shape
            if i < len(self.pools):
                skips.append(h)
                h = self.pools[i](self.drops[i](h, mode, rng), mode, rng)
        if trace is not None:
            trace["bottleneck"] = h.shape
        for i, stage in enumerate(self.stages):
            skip = skips[-1 - i]
            h = stage.forward(h, mode, rng, skip=skip)
            if trace is not None:
                trace[f"dec{i + 1}"] = h.shape
        return self.head(h, mode, rng)

    def backward(self, grad):
        g = self.head.backward(grad)
        skip_grads = []
        for stage in reversed(self.stages):
            g, gs = stage.backward(g)
            skip_grads.append(gs)
        # the last decoder stage feeds the first encoder block, so skip_grads[i] pairs with block i
        for i in reversed(range(len(self.blocks))):
            if i < len(self.pools):
                g = self.drops[i].backward(self.pools[i].backward(g)) + skip_grads[i]
            g = self.blocks[i].backward(g)
        return g

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def build_salsanet(seed: int = 0, arch: ArchSpec = ArchSpec()) -> SalsaNet:
    return SalsaNet(arch, np.random.default_rng(seed))


def forward(net: SalsaNet, batch: np.ndarray, mode: Mode = Mode.INFER, rng=None) -> np.ndarray:
    return net.forward(batch, mode, rng)
