"""Toy-scale DeepLabV3+ style encoder-decoder with two sigmoid heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from math import prod

import numpy as np

from .layers import (
    ASPP,
    ConvNormReLU,
    Conv2d,
    Module,
    ResidualBlock,
    SegNetError,
    ShapeMismatch,
    bilinear_upsample,
    bilinear_upsample_backward,
)


@dataclass
class ModelConfig:
    input_channels: int = 1
    stem_width: int = 16
    stem_stride: int = 1
    stage_widths: tuple = (16, 32, 64)
    stage_blocks: tuple = (2, 2, 2)
    stage_strides: tuple = (2, 2, 2)
    output_stride: int = 8
    low_level_stage: int = 0
    low_level_width: int = 8
    aspp_rates: tuple = (1, 2, 4)
    aspp_width: int = 32
    decoder_width: int = 32
    groups: int = 4
    output_channels: int = 2

    def __post_init__(self):
        for name in ("stage_widths", "stage_blocks", "stage_strides", "aspp_rates"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.output_channels != 2:
            raise SegNetError("output_channels must be 2 (lung, infection)")
        if not self.aspp_rates or any(b <= a for a, b in zip(self.aspp_rates, self.aspp_rates[1:])):
            raise SegNetError("aspp_rates must be non-empty and strictly increasing")
        if not len(self.stage_widths) == len(self.stage_blocks) == len(self.stage_strides) >= 1:
            raise SegNetError("stage widths, blocks and strides must have equal non-zero length")
        if any(b < 1 for b in self.stage_blocks):
            raise SegNetError("every stage needs at least one block")
        if self.stem_stride * prod(self.stage_strides) != self.output_stride:
            raise SegNetError(
                f"output_stride {self.output_stride} != stem stride x stage strides "
                f"({self.stem_stride * prod(self.stage_strides)})")
        if not 0 <= self.low_level_stage < len(self.stage_widths):
            raise SegNetError("low_level_stage must index a residual stage")
        if self.low_level_stride > self.output_stride or self.output_stride % self.low_level_stride:
            raise SegNetError("low-level stride must divide the output stride")

    @property
    def low_level_stride(self) -> int:
        return self.stem_stride * prod(self.stage_strides[:self.low_level_stage + 1])

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """A minimal configuration for gradient checks and fast tests."""
    base = dict(stem_width=4, stage_widths=(4, 8), stage_blocks=(1, 1), stage_strides=(2, 2),
                output_stride=4, low_level_stage=0, low_level_width=4, aspp_rates=(1, 2),
                aspp_width=4, decoder_width=4)
    base.update(overrides)
    return ModelConfig(**base)


class DeepLabV3Plus(Module):
    """Stem and residual stages, ASPP, low-level fusion decoder, 1x1 head.

    Output channel 0 is the lung logit, channel 1 the infection logit.
    """

    def __init__(self, cfg: ModelConfig, name: str = "net"):
        super().__init__(name)
        self.cfg = cfg
        g = cfg.groups
        self.stem = ConvNormReLU(f"{name}.stem", cfg.input_channels, cfg.stem_width, 3,
                                 stride=cfg.stem_stride, groups=g)
        self.stages = []
        c_in = cfg.stem_width
        for s, (width, blocks, stride) in enumerate(zip(cfg.stage_widths, cfg.stage_blocks, cfg.stage_strides)):
            stage = []
            for b in range(blocks):
                stage.append(ResidualBlock(f"{name}.stage{s}.block{b}", c_in, width,
                                           stride if b == 0 else 1, groups=g))
                c_in = width
            self.stages.append(stage)
        self.aspp = ASPP(f"{name}.aspp", c_in, cfg.aspp_width, cfg.aspp_rates, groups=g)
        self.low_proj = ConvNormReLU(f"{name}.low_proj", cfg.stage_widths[cfg.low_level_stage],
                                     cfg.low_level_width, 1, groups=g)
        self.dec1 = ConvNormReLU(f"{name}.dec1", cfg.aspp_width + cfg.low_level_width,
                                 cfg.decoder_width, 3, groups=g)
        self.dec2 = ConvNormReLU(f"{name}.dec2", cfg.decoder_width, cfg.decoder_width, 3, groups=g)
        self.head = Conv2d(f"{name}.head", cfg.decoder_width, cfg.output_channels, 1, padding=0)
        self.up_aspp = cfg.output_stride // cfg.low_level_stride
        self.up_out = cfg.low_level_stride

    def modules(self):
        yield self.stem
        for stage in self.stages:
            yield from stage
        yield from (self.aspp, self.low_proj, self.dec1, self.dec2, self.head)

    def parameters(self) -> dict:
        p = {}
        for m in self.modules():
            p.update(m.parameters())
        return p

    def init(self, seed: int) -> "DeepLabV3Plus":
        """He-normal conv weights, zero biases, unit/zero norm affine."""
        rng = np.random.default_rng(seed)
        for name, arr in self.parameters().items():
            if name.endswith(".weight"):
                fan_in = arr.shape[1] * arr.shape[2] * arr.shape[3]
                arr[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=arr.shape)
            elif name.endswith(".gamma"):
                arr[...] = 1.0
            else:
                arr[...] = 0.0
        return self

    def load(self, params: dict) -> "DeepLabV3Plus":
        own = self.parameters()
        missing = set(own) - set(params)
        if missing:
            raise SegNetError(f"missing parameters: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = np.asarray(params[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ShapeMismatch(f"{name}: expected {arr.shape}, got {src.shape}")
            arr[...] = src
        return self

    def forward(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise ShapeMismatch(f"expected (N, {cfg.input_channels}, H, W) input, got {x.shape}")
        if x.shape[2] % cfg.output_stride or x.shape[3] % cfg.output_stride:
            raise ShapeMismatch(f"H and W must be multiples of the output stride {cfg.output_stride}")
        h, c_stem = self.stem.forward(x)
        stage_caches = []
        low = None
        for s, stage in enumerate(self.stages):
            caches = []
            for block in stage:
                h, c = block.forward(h)
                caches.append(c)
            stage_caches.append(caches)
            if s == cfg.low_level_stage:
                low = h
        a, c_aspp = self.aspp.forward(h)
        up = bilinear_upsample(a, self.up_aspp)
        lp, c_low = self.low_proj.forward(low)
        cat = np.concatenate([up, lp], axis=1)
        d1, c_d1 = self.dec1.forward(cat)
        d2, c_d2 = self.dec2.forward(d1)
        full = bilinear_upsample(d2, self.up_out)
        logits, c_head = self.head.forward(full)
        return logits, (c_stem, stage_caches, c_aspp, c_low, c_d1, c_d2, c_head)

    def backward(self, dlogits, cache, grads):
        c_stem, stage_caches, c_aspp, c_low, c_d1, c_d2, c_head = cache
        cfg = self.cfg
        dfull = self.head.backward(dlogits, c_head, grads)
        dd2 = bilinear_upsample_backward(dfull, self.up_out)
        dd1 = self.dec2.backward(dd2, c_d2, grads)
        dcat = self.dec1.backward(dd1, c_d1, grads)
        dup = dcat[:, :cfg.aspp_width]
        dlp = dcat[:, cfg.aspp_width:]
        dlow = self.low_proj.backward(dlp, c_low, grads)
        dh = self.aspp.backward(bilinear_upsample_backward(dup, self.up_aspp), c_aspp, grads)
        for s in reversed(range(len(self.stages))):
            if s == cfg.low_level_stage:
                dh = dh + dlow
            for block, c in zip(reversed(self.stages[s]), reversed(stage_caches[s])):
                dh = block.backward(dh, c, grads)
        return self.stem.backward(dh, c_stem, grads)

    def predict(self, x) -> np.ndarray:
        """Binary masks (N, 2, H, W): sigmoid probability > 0.5."""
        logits, _ = self.forward(x)
        return (logits > 0).astype(np.uint8)


def build_model(cfg: ModelConfig, seed: int = 0) -> DeepLabV3Plus:
    return DeepLabV3Plus(cfg).init(seed)


def model_forward(cfg: ModelConfig, params: dict, batch: np.ndarray) -> np.ndarray:
    return DeepLabV3Plus(cfg).load(params).forward(batch)[0]
