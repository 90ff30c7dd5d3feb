"""Toy encoder plus the aligned FPN, bilinear FPN and lite decoders."""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .align import FAM, GATE_TARGETS, GDFAM, PPM
from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointNameError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .layers import NORMS, Conv2d, ConvNormAct, Module
from .tensor import Tensor
from .warp import bilinear_upsample

VARIANTS = ("sfnet", "sfnet_lite", "fpn_baseline")
FAM_POSITIONS = ("F3", "F4", "F5")
LITE_HIGH_LEVELS = ("F1", "F3")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "sfnet"
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    decoder_channels: int = 64
    num_classes: int = 6
    norm: str = "batchnorm"
    fam_positions: tuple = FAM_POSITIONS
    gdfam_gate_on: str = "high_res"
    lite_high_level: str = "F1"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "fam_positions", tuple(sorted(set(self.fam_positions))))
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.stage_channels) != 4:
            raise ConfigError("stage_channels needs exactly 4 entries")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError("stage_channels must be non-decreasing")
        if self.stem_channels < 1 or self.blocks_per_stage < 1:
            raise ConfigError("stem_channels and blocks_per_stage must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.decoder_channels < 4:
            raise ConfigError("decoder_channels must be at least 4")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}")
        bad = set(self.fam_positions) - set(FAM_POSITIONS)
        if bad:
            raise ConfigError(f"unknown fam_positions {sorted(bad)}; allowed {FAM_POSITIONS}")
        if self.gdfam_gate_on not in GATE_TARGETS:
            raise ConfigError(f"gdfam_gate_on must be one of {GATE_TARGETS}")
        if self.lite_high_level not in LITE_HIGH_LEVELS:
            raise ConfigError(f"lite_high_level must be one of {LITE_HIGH_LEVELS}")

    @property
    def effective_fam_positions(self) -> tuple:
        return () if self.variant == "fpn_baseline" else self.fam_positions


def _downsample(x: Tensor) -> Tensor:
    return T.adaptive_avg_pool(x, x.shape[2] // 2, x.shape[3] // 2)


class BasicBlock(Module):
    """Residual block. Down-sampling blocks average-pool 2x2 ahead of both paths."""

    def __init__(self, cin: int, cout: int, downsample: bool, norm: str):
        super().__init__()
        self.downsample = downsample
        self.conv1 = ConvNormAct(cin, cout, 3, norm)
        self.conv2 = ConvNormAct(cout, cout, 3, norm, act=False)
        self.shortcut = ConvNormAct(cin, cout, 1, norm, act=False) if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.downsample:
            x = _downsample(x)
        y = self.conv2(self.conv1(x))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.relu(T.add(y, skip))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stem = ConvNormAct(3, cfg.stem_channels, 3, cfg.norm)
        self.stages = []
        cin = cfg.stem_channels
        for i, cout in enumerate(cfg.stage_channels):
            blocks = [BasicBlock(cin, cout, downsample=i > 0, norm=cfg.norm)]
            blocks += [BasicBlock(cout, cout, False, cfg.norm) for _ in range(cfg.blocks_per_stage - 1)]
            self.stages.append(_Stage(blocks))
            cin = cout

    def __call__(self, image: Tensor) -> list:
        return encoder_forward(image, self)


class _Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


def encoder_forward(image: Tensor, weights: Encoder) -> list:
    """Pyramid ``[F1, F2, F3, F4]`` at strides 4, 8, 16, 32."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ConfigError(f"encoder expects N x 3 x H x W input, got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ConfigError(f"input extents {h}x{w} must be positive multiples of 32")
    x = weights.stem(image)
    x = T.adaptive_avg_pool(x, h // 4, w // 4)
    pyramid = []
    for stage in weights.stages:
        x = stage(x)
        pyramid.append(x)
    return pyramid


class AlignedFPNDecoder(Module):
    """Top-down FPN whose upsampling steps are optionally replaced by FAMs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.decoder_channels
        self.laterals = [ConvNormAct(c, d, 1, cfg.norm) for c in cfg.stage_channels[:3]]
        self.positions = cfg.effective_fam_positions
        # position "F{k}" warps the stride-2^k map into the next finer level
        for pos in self.positions:
            setattr(self, f"fam_{pos.lower()}", FAM(d, cfg.norm))
        self.fuse = ConvNormAct(4 * d, d, 3, cfg.norm)
        self.classifier = Conv2d(d, cfg.num_classes, 1)

    def __call__(self, pyramid: list, top: Tensor):
        laterals = [lat(f) for lat, f in zip(self.laterals, pyramid[:3])]
        refined = [None, None, None, top]
        flows, aligned = OrderedDict(), OrderedDict()
        for level in (2, 1, 0):
            coarse = refined[level + 1]
            pos = f"F{level + 3}"
            if pos in self.positions:
                warped, flow = getattr(self, f"fam_{pos.lower()}")(coarse, laterals[level])
                flows[pos] = flow
                aligned[pos] = warped
            else:
                warped = bilinear_upsample(coarse, 2)
            refined[level] = T.add(laterals[level], warped)
        merged = T.concat([refined[0]] + [bilinear_upsample(refined[i], 2 ** i) for i in (1, 2, 3)])
        return self.classifier(self.fuse(merged)), flows, aligned


class LiteDecoder(Module):
    """One GD-FAM between a high-res level and the PPM output, 1x1 classifier."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.decoder_channels
        self.level = 0 if cfg.lite_high_level == "F1" else 2
        self.lateral = ConvNormAct(cfg.stage_channels[self.level], d, 1, cfg.norm)
        self.gdfam = GDFAM(d, cfg.norm, cfg.gdfam_gate_on)
        self.classifier = Conv2d(2 * d, cfg.num_classes, 1)

    def __call__(self, pyramid: list, top: Tensor):
        high = self.lateral(pyramid[self.level])
        ratio = 2 ** (3 - self.level)
        fused, flow_high, flow_low, gate = self.gdfam(high, top, ratio)
        head_in = T.concat([fused, bilinear_upsample(top, ratio)])
        flows = OrderedDict([("gdfam_high", flow_high), ("gdfam_low", flow_low)])
        return self.classifier(head_in), flows, gate, fused


@dataclass
class ModelOutput:
    logits: Tensor
    aux_logits: Tensor
    flows: dict
    gate: Optional[Tensor] = None
    fused: Optional[Tensor] = None
    extras: dict = field(default_factory=dict)


class SegModel(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.ppm = PPM(cfg.stage_channels[3], cfg.decoder_channels, cfg.norm)
        if cfg.variant == "sfnet_lite":
            self.decoder = LiteDecoder(cfg)
        else:
            self.decoder = AlignedFPNDecoder(cfg)
        self.aux_head = Conv2d(cfg.decoder_channels, cfg.num_classes, 1)
        self.finalize(cfg.seed)

    def __call__(self, image: Tensor) -> ModelOutput:
        if self.cfg.variant == "sfnet_lite":
            return sfnet_lite_forward(image, self, self.cfg)
        return sfnet_forward(image, self, self.cfg)

    def forward_features(self, image: Tensor):
        pyramid = self.encoder(image)
        top = self.ppm(pyramid[3], clamp_bins=True)
        return pyramid, top


def _input_scale(image: Tensor, logits: Tensor) -> int:
    return image.shape[2] // logits.shape[2]


def sfnet_forward(image: Tensor, weights: SegModel, config: ModelConfig) -> ModelOutput:
    if config.variant not in ("sfnet", "fpn_baseline"):
        raise ConfigError(f"sfnet_forward needs variant sfnet or fpn_baseline, got {config.variant}")
    pyramid, top = weights.forward_features(image)
    logits, flows, aligned = weights.decoder(pyramid, top)
    logits = bilinear_upsample(logits, _input_scale(image, logits))
    return ModelOutput(logits, weights.aux_head(top), flows, extras={"aligned": aligned})


def sfnet_lite_forward(image: Tensor, weights: SegModel, config: ModelConfig) -> ModelOutput:
    if config.variant != "sfnet_lite":
        raise ConfigError(f"sfnet_lite_forward needs variant sfnet_lite, got {config.variant}")
    pyramid, top = weights.forward_features(image)
    logits, flows, gate, fused = weights.decoder(pyramid, top)
    logits = bilinear_upsample(logits, _input_scale(image, logits))
    return ModelOutput(logits, weights.aux_head(top), flows, gate=gate, fused=fused)


def build_model(cfg: ModelConfig) -> SegModel:
    return SegModel(cfg)


def count_params(model: Module) -> tuple:
    """Return ``(total, {top-level prefix: count})``."""
    groups: dict = OrderedDict()
    for name, p in model.named_parameters():
        key = name.split(".", 1)[0]
        groups[key] = groups.get(key, 0) + int(p.data.size)
    return sum(groups.values()), groups


def decoder_param_count(model: SegModel) -> int:
    """Everything downstream of the encoder: PPM, decoder and aux head."""
    total, groups = count_params(model)
    return total - groups.get("encoder", 0)


# ------------------------------------------------------------------- checkpoints

MAGIC = b"SFNC"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def state_entries(model: Module) -> "OrderedDict[str, np.ndarray]":
    """Parameters then batch-norm running statistics, in model order."""
    entries = OrderedDict((name, p.data) for name, p in model.named_parameters())
    for name, owner, attr in model.named_buffers():
        entries[name] = getattr(owner, attr)
    return entries


def save_checkpoint(model: Module, path) -> None:
    entries = state_entries(model)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.pos + size
        if end > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:end]
        self.pos = end
        return out


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    rd = _Reader(buf)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", rd.take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    (count,) = struct.unpack("<I", rd.take(4, "entry count"))
    entries = OrderedDict()
    for i in range(count):
        (nlen,) = struct.unpack("<I", rd.take(4, f"entry {i} name length"))
        name = rd.take(nlen, f"entry {i} name").decode("utf-8")
        code, ndim = struct.unpack("<BB", rd.take(2, f"entry {name} header"))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"entry {name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", rd.take(8 * ndim, f"entry {name} extents"))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = rd.take(nbytes, f"entry {name} values")
        entries[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    if rd.pos != len(buf):
        raise CheckpointTruncatedError(f"{len(buf) - rd.pos} trailing bytes after last entry")
    return entries


def load_checkpoint(path, model: Module) -> None:
    """Load bitwise into ``model``; nothing is mutated unless every entry fits."""
    entries = read_checkpoint(path)
    target = state_entries(model)
    missing, extra = set(target) - set(entries), set(entries) - set(target)
    if missing or extra:
        raise CheckpointNameError(
            f"checkpoint names differ: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, arr in entries.items():
        if arr.shape != target[name].shape:
            raise CheckpointShapeError(
                f"entry {name}: checkpoint shape {arr.shape} != model shape {target[name].shape}"
            )
    params = dict(model.named_parameters())
    for name, owner, attr in model.named_buffers():
        setattr(owner, attr, entries[name].astype(getattr(owner, attr).dtype, copy=True))
    for name, p in params.items():
        p.data = entries[name].astype(entries[name].dtype, copy=True)
        p.momentum_buf = np.zeros_like(p.data)
        p.grad = None


def with_variant(cfg: ModelConfig, variant: str, **changes) -> ModelConfig:
    return replace(cfg, variant=variant, **changes)
