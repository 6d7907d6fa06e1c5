"""U-Net saliency detector with PiCANets embedded in the decoder.

The encoder is a small FCN of five conv blocks (two 3x3 convs each).  The
first blocks downsample with 2x2 max pooling; the later ones keep their
resolution and dilate their kernels instead.  ``En^i`` is the
pre-activation output of block ``i``.

Decoding modules run from the deepest block to the shallowest.  Module
``i`` fuses BN+ReLU(``En^i``) with the (upsampled, if needed) previous
decoding feature into ``F^i``, optionally enhances it with a global or
local PiCANet (or a pooling baseline), fuses again into ``Dec^i`` and emits
a sigmoid side output used for deep supervision.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import functional as F
from .attention import (AttentionField, GlobalPiCANet, GlobalPiCANetConfig, LocalPiCANet,
                        LocalPiCANetConfig, attention_positions, check_global_geometry,
                        pooled_context_baseline)
from .errors import ConfigurationError, DataError
from .layers import DECODER, ENCODER, BatchNorm2d, Conv2d, ParamRegistry
from .tensor import Tensor

PLACEMENT_CODES = "GLN"
POOLING_SUFFIXES = {"MP": "max", "AP": "avg"}
_PLACEMENT_RE = re.compile(r"^([GLN]+)(?:-(MP|AP))?$")


@dataclass(frozen=True)
class EncoderSpec:
    channels: tuple[int, ...] = (16, 32, 64, 64, 128)
    downsample: tuple[bool, ...] = (True, True, False, False, False)
    dilation: tuple[int, ...] = (1, 1, 1, 2, 2)
    convs_per_block: int = 2

    def __post_init__(self):
        n = len(self.channels)
        if len(self.downsample) != n or len(self.dilation) != n:
            raise ConfigurationError("encoder channel/downsample/dilation tables differ in length")
        if min(self.dilation) < 1 or min(self.channels) < 1 or self.convs_per_block < 1:
            raise ConfigurationError(f"invalid encoder spec {self}")

    @property
    def overall_stride(self) -> int:
        # pooling after the last block would not feed any skip, so it is ignored
        return 2 ** sum(self.downsample[:-1])

    def block_strides(self) -> list[int]:
        """Cumulative stride of each block's output relative to the input."""
        out, s = [], 1
        for i in range(len(self.channels)):
            out.append(s)
            if self.downsample[i]:
                s *= 2
        return out


@dataclass(frozen=True)
class DecoderModuleSpec:
    index: int
    placement: str
    channels: int
    out_channels: int
    loss_weight: float

    def __post_init__(self):
        if self.placement not in PLACEMENT_CODES:
            raise ConfigurationError(f"placement must be one of G/L/N, got {self.placement!r}")
        if self.loss_weight <= 0:
            raise ConfigurationError("loss weights must be positive")


def parse_placement(text: str) -> tuple[str, str | None]:
    """``"GGLLN"`` -> ("GGLLN", None); ``"GGLLN-MP"`` -> ("GGLLN", "max")."""
    m = _PLACEMENT_RE.match(text)
    if not m:
        raise ConfigurationError(
            f"bad placement string {text!r}; expected e.g. 'GGLLN' or 'GGLLN-AP'")
    return m.group(1), POOLING_SUFFIXES.get(m.group(2)) if m.group(2) else None


def format_placement(codes: str, pooling: str | None) -> str:
    if pooling is None:
        return codes
    suffix = {v: k for k, v in POOLING_SUFFIXES.items()}[pooling]
    return f"{codes}-{suffix}"


@dataclass(frozen=True)
class NetworkSpec:
    """Encoder table, placement string (deepest module first) and side-loss weights."""

    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    placement: str = "GGLLN"
    loss_weights: tuple[float, ...] = (0.5, 0.5, 0.8, 0.8, 1.0)
    input_size: int = 64
    global_cfg: GlobalPiCANetConfig = field(default_factory=GlobalPiCANetConfig)
    local_cfg: LocalPiCANetConfig = field(default_factory=LocalPiCANetConfig)

    def __post_init__(self):
        codes, _ = parse_placement(self.placement)
        n = len(self.encoder.channels)
        if len(codes) != n:
            raise ConfigurationError(
                f"placement {self.placement!r} has {len(codes)} modules, encoder has {n} blocks")
        if len(self.loss_weights) != n:
            raise ConfigurationError(f"need {n} loss weights, got {len(self.loss_weights)}")
        if self.input_size % self.encoder.overall_stride:
            raise ConfigurationError(
                f"input size {self.input_size} not divisible by stride {self.encoder.overall_stride}")
        for spec in self.decoders():
            if spec.placement == "G":
                size = self.input_size // self.encoder.block_strides()[spec.index - 1]
                check_global_geometry(size, size, self.global_cfg)

    @property
    def codes(self) -> str:
        return parse_placement(self.placement)[0]

    @property
    def pooling(self) -> str | None:
        return parse_placement(self.placement)[1]

    def with_placement(self, placement: str) -> "NetworkSpec":
        return replace(self, placement=placement)

    def decoders(self) -> list[DecoderModuleSpec]:
        """Decoding modules from the deepest (D^n) to the shallowest (D^1)."""
        ch = self.encoder.channels
        n = len(ch)
        codes = self.codes
        out = []
        for k in range(n):
            i = n - k
            nxt = ch[i - 2] if i >= 2 else ch[0]
            out.append(DecoderModuleSpec(i, codes[k], ch[i - 1], nxt, self.loss_weights[k]))
        return out

    def side_sizes(self) -> list[int]:
        strides = self.encoder.block_strides()
        return [self.input_size // strides[d.index - 1] for d in self.decoders()]


class Encoder:
    def __init__(self, reg: ParamRegistry, spec: EncoderSpec, rng: np.random.Generator,
                 in_channels: int = 3) -> None:
        self.spec = spec
        self.blocks: list[list[Conv2d]] = []
        cin = in_channels
        for b, (cout, dil) in enumerate(zip(spec.channels, spec.dilation), start=1):
            convs = []
            for j in range(1, spec.convs_per_block + 1):
                convs.append(Conv2d(reg, f"encoder.block{b}.conv{j}", cin, cout, 3, ENCODER, rng,
                                    dilation=dil))
                cin = cout
            self.blocks.append(convs)

    def __call__(self, image: Tensor) -> tuple[list[Tensor], Tensor]:
        """Returns ([En^1 .. En^n], final ReLU feature map)."""
        if image.shape[2] % self.spec.overall_stride or image.shape[3] % self.spec.overall_stride:
            raise ConfigurationError(
                f"input {image.shape[2:]} not divisible by encoder stride {self.spec.overall_stride}")
        feats = []
        x = image
        last = len(self.blocks) - 1
        for b, convs in enumerate(self.blocks):
            for j, conv in enumerate(convs):
                x = conv(x)
                if j < len(convs) - 1:
                    x = F.relu(x)
            feats.append(x)
            x = F.relu(x)
            if self.spec.downsample[b] and b < last:
                x = F.max_pool2d(x, 2)
        return feats, x


class DecoderModule:
    def __init__(self, reg: ParamRegistry, spec: DecoderModuleSpec, prev_channels: int,
                 net: NetworkSpec, rng: np.random.Generator) -> None:
        self.spec = spec
        self.pooling = net.pooling
        name = f"decoder.d{spec.index}"
        c = spec.channels
        self.en_bn = BatchNorm2d(reg, f"{name}.en_bn", c)
        self.fuse = Conv2d(reg, f"{name}.fuse", c + prev_channels, c, 1, DECODER, rng)
        self.picanet = None
        self.global_cfg, self.local_cfg = net.global_cfg, net.local_cfg
        if spec.placement == "G" and self.pooling is None:
            self.picanet = GlobalPiCANet(reg, f"{name}.global", c, net.global_cfg, rng)
        elif spec.placement == "L" and self.pooling is None:
            self.picanet = LocalPiCANet(reg, f"{name}.local", c, net.local_cfg, rng)
        attended = spec.placement != "N"
        self.out_conv = Conv2d(reg, f"{name}.out", 2 * c if attended else c, spec.out_channels, 1,
                               DECODER, rng)
        self.out_bn = BatchNorm2d(reg, f"{name}.out_bn", spec.out_channels)
        self.side = Conv2d(reg, f"{name}.side", spec.out_channels, 1, 1, DECODER, rng)

    def context(self, fused: Tensor, training: bool) -> tuple[Tensor | None, AttentionField | None]:
        code = self.spec.placement
        if code == "N":
            return None, None
        if self.picanet is not None:
            return self.picanet(fused, training)
        _, _, H, W = fused.shape
        if code == "G":
            cfg = self.global_cfg
            footprint = attention_positions(W, H, cfg.attn_grid, cfg.dilation)
        else:
            cfg = self.local_cfg
            footprint = (cfg.attn_grid[0], cfg.attn_grid[1], cfg.attend_dilation)
        return pooled_context_baseline(fused, self.pooling, footprint), None

    def __call__(self, en: Tensor, dec_prev: Tensor, training: bool = False):
        """Returns (Dec^i, side map, attention field or None)."""
        h, w = en.shape[2:]
        ph, pw = dec_prev.shape[2:]
        if (ph, pw) == (h // 2, w // 2) and h % 2 == 0 and w % 2 == 0:
            dec_prev = F.bilinear_upsample2x(dec_prev)
        elif (ph, pw) != (h, w):
            raise ConfigurationError(
                f"D^{self.spec.index}: previous decoding map {ph}x{pw} incompatible with {h}x{w}")
        en = F.relu(self.en_bn(en, training))
        fused = F.relu(self.fuse(F.concat_channels([en, dec_prev])))
        attended, field_ = self.context(fused, training)
        x = fused if attended is None else F.concat_channels([fused, attended])
        dec = F.relu(self.out_bn(self.out_conv(x), training))
        side = F.sigmoid(self.side(dec))
        return dec, side, field_


@dataclass
class ForwardResult:
    side_maps: list[Tensor]
    attention: dict[int, AttentionField]

    @property
    def saliency(self) -> Tensor:
        return self.side_maps[-1]


class SaliencyNet:
    """Encoder + decoding modules; parameters live in ``self.registry``."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> None:
        self.spec = spec
        self.seed = seed
        self.registry = ParamRegistry(dtype)
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.registry, spec.encoder, rng)
        self.decoders: list[DecoderModule] = []
        prev = spec.encoder.channels[-1]
        for dspec in spec.decoders():
            self.decoders.append(DecoderModule(self.registry, dspec, prev, spec, rng))
            prev = dspec.out_channels

    def forward(self, image: Tensor, training: bool = False) -> ForwardResult:
        if image.dtype != self.registry.dtype:
            image = Tensor(image.data.astype(self.registry.dtype))
        feats, dec = self.encoder(image)
        sides, fields = [], {}
        for module in self.decoders:
            dec, side, field_ = module(feats[module.spec.index - 1], dec, training)
            sides.append(side)
            if field_ is not None:
                fields[module.spec.index] = field_
        return ForwardResult(sides, fields)

    __call__ = forward

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode saliency maps (N x 1 x S x S) without recording a tape."""
        from .tensor import no_grad

        with no_grad():
            return self.forward(Tensor(images), training=False).saliency.data


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of an N x 1 x S x S array (pixel-centre sampling)."""
    s = mask.shape[-1]
    if s == size:
        return mask
    idx = np.minimum(((np.arange(size) + 0.5) * s / size).astype(int), s - 1)
    return mask[..., idx[:, None], idx[None, :]]


def deep_supervised_loss(side_maps: list[Tensor], gt, weights) -> Tensor:
    """sum_i w_i * mean BCE(side_i, gt resized to side_i's resolution)."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if gt.min() < 0 or gt.max() > 1:
        raise DataError("ground truth values must lie in [0, 1]")
    if len(side_maps) != len(weights):
        raise ConfigurationError(f"{len(side_maps)} side maps but {len(weights)} loss weights")
    total = None
    for side, w in zip(side_maps, weights):
        target = resize_nearest(gt, side.shape[-1]).astype(side.dtype)
        term = F.binary_cross_entropy(side, target) * float(w)
        total = term if total is None else total + term
    return total
