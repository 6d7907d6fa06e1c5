"""Pixel-wise contextual attention: global and local PiCANets.

Global form: a ReNet (row biLSTM then column biLSTM) gives every pixel a
view of the whole map, a 1x1 conv maps it to one logit per context anchor,
BN and a channel softmax turn the logits into per-pixel weights, and the
attended feature is the weighted sum of the features at the anchors.  The
anchors form an ``A_w x A_h`` grid with spacing ``dilation``.

Local form: a dilated conv stack gives every pixel a view of its
neighbourhood, a 1x1 conv + BN + softmax produce ``W_bar * H_bar`` weights,
and the attended feature is the weighted sum over the dilated window
centred at the pixel (zero padding outside the map).

Attention index ``i`` enumerates the grid row-major: ``i = row * A_w + col``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigurationError
from .layers import DECODER, BatchNorm2d, BiLSTM, Conv2d, ParamRegistry
from .tensor import Tensor, note_branch, record1


@dataclass(frozen=True)
class GlobalPiCANetConfig:
    renet_hidden: int = 32
    attn_grid: tuple[int, int] = (6, 6)
    dilation: int = 3
    use_bn_before_softmax: bool = True
    renet_passes: int = 1

    def __post_init__(self):
        if self.dilation < 1 or min(self.attn_grid) < 1 or self.renet_hidden < 1 \
                or self.renet_passes < 1:
            raise ConfigurationError(f"invalid global PiCANet config {self}")

    @property
    def num_weights(self) -> int:
        return self.attn_grid[0] * self.attn_grid[1]


@dataclass(frozen=True)
class LocalPiCANetConfig:
    context_kernel: int = 7
    context_dilation: int = 2
    context_channels: int = 16
    attn_grid: tuple[int, int] = (7, 7)
    attend_dilation: int = 2
    use_bn_before_softmax: bool = True

    def __post_init__(self):
        if self.attn_grid[0] % 2 == 0 or self.attn_grid[1] % 2 == 0:
            raise ConfigurationError(f"local attention grid must be odd, got {self.attn_grid}")
        if self.context_kernel % 2 == 0:
            raise ConfigurationError("local context kernel must be odd")
        if min(self.context_dilation, self.attend_dilation, self.context_channels) < 1:
            raise ConfigurationError(f"invalid local PiCANet config {self}")

    @property
    def num_weights(self) -> int:
        return self.attn_grid[0] * self.attn_grid[1]


@dataclass
class AttentionField:
    """Per-pixel attention weights, N x D x H x W, each pixel summing to 1."""

    weights: Tensor
    grid: tuple[int, int]
    dilation: int
    kind: str
    positions: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.shape[1] != self.grid[0] * self.grid[1]:
            raise ConfigurationError(
                f"attention has {self.weights.shape[1]} channels for grid {self.grid}")

    def at(self, n: int, row: int, col: int) -> np.ndarray:
        """Weights of one pixel reshaped to its (A_h, A_w) grid."""
        w = self.weights.data[n, :, row, col]
        return w.reshape(self.grid[1], self.grid[0])

    @property
    def footprint(self) -> tuple[int, int]:
        """(height, width) of the sampled context region."""
        return ((self.grid[1] - 1) * self.dilation + 1, (self.grid[0] - 1) * self.dilation + 1)


def _axis_positions(extent: int, count: int, d: int) -> np.ndarray:
    span = (count - 1) * d + 1
    offset = (extent - span) // 2
    return offset + d * np.arange(count)


def attention_positions(width: int, height: int, grid: tuple[int, int], d: int) -> np.ndarray:
    """Anchor coordinates (row, col) of the global attention grid, row-major.

    The grid is centred on the map; anchors may fall outside the map when
    the span exceeds it, in which case they contribute zero features.
    """
    aw, ah = grid
    if aw < 1 or ah < 1 or d < 1:
        raise ConfigurationError(f"invalid grid {grid} / dilation {d}")
    rows = _axis_positions(height, ah, d)
    cols = _axis_positions(width, aw, d)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)


def _gather_anchors(fd: np.ndarray, positions: np.ndarray):
    N, C, H, W = fd.shape
    rows, cols = positions[:, 0], positions[:, 1]
    valid = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    feats = np.zeros((N, C, len(positions)), dtype=fd.dtype)
    feats[:, :, valid] = fd[:, :, rows[valid], cols[valid]]
    return feats, valid, rows[valid], cols[valid]


def global_attend(features: Tensor, attn: Tensor, positions: np.ndarray) -> Tensor:
    """out[n, :, h, w] = sum_i attn[n, i, h, w] * features[n, :, row_i, col_i]."""
    N, C, H, W = features.shape
    D = attn.shape[1]
    if D != len(positions):
        raise ConfigurationError(f"attention has {D} weights but {len(positions)} anchors")
    if attn.shape[0] != N or attn.shape[2:] != (H, W):
        raise ConfigurationError(f"attention {attn.shape} does not match features {features.shape}")
    anchors, valid, rv, cv = _gather_anchors(features.data, positions)
    a3 = attn.data.reshape(N, D, H * W)
    out = np.matmul(anchors, a3).reshape(N, C, H, W)

    def bw(g):
        g3 = g.reshape(N, C, H * W)
        gf = ga = None
        if features.requires_grad:
            g_anchor = np.matmul(g3, a3.transpose(0, 2, 1))
            gf = np.zeros((N, C, H, W), dtype=g.dtype)
            gf[:, :, rv, cv] = g_anchor[:, :, valid]
        if attn.requires_grad:
            ga = np.matmul(anchors.transpose(0, 2, 1), g3).reshape(N, D, H, W)
        return [gf, ga]

    return record1("global_attend", [features, attn], out, bw)


def local_offsets(grid: tuple[int, int], d: int):
    gw, gh = grid
    for a in range(gh):
        for b in range(gw):
            yield (a - (gh - 1) // 2) * d, (b - (gw - 1) // 2) * d


def local_attend(features: Tensor, attn: Tensor, grid: tuple[int, int], d: int) -> Tensor:
    """Weighted sum over the dilated ``grid`` window centred at each pixel."""
    gw, gh = grid
    if gw % 2 == 0 or gh % 2 == 0:
        raise ConfigurationError(f"local attention grid must be odd, got {grid}")
    N, C, H, W = features.shape
    if attn.shape != (N, gw * gh, H, W):
        raise ConfigurationError(f"attention {attn.shape} does not match grid {grid} and "
                                 f"features {features.shape}")
    ph, pw = (gh - 1) // 2 * d, (gw - 1) // 2 * d
    fp = np.pad(features.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ad = attn.data
    out = np.zeros((N, C, H, W), dtype=np.result_type(features.dtype, attn.dtype))
    offsets = list(local_offsets(grid, d))
    for k, (dy, dx) in enumerate(offsets):
        out += ad[:, k:k + 1] * fp[:, :, ph + dy:ph + dy + H, pw + dx:pw + dx + W]

    def bw(g):
        gfp = np.zeros_like(fp) if features.requires_grad else None
        ga = np.empty_like(ad) if attn.requires_grad else None
        for k, (dy, dx) in enumerate(offsets):
            win = (slice(None), slice(None), slice(ph + dy, ph + dy + H), slice(pw + dx, pw + dx + W))
            if ga is not None:
                ga[:, k] = (g * fp[win]).sum(axis=1)
            if gfp is not None:
                gfp[win] += g * ad[:, k:k + 1]
        gf = None if gfp is None else gfp[:, :, ph:ph + H, pw:pw + W]
        return [gf, ga]

    return record1("local_attend", [features, attn], out, bw)


class ReNet:
    """Alternating horizontal / vertical biLSTM sweeps."""

    def __init__(self, reg: ParamRegistry, name: str, channels: int, hidden: int,
                 passes: int = 1, group: str = DECODER,
                 rng: np.random.Generator | None = None) -> None:
        self.hidden = hidden
        self.sweeps = []
        cin = channels
        for p in range(passes):
            horiz = BiLSTM(reg, f"{name}.pass{p}.horizontal", cin, hidden, group, rng)
            vert = BiLSTM(reg, f"{name}.pass{p}.vertical", 2 * hidden, hidden, group, rng)
            self.sweeps.append((horiz, vert))
            cin = 2 * hidden

    def __call__(self, x: Tensor) -> Tensor:
        return renet_sweep(x, self.sweeps)


def renet_sweep(x: Tensor, sweeps) -> Tensor:
    """N x C x H x W -> N x 2*hidden x H x W.

    Each sweep runs a biLSTM along every row (sequence over columns), then
    a biLSTM along every column of the result (sequence over rows).
    """
    N, _, H, W = x.shape
    for horiz, vert in sweeps:
        c = x.shape[1]
        seq = F.reshape(F.transpose(x, (3, 0, 2, 1)), (W, N * H, c))
        out = horiz.scan(seq)
        two_h = out.shape[-1]
        x = F.transpose(F.reshape(out, (W, N, H, two_h)), (1, 3, 2, 0))
        seq = F.reshape(F.transpose(x, (2, 0, 3, 1)), (H, N * W, two_h))
        out = vert.scan(seq)
        x = F.transpose(F.reshape(out, (H, N, W, two_h)), (1, 3, 0, 2))
    return x


class GlobalPiCANet:
    def __init__(self, reg: ParamRegistry, name: str, channels: int, cfg: GlobalPiCANetConfig,
                 rng: np.random.Generator | None = None) -> None:
        self.cfg = cfg
        self.renet = ReNet(reg, f"{name}.renet", channels, cfg.renet_hidden,
                           cfg.renet_passes, DECODER, rng)
        self.logits = Conv2d(reg, f"{name}.logits", 2 * cfg.renet_hidden, cfg.num_weights, 1,
                             DECODER, rng)
        self.bn = BatchNorm2d(reg, f"{name}.bn", cfg.num_weights) if cfg.use_bn_before_softmax \
            else None

    def __call__(self, x: Tensor, training: bool = False) -> tuple[Tensor, AttentionField]:
        return global_picanet_forward(x, self.cfg, self, training)


class LocalPiCANet:
    def __init__(self, reg: ParamRegistry, name: str, channels: int, cfg: LocalPiCANetConfig,
                 rng: np.random.Generator | None = None) -> None:
        self.cfg = cfg
        self.context = Conv2d(reg, f"{name}.context", channels, cfg.context_channels,
                              cfg.context_kernel, DECODER, rng, dilation=cfg.context_dilation)
        self.logits = Conv2d(reg, f"{name}.logits", cfg.context_channels, cfg.num_weights, 1,
                             DECODER, rng)
        self.bn = BatchNorm2d(reg, f"{name}.bn", cfg.num_weights) if cfg.use_bn_before_softmax \
            else None

    def __call__(self, x: Tensor, training: bool = False) -> tuple[Tensor, AttentionField]:
        return local_picanet_forward(x, self.cfg, self, training)


def check_global_geometry(height: int, width: int, cfg: GlobalPiCANetConfig) -> None:
    """Reject grids whose centred span leaves the map by more than one spacing."""
    for extent, count in ((width, cfg.attn_grid[0]), (height, cfg.attn_grid[1])):
        span = (count - 1) * cfg.dilation + 1
        if span > extent + 2 * cfg.dilation:
            raise ConfigurationError(
                f"global attention span {span} too large for a {height}x{width} map")


def global_picanet_forward(x: Tensor, cfg: GlobalPiCANetConfig, params: GlobalPiCANet,
                           training: bool = False) -> tuple[Tensor, AttentionField]:
    _, _, H, W = x.shape
    check_global_geometry(H, W, cfg)
    ctx = params.renet(x)
    logits = params.logits(ctx)
    if params.bn is not None:
        logits = params.bn(logits, training)
    weights = F.channel_softmax(logits)
    positions = attention_positions(W, H, cfg.attn_grid, cfg.dilation)
    attended = global_attend(x, weights, positions)
    return attended, AttentionField(weights, cfg.attn_grid, cfg.dilation, "global", positions)


def local_picanet_forward(x: Tensor, cfg: LocalPiCANetConfig, params: LocalPiCANet,
                          training: bool = False) -> tuple[Tensor, AttentionField]:
    ctx = F.relu(params.context(x))
    logits = params.logits(ctx)
    if params.bn is not None:
        logits = params.bn(logits, training)
    weights = F.channel_softmax(logits)
    attended = local_attend(x, weights, cfg.attn_grid, cfg.attend_dilation)
    return attended, AttentionField(weights, cfg.attn_grid, cfg.attend_dilation, "local")


def pooled_context_baseline(x: Tensor, mode: str, footprint) -> Tensor:
    """Max or average pooling over the context a PiCANet would attend.

    ``footprint`` is ``"global"`` (every pixel), an ``(rows, cols)`` anchor
    array from :func:`attention_positions`, or a local ``(W_bar, H_bar, d)``
    window.  Positions outside the map count as zero features.
    """
    if mode not in ("max", "avg"):
        raise ConfigurationError(f"pooling mode must be 'max' or 'avg', got {mode!r}")
    N, C, H, W = x.shape
    if isinstance(footprint, str):
        if footprint != "global":
            raise ConfigurationError(f"unknown footprint {footprint!r}")
        footprint = attention_positions(W, H, (W, H), 1)
    footprint = np.asarray(footprint)
    if footprint.ndim == 2:
        return _global_pool(x, mode, footprint)
    gw, gh, d = (int(v) for v in footprint)
    return _local_pool(x, mode, (gw, gh), d)


def _global_pool(x: Tensor, mode: str, positions: np.ndarray) -> Tensor:
    N, C, H, W = x.shape
    anchors, valid, rv, cv = _gather_anchors(x.data, positions)
    D = len(positions)
    if mode == "avg":
        pooled = anchors.mean(axis=2)
    else:
        arg = anchors.argmax(axis=2)
        note_branch(arg)
        pooled = np.take_along_axis(anchors, arg[..., None], axis=2)[..., 0]
    out = np.broadcast_to(pooled[:, :, None, None], (N, C, H, W)).copy()

    def bw(g):
        gp = g.sum(axis=(2, 3))
        if mode == "avg":
            g_anchor = np.broadcast_to((gp / D)[..., None], (N, C, D))
        else:
            g_anchor = np.zeros((N, C, D), dtype=g.dtype)
            np.put_along_axis(g_anchor, arg[..., None], gp[..., None], axis=2)
        gx = np.zeros((N, C, H, W), dtype=g.dtype)
        gx[:, :, rv, cv] = g_anchor[:, :, valid]
        return [gx]

    return record1(f"global_{mode}_pool", [x], out, bw)


def _local_pool(x: Tensor, mode: str, grid: tuple[int, int], d: int) -> Tensor:
    gw, gh = grid
    if gw % 2 == 0 or gh % 2 == 0:
        raise ConfigurationError(f"local pooling grid must be odd, got {grid}")
    N, C, H, W = x.shape
    ph, pw = (gh - 1) // 2 * d, (gw - 1) // 2 * d
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    offsets = list(local_offsets(grid, d))
    taps = np.stack([xp[:, :, ph + dy:ph + dy + H, pw + dx:pw + dx + W] for dy, dx in offsets])
    if mode == "avg":
        out = taps.mean(axis=0)
        arg = None
    else:
        arg = taps.argmax(axis=0)
        note_branch(arg)
        out = np.take_along_axis(taps, arg[None], axis=0)[0]

    def bw(g):
        gxp = np.zeros_like(xp)
        for k, (dy, dx) in enumerate(offsets):
            gk = g / len(offsets) if mode == "avg" else g * (arg == k)
            gxp[:, :, ph + dy:ph + dy + H, pw + dx:pw + dx + W] += gk
        return [gxp[:, :, ph:ph + H, pw:pw + W]]

    return record1(f"local_{mode}_pool", [x], out, bw)
