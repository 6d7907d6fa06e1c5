"""Float64 finite-difference certification of every differentiable building block.

Each row builds random inputs for one operator (or the whole network),
projects its output onto a fixed random tensor to get a scalar loss and
compares backward() against central differences.  Composite rows run BN in
eval mode so the loss is a fixed function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .attention import (GlobalPiCANet, GlobalPiCANetConfig, LocalPiCANet, LocalPiCANetConfig,
                        ReNet, attention_positions, global_attend, global_picanet_forward,
                        local_attend, local_picanet_forward, renet_sweep)
from .errors import ConfigurationError
from .gradcheck import DEFAULT_STEP, PASS_THRESHOLD, GradcheckResult, gradient_check
from .layers import DECODER, ParamRegistry
from .network import EncoderSpec, NetworkSpec, SaliencyNet, deep_supervised_loss
from .tensor import Tensor

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
NETWORK_SAMPLES = 60


@dataclass
class GradcheckRow:
    op: str
    max_rel_error: float
    seeds: tuple[int, ...]
    checked: int = 0
    kinked: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.checked > 0 and self.max_rel_error <= PASS_THRESHOLD)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=np.float64)


def _project(rng, out: Tensor) -> Callable[[Tensor], Tensor]:
    proj = rng.normal(size=out.shape)
    return lambda y: F.sum(F.mul(y, proj))


def _eval_mode_stats(reg: ParamRegistry, rng) -> None:
    # non-trivial running stats so eval-mode BN is not the identity
    for name, t in reg.items():
        if name.endswith("running_mean"):
            t.data = rng.normal(0.0, 0.2, size=t.shape)
        elif name.endswith("running_var"):
            t.data = rng.uniform(0.5, 1.5, size=t.shape)


def _case_conv2d(rng):
    x, w, b = _leaf(rng, 2, 3, 7, 7), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    fn = lambda: F.conv2d(x, w, b, stride=1, dilation=2, padding=2)
    return fn, [x, w, b]


def _case_batch_norm(rng):
    x, g, b = _leaf(rng, 3, 2, 3, 3), _leaf(rng, 2), _leaf(rng, 2)
    rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
    return (lambda: F.batch_norm(x, g, b, rm, rv, training=True)), [x, g, b]


def _case_softmax(rng):
    x = _leaf(rng, 2, 5, 3, 3)
    return (lambda: F.channel_softmax(x)), [x]


def _case_lstm_cell(rng):
    x, h, c = _leaf(rng, 2, 3), _leaf(rng, 2, 4), _leaf(rng, 2, 4)
    w_ih, w_hh, bias = _leaf(rng, 3, 16, scale=0.5), _leaf(rng, 4, 16, scale=0.5), _leaf(rng, 16)
    proj = rng.normal(size=(2, 2, 4))

    def fn():
        h2, c2 = F.lstm_cell(x, h, c, w_ih, w_hh, bias)
        return F.add(F.sum(F.mul(h2, proj[0])), F.sum(F.mul(c2, proj[1])))

    return fn, [x, h, c, w_ih, w_hh, bias], True


def _case_renet_sweep(rng):
    reg = ParamRegistry(np.float64)
    renet = ReNet(reg, "renet", 3, 2, passes=1, group=DECODER, rng=rng)
    x = _leaf(rng, 1, 3, 3, 4)
    return (lambda: renet_sweep(x, renet.sweeps)), [x] + reg.parameters()


def _case_global_attend(rng):
    feats = _leaf(rng, 2, 3, 5, 6)
    attn = Tensor(rng.uniform(0.0, 1.0, size=(2, 9, 5, 6)), requires_grad=True, dtype=np.float64)
    pos = attention_positions(6, 5, (3, 3), 3)  # corner anchors fall outside the map
    return (lambda: global_attend(feats, attn, pos)), [feats, attn]


def _case_local_attend(rng):
    feats = _leaf(rng, 2, 3, 5, 6)
    attn = Tensor(rng.uniform(0.0, 1.0, size=(2, 9, 5, 6)), requires_grad=True, dtype=np.float64)
    return (lambda: local_attend(feats, attn, (3, 3), 2)), [feats, attn]


def _case_global_picanet(rng):
    reg = ParamRegistry(np.float64)
    cfg = GlobalPiCANetConfig(renet_hidden=2, attn_grid=(2, 2), dilation=2)
    mod = GlobalPiCANet(reg, "g", 3, cfg, rng)
    _eval_mode_stats(reg, rng)
    x = _leaf(rng, 1, 3, 3, 4)
    return (lambda: global_picanet_forward(x, cfg, mod, training=False)[0]), [x] + reg.parameters()


def _case_local_picanet(rng):
    reg = ParamRegistry(np.float64)
    cfg = LocalPiCANetConfig(context_kernel=3, context_dilation=1, context_channels=3,
                             attn_grid=(3, 3), attend_dilation=2)
    mod = LocalPiCANet(reg, "l", 3, cfg, rng)
    _eval_mode_stats(reg, rng)
    x = _leaf(rng, 2, 3, 5, 5)
    return (lambda: local_picanet_forward(x, cfg, mod, training=False)[0]), [x] + reg.parameters()


def tiny_network_spec(placement: str = "GGLLN") -> NetworkSpec:
    """Scaled-down toy network (16 x 16 input) used for whole-network checks."""
    return NetworkSpec(
        encoder=EncoderSpec(channels=(3, 4, 4, 4, 5)),
        placement=placement,
        input_size=16,
        global_cfg=GlobalPiCANetConfig(renet_hidden=2, attn_grid=(2, 2), dilation=2),
        local_cfg=LocalPiCANetConfig(context_kernel=3, context_dilation=1, context_channels=3,
                                     attn_grid=(3, 3), attend_dilation=2),
    )


def _case_network(rng):
    seed = int(rng.integers(0, 2**31))
    net = SaliencyNet(tiny_network_spec(), seed=seed, dtype=np.float64)
    _eval_mode_stats(net.registry, rng)
    image = Tensor(rng.uniform(size=(2, 3, 16, 16)), requires_grad=True, dtype=np.float64)
    gt = (rng.uniform(size=(2, 1, 16, 16)) > 0.5).astype(np.float64)
    weights = net.spec.loss_weights

    def fn():
        return deep_supervised_loss(net.forward(image, training=False).side_maps, gt, weights)

    return fn, [image] + net.registry.parameters(), True, NETWORK_SAMPLES


CASES: dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "batch_norm": _case_batch_norm,
    "softmax": _case_softmax,
    "lstm_cell": _case_lstm_cell,
    "renet_sweep": _case_renet_sweep,
    "global_attend": _case_global_attend,
    "local_attend": _case_local_attend,
    "global_picanet_forward": _case_global_picanet,
    "local_picanet_forward": _case_local_picanet,
    "network": _case_network,
}


def check_case(name: str, seed: int, step: float = DEFAULT_STEP) -> GradcheckResult:
    rng = np.random.default_rng([seed, list(CASES).index(name)])
    built = CASES[name](rng)
    fn, inputs = built[0], built[1]
    scalar = len(built) > 2 and built[2]
    samples = built[3] if len(built) > 3 else None
    if scalar:
        loss_fn = fn
    else:
        project = _project(rng, fn())
        loss_fn = lambda: project(fn())
    return gradient_check(loss_fn, inputs, step, samples=samples, rng=rng)


def run_gradcheck(seeds=DEFAULT_SEEDS, ops=None) -> list[GradcheckRow]:
    rows = []
    for name in ops or CASES:
        if name not in CASES:
            raise ConfigurationError(f"unknown gradcheck op {name!r}")
        results = [check_case(name, s) for s in seeds]
        rows.append(GradcheckRow(name, max(r.max_rel_error for r in results), tuple(seeds),
                                 sum(r.checked for r in results), sum(r.kinked for r in results)))
    return rows


def format_table(rows: list[GradcheckRow]) -> str:
    width = max(len(r.op) for r in rows)
    lines = [f"{'op':<{width}}  {'max_rel_err':>12}  {'checked':>7}  {'kinked':>6}  result"]
    for r in rows:
        lines.append(f"{r.op:<{width}}  {r.max_rel_error:12.3e}  {r.checked:7d}  {r.kinked:6d}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
