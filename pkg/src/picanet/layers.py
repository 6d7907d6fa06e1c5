"""Named, parameterised layers and the parameter registry."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import ConfigurationError
from .tensor import Tensor

ENCODER = "encoder"
DECODER = "decoder"
GROUPS = (ENCODER, DECODER)


class ParamRegistry:
    """Ordered name -> tensor map holding parameters and BN running stats.

    Insertion order is the checkpoint order.  Every entry carries a group tag
    (``encoder`` or ``decoder``) used for per-group learning rates; running
    statistics are registered as non-trainable buffers.
    """

    def __init__(self, dtype=np.float32) -> None:
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, group: str, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise ConfigurationError(f"unknown parameter group {group!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self._tensors[name] = t
        self._groups[name] = group
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def group(self, name: str) -> str:
        return self._groups[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def parameters(self, group: str | None = None) -> list[Tensor]:
        return [t for n, t in self._tensors.items()
                if self._trainable[n] and (group is None or self._groups[n] == group)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if self._trainable[n]]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def astype(self, dtype) -> "ParamRegistry":
        """Convert every tensor in place (gradient checks run in float64)."""
        self.dtype = np.dtype(dtype)
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(state)
        extra = set(state) - set(self._tensors)
        if missing or extra:
            raise ConfigurationError(
                f"state does not match registry (missing={sorted(missing)}, unexpected={sorted(extra)})")
        for n, t in self._tensors.items():
            arr = np.asarray(state[n])
            if arr.shape != t.shape:
                raise ConfigurationError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


class Conv2d:
    """Convolution with 'same' zero padding for odd kernels at stride 1."""

    def __init__(self, reg: ParamRegistry, name: str, cin: int, cout: int, kernel: int = 1,
                 group: str = DECODER, rng: np.random.Generator | None = None,
                 dilation: int = 1, stride: int = 1, padding: int | None = None,
                 bias: bool = True) -> None:
        rng = rng or np.random.default_rng(0)
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (kernel - 1) // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        self.weight = reg.add(f"{name}.weight",
                              kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in), group)
        self.bias = reg.add(f"{name}.bias", np.zeros(cout), group) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride,
                        dilation=self.dilation, padding=self.padding)


class BatchNorm2d:
    def __init__(self, reg: ParamRegistry, name: str, channels: int, group: str = DECODER) -> None:
        self.gamma = reg.add(f"{name}.gamma", np.ones(channels), group)
        self.beta = reg.add(f"{name}.beta", np.zeros(channels), group)
        self.running_mean = reg.add(f"{name}.running_mean", np.zeros(channels), group,
                                    trainable=False)
        self.running_var = reg.add(f"{name}.running_var", np.ones(channels), group,
                                   trainable=False)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training)


@dataclass
class LSTMParams:
    w_ih: Tensor
    w_hh: Tensor
    bias: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]

    @classmethod
    def create(cls, reg: ParamRegistry, name: str, inputs: int, hidden: int,
               group: str = DECODER, rng: np.random.Generator | None = None,
               forget_bias: float = 1.0) -> "LSTMParams":
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / (inputs + 4 * hidden))
        w_ih = rng.uniform(-bound, bound, size=(inputs, 4 * hidden))
        w_hh = np.concatenate([orthogonal(rng, hidden) for _ in range(4)], axis=1)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = forget_bias
        return cls(reg.add(f"{name}.w_ih", w_ih, group),
                   reg.add(f"{name}.w_hh", w_hh, group),
                   reg.add(f"{name}.bias", bias, group))


class BiLSTM:
    """Forward and backward LSTM chains over a sequence."""

    def __init__(self, reg: ParamRegistry, name: str, inputs: int, hidden: int,
                 group: str = DECODER, rng: np.random.Generator | None = None) -> None:
        self.hidden = hidden
        self.fwd = LSTMParams.create(reg, f"{name}.fwd", inputs, hidden, group, rng)
        self.bwd = LSTMParams.create(reg, f"{name}.bwd", inputs, hidden, group, rng)

    def scan(self, seq: Tensor) -> Tensor:
        """``seq``: T x B x I -> T x B x 2*hidden."""
        return _bilstm_stacked(seq, self.fwd, self.bwd)


def _run_chain(steps: list[Tensor], p: LSTMParams) -> list[Tensor]:
    batch = steps[0].shape[0]
    h = Tensor(np.zeros((batch, p.hidden), dtype=steps[0].dtype))
    c = Tensor(np.zeros((batch, p.hidden), dtype=steps[0].dtype))
    outs = []
    for x in steps:
        h, c = F.lstm_cell(x, h, c, p.w_ih, p.w_hh, p.bias)
        outs.append(h)
    return outs


def _bilstm_stacked(seq: Tensor, fwd: LSTMParams, bwd: LSTMParams) -> Tensor:
    steps = F.unstack(seq, axis=0)
    hf = _run_chain(steps, fwd)
    hb = _run_chain(steps[::-1], bwd)[::-1]
    return F.concat([F.stack(hf, axis=0), F.stack(hb, axis=0)], axis=2)


def bilstm_scan(seq: list[Tensor], fwd: LSTMParams, bwd: LSTMParams) -> list[Tensor]:
    """Run a biLSTM over ``seq`` (each element B x I).

    Returns one B x 2*hidden tensor per position: the forward chain's hidden
    state followed by the backward chain's.
    """
    if not seq:
        raise ConfigurationError("bilstm_scan: empty sequence")
    shape = seq[0].shape
    if any(t.shape != shape for t in seq):
        raise ConfigurationError("bilstm_scan: sequence elements differ in shape")
    hf = _run_chain(list(seq), fwd)
    hb = _run_chain(list(seq)[::-1], bwd)[::-1]
    return [F.concat([a, b], axis=1) for a, b in zip(hf, hb)]
