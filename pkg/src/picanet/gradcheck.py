"""Finite-difference oracles for the hand-written backward rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, branch_trace, no_grad

DEFAULT_STEP = 1e-4
PASS_THRESHOLD = 1e-4
# relative accuracy of a long float64 forward pass (a few ulps of accumulated rounding)
FORWARD_ACCURACY = 10 * np.finfo(np.float64).eps


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return float(value.data.sum())
    return float(np.sum(value))


def _traced(f, x) -> tuple[float, tuple]:
    with branch_trace() as log:
        value = _scalar(f(x))
    return value, tuple(log)


def finite_diff_gradient(f: Callable[[Tensor], object], x: Tensor, step: float = DEFAULT_STEP,
                         coords: Sequence[int] | None = None,
                         kinked: list[int] | None = None) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.

    ``x`` is perturbed in place and restored.  With ``coords`` only those
    flat indices are evaluated; the rest of the result is left at zero.
    When ``kinked`` is a list, indices whose stencil changes a branch
    decision (ReLU mask, pool argmax, clamp) relative to ``x`` are appended.
    """
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    indices = range(flat.size) if coords is None else coords
    with no_grad():
        base = _traced(f, x)[1] if kinked is not None else None
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            fp, tp = _traced(f, x)
            flat[i] = orig - step
            fm, tm = _traced(f, x)
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * step)
            if kinked is not None and not (tp == base == tm):
                kinked.append(int(i))
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - n_i| / max(floor, |a_i| + |n_i|)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.abs(a) + np.abs(n))))


def resolution_floor(loss_value: float, step: float = DEFAULT_STEP,
                     threshold: float = PASS_THRESHOLD) -> float:
    """Denominator floor below which central differences cannot resolve ``threshold``.

    Rounding in f(x +- h) perturbs the quotient by about acc |f| / h, so a
    gradient smaller than that divided by ``threshold`` is judged on
    absolute error instead.
    """
    return max(1e-8, FORWARD_ACCURACY * abs(loss_value) / (step * threshold))


def analytic_gradients(loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    kinked: int
    floor: float


def gradient_check(loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                   step: float = DEFAULT_STEP, samples: int | None = None,
                   rng: np.random.Generator | None = None) -> GradcheckResult:
    """Compare backward() with central differences on smooth stencils.

    ``loss_fn`` closes over ``inputs`` and must be deterministic (eval-mode
    BN).  Coordinates whose stencil crosses a branch are skipped: the
    central difference is not a derivative there.  With ``samples`` set,
    that many smooth coordinates are drawn across all inputs (replacing
    kinked draws) instead of checking every coordinate.
    """
    grads = analytic_gradients(loss_fn, inputs)
    with no_grad():
        floor = resolution_floor(_scalar(loss_fn()), step)
    worst, checked, n_kinked = 0.0, 0, 0

    def visit(k: int, coords: Sequence[int]) -> None:
        nonlocal worst, checked, n_kinked
        kinked: list[int] = []
        num = finite_diff_gradient(lambda _: loss_fn(), inputs[k], step, coords, kinked)
        smooth = np.setdiff1d(np.asarray(coords, dtype=int), kinked)
        n_kinked += len(kinked)
        checked += smooth.size
        if smooth.size:
            a = grads[k].reshape(-1)[smooth]
            worst = max(worst, relative_error(a, num.reshape(-1)[smooth], floor))

    if samples is None:
        for k, t in enumerate(inputs):
            visit(k, range(t.size))
        return GradcheckResult(worst, checked, n_kinked, floor)

    rng = rng or np.random.default_rng(0)
    sizes = np.array([t.size for t in inputs])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for p in rng.permutation(int(sizes.sum())):
        if checked >= samples or n_kinked > 4 * samples:
            break
        k = int(np.searchsorted(offsets, p, side="right") - 1)
        visit(k, [int(p - offsets[k])])
    return GradcheckResult(worst, checked, n_kinked, floor)


def check_gradients(loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                    step: float = DEFAULT_STEP, samples: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error of :func:`gradient_check`."""
    return gradient_check(loss_fn, inputs, step, samples, rng).max_rel_error
