"""Finite-difference gradient checks for the primitives and a tiny full model.

Relative error for one tensor is ``max|a - n| / max(max|a|, max|n|, floor)``
over its entries (``a`` analytic, ``n`` central differences). The floor keeps
tensors whose true gradient is exactly zero (a conv bias feeding batch norm)
from reporting pure round-off as a relative error of 1.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from steerer import ops
from steerer.model import BackboneConfig, SteererModel
from steerer.steering import build_masks, default_alphas, msil_loss, pwsp_select
from steerer.tensor import Tensor, backward, no_grad

FD_STEP = 1e-5
PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4
REL_FLOOR = 1e-5

# builder(rng) -> (fn, inputs); fn maps a list of tensors to one tensor
CaseBuilder = Callable[[np.random.Generator], tuple[Callable[[list[Tensor]], Tensor], list[np.ndarray]]]


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr``, perturbed in place."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return g


def _projected(fn, tensors: list[Tensor], weights: np.ndarray) -> Tensor:
    out = fn(tensors)
    if out.ndim == 0:
        return out
    return ops.total(ops.hadamard(out, Tensor(weights)))


def check_case(fn, inputs: Sequence[np.ndarray], rng: np.random.Generator, step: float = FD_STEP) -> float:
    """Worst per-tensor relative error for one random instance."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with no_grad():
        probe = fn([Tensor(a) for a in arrays])
    weights = rng.normal(size=probe.shape) if probe.ndim else np.ones(())
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(_projected(fn, tensors, weights))

    def value() -> float:
        with no_grad():
            return _projected(fn, [Tensor(a) for a in arrays], weights).item()

    worst = 0.0
    for t, a in zip(tensors, arrays):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, rel_error(analytic, numeric_grad(value, a, step)))
    return worst


# --------------------------------------------------------------------------- cases


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _conv_case(stride: int, pad: int, k: int) -> CaseBuilder:
    def build(rng):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, k, k))
        b = rng.normal(size=3)
        return (lambda t: ops.conv2d(t[0], t[1], t[2], stride=stride, pad=pad)), [x, w, b]
    return build


def _bn_train(rng):
    x = rng.normal(size=(2, 3, 3, 3))
    return (lambda t: ops.batch_norm(t[0], t[1], t[2], None, training=True)), [
        x, rng.uniform(0.5, 1.5, 3), rng.normal(size=3)]


def _bn_eval(rng):
    stats = ops.RunningStats(3)
    stats.mean[...] = rng.normal(size=3)
    stats.var[...] = rng.uniform(0.5, 2.0, 3)
    x = rng.normal(size=(2, 3, 3, 3))
    return (lambda t: ops.batch_norm(t[0], t[1], t[2], stats, training=False)), [
        x, rng.uniform(0.5, 1.5, 3), rng.normal(size=3)]


def _hadamard_bcast(rng):
    return (lambda t: ops.hadamard(t[0], t[1])), [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 1, 4, 4))]


def _masked_mse(rng):
    target = rng.normal(size=(2, 1, 4, 4))
    mask = (rng.random((2, 1, 4, 4)) < 0.6).astype(float)
    return (lambda t: ops.masked_mse(t[0], target, mask)), [rng.normal(size=(2, 1, 4, 4))]


PRIMITIVE_CASES: dict[str, CaseBuilder] = {
    "conv2d_k3_s1_p1": _conv_case(1, 1, 3),
    "conv2d_k3_s2_p1": _conv_case(2, 1, 3),
    "conv2d_k1_s1_p0": _conv_case(1, 0, 1),
    "batch_norm_train": _bn_train,
    "batch_norm_eval": _bn_eval,
    "relu": lambda rng: ((lambda t: ops.relu(t[0])), [_away_from_zero(rng, (2, 2, 3, 3))]),
    "add": lambda rng: ((lambda t: ops.add(t[0], t[1])), [rng.normal(size=(2, 2, 3, 3)),
                                                         rng.normal(size=(2, 2, 3, 3))]),
    "scale": lambda rng: ((lambda t: ops.scale(t[0], 0.7)), [rng.normal(size=(2, 2, 3, 3))]),
    "sum": lambda rng: ((lambda t: ops.total(t[0])), [rng.normal(size=(2, 2, 3, 3))]),
    "hadamard": lambda rng: ((lambda t: ops.hadamard(t[0], t[1])), [rng.normal(size=(2, 2, 3, 3)),
                                                                   rng.normal(size=(2, 2, 3, 3))]),
    "hadamard_broadcast": _hadamard_bcast,
    "channel_softmax": lambda rng: ((lambda t: ops.channel_softmax(t[0])), [rng.normal(size=(2, 3, 3, 3))]),
    "concat_channels": lambda rng: ((lambda t: ops.concat_channels(t[0], t[1])),
                                    [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 1, 3, 3))]),
    "channel_slice": lambda rng: ((lambda t: ops.channel_slice(t[0], 1, 3)), [rng.normal(size=(2, 4, 3, 3))]),
    "upsample_bilinear": lambda rng: ((lambda t: ops.upsample_bilinear(t[0], 2)), [rng.normal(size=(2, 2, 3, 4))]),
    "masked_mse": _masked_mse,
}


# --------------------------------------------------------------------------- model


class _SplitHead:
    """Routes non-final branches to a frozen copy, so perturbing the live head
    only moves the final prediction, as the analytic gradient assumes."""

    def __init__(self, live, frozen):
        self.live, self.frozen = live, frozen

    def __call__(self, o, final_branch: bool = True):
        return (self.live if final_branch else self.frozen)(o, final_branch)


def micro_model(seed: int = 0, channels: int = 4, levels: int = 2) -> SteererModel:
    model = SteererModel(BackboneConfig(levels=levels, channels=channels), "steerer", seed=seed)
    # Zero biases behind a dead ReLU leave pre-activations exactly on the next
    # ReLU's kink, where central differences see half the slope. Random biases
    # move every unit off it; the head's output bias keeps its ReLU open.
    rng = np.random.default_rng([seed, 11])
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.1, p.shape)
    model.head.conv2.bias.data[...] = 0.5
    return model


def check_model(seed: int = 0, size: int = 16, batch: int = 4, step: float = FD_STEP) -> dict[str, float]:
    """Per-parameter relative error of the MSIL loss on a 16x16 micro-instance.

    PWSP masks are picked once from the unperturbed forward pass and then held
    fixed, since the selection is piecewise constant.
    """
    rng = np.random.default_rng([seed, 7])
    model = micro_model(seed)
    x = Tensor(rng.uniform(0.0, 1.0, size=(batch, 1, size, size)))
    n = model.levels
    gts = [rng.uniform(0.0, 0.3, size=(batch, size // 2 ** (j + 2), size // 2 ** (j + 2))) for j in range(n + 1)]
    alphas = default_alphas(n)
    params = list(model.named_parameters())

    with no_grad():
        out = model(x)
    grid = pwsp_select(gts, [p.data[:, 0] for p in out.preds], patch_px=size)
    masks = build_masks(grid, [g.shape[-2:] for g in gts])

    loss = msil_loss(gts, model(x).preds, masks, alphas)
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}

    live = model.head
    model.head = _SplitHead(live, copy.deepcopy(live))

    def value() -> float:
        with no_grad():
            return msil_loss(gts, model(x).preds, masks, alphas).item()

    try:
        return {name: rel_error(analytic[name], numeric_grad(value, p.data, step)) for name, p in params}
    finally:
        model.head = live


# --------------------------------------------------------------------------- report


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tol


@dataclass
class GradcheckReport:
    seed: int
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def format(self) -> str:
        width = max((len(r.name) for r in self.results), default=10)
        lines = [f"gradcheck seed={self.seed} step={FD_STEP:g}"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  tol={r.tol:g}  "
                         f"trials={r.trials}  {status}")
        lines.append("overall " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def run_gradcheck(seed: int = 0, trials: int = 100, cases: Optional[dict[str, CaseBuilder]] = None,
                  include_model: bool = True) -> GradcheckReport:
    report = GradcheckReport(seed)
    for name, build in (PRIMITIVE_CASES if cases is None else cases).items():
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        errs = []
        for _ in range(trials):
            fn, inputs = build(rng)
            errs.append(check_case(fn, inputs, rng))
        report.results.append(CheckResult(name, float(np.max(errs)), PRIMITIVE_TOL, trials))
    if include_model:
        errs = check_model(seed)
        report.results.append(CheckResult("full_model", max(errs.values()), MODEL_TOL, 1))
    return report
