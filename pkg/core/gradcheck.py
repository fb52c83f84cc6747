"""Finite-difference verification of every hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from core.amfm import (
    AmfmBlockParams,
    BlockKind,
    CbamParams,
    amfm,
    amfm_backward,
    amfm_block,
    amfm_block_backward,
    cbam,
    cbam_backward,
    channel_attention,
    channel_attention_backward,
    mfm,
    mfm_backward,
    spatial_attention,
    spatial_attention_backward,
)
from core.errors import NumericError
from core.models import BatchNormStats
from core.multitask import LossWeights, Strategy, build_head, head_backward, head_forward, mtl_loss
from core.nn import (
    activation,
    activation_backward,
    batchnorm2d,
    batchnorm2d_backward,
    conv2d,
    conv2d_backward,
    linear,
    linear_backward,
    pool2d,
    pool2d_backward,
    softmax_cross_entropy,
)
from core.utils import logger

REL_FLOOR = 1e-8
DEFAULT_EPS = 1e-5
NUDGE_SCALE = 1e-3
NUDGE_ATTEMPTS = 5

Tensors = dict[str, np.ndarray]
Forward = Callable[[Tensors], np.ndarray]
Backward = Callable[[np.ndarray, Tensors], Tensors]


def _relative(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


@dataclass(slots=True)
class ScanResult:
    max_error: float
    at_kink: bool


def scan(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    grad: np.ndarray,
    eps: float = DEFAULT_EPS,
) -> ScanResult:
    """Central-difference scan; ``at_kink`` flags a worst coordinate whose one-sided slopes disagree.

    Where ``fn`` is smooth the two one-sided slopes agree to O(eps), so a large
    error there is a wrong gradient. A disagreement at least half the size of
    the error means the step straddled a max/ReLU kink instead.
    """
    x = np.array(x, dtype=np.float64)
    if grad.shape != x.shape:
        raise ValueError(f"gradient shape {grad.shape} differs from input shape {x.shape}")

    def evaluate(point: np.ndarray, where: tuple[int, ...] | None) -> float:
        value = float(fn(point))
        if not np.isfinite(value):
            raise NumericError(f"non-finite function value at coordinate {where}", where=where)
        return value

    f0 = evaluate(x, None)
    result = ScanResult(0.0, False)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + eps
        f_plus = evaluate(x, index)
        x[index] = original - eps
        f_minus = evaluate(x, index)
        x[index] = original

        error = _relative(float(grad[index]), (f_plus - f_minus) / (2 * eps))
        if error > result.max_error:
            right, left = (f_plus - f0) / eps, (f0 - f_minus) / eps
            spread = abs(right - left) / max(abs(right), abs(left), REL_FLOOR)
            result = ScanResult(error, spread >= error / 2)
    return result


def gradcheck(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    grad: np.ndarray,
    eps: float = DEFAULT_EPS,
) -> float:
    """Max relative error between ``grad`` and central differences of scalar ``fn`` at ``x``."""
    return scan(fn, x, grad, eps).max_error


def project_to_scalar(out: np.ndarray, weights: np.ndarray) -> float:
    """Fixed random projection sum(out * weights); ``weights`` doubles as d loss / d out."""
    return float(np.sum(np.asarray(out) * weights))


@dataclass(slots=True)
class GradcheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _worst_over_inputs(forward: Forward, backward: Backward, inputs: Tensors, weights: np.ndarray) -> ScanResult:
    analytic = backward(weights, inputs)
    worst = ScanResult(0.0, False)
    for key, grad in analytic.items():
        def scalar(value: np.ndarray, key: str = key) -> float:
            return project_to_scalar(forward({**inputs, key: value}), weights)

        found = scan(scalar, inputs[key], np.asarray(grad))
        if found.max_error > worst.max_error:
            worst = found
    return worst


def check_case(
    name: str,
    forward: Forward,
    backward: Backward,
    inputs: Tensors,
    rng: np.random.Generator,
    tolerance: float,
) -> GradcheckResult:
    """Gradcheck every tensor in ``inputs`` that ``backward`` returns a gradient for.

    A failure caused by a step across a kink nudges every input by a small
    random offset and checks again; any other failure stands.
    """
    weights = rng.normal(size=np.shape(forward(inputs)))
    worst = _worst_over_inputs(forward, backward, inputs, weights)
    for _ in range(NUDGE_ATTEMPTS):
        if worst.max_error <= tolerance or not worst.at_kink:
            break
        logger.debug("gradcheck %s straddled a kink (%.3e); nudging inputs", name, worst.max_error)
        inputs = {k: v + NUDGE_SCALE * rng.normal(size=np.shape(v)) for k, v in inputs.items()}
        worst = _worst_over_inputs(forward, backward, inputs, weights)
    logger.debug("gradcheck %s max_rel_error=%.3e tol=%.1e", name, worst.max_error, tolerance)
    return GradcheckResult(name, worst.max_error, tolerance)


# --------------------------------------------------------------------------- suite


def _distinct(rng: np.random.Generator, shape: tuple[int, ...], gap: float = 0.01) -> np.ndarray:
    """Distinct values on a half-offset grid of spacing ``gap``: no near-ties and no zeros."""
    values = (rng.permutation(int(np.prod(shape))) - np.prod(shape) / 2 + 0.5) * gap
    return values.reshape(shape).astype(np.float64)


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 2.0, size=shape)


def _cbam_of(t: Tensors) -> CbamParams:
    return CbamParams(**{k: t[k] for k in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "spatial_kernel", "spatial_bias")})


def _layer_cases(rng: np.random.Generator) -> list[tuple]:
    cases = []

    cases.append((
        "linear",
        lambda t: linear(t["x"], t["weight"], t["bias"])[0],
        lambda d, t: dict(zip(("x", "weight", "bias"), linear_backward(d, linear(t["x"], t["weight"], t["bias"])[1]))),
        {"x": rng.normal(size=(4, 5)), "weight": rng.normal(size=(3, 5)), "bias": rng.normal(size=3)},
        1e-6,
    ))
    for kind in ("sigmoid", "relu", "leaky_relu"):
        cases.append((
            f"activation.{kind}",
            lambda t, kind=kind: activation(t["x"], kind)[0],
            lambda d, t, kind=kind: {"x": activation_backward(d, activation(t["x"], kind)[1])},
            {"x": _away_from_zero(rng, (3, 4))},
            1e-6,
        ))
    for stride, padding in ((1, 1), (2, 0)):
        cases.append((
            f"conv2d.s{stride}p{padding}",
            lambda t, s=stride, p=padding: conv2d(t["x"], t["kernel"], t["bias"], s, p)[0],
            lambda d, t, s=stride, p=padding: dict(
                zip(("x", "kernel", "bias"), conv2d_backward(d, conv2d(t["x"], t["kernel"], t["bias"], s, p)[1]))
            ),
            {"x": rng.normal(size=(2, 2, 5, 6)), "kernel": rng.normal(size=(3, 2, 3, 3)), "bias": rng.normal(size=3)},
            1e-5,
        ))

    def bn(t: Tensors):
        return batchnorm2d(t["x"], t["gamma"], t["beta"], BatchNormStats.fresh(t["gamma"].shape[0]), "train")

    cases.append((
        "batchnorm2d",
        lambda t: bn(t)[0],
        lambda d, t: dict(zip(("x", "gamma", "beta"), batchnorm2d_backward(d, bn(t)[1]))),
        {"x": 2.0 * rng.normal(size=(3, 2, 4, 4)) + 0.5, "gamma": rng.uniform(0.5, 1.5, 2), "beta": rng.normal(size=2)},
        1e-4,
    ))
    for kind in ("max", "avg", "global_max", "global_avg"):
        cases.append((
            f"pool2d.{kind}",
            lambda t, kind=kind: pool2d(t["x"], kind)[0],
            lambda d, t, kind=kind: {"x": pool2d_backward(d, pool2d(t["x"], kind)[1])},
            {"x": _distinct(rng, (2, 2, 4, 6))},
            1e-5,
        ))

    soft = rng.dirichlet(np.ones(10), size=4)
    cases.append((
        "softmax_cross_entropy",
        lambda t: np.asarray(softmax_cross_entropy(t["logits"], soft)[0]),
        lambda d, t: {"logits": d * softmax_cross_entropy(t["logits"], soft)[1]},
        {"logits": rng.normal(size=(4, 10))},
        1e-6,
    ))
    cases.append((
        "mfm",
        lambda t: mfm(t["x"])[0],
        lambda d, t: {"x": mfm_backward(d, mfm(t["x"])[1])},
        {"x": _distinct(rng, (2, 4, 3, 3))},
        1e-5,
    ))
    return cases


def _attention_cases(rng: np.random.Generator) -> list[tuple]:
    channels = 8
    params = CbamParams.init(channels, rng, reduction=4, kernel_size=3).as_dict()
    inputs = {"x": _distinct(rng, (2, channels, 4, 5)), **{k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}}

    def wrap(op, op_backward):
        def forward(t: Tensors) -> np.ndarray:
            return op(t["x"], _cbam_of(t))[0]

        def backward(d: np.ndarray, t: Tensors) -> Tensors:
            dx, grads = op_backward(d, op(t["x"], _cbam_of(t))[1])
            return {"x": dx, **grads}

        return forward, backward

    return [
        (name, *wrap(op, op_backward), inputs, 1e-4)
        for name, op, op_backward in (
            ("channel_attention", channel_attention, channel_attention_backward),
            ("spatial_attention", spatial_attention, spatial_attention_backward),
            ("cbam", cbam, cbam_backward),
            ("amfm", amfm, amfm_backward),
        )
    ]


def _block_cases(rng: np.random.Generator) -> list[tuple]:
    cases = []
    for kind in BlockKind:
        block = AmfmBlockParams.init(2, 4, rng, kind, reduction=2, kernel_size=3)
        keys = tuple(block.tensors())
        inputs = {"x": rng.normal(size=(2, 2, 8, 8)), **{k: v.copy() for k, v in block.tensors().items()}}

        def run(t: Tensors, kind: BlockKind = kind):
            cbam_params = None
            if kind.uses_attention:
                cbam_params = _cbam_of({k.removeprefix("cbam."): v for k, v in t.items() if k.startswith("cbam.")})
            params = AmfmBlockParams(
                conv_weight=t["conv.weight"],
                conv_bias=t["conv.bias"],
                bn_gamma=t["bn.gamma"],
                bn_beta=t["bn.beta"],
                running=BatchNormStats.fresh(t["bn.gamma"].shape[0]),
                cbam=cbam_params,
            )
            return amfm_block(t["x"], params, (2, 2), "train", kind)

        def backward(d: np.ndarray, t: Tensors, run=run, keys=keys) -> Tensors:
            dx, grads = amfm_block_backward(d, run(t).cache)
            return {"x": dx, **{k: grads[k] for k in keys}}

        cases.append((f"block.{kind.value}", lambda t, run=run: run(t).out, backward, inputs, 1e-4))
    return cases


def _head_cases(rng: np.random.Generator) -> list[tuple]:
    cases = []
    for strategy in Strategy:
        spec = build_head(strategy, trunk_dim=6, hidden=5)
        inputs = {"z": rng.normal(size=(4, 6))}
        for slot in spec.slots:
            inputs[f"{slot.name}.weight"] = rng.normal(0.0, 0.5, size=(slot.out_dim, slot.in_dim))
            inputs[f"{slot.name}.bias"] = rng.normal(0.0, 0.1, size=slot.out_dim)

        def forward(t: Tensors, spec=spec) -> np.ndarray:
            logits10, logits3, _ = head_forward(spec, t, t["z"])
            return logits10 if logits3 is None else np.concatenate([logits10, logits3], axis=1)

        def backward(d: np.ndarray, t: Tensors, spec=spec) -> Tensors:
            _, logits3, cache = head_forward(spec, t, t["z"])
            dz, grads = head_backward(d[:, :10], None if logits3 is None else d[:, 10:], cache)
            return {"z": dz, **grads}

        cases.append((f"head.{strategy.value}", forward, backward, inputs, 1e-5))

    target10 = np.eye(10)[rng.integers(0, 10, size=4)]
    target3 = np.eye(3)[rng.integers(0, 3, size=4)]
    weights = LossWeights(1.0, 5.0)
    cases.append((
        "mtl_loss",
        lambda t: np.asarray(mtl_loss(t["logits10"], t["logits3"], target10, target3, weights).loss),
        lambda d, t: {
            "logits10": d * mtl_loss(t["logits10"], t["logits3"], target10, target3, weights).grad10,
            "logits3": d * mtl_loss(t["logits10"], t["logits3"], target10, target3, weights).grad3,
        },
        {"logits10": rng.normal(size=(4, 10)), "logits3": rng.normal(size=(4, 3))},
        1e-6,
    ))
    return cases


def run_suite(tolerance: float | None = None, seed: int = 0) -> list[GradcheckResult]:
    """Check every layer, attention module, block kind and head; ``tolerance`` overrides the per-case bound."""
    rng = np.random.default_rng(seed)
    cases = _layer_cases(rng) + _attention_cases(rng) + _block_cases(rng) + _head_cases(rng)
    results = []
    for name, forward, backward, inputs, bound in cases:
        results.append(check_case(name, forward, backward, inputs, rng, tolerance if tolerance is not None else bound))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning("Gradient check failed for: %s", ", ".join(failed))
    return results
