#!/usr/bin/env python3
"""
Finite-difference audits of the tape gradients, grouped by scope:

- primitives: every differentiable tensor-engine operator
- blocks: conv_b, double_conv, MRFFAM, LPM, MSA, CFM, hybrid and decoder blocks
- losses: every loss term and both combined objectives
- end-to-end: a width-8 network at 96x96, input gradient of the full objective

Each case is a scalar function of one float64 tensor; the audit compares the
tape gradient with central differences (see tensor_engine.finite_diff_check).
Every scope steps by 1e-4; points whose steps would cross a ReLU kink are
shifted before the check (settle_point).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

import network_blocks as nb
import objectives as obj
import tensor_engine as te
from tensor_engine import GradCheckReport, Tensor, finite_diff_check

logger = logging.getLogger(__name__)

SCOPES = ("primitives", "blocks", "losses", "end-to-end")
THRESHOLDS = {"primitives": 1e-6, "blocks": 1e-4, "losses": 1e-4, "end-to-end": 1e-4}
EPSILONS = {scope: 1e-4 for scope in SCOPES}

# a ReLU input crossing zero by more than KINK_DEPTH * epsilon during a central
# difference counts as a straddled kink; the audit point is then shifted by N(0, KINK_SHIFT^2)
KINK_DEPTH = 1e-3
KINK_SHIFT = 0.05
KINK_SHIFTS = 8


@dataclass
class AuditCase:
    name: str
    function: Callable[[Tensor], Tensor]
    point: np.ndarray


@dataclass
class AuditItem:
    scope: str
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _projection(shape, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Fixed random projection turning any tensor of ``shape`` into a scalar."""
    weights = rng.standard_normal(shape)
    return lambda out: te.sum_(te.mul(out, weights))


def _f64(array) -> Tensor:
    return Tensor(array, dtype=np.float64)


def primitive_cases(rng: np.random.Generator) -> List[AuditCase]:
    x = rng.standard_normal((2, 4, 6, 6))
    kernel = _f64(rng.standard_normal((4, 2, 3, 3)))
    bias = _f64(rng.standard_normal(4))
    conv = te.ConvWeights(kernel, bias, stride=1, padding=2, dilation=2, groups=2)
    strided = te.ConvWeights(kernel, None, stride=2, padding=1, groups=2)
    scale, shift = _f64(rng.uniform(0.5, 1.5, 4)), _f64(rng.standard_normal(4))
    q, k, v = (rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 7, 3)), rng.standard_normal((2, 7, 3)))
    target = rng.uniform(0, 1, (2, 4, 6, 6))
    rows = rng.standard_normal((2, 4, 6))
    matrix = rng.standard_normal((2, 6, 5))

    def conv_kernel(w: Tensor) -> Tensor:
        return te.conv2d(_f64(x), te.ConvWeights(w, bias, padding=2, dilation=2, groups=2))

    cases = [
        ("conv2d/input", lambda t: te.conv2d(t, conv), x),
        ("conv2d/kernel", conv_kernel, kernel.data),
        ("conv2d/strided", lambda t: te.conv2d(t, strided), x),
        ("pool2d/max", lambda t: te.pool2d(t, "max", 2, 2), x),
        ("pool2d/avg-padded", lambda t: te.pool2d(t, "avg", 3, 1, padding=1), x),
        ("bilinear_upsample", lambda t: te.bilinear_upsample(t, 2), x),
        ("bilinear_resize", lambda t: te.bilinear_resize(t, 9, 4), x),
        ("normalize/batch", lambda t: te.normalize(t, "batch", scale, shift), x),
        ("normalize/group", lambda t: te.normalize(t, "group", scale, shift, groups=2), x),
        ("attention/queries", lambda t: te.scaled_dot_attention(t, _f64(k), _f64(v)), q),
        ("attention/keys", lambda t: te.scaled_dot_attention(_f64(q), t, _f64(v)), k),
        ("attention/values", lambda t: te.scaled_dot_attention(_f64(q), _f64(k), t), v),
        ("activation/sigmoid", lambda t: te.activation(t, "sigmoid"), x),
        ("activation/relu", lambda t: te.activation(t, "relu"), x),
        ("bce_with_logits", lambda t: te.bce_with_logits(t, _f64(target)), x),
        ("concat+slice", lambda t: te.concat([te.channel_slice(t, 1, 3), te.square(t)]), x),
        ("matmul", lambda t: te.matmul(t, _f64(matrix)), rows),
        ("div/log/exp", lambda t: te.div(te.log(te.exp(t) + 1.0), te.abs_(t) + 2.0), x),
        ("reshape/transpose/flip", lambda t: te.flip(te.transpose(te.reshape(t, (2, 4, 36)), (0, 2, 1)), 1), x),
        ("mean", lambda t: te.mean(te.square(t), axis=(2, 3), keepdims=True), x),
    ]
    return [_scalar_case(name, fn, point, rng) for name, fn, point in cases]


def _scalar_case(name: str, fn, point: np.ndarray, rng: np.random.Generator) -> AuditCase:
    sample = fn(_f64(point))
    project = _projection(sample.shape, rng)
    return AuditCase(name, lambda t: project(fn(t)), point)


def _audit_config() -> nb.NetworkConfig:
    schedule = nb.DilationSchedule.from_rates({"HB1": (1, 2, 3), "HB2": (1, 2), "CB2": (1, 2), "CB3": (1, 2, 3)})
    return nb.NetworkConfig(base_channels=4, groupnorm_groups=2, input_resolution=32, dilation_schedule=schedule)


def block_cases(rng: np.random.Generator) -> List[AuditCase]:
    config = _audit_config()
    init = nb.Initializer(seed=int(rng.integers(1 << 31)), dtype=np.float64)
    nb.init_conv_b(init, "conv_b", 4, 4)
    nb.init_double_conv(init, "double_conv", 4, 4)
    nb.init_mrffam(init, "mrffam", 4, 4, (1, 2, 3))
    nb.init_lpm(init, "lpm", 4)
    nb.init_msa(init, "msa", 4, 2)
    nb.init_cfm(init, "cfm", {"a": 4, "b": 4}, 4)
    nb.init_hybrid_block(init, "hybrid", config, "HB1", 4, 8, nb.msa_levels(16, 32))
    nb.init_decoder_block(init, "decoder", config, "CB3", 4, 4)
    state = nb.NetworkState(init.params, config)
    view = state.view()

    x = rng.standard_normal((2, 4, 8, 8))
    other = _f64(rng.standard_normal((2, 4, 8, 8)))
    skip = _f64(rng.standard_normal((2, 4, 16, 16)))
    big = rng.standard_normal((2, 4, 16, 16))

    cases = [
        ("conv_b", lambda t: nb.conv_b(t, 2, view.child("conv_b")), x),
        ("double_conv", lambda t: nb.double_conv(t, view.child("double_conv")), x),
        ("mrffam", lambda t: nb.mrffam(t, (1, 2, 3), view.child("mrffam")), x),
        ("lpm", lambda t: nb.lpm(t, view.child("lpm")), x),
        ("msa", lambda t: nb.msa(t, view.child("msa"), 2), x),
        ("cfm", lambda t: nb.cfm([t, other], view.child("cfm"), 2, ["a", "b"]), x),
        ("hybrid_block", lambda t: nb.hybrid_block(t, view.child("hybrid"), config, "HB1"), big),
        ("decoder_block", lambda t: nb.decoder_block(t, view.child("decoder"), config, "CB3", skip=skip), x),
    ]
    return [_scalar_case(name, fn, point, rng) for name, fn, point in cases]


def loss_cases(rng: np.random.Generator) -> List[AuditCase]:
    logits = rng.uniform(-3, 3, (1, 1, 16, 16))
    gt = _f64((rng.uniform(0, 1, (1, 1, 16, 16)) > 0.6).astype(np.float64))
    contour = obj.contour_from_mask(gt)
    alpha = obj.alpha_map(gt, 5)
    soft = _f64(rng.uniform(0, 1, (1, 1, 16, 16)))
    config = obj.LossConfig(alpha_window=5)
    return [
        AuditCase("weighted_bce", lambda t: obj.weighted_bce(t, gt, alpha), logits),
        AuditCase("weighted_iou", lambda t: obj.weighted_iou(t, gt, alpha), logits),
        AuditCase("weighted_l1", lambda t: obj.weighted_l1(t, gt, alpha), logits),
        AuditCase("ssim_loss", lambda t: obj.ssim_loss(t, soft), logits),
        AuditCase("dice_loss", lambda t: obj.dice_loss(t, gt), logits),
        AuditCase("salient_loss", lambda t: obj.salient_loss(t, gt, config=config).value, logits),
        AuditCase("contour_loss", lambda t: obj.contour_loss(t, contour).value, logits),
    ]


def end_to_end_cases(rng: np.random.Generator) -> List[AuditCase]:
    config = nb.preset("toy")
    state = nb.assemble_network(config, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    r = config.input_resolution
    batch = rng.uniform(-1, 1, (1, 3, r, r))
    yy, xx = np.mgrid[0:r, 0:r]
    gt = _f64((((yy - r / 2) ** 2 + (xx - r / 2) ** 2) < (r / 4) ** 2)[None, None].astype(np.float64))
    contour = obj.contour_from_mask(gt)
    loss_config = obj.LossConfig()
    alpha = obj.alpha_map(gt, loss_config.alpha_window)

    def objective(t: Tensor) -> Tensor:
        saliency, contour_logits = nb.forward(state, t, training=True)
        return obj.total_loss(saliency, contour_logits, gt, contour, loss_config, alpha).value

    return [AuditCase("toy network (width 8, 96x96)", objective, batch)]


CASE_BUILDERS = {
    "primitives": primitive_cases,
    "blocks": block_cases,
    "losses": loss_cases,
    "end-to-end": end_to_end_cases,
}


def relu_inputs(function: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    """Every ReLU input element that ``function`` evaluates at ``point``, flattened in tape order."""
    x = Tensor(point, requires_grad=True, dtype=np.float64)
    with te.ComputationTape() as tape:
        function(x)
    values = [node.inputs[0].data.ravel() for node in tape.nodes if node.op == "relu"]
    return np.concatenate(values) if values else np.zeros(0)


def straddled_coordinates(
    function: Callable[[Tensor], Tensor],
    point: np.ndarray,
    epsilon: float,
    coordinates: Sequence[int],
) -> List[int]:
    """Flat indices whose +-epsilon steps push a ReLU input more than KINK_DEPTH * epsilon past zero."""
    base = relu_inputs(function, point)
    if base.size == 0:
        return []
    on = base > 0
    straddled = []
    for flat_index in coordinates:
        index = np.unravel_index(int(flat_index), point.shape)
        for step in (epsilon, -epsilon):
            shifted = point.copy()
            shifted[index] += step
            moved = relu_inputs(function, shifted)
            crossed = (moved > 0) != on
            if crossed.any() and np.abs(moved[crossed]).max() > KINK_DEPTH * epsilon:
                straddled.append(int(flat_index))
                break
    return straddled


def settle_point(case: AuditCase, epsilon: float, rng: np.random.Generator, seed: int = 0) -> np.ndarray:
    """
    The case's point, shifted until no audited coordinate straddles a ReLU kink.

    Gives up after KINK_SHIFTS shifts and returns the last point with a warning.
    """
    point = np.array(case.point, dtype=np.float64)
    coordinates = te.check_coordinates(point.size, seed=seed)
    for _ in range(KINK_SHIFTS):
        straddled = straddled_coordinates(case.function, point, epsilon, coordinates)
        if not straddled:
            return point
        logger.debug(f"{case.name}: {len(straddled)} coordinate(s) straddle a ReLU kink at step {epsilon:g}, shifting")
        point = point + rng.normal(0.0, KINK_SHIFT, point.shape)
    logger.warning(f"{case.name}: audit point still next to a ReLU kink after {KINK_SHIFTS} shifts")
    return point


def check_case(scope: str, case: AuditCase, rng: np.random.Generator, seed: int = 0) -> AuditItem:
    epsilon = EPSILONS[scope]
    point = settle_point(case, epsilon, rng, seed)
    report = finite_diff_check(case.function, point, epsilon=epsilon, threshold=THRESHOLDS[scope], seed=seed)
    status = "ok" if report.passed else "FAILED"
    logger.info(f"[{scope}] {case.name}: max rel err {report.max_relative_error:.2e} ({status})")
    return AuditItem(scope, case.name, report)


def run_audit(scopes: Sequence[str] = SCOPES, seed: int = 0) -> List[AuditItem]:
    """Run every case in ``scopes``; results come back in scope order."""
    unknown = [s for s in scopes if s not in CASE_BUILDERS]
    if unknown:
        raise ValueError(f"unknown gradcheck scope(s) {unknown}; choose from {SCOPES}")
    items = []
    for scope in scopes:
        rng = np.random.default_rng(seed)
        for case in CASE_BUILDERS[scope](rng):
            items.append(check_case(scope, case, rng, seed))
    return items


def summarize(items: Sequence[AuditItem]) -> Dict[str, int]:
    return {
        "checked": len(items),
        "failed": sum(1 for item in items if not item.passed),
    }
