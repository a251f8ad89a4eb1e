"""Finite-difference oracle suite for the autodiff engine.

Every primitive is checked on small random inputs kept away from its kinks,
then the full inference loss (4×4 patch, tiny networks) is checked with
respect to the codes and the relative pose deltas.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from typing import Any

import numpy as np
from pydantic import BaseModel

from supnerf import gradengine as ge
from supnerf.geometry import BoxDimensions, PoseO2C, exp_so3_tensor, rot_y
from supnerf.gradengine import GradCheckReport, Parameter, Tensor, grad_check
from supnerf.nets import NerfDecoder
from supnerf.objectives import PatchTargets, total_infer_loss
from supnerf.pose import PoseState
from supnerf.renderer import RelativeO2CPose, render_patch
from supnerf.settings import NetConfig, RenderConfig
from supnerf.synthdata import frame_intrinsics

log = logging.getLogger(__name__)

END_TO_END_TOL = 1e-3

Case = tuple[Callable[[], Tensor], list[Parameter]]


class GradSuiteReport(BaseModel):
    echo: dict[str, Any] = {}
    cases: dict[str, GradCheckReport]
    passed: bool


def _away_from_zero(
    rng: np.random.Generator, shape: tuple[int, ...], margin: float = 0.2
) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x))


def _weighted(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalarize with fixed random weights so every output coordinate matters."""
    weights = rng.normal(size=fn().shape)
    return lambda: (fn() * weights).sum()


def primitive_cases(seed: int = 0) -> dict[str, Case]:
    rng = np.random.default_rng(seed)
    a = Parameter(_away_from_zero(rng, (3, 4)), name="a")
    b = Parameter(rng.normal(size=(3, 4)), name="b")
    pos = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)), name="pos")
    c = Parameter(rng.normal(size=(4, 2)), name="c")
    row = Parameter(rng.normal(size=(1, 4)), name="row")
    inner = Parameter(rng.uniform(-0.4, 0.4, size=(3, 4)), name="inner")
    x = Parameter(rng.normal(size=(2, 5, 5)), name="x")
    w = Parameter(rng.normal(size=(3, 2, 3, 3)), name="w")
    bias = Parameter(rng.normal(size=3), name="bias")
    q = Parameter(np.array([0.3, -0.5, 0.2]), name="q")
    q_small = Parameter(np.array([1e-6, -2e-6, 5e-7]), name="q_small")

    raw: dict[str, Case] = {
        "add": (lambda: a + b, [a, b]),
        "sub": (lambda: a - b, [a, b]),
        "mul": (lambda: a * b, [a, b]),
        "div": (lambda: b / pos, [b, pos]),
        "square_difference": (lambda: ge.square_difference(a, b), [a, b]),
        "matmul": (lambda: a @ c, [a, c]),
        "neg": (lambda: -a, [a]),
        "relu": (lambda: ge.relu(a), [a]),
        "sigmoid": (lambda: ge.sigmoid(b), [b]),
        "softplus": (lambda: ge.softplus(b), [b]),
        "tanh": (lambda: ge.tanh(b), [b]),
        "exp": (lambda: ge.exp(b), [b]),
        "log": (lambda: ge.log(pos), [pos]),
        "sin": (lambda: ge.sin(b), [b]),
        "cos": (lambda: ge.cos(b), [b]),
        "sqrt": (lambda: ge.sqrt(pos), [pos]),
        "square": (lambda: ge.square(b), [b]),
        "clip": (lambda: ge.clip(inner, lo=-0.5, hi=0.5), [inner]),
        "sum": (lambda: ge.sum_(b, axis=1), [b]),
        "mean": (lambda: ge.mean(b, axis=0), [b]),
        "cumsum": (lambda: ge.cumsum(b, axis=1), [b]),
        "broadcast_to": (lambda: ge.broadcast_to(row, (3, 4)), [row]),
        "reshape": (lambda: ge.reshape(b, (4, 3)), [b]),
        "transpose": (lambda: ge.transpose(b), [b]),
        "take": (lambda: ge.take(b, (np.array([0, 2, 2]), np.array([1, 3, 0]))), [b]),
        "concat": (lambda: ge.concat([a, b], axis=1), [a, b]),
        "stack": (lambda: ge.stack([a, b], axis=0), [a, b]),
        "conv2d": (lambda: ge.conv2d(x, w, bias, stride=2, padding=1), [x, w, bias]),
        "exp_so3": (lambda: exp_so3_tensor(q), [q]),
        "exp_so3_small": (lambda: exp_so3_tensor(q_small), [q_small]),
    }
    return {name: (_weighted(fn, rng), params) for name, (fn, params) in raw.items()}


def tiny_net_config() -> NetConfig:
    return NetConfig(
        latent=4, hidden=8, encoder_widths=(2, 2, 2, 2, 2), pe_frequencies=2,
        density_layers=2, color_layers=1, box_hidden=4, refiner_hidden=4, direct_hidden=4,
    )


def end_to_end_case(seed: int = 0) -> Case:
    """L_infer on a 4×4 patch w.r.t. shape code, texture code and pose deltas."""
    rng = np.random.default_rng(seed)
    net = tiny_net_config()
    render_cfg = RenderConfig(patch=4, samples_per_ray=8)
    decoder = NerfDecoder(net, rng)
    dims = BoxDimensions(h=1.5, w=1.8, l=4.0)
    pose = PoseO2C(rot_y(0.6), np.array([0.2, 0.1, 10.0]))
    k = frame_intrinsics(dims, pose, 0.8)
    targets = PatchTargets(
        image=rng.uniform(size=(4, 4, 3)),
        mask=rng.choice([0.0, 0.5, 1.0], size=(4, 4)),
        depth=np.zeros((4, 4)),
    )
    shape = Parameter(rng.normal(size=net.latent), name="code.shape")
    texture = Parameter(rng.normal(size=net.latent), name="code.texture")
    param = RelativeO2CPose(PoseState.from_o2c(pose, k), k)
    field = decoder.field(shape, texture)

    def loss() -> Tensor:
        rot_c2o, t_c2o = param.camera()
        out = render_patch(rot_c2o, t_c2o, dims, k, field, render_cfg)
        return total_infer_loss(out, targets, 0.1)

    return loss, [shape, texture, *param.parameters()]


def run_suite(
    tol: float = 1e-6, seed: int = 0, echo: dict[str, Any] | None = None
) -> GradSuiteReport:
    cases: dict[str, GradCheckReport] = {}
    for name, (fn, params) in primitive_cases(seed).items():
        cases[name] = grad_check(fn, params, tol=tol, seed=seed)
        log.debug("grad_check %s: %s", name, cases[name].max_rel_error)
    fn, params = end_to_end_case(seed)
    cases["infer_loss"] = grad_check(fn, params, tol=max(tol, END_TO_END_TOL), seed=seed)
    failed = [name for name, rep in cases.items() if not rep.passed]
    if failed:
        log.warning("gradient check failed for: %s", ", ".join(failed))
    return GradSuiteReport(echo=echo or {}, cases=cases, passed=not failed)
