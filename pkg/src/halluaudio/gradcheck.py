"""Central-difference verification of every differentiable component.

Each check builds a scalar loss ``sum(output * R)`` with a fixed random
projection ``R`` (or the episode loss itself), backpropagates it, and compares
sampled coordinates against :func:`finite_diff_grad` in float64. The error of
a component is ``|a - n| / max(|a| + |n|, floor)`` over the concatenated
sampled coordinates of all its gradients.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNorm2d, Conv2d, MaxPool4, Parameter, ReLU, finite_diff_grad
from .backbone import BackboneSpec, init_backbone
from .fewshot import ExtractorBank, episode_loss, make_frequency_masks

TOLERANCE = 1e-4
EPSILON = 1e-6
FLOOR = 1e-8


def relative_error(analytic, numeric, floor=FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


@dataclass
class CheckResult:
    component: str
    error: float
    coords: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


@dataclass
class GradcheckReport:
    seed: int
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.component for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = [f"gradcheck seed={self.seed} tolerance={TOLERANCE:g} epsilon={EPSILON:g}"]
        for r in self.results:
            out.append(f"  {'PASS' if r.passed else 'FAIL'}  {r.component:<22} rel_err={r.error:.3e}  "
                       f"coords={r.coords}  {r.seconds:.1f}s")
        return out


def _sample(size, k, rng):
    return np.arange(size) if size <= k else np.sort(rng.choice(size, k, replace=False))


def _compare(loss_fn, params, rng, per_param, inputs=()):
    """Collect (analytic, numeric) over sampled coordinates of params and raw inputs."""
    analytic, numeric = [], []
    for p in params:
        idx = _sample(p.size, per_param, rng)
        numeric.append(finite_diff_grad(loss_fn, p, EPSILON, idx).reshape(-1)[idx])
        analytic.append(p.grad.reshape(-1)[idx])
    for holder, grad in inputs:
        idx = _sample(holder.size, per_param, rng)
        numeric.append(finite_diff_grad(loss_fn, holder, EPSILON, idx).reshape(-1)[idx])
        analytic.append(grad.reshape(-1)[idx])
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    return relative_error(a, n), len(a)


def _layer_check(name, layer, x, rng, per_param=64):
    holder = Parameter("input", x)
    layer.training = True
    out = layer.forward(holder.value)
    R = rng.standard_normal(out.shape)
    for p in layer.parameters():
        p.zero_grad()
    dx = layer.backward(R)

    def loss():
        return float(np.sum(layer.forward(holder.value) * R))

    return _compare(loss, layer.parameters(), rng, per_param, [(holder, dx)])


def check_conv2d(rng):
    layer = Conv2d(3, 4, "conv", rng, np.float64)
    layer.bias.value[...] = rng.standard_normal(4)
    return _layer_check("conv2d", layer, rng.standard_normal((2, 3, 5, 5)), rng)


def check_batchnorm2d(rng):
    layer = BatchNorm2d(4, "bn", np.float64)
    layer.gamma.value[...] = rng.uniform(0.5, 1.5, 4)
    layer.beta.value[...] = rng.standard_normal(4)
    return _layer_check("batchnorm2d", layer, rng.standard_normal((2, 4, 6, 6)), rng)


def check_relu(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    return _layer_check("relu", ReLU(), x, rng)


def check_maxpool(rng):
    return _layer_check("maxpool", MaxPool4(), rng.standard_normal((2, 2, 9, 8)), rng)


def check_backbone(rng, spec=BackboneSpec((64, 64), (3, 4, 5)), per_param=8):
    net = init_backbone(spec, int(rng.integers(2**31)), np.float64).train()
    for layer in net.layers:
        if hasattr(layer, "bias"):
            layer.bias.value[...] = rng.standard_normal(layer.bias.value.shape) * 0.1
    x = rng.standard_normal((2, *spec.input_shape))
    out = net.forward(x)
    R = rng.standard_normal(out.shape)
    net.zero_grad()
    net.backward(R)

    def loss():
        return float(np.sum(net.forward(x) * R))

    return _compare(loss, net.parameters(), rng, per_param)


def check_episode_loss(rng, squared=False, spec=BackboneSpec((64, 64), (3, 4, 5)), per_param=6):
    masks = make_frequency_masks(spec.input_shape[1], spec.input_shape[1] // 2)
    bank = ExtractorBank.create(spec, masks, int(rng.integers(2**31)), np.float64)
    sx = rng.standard_normal((4, *spec.input_shape))
    sy = np.array([0, 0, 1, 1])
    qx = rng.standard_normal((2, *spec.input_shape))
    qy = np.array([0, 1])
    bank.zero_grad()
    episode_loss(sx, sy, qx, qy, bank, masks, squared)

    def loss():
        return episode_loss(sx, sy, qx, qy, bank, masks, squared, backward=False).loss

    return _compare(loss, bank.parameters(), rng, per_param)


CHECKS = {
    "conv2d": check_conv2d,
    "batchnorm2d": check_batchnorm2d,
    "relu": check_relu,
    "maxpool": check_maxpool,
    "backbone": check_backbone,
    "backbone_160x128": lambda rng: check_backbone(rng, BackboneSpec((160, 128), (2, 2, 2)), per_param=6),
    "episode_loss": lambda rng: check_episode_loss(rng, squared=False),
    "episode_loss_squared": lambda rng: check_episode_loss(rng, squared=True),
}


def run_gradcheck(seed: int = 0, components=None) -> GradcheckReport:
    report = GradcheckReport(seed)
    for name, fn in CHECKS.items():
        if components is not None and name not in components:
            continue
        rng = np.random.default_rng([seed, len(report.results)])
        t0 = time.perf_counter()
        err, n = fn(rng)
        report.results.append(CheckResult(name, err, n, time.perf_counter() - t0))
    return report
