"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cae import TemporalCAE, temporal_loss
from .joint import forward_full
from .unet import UNet3D, spatial_loss
from .volume import Volume4D

STEP = 1e-5
OP_TOL = 1e-6
NET_TOL = 1e-5
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(analytic, numeric, floor: float = FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(loss_fn: Callable[[], float], t: Tensor, indices=None, h: float = STEP):
    flat = t.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        out.append((up - down) / (2 * h))
    return np.array(out)


def check_function(fn, inputs: list[Tensor], rng, indices_per_input=None) -> float:
    """Max relative error of d(sum(fn(*inputs) * R))/d(inputs) for random R."""
    with ad.no_grad():
        probe = fn(*inputs)
    weight = rng.standard_normal(probe.shape)

    def scalar():
        with ad.no_grad():
            return float(np.sum(fn(*inputs).data * weight))

    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    ad.total(ad.mul(out, Tensor(weight))).backward()
    worst = 0.0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        idx = None if indices_per_input is None else indices_per_input[k]
        num = numeric_grad(scalar, t, idx)
        ana = t.grad.reshape(-1) if idx is None else t.grad.reshape(-1)[idx]
        worst = max(worst, float(rel_error(ana, num).max(initial=0.0)))
    return worst


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def op_cases():
    """(name, builder) pairs; a builder draws inputs and returns (fn, inputs)."""

    def conv3d_case(padding):
        def build(rng):
            c_in, c_out = rng.integers(1, 3, size=2)
            k = tuple(int(v) for v in rng.integers(1, 4, size=3))
            x = _t(rng, c_in, *rng.integers(3, 6, size=3))
            w = _t(rng, c_out, c_in, *k)
            return (lambda a, b: ad.conv3d(a, b, padding)), [x, w]
        return build

    def conv1d_case(padding):
        def build(rng):
            c_in, c_out = rng.integers(1, 4, size=2)
            k = int(rng.integers(1, 9))
            x = _t(rng, c_in, int(rng.integers(k, 16)))
            w = _t(rng, c_out, c_in, k)
            return (lambda a, b: ad.conv1d(a, b, padding)), [x, w]
        return build

    def pool3d(rng):
        return (lambda a: ad.maxpool(a, 2)), [_t(rng, 2, *rng.integers(2, 7, size=3))]

    def pool1d(rng):
        return (lambda a: ad.maxpool(a, 2)), [_t(rng, 3, int(rng.integers(2, 17)))]

    def up(rng):
        return (lambda a: ad.upsample(a, 2)), [_t(rng, 2, *rng.integers(1, 5, size=3))]

    def relu(rng):
        x = _t(rng, 3, 7)
        x.data[np.abs(x.data) < 1e-3] += 0.01  # keep away from the kink
        return ad.relu, [x]

    def binary(op):
        def build(rng):
            shape = tuple(rng.integers(1, 5, size=3))
            return op, [_t(rng, *shape), _t(rng, *shape)]
        return build

    def scale(rng):
        c = float(rng.normal())
        return (lambda a: ad.scale(a, c)), [_t(rng, 4, 3)]

    def concat(rng):
        tail = tuple(rng.integers(1, 4, size=2))
        return (lambda a, b: ad.concat_channels([a, b])), [_t(rng, 2, *tail), _t(rng, 3, *tail)]

    def bias(rng):
        return ad.add_bias, [_t(rng, 3, 4, 5), _t(rng, 3)]

    def mse(rng):
        n = int(rng.integers(2, 20))
        return (lambda a, b: ad.reshape(ad.mse_loss(a, b), (1,))), [_t(rng, n), _t(rng, n)]

    def pearson(rng):
        n = int(rng.integers(3, 30))
        return (lambda a, b: ad.reshape(ad.neg_pearson_loss(a, b), (1,))), [_t(rng, n), _t(rng, n)]

    def standardize(rng):
        return ad.standardize, [_t(rng, int(rng.integers(3, 30)))]

    def pad(rng):
        trail = [int(v) for v in rng.integers(0, 3, size=3)]
        return (lambda a: ad.pad_replicate(a, trail)), [_t(rng, 2, 3, 4, 2)]

    def crop(rng):
        return (lambda a: ad.crop(a, (2, 3))), [_t(rng, 2, 4, 5)]

    def joint(rng):
        frames = rng.standard_normal((int(rng.integers(2, 9)), 3, 4, 2))
        return (lambda m: ad.inner_per_frame(frames, m)), [_t(rng, 3, 4, 2)]

    return [
        ("conv3d_same", conv3d_case("same")), ("conv3d_valid", conv3d_case("valid")),
        ("conv1d_same", conv1d_case("same")), ("conv1d_valid", conv1d_case("valid")),
        ("maxpool3d", pool3d), ("maxpool1d", pool1d), ("upsample", up), ("relu", relu),
        ("add", binary(ad.add)), ("sub", binary(ad.sub)), ("mul", binary(ad.mul)),
        ("scale", scale), ("concat_channels", concat), ("add_bias", bias),
        ("mse_loss", mse), ("neg_pearson_loss", pearson), ("standardize", standardize),
        ("pad_replicate", pad), ("crop", crop), ("joint_operator", joint),
    ]


def check_ops(seed: int = 0, instances: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, build in op_cases():
        worst = 0.0
        for _ in range(instances):
            fn, inputs = build(rng)
            worst = max(worst, check_function(fn, inputs, rng))
        results.append(CheckResult(name, worst, OP_TOL, instances))
    return results


def _sampled(rng, params: dict[str, Tensor], n: int):
    """``n`` (tensor, flat index) pairs spread over the parameter tensors."""
    names = list(params)
    picks = []
    for i in range(n):
        name = names[rng.integers(len(names))] if i >= len(names) else names[i * len(names) // n]
        t = params[name]
        picks.append((name, int(rng.integers(t.data.size))))
    return picks


def _check_params(loss_fn, params: dict[str, Tensor], rng, n: int) -> float:
    for t in params.values():
        t.grad = None
    loss_fn().backward()

    def value():
        with ad.no_grad():
            return loss_fn().item()

    worst = 0.0
    for name, i in _sampled(rng, params, n):
        t = params[name]
        num = numeric_grad(value, t, [i])[0]
        ana = 0.0 if t.grad is None else t.grad.reshape(-1)[i]
        worst = max(worst, float(rel_error(ana, num)))
    return worst


def _generic_point(net, rng) -> None:
    """Move off the initial parameters, whose zero biases and zero output
    weights would make many gradients trivially zero."""
    for name, t in net.params.items():
        if name.endswith(".b"):
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
        elif name == "out.w":
            t.data[...] = rng.uniform(-0.5, 0.5, t.shape)


def check_unet(seed: int = 0, n_params: int = 10, shape=(6, 8, 8, 8)) -> CheckResult:
    rng = np.random.default_rng(seed)
    net = UNet3D(shape[0], levels=3, base_channels=4, seed=seed)
    _generic_point(net, rng)
    x = rng.standard_normal(shape)
    target = rng.standard_normal(shape[1:])
    worst = _check_params(lambda: spatial_loss(net(x), target), net.params, rng, n_params)
    return CheckResult("unet_params", worst, NET_TOL, n_params)


def check_cae(seed: int = 0, n_params: int = 10, length: int = 32) -> CheckResult:
    rng = np.random.default_rng(seed)
    net = TemporalCAE(seed=seed)
    _generic_point(net, rng)
    x = rng.standard_normal(length)
    target = rng.standard_normal(length)
    worst = _check_params(lambda: temporal_loss(net(x), target), net.params, rng, n_params)
    return CheckResult("cae_params", worst, NET_TOL, n_params)


def check_joint(seed: int = 0, n_params: int = 10, shape=(16, 8, 8, 8)) -> CheckResult:
    """Gradient of the weighted joint loss w.r.t. parameters of both networks."""
    rng = np.random.default_rng(seed)
    unet = UNet3D(shape[0], levels=2, base_channels=4, seed=seed)
    cae = TemporalCAE(seed=seed + 1)
    _generic_point(unet, rng)
    _generic_point(cae, rng)
    vol = Volume4D(rng.standard_normal(shape))
    label_map = rng.standard_normal(shape[1:])
    label_series = rng.standard_normal(shape[0])

    def loss():
        m, _, s = forward_full(unet, cae, vol)
        return ad.add(ad.scale(spatial_loss(m, label_map), 10.0),
                      temporal_loss(s, label_series))

    params = {f"unet.{k}": v for k, v in unet.params.items()}
    params.update({f"cae.{k}": v for k, v in cae.params.items()})
    worst = _check_params(loss, params, rng, n_params)
    return CheckResult("joint_params", worst, NET_TOL, n_params)


def run_suite(seed: int = 0, instances: int = 20) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = check_ops(seed, instances)
    results += [check_unet(seed), check_cae(seed), check_joint(seed)]
    return results, time.perf_counter() - t0
