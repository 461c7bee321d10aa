"""Central finite-difference verification of every analytical backward pass.

The harness reruns the exact op implementations in double precision: inputs
and parameters are float64 arrays shared by reference with the graph, so a
probe perturbs one entry in place, re-evaluates the forward, and compares
the central difference (f(x+h) - f(x-h)) / 2h against the taped gradient.
Relative error is |g - g_fd| / max(|g|, |g_fd|, 1e-8).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import ops
from .episodes import GenConfig, generate_episode
from .tensor import Tape, Tensor, backward
from .training import ModelParams, episode_loss, init_model, zero_grads

TOLERANCE = 1e-4
STEP = 1e-4
MIN_PROBES = 100


@dataclass
class OpCheck:
    name: str
    max_rel_err: float
    probes: int
    worst_probe: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _rel_err(g: float, g_fd: float) -> float:
    return abs(g - g_fd) / max(abs(g), abs(g_fd), 1e-8)


def _central_diff(loss_fn, flat: np.ndarray, idx: int, h: float) -> float:
    orig = flat[idx]
    flat[idx] = orig + h
    f_plus = loss_fn().item()
    flat[idx] = orig - h
    f_minus = loss_fn().item()
    flat[idx] = orig
    return (f_plus - f_minus) / (2 * h)


def probe_entries(loss_fn: Callable[[], Tensor],
                  tensors: Dict[str, Tensor],
                  rng: np.random.Generator,
                  probes: int = MIN_PROBES,
                  h: float = STEP) -> Tuple[float, int, str]:
    """Max relative error over random entries of the given tensors.

    ``loss_fn`` must rebuild the graph from the tensors' ``.data`` buffers
    on each call (the graph reads them by reference). Each probe is
    validated with a second central difference at h/64: for a smooth point
    the two estimates agree to O(h^2), so disagreement means a
    non-differentiable point (a ReLU kink or clamp edge) sits inside the
    probe interval, where finite differences say nothing about the
    gradient. The wide scale separation matters: a kink lying almost
    exactly at the probe point biases both estimates of a narrow pair
    toward the same two-sided slope average, which only the much finer
    step can see. Such probes are discarded and resampled; a wrong
    analytic gradient still fails because its finite-difference estimates
    stay mutually consistent.
    """
    for t in tensors.values():
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    analytic = {}
    for name, t in tensors.items():
        if t.grad is None:
            raise AssertionError(f"no gradient reached {name}")
        analytic[name] = t.grad.copy()

    names = sorted(tensors)
    worst = 0.0
    worst_tag = ""
    done = 0
    attempts = 0
    max_attempts = 4 * probes
    while done < probes:
        attempts += 1
        if attempts > max_attempts:
            raise AssertionError(
                f"too many non-smooth probe points ({attempts - done} "
                f"discarded); inputs are unsuitable for finite differences")
        name = names[int(rng.integers(0, len(names)))]
        flat = tensors[name].data.reshape(-1)
        idx = int(rng.integers(0, flat.size))
        g_coarse = _central_diff(loss_fn, flat, idx, h)
        g_fd = _central_diff(loss_fn, flat, idx, h / 4)
        if abs(g_coarse - g_fd) > 1e-3 * max(abs(g_coarse), abs(g_fd), 1e-7):
            continue
        err = _rel_err(float(analytic[name].reshape(-1)[idx]), g_fd)
        done += 1
        if err > worst:
            worst = err
            worst_tag = f"{name}[{idx}]"
    return worst, done, worst_tag


def _t64(rng: np.random.Generator, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float64))


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return ops.sum_all(ops.mul(out, Tensor(r)))


def _check(name: str, loss_fn, tensors, rng, probes=MIN_PROBES) -> OpCheck:
    worst, done, tag = probe_entries(loss_fn, tensors, rng, probes)
    return OpCheck(name=name, max_rel_err=worst, probes=done, worst_probe=tag)


def check_primitive(name: str, rng: np.random.Generator,
                    probes: int = MIN_PROBES) -> OpCheck:
    """Finite-difference check of one primitive op on random f64 inputs."""
    r = rng  # alias
    if name == "add":
        a, b = _t64(r, 8, 13), _t64(r, 8, 13)
        w = r.standard_normal((8, 13))
        return _check(name, lambda: _weighted(ops.add(a, b), w),
                      {"a": a, "b": b}, r, probes)
    if name == "sub":
        a, b = _t64(r, 8, 13), _t64(r, 8, 13)
        w = r.standard_normal((8, 13))
        return _check(name, lambda: _weighted(ops.sub(a, b), w),
                      {"a": a, "b": b}, r, probes)
    if name == "mul":
        a, b = _t64(r, 8, 13), _t64(r, 8, 13)
        w = r.standard_normal((8, 13))
        return _check(name, lambda: _weighted(ops.mul(a, b), w),
                      {"a": a, "b": b}, r, probes)
    if name == "scale":
        a = _t64(r, 11, 11)
        w = r.standard_normal((11, 11))
        return _check(name, lambda: _weighted(ops.scale(a, 0.7), w),
                      {"a": a}, r, probes)
    if name == "relu":
        # Keep entries away from the kink at 0.
        vals = r.uniform(0.1, 1.5, size=(11, 11)) * r.choice([-1.0, 1.0], (11, 11))
        a = Tensor(vals.astype(np.float64))
        w = r.standard_normal((11, 11))
        return _check(name, lambda: _weighted(ops.relu(a), w), {"a": a}, r, probes)
    if name == "sigmoid":
        a = _t64(r, 11, 11, lo=-3, hi=3)
        w = r.standard_normal((11, 11))
        return _check(name, lambda: _weighted(ops.sigmoid(a), w), {"a": a}, r, probes)
    if name == "reshape":
        a = _t64(r, 10, 12)
        w = r.standard_normal((6, 20))
        return _check(name, lambda: _weighted(ops.reshape(a, (6, 20)), w),
                      {"a": a}, r, probes)
    if name == "transpose":
        a = _t64(r, 9, 13)
        w = r.standard_normal((13, 9))
        return _check(name, lambda: _weighted(ops.transpose(a), w), {"a": a}, r, probes)
    if name == "concat_rows":
        a, b, c = _t64(r, 4, 9), _t64(r, 6, 9), _t64(r, 3, 9)
        w = r.standard_normal((13, 9))
        return _check(name, lambda: _weighted(ops.concat_rows([a, b, c]), w),
                      {"a": a, "b": b, "c": c}, r, probes)
    if name == "concat_cols":
        a, b = _t64(r, 9, 5), _t64(r, 9, 7)
        w = r.standard_normal((9, 12))
        return _check(name, lambda: _weighted(ops.concat_cols(a, b), w),
                      {"a": a, "b": b}, r, probes)
    if name == "gather_rows":
        a = _t64(r, 9, 12)
        idx = r.integers(0, 9, size=14)   # repeats exercise accumulation
        w = r.standard_normal((14, 12))
        return _check(name, lambda: _weighted(ops.gather_rows(a, idx), w),
                      {"a": a}, r, probes)
    if name == "chw_to_rows":
        a = _t64(r, 5, 6, 4)
        w = r.standard_normal((24, 5))
        return _check(name, lambda: _weighted(ops.chw_to_rows(a), w),
                      {"a": a}, r, probes)
    if name == "rows_to_chw":
        a = _t64(r, 24, 5)
        w = r.standard_normal((5, 6, 4))
        return _check(name, lambda: _weighted(ops.rows_to_chw(a, 6, 4), w),
                      {"a": a}, r, probes)
    if name == "extract_patches":
        a = _t64(r, 1, 12, 12)
        w = r.standard_normal((9, 16))
        return _check(name, lambda: _weighted(ops.extract_patches(a, 4), w),
                      {"a": a}, r, probes)
    if name == "matmul":
        a, b = _t64(r, 8, 12), _t64(r, 12, 9)
        w = r.standard_normal((8, 9))
        return _check(name, lambda: _weighted(ops.matmul(a, b), w),
                      {"a": a, "b": b}, r, probes)
    if name == "scale_rows":
        a, s = _t64(r, 14, 9), _t64(r, 14)
        w = r.standard_normal((14, 9))
        return _check(name, lambda: _weighted(ops.scale_rows(a, s), w),
                      {"a": a, "s": s}, r, probes)
    if name == "scale_spatial":
        a, s = _t64(r, 6, 5, 4), _t64(r, 5, 4)
        w = r.standard_normal((6, 5, 4))
        return _check(name, lambda: _weighted(ops.scale_spatial(a, s), w),
                      {"a": a, "s": s}, r, probes)
    if name == "softmax_rows":
        a = _t64(r, 11, 10, lo=-2, hi=2)
        w = r.standard_normal((11, 10))
        return _check(name, lambda: _weighted(ops.softmax_rows(a), w),
                      {"a": a}, r, probes)
    if name == "layer_norm":
        a = _t64(r, 128, lo=-2, hi=2)
        w = r.standard_normal(128)
        return _check(name, lambda: _weighted(ops.layer_norm(a), w),
                      {"a": a}, r, probes)
    if name == "cosine_rows":
        # Norms bounded away from the eps floor.
        a = Tensor((r.uniform(-1, 1, (40, 4)) + np.sign(r.standard_normal((40, 4))) * 0.3).astype(np.float64))
        b = Tensor((r.uniform(-1, 1, (40, 4)) + np.sign(r.standard_normal((40, 4))) * 0.3).astype(np.float64))
        w = r.standard_normal(40)
        return _check(name, lambda: _weighted(ops.cosine_rows(a, b), w),
                      {"a": a, "b": b}, r, probes)
    if name == "linear":
        x = _t64(r, 9, 7)
        p = ops.LinearParams(weight=_t64(r, 5, 7), bias=_t64(r, 5))
        w = r.standard_normal((9, 5))
        return _check(name, lambda: _weighted(ops.linear(p, x), w),
                      {"x": x, "weight": p.weight, "bias": p.bias}, r, probes)
    if name == "conv2d":
        x = _t64(r, 3, 8, 8)
        p = ops.ConvParams(weight=_t64(r, 4, 3, 3, 3), bias=_t64(r, 4))
        w1 = r.standard_normal((4, 8, 8))
        w2 = r.standard_normal((4, 4, 4))

        def loss_fn():
            y1 = _weighted(ops.conv2d(p, x, stride=1), w1)
            y2 = _weighted(ops.conv2d(p, x, stride=2), w2)
            return ops.add(y1, y2)

        return _check(name, loss_fn,
                      {"x": x, "weight": p.weight, "bias": p.bias}, r, probes)
    if name == "sum_all":
        a = _t64(r, 13, 9)
        return _check(name, lambda: ops.sum_all(a), {"a": a}, r, probes)
    if name == "bce_loss":
        pv = Tensor(r.uniform(0.05, 0.95, size=(12, 10)).astype(np.float64))
        y = Tensor(r.integers(0, 2, size=(12, 10)).astype(np.float64))
        return _check(name, lambda: ops.bce_loss(pv, y), {"p": pv}, r, probes)
    raise ValueError(f"no gradcheck recipe for op {name!r}")


def _model_to_f64(params: ModelParams) -> ModelParams:
    clone = copy.deepcopy(params)
    for p in clone.named_parameters().values():
        p.data = p.data.astype(np.float64)
        p.zero_grad()
    return clone


def _episode_to_f64(episode):
    return replace(
        episode,
        query_image=episode.query_image.astype(np.float64),
        supports=[(img.astype(np.float64), mask)
                  for img, mask in episode.supports])


def check_composite(seed: int, probes: int = 120) -> OpCheck:
    """Finite-difference check of the full encoder -> scoring -> head loss.

    Uses a finer step than the primitive checks: the composite stacks
    softmaxes and a BCE, so curvature (and with it the O(h^2) truncation
    error) is much larger than in any single op.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 77))))
    params = _model_to_f64(init_model(seed))
    episode = _episode_to_f64(generate_episode(
        GenConfig(difficulty_weights=(0.0, 0.0, 0.0, 1.0)), seed + 1))

    named = params.named_parameters()
    zero_grads(params)
    worst, done, tag = probe_entries(lambda: episode_loss(params, episode),
                                     named, rng, probes, h=2e-5)
    return OpCheck(name="composite", max_rel_err=worst, probes=done,
                   worst_probe=tag)


def run_suite(seed: int = 7, probes: int = MIN_PROBES) -> List[OpCheck]:
    """Check every primitive op exactly once, then the full composite."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 11))))
    reports = [check_primitive(name, rng, probes) for name in ops.PRIMITIVE_OPS]
    reports.append(check_composite(seed, max(probes, 120)))
    return reports
