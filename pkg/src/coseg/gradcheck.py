"""Central finite-difference checks for the differentiable primitives.

The error measure is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
taken elementwise and maximised.  The floor (default 1e-3) keeps entries whose
true derivative is essentially zero from dividing noise by noise.  Scalar
losses are formed by contracting the output with a fixed random tensor so
that every output element carries an O(1) weight.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad


def numerical_gradient(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-4,
                       indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_function(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
                   seed: int = 0, floor: float = 1e-3) -> float:
    """Max relative error of d(sum(R * fn(*inputs)))/d(input) over all inputs requiring grad."""
    rng = np.random.default_rng(seed)
    with no_grad():
        out_shape = fn(*inputs).shape
    weights = Tensor(rng.standard_normal(out_shape))

    def loss_value() -> float:
        with no_grad():
            return float(np.sum(fn(*inputs).data * weights.data))

    for t in inputs:
        t.grad = None
    loss = ops.sum_all(ops.broadcast_mul(fn(*inputs), weights))
    backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        numeric = numerical_gradient(loss_value, t.data, eps)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst


@dataclass
class SuiteResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _rand(rng, *shape, requires_grad=True):
    data = rng.standard_normal(shape)
    return Tensor(data, requires_grad=requires_grad)


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    """One randomized 64-bit case per differentiable primitive (shapes up to 2x4x6x6)."""
    rng = np.random.default_rng(seed)
    stats = ops.BatchNormStats.fresh(4)
    eval_stats = ops.BatchNormStats(rng.standard_normal(4), np.abs(rng.standard_normal(4)) + 0.5)
    mask_rng_seed = int(rng.integers(1 << 31))
    target = rng.integers(0, 2, (2, 6, 6))

    def dropout_fixed(x):
        return ops.dropout(x, 0.3, True, np.random.default_rng(mask_rng_seed))

    return {
        "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, 1, 1),
                   [_rand(rng, 2, 3, 6, 6), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)]),
        "conv2d_stride2": (lambda x, w, b: ops.conv2d(x, w, b, 2, 0),
                           [_rand(rng, 2, 2, 6, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)]),
        "relu": (ops.relu, [_rand(rng, 2, 4, 6, 6)]),
        "sigmoid": (ops.sigmoid, [_rand(rng, 2, 4, 6, 6)]),
        "batchnorm2d_train": (lambda x, g, b: ops.batchnorm2d(x, g, b, stats, True),
                              [_rand(rng, 2, 4, 6, 6), _rand(rng, 4), _rand(rng, 4)]),
        "batchnorm2d_eval": (lambda x, g, b: ops.batchnorm2d(x, g, b, eval_stats, False),
                             [_rand(rng, 2, 4, 6, 6), _rand(rng, 4), _rand(rng, 4)]),
        "dropout": (dropout_fixed, [_rand(rng, 2, 4, 6, 6)]),
        "upsample_nearest2x": (ops.upsample_nearest2x, [_rand(rng, 2, 4, 3, 3)]),
        "avgpool2x2": (ops.avgpool2x2, [_rand(rng, 2, 4, 6, 6)]),
        "maxpool2x2": (ops.maxpool2x2, [_rand(rng, 2, 4, 6, 6)]),
        "pool_spatial_to_channelvec": (ops.pool_spatial_to_channelvec, [_rand(rng, 2, 4, 6, 6)]),
        "pool_channels_to_spatialmap": (ops.pool_channels_to_spatialmap, [_rand(rng, 2, 4, 6, 6)]),
        "fully_connected": (ops.fully_connected, [_rand(rng, 2, 4), _rand(rng, 4, 3), _rand(rng, 3)]),
        "broadcast_mul_channel": (ops.broadcast_mul, [_rand(rng, 2, 4), _rand(rng, 2, 4, 6, 6)]),
        "broadcast_mul_spatial": (ops.broadcast_mul, [_rand(rng, 2, 6, 6), _rand(rng, 2, 4, 6, 6)]),
        "add": (ops.add, [_rand(rng, 2, 4), _rand(rng, 2, 4)]),
        "softmax_cross_entropy": (lambda z: ops.softmax_cross_entropy(z, target),
                                  [_rand(rng, 2, 2, 6, 6)]),
    }


def run_primitive_suite(seed: int = 0, tolerance: float = 1e-4) -> list[SuiteResult]:
    results = []
    for name, (fn, inputs) in primitive_cases(seed).items():
        t0 = time.perf_counter()
        err = check_function(fn, inputs, seed=seed)
        results.append(SuiteResult(name, err, tolerance, time.perf_counter() - t0))
    return results


def check_pair_loss(variant: str, n_params: int = 20, seed: int = 0, eps: float = 1e-4,
                    floor: float = 1e-3) -> float:
    """Finite-difference check of the full pair loss on a tiny 64-bit model.

    Runs in train mode (batch statistics, dropout); the dropout generator is
    re-seeded before every evaluation so all evaluations see the same masks.
    """
    from .config import ModelConfig
    from .network import CosegModel

    cfg = ModelConfig(stage_channels=(3, 4), convs_per_stage=1, input_size=8, variant=variant, dropout=0.2)
    model = CosegModel(cfg, seed=seed, dtype=np.float64).train()
    rng = np.random.default_rng(seed + 17)
    img_a, img_b = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
    mask_a, mask_b = rng.integers(0, 2, (2, 8, 8)), rng.integers(0, 2, (2, 8, 8))

    def loss_tensor():
        model.rng = np.random.default_rng(seed + 99)
        return model.pair_loss(img_a, img_b, mask_a, mask_b)

    def loss_value() -> float:
        with no_grad():
            return loss_tensor().item()

    for p in model.params.values():
        p.grad = None
    backward(loss_tensor())

    names = list(model.params)
    sizes = np.array([model.params[k].data.size for k in names])
    flat = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for f in sorted(flat):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        p = model.params[names[k]]
        i = int(f - offsets[k])
        numeric.append(numerical_gradient(loss_value, p.data, eps, indices=[i]).reshape(-1)[i])
        analytic.append(p.grad.reshape(-1)[i])
    return relative_error(np.array(analytic), np.array(numeric), floor)


def run_end_to_end_suite(seed: int = 0, tolerance: float = 1e-3) -> list[SuiteResult]:
    results = []
    for variant in ("ca", "fca", "csa"):
        t0 = time.perf_counter()
        err = check_pair_loss(variant, seed=seed)
        results.append(SuiteResult(f"pair_loss_{variant}", err, tolerance, time.perf_counter() - t0))
    return results
