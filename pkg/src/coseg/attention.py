"""Semantic attention learners: CA, FCA and CSA.

Each learner takes the two encoder feature maps of a pair and returns the
attended maps the decoder consumes.  Channel attention is a sigmoid over an
FC layer applied to globally pooled features; the FC weights are shared by
both branches.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ops
from .tensor import Tensor

VARIANTS = ("ca", "fca", "csa")


@dataclass
class AttentionParams:
    weight: Tensor
    bias: Tensor
    fuse_weight: Tensor | None = None
    fuse_bias: Tensor | None = None


@dataclass
class Attended:
    """Attended feature maps plus every attention tensor that produced them."""

    fa: Tensor
    fb: Tensor
    alpha_a: Tensor
    alpha_b: Tensor
    alpha_fused: Tensor | None = None
    spatial_a: Tensor | None = None
    spatial_b: Tensor | None = None


def _same_shape(fa: Tensor, fb: Tensor) -> None:
    if fa.shape != fb.shape:
        raise ValueError(f"feature maps differ in shape: {fa.shape} vs {fb.shape}")


def channel_attention(f: Tensor, params: AttentionParams) -> Tensor:
    """sigmoid(W^T . globalavg(f) + b), shape (N, C)."""
    if f.ndim != 4 or f.shape[1] != params.weight.shape[0]:
        raise ValueError(f"feature map {f.shape} does not match attention weight {params.weight.shape}")
    pooled = ops.pool_spatial_to_channelvec(f)
    return ops.sigmoid(ops.fully_connected(pooled, params.weight, params.bias))


def fuse_attention(alpha_a: Tensor, alpha_b: Tensor, params: AttentionParams) -> Tensor:
    if alpha_a.shape != alpha_b.shape:
        raise ValueError(f"attention vectors differ in shape: {alpha_a.shape} vs {alpha_b.shape}")
    if params.fuse_weight is None:
        raise ValueError("fusion layer parameters are missing")
    if alpha_a.shape[-1] != params.fuse_weight.shape[0]:
        raise ValueError(f"attention length {alpha_a.shape[-1]} does not match fusion weight {params.fuse_weight.shape}")
    return ops.sigmoid(ops.fully_connected(ops.add(alpha_a, alpha_b), params.fuse_weight, params.fuse_bias))


def spatial_attention(f: Tensor) -> Tensor:
    """sigmoid of the channel mean at each location, shape (N, H, W)."""
    return ops.sigmoid(ops.pool_channels_to_spatialmap(f))


def joint_selector(channel: Tensor, spatial: Tensor) -> Tensor:
    # (N, C) x (N, H, W) -> (N, C, H, W)
    n, h, w = spatial.shape
    return ops.broadcast_mul(channel, ops.reshape(spatial, (n, 1, h, w)))


def attend(fa: Tensor, fb: Tensor, params: AttentionParams, variant: str) -> Attended:
    _same_shape(fa, fb)
    alpha_a = channel_attention(fa, params)
    alpha_b = channel_attention(fb, params)
    if variant == "ca":
        # each map is filtered by the other image's selector
        return Attended(ops.broadcast_mul(alpha_b, fa), ops.broadcast_mul(alpha_a, fb), alpha_a, alpha_b)
    if variant == "fca":
        fused = fuse_attention(alpha_a, alpha_b, params)
        return Attended(ops.broadcast_mul(fused, fa), ops.broadcast_mul(fused, fb), alpha_a, alpha_b, fused)
    if variant == "csa":
        sa, sb = spatial_attention(fa), spatial_attention(fb)
        out_a = ops.broadcast_mul(joint_selector(alpha_b, sa), fa)
        out_b = ops.broadcast_mul(joint_selector(alpha_a, sb), fb)
        return Attended(out_a, out_b, alpha_a, alpha_b, spatial_a=sa, spatial_b=sb)
    raise ValueError(f"unknown attention variant {variant!r}; expected one of {VARIANTS}")


def apply_ca(fa: Tensor, fb: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    out = attend(fa, fb, params, "ca")
    return out.fa, out.fb


def apply_fca(fa: Tensor, fb: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    out = attend(fa, fb, params, "fca")
    return out.fa, out.fb


def apply_csa(fa: Tensor, fb: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    out = attend(fa, fb, params, "csa")
    return out.fa, out.fb
