"""Siamese encoder, attention learner and decoder for pairwise co-segmentation."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .attention import AttentionParams, Attended, attend, channel_attention
from .config import ModelConfig
from .optim import Adam
from .tensor import Tensor, backward, no_grad


OUTPUT_INIT_GAIN = 0.1


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class CosegModel:
    """All parameters, batchnorm statistics and mode flags of one network.

    Parameters live in ``self.params`` (an ordered name -> Tensor mapping)
    so optimizers and checkpoints can walk them by name.  The same encoder
    and decoder weights serve both images of a pair.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.training = True
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, ops.BatchNormStats] = {}
        self._build(np.random.default_rng(seed))

    # construction

    def _conv(self, rng, name: str, cin: int, cout: int, k: int = 3, gain: float = 1.0) -> None:
        w = gain * _he_uniform(rng, (cout, cin, k, k), cin * k * k, self.dtype)
        self.params[f"{name}.w"] = Tensor(w.astype(self.dtype), True)
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, self.dtype), True)

    def _norm(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, self.dtype), True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, self.dtype), True)
        self.bn[name] = ops.BatchNormStats.fresh(c, self.dtype)

    def _build(self, rng) -> None:
        cfg = self.config
        cin = cfg.in_channels
        for s, width in enumerate(cfg.stage_channels):
            for j in range(cfg.convs_per_stage):
                self._conv(rng, f"enc.{s}.{j}.conv", cin, width)
                self._norm(f"enc.{s}.{j}.bn", width)
                cin = width
        c = cfg.channels
        self.params["att.w"] = Tensor(_he_uniform(rng, (c, c), c, self.dtype), True)
        self.params["att.b"] = Tensor(np.zeros(c, self.dtype), True)
        if cfg.variant == "fca":
            self.params["att.fuse.w"] = Tensor(_he_uniform(rng, (c, c), c, self.dtype), True)
            self.params["att.fuse.b"] = Tensor(np.zeros(c, self.dtype), True)
        widths = cfg.decoder_channels()
        for i, width in enumerate(widths[:-1]):
            self._conv(rng, f"dec.{i}.conv", cin, width)
            self._norm(f"dec.{i}.bn", width)
            cin = width
        # small logits at init keep the starting loss near 2 ln 2
        self._conv(rng, "dec.out", cin, widths[-1], gain=OUTPUT_INIT_GAIN)

    # mode handling

    def train(self) -> "CosegModel":
        self.training = True
        return self

    def eval(self) -> "CosegModel":
        self.training = False
        return self

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @property
    def attention_params(self) -> AttentionParams:
        p = self.params
        return AttentionParams(p["att.w"], p["att.b"], p.get("att.fuse.w"), p.get("att.fuse.b"))

    def as_input(self, image) -> Tensor:
        x = image.data if isinstance(image, Tensor) else np.asarray(image)
        if x.ndim == 3:
            x = x[None]
        return Tensor(x.astype(self.dtype, copy=False))

    # network pieces

    def encode(self, image) -> Tensor:
        """(N, 3, S, S) image -> non-negative (N, C, S/2^stages, S/2^stages) feature map."""
        x = self.as_input(image)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ValueError(
                f"expected images of shape (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}"
            )
        p = self.params
        pool = ops.avgpool2x2 if cfg.pooling == "avg" else ops.maxpool2x2
        for s in range(cfg.stages):
            for j in range(cfg.convs_per_stage):
                name = f"enc.{s}.{j}"
                x = ops.conv2d(x, p[f"{name}.conv.w"], p[f"{name}.conv.b"], 1, 1)
                x = ops.batchnorm2d(x, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], self.bn[f"{name}.bn"], self.training)
                x = ops.relu(x)
            x = pool(x)
        return x

    def channel_attention(self, f: Tensor) -> Tensor:
        return channel_attention(f, self.attention_params)

    def attend(self, fa: Tensor, fb: Tensor) -> Attended:
        return attend(fa, fb, self.attention_params, self.config.variant)

    def decode(self, f: Tensor) -> Tensor:
        """Attended features -> (N, 2, S, S) logits (channel 1 is foreground)."""
        cfg = self.config
        if f.ndim != 4 or f.shape[1] != cfg.channels or f.shape[2] != cfg.feature_size or f.shape[3] != cfg.feature_size:
            raise ValueError(
                f"decoder expects (N, {cfg.channels}, {cfg.feature_size}, {cfg.feature_size}), got {f.shape}"
            )
        p = self.params
        x = f
        for i in range(cfg.stages - 1):
            name = f"dec.{i}"
            x = ops.upsample_nearest2x(x)
            x = ops.conv2d(x, p[f"{name}.conv.w"], p[f"{name}.conv.b"], 1, 1)
            x = ops.relu(x)
            x = ops.batchnorm2d(x, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], self.bn[f"{name}.bn"], self.training)
            x = ops.dropout(x, cfg.dropout, self.training, self.rng)
        x = ops.upsample_nearest2x(x)
        return ops.conv2d(x, p["dec.out.w"], p["dec.out.b"], 1, 1)

    def forward_pair(self, image_a, image_b, return_attention: bool = False):
        """Encode both images, apply the configured attention learner, decode both.

        The decoder sees only the attended features, never the raw encoder output.
        """
        fa, fb = self.encode(image_a), self.encode(image_b)
        att = self.attend(fa, fb)
        la, lb = self.decode(att.fa), self.decode(att.fb)
        if return_attention:
            return la, lb, att
        return la, lb

    def pair_loss(self, image_a, image_b, mask_a, mask_b) -> Tensor:
        la, lb = self.forward_pair(image_a, image_b)
        return ops.add(ops.softmax_cross_entropy(la, mask_a), ops.softmax_cross_entropy(lb, mask_b))

    def predict_pair(self, image_a, image_b) -> tuple[np.ndarray, np.ndarray]:
        """Binary masks for a pair, computed in eval mode without a graph."""
        was = self.training
        self.eval()
        try:
            with no_grad():
                la, lb = self.forward_pair(image_a, image_b)
        finally:
            self.training = was
        return logits_to_mask(la), logits_to_mask(lb)


def logits_to_mask(logits: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the two channels; ties go to background."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (z[:, 1] > z[:, 0]).astype(np.uint8)


def train_step(model: CosegModel, optimizer: Adam, image_a, image_b, mask_a, mask_b) -> float:
    """One joint update of encoder, attention learner and decoder on a batch of pairs."""
    model.train()
    optimizer.zero_grad()
    loss = model.pair_loss(image_a, image_b, mask_a, mask_b)
    backward(loss)
    optimizer.step()
    return loss.item()
