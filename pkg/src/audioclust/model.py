"""Encoder, projection, and prediction head.

The encoder is a plain stack of strided 3x3 conv blocks over the
time x frequency plane, closed by a 1x1 conv to the embedding width and a
global max-pool, so one clip maps to one embedding vector. A ReLU
projection feeds the clustering stage, and a single linear head emits
cluster logits (softmax lives inside the loss); the head is cheap to
reinitialize because cluster indices carry no meaning across epochs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    conv_blocks: tuple = (
        (32, 3, 2),
        (64, 3, 2),
        (128, 3, 2),
        (256, 3, 2),
    )  # (out_channels, kernel, stride) per block; stride may be an int or a
    #   (time, freq) pair, e.g. (2, 1) to keep frequency resolution
    embedding_dim: int = 1280
    activation: str = "relu"  # "identity" exists for analysis harnesses

    def __post_init__(self) -> None:
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if not self.conv_blocks:
            raise ValueError("at least one conv block is required")
        if self.activation not in ("relu", "identity"):
            raise ValueError("activation must be 'relu' or 'identity'")
        for block in self.conv_blocks:
            if len(block) != 3:
                raise ValueError("conv block must be (out_channels, kernel, stride)")


@dataclass(frozen=True)
class HeadConfig:
    projection_width: int = 512
    num_clusters: int = 256

    def __post_init__(self) -> None:
        if self.projection_width <= 0 or self.num_clusters <= 0:
            raise ValueError("projection_width and num_clusters must be positive")


def _he_init(tensor: torch.Tensor, generator: torch.Generator) -> None:
    fan_in = tensor.shape[1] * (tensor[0, 0].numel() if tensor.dim() > 2 else 1)
    std = (2.0 / fan_in) ** 0.5
    with torch.no_grad():
        tensor.normal_(0.0, std, generator=generator)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        in_ch = 1
        for out_ch, kernel, stride in config.conv_blocks:
            if isinstance(stride, (list, tuple)):
                stride = tuple(int(s) for s in stride)
            layers.append(
                nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, dtype=dtype)
            )
            in_ch = out_ch
        self.convs = nn.ModuleList(layers)
        self.final = nn.Conv2d(in_ch, config.embedding_dim, 1, dtype=dtype)

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(x) if self.config.activation == "relu" else x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 1, T, F) -> (B, embedding_dim)
        for conv in self.convs:
            x = self._act(conv(x))
        x = self._act(self.final(x))
        return x.amax(dim=(2, 3))


class PretrainModel(nn.Module):
    """Encoder f, projection g, prediction head p."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        head_config: HeadConfig,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.encoder_config = encoder_config
        self.head_config = head_config
        self.encoder = Encoder(encoder_config, dtype=dtype)
        self.projection = nn.Linear(
            encoder_config.embedding_dim, head_config.projection_width, dtype=dtype
        )
        self.head = nn.Linear(
            head_config.projection_width, head_config.num_clusters, dtype=dtype
        )

    def encode(self, mels: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(mels).all():
            raise ValueError("non-finite values in encoder input")
        return self.encoder(mels)

    def project(self, h: torch.Tensor) -> torch.Tensor:
        return F.relu(self.projection(h))

    def predict(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(z)

    def forward(self, mels: torch.Tensor) -> torch.Tensor:
        return self.predict(self.project(self.encode(mels)))


def init_model(
    encoder_config: EncoderConfig,
    head_config: HeadConfig,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> PretrainModel:
    """He fan-in initialization for every conv/affine weight, zero biases."""
    model = PretrainModel(encoder_config, head_config, dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                _he_init(module.weight, gen)
                module.bias.zero_()
    return model


def reinit_prediction_head(model: PretrainModel, seed: int) -> PretrainModel:
    """Redraw only the head weights; encoder and projection are untouched."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        _he_init(model.head.weight, gen)
        model.head.bias.zero_()
    return model


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[label], log-sum-exp
    stabilized. Labels outside [0, c) are rejected."""
    c = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -log_probs.gather(1, labels.view(-1, 1)).mean()


def prepare_batch(
    mel_values: np.ndarray, standardize: bool, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Stack (B, T, F) log-mel arrays into a (B, 1, T, F) tensor, optionally
    standardizing each spectrogram to zero mean / unit variance. The
    standardization is a pipeline step, not part of encode(), so the raw
    encoder keeps its max-pool monotonicity."""
    x = torch.as_tensor(np.ascontiguousarray(mel_values), dtype=dtype)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if standardize:
        mean = x.mean(dim=(1, 2), keepdim=True)
        std = x.std(dim=(1, 2), keepdim=True).clamp_min(1e-6)
        x = (x - mean) / std
    return x.unsqueeze(1)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    model: PretrainModel,
    epoch: int,
    cfg_hash: str,
    optimizer: Optional[torch.optim.Optimizer] = None,
    last_labels: Optional[np.ndarray] = None,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg_hash,
        "epoch": epoch,
        "encoder_config": {
            "conv_blocks": [list(b) for b in model.encoder_config.conv_blocks],
            "embedding_dim": model.encoder_config.embedding_dim,
            "activation": model.encoder_config.activation,
        },
        "head_config": {
            "projection_width": model.head_config.projection_width,
            "num_clusters": model.head_config.num_clusters,
        },
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "last_labels": None if last_labels is None else np.asarray(last_labels),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    return payload


def model_from_checkpoint(payload: dict, dtype: torch.dtype = torch.float32) -> PretrainModel:
    enc = payload["encoder_config"]
    head = payload["head_config"]
    model = PretrainModel(
        EncoderConfig(
            conv_blocks=tuple(tuple(b) for b in enc["conv_blocks"]),
            embedding_dim=enc["embedding_dim"],
            activation=enc.get("activation", "relu"),
        ),
        HeadConfig(
            projection_width=head["projection_width"],
            num_clusters=head["num_clusters"],
        ),
        dtype=dtype,
    )
    model.load_state_dict(payload["model_state"])
    return model
