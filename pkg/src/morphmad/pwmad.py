"""Pixel-wise supervised morphing attack detector.

A DenseNet-121 trunk cut after its second transition block, with a 1x1
convolution producing the supervision map and a sigmoid FC layer producing
the image-level score.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import NamedTuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigError(ValueError):
    pass


@dataclass
class PwMadConfig:
    input_size: int = 224
    in_channels: int = 3
    block_config: tuple[int, ...] = (6, 12)
    growth_rate: int = 32
    num_init_features: int = 64
    bn_size: int = 4
    compression: float = 0.5
    lam: float = 0.5
    zero_init_heads: bool = False
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    def __post_init__(self):
        self.block_config = tuple(int(b) for b in self.block_config)
        self.mean = tuple(float(m) for m in self.mean)
        self.std = tuple(float(s) for s in self.std)

    @property
    def total_stride(self) -> int:
        # stem (/4) then one /2 transition after each dense block
        return 4 * 2 ** len(self.block_config)

    @property
    def map_size(self) -> tuple[int, int]:
        m = self.input_size // self.total_stride
        return (m, m)

    def validate(self) -> None:
        if not self.block_config:
            raise ConfigError("need at least one dense block")
        if self.input_size <= 0 or self.input_size % self.total_stride:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by the total stride {self.total_stride}"
            )
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("block_config", "mean", "std"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d) -> PwMadConfig:
        return cls(**d)


class PwMadOutput(NamedTuple):
    pixel_map: torch.Tensor  # (N, H, W)
    binary_score: torch.Tensor  # (N,)


# Layer and parameter names mirror torchvision's DenseNet so that its
# ImageNet weights can be loaded into the truncated trunk.
class _DenseLayer(nn.Module):
    def __init__(self, in_features, growth_rate, bn_size):
        super().__init__()
        self.norm1 = nn.BatchNorm2d(in_features)
        self.relu1 = nn.ReLU()
        self.conv1 = nn.Conv2d(in_features, bn_size * growth_rate, 1, bias=False)
        self.norm2 = nn.BatchNorm2d(bn_size * growth_rate)
        self.relu2 = nn.ReLU()
        self.conv2 = nn.Conv2d(bn_size * growth_rate, growth_rate, 3, padding=1, bias=False)

    def forward(self, x):
        out = self.conv1(self.relu1(self.norm1(x)))
        out = self.conv2(self.relu2(self.norm2(out)))
        return torch.cat([x, out], 1)


class _DenseBlock(nn.Sequential):
    def __init__(self, num_layers, in_features, growth_rate, bn_size):
        super().__init__()
        for i in range(num_layers):
            self.add_module(f"denselayer{i + 1}", _DenseLayer(in_features + i * growth_rate, growth_rate, bn_size))


class _Transition(nn.Sequential):
    def __init__(self, in_features, out_features):
        super().__init__()
        self.norm = nn.BatchNorm2d(in_features)
        self.relu = nn.ReLU()
        self.conv = nn.Conv2d(in_features, out_features, 1, bias=False)
        self.pool = nn.AvgPool2d(2, 2)


class PwMad(nn.Module):
    def __init__(self, config: PwMadConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        layers = OrderedDict(
            conv0=nn.Conv2d(c.in_channels, c.num_init_features, 7, stride=2, padding=3, bias=False),
            norm0=nn.BatchNorm2d(c.num_init_features),
            relu0=nn.ReLU(),
            pool0=nn.MaxPool2d(3, stride=2, padding=1),
        )
        nf = c.num_init_features
        for i, n in enumerate(c.block_config):
            layers[f"denseblock{i + 1}"] = _DenseBlock(n, nf, c.growth_rate, c.bn_size)
            nf += n * c.growth_rate
            out = int(math.floor(nf * c.compression))
            layers[f"transition{i + 1}"] = _Transition(nf, out)
            nf = out
        self.features = nn.Sequential(layers)
        self.num_features = nf
        self.pixel_head = nn.Conv2d(nf, 1, 1)
        self.binary_head = nn.Linear(nf, 1)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.binary_head.bias)
        nn.init.zeros_(self.pixel_head.bias)
        if c.zero_init_heads:
            nn.init.zeros_(self.pixel_head.weight)
            nn.init.zeros_(self.binary_head.weight)

    def forward(self, x) -> PwMadOutput:
        s = self.config.input_size
        if x.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} input, got {tuple(x.shape[-2:])}")
        feats = F.relu(self.features(x))
        pixel_map = torch.sigmoid(self.pixel_head(feats)).squeeze(1)
        pooled = F.adaptive_avg_pool2d(feats, 1).flatten(1)
        binary = torch.sigmoid(self.binary_head(pooled)).squeeze(1)
        return PwMadOutput(pixel_map, binary)

    # -- trainkit protocol
    def compute_loss(self, output: PwMadOutput, labels, weights=None):
        target = labels.to(output.binary_score.dtype)
        pixel_target = target[:, None, None].expand_as(output.pixel_map)
        return overall_loss(output, pixel_target, target, self.config.lam, weights)

    def predict_score(self, output: PwMadOutput):
        return output.binary_score


def build_model(config: PwMadConfig | None = None, seed: int | None = None) -> PwMad:
    if seed is not None:
        torch.manual_seed(seed)
    return PwMad(config or PwMadConfig())


def load_densenet_weights(model: PwMad, state_dict) -> list[str]:
    """Copy matching torchvision densenet121 trunk weights; returns loaded keys."""
    own = model.state_dict()
    loaded = []
    for k, v in state_dict.items():
        if k in own and own[k].shape == v.shape:
            own[k] = v
            loaded.append(k)
    model.load_state_dict(own)
    return loaded


# ------------------------------------------------------------------- losses


def bce(y, x):
    """Binary cross-entropy -[y log x + (1-y) log(1-x)] for x in (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((x <= 0) | (x >= 1)):
        raise ValueError("bce: predicted probability must lie strictly inside (0, 1)")
    out = -(y * np.log(x) + (1.0 - y) * np.log1p(-x))
    return float(out) if out.ndim == 0 else out


def clamp_probs(x: torch.Tensor) -> torch.Tensor:
    return x.clamp(PROB_EPS, 1.0 - PROB_EPS)


def _bce_t(x, y):
    x = clamp_probs(x)
    return -(y * torch.log(x) + (1.0 - y) * torch.log1p(-x))


def overall_loss(
    output: PwMadOutput,
    pixel_target,
    binary_target,
    lam: float = 0.5,
    weights=None,
) -> torch.Tensor:
    """lam * pixel-map BCE (mean over cells) + (1 - lam) * binary BCE.

    Averaged over the batch; ``weights`` scales each sample's two terms.
    """
    pm, score = output
    pixel_target = torch.as_tensor(pixel_target, dtype=pm.dtype)
    binary_target = torch.as_tensor(binary_target, dtype=score.dtype)
    if pixel_target.shape != pm.shape or binary_target.shape != score.shape:
        raise ValueError(
            f"shape mismatch: map {tuple(pm.shape)} vs {tuple(pixel_target.shape)}, "
            f"score {tuple(score.shape)} vs {tuple(binary_target.shape)}"
        )
    l_pw = _bce_t(pm, pixel_target).flatten(1).mean(1) if pm.dim() > 1 else _bce_t(pm, pixel_target)
    l_b = _bce_t(score, binary_target)
    per_sample = lam * l_pw + (1.0 - lam) * l_b
    if weights is not None:
        per_sample = per_sample * torch.as_tensor(weights, dtype=per_sample.dtype)
    return per_sample.mean()


# -------------------------------------------------------------- inference


def preprocess_images(images, size: int, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """RGB uint8 image(s) -> normalised float tensor of shape (N, 3, size, size)."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    mean = np.asarray(mean, np.float32)
    std = np.asarray(std, np.float32)
    batch = []
    for img in images:
        img = np.asarray(img)
        if img.shape[:2] != (size, size):
            img = cv2.resize(img, (size, size), interpolation=cv2.INTER_AREA)
        x = (img.astype(np.float32) / 255.0 - mean) / std
        batch.append(x.transpose(2, 0, 1))
    return torch.from_numpy(np.stack(batch))


def preprocess(images, config: PwMadConfig) -> torch.Tensor:
    return preprocess_images(images, config.input_size, config.mean, config.std)


@torch.no_grad()
def score(model: PwMad, image) -> np.ndarray | float:
    """Attack probability from the binary head (higher = more attack-like).

    ``image`` is a preprocessed tensor (N, C, S, S) or (C, S, S).
    """
    was_training = model.training
    model.eval()
    try:
        x = torch.as_tensor(image)
        single = x.dim() == 3
        if single:
            x = x[None]
        out = model(x.to(next(model.parameters()).dtype)).binary_score.numpy()
    finally:
        model.train(was_training)
    return float(out[0]) if single else out


# ------------------------------------------------------------ checkpoints

_MAGIC = b"PWMAD001"


def save_checkpoint(path, model: PwMad, extra: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | torch state_dict``."""
    header = {
        "config": model.config.to_json(),
        "preprocessing": {
            "input_size": model.config.input_size,
            "mean": list(model.config.mean),
            "std": list(model.config.std),
            "color": "RGB",
            "scale": 1 / 255,
        },
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(buf.getvalue())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a PW-MAD checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path) -> PwMad:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a PW-MAD checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        state = torch.load(io.BytesIO(fh.read()), weights_only=True)
    model = PwMad(PwMadConfig.from_json(header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model
