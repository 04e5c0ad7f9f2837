"""Baseline detectors sharing the ``score(images) -> attack probability`` contract.

* LBP on HSV + YCbCr channels with a softmax classifier
* deep features from a frozen backbone, standardised, linear SVM
* a backbone with only its final classification layer fine-tuned
* a network trained from scratch
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from functools import cache
from pathlib import Path
from typing import Protocol

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC
from torch import nn

from .trainkit import ImageSplit, TrainConfig, compute_class_weights, train

logger = logging.getLogger(__name__)

ASSET_ROOT_ENV = "MORPHMAD_ASSET_ROOT"


class MissingAssetError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------- LBP


@dataclass(frozen=True)
class LbpConfig:
    crop_size: int = 64
    color_spaces: tuple[str, ...] = ("HSV", "YCbCr")
    radius: int = 1
    neighbors: int = 8
    boundary: str = "edge"  # numpy pad mode; "wrap" treats the image as a torus

    @property
    def n_bins(self) -> int:
        return self.neighbors * (self.neighbors - 1) + 3

    @property
    def feature_length(self) -> int:
        return 3 * len(self.color_spaces) * self.n_bins


def _transitions(code: int, p: int) -> int:
    bits = [(code >> i) & 1 for i in range(p)]
    return sum(bits[i] != bits[(i + 1) % p] for i in range(p))


@cache
def uniform_lut(p: int = 8) -> np.ndarray:
    """Map each p-bit code to its uniform-pattern bin; the last bin collects the rest."""
    uniform = [c for c in range(2**p) if _transitions(c, p) <= 2]
    lut = np.full(2**p, len(uniform), dtype=np.int64)
    lut[uniform] = np.arange(len(uniform))
    return lut


def _neighbor_offsets(p: int, r: int) -> list[tuple[int, int]]:
    # Counter-clockwise from the right-hand neighbour, rounded to the pixel grid.
    angles = 2 * np.pi * np.arange(p) / p
    return [(int(round(-r * np.sin(a))), int(round(r * np.cos(a)))) for a in angles]


def lbp_codes(channel: np.ndarray, neighbors: int = 8, radius: int = 1, boundary: str = "edge") -> np.ndarray:
    """Per-pixel LBP codes; bit p is set when neighbour p is strictly brighter."""
    c = np.asarray(channel, dtype=np.int64)
    padded = np.pad(c, radius, mode=boundary)
    h, w = c.shape
    codes = np.zeros((h, w), dtype=np.int64)
    for bit, (dy, dx) in enumerate(_neighbor_offsets(neighbors, radius)):
        nb = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
        codes |= (nb > c).astype(np.int64) << bit
    return codes


def to_color_spaces(image: np.ndarray, spaces: Sequence[str] = ("HSV", "YCbCr")) -> list[np.ndarray]:
    out = []
    for space in spaces:
        if space == "HSV":
            conv = cv2.cvtColor(image, cv2.COLOR_RGB2HSV)
        elif space == "YCbCr":
            conv = cv2.cvtColor(image, cv2.COLOR_RGB2YCrCb)[..., [0, 2, 1]]
        else:
            raise ValueError(f"unsupported color space {space!r}")
        out.extend(conv[..., i] for i in range(3))
    return out


def lbp_features(image: np.ndarray, config: LbpConfig = LbpConfig()) -> np.ndarray:
    """Concatenated uniform-LBP histograms (each summing to 1) of six colour channels."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an RGB image (H, W, 3), got shape {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(image, 0, 255).astype(np.uint8)
    s = config.crop_size
    if image.shape[:2] != (s, s):
        image = cv2.resize(image, (s, s), interpolation=cv2.INTER_AREA)
    lut = uniform_lut(config.neighbors)
    feats = []
    for ch in to_color_spaces(image, config.color_spaces):
        codes = lut[lbp_codes(ch, config.neighbors, config.radius, config.boundary)]
        hist = np.bincount(codes.ravel(), minlength=config.n_bins).astype(np.float64)
        feats.append(hist / hist.sum())
    return np.concatenate(feats)


class SoftmaxClassifier:
    """Two-class linear softmax model on standardised features."""

    def __init__(self, learning_rate=1e-2, weight_decay=1e-5, epochs=500, seed=0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed
        self.scaler = None
        self.weight = None
        self.bias = None

    def fit(self, features, labels, weights=None) -> SoftmaxClassifier:
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise ValueError("softmax classifier needs both classes")
        if weights is None:
            w_att, w_bf = compute_class_weights(y.tolist())
            weights = (w_bf, w_att)
        class_w = torch.tensor(weights, dtype=torch.float64)

        self.scaler = StandardScaler().fit(X)
        Xs = self.scaler.transform(X)
        if np.allclose(X.std(axis=0), 0.0):
            warnings.warn("constant features; classifier falls back to the class prior")
            prior = np.bincount(y, minlength=2) / len(y)
            self.weight = np.zeros((2, X.shape[1]))
            self.bias = np.log(prior)
            return self

        torch.manual_seed(self.seed)
        lin = nn.Linear(X.shape[1], 2).double()
        opt = torch.optim.Adam(lin.parameters(), lr=self.learning_rate, weight_decay=self.weight_decay)
        Xt = torch.from_numpy(Xs)
        yt = torch.from_numpy(y)
        for _ in range(self.epochs):
            opt.zero_grad()
            loss = F.cross_entropy(lin(Xt), yt, weight=class_w)
            loss.backward()
            opt.step()
        self.weight = lin.weight.detach().numpy().copy()
        self.bias = lin.bias.detach().numpy().copy()
        return self

    def predict_proba(self, features) -> np.ndarray:
        Xs = self.scaler.transform(np.atleast_2d(np.asarray(features, dtype=np.float64)))
        logits = Xs @ self.weight.T + self.bias
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def score_features(self, features) -> np.ndarray:
        return self.predict_proba(features)[:, 1]


def train_lbp_classifier(features, labels, weights=None, **kwargs) -> SoftmaxClassifier:
    return SoftmaxClassifier(**kwargs).fit(features, labels, weights)


class LbpDetector:
    def __init__(self, classifier: SoftmaxClassifier, config: LbpConfig = LbpConfig()):
        self.classifier = classifier
        self.config = config

    @classmethod
    def fit(cls, images, labels, config: LbpConfig = LbpConfig(), **kwargs) -> LbpDetector:
        feats = np.stack([lbp_features(im, config) for im in images])
        return cls(train_lbp_classifier(feats, labels, **kwargs), config)

    def score(self, images) -> np.ndarray:
        feats = np.stack([lbp_features(im, self.config) for im in images])
        return np.clip(self.classifier.score_features(feats), 1e-12, 1 - 1e-12)


# ---------------------------------------------------------------- providers


class BackboneProvider(Protocol):
    name: str
    input_size: int

    def extract(self, images: torch.Tensor) -> torch.Tensor: ...


class TorchBackbone(nn.Module):
    """Backbone wrapper: ``trunk`` maps preprocessed images to a feature vector
    and ``head`` is the replaceable final classification layer."""

    def __init__(self, name: str, trunk: nn.Module, head: nn.Module | None, input_size: int, feature_dim: int):
        super().__init__()
        self.name = name
        self.trunk = trunk
        self.head = head
        self.input_size = input_size
        self.feature_dim = feature_dim

    @torch.no_grad()
    def extract(self, images: torch.Tensor) -> torch.Tensor:
        was = self.trunk.training
        self.trunk.eval()
        try:
            return self.trunk(images).flatten(1)
        finally:
            self.trunk.train(was)


def asset_root() -> Path:
    return Path(os.environ.get(ASSET_ROOT_ENV, Path.home() / ".cache" / "morphmad"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_asset(name: str, registry_path=None) -> Path:
    """Look up a provider's local weight file in the asset registry.

    The registry is JSON ``{name: {"path": ..., "sha256": ...}}``, by default
    ``$MORPHMAD_ASSET_ROOT/registry.json``; relative paths resolve against
    the registry's directory.
    """
    registry_path = Path(registry_path) if registry_path else asset_root() / "registry.json"
    hint = (
        f"Place the pretrained weights locally and list them in {registry_path} as "
        f'{{"{name}": {{"path": "<file>", "sha256": "<hex>"}}}} '
        f"(set {ASSET_ROOT_ENV} to change the asset root)."
    )
    if not registry_path.is_file():
        raise MissingAssetError(f"asset registry not found for provider {name!r}. {hint}")
    registry = json.loads(registry_path.read_text(encoding="utf-8"))
    if name not in registry:
        raise MissingAssetError(f"provider {name!r} is not registered. {hint}")
    entry = registry[name]
    path = Path(entry["path"])
    if not path.is_absolute():
        path = registry_path.parent / path
    if not path.is_file():
        raise MissingAssetError(f"weights for {name!r} missing at {path}. {hint}")
    expected = entry.get("sha256")
    if expected and _sha256(path) != expected:
        raise MissingAssetError(f"weights for {name!r} at {path} fail the sha256 check. {hint}")
    return path


def load_provider(name: str, registry_path=None, layer: str | None = None) -> TorchBackbone:
    """Build an ImageNet backbone from registered local weights.

    ``vgg16``: features up to ``layer`` of the classifier (default the first
    fully connected layer, ``classifier.0``). ``inception_v3``: pooled
    features with the ``fc`` layer as head.
    """
    import torchvision.models as tvm

    path = resolve_asset(name, registry_path)
    state = torch.load(path, map_location="cpu", weights_only=True)
    if name == "vgg16":
        net = tvm.vgg16(weights=None)
        net.load_state_dict(state)
        layer = layer or "classifier.0"
        idx = int(layer.split(".")[1]) if layer.startswith("classifier.") else 0
        trunk = nn.Sequential(net.features, net.avgpool, nn.Flatten(1), *list(net.classifier.children())[: idx + 1])
        dim = [m for m in trunk.modules() if isinstance(m, nn.Linear)][-1].out_features
        return TorchBackbone(name, trunk, net.classifier[-1], 224, dim)
    if name == "inception_v3":
        net = tvm.inception_v3(weights=None, aux_logits=True, init_weights=False)
        net.load_state_dict(state)
        net.aux_logits = False
        net.AuxLogits = None
        head = net.fc
        net.fc = nn.Identity()
        return TorchBackbone(name, net, head, 299, head.in_features)
    raise MissingAssetError(f"no loader for provider {name!r}")


# ------------------------------------------------------------- feature SVM


class FeatureSvm:
    """Standardised backbone features -> linear SVM -> Platt-style sigmoid."""

    def __init__(self, provider, C: float = 1.0):
        self.provider = provider
        self.C = C
        self.scaler = StandardScaler()
        self.svm = LinearSVC(C=C, loss="hinge", dual=True, max_iter=100000)
        self.slope = 1.0
        self.offset = 0.0

    def features(self, images) -> np.ndarray:
        return self.provider.extract(images).double().numpy()

    def fit_features(self, X, labels) -> FeatureSvm:
        y = np.asarray(labels)
        Xs = self.scaler.fit_transform(X)
        self.svm.fit(Xs, y)
        d = self.svm.decision_function(Xs)
        lr = LogisticRegression(C=1e4).fit(d[:, None], y)
        a = float(lr.coef_[0, 0])
        if a > 0:
            self.slope, self.offset = a, float(lr.intercept_[0])
        else:
            logger.warning("calibration slope %.3g not positive; using identity sigmoid", a)
        return self

    def fit(self, images, labels) -> FeatureSvm:
        return self.fit_features(self.features(images), labels)

    def decision_features(self, X) -> np.ndarray:
        return self.svm.decision_function(self.scaler.transform(X))

    def calibrate(self, margins) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-(self.slope * np.asarray(margins) + self.offset)))
        return np.clip(p, 1e-12, 1 - 1e-12)

    def score(self, images) -> np.ndarray:
        return self.calibrate(self.decision_features(self.features(images)))


def train_feature_svm(provider, train_split: ImageSplit, C: float = 1.0) -> FeatureSvm:
    if train_split.tag != "train":
        raise ValueError("feature SVM must be fitted on the train split")
    return FeatureSvm(provider, C).fit(train_split.images, train_split.labels.numpy())


# ------------------------------------------------- trainable torch baselines


class TorchClassifier(nn.Module):
    """Two-logit classifier usable by ``trainkit.train``."""

    def __init__(self, trunk: nn.Module, head: nn.Module):
        super().__init__()
        self.trunk = trunk
        self.head = head

    def forward(self, x):
        return self.head(self.trunk(x).flatten(1))

    def compute_loss(self, output, labels, weights=None):
        loss = F.cross_entropy(output, labels, reduction="none")
        if weights is not None:
            loss = loss * torch.as_tensor(weights, dtype=loss.dtype)
        return loss.mean()

    def predict_score(self, output):
        return torch.softmax(output, dim=1)[:, 1]

    @torch.no_grad()
    def score(self, images) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            p = self.predict_score(self(images)).double().numpy()
        finally:
            self.train(was)
        return np.clip(p, 1e-12, 1 - 1e-12)


def finetune_classifier_head(provider: TorchBackbone, train_split, dev_split, config: TrainConfig):
    """Replace the final layer with a fresh 2-class head and train only that head."""
    torch.manual_seed(config.seed)
    trunk = provider.trunk
    for p in trunk.parameters():
        p.requires_grad_(False)
    head = nn.Linear(provider.feature_dim, 2)
    model = _FrozenTrunkClassifier(trunk, head)
    _, log = train(model, train_split, dev_split, config, parameters=head.parameters())
    return model, log


class _FrozenTrunkClassifier(TorchClassifier):
    # Frozen trunk stays in eval mode so BatchNorm statistics never change.
    def train(self, mode: bool = True):
        super().train(mode)
        self.trunk.eval()
        return self


class SmallCnn(nn.Module):
    def __init__(self, in_channels=3, width=16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.BatchNorm2d(2 * width),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.out_features = 2 * width

    def forward(self, x):
        return self.net(x)


def _inception_scratch():
    import torchvision.models as tvm

    net = tvm.inception_v3(weights=None, aux_logits=False, init_weights=True)
    head = net.fc
    net.fc = nn.Identity()
    return net, nn.Linear(head.in_features, 2)


def _small_cnn():
    trunk = SmallCnn()
    return trunk, nn.Linear(trunk.out_features, 2)


ARCHITECTURES: dict[str, Callable[[], tuple[nn.Module, nn.Module]]] = {
    "inception_v3": _inception_scratch,
    "small_cnn": _small_cnn,
}


def build_architecture(name: str, seed: int = 0) -> TorchClassifier:
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    torch.manual_seed(seed)
    return TorchClassifier(*ARCHITECTURES[name]())


def train_from_scratch(architecture_name: str, train_split, dev_split, config: TrainConfig):
    model = build_architecture(architecture_name, config.seed)
    _, log = train(model, train_split, dev_split, config)
    return model, log
