# embedding_model.py

"""
Embedding network, the two linear heads and fused inference.

The backbone maps a (N, 1, S, S) image batch to a (N, K, H, W) feature map.
The embedding is its global average pool. Two separate linear heads sit on
top: the global classifier W_G and the region-verification classifier
W_RV, which only ever sees CAM-masked features.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

import activation_maps as cam
from settings import CHECKPOINT_FORMAT_VERSION, DEFAULT_CAM_THRESHOLD

logger = logging.getLogger(__name__)


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    num_classes: int
    input_size: int = 64
    embed_dim: int = 64
    grid_size: int = 7
    backbone: str = "conv"
    channels: Tuple[int, ...] = (16, 32, 64, 64)
    strides: Tuple[int, ...] = (2, 2, 2, 1)
    in_channels: int = 1

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.strides = tuple(self.strides)
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have the same length")
        if min(self.num_classes, self.input_size, self.embed_dim, self.grid_size) < 1:
            raise ValueError("model sizes must be positive")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")


# ---------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------
class ConvBackbone(nn.Module):
    """Strided 3x3 conv blocks followed by a 1x1 projection to K channels."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        layers: List[nn.Module] = []
        c_in = config.in_channels
        for c_out, stride in zip(config.channels, config.strides):
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
            c_in = c_out
        layers += [nn.Conv2d(c_in, config.embed_dim, 1), nn.ReLU(inplace=True)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResidualBackbone(nn.Module):
    """Small residual network; the backbone family swap the joint model allows."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(config.in_channels, config.channels[0], 3, padding=1, bias=False),
                                  nn.BatchNorm2d(config.channels[0]), nn.ReLU(inplace=True))
        blocks = []
        c_in = config.channels[0]
        for c_out, stride in zip(config.channels, config.strides):
            blocks.append(ResidualBlock(c_in, c_out, stride))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.project = nn.Sequential(nn.Conv2d(c_in, config.embed_dim, 1), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.project(self.blocks(self.stem(x)))


class ToyBackbone(nn.Module):
    """Two smooth conv layers; small enough for finite-difference checks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        hidden = config.channels[0]
        self.conv1 = nn.Conv2d(config.in_channels, hidden, 3, stride=config.strides[0], padding=1)
        self.conv2 = nn.Conv2d(hidden, config.embed_dim, 1)

    def forward(self, x):
        return self.conv2(torch.tanh(self.conv1(x)))


class LinearBackbone(nn.Module):
    """A single strided convolution with no nonlinearity."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        stride = config.input_size // config.grid_size
        self.conv = nn.Conv2d(config.in_channels, config.embed_dim, stride, stride=stride)

    def forward(self, x):
        return self.conv(x)


BACKBONES = {
    "conv": ConvBackbone,
    "residual": ResidualBackbone,
    "toy": ToyBackbone,
    "linear": LinearBackbone,
}


# ---------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------
def classify_global(emb: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Independent per-class probabilities sigma(w_c . f + b_c)."""
    return torch.sigmoid(head(emb))


def classify_region(masked: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Pool the masked feature map, then apply the region head."""
    return torch.sigmoid(head(masked.mean(dim=(2, 3))))


class JointModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = BACKBONES[config.backbone](config)
        self.head_global = nn.Linear(config.embed_dim, config.num_classes)
        self.head_rv = nn.Linear(config.embed_dim, config.num_classes)

    def forward_backbone(self, images: torch.Tensor) -> torch.Tensor:
        size = self.config.input_size
        if images.dim() != 4 or tuple(images.shape[-2:]) != (size, size):
            raise ValueError(f"expected images of shape (N, C, {size}, {size}), got {tuple(images.shape)}")
        if self.config.in_channels == 3 and images.shape[1] == 1:
            images = images.expand(-1, 3, -1, -1)
        fmap = self.backbone(images)
        if fmap.shape[-1] != self.config.grid_size or fmap.shape[-2] != self.config.grid_size:
            fmap = F.adaptive_avg_pool2d(fmap, self.config.grid_size)
        return fmap

    @staticmethod
    def embed(fmap: torch.Tensor) -> torch.Tensor:
        return fmap.mean(dim=(2, 3))

    def global_logits(self, emb: torch.Tensor) -> torch.Tensor:
        return self.head_global(emb)

    def region_logits(self, masked: torch.Tensor) -> torch.Tensor:
        return self.head_rv(masked.mean(dim=(2, 3)))

    def classify_global(self, emb: torch.Tensor) -> torch.Tensor:
        return classify_global(emb, self.head_global)

    def classify_region(self, masked: torch.Tensor) -> torch.Tensor:
        return classify_region(masked, self.head_rv)

    def forward(self, images: torch.Tensor):
        fmap = self.forward_backbone(images)
        emb = self.embed(fmap)
        return fmap, emb, self.global_logits(emb)


def build_model(config: ModelConfig, seed: Optional[int] = None) -> JointModel:
    if seed is not None:
        torch.manual_seed(seed)
    return JointModel(config)


# ---------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------
@dataclass
class RegionPolicy:
    """
    How the inference-time mask is chosen: classes with global probability
    above prob_cutoff (or the single best class if none is) form the merged
    map; an empty thresholded region means no masking.
    """
    threshold: float = DEFAULT_CAM_THRESHOLD
    prob_cutoff: float = 0.5


@dataclass
class InferenceResult:
    global_logits: torch.Tensor
    region_logits: torch.Tensor
    p_global: torch.Tensor
    p_region: torch.Tensor
    p_total: torch.Tensor
    predicted_labels: torch.Tensor
    feature_map: torch.Tensor = field(repr=False)


def fuse_logits(global_logits: torch.Tensor, region_logits: torch.Tensor,
                average: bool = False) -> torch.Tensor:
    """p_total = sigma(g + r); with average=True, sigma((g + r) / 2)."""
    fused = global_logits + region_logits
    if average:
        fused = 0.5 * fused
    return torch.sigmoid(fused)


def predicted_classes(p_global: torch.Tensor, cutoff: float = 0.5) -> List[List[int]]:
    active = []
    for row in p_global:
        classes = torch.nonzero(row > cutoff).flatten().tolist()
        active.append(classes or [int(torch.argmax(row))])
    return active


@torch.no_grad()
def infer(images: torch.Tensor, model: JointModel,
          region_policy: Optional[RegionPolicy] = None,
          average_logits: bool = False) -> InferenceResult:
    region_policy = region_policy or RegionPolicy()
    model.eval()
    fmap = model.forward_backbone(images)
    g = model.global_logits(model.embed(fmap))
    p_global = torch.sigmoid(g)

    active = predicted_classes(p_global, region_policy.prob_cutoff)
    masks = cam.region_masks(fmap, model.head_global.weight, active, region_policy.threshold)
    r = model.region_logits(fmap * masks.unsqueeze(1))

    p_total = fuse_logits(g, r, average_logits)
    return InferenceResult(g, r, p_global, torch.sigmoid(r), p_total, p_total > 0.5, fmap)


@torch.no_grad()
def infer_batched(images: torch.Tensor, model: JointModel, batch_size: int = 128,
                  region_policy: Optional[RegionPolicy] = None,
                  average_logits: bool = False) -> Dict[str, torch.Tensor]:
    """Run infer over a large stack; returns concatenated probabilities."""
    parts: Dict[str, List[torch.Tensor]] = {"p_global": [], "p_region": [], "p_total": []}
    for start in range(0, len(images), batch_size):
        result = infer(images[start:start + batch_size], model, region_policy, average_logits)
        parts["p_global"].append(result.p_global)
        parts["p_region"].append(result.p_region)
        parts["p_total"].append(result.p_total)
    return {k: torch.cat(v) if v else torch.empty(0) for k, v in parts.items()}


# ---------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------
def save_checkpoint(model: JointModel, path: str, class_names: Sequence[str],
                    extra: Optional[Dict[str, Any]] = None) -> None:
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.config),
        "class_names": list(class_names),
        "extra": extra or {},
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path: str):
    """Returns (model, class_names, extra). The model is in eval mode."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {version}, expected {CHECKPOINT_FORMAT_VERSION}")
    config = ModelConfig(**blob["model_config"])
    model = JointModel(config)
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {e}") from e
    model.eval()
    return model, blob["class_names"], blob.get("extra", {})
