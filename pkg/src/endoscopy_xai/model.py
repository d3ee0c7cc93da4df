"""Classifier assembly: pretrained backbone plus the regularized dense head.

Layer order of the head is BatchNorm -> Dense(256, ReLU) -> Dropout(0.6) ->
Dense(C, softmax).  The head's building blocks (penalties, dropout, softmax)
are plain functions so they can be checked against hand computations.
"""

import copy
import re
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ._io import atomic_path, read_json, write_json


class ConfigurationError(ValueError):
    pass


class BackboneLoadError(RuntimeError):
    """Pretrained weights could not be fetched or read."""


@dataclass(frozen=True)
class HeadConfig:
    dense_units: int = 256
    dropout_rate: float = 0.6
    l2_kernel: float = 0.16
    l1_activity: float = 0.006
    l1_bias: float = 0.06
    bn_momentum: float = 0.99
    bn_epsilon: float = 0.001
    num_classes: int = 8

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if min(self.l2_kernel, self.l1_activity, self.l1_bias) < 0:
            raise ConfigurationError("penalty coefficients must be nonnegative")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.dense_units < 1:
            raise ConfigurationError("dense_units must be >= 1")


def _is_tensor(x):
    return isinstance(x, torch.Tensor)


def l1_penalty(values, lam):
    """``lam * sum(|v|)``; differentiable when given a tensor."""
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    if not _is_tensor(values):
        values = np.asarray(values, dtype=np.float64)
    return lam * abs(values).sum()


def l2_penalty(weights, lam):
    """``lam * sum(w**2)``; differentiable when given a tensor."""
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    if not _is_tensor(weights):
        weights = np.asarray(weights, dtype=np.float64)
    return lam * (weights * weights).sum()


def dropout_forward(inputs, rate, training_mode, rng=None):
    """Inverted dropout: ``y = 0`` if ``r < rate`` else ``x / (1 - rate)``.

    ``rng`` is a numpy Generator for arrays or a torch Generator for tensors.
    """
    if not 0 <= rate < 1:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training_mode or rate == 0:
        return inputs
    if _is_tensor(inputs):
        r = torch.rand(inputs.shape, generator=rng, device=inputs.device, dtype=inputs.dtype)
        return torch.where(r < rate, torch.zeros_like(inputs), inputs / (1 - rate))
    rng = rng if rng is not None else np.random.default_rng()
    x = np.asarray(inputs)
    r = rng.random(x.shape)
    return np.where(r < rate, 0.0, x / (1 - rate))


def softmax(logits, axis=-1):
    """Max-shifted softmax; NaN input raises instead of propagating."""
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise FloatingPointError("softmax received NaN logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Dropout(nn.Module):
    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x):
        return dropout_forward(x, self.rate, self.training)


class ClassifierHead(nn.Module):
    def __init__(self, in_features, config):
        super().__init__()
        self.config = config
        # torch momentum weights the new batch statistic, keras momentum the old one
        self.norm = nn.BatchNorm1d(in_features, eps=config.bn_epsilon, momentum=1 - config.bn_momentum)
        self.dense = nn.Linear(in_features, config.dense_units)
        self.dropout = Dropout(config.dropout_rate)
        self.logits = nn.Linear(config.dense_units, config.num_classes)

    def forward(self, features):
        hidden = torch.relu(self.dense(self.norm(features)))
        return self.logits(self.dropout(hidden)), hidden

    def regularization(self, hidden):
        """Kernel L2 + activity L1 (per-sample mean) + bias L1 on the 256-unit layer."""
        cfg = self.config
        return (
            l2_penalty(self.dense.weight, cfg.l2_kernel)
            + l1_penalty(hidden, cfg.l1_activity) / max(len(hidden), 1)
            + l1_penalty(self.dense.bias, cfg.l1_bias)
        )


class Network(nn.Module):
    """backbone -> head; ``forward`` takes NCHW float tensors and returns logits."""

    def __init__(self, backbone, head):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward_with_activations(self, x):
        return self.head(self.backbone(x))

    def forward(self, x):
        return self.forward_with_activations(x)[0]


# -- backbones -----------------------------------------------------------------

class StubBackbone(nn.Module):
    """Parameter-free feature extractor: per-channel mean colour mapped to
    [-1, 1], tiled to ``num_features`` with fixed scales.  Used for desk-scale
    runs; centring keeps BatchNorm's initial running statistics sensible."""

    def __init__(self, num_features=3):
        super().__init__()
        self.num_features = num_features
        self.channel = [j % 3 for j in range(num_features)]
        self.scale = [1.0 + j // 3 for j in range(num_features)]

    def forward(self, x):
        means = x.mean(dim=(2, 3)) / 127.5 - 1.0
        cols = [means[:, c] * s for c, s in zip(self.channel, self.scale)]
        return torch.stack(cols, dim=1)


class TorchvisionBackbone(nn.Module):
    """A torchvision classifier trunk with global average pooling.

    Takes raw 0-255 RGB and applies the ImageNet rescaling internally, so the
    data pipeline can feed unnormalized pixels.
    """

    def __init__(self, trunk, num_features):
        super().__init__()
        self.trunk = trunk
        self.num_features = num_features
        self.pool = nn.AdaptiveAvgPool2d(1)
        # plain attributes, not buffers: constants are not weights
        self._mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self._std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    def forward(self, x):
        x = (x / 255.0 - self._mean) / self._std
        return torch.flatten(self.pool(self.trunk(x)), 1)


def _torchvision_trunk(name, weights):
    import torchvision

    try:
        tv_weights = "DEFAULT" if weights == "imagenet" else None
        net = torchvision.models.get_model(name, weights=tv_weights)
    except ValueError as exc:
        raise ConfigurationError(f"unknown backbone {name!r}") from exc
    except Exception as exc:  # network, cache and hash failures all land here
        raise BackboneLoadError(f"could not load pretrained weights for {name}: {exc}") from exc

    if name.startswith(("efficientnet", "mobilenet")):
        trunk = net.features
        width = next(m for m in net.classifier.modules() if isinstance(m, nn.Linear)).in_features
    elif name.startswith("densenet"):
        trunk = nn.Sequential(net.features, nn.ReLU())
        width = net.classifier.in_features
    elif name.startswith(("resnet", "resnext", "wide_resnet")):
        trunk = nn.Sequential(*list(net.children())[:-2])
        width = net.fc.in_features
    elif name.startswith("vgg"):
        trunk = net.features
        width = 512
    else:
        raise ConfigurationError(f"backbone family of {name!r} is not supported")

    backbone = TorchvisionBackbone(trunk, width)
    if weights not in (None, "imagenet"):
        try:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            backbone.trunk.load_state_dict(state)
        except (OSError, RuntimeError) as exc:
            raise BackboneLoadError(f"could not read backbone weights {weights}: {exc}") from exc
    return backbone


_REGISTRY = {}


def register_backbone(name, factory):
    """Register ``factory(weights) -> module`` with a ``num_features`` attribute."""
    _REGISTRY[name] = factory


def make_backbone(backbone_id, weights="imagenet"):
    if backbone_id in _REGISTRY:
        return _REGISTRY[backbone_id](weights)
    m = re.fullmatch(r"stub-(\d+)", backbone_id)
    if m:
        return StubBackbone(int(m.group(1)))
    if re.fullmatch(r"[a-z0-9_]+", backbone_id):
        return _torchvision_trunk(backbone_id, weights)
    raise ConfigurationError(f"unknown backbone {backbone_id!r}")


# -- assembled model -------------------------------------------------------------

def count_parameters(model):
    """Total element count of every weight array, BatchNorm running statistics
    included (four arrays per normalized channel)."""
    if model is None:
        return 0
    module = model.network if isinstance(model, ClassifierModel) else model
    total = sum(p.numel() for p in module.parameters())
    total += sum(b.numel() for b in module.buffers() if b.is_floating_point())
    return int(total)


@dataclass
class ClassifierModel:
    backbone_id: str
    head: HeadConfig
    network: Network
    trainable_backbone: bool = True
    seed: int = 0
    class_names: list = field(default_factory=list)

    @property
    def parameter_count(self):
        return count_parameters(self)

    def predict_proba(self, pixels, batch_size=64):
        """Softmax probabilities for an ``N x H x W x 3`` batch, evaluation mode."""
        pixels = np.asarray(pixels, dtype=np.float32)
        self.network.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(pixels), batch_size):
                x = torch.from_numpy(np.ascontiguousarray(pixels[start:start + batch_size].transpose(0, 3, 1, 2)))
                out.append(torch.softmax(self.network(x).double(), dim=1).numpy())
        if not out:
            return np.zeros((0, self.head.num_classes))
        return np.concatenate(out)

    def copy_weights(self):
        return copy.deepcopy(self.network.state_dict())

    def load_weights(self, state):
        self.network.load_state_dict(state)


def build_classifier(backbone_id="efficientnet_b3", head_config=None, trainable_backbone=True,
                     seed=0, weights="imagenet", class_names=None):
    """Backbone (pooled features) followed by a freshly seeded head."""
    head_config = head_config or HeadConfig()
    backbone = make_backbone(backbone_id, weights)
    for p in backbone.parameters():
        p.requires_grad_(trainable_backbone)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = ClassifierHead(backbone.num_features, head_config)
    return ClassifierModel(backbone_id, head_config, Network(backbone, head), trainable_backbone,
                           seed, list(class_names or []))


def save_checkpoint(model, path, extra=None):
    """Write ``path`` (torch state dict) and ``path + '.json'`` (metadata)."""
    with atomic_path(path) as tmp:
        torch.save(model.network.state_dict(), tmp)
    meta = {
        "backbone_id": model.backbone_id,
        "head": asdict(model.head),
        "class_names": list(model.class_names),
        "seed": model.seed,
        "trainable_backbone": model.trainable_backbone,
        "parameter_count": model.parameter_count,
    }
    meta.update(extra or {})
    write_json(f"{path}.json", meta)
    return meta


def load_checkpoint(path):
    meta = read_json(f"{path}.json")
    model = build_classifier(meta["backbone_id"], HeadConfig(**meta["head"]),
                             meta.get("trainable_backbone", True), meta.get("seed", 0),
                             weights=None, class_names=meta.get("class_names"))
    model.load_weights(torch.load(path, map_location="cpu", weights_only=True))
    return model, meta
