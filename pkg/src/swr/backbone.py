"""Tiny broadcast-residual-style backbone with an enumerable layer registry.

Layout (default config, input 1x16x32 as channels x freq x time)::

    stem    regular 3x3 conv, freq stride 2 -> BN -> relu
    block   freq depthwise (3x1)      -> BN -> relu
            time depthwise (1x3)      -> BN -> relu
            pointwise 1x1             -> BN (+ identity when shapes match) -> relu
    final   pointwise 1x1             -> BN -> relu -> global average pool

Blocks that change width also halve the frequency axis in their freq
depthwise conv. Convolutions carry no bias; only the classifier head does.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import container
from .diffcore import Tensor, ops
from .rng import Rng

KINDS = ("regular", "depthwise", "pointwise", "linear", "batchnorm")
BN_MODES = ("stats-only", "stats-and-affine")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    input_hw: tuple[int, int] = (16, 32)
    stem_channels: int = 16
    widths: tuple[int, ...] = (16, 16, 24, 24, 32, 32)
    num_features: int = 32
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # negative control for mult accounting: extra 1x1 branch beside the last block
    parallel_pointwise: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["input_hw"] = tuple(d["input_hw"])
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    weight_shape: tuple[int, ...]
    index: int | None = None  # 1..L for reparam-eligible layers
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    extra: bool = False

    @property
    def param_count(self) -> int:
        """Weight extents; batchnorm counts its affine scale and shift."""
        n = int(np.prod(self.weight_shape))
        return 2 * n if self.kind == "batchnorm" else n

    @property
    def reparam_eligible(self) -> bool:
        return self.index is not None


def _conv_out(hw, spec: LayerSpec) -> tuple[int, int]:
    kh, kw = spec.weight_shape[2:]
    return ((hw[0] + 2 * spec.padding[0] - kh) // spec.stride[0] + 1,
            (hw[1] + 2 * spec.padding[1] - kw) // spec.stride[1] + 1)


def conv_mults(spec: LayerSpec, in_hw) -> int:
    """Multiplies of one conv layer on one example: out positions x kernel taps x channel fan."""
    ho, wo = _conv_out(in_hw, spec)
    o, c, kh, kw = spec.weight_shape
    if spec.kind == "depthwise":
        return ho * wo * kh * kw * o
    return ho * wo * kh * kw * c * o


class Backbone:
    """Feature extractor f: parameters, BN running statistics, layer table."""

    def __init__(self, config: BackboneConfig, layers: list[LayerSpec], params: dict[str, Tensor],
                 bn_stats: dict[str, tuple[np.ndarray, np.ndarray]], bn_mode: str = "stats-and-affine"):
        self.config = config
        self.layers = layers
        self.params = params
        self.bn_stats = bn_stats
        self.bn_mode = bn_mode
        self._by_name = {s.name: s for s in layers}

    # registry --------------------------------------------------------------
    @property
    def eligible(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.reparam_eligible]

    @property
    def num_eligible(self) -> int:
        return len(self.eligible)

    @property
    def bn_layers(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.kind == "batchnorm"]

    def spec(self, name: str) -> LayerSpec:
        return self._by_name[name]

    def weight_count(self) -> int:
        return sum(s.param_count for s in self.layers if s.kind != "batchnorm")

    def affine_count(self) -> int:
        return sum(s.param_count for s in self.bn_layers)

    def bn_stat_count(self) -> int:
        return sum(2 * s.weight_shape[0] for s in self.bn_layers)

    def storage_count(self) -> int:
        """Everything a deployed copy stores: conv weights, BN affine and running stats."""
        return self.weight_count() + self.affine_count() + self.bn_stat_count()

    # state -----------------------------------------------------------------
    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def set_trainable(self, weights: bool | None = None, affine: bool | None = None):
        for s in self.layers:
            if s.kind == "batchnorm":
                if affine is not None:
                    self.params[s.name + ".gamma"].requires_grad = affine
                    self.params[s.name + ".beta"].requires_grad = affine
            elif weights is not None:
                self.params[s.name].requires_grad = weights

    def copy(self) -> "Backbone":
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)
                  for n, p in self.params.items()}
        stats = {n: (m.copy(), v.copy()) for n, (m, v) in self.bn_stats.items()}
        return Backbone(self.config, self.layers, params, stats, self.bn_mode)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every stored array in registry order (weights, affine, running stats)."""
        out = []
        for s in self.layers:
            if s.kind == "batchnorm":
                out += [(s.name + ".gamma", self.params[s.name + ".gamma"].data),
                        (s.name + ".beta", self.params[s.name + ".beta"].data),
                        (s.name + ".running_mean", self.bn_stats[s.name][0]),
                        (s.name + ".running_var", self.bn_stats[s.name][1])]
            else:
                out.append((s.name, self.params[s.name].data))
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    # forward ---------------------------------------------------------------
    def _conv(self, x: Tensor, name: str, weight) -> Tensor:
        s = self._by_name[name]
        w = weight(name)
        if s.kind == "regular":
            return ops.conv2d(x, w, s.stride, s.padding)
        if s.kind == "depthwise":
            return ops.depthwise_conv2d(x, w, s.stride, s.padding)
        return ops.pointwise_conv2d(x, w)

    def _bn(self, x: Tensor, name: str, train: bool) -> Tensor:
        mean, var = self.bn_stats[name]
        return ops.batch_norm(x, self.params[name + ".gamma"], self.params[name + ".beta"],
                              mean, var, train, self.config.bn_momentum, self.config.bn_eps)

    def forward(self, x: Tensor, train: bool = False, weight=None) -> Tensor:
        """Features (batch, num_features). ``weight(name)`` overrides conv weights."""
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, *cfg.input_hw):
            raise ValueError(f"backbone expects (N, {cfg.in_channels}, {cfg.input_hw[0]}, "
                             f"{cfg.input_hw[1]}) input, got {x.shape}")
        weight = weight or (lambda n: self.params[n])
        h = ops.relu(self._bn(self._conv(x, "stem", weight), "stem.bn", train))
        for b in range(len(cfg.widths)):
            p = f"block{b}"
            inp = h
            h = ops.relu(self._bn(self._conv(h, p + ".freq_dw", weight), p + ".freq_bn", train))
            h = ops.relu(self._bn(self._conv(h, p + ".time_dw", weight), p + ".time_bn", train))
            h = self._bn(self._conv(h, p + ".pw", weight), p + ".pw_bn", train)
            if p + ".side" in self._by_name:
                h = ops.add(h, self._conv(inp, p + ".side", weight))
            if inp.shape == h.shape:
                h = ops.add(h, inp)
            h = ops.relu(h)
        h = ops.relu(self._bn(self._conv(h, "final", weight), "final.bn", train))
        return ops.global_avg_pool(h)


def build_tiny_bcnet(config: BackboneConfig | None = None, seed: int = 0) -> Backbone:
    config = config or BackboneConfig()
    if config.stem_channels < 1 or config.num_features < 1 or any(w < 1 for w in config.widths):
        raise ValueError("channel widths must be >= 1")
    if len(config.widths) < 2:
        raise ValueError("block count must be >= 2")
    layers: list[LayerSpec] = []
    counter = [0]

    def conv(name, kind, shape, stride=(1, 1), padding=(0, 0), extra=False):
        if extra:
            idx = None
        else:
            counter[0] += 1
            idx = counter[0]
        layers.append(LayerSpec(name, kind, tuple(shape), idx, stride, padding, extra))

    def bn(name, c):
        layers.append(LayerSpec(name, "batchnorm", (c,)))

    c = config.stem_channels
    conv("stem", "regular", (c, config.in_channels, 3, 3), stride=(2, 1), padding=(1, 1))
    bn("stem.bn", c)
    for b, width in enumerate(config.widths):
        p = f"block{b}"
        fstride = (2, 1) if width != c else (1, 1)
        conv(p + ".freq_dw", "depthwise", (c, 1, 3, 1), stride=fstride, padding=(1, 0))
        bn(p + ".freq_bn", c)
        conv(p + ".time_dw", "depthwise", (c, 1, 1, 3), padding=(0, 1))
        bn(p + ".time_bn", c)
        conv(p + ".pw", "pointwise", (width, c, 1, 1))
        bn(p + ".pw_bn", width)
        if config.parallel_pointwise and b == len(config.widths) - 1:
            conv(p + ".side", "pointwise", (width, c, 1, 1), extra=True)
        c = width
    conv("final", "pointwise", (config.num_features, c, 1, 1))
    bn("final.bn", config.num_features)

    if counter[0] == 0:
        raise ValueError("configuration yields no reparametrizable layers")

    rng = Rng(seed, ("backbone-init",))
    params: dict[str, Tensor] = {}
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for s in layers:
        if s.kind == "batchnorm":
            n = s.weight_shape[0]
            params[s.name + ".gamma"] = Tensor(np.ones(n, dtype=np.float32), requires_grad=True, name=s.name + ".gamma")
            params[s.name + ".beta"] = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True, name=s.name + ".beta")
            stats[s.name] = (np.zeros(n, dtype=np.float32), np.ones(n, dtype=np.float32))
        else:
            fan_in = int(np.prod(s.weight_shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            if s.extra:
                std *= 0.1
            params[s.name] = Tensor(rng.split(s.name).normal(s.weight_shape, std),
                                    requires_grad=True, name=s.name)
    per_layer_hw(config, layers)
    return Backbone(config, layers, params, stats)


def per_layer_hw(config: BackboneConfig, layers: list[LayerSpec], input_hw=None) -> dict[str, tuple]:
    """Input spatial size seen by each conv layer, following forward order."""
    hw = tuple(input_hw or config.input_hw)
    seen: dict[str, tuple] = {}
    block_in = hw
    for s in layers:
        if s.kind in ("batchnorm", "linear"):
            continue
        if s.name.endswith(".freq_dw"):
            block_in = hw
        if s.extra:
            seen[s.name] = block_in
            continue
        seen[s.name] = hw
        hw = _conv_out(hw, s)
        if hw[0] < 1 or hw[1] < 1:
            raise ValueError(f"layer {s.name} reduces the feature map to {hw}")
    return seen


def count_mults(backbone: Backbone, input_shape=None, head: "ClassifierHead | None" = None) -> int:
    """Exact multiply count of one forward pass for one example.

    ``input_shape`` is (C, H, W) or (N, C, H, W); a leading batch extent
    scales the total. BN, pooling and additions are not counted.
    """
    cfg = backbone.config
    shape = tuple(input_shape) if input_shape is not None else (cfg.in_channels, *cfg.input_hw)
    batch = 1
    if len(shape) == 4:
        batch, shape = shape[0], shape[1:]
    if len(shape) != 3 or shape[0] != cfg.in_channels:
        raise ValueError(f"input shape {input_shape} does not match in_channels={cfg.in_channels}")
    hws = per_layer_hw(cfg, backbone.layers, shape[1:])
    total = sum(conv_mults(backbone.spec(n), hw) for n, hw in hws.items())
    if head is not None:
        total += head.in_features * head.num_classes
    return batch * total


def set_bn_transfer_mode(backbone: Backbone, mode: str):
    """stats-only freezes BN affine; stats-and-affine makes it trainable."""
    if mode not in BN_MODES:
        raise ValueError(f"unknown BN transfer mode {mode!r}; choose from {BN_MODES}")
    if not backbone.bn_layers:
        raise ValueError("backbone has no batchnorm layers")
    backbone.bn_mode = mode
    backbone.set_trainable(affine=(mode == "stats-and-affine"))


class ClassifierHead:
    """Task head g_t: features -> class logits."""

    def __init__(self, in_features: int, num_classes: int, rng: Rng | None = None, zero: bool = False):
        self.in_features = in_features
        self.num_classes = num_classes
        if zero or rng is None:
            w = np.zeros((in_features, num_classes), dtype=np.float32)
        else:
            bound = 1.0 / np.sqrt(in_features)
            w = rng.uniform((in_features, num_classes), -bound, bound)
        self.weight = Tensor(w, requires_grad=True, name="head.weight")
        self.bias = Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True, name="head.bias")

    @property
    def param_count(self) -> int:
        return self.in_features * self.num_classes + self.num_classes

    def parameters(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def __call__(self, features: Tensor) -> Tensor:
        return ops.linear(features, self.weight, self.bias)

    def copy(self) -> "ClassifierHead":
        h = ClassifierHead(self.in_features, self.num_classes, zero=True)
        h.weight.data = self.weight.data.copy()
        h.bias.data = self.bias.data.copy()
        return h

    def named_arrays(self, prefix: str = "head") -> list[tuple[str, np.ndarray]]:
        return [(prefix + ".weight", self.weight.data), (prefix + ".bias", self.bias.data)]

    @classmethod
    def from_arrays(cls, weight: np.ndarray, bias: np.ndarray) -> "ClassifierHead":
        h = cls(weight.shape[0], weight.shape[1], zero=True)
        h.weight.data = np.asarray(weight, dtype=np.float32).copy()
        h.bias.data = np.asarray(bias, dtype=np.float32).copy()
        return h


def forward(backbone: Backbone, head: ClassifierHead, batch: Tensor, mode: str = "eval", weight=None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return head(backbone.forward(batch, train=(mode == "train"), weight=weight))


def layer_table(backbone: Backbone) -> list[dict]:
    return [{"name": s.name, "kind": s.kind, "shape": list(s.weight_shape), "index": s.index,
             "param_count": s.param_count} for s in backbone.layers]


# checkpoint IO --------------------------------------------------------------

def save_checkpoint(path, backbone: Backbone, heads: dict[str, ClassifierHead] | None = None,
                    extra: dict | None = None):
    heads = heads or {}
    manifest = {
        "kind": "backbone",
        "config": asdict(backbone.config),
        "layers": layer_table(backbone),
        "bn_mode": backbone.bn_mode,
        "heads": {k: [h.in_features, h.num_classes] for k, h in sorted(heads.items())},
        "fingerprint": backbone.fingerprint(),
    }
    if extra:
        manifest["extra"] = extra
    tensors = backbone.named_arrays()
    for k, h in sorted(heads.items()):
        tensors += h.named_arrays(f"heads.{k}")
    container.save(path, container.CKPT_MAGIC, manifest, tensors)


def backbone_from_arrays(manifest: dict, arrays: dict[str, np.ndarray]) -> Backbone:
    config = BackboneConfig.from_dict(manifest["config"])
    bb = build_tiny_bcnet(config)
    if layer_table(bb) != manifest["layers"]:
        raise container.FormatError("layer table in manifest does not match the configured backbone")
    for name, arr in arrays.items():
        if name.startswith("heads."):
            continue
        if name.endswith(".running_mean"):
            bb.bn_stats[name[:-len(".running_mean")]][0][...] = arr
        elif name.endswith(".running_var"):
            bb.bn_stats[name[:-len(".running_var")]][1][...] = arr
        elif name in bb.params:
            if bb.params[name].shape != arr.shape:
                raise container.FormatError(f"tensor {name} has shape {arr.shape}, expected {bb.params[name].shape}")
            bb.params[name].data = arr.copy()
        else:
            raise container.FormatError(f"unexpected tensor {name}")
    mode = manifest.get("bn_mode", "stats-and-affine")
    bb.bn_mode = mode
    bb.set_trainable(affine=(mode == "stats-and-affine"))
    return bb


def load_checkpoint(path) -> tuple[Backbone, dict[str, ClassifierHead], dict]:
    manifest, arrays = container.load(path, container.CKPT_MAGIC)
    if manifest.get("kind") != "backbone":
        raise container.FormatError(f"{path} is not a backbone checkpoint")
    bb = backbone_from_arrays(manifest, arrays)
    heads = {k: ClassifierHead.from_arrays(arrays[f"heads.{k}.weight"], arrays[f"heads.{k}.bias"])
             for k in manifest.get("heads", {})}
    return bb, heads, manifest
