"""Additive weight reparametrization w_l = w0_l + b_l * delta_l over a frozen backbone."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .backbone import Backbone, ClassifierHead, LayerSpec, set_bn_transfer_mode
from .diffcore import Tensor, ops

RECORD_KINDS = ("swr", "full", "classifier")


class ReparamModel:
    """A wrapped backbone: frozen w0, one zero-initialized delta per eligible layer, policy bits.

    All bits at 1 is the super-net. ``forward`` also accepts a length-L
    tensor of relaxed bits (hard Gumbel samples carrying straight-through
    gradients) which then replace the stored bits.
    """

    def __init__(self, base: Backbone, head: ClassifierHead | None = None):
        self.base = base
        self.head = head
        self.specs: list[LayerSpec] = base.eligible
        self.deltas: dict[str, Tensor] = {
            s.name: Tensor(np.zeros(s.weight_shape, dtype=np.float32), requires_grad=True,
                           name=f"delta.{s.name}")
            for s in self.specs
        }
        self._index = {s.name: i for i, s in enumerate(self.specs)}
        self.bits = np.ones(len(self.specs), dtype=np.int64)
        self.base_fingerprint = ""

    @property
    def num_layers(self) -> int:
        return len(self.specs)

    def w0(self, name: str) -> Tensor:
        return self.base.params[name]

    def effective_weight(self, name: str, relaxed: Tensor | None = None) -> Tensor:
        i = self._index.get(name)
        w0 = self.w0(name)
        if i is None:
            return w0
        delta = self.deltas[name]
        if relaxed is not None:
            return ops.add(w0, ops.mul(delta, ops.getitem(relaxed, i)))
        if self.bits[i]:
            return ops.add(w0, delta)
        return w0

    def features(self, x: Tensor, train: bool = False, relaxed: Tensor | None = None) -> Tensor:
        if relaxed is not None and relaxed.shape != (self.num_layers,):
            raise ValueError(f"relaxed policy must have shape ({self.num_layers},), got {relaxed.shape}")
        return self.base.forward(x, train=train, weight=lambda n: self.effective_weight(n, relaxed))

    def forward(self, x: Tensor, train: bool = False, relaxed: Tensor | None = None) -> Tensor:
        if self.head is None:
            raise ValueError("reparam model has no classifier head attached")
        return self.head(self.features(x, train, relaxed))

    __call__ = forward

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = {d.name: d for d in self.deltas.values() if d.requires_grad}
        params.update(self.base.trainable_parameters())
        if self.head is not None:
            params.update({k: v for k, v in self.head.parameters().items() if v.requires_grad})
        return params

    def freeze(self):
        """Stop every tensor of the model from tracking grad (stage-1b super-net)."""
        for d in self.deltas.values():
            d.requires_grad = False
        self.base.set_trainable(weights=False, affine=False)
        if self.head is not None:
            for p in self.head.parameters().values():
                p.requires_grad = False

    def reset_deltas(self, init: dict[str, np.ndarray] | None = None):
        for name, d in self.deltas.items():
            if init is not None and name in init:
                d.data = np.array(init[name], dtype=np.float32)
            else:
                d.data = np.zeros_like(d.data)


def wrap(pretrained: Backbone, head: ClassifierHead | None = None) -> ReparamModel:
    """Wrap a backbone in place; its conv weights become the frozen w0."""
    if isinstance(pretrained, ReparamModel) or getattr(pretrained, "_wrapped", False):
        raise ValueError("backbone is already wrapped")
    fingerprint = pretrained.fingerprint()
    pretrained.set_trainable(weights=False)
    pretrained._wrapped = True
    model = ReparamModel(pretrained, head)
    model.base_fingerprint = fingerprint
    return model


def apply_policy(model: ReparamModel, bits) -> None:
    """Fix the policy; only deltas of layers with bit 1 stay trainable."""
    bits = np.asarray(bits).astype(np.int64).reshape(-1)
    if bits.shape != (model.num_layers,):
        raise ValueError(f"policy has {bits.size} bits, model has {model.num_layers} layers")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("policy bits must be 0 or 1")
    model.bits = bits.copy()
    for s, b in zip(model.specs, bits):
        model.deltas[s.name].requires_grad = bool(b)


@dataclass
class DeltaRecord:
    """Task-specific state needed to rebuild a transferred model from the shared base."""

    kind: str
    base_fingerprint: str
    bits: list[int]
    layer_indices: list[int]
    achieved_cost: float
    bn_mode: str
    head_weight: np.ndarray
    head_bias: np.ndarray
    deltas: dict[str, np.ndarray] = field(default_factory=dict)
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    affine: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    full: dict[str, np.ndarray] = field(default_factory=dict)
    task: str = ""
    c: float | None = None

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"delta.{n}", a) for n, a in self.deltas.items()]
        for n, (m, v) in self.bn_stats.items():
            out += [(f"bn.{n}.running_mean", m), (f"bn.{n}.running_var", v)]
        for n, (g, b) in self.affine.items():
            out += [(f"affine.{n}.gamma", g), (f"affine.{n}.beta", b)]
        out += [(f"full.{n}", a) for n, a in self.full.items()]
        out += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return out


def merge_export(model: ReparamModel, bits=None, task: str = "", c: float | None = None,
                 achieved_cost: float = float("nan")) -> tuple[Backbone, DeltaRecord]:
    """Bake w0 + b * delta into a plain backbone and emit the sparse task record."""
    bits = model.bits if bits is None else np.asarray(bits).astype(np.int64)
    if bits.shape != (model.num_layers,) or not np.isin(bits, (0, 1)).all():
        raise ValueError("merge_export needs a binarized policy of length L")
    merged = model.base.copy()
    merged._wrapped = False
    deltas = {}
    for s, b in zip(model.specs, bits):
        if b:
            merged.params[s.name].data = model.w0(s.name).data + model.deltas[s.name].data
            deltas[s.name] = model.deltas[s.name].data.copy()
    merged.set_trainable(weights=False, affine=False)
    base = model.base
    bn_stats = {s.name: (m.copy(), v.copy())
                for s in base.bn_layers for m, v in [base.bn_stats[s.name]]}
    affine = {}
    if base.bn_mode == "stats-and-affine":
        affine = {s.name: (base.params[s.name + ".gamma"].data.copy(),
                           base.params[s.name + ".beta"].data.copy()) for s in base.bn_layers}
    record = DeltaRecord(
        kind="swr",
        base_fingerprint=model.base_fingerprint,
        bits=[int(b) for b in bits],
        layer_indices=[s.index for s, b in zip(model.specs, bits) if b],
        achieved_cost=float(achieved_cost),
        bn_mode=base.bn_mode,
        head_weight=model.head.weight.data.copy(),
        head_bias=model.head.bias.data.copy(),
        deltas=deltas,
        bn_stats=bn_stats,
        affine=affine,
        task=task,
        c=c,
    )
    return merged, record


def apply_record(base: Backbone, record: DeltaRecord) -> tuple[Backbone, ClassifierHead]:
    """Rebuild the transferred backbone and head from the shared base plus a record."""
    if record.base_fingerprint and record.base_fingerprint != base.fingerprint():
        raise ValueError("record was produced against a different base backbone")
    out = base.copy()
    out._wrapped = False
    if record.kind == "full":
        for name, arr in record.full.items():
            if name.endswith(".running_mean"):
                out.bn_stats[name[:-13]][0][...] = arr
            elif name.endswith(".running_var"):
                out.bn_stats[name[:-12]][1][...] = arr
            else:
                out.params[name].data = arr.copy()
    else:
        for name, d in record.deltas.items():
            out.params[name].data = base.params[name].data + d
        for name, (m, v) in record.bn_stats.items():
            out.bn_stats[name][0][...] = m
            out.bn_stats[name][1][...] = v
        for name, (g, b) in record.affine.items():
            out.params[name + ".gamma"].data = g.copy()
            out.params[name + ".beta"].data = b.copy()
    out.set_trainable(weights=False, affine=False)
    return out, ClassifierHead.from_arrays(record.head_weight, record.head_bias)


def model_from_record(base: Backbone, record: DeltaRecord) -> ReparamModel:
    """Re-wrap the shared base with a stored swr record's deltas, BN state, head and policy."""
    if record.kind != "swr":
        raise ValueError(f"cannot rebuild a reparametrized model from a {record.kind!r} record")
    if record.base_fingerprint and record.base_fingerprint != base.fingerprint():
        raise ValueError("record was produced against a different base backbone")
    b = base.copy()
    b._wrapped = False
    for name, (m, v) in record.bn_stats.items():
        b.bn_stats[name][0][...] = m
        b.bn_stats[name][1][...] = v
    for name, (g, beta) in record.affine.items():
        b.params[name + ".gamma"].data = g.copy()
        b.params[name + ".beta"].data = beta.copy()
    set_bn_transfer_mode(b, record.bn_mode)
    model = wrap(b, ClassifierHead.from_arrays(record.head_weight, record.head_bias))
    model.base_fingerprint = record.base_fingerprint or model.base_fingerprint
    model.reset_deltas(record.deltas)
    apply_policy(model, record.bits)
    return model


def record_param_count(record: DeltaRecord) -> int:
    """Census of every value stored in a record."""
    return int(sum(a.size for _, a in record.tensors()))


def save_record(path, record: DeltaRecord):
    manifest = {
        "kind": record.kind,
        "task": record.task,
        "c": record.c,
        "bits": record.bits,
        "layer_indices": record.layer_indices,
        "achieved_cost": record.achieved_cost,
        "base_fingerprint": record.base_fingerprint,
        "bn_mode": record.bn_mode,
    }
    container.save(path, container.DELTA_MAGIC, manifest, record.tensors())


def load_record(path) -> DeltaRecord:
    manifest, arrays = container.load(path, container.DELTA_MAGIC)
    if manifest.get("kind") not in RECORD_KINDS:
        raise container.FormatError(f"unknown record kind {manifest.get('kind')!r}")
    deltas, full, bn, aff = {}, {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("delta."):
            deltas[name[6:]] = arr
        elif name.startswith("full."):
            full[name[5:]] = arr
        elif name.startswith("bn.") and name.endswith(".running_mean"):
            bn.setdefault(name[3:-13], [None, None])[0] = arr
        elif name.startswith("bn.") and name.endswith(".running_var"):
            bn.setdefault(name[3:-12], [None, None])[1] = arr
        elif name.startswith("affine.") and name.endswith(".gamma"):
            aff.setdefault(name[7:-6], [None, None])[0] = arr
        elif name.startswith("affine.") and name.endswith(".beta"):
            aff.setdefault(name[7:-5], [None, None])[1] = arr
        elif name not in ("head.weight", "head.bias"):
            raise container.FormatError(f"unexpected tensor {name} in delta record")
    return DeltaRecord(
        kind=manifest["kind"],
        base_fingerprint=manifest.get("base_fingerprint", ""),
        bits=list(manifest.get("bits", [])),
        layer_indices=list(manifest.get("layer_indices", [])),
        achieved_cost=float(manifest.get("achieved_cost", float("nan"))),
        bn_mode=manifest.get("bn_mode", "stats-only"),
        head_weight=arrays["head.weight"],
        head_bias=arrays["head.bias"],
        deltas=deltas,
        bn_stats={k: tuple(v) for k, v in bn.items()},
        affine={k: tuple(v) for k, v in aff.items()},
        full=full,
        task=manifest.get("task", ""),
        c=manifest.get("c"),
    )


def full_copy_record(backbone: Backbone, head: ClassifierHead, base_fingerprint: str,
                     task: str = "") -> DeltaRecord:
    """Record of a fully fine-tuned copy: every backbone array plus the head."""
    return DeltaRecord(
        kind="full", base_fingerprint=base_fingerprint, bits=[1] * backbone.num_eligible,
        layer_indices=[s.index for s in backbone.eligible], achieved_cost=1.0,
        bn_mode=backbone.bn_mode, head_weight=head.weight.data.copy(),
        head_bias=head.bias.data.copy(),
        full={n: a.copy() for n, a in backbone.named_arrays()}, task=task)


def classifier_record(backbone: Backbone, head: ClassifierHead, base_fingerprint: str,
                      task: str = "") -> DeltaRecord:
    return DeltaRecord(
        kind="classifier", base_fingerprint=base_fingerprint, bits=[0] * backbone.num_eligible,
        layer_indices=[], achieved_cost=0.0, bn_mode=backbone.bn_mode,
        head_weight=head.weight.data.copy(), head_bias=head.bias.data.copy(), task=task)
