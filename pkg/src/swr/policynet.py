"""Cost-conditioned policy network h: c -> L two-way logits."""
from __future__ import annotations

import numpy as np

from . import container
from .diffcore import Tensor, no_grad, ops
from .rng import Rng


def _check_c(c: float):
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"target cost must lie in [0, 1], got {c}")


class PolicyNet:
    """Three linear layers with relu in between: 1 -> H -> H -> 2L.

    The last layer starts at zero, so every layer begins at probability 0.5.
    """

    def __init__(self, num_layers: int, hidden: int = 64, rng: Rng | None = None):
        if num_layers < 1 or hidden < 1:
            raise ValueError("policy net needs num_layers >= 1 and hidden >= 1")
        rng = rng or Rng(0, ("policynet",))
        self.num_layers = num_layers
        self.hidden = hidden

        def uniform(name, shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return Tensor(rng.split(name).uniform(shape, -bound, bound), requires_grad=True, name=name)

        self.w1 = uniform("policy.w1", (1, hidden), 1)
        self.b1 = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True, name="policy.b1")
        self.w2 = uniform("policy.w2", (hidden, hidden), hidden)
        self.b2 = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True, name="policy.b2")
        self.w3 = Tensor(np.zeros((hidden, 2 * num_layers), dtype=np.float32), requires_grad=True, name="policy.w3")
        self.b3 = Tensor(np.zeros(2 * num_layers, dtype=np.float32), requires_grad=True, name="policy.b3")

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)}

    def set_trainable(self, flag: bool):
        for p in self.parameters().values():
            p.requires_grad = flag

    def logits(self, c: float) -> Tensor:
        """h(c) reshaped to (L, 2)."""
        _check_c(c)
        x = Tensor(np.array([[c]], dtype=np.float32))
        h = ops.relu(ops.linear(x, self.w1, self.b1))
        h = ops.relu(ops.linear(h, self.w2, self.b2))
        out = ops.linear(h, self.w3, self.b3)
        return ops.reshape(out, (self.num_layers, 2))

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, p.data) for n, p in self.parameters().items()]

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for n, p in self.parameters().items():
            if arrays[n].shape != p.shape:
                raise container.FormatError(f"{n}: shape {arrays[n].shape}, expected {p.shape}")
            p.data = arrays[n].copy()


def forward_probs(net: PolicyNet, c: float, tau: float = 1.0) -> Tensor:
    """softmax(h(c)_l / tau) per layer, shape (L, 2)."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return ops.softmax(ops.scale(net.logits(c), 1.0 / tau))


def sample_policy(net: PolicyNet, c: float, tau: float, rng: Rng) -> Tensor:
    """Per-layer bit = first element of a hard Gumbel-Softmax sample of h(c) / tau, shape (L,).

    Noise is added to the tempered logits, so P(bit = 1) is the tempered
    softmax probability. Fresh noise per layer per call; gradients pass
    straight through to h.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    hard = ops.gumbel_softmax_hard(ops.scale(net.logits(c), 1.0 / tau), 1.0, rng)
    return ops.getitem(hard, (slice(None), 0))


def binarize(net: PolicyNet, c: float) -> np.ndarray:
    """Deployment policy: bit 1 iff softmax(h(c)_l)_1 > 0.5 (an exact tie gives 0)."""
    with no_grad():
        p = forward_probs(net, c, 1.0).data
    return (p[:, 0] > 0.5).astype(np.int64)


def save_policy(path, net: PolicyNet, meta: dict):
    """Policy checkpoint; ``meta`` carries the layer table and cost weights for reports."""
    manifest = {"kind": "policynet", "num_layers": net.num_layers, "hidden": net.hidden, "meta": meta}
    container.save(path, container.CKPT_MAGIC, manifest, net.named_arrays())


def load_policy(path) -> tuple[PolicyNet, dict]:
    manifest, arrays = container.load(path, container.CKPT_MAGIC)
    if manifest.get("kind") != "policynet":
        raise container.FormatError(f"{path} is not a policy-net checkpoint")
    net = PolicyNet(manifest["num_layers"], manifest["hidden"])
    net.load_arrays(arrays)
    return net, manifest.get("meta", {})
