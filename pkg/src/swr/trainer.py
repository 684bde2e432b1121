"""Source pretraining, the two-stage transfer, baselines and ablations."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from .backbone import (Backbone, BackboneConfig, ClassifierHead, build_tiny_bcnet,
                       set_bn_transfer_mode)
from .config import TrainConfig
from .costmodel import CostWeights, achieved_cost, compute_r, policy_loss
from .diffcore import SGD, Adam, Tensor, backward, cosine_schedule, no_grad, ops
from .policynet import PolicyNet, binarize, forward_probs, sample_policy
from .reparam import (DeltaRecord, ReparamModel, apply_policy, classifier_record,
                      full_copy_record, merge_export, wrap)
from .rng import Rng, derive_seed

log = logging.getLogger(__name__)

TASKS = ("source", "A", "B")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunRecord:
    """Per-epoch metrics for one training stage."""

    rows: list[dict] = field(default_factory=list)
    start_loss: float | None = None

    COLUMNS = ("stage", "epoch", "target_loss", "policy_loss", "train_acc", "val_acc", "grid_error")

    def add(self, **row):
        self.rows.append({k: row.get(k, "") for k in self.COLUMNS})

    def extend(self, other: "RunRecord"):
        self.rows.extend(other.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.COLUMNS), lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


@dataclass
class TransferResult:
    model: ReparamModel | None
    backbone: Backbone
    head: ClassifierHead
    record: DeltaRecord
    accuracy: float
    run: RunRecord
    bits: np.ndarray | None = None
    achieved_cost: float | None = None


# data -------------------------------------------------------------------------

def task_spec(cfg: TrainConfig, task: str) -> datamod.SyntheticTaskSpec:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    family = "union" if task == "source" else task
    n = 2 * datamod.FAMILY_SIZE if task == "source" else datamod.FAMILY_SIZE
    return datamod.SyntheticTaskSpec(family=family, num_classes=n,
                                     examples_per_class=tuple(cfg.examples_per_class),
                                     noise=cfg.noise, seed=cfg.data_seed)


_DATA_CACHE: dict = {}


def load_task(cfg: TrainConfig, task: str) -> datamod.Dataset:
    spec = task_spec(cfg, task)
    if spec not in _DATA_CACHE:
        _DATA_CACHE[spec] = datamod.generate(spec)
    return _DATA_CACHE[spec]


# generic loop -------------------------------------------------------------------

def accuracy(forward_fn, dataset: datamod.Dataset, split: str = "test", chunk: int = 256) -> float:
    x, y = dataset.splits[split]
    correct = 0
    with no_grad():
        for s in range(0, len(y), chunk):
            logits = forward_fn(Tensor(x[s:s + chunk])).data
            correct += int((logits.argmax(axis=1) == y[s:s + chunk]).sum())
    return correct / len(y)


def _make_optimizer(cfg: TrainConfig, params: dict, lr: float):
    if cfg.optimizer == "sgd":
        return SGD(params, lr=lr, momentum=0.9, weight_decay=cfg.weight_decay)
    return Adam(params, lr=lr, weight_decay=cfg.weight_decay)


def _fit(stage: str, params: dict, step_fn, dataset, epochs: int, lr: float, cfg: TrainConfig,
         eval_fn=None) -> RunRecord:
    """Minibatch loop with a cosine-annealed learning rate.

    ``step_fn(x, y, t, total)`` returns ``(loss, extras)``; extras may hold
    "target" and "policy" loss floats for the log.
    """
    if not params:
        raise ValueError(f"{stage}: nothing to train")
    opt = _make_optimizer(cfg, params, lr)
    n = dataset.size("train")
    per_epoch = -(-n // cfg.batch_size)
    total = epochs * per_epoch
    run = RunRecord()
    t = 0
    for epoch in range(epochs):
        tl = pl = 0.0
        correct = seen = 0
        for xb, yb in datamod.batches(dataset, "train", cfg.batch_size, derive_seed(cfg.seed, stage, epoch)):
            opt.zero_grad()
            loss, extras = step_fn(Tensor(xb), yb, t, total)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"{stage}: non-finite loss at epoch {epoch}, step {t}")
            if run.start_loss is None:
                run.start_loss = extras.get("target", value)
            backward(loss)
            try:
                opt.step(cosine_schedule(lr, 0.0, t, total))
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{stage}: epoch {epoch}, step {t}: {exc}") from exc
            t += 1
            tl += extras.get("target", value) * len(yb)
            pl += extras.get("policy", 0.0) * len(yb)
            if "logits" in extras:
                correct += int((extras["logits"].argmax(axis=1) == yb).sum())
            seen += len(yb)
        row = dict(stage=stage, epoch=epoch, target_loss=tl / seen, policy_loss=pl / seen,
                   train_acc=correct / seen)
        if eval_fn is not None:
            row.update(eval_fn())
        run.add(**row)
        log.info("%s epoch %d: target %.4f policy %.4f", stage, epoch, tl / seen, pl / seen)
    return run


def _ce(logits: Tensor, y, cfg: TrainConfig):
    loss = ops.cross_entropy(logits, y, cfg.label_smoothing)
    return loss, {"target": float(loss.data), "logits": logits.data}


# pretraining --------------------------------------------------------------------

def pretrain_source(cfg: TrainConfig, dataset: datamod.Dataset | None = None,
                    backbone_config: BackboneConfig | None = None):
    """Train f0 and a source head on the union task. Returns (f0, head, run, test accuracy)."""
    ds = dataset or load_task(cfg, "source")
    bb = build_tiny_bcnet(backbone_config or BackboneConfig(), seed=cfg.seed)
    head = ClassifierHead(bb.config.num_features, ds.spec.num_classes, Rng(cfg.seed, ("head", "source")))
    params = {**bb.trainable_parameters(), **head.parameters()}

    def step(x, y, t, total):
        return _ce(head(bb.forward(x, train=True)), y, cfg)

    def val():
        return {"val_acc": accuracy(lambda x: head(bb.forward(x)), ds, "val")}

    run = _fit("pretrain", params, step, ds, cfg.epochs_pretrain, cfg.lr_pretrain, cfg, val)
    bb.set_trainable(weights=False, affine=False)
    acc = accuracy(lambda x: head(bb.forward(x)), ds, "test")
    return bb, head, run, acc


# stage 1 ------------------------------------------------------------------------

def _fresh_model(f0: Backbone, num_classes: int, cfg: TrainConfig, tag: str,
                 bn_mode: str | None = None) -> ReparamModel:
    base = f0.copy()
    set_bn_transfer_mode(base, bn_mode or cfg.bn_mode)
    head = ClassifierHead(base.config.num_features, num_classes, Rng(cfg.seed, ("head", tag)))
    return wrap(base, head)


def stage1a_train_supernet(f0: Backbone, dataset: datamod.Dataset, cfg: TrainConfig):
    """Fine-tune every delta (all bits 1) plus BN statistics and a new head."""
    model = _fresh_model(f0, dataset.spec.num_classes, cfg, f"supernet-{dataset.spec.family}")
    apply_policy(model, np.ones(model.num_layers, dtype=np.int64))

    def step(x, y, t, total):
        return _ce(model(x, train=True), y, cfg)

    def val():
        return {"val_acc": accuracy(model, dataset, "val")}

    run = _fit("supernet", model.trainable_parameters(), step, dataset, cfg.epochs_supernet,
               cfg.lr_supernet, cfg, val)
    return model, run


def _grid_error(net: PolicyNet, r: CostWeights, grid) -> float:
    """Worst |achieved - c| of the deployed policy over the evaluation grid."""
    return float(max(abs(achieved_cost(binarize(net, c), r) - c) for c in grid))


def stage1b_train_policynet(supernet: ReparamModel, dataset: datamod.Dataset, cfg: TrainConfig,
                            r: CostWeights | None = None, net: PolicyNet | None = None):
    """Train h against the frozen super-net with L_target + lam * L_policy.

    One c ~ Uniform(0, 1) per step; the super-net forward uses hard Gumbel
    bits and eval-mode BN; the budget term uses tempered softmax probs.
    """
    supernet.freeze()
    if supernet.trainable_parameters():
        raise RuntimeError("super-net must be frozen during policy training")
    r = r or compute_r(supernet.base, cfg.r_mode)
    net = net or PolicyNet(supernet.num_layers, cfg.policy_hidden, Rng(cfg.seed, ("policynet",)))
    rng = Rng(cfg.seed, ("stage1b",))
    frozen = list(supernet.deltas.values()) + [supernet.base.params[n] for n in supernet.base.params] \
        + list(supernet.head.parameters().values())

    def step(x, y, t, total):
        c = rng.split("c", t).scalar()
        tau = cosine_schedule(cfg.tau_start, cfg.tau_end, t, total)
        bits = sample_policy(net, c, tau, rng.split("gumbel", t))
        target = ops.cross_entropy(supernet(x, train=False, relaxed=bits), y, cfg.label_smoothing)
        budget = policy_loss(forward_probs(net, c, tau), r, c)
        loss = ops.add(target, ops.scale(budget, cfg.lam))
        return loss, {"target": float(target.data), "policy": float(budget.data)}

    best = {"error": np.inf, "arrays": None}

    def val():
        for p in frozen:
            if p.requires_grad or p.grad is not None:
                raise RuntimeError(f"frozen super-net tensor {p.name} picked up a gradient")
        err = _grid_error(net, r, cfg.c_grid)
        # keep the epoch whose deployed policy tracks the grid best
        if err < best["error"]:
            best.update(error=err, arrays={n: a.copy() for n, a in net.named_arrays()})
        return {"grid_error": err}

    run = _fit("policy", net.parameters(), step, dataset, cfg.epochs_policy, cfg.lr_policy, cfg, val)
    net.load_arrays(best["arrays"])
    net.set_trainable(False)
    return net, run


# stage 2 ------------------------------------------------------------------------

def stage2_reparam_train(f0: Backbone, net: PolicyNet | None, c: float, dataset: datamod.Dataset,
                         cfg: TrainConfig, bits=None, init_deltas: dict | None = None,
                         bn_mode: str | None = None, r: CostWeights | None = None,
                         tag: str = "stage2", init_head: ClassifierHead | None = None) -> TransferResult:
    """Binarize h at c, re-zero the deltas and train only the selected ones (+ BN stats, head)."""
    bits = binarize(net, c) if bits is None else np.asarray(bits, dtype=np.int64)
    task = dataset.spec.family
    model = _fresh_model(f0, dataset.spec.num_classes, cfg, f"{tag}-{task}", bn_mode)
    r = r or compute_r(model.base, cfg.r_mode)
    if init_deltas is not None:
        model.reset_deltas({n: d for (n, d), b in zip(init_deltas.items(), bits) if b})
    if init_head is not None:
        model.head.weight.data = init_head.weight.data.copy()
        model.head.bias.data = init_head.bias.data.copy()
    apply_policy(model, bits)

    def step(x, y, t, total):
        return _ce(model(x, train=True), y, cfg)

    def val():
        return {"val_acc": accuracy(model, dataset, "val")}

    run = _fit(tag, model.trainable_parameters(), step, dataset, cfg.epochs_transfer,
               cfg.lr_transfer, cfg, val)
    cost = achieved_cost(bits, r)
    merged, record = merge_export(model, bits, task=task, c=c, achieved_cost=cost)
    acc = accuracy(model, dataset, "test")
    return TransferResult(model, merged, model.head, record, acc, run, bits, cost)


# baselines ----------------------------------------------------------------------

def baseline_classifier_only(f0: Backbone, dataset: datamod.Dataset, cfg: TrainConfig) -> TransferResult:
    """Train a new head on frozen f0 features (BN in eval mode)."""
    base = f0.copy()
    base.set_trainable(weights=False, affine=False)
    head = ClassifierHead(base.config.num_features, dataset.spec.num_classes,
                          Rng(cfg.seed, ("head", f"classifier-{dataset.spec.family}")))

    def fwd(x):
        return head(base.forward(x, train=False))

    run = _fit("classifier", head.parameters(), lambda x, y, t, n: _ce(fwd(x), y, cfg), dataset,
               cfg.epochs_transfer, cfg.lr_transfer, cfg,
               lambda: {"val_acc": accuracy(fwd, dataset, "val")})
    record = classifier_record(base, head, f0.fingerprint(), dataset.spec.family)
    return TransferResult(None, base, head, record, accuracy(fwd, dataset, "test"), run,
                          np.zeros(base.num_eligible, dtype=np.int64), 0.0)


def baseline_finetune_all(f0: Backbone, dataset: datamod.Dataset, cfg: TrainConfig) -> TransferResult:
    """Train a full copy of f0 (weights, BN affine and stats) plus a new head."""
    base = f0.copy()
    base.bn_mode = "stats-and-affine"
    base.set_trainable(weights=True, affine=True)
    head = ClassifierHead(base.config.num_features, dataset.spec.num_classes,
                          Rng(cfg.seed, ("head", f"finetune-{dataset.spec.family}")))

    def step(x, y, t, total):
        return _ce(head(base.forward(x, train=True)), y, cfg)

    def fwd(x):
        return head(base.forward(x, train=False))

    run = _fit("finetune", {**base.trainable_parameters(), **head.parameters()}, step, dataset,
               cfg.epochs_transfer, cfg.lr_transfer, cfg,
               lambda: {"val_acc": accuracy(fwd, dataset, "val")})
    base.set_trainable(weights=False, affine=False)
    record = full_copy_record(base, head, f0.fingerprint(), dataset.spec.family)
    return TransferResult(None, base, head, record, accuracy(fwd, dataset, "test"), run,
                          np.ones(base.num_eligible, dtype=np.int64), 1.0)


# ablations ----------------------------------------------------------------------

def ablation_cooptimize(f0: Backbone, dataset: datamod.Dataset, cfg: TrainConfig, c_values,
                        r: CostWeights | None = None):
    """Train h and all deltas jointly with the total loss, then binarize per c.

    Uses the same epoch budget as super-net + policy + stage-2 training.
    Returns ({c: TransferResult}, net, run).
    """
    task = dataset.spec.family
    model = _fresh_model(f0, dataset.spec.num_classes, cfg, f"coopt-{task}")
    apply_policy(model, np.ones(model.num_layers, dtype=np.int64))
    r = r or compute_r(model.base, cfg.r_mode)
    net = PolicyNet(model.num_layers, cfg.policy_hidden, Rng(cfg.seed, ("policynet-coopt",)))
    rng = Rng(cfg.seed, ("coopt",))
    params = {**model.trainable_parameters(), **net.parameters()}
    epochs = cfg.epochs_supernet + cfg.epochs_policy + cfg.epochs_transfer

    def step(x, y, t, total):
        c = rng.split("c", t).scalar()
        tau = cosine_schedule(cfg.tau_start, cfg.tau_end, t, total)
        bits = sample_policy(net, c, tau, rng.split("gumbel", t))
        logits = model(x, train=True, relaxed=bits)
        target = ops.cross_entropy(logits, y, cfg.label_smoothing)
        budget = policy_loss(forward_probs(net, c, tau), r, c)
        return ops.add(target, ops.scale(budget, cfg.lam)), {
            "target": float(target.data), "policy": float(budget.data), "logits": logits.data}

    run = _fit("coopt", params, step, dataset, epochs, cfg.lr_transfer, cfg,
               lambda: {"grid_error": _grid_error(net, r, cfg.c_grid)})
    net.set_trainable(False)
    results = {}
    for c in c_values:
        bits = binarize(net, c)
        apply_policy(model, bits)
        cost = achieved_cost(bits, r)
        merged, record = merge_export(model, bits, task=task, c=c, achieved_cost=cost)
        results[c] = TransferResult(model, merged, model.head, record, accuracy(model, dataset, "test"),
                                    run, bits, cost)
    return results, net, run


def ablation_supernet_init(f0: Backbone, supernet: ReparamModel, net: PolicyNet, c: float,
                           dataset: datamod.Dataset, cfg: TrainConfig) -> TransferResult:
    """Stage 2 with selected deltas (and the head they were fitted with) starting from the super-net."""
    init = {n: d.data for n, d in supernet.deltas.items()}
    return stage2_reparam_train(f0, net, c, dataset, cfg, init_deltas=init, tag="supernet-init",
                                init_head=supernet.head)


def ablation_bn_affine(f0: Backbone, net: PolicyNet, c: float, dataset: datamod.Dataset,
                       cfg: TrainConfig) -> TransferResult:
    return stage2_reparam_train(f0, net, c, dataset, cfg, bn_mode="stats-and-affine", tag="bn-affine")


# whole pipeline -----------------------------------------------------------------

def run_two_stage(f0: Backbone, dataset: datamod.Dataset, cfg: TrainConfig, c_values=(),
                  r: CostWeights | None = None):
    """Super-net, policy net, then one stage-2 transfer per c. Returns (supernet, net, r, transfers, runs)."""
    supernet, run_a = stage1a_train_supernet(f0, dataset, cfg)
    r = r or compute_r(supernet.base, cfg.r_mode)
    net, run_b = stage1b_train_policynet(supernet, dataset, cfg, r)
    transfers = {c: stage2_reparam_train(f0, net, c, dataset, cfg, r=r) for c in c_values}
    return supernet, net, r, transfers, {"supernet": run_a, "policy": run_b}
