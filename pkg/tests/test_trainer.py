"""Stage contracts on a tiny config; the full-size runs live in test_acceptance.py."""
import numpy as np
import pytest

from swr import trainer as T
from swr.backbone import forward
from swr.config import TrainConfig
from swr.costmodel import achieved_cost, compute_r
from swr.diffcore import Tensor
from swr.policynet import PolicyNet
from swr.reparam import merge_export

TINY = TrainConfig(examples_per_class=(8, 4, 4), epochs_pretrain=2, epochs_supernet=1, epochs_policy=1,
                   epochs_transfer=1, lr_policy=1e-2)


@pytest.fixture(scope="module")
def f0():
    bb, _, _, _ = T.pretrain_source(TINY)
    return bb


@pytest.fixture(scope="module")
def task_a():
    return T.load_task(TINY, "A")


@pytest.fixture(scope="module")
def supernet(f0, task_a):
    model, _ = T.stage1a_train_supernet(f0, task_a, TINY)
    return model


def test_task_specs():
    assert T.task_spec(TINY, "source").num_classes == 24
    assert T.task_spec(TINY, "B").family == "B"
    with pytest.raises(ValueError):
        T.task_spec(TINY, "C")


def test_untrained_accuracy_near_chance(task_a):
    from swr.backbone import ClassifierHead, build_tiny_bcnet
    from swr.rng import Rng

    bb, head = build_tiny_bcnet(), ClassifierHead(32, 12, Rng(0))
    acc = T.accuracy(lambda x: forward(bb, head, x), task_a, "train")
    assert acc < 3 / 12


def test_pretrain_deterministic(f0):
    again, _, _, _ = T.pretrain_source(TINY)
    assert again.fingerprint() == f0.fingerprint()


def test_supernet_starts_at_f0_and_keeps_w0(f0, task_a, supernet):
    fresh = T._fresh_model(f0, 12, TINY, "probe")
    x = Tensor(task_a.splits["val"][0])
    assert fresh.features(x).data.tobytes() == f0.forward(x).data.tobytes()
    for name, p in f0.params.items():
        assert supernet.base.params[name].data.tobytes() == p.data.tobytes()
    assert all(d.data.any() for d in supernet.deltas.values())


def test_stage1b_updates_only_policy(supernet, task_a):
    snapshot = {n: d.data.copy() for n, d in supernet.deltas.items()}
    head = supernet.head.weight.data.copy()
    stats = {n: m.copy() for n, (m, _) in supernet.base.bn_stats.items()}
    net, run = T.stage1b_train_policynet(supernet, task_a, TINY)
    assert any(p.data.any() for p in net.parameters().values())
    assert all(supernet.deltas[n].data.tobytes() == a.tobytes() for n, a in snapshot.items())
    assert supernet.head.weight.data.tobytes() == head.tobytes()
    assert all(supernet.base.bn_stats[n][0].tobytes() == m.tobytes() for n, m in stats.items())
    assert len(run.rows) == TINY.epochs_policy


def test_stage1b_rejects_trainable_supernet(f0, task_a, supernet, monkeypatch):
    monkeypatch.setattr(type(supernet), "freeze", lambda self: None)
    model = T._fresh_model(f0, 12, TINY, "probe")
    from swr.reparam import apply_policy

    apply_policy(model, np.ones(model.num_layers))
    with pytest.raises(RuntimeError):
        T.stage1b_train_policynet(model, task_a, TINY)


def test_stage2_trains_exactly_the_selected_set(f0, task_a):
    bits = np.zeros(f0.num_eligible, dtype=np.int64)
    bits[[2, 9]] = 1
    res = T.stage2_reparam_train(f0, None, 0.3, task_a, TINY, bits=bits)
    names = set(res.model.trainable_parameters())
    expected = {f"delta.{s.name}" for s, b in zip(res.model.specs, bits) if b} | {"head.weight", "head.bias"}
    assert names == expected
    for s, b in zip(res.model.specs, bits):
        assert bool(res.model.deltas[s.name].data.any()) == bool(b)
    for name, p in f0.params.items():
        assert res.model.base.params[name].data.tobytes() == p.data.tobytes()
    # BN running stats are task-specific
    assert any(res.model.base.bn_stats[n][0].tobytes() != m.tobytes() for n, (m, _) in f0.bn_stats.items())
    assert res.record.layer_indices == [3, 10]


def test_stage2_all_zero_bits_is_classifier_plus_stats(f0, task_a):
    res = T.stage2_reparam_train(f0, PolicyNet(f0.num_eligible), 0.0, task_a, TINY)
    assert res.bits.sum() == 0  # zero-init net ties at 0.5, which binarizes to 0
    assert res.record.deltas == {} and res.achieved_cost == 0.0
    assert set(res.model.trainable_parameters()) == {"head.weight", "head.bias"}


def test_baseline_records(f0, task_a):
    cls = T.baseline_classifier_only(f0, task_a, TINY)
    assert cls.record.kind == "classifier" and cls.record.deltas == {} and cls.record.full == {}
    full = T.baseline_finetune_all(f0, task_a, TINY)
    assert full.record.kind == "full"
    assert sum(a.size for a in full.record.full.values()) == f0.storage_count()


def test_cooptimize_budget_and_record(f0, task_a):
    results, net, run = T.ablation_cooptimize(f0, task_a, TINY, [0.1, 0.5])
    assert len(run.rows) == TINY.epochs_supernet + TINY.epochs_policy + TINY.epochs_transfer
    r = compute_r(f0)
    for c, res in results.items():
        assert res.record.kind == "swr"
        assert res.achieved_cost == achieved_cost(res.record.bits, r)


def test_supernet_init_starts_lower(f0, task_a):
    fitted, _ = T.stage1a_train_supernet(f0, task_a, TINY.replace(epochs_supernet=4, lr_supernet=1e-2))
    net = PolicyNet(f0.num_eligible)
    net.b3.data[0::2] = 1.0  # every layer selected
    zero = T.stage2_reparam_train(f0, net, 1.0, task_a, TINY)
    warm = T.ablation_supernet_init(f0, fitted, net, 1.0, task_a, TINY)
    assert warm.run.start_loss < zero.run.start_loss


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(f0, task_a):
    with pytest.raises(T.TrainingDiverged):
        T.stage2_reparam_train(f0, None, 1.0, task_a, TINY.replace(lr_transfer=1e30),
                               bits=np.ones(f0.num_eligible))


def test_run_record_csv():
    run = T.RunRecord()
    run.add(stage="x", epoch=0, target_loss=0.5)
    assert run.to_csv().splitlines() == [
        "stage,epoch,target_loss,policy_loss,train_acc,val_acc,grid_error", "x,0,0.500000,,,,"]


def test_stage_seeds_are_reproducible(f0, task_a):
    bits = np.ones(f0.num_eligible, dtype=np.int64)
    a = T.stage2_reparam_train(f0, None, 1.0, task_a, TINY, bits=bits)
    b = T.stage2_reparam_train(f0, None, 1.0, task_a, TINY, bits=bits)
    assert all(x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a.record.tensors(), b.record.tensors()))
    _, rec = merge_export(a.model, bits)
    assert [n for n, _ in rec.tensors()] == [n for n, _ in a.record.tensors()]
