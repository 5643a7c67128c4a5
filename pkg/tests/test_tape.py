import numpy as np
import pytest

from fusedtrain.errors import GraphBuildError, ShapeError, TapeStateError
from fusedtrain.ledger import Category, MemoryLedger
from fusedtrain.tape import CheckpointPolicy, Disposition, GraphBuilder
from fusedtrain.tensor import Precision, Tensor
from fusedtrain.zoo import ModelConfig, ModelKind, SyntheticTask, TaskKind, \
    build_model, sample_batch

from oracles import (collect_grads, finite_difference_grads,
                     mlp_params_from_model, straight_line_mlp_forward)

MLP_CFG = ModelConfig(kind=ModelKind.MLP, layers=2, hidden=6, seed=7, input_dim=3)
MLP_TASK = SyntheticTask(kind=TaskKind.REGRESSION, input_dim=3, dataset_seed=3)
TINY_TF_CFG = ModelConfig(kind=ModelKind.MINI_TRANSFORMER, layers=1, hidden=8,
                          heads=2, vocab=11, seed=5)
TINY_TF_TASK = SyntheticTask(kind=TaskKind.SEQUENCE_COPY, seq_len=4, vocab=11,
                             dataset_seed=9)


def test_identity_model_returns_input():
    builder = GraphBuilder()
    x = builder.input("x")
    tape = builder.build(x)
    out = tape.forward(Tensor(np.array([1.0, 2.0, 3.0])))
    assert np.array_equal(out.data, [1.0, 2.0, 3.0])
    tape.backward(Tensor(np.ones(3)), lambda p, g: Disposition.CONSUME)


def test_scalar_linear_gradient():
    builder = GraphBuilder()
    x = builder.input("x")
    w = builder.parameter("w", np.array([4.0]))
    tape = builder.build(builder.apply("mul", x, w))
    out = tape.forward(Tensor(np.array([3.0])))
    assert out.data[0] == 12.0
    seen = {}

    def hook(param, grad):
        seen[param.name] = grad.data.copy()
        return Disposition.CONSUME

    tape.backward(Tensor(np.array([1.0])), hook)
    assert seen["w"][0] == 3.0


def test_mlp_forward_matches_straight_line_oracle():
    model = build_model(MLP_CFG)
    x, _ = sample_batch(MLP_TASK, 5, 0)
    out = model.forward(x)
    expected = straight_line_mlp_forward(mlp_params_from_model(model), x.data)
    assert np.array_equal(out.data, expected)


@pytest.mark.parametrize("cfg,task,batch", [
    (MLP_CFG, MLP_TASK, 4),
    (TINY_TF_CFG, TINY_TF_TASK, 2),
])
def test_gradients_match_finite_differences(cfg, task, batch):
    model = build_model(cfg)
    data = sample_batch(task, batch, 0)
    analytic = collect_grads(model, data)
    numeric = finite_difference_grads(model, data, eps=1e-3)
    for p, fd in zip(model.parameters, numeric):
        got = analytic[p.name]
        # 1e-4 relative wherever the central difference can resolve the
        # element; below 1e-6 the quotient only measures truncation noise,
        # so those elements are held to the matching absolute bound.
        bound = 1e-4 * np.maximum(np.abs(fd), 1e-6)
        gap = np.abs(got - fd)
        assert np.all(gap <= bound), \
            f"{p.name}: worst gap {gap.max():.2e} vs bound {bound.ravel()[gap.argmax()]:.2e}"


@pytest.mark.parametrize("cfg,task", [
    (ModelConfig(kind=ModelKind.MLP, layers=3, hidden=6, seed=1, input_dim=3),
     MLP_TASK),
    (ModelConfig(kind=ModelKind.MINI_TRANSFORMER, layers=2, hidden=8, heads=2,
                 vocab=11, seed=2), TINY_TF_TASK),
])
def test_checkpointing_is_value_transparent(cfg, task):
    batch = sample_batch(task, 3, 1)
    stored = build_model(cfg, checkpointing=False)
    ckpt = build_model(cfg, checkpointing=True)

    out_stored = stored.forward(batch[0])
    out_ckpt = ckpt.forward(batch[0])
    assert np.array_equal(out_stored.data, out_ckpt.data)

    g_stored = collect_grads(stored, batch)
    g_ckpt = collect_grads(ckpt, batch)
    assert g_stored.keys() == g_ckpt.keys()
    for name in g_stored:
        assert np.array_equal(g_stored[name], g_ckpt[name]), name


def test_recompute_bound_under_checkpointing():
    model = build_model(TINY_TF_CFG, checkpointing=True)
    batch = sample_batch(TINY_TF_TASK, 2, 0)
    ops_per_forward = len(model.tape.records)
    collect_grads(model, batch)
    executed = model.tape.counters["forward_ops"]
    assert executed <= 2 * ops_per_forward


def test_hook_layer_order_is_non_increasing():
    for cfg, task in ((MLP_CFG, MLP_TASK), (TINY_TF_CFG, TINY_TF_TASK)):
        model = build_model(cfg)
        inputs, targets = sample_batch(task, 2, 0)
        out = model.forward(inputs)
        _, dout = model.loss_and_grad(out, targets)
        layers = []

        def hook(param, grad):
            layers.append(param.layer)
            return Disposition.CONSUME

        model.tape.backward(Tensor(dout), hook)
        assert len(layers) == len(model.parameters)
        assert all(a >= b for a, b in zip(layers, layers[1:]))


def test_every_hook_consume_leaves_slots_empty():
    model = build_model(MLP_CFG)
    collect_grads(model, sample_batch(MLP_TASK, 2, 0))
    assert all(p.grad_slot is None for p in model.parameters)


def test_backward_twice_is_an_error():
    model = build_model(MLP_CFG)
    inputs, targets = sample_batch(MLP_TASK, 2, 0)
    out = model.forward(inputs)
    _, dout = model.loss_and_grad(out, targets)
    consume = lambda p, g: Disposition.CONSUME
    model.tape.backward(Tensor(dout), consume)
    with pytest.raises(TapeStateError):
        model.tape.backward(Tensor(dout), consume)


def test_backward_before_forward_is_an_error():
    model = build_model(MLP_CFG)
    with pytest.raises(TapeStateError):
        model.tape.backward(Tensor(np.zeros((2, 1))), lambda p, g: Disposition.CONSUME)


def test_weight_sharing_rejected_at_build():
    builder = GraphBuilder()
    x = builder.input("x")
    w = builder.parameter("w", np.array([1.0]))
    first = builder.apply("mul", x, w)
    with pytest.raises(GraphBuildError):
        builder.apply("mul", first, w)


def test_shape_mismatch_names_op_and_extents():
    builder = GraphBuilder()
    x = builder.input("x")
    w = builder.parameter("w", np.ones((4, 2)))
    tape = builder.build(builder.apply("matmul", x, w))
    with pytest.raises(ShapeError) as excinfo:
        tape.forward(Tensor(np.ones((3, 5))))
    message = str(excinfo.value)
    assert "matmul" in message and "5" in message and "4" in message


def test_non_finite_loss_grad_propagates():
    model = build_model(MLP_CFG)
    inputs, targets = sample_batch(MLP_TASK, 2, 0)
    out = model.forward(inputs)
    seed = np.full_like(out.data, np.inf)
    seen = []

    def hook(param, grad):
        seen.append(np.all(np.isfinite(grad.data)))
        return Disposition.CONSUME

    model.tape.backward(Tensor(seed), hook)
    assert not all(seen)


def test_half_precision_values_round_through_16_bits():
    model = build_model(MLP_CFG, precision=Precision.HALF_EMULATED)
    inputs, targets = sample_batch(MLP_TASK, 2, 0)
    out = model.forward(inputs)
    assert np.array_equal(out.data, out.data.astype(np.float16).astype(np.float64))
    grads = collect_grads(model, (inputs, targets))
    for g in grads.values():
        assert np.array_equal(g, g.astype(np.float16).astype(np.float64))


def test_activation_accounting_balances_to_zero():
    ledger = MemoryLedger(track_events=True)
    model = build_model(MLP_CFG, ledger=ledger)
    collect_grads(model, sample_batch(MLP_TASK, 2, 0))
    assert ledger.current[Category.ACTIVATIONS] == 0
    assert ledger.current[Category.GRADIENTS] == 0
    assert ledger.peak[Category.ACTIVATIONS] > 0
    # allocation-count cross-check: one +/- gradient event per parameter
    grad_events = [d for _, c, d in ledger.events if c is Category.GRADIENTS]
    n = len(model.parameters)
    assert sum(1 for d in grad_events if d > 0) == n
    assert sum(1 for d in grad_events if d < 0) == n
    # activation allocations balance with frees
    act_events = [d for _, c, d in ledger.events if c is Category.ACTIVATIONS]
    assert sum(act_events) == 0


def test_checkpointing_only_keeps_boundaries_during_forward():
    ledger_store = MemoryLedger()
    ledger_ckpt = MemoryLedger()
    cfg = ModelConfig(kind=ModelKind.MLP, layers=3, hidden=16, seed=4, input_dim=8)
    task = SyntheticTask(kind=TaskKind.REGRESSION, input_dim=8, dataset_seed=1)
    stored = build_model(cfg, ledger=ledger_store)
    ckpt = build_model(cfg, checkpointing=True, ledger=ledger_ckpt)
    x, _ = sample_batch(task, 4, 0)
    stored.forward(x)
    ckpt.forward(x)
    assert (ledger_ckpt.current[Category.ACTIVATIONS]
            < ledger_store.current[Category.ACTIVATIONS])


def test_layer_tags_must_be_non_decreasing():
    builder = GraphBuilder()
    x = builder.input("x")
    with builder.layer(1):
        w = builder.parameter("w", np.array([1.0]))
        y = builder.apply("mul", x, w)
    with pytest.raises(GraphBuildError):
        with builder.layer(0):
            builder.apply("tanh", y)
