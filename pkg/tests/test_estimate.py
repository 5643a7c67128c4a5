import pytest

from fusedtrain.errors import ConfigError
from fusedtrain.estimate import (GIB, PRESETS, ArchSpec, EstimatePrecision,
                                 TrainSetup, arch_from_model_config, estimate,
                                 format_estimate, largest_tensor_elements,
                                 param_count)
from fusedtrain.ledger import Category, MemoryLedger
from fusedtrain.optim import OptimizerKind, lomo_step
from fusedtrain.zoo import (ModelConfig, ModelKind, SyntheticTask, TaskKind,
                            build_model, sample_batch)

LLAMA = PRESETS["llama-7b"]
TF_CFG = ModelConfig(kind=ModelKind.MINI_TRANSFORMER, layers=2, hidden=32,
                     heads=4, vocab=64, seed=1)


def test_preset_param_count_round_trips_to_published_size():
    count = param_count(LLAMA)
    assert count == 6_738_415_616
    assert abs(count * 2 / GIB - 12.55) <= 0.01


def test_param_count_matches_zoo_enumeration():
    model = build_model(TF_CFG)
    arch = arch_from_model_config(TF_CFG)
    assert param_count(arch) == model.n_params()


def test_zero_layer_arch_is_embedding_plus_head_stage():
    arch = ArchSpec(layers=0, hidden=16, heads=2, ffn_hidden=64, vocab=100)
    v, h = arch.vocab, arch.hidden
    assert param_count(arch) == v * h + (h + v * h)


def test_tied_embeddings_drop_the_head_matrix():
    untied = ArchSpec(layers=2, hidden=16, heads=2, ffn_hidden=64, vocab=100)
    tied = ArchSpec(layers=2, hidden=16, heads=2, ffn_hidden=64, vocab=100,
                    tie_embeddings=True)
    assert param_count(untied) - param_count(tied) == 100 * 16


@pytest.mark.parametrize("optimizer,ac,expect", [
    (OptimizerKind.ADAMW, False,
     {"params": 12.55, "gradients": 12.55, "optim_states": 75.31}),
    (OptimizerKind.ADAMW, True,
     {"params": 12.55, "gradients": 12.55, "optim_states": 75.31}),
    (OptimizerKind.SGD, False,
     {"params": 12.55, "gradients": 12.55, "optim_states": 25.10}),
    (OptimizerKind.SGD, True,
     {"params": 12.55, "gradients": 12.55, "optim_states": 25.10}),
    (OptimizerKind.LOMO, False,
     {"params": 12.55, "gradients": 0.24, "optim_states": 0.00}),
    (OptimizerKind.LOMO, True,
     {"params": 12.55, "gradients": 0.24, "optim_states": 0.00}),
])
def test_published_columns_within_a_hundredth_gib(optimizer, ac, expect):
    setup = TrainSetup(optimizer=optimizer, activation_checkpointing=ac)
    result = estimate(LLAMA, setup)
    assert abs(result.params_gib - expect["params"]) <= 0.01
    assert abs(result.gradients_gib - expect["gradients"]) <= 0.01
    assert abs(result.optim_states_gib - expect["optim_states"]) <= 0.01


@pytest.mark.parametrize("ac,expect", [(False, 45.61), (True, 1.79)])
def test_calibrated_activations_within_five_percent(ac, expect):
    setup = TrainSetup(optimizer=OptimizerKind.ADAMW, activation_checkpointing=ac)
    result = estimate(LLAMA, setup)
    assert abs(result.activations_gib - expect) / expect <= 0.05


def test_total_is_sum_of_components():
    result = estimate(LLAMA, TrainSetup(optimizer=OptimizerKind.LOMO))
    assert result.total_bytes == (result.params_bytes + result.gradients_bytes
                                  + result.optim_states_bytes
                                  + result.activations_bytes)


def test_both_share_denominators_are_reported():
    result = estimate(LLAMA, TrainSetup(optimizer=OptimizerKind.ADAMW))
    shares = result.shares()
    of_total = shares["optim_states"]["of_total_pct"]
    of_states = shares["optim_states"]["of_model_states_pct"]
    assert of_total == pytest.approx(100.0 * result.optim_states_bytes
                                     / result.total_bytes)
    assert of_states == pytest.approx(100.0 * result.optim_states_bytes
                                      / result.model_state_bytes())
    assert of_states > of_total


def test_lomo_gradient_estimate_matches_ledger_peak_exactly():
    ledger = MemoryLedger()
    model = build_model(TF_CFG, ledger=ledger)
    task = SyntheticTask(kind=TaskKind.SEQUENCE_COPY, seq_len=8, vocab=64,
                         dataset_seed=5)
    lomo_step(model, sample_batch(task, 4, 0), lr=0.05, ledger=ledger)
    arch = arch_from_model_config(TF_CFG)
    setup = TrainSetup(optimizer=OptimizerKind.LOMO,
                       precision=EstimatePrecision.FULL32, seq_len=8, batch=4)
    result = estimate(arch, setup)
    assert result.gradients_bytes == ledger.peak[Category.GRADIENTS]
    assert result.gradients_bytes == largest_tensor_elements(arch) * 4


def test_full32_widths():
    setup = TrainSetup(optimizer=OptimizerKind.ADAMW,
                       precision=EstimatePrecision.FULL32)
    result = estimate(LLAMA, setup)
    count = param_count(LLAMA)
    assert result.params_bytes == 4 * count
    assert result.gradients_bytes == 4 * count
    assert result.optim_states_bytes == 8 * count  # no separate master copy


def test_sgd_full32_has_no_master_copy():
    setup = TrainSetup(optimizer=OptimizerKind.SGD,
                       precision=EstimatePrecision.FULL32)
    assert estimate(LLAMA, setup).optim_states_bytes == 0


def test_invalid_arch_rejected():
    with pytest.raises(ConfigError):
        param_count(ArchSpec(layers=1, hidden=30, heads=4, ffn_hidden=10, vocab=5))
    with pytest.raises(ConfigError):
        estimate(LLAMA, TrainSetup(optimizer=OptimizerKind.SGD, seq_len=0))


def test_format_table_has_all_rows():
    setup = TrainSetup(optimizer=OptimizerKind.LOMO, activation_checkpointing=True)
    text = format_estimate(LLAMA, setup, estimate(LLAMA, setup))
    for label in ("Params", "Gradients", "Optim States", "Activations",
                  "Total Memory"):
        assert label in text
