import dataclasses
import hashlib
import math

import numpy as np
import pytest

from shapenas import tensor as T
from shapenas.data import MASK_ID, NUM_SPECIALS
from shapenas.errors import ConfigError, DataError, NumericError, ValidationError
from shapenas.optim import AdamW
from shapenas.supernet import DesignSpace, Supernet
from shapenas.training import (
    EVAL_MASK_SEED, MaskingPolicy, TrainingConfig, evaluate_perplexity,
    mask_batch, sample_random, sample_sandwich, super_pretrain, train_step,
)

from conftest import toy_backbone

# chi-square critical values at p = 0.01
CHI2_CRIT = {3: 11.345, 6: 16.812}


def test_sample_random_single_option_space():
    space = DesignSpace((32,), 5)
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert sample_random(space, rng) == (32,) * 5


def test_sample_random_uniform_chi_square():
    space = DesignSpace((120, 240, 360, 480, 540, 600, 768), 12)
    rng = np.random.default_rng(42)
    draws = np.asarray([sample_random(space, rng) for _ in range(10_000)])
    for layer in range(12):
        counts = np.asarray(
            [(draws[:, layer] == d).sum() for d in space.allowed_dims]
        )
        assert space.contains(tuple(draws[0]))
        expected = 10_000 / 7
        stat = float(((counts - expected) ** 2 / expected).sum())
        assert stat < CHI2_CRIT[6], f"layer {layer} not uniform: {stat}"


def test_sample_random_seed_reproducible():
    space = DesignSpace((16, 32, 48, 64), 4)
    a = [sample_random(space, np.random.default_rng(7)) for _ in range(5)]
    b = [sample_random(space, np.random.default_rng(7)) for _ in range(5)]
    assert a == b


def test_sandwich_contains_extremes():
    space = DesignSpace((16, 32, 48, 64), 2)
    rng = np.random.default_rng(1)
    shapes = sample_sandwich(space, 2, rng)
    assert shapes == [(64, 64), (16, 16)]
    shapes = sample_sandwich(space, 4, rng)
    assert shapes[0] == (64, 64) and shapes[1] == (16, 16)
    assert len(shapes) == 4
    assert all(space.contains(s) for s in shapes)
    with pytest.raises(ConfigError):
        sample_sandwich(space, 1, rng)


def test_masking_policy_validation():
    with pytest.raises(ConfigError):
        MaskingPolicy(mask_prob=0.0)
    with pytest.raises(ConfigError):
        MaskingPolicy(mask_token_prob=0.7, random_token_prob=0.2, keep_prob=0.2)


def test_mask_batch_zero_selection_is_data_error():
    rng = np.random.default_rng(3)
    tokens = np.full((1, 8), NUM_SPECIALS + 1)
    with pytest.raises(DataError):
        mask_batch(tokens, MaskingPolicy(mask_prob=1e-9), rng, vocab_size=20)


def test_mask_batch_all_specials_is_data_error():
    rng = np.random.default_rng(3)
    tokens = np.asarray([[0, 1, 2, 3, 4]])
    with pytest.raises(DataError):
        mask_batch(tokens, MaskingPolicy(), rng, vocab_size=20)


def test_mask_batch_full_mask_policy():
    rng = np.random.default_rng(3)
    tokens = np.asarray([[2, 7, 8, 9, 3], [5, 6, 0, 11, 12]])
    policy = MaskingPolicy(
        mask_prob=1.0, mask_token_prob=1.0, random_token_prob=0.0, keep_prob=0.0
    )
    batch = mask_batch(tokens, policy, rng, vocab_size=20)
    special = tokens < NUM_SPECIALS
    np.testing.assert_array_equal(batch.inputs[~special], MASK_ID)
    np.testing.assert_array_equal(batch.inputs[special], tokens[special])
    np.testing.assert_array_equal(batch.labels[~special], tokens[~special])
    np.testing.assert_array_equal(batch.labels[special], -1)


def test_mask_batch_selection_rate_and_labels():
    rng = np.random.default_rng(11)
    tokens = rng.integers(NUM_SPECIALS, 500, size=(10, 1000))
    policy = MaskingPolicy(mask_prob=0.15)
    batch = mask_batch(tokens, policy, rng, vocab_size=500)
    frac = (batch.labels >= 0).mean()
    assert 0.13 <= frac <= 0.17
    selected = batch.labels >= 0
    np.testing.assert_array_equal(batch.labels[selected], tokens[selected])
    assert (batch.labels[~selected] == -1).all()
    # inputs argument is never mutated
    assert tokens.base is None and (tokens >= NUM_SPECIALS).all()


def test_mask_batch_corruption_split():
    rng = np.random.default_rng(13)
    tokens = rng.integers(NUM_SPECIALS, 500, size=(30, 1000))
    batch = mask_batch(tokens, MaskingPolicy(), rng, vocab_size=500)
    selected = batch.labels >= 0
    n = selected.sum()
    masked = (batch.inputs == MASK_ID) & selected
    kept = (batch.inputs == tokens) & selected
    randomized = selected & ~masked & ~kept
    assert abs(masked.sum() / n - 0.8) < 0.03
    assert abs(randomized.sum() / n - 0.1) < 0.02
    assert abs(kept.sum() / n - 0.1) < 0.02


def make_batch(model, rng, batch=4, seq=10):
    vocab = model.config.vocab_size
    tokens = rng.integers(NUM_SPECIALS, vocab, size=(batch, seq))
    return mask_batch(tokens, MaskingPolicy(mask_prob=0.3), rng, vocab)


def make_optimizer(model):
    return AdamW(model.parameters(), lr=1e-3, weight_decay=0.01)


def test_train_step_smallest_shape_only_touches_prefix():
    model = Supernet(toy_backbone(), seed=0)
    rng = np.random.default_rng(5)
    batch = make_batch(model, rng)
    opt = make_optimizer(model)
    before = {
        name: t.data.copy() for name, t in model.named_parameters()
    }
    smallest = model.config.design_space.min_shape()
    losses = train_step(model, batch, [smallest], opt)
    assert len(losses) == 1 and math.isfinite(losses[0])
    extents = {
        name: e for name, _t, e in model.active_extents(smallest)
    }
    changed_outside = []
    for name, t in model.named_parameters():
        inside = np.zeros(t.data.shape, dtype=bool)
        inside[tuple(slice(0, e) for e in extents[name])] = True
        outside = ~inside
        if outside.any() and not np.array_equal(
            t.data[outside], before[name][outside]
        ):
            changed_outside.append(name)
    assert changed_outside == []


def test_train_step_largest_shape_moves_parameters():
    model = Supernet(toy_backbone(), seed=0)
    rng = np.random.default_rng(6)
    batch = make_batch(model, rng)
    opt = make_optimizer(model)
    before = {name: t.data.copy() for name, t in model.named_parameters()}
    train_step(model, batch, [model.config.design_space.max_shape()], opt)
    moved = sum(
        not np.array_equal(t.data, before[name])
        for name, t in model.named_parameters()
    )
    assert moved == len(before)


def test_gradient_accumulation_equals_sum_of_individual_passes():
    model = Supernet(toy_backbone(), seed=1)
    rng = np.random.default_rng(7)
    batch = make_batch(model, rng)
    space = model.config.design_space
    shapes = [space.min_shape(), space.max_shape()]

    def grads_for(shape_list):
        model.zero_grads()
        for shape in shape_list:
            model.apply_shape(shape)
            with T.Tape() as tape:
                loss, _ = model.mlm_forward(batch.inputs, batch.labels)
                T.backward(tape, loss)
        return {
            name: t.grad.copy() if t.grad is not None else None
            for name, t in model.named_parameters()
        }

    combined = grads_for(shapes)
    small = grads_for([shapes[0]])
    big = grads_for([shapes[1]])
    for name in combined:
        np.testing.assert_allclose(
            combined[name], small[name] + big[name], rtol=0, atol=1e-12
        )


def test_largest_shape_uses_every_layer_parameter():
    model = Supernet(toy_backbone(), seed=2)
    rng = np.random.default_rng(8)
    batch = make_batch(model, rng, batch=8, seq=12)
    model.apply_shape(model.config.design_space.max_shape())
    model.zero_grads()
    with T.Tape() as tape:
        loss, _ = model.mlm_forward(batch.inputs, batch.labels)
        T.backward(tape, loss)
    for name, t in model.named_parameters():
        if name.startswith("layers."):
            assert (t.grad != 0).all(), f"{name} has untouched entries"


def test_train_step_rejects_empty_shape_list():
    model = Supernet(toy_backbone(), seed=0)
    rng = np.random.default_rng(5)
    with pytest.raises(ValidationError):
        train_step(model, make_batch(model, rng), [], make_optimizer(model))


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(sampler="sandwich", shapes_per_step=1)
    with pytest.raises(ConfigError):
        TrainingConfig(sampler="bogus")
    with pytest.raises(ConfigError):
        TrainingConfig(shapes_per_step=0)


def test_super_pretrain_zero_steps_changes_nothing(small_assets):
    config = small_assets["config"]
    model = Supernet(config, seed=3)
    before = {name: t.data.copy() for name, t in model.named_parameters()}
    tc = dataclasses.replace(small_assets["training"], steps=0)
    log = super_pretrain(model, small_assets["corpus"], tc)
    assert log.steps == [] and log.evals == []
    for name, t in model.named_parameters():
        np.testing.assert_array_equal(t.data, before[name])


def test_super_pretrain_requires_one_batch(small_assets):
    config = small_assets["config"]
    model = Supernet(config, seed=3)
    corpus = dataclasses.replace(
        small_assets["corpus"],
        train_rows=small_assets["corpus"].train_rows[:3],
    )
    with pytest.raises(DataError):
        super_pretrain(model, corpus, small_assets["training"])


def test_super_pretrain_deterministic_and_sandwich_invariant(small_assets):
    logs = []
    for _ in range(2):
        model = Supernet(small_assets["config"], seed=17)
        log = super_pretrain(
            model, small_assets["corpus"], small_assets["training"]
        )
        logs.append(log)
    assert logs[0].losses_csv() == logs[1].losses_csv()
    assert logs[0].evals_csv() == logs[1].evals_csv()
    space = small_assets["config"].design_space
    assert len(logs[0].steps) == small_assets["training"].steps
    for rec in logs[0].steps:
        assert space.max_shape() in rec.shapes
        assert space.min_shape() in rec.shapes


def test_super_pretrain_reduces_perplexity(small_assets):
    model = Supernet(small_assets["config"], seed=21)
    tc = dataclasses.replace(small_assets["training"], steps=60, eval_interval=60)
    log = super_pretrain(model, small_assets["corpus"], tc)
    space = small_assets["config"].design_space
    for shape in (space.max_shape(), space.min_shape()):
        first = next(r.perplexity for r in log.evals if r.step == 0 and r.shape == shape)
        last = next(r.perplexity for r in log.evals if r.step == 60 and r.shape == shape)
        assert last < first


def test_numeric_error_carries_step_index(small_assets):
    model = Supernet(small_assets["config"], seed=3)
    model.layers[0].q.weight.data[0, 0] = np.nan
    with pytest.raises(NumericError, match="step 0"):
        super_pretrain(
            model, small_assets["corpus"], small_assets["training"]
        )


def test_evaluate_uniform_logit_model_gives_vocab_size(small_assets):
    config = small_assets["config"]
    model = Supernet(config, seed=0)
    for p in model.parameters():
        p.data[...] = 0.0
    p = evaluate_perplexity(
        model, config.design_space.max_shape(),
        small_assets["corpus"].eval_rows, 16, MaskingPolicy(),
        config.vocab_size,
    )
    assert abs(p - config.vocab_size) / config.vocab_size < 1e-9


def test_evaluate_is_deterministic_and_stateless(small_assets):
    config = small_assets["config"]
    model = Supernet(config, seed=12)
    space = config.design_space
    rows = small_assets["corpus"].eval_rows
    policy = MaskingPolicy()
    a = evaluate_perplexity(model, space.min_shape(), rows, 16, policy,
                            config.vocab_size)
    # evaluating another shape in between must not disturb the result
    evaluate_perplexity(model, space.max_shape(), rows, 16, policy,
                        config.vocab_size)
    b = evaluate_perplexity(model, space.min_shape(), rows, 16, policy,
                            config.vocab_size)
    assert a == b
    with pytest.raises(DataError):
        evaluate_perplexity(model, space.min_shape(), rows[:2], 16, policy,
                            config.vocab_size)


def test_eval_mask_seed_separate_from_training_seed():
    assert EVAL_MASK_SEED != 0
