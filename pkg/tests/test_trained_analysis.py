"""Direction-only checks on the trained desk supernet.

These share the expensive session training run with the acceptance suite
and verify the qualitative effects super pre-training is supposed to leave
behind: banded bottleneck diagonals and shape-distance/quality correlation.
"""

import numpy as np

from shapenas.heuristics import correlation_study, diagonal_profile
from shapenas.search import SearchConfig, evolve
from shapenas.supernet import count_params
from shapenas.surrogate import fit_predictor
from shapenas.training import MaskingPolicy, evaluate_perplexity


def test_trained_diagonals_favor_shared_prefix(desk_run):
    model = desk_run["model"]
    smallest = min(desk_run["config"].allowed_dims)
    profile = diagonal_profile(model)
    favored = 0
    vectors = profile.input_profiles + profile.output_profiles
    for vec in vectors:
        if vec[:smallest].mean() > vec.mean():
            favored += 1
    # the always-trained prefix should carry more diagonal mass than the
    # rarely-trained tail in most bottlenecks
    assert favored > len(vectors) // 2, f"only {favored}/{len(vectors)}"


def test_shape_distance_correlates_with_quality_gap(desk_run,
                                                    perplexity_dataset):
    model = desk_run["model"]
    config = desk_run["config"]
    surrogate, _report = fit_predictor(perplexity_dataset, "perplexity",
                                       seed=5)
    params = np.asarray([s.params for s in perplexity_dataset])
    lo, hi = np.quantile(params, [0.35, 0.65])
    band = [s for s in perplexity_dataset if lo <= s.params <= hi][:200]
    assert len(band) >= 30

    result = evolve(
        SearchConfig(seed=7),
        config.design_space,
        fitness_fn=lambda shape: surrogate.predict(list(shape)),
        constraint_fn=lambda shape: lo <= count_params(config, shape) <= hi,
        constraint_label=f"params in [{lo:.0f}, {hi:.0f}]",
    )
    best_shape = result.best.shape
    best_perplexity = evaluate_perplexity(
        model, best_shape, desk_run["corpus"].eval_rows[:64], 16,
        MaskingPolicy(), config.vocab_size,
    )
    samples = [(s.dims, s.target) for s in band]
    s_corr, _p_corr = correlation_study(samples, (best_shape, best_perplexity))
    assert s_corr > 0, f"spearman {s_corr} not positive"
