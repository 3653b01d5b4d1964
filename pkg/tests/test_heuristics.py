import math

import numpy as np
import pytest

from shapenas.errors import InfeasibleError, ValidationError
from shapenas.heuristics import (
    TEMPLATES, TEMPLATE_METRICS, DiagonalProfile, HeuristicSpec, cigar_scale,
    correlation_study, diagonal_profile, shape_diff, template_design_space,
    templated_shape,
)
from shapenas.supernet import DesignSpace, Supernet

from conftest import toy_backbone

TEMPLATE_SPACE = template_design_space()

# taper-scaling reference points: a 61M-parameter reference shape and the
# shapes it should land near when scaled to 91M and 37M
REFERENCE_61M = (360, 240, 240, 240, 360, 360, 360, 360, 480, 480, 540, 540)
TARGET_91M = (600, 360, 360, 360, 600, 600, 600, 600, 768, 768, 768, 768)
TARGET_37M = (120, 120, 120, 120, 120, 120, 120, 120, 240, 240, 240, 240)


def steps_apart(space, a, b):
    dims = list(space.allowed_dims)
    return [abs(dims.index(x) - dims.index(y)) for x, y in zip(a, b)]


def test_known_template_rows():
    assert templated_shape("lower_triangle", TEMPLATE_SPACE) == (
        120, 120, 240, 240, 360, 360, 360, 480, 540, 540, 600, 768
    )
    assert templated_shape("rectangle", TEMPLATE_SPACE) == (360,) * 12
    assert templated_shape("inverted_bottle", TEMPLATE_SPACE) == (
        768, 600, 600, 600, 600, 600, 120, 120, 120, 120, 120, 120
    )


def test_all_templates_valid_in_their_space():
    for kind in TEMPLATES:
        shape = templated_shape(kind, TEMPLATE_SPACE)
        assert TEMPLATE_SPACE.contains(shape)


def test_unknown_template_kind():
    with pytest.raises(ValidationError):
        templated_shape("cylinder", TEMPLATE_SPACE)


def test_template_interpolation_onto_other_spaces():
    desk = DesignSpace((16, 32, 48, 64), 4)
    for kind in TEMPLATES:
        shape = templated_shape(kind, desk)
        assert desk.contains(shape)
    lower = templated_shape("lower_triangle", desk)
    assert lower[0] < lower[-1]
    assert lower[0] == 16 and lower[-1] == 64
    upper = templated_shape("upper_triangle", desk)
    assert upper[0] == 64 and upper[-1] == 16


def test_template_metrics_fixture_is_consistent():
    for name, shape, params_m, g_direct, g_scratch in TEMPLATE_METRICS:
        assert TEMPLATE_SPACE.contains(shape), name
        assert params_m > 0 and g_direct > 0 and g_scratch > 0
    by_name = {row[0]: row for row in TEMPLATE_METRICS}
    assert by_name["lower_triangle"][3] == 7.31
    assert by_name["inverted_bottle"][3] == 9.22


def test_cigar_scale_identity_target_stays_within_one_step():
    spec = HeuristicSpec(
        reference=REFERENCE_61M, reference_params=61e6, target_params=61e6
    )
    out = cigar_scale(spec, TEMPLATE_SPACE)
    assert TEMPLATE_SPACE.contains(out)
    assert max(steps_apart(TEMPLATE_SPACE, out, REFERENCE_61M)) <= 1


def test_cigar_scale_reproduces_reference_up_and_down_scalings():
    up = cigar_scale(
        HeuristicSpec(REFERENCE_61M, 61e6, 91e6), TEMPLATE_SPACE
    )
    assert TEMPLATE_SPACE.contains(up)
    assert max(steps_apart(TEMPLATE_SPACE, up, TARGET_91M)) <= 1
    down = cigar_scale(
        HeuristicSpec(REFERENCE_61M, 61e6, 37e6), TEMPLATE_SPACE
    )
    assert TEMPLATE_SPACE.contains(down)
    assert max(steps_apart(TEMPLATE_SPACE, down, TARGET_37M)) <= 1


def test_cigar_scale_outputs_satisfy_taper_invariants():
    for target in np.linspace(37e6, 110e6, 12):
        shape = cigar_scale(
            HeuristicSpec(REFERENCE_61M, 61e6, float(target)), TEMPLATE_SPACE
        )
        early = HeuristicSpec(
            REFERENCE_61M, 61e6, float(target)
        ).early_middle_indices(12)
        assert early == [1, 2, 3]
        for i in early:
            assert shape[0] >= shape[i]
            assert shape[-1] >= shape[i]


def test_cigar_scale_is_weakly_monotone_in_target():
    targets = np.linspace(38e6, 115e6, 16)
    prev = None
    for target in targets:
        shape = cigar_scale(
            HeuristicSpec(REFERENCE_61M, 61e6, float(target)), TEMPLATE_SPACE
        )
        if prev is not None:
            assert all(b >= a for a, b in zip(prev, shape))
        prev = shape


def test_cigar_scale_infeasible_targets():
    with pytest.raises(InfeasibleError):
        cigar_scale(HeuristicSpec(REFERENCE_61M, 61e6, 1e5), TEMPLATE_SPACE)
    with pytest.raises(InfeasibleError):
        cigar_scale(HeuristicSpec(REFERENCE_61M, 61e6, 1e9), TEMPLATE_SPACE)


def test_cigar_scale_window_maps_to_other_depths():
    spec = HeuristicSpec((16, 16, 32, 48), 1e6, 1e6)
    assert spec.early_middle_indices(4) == [1]
    assert spec.early_middle_indices(12) == [1, 2, 3]
    assert spec.early_middle_indices(24) == [2, 3, 4, 5, 6, 7]


def test_shape_diff_examples():
    assert shape_diff((3, 4, 5), (3, 4, 5)) == 0.0
    assert shape_diff((0, 3), (4, 0)) == 5.0
    lower = TEMPLATES["lower_triangle"]
    rect = TEMPLATES["rectangle"]
    assert abs(shape_diff(lower, rect) - math.sqrt(447264)) < 1e-9
    with pytest.raises(ValidationError):
        shape_diff((1, 2), (1, 2, 3))


def test_correlation_study_monotone_metric_gives_spearman_one():
    optimal = ((360,) * 12, 7.0)
    samples = []
    for _name, shape, _p, _gd, _gs in TEMPLATE_METRICS:
        d = shape_diff(shape, optimal[0])
        samples.append((shape, 7.0 + 0.01 * d))
    s, p = correlation_study(samples, optimal)
    assert abs(s - 1.0) < 1e-12
    assert p > 0.99


def test_correlation_study_is_order_invariant():
    optimal = (TEMPLATE_METRICS[0][1], TEMPLATE_METRICS[0][3])
    samples = [(row[1], row[3]) for row in TEMPLATE_METRICS[1:]]
    a = correlation_study(samples, optimal)
    b = correlation_study(list(reversed(samples)), optimal)
    assert a == b


def test_correlation_study_json_layout():
    import json

    from shapenas.heuristics import correlation_study_json

    optimal = (TEMPLATE_METRICS[0][1], TEMPLATE_METRICS[0][3])
    samples = [(row[1], row[3]) for row in TEMPLATE_METRICS[1:]]
    doc = json.loads(correlation_study_json(samples, optimal))
    assert doc["format_version"] == 1
    assert doc["n_samples"] == len(samples)
    s, p = correlation_study(samples, optimal)
    assert doc["spearman"] == s and doc["pearson"] == p


def test_correlation_study_errors():
    optimal = ((1, 2), 1.0)
    with pytest.raises(ValidationError):
        correlation_study([((1, 2), 1.0)] * 2, optimal)
    constant = [((1, 2), 5.0), ((1, 2), 5.0), ((1, 2), 5.0)]
    with pytest.raises(ValidationError):
        correlation_study(constant, optimal)


def test_fresh_model_profiles_are_exactly_uniform():
    model = Supernet(toy_backbone(), seed=0)
    profile = diagonal_profile(model)
    for vec in profile.input_profiles + profile.output_profiles:
        assert len(vec) == 8
        np.testing.assert_array_equal(vec, np.full(8, 1.0 / 8.0))
        assert abs(vec.sum() - 1.0) <= 1e-12


def test_profiles_sum_to_one_after_perturbation():
    model = Supernet(toy_backbone(), seed=0)
    rng = np.random.default_rng(4)
    for layer in model.layers:
        layer.in_bottleneck.weight.data += rng.normal(
            size=(8, 8), scale=0.7
        )
    profile = diagonal_profile(model)
    for vec in profile.input_profiles:
        assert abs(vec.sum() - 1.0) <= 1e-12


def test_profile_csv_layout():
    profile = DiagonalProfile(
        input_profiles=[np.asarray([0.5, 0.5])],
        output_profiles=[np.asarray([1.0, 0.0])],
    )
    lines = profile.to_csv().splitlines()
    assert lines[0] == "layer,bottleneck,index,weight"
    assert lines[1] == "0,input,0,0.5"
    assert lines[-1] == "0,output,1,0.0"
