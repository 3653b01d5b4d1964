"""Templated shapes, heuristic taper scaling, bottleneck-diagonal profiles,
and the shape-difference correlation study.

The taper heuristic ("cigar" profile): a large last layer, a moderately
large first layer, small early-middle layers, moderate later-middle layers.
``cigar_scale`` grows or shrinks a reference shape to a parameter target by
scaling every layer linearly, snapping early-middle layers down to the
nearest allowed width and all other layers up.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, ValidationError
from .supernet import DesignSpace

# 12-layer reference templates, defined over widths {120..768}.
_TEMPLATE_SPACE_DIMS = (120, 240, 360, 480, 540, 600, 768)
TEMPLATES = {
    "lower_triangle": (120, 120, 240, 240, 360, 360, 360, 480, 540, 540, 600, 768),
    "upper_triangle": (768, 600, 540, 540, 480, 360, 360, 360, 240, 240, 120, 120),
    "rectangle": (360,) * 12,
    "diamond": (120, 240, 360, 480, 480, 540, 768, 540, 480, 360, 240, 120),
    "inverted_diamond": (768, 600, 360, 240, 240, 120, 120, 240, 240, 360, 600, 768),
    "bottle": (120, 120, 120, 120, 120, 120, 600, 600, 600, 600, 600, 768),
    "inverted_bottle": (768, 600, 600, 600, 600, 600, 120, 120, 120, 120, 120, 120),
}

# Reference sub-network measurements over the template design space:
# (name, shape, millions of params, direct score, from-scratch score).
# Shipped as a fixture for exercising the correlation utilities.
TEMPLATE_METRICS = (
    ("evo_search_1", (480, 360, 360, 240, 240, 360, 480, 480, 360, 480, 540, 540), 65, 6.86, 4.45),
    ("evo_search_2", (480, 240, 360, 240, 540, 480, 360, 360, 360, 360, 540, 480), 63, 7.09, 4.55),
    ("lower_triangle", TEMPLATES["lower_triangle"], 64, 7.31, 4.67),
    ("random", (480, 360, 360, 540, 480, 540, 360, 480, 540, 120, 360, 540), 64, 7.49, 4.91),
    ("rectangle", TEMPLATES["rectangle"], 58, 7.5, 4.72),
    ("inverted_diamond", TEMPLATES["inverted_diamond"], 65, 8.12, 4.93),
    ("bottle", TEMPLATES["bottle"], 64, 8.31, 4.9),
    ("diamond", TEMPLATES["diamond"], 64, 8.36, 5.13),
    ("upper_triangle", TEMPLATES["upper_triangle"], 64, 8.43, 5.16),
    ("inverted_bottle", TEMPLATES["inverted_bottle"], 64, 9.22, 5.37),
)


def _snap_nearest(value, dims):
    best = dims[0]
    for d in dims[1:]:
        # ties snap to the larger width
        if abs(d - value) <= abs(best - value):
            best = d
    return best


def _snap_down(value, dims):
    candidates = [d for d in dims if d <= value]
    return candidates[-1] if candidates else dims[0]


def _snap_up(value, dims):
    candidates = [d for d in dims if d >= value]
    return candidates[0] if candidates else dims[-1]


def templated_shape(kind, design_space):
    """The named template mapped onto ``design_space``.

    Exact table values on the 12-layer template space; other spaces get the
    template curve interpolated over normalized layer position, rescaled to
    the space's width range, and snapped to the nearest allowed width.
    """
    if kind not in TEMPLATES:
        raise ValidationError(
            f"unknown template {kind!r}; choose from {sorted(TEMPLATES)}"
        )
    template = TEMPLATES[kind]
    dims = design_space.allowed_dims
    if design_space.num_layers == len(template) and dims == _TEMPLATE_SPACE_DIMS:
        return template
    lo_t, hi_t = min(_TEMPLATE_SPACE_DIMS), max(_TEMPLATE_SPACE_DIMS)
    curve = [(v - lo_t) / (hi_t - lo_t) for v in template]
    n = design_space.num_layers
    positions = np.linspace(0.0, 1.0, len(template))
    targets = np.linspace(0.0, 1.0, n) if n > 1 else np.asarray([0.5])
    interp = np.interp(targets, positions, curve)
    lo, hi = dims[0], dims[-1]
    return tuple(_snap_nearest(lo + u * (hi - lo), dims) for u in interp)


@dataclass(frozen=True)
class HeuristicSpec:
    """Reference shape and its parameter count, plus the scaling target.

    ``early_middle`` is a 1-based half-open layer window (start, stop); its
    layers snap down during scaling, all others snap up. The default window
    (2, 5) marks layers 2-4 of a 12-layer backbone and is mapped
    proportionally onto other depths.
    """

    reference: tuple
    reference_params: float
    target_params: float
    early_middle: tuple = (2, 5)

    def __post_init__(self):
        if self.reference_params <= 0:
            raise ValidationError("reference_params must be positive")
        if self.target_params <= 0:
            raise ValidationError("target_params must be positive")

    def early_middle_indices(self, num_layers):
        """0-based indices of the early-middle window for this depth."""
        start, stop = self.early_middle
        lo = (start - 1) / 12.0
        hi = (stop - 1) / 12.0
        return [
            i for i in range(num_layers)
            if lo <= i / num_layers < hi
        ]


def cigar_scale(spec, design_space):
    """Scale the reference shape to the target parameter count.

    The scale factor is target/reference params; early-middle layers round
    down to the nearest allowed width, the rest round up, and everything
    clamps to the design-space bounds.
    """
    shape = design_space.validate(spec.reference)
    dims = design_space.allowed_dims
    factor = spec.target_params / spec.reference_params
    ref_total = sum(shape)
    min_est = spec.reference_params * (design_space.num_layers * dims[0]) / ref_total
    max_est = spec.reference_params * (design_space.num_layers * dims[-1]) / ref_total
    if spec.target_params < min_est or spec.target_params > max_est:
        raise InfeasibleError(
            f"target {spec.target_params:.3g} params outside the reachable "
            f"range [{min_est:.3g}, {max_est:.3g}] for this design space"
        )
    down = set(spec.early_middle_indices(design_space.num_layers))
    out = []
    for i, d in enumerate(shape):
        scaled = d * factor
        snap = _snap_down if i in down else _snap_up
        out.append(snap(scaled, dims))
    return tuple(out)


@dataclass
class DiagonalProfile:
    """Per-layer softmax over the principal diagonal of each bottleneck."""

    input_profiles: list   # one vector per layer
    output_profiles: list

    def rows(self):
        for layer, vec in enumerate(self.input_profiles):
            for idx, w in enumerate(vec):
                yield layer, "input", idx, float(w)
        for layer, vec in enumerate(self.output_profiles):
            for idx, w in enumerate(vec):
                yield layer, "output", idx, float(w)

    def to_csv(self):
        lines = ["layer,bottleneck,index,weight"]
        for layer, side, idx, w in self.rows():
            lines.append(f"{layer},{side},{idx},{w!r}")
        return "\n".join(lines) + "\n"


def _softmax_vec(v):
    z = v - v.max()
    e = np.exp(z)
    return e / e.sum()


def diagonal_profile(model):
    inputs = []
    outputs = []
    for layer in model.layers:
        inputs.append(_softmax_vec(np.diagonal(layer.in_bottleneck.weight.data)))
        outputs.append(_softmax_vec(np.diagonal(layer.out_bottleneck.weight.data)))
    return DiagonalProfile(input_profiles=inputs, output_profiles=outputs)


def shape_diff(s1, s2):
    """Euclidean norm of the per-layer width differences."""
    if len(s1) != len(s2):
        raise ValidationError(
            f"shapes have lengths {len(s1)} and {len(s2)}"
        )
    d = np.asarray(s1, dtype=np.float64) - np.asarray(s2, dtype=np.float64)
    return float(math.sqrt(float(d @ d)))


def correlation_study(samples, optimal):
    """Correlate shape distance to the optimum with metric gap.

    ``samples`` is a list of (shape, metric); ``optimal`` is the reference
    (shape, metric). Returns (spearman, pearson) over the paired distances.
    """
    from .surrogate import pearson, spearman

    if len(samples) < 3:
        raise ValidationError("correlation study needs at least 3 samples")
    opt_shape, opt_metric = optimal
    dists = [shape_diff(shape, opt_shape) for shape, _ in samples]
    gaps = [abs(metric - opt_metric) for _, metric in samples]
    return spearman(dists, gaps), pearson(dists, gaps)


def correlation_study_json(samples, optimal):
    """Study results in the exported JSON layout."""
    import json

    s, p = correlation_study(samples, optimal)
    return json.dumps({
        "format_version": 1,
        "n_samples": len(samples),
        "optimal_shape": "-".join(str(d) for d in optimal[0]),
        "spearman": s,
        "pearson": p,
    }, sort_keys=True)


def template_design_space(num_layers=12):
    return DesignSpace(_TEMPLATE_SPACE_DIMS, num_layers)
