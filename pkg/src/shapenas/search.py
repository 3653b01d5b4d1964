"""Evolutionary search over shape vectors, plus a brute-force oracle.

Selection is by truncation: each generation keeps the fittest half as
parents and refills the population with one quarter mutants and one quarter
uniform-crossover children (parents : mutants : crossovers = 2 : 1 : 1).
Infeasible offspring are rejected and resampled a bounded number of times,
then the parent is cloned. Fitness is minimized.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InfeasibleError, ValidationError
from .supernet import count_params

MAX_CONSTRAINT_RETRIES = 50


@dataclass(frozen=True)
class SearchConfig:
    population_size: int = 100
    mutation_prob: float = 0.4
    # parents : (mutants + crossovers) size ratio; 1 keeps half the
    # population as parents and splits the other half between the two
    parent_ratio: int = 1
    iterations: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ConfigError("population_size must be >= 2")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ConfigError("mutation_prob must lie in [0, 1]")
        if self.parent_ratio < 1:
            raise ConfigError("parent_ratio must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")


@dataclass(frozen=True)
class Constraint:
    """Either a parameter-count window or a latency ceiling."""

    kind: str
    min_params: int = 0
    max_params: int = 0
    max_latency_ms: float = 0.0
    device: str = ""

    def __post_init__(self):
        if self.kind == "param_range":
            if self.min_params < 0 or self.max_params < self.min_params:
                raise ConfigError(
                    "param_range needs 0 <= min_params <= max_params"
                )
        elif self.kind == "latency_max":
            if self.max_latency_ms <= 0:
                raise ConfigError("latency_max needs a positive bound")
        else:
            raise ConfigError(f"unknown constraint kind {self.kind!r}")

    def describe(self):
        if self.kind == "param_range":
            return f"params in [{self.min_params}, {self.max_params}]"
        return f"latency <= {self.max_latency_ms} ms on {self.device or 'host'}"


def check_constraint(shape, constraint, resource):
    """(feasible, measured value) for one shape.

    ``resource`` is the backbone config (or model) for param_range, or a
    fitted latency surrogate exposing ``predict_shape(dims, params)`` plus a
    backbone config via the pair (config, surrogate) for latency_max.
    """
    if constraint is None:
        return True, 0.0
    if constraint.kind == "param_range":
        value = count_params(resource, shape)
        return constraint.min_params <= value <= constraint.max_params, value
    if constraint.kind == "latency_max":
        if resource is None:
            raise ConfigError(
                "latency constraints need a fitted latency predictor"
            )
        config, surrogate = resource
        params = count_params(config, shape)
        value = surrogate.predict(list(shape) + [params])
        return value <= constraint.max_latency_ms, value
    raise ConfigError(f"unknown constraint kind {constraint.kind!r}")


@dataclass
class Candidate:
    shape: tuple
    fitness: float
    params: int = 0
    feasible: bool = True


@dataclass
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_shape: tuple


@dataclass
class SearchResult:
    best: Candidate
    history: list = field(default_factory=list)

    def history_csv(self):
        lines = ["generation,best_fitness,mean_fitness"]
        for rec in self.history:
            lines.append(
                f"{rec.generation},{rec.best_fitness!r},{rec.mean_fitness!r}"
            )
        return "\n".join(lines) + "\n"


def mutate(shape, mutation_prob, design_space, rng):
    """Independently resample each gene (to a different value) w.p. p."""
    design_space.validate(shape)
    dims = design_space.allowed_dims
    out = list(shape)
    if len(dims) == 1:
        return tuple(out)
    for i in range(len(out)):
        if rng.random() < mutation_prob:
            options = [d for d in dims if d != out[i]]
            out[i] = options[rng.integers(0, len(options))]
    return tuple(out)


def crossover(a, b, rng):
    """Uniform crossover: each gene from either parent with probability 1/2."""
    if len(a) != len(b):
        raise ValidationError(
            f"crossover parents have lengths {len(a)} and {len(b)}"
        )
    take_a = rng.random(len(a)) < 0.5
    return tuple(x if t else y for x, y, t in zip(a, b, take_a))


def evolve(search_config, design_space, fitness_fn, constraint_fn=None,
           params_fn=None, constraint_label=None):
    """Minimize ``fitness_fn`` over the design space under a constraint.

    ``constraint_fn`` maps a shape to bool (True = feasible);
    ``params_fn``, when given, fills Candidate.params for reporting;
    ``constraint_label`` names the constraint in infeasibility errors.
    Returns a SearchResult with the best candidate ever observed and
    per-generation statistics.
    """
    rng = np.random.default_rng(search_config.seed)
    feasible = constraint_fn or (lambda shape: True)
    cache = {}

    def fitness(shape):
        if shape not in cache:
            cache[shape] = float(fitness_fn(shape))
        return cache[shape]

    pop_size = search_config.population_size
    population = []
    attempts = 0
    max_attempts = pop_size * MAX_CONSTRAINT_RETRIES
    while len(population) < pop_size and attempts < max_attempts:
        shape = _sample(design_space, rng)
        attempts += 1
        if feasible(shape):
            population.append(shape)
    if not population:
        raise InfeasibleError(
            "no feasible shape found while initializing the population "
            f"(after {max_attempts} samples; constraint: "
            f"{constraint_label or 'unnamed'})"
        )
    while len(population) < pop_size:
        population.append(population[rng.integers(0, len(population))])

    best = None
    history = []

    def record(generation):
        nonlocal best
        scored = sorted(
            ((fitness(s), s) for s in population), key=lambda fs: (fs[0], fs[1])
        )
        fit_best, shape_best = scored[0]
        if best is None or fit_best < best.fitness:
            best = Candidate(
                shape=shape_best,
                fitness=fit_best,
                params=params_fn(shape_best) if params_fn else 0,
                feasible=True,
            )
        mean = float(np.mean([f for f, _ in scored]))
        history.append(
            GenerationStats(
                generation=generation,
                best_fitness=float(best.fitness),
                mean_fitness=mean,
                best_shape=best.shape,
            )
        )
        return [s for _, s in scored]

    ranked = record(0)
    ratio = search_config.parent_ratio
    n_parents = max(1, pop_size * ratio // (ratio + 1))
    n_mutants = max(1, (pop_size - n_parents) // 2)
    for generation in range(1, search_config.iterations + 1):
        parents = ranked[:n_parents]
        children = []
        for _ in range(n_mutants):
            parent = parents[rng.integers(0, len(parents))]
            children.append(_constrained(
                lambda: mutate(
                    parent, search_config.mutation_prob, design_space, rng
                ),
                feasible, fallback=parent,
            ))
        while len(parents) + len(children) < pop_size:
            pa = parents[rng.integers(0, len(parents))]
            pb = parents[rng.integers(0, len(parents))]
            children.append(_constrained(
                lambda: crossover(pa, pb, rng), feasible, fallback=pa,
            ))
        population = parents + children
        ranked = record(generation)
    return SearchResult(best=best, history=history)


def _sample(design_space, rng):
    dims = design_space.allowed_dims
    picks = rng.integers(0, len(dims), size=design_space.num_layers)
    return tuple(dims[i] for i in picks)


def _constrained(make, feasible, fallback):
    for _ in range(MAX_CONSTRAINT_RETRIES):
        shape = make()
        if feasible(shape):
            return shape
    return fallback


def brute_force_search(design_space, fitness_fn, constraint_fn=None,
                       enumeration_cap=10 ** 6):
    """Exact argmin over all feasible shapes; ties break lexicographically."""
    if design_space.size > enumeration_cap:
        raise ConfigError(
            f"design space has {design_space.size} shapes, above the "
            f"enumeration cap {enumeration_cap}"
        )
    feasible = constraint_fn or (lambda shape: True)
    best_shape = None
    best_fit = None
    for shape in design_space.all_shapes():
        if not feasible(shape):
            continue
        fit = float(fitness_fn(shape))
        if best_fit is None or fit < best_fit:
            best_fit = fit
            best_shape = shape
    if best_shape is None:
        raise InfeasibleError("no feasible shape in the design space")
    return best_shape, best_fit
