"""Command-line entry point.

Subcommands: build-vocab, train, search, fit-predictor, bench, heuristic,
template, analyze-diagonals, eval-perplexity. Configuration comes from an
optional JSON file (--config) with flags overriding individual fields; the
effective configuration is dumped next to every output for provenance.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error,
4 infeasibility.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import data
from .errors import (
    ConfigError, DataError, InfeasibleError, NumericError, ShapenasError,
)
from .heuristics import (
    HeuristicSpec, TEMPLATES, cigar_scale, diagonal_profile, templated_shape,
)
from .latency import BenchParams, build_latency_dataset, write_sidecar
from .presets import PRESETS
from .search import Constraint, SearchConfig, check_constraint, evolve
from .supernet import (
    BackboneConfig, Supernet, count_params, load_checkpoint, save_checkpoint,
)
from .surrogate import (
    GbtHyperparams, SurrogateModel, fit_predictor, read_dataset_csv,
    write_dataset_csv,
)
from .training import (
    MaskingPolicy, TrainingConfig, evaluate_perplexity, shape_str,
    super_pretrain,
)

OUTPUT_FORMAT_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _dataclass_from_dict(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        if name == "masking" and cls is TrainingConfig:
            value = _dataclass_from_dict(MaskingPolicy, value, f"{where}.masking")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


_RUN_SECTIONS = {
    "preset": None,
    "seed": None,
    "backbone": BackboneConfig,
    "training": TrainingConfig,
    "search": SearchConfig,
    "surrogate": GbtHyperparams,
    "paths": None,
}
_PATH_KEYS = {"corpus", "vocab", "checkpoint", "out_dir", "dataset", "predictor"}


class RunConfig:
    """Validated view of the JSON config document plus flag overrides."""

    def __init__(self, doc=None):
        doc = doc or {}
        unknown = set(doc) - set(_RUN_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        self.preset = doc.get("preset", "desk")
        if self.preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}"
            )
        self.seed = int(doc.get("seed", 0))
        backbone_fn, training_fn = PRESETS[self.preset]
        for section in ("backbone", "training", "search", "surrogate", "paths"):
            if not isinstance(doc.get(section, {}), dict):
                raise ConfigError(f"config section {section!r} must be an object")
        base_backbone = dataclasses.asdict(backbone_fn())
        base_training = dataclasses.asdict(training_fn(seed=self.seed))
        base_backbone.update(doc.get("backbone", {}))
        base_training.update(doc.get("training", {}))
        self.backbone = _dataclass_from_dict(
            BackboneConfig, base_backbone, "backbone"
        )
        self.training = _dataclass_from_dict(
            TrainingConfig, base_training, "training"
        )
        self.search = _dataclass_from_dict(
            SearchConfig, doc.get("search", {}), "search"
        )
        self.surrogate = _dataclass_from_dict(
            GbtHyperparams, doc.get("surrogate", {}), "surrogate"
        )
        paths = doc.get("paths", {})
        unknown = set(paths) - _PATH_KEYS
        if unknown:
            raise ConfigError(f"unknown keys in paths: {sorted(unknown)}")
        self.paths = dict(paths)

    def effective_doc(self):
        return {
            "format_version": OUTPUT_FORMAT_VERSION,
            "preset": self.preset,
            "seed": self.seed,
            "backbone": dataclasses.asdict(self.backbone),
            "training": dataclasses.asdict(self.training),
            "search": dataclasses.asdict(self.search),
            "surrogate": dataclasses.asdict(self.surrogate),
            "paths": self.paths,
        }

    def effective_json(self):
        return json.dumps(self.effective_doc(), sort_keys=True, indent=2)

    def config_hash(self):
        return hashlib.sha256(self.effective_json().encode()).hexdigest()


def load_run_config(args):
    doc = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
        doc.setdefault("training", {})["seed"] = args.seed
        doc.setdefault("search", {})["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        doc.setdefault("training", {})["steps"] = args.steps
    return RunConfig(doc)


class _Outputs:
    """Tracks declared output paths so failures leave nothing partial."""

    def __init__(self):
        self.paths = []

    def declare(self, path):
        self.paths.append(path)
        return path

    def cleanup(self):
        for path in self.paths:
            try:
                os.remove(path)
            except OSError:
                pass


def _write(outputs, path, text, binary=False):
    outputs.declare(path)
    mode = "wb" if binary else "w"
    kwargs = {} if binary else {"encoding": "utf-8"}
    with open(path, mode, **kwargs) as f:
        f.write(text)


def _dump_effective_config(outputs, run, out_dir):
    path = os.path.join(out_dir, "effective_config.json")
    _write(outputs, path, run.effective_json() + "\n")


def _parse_shape(text):
    try:
        return tuple(int(p) for p in text.split("-"))
    except ValueError:
        raise ConfigError(
            f"bad shape {text!r}; expected dash-joined dims like 64-32-16-64"
        ) from None


def _parse_constraint(text):
    parts = text.split(":")
    if parts[0] == "params" and len(parts) == 3:
        return Constraint(
            kind="param_range",
            min_params=int(parts[1]),
            max_params=int(parts[2]),
        )
    if parts[0] == "latency" and len(parts) in (2, 3):
        return Constraint(
            kind="latency_max",
            max_latency_ms=float(parts[1]),
            device=parts[2] if len(parts) == 3 else "",
        )
    raise ConfigError(
        f"bad constraint {text!r}; use params:MIN:MAX or latency:MAX_MS[:device]"
    )


def _require(args, run, key, flag):
    value = getattr(args, flag, None) or run.paths.get(key)
    if not value:
        raise ConfigError(f"--{flag.replace('_', '-')} (or paths.{key}) is required")
    return value


def _prepared_corpus(run, corpus_path, vocab_path):
    vocab = data.Vocab.load(vocab_path)
    if len(vocab) != run.backbone.vocab_size:
        raise ConfigError(
            f"vocab has {len(vocab)} entries but backbone.vocab_size is "
            f"{run.backbone.vocab_size}"
        )
    eval_rows = run.training.eval_batches * run.training.batch_size
    return vocab, data.prepare_corpus(
        corpus_path, vocab, run.training.seq_len, eval_rows
    )


def cmd_build_vocab(args, outputs):
    tokens = data.build_vocab(args.corpus, args.vocab_size)
    outputs.declare(args.out)
    data.write_vocab(tokens, args.out)
    print(f"wrote {len(tokens)} tokens to {args.out}")


def cmd_train(args, outputs):
    run = load_run_config(args)
    corpus_path = _require(args, run, "corpus", "corpus")
    vocab_path = _require(args, run, "vocab", "vocab")
    out_dir = _require(args, run, "out_dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    _, corpus = _prepared_corpus(run, corpus_path, vocab_path)
    model = Supernet(run.backbone, seed=run.seed)
    log = super_pretrain(model, corpus, run.training)
    _write(outputs, os.path.join(out_dir, "train_log.csv"), log.losses_csv())
    _write(outputs, os.path.join(out_dir, "eval_log.csv"), log.evals_csv())
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    outputs.declare(ckpt)
    save_checkpoint(model, ckpt)
    _dump_effective_config(outputs, run, out_dir)
    final = {
        shape_str(shape): log.final_perplexity(shape)
        for shape in (
            run.backbone.design_space.max_shape(),
            run.backbone.design_space.min_shape(),
        )
    }
    print(json.dumps({"checkpoint": ckpt, "final_eval_perplexity": final}))


def cmd_eval_perplexity(args, outputs):
    run = load_run_config(args)
    corpus_path = _require(args, run, "corpus", "corpus")
    vocab_path = _require(args, run, "vocab", "vocab")
    ckpt = _require(args, run, "checkpoint", "checkpoint")
    model = load_checkpoint(ckpt)
    run.backbone = model.config
    _, corpus = _prepared_corpus(run, corpus_path, vocab_path)
    shape = model.config.design_space.validate(_parse_shape(args.shape))
    p = evaluate_perplexity(
        model, shape, corpus.eval_rows, run.training.batch_size,
        run.training.masking, model.config.vocab_size,
    )
    doc = {
        "format_version": OUTPUT_FORMAT_VERSION,
        "shape": shape_str(shape),
        "params": count_params(model.config, shape),
        "perplexity": p,
    }
    print(json.dumps(doc, sort_keys=True))


def cmd_search(args, outputs):
    run = load_run_config(args)
    out_dir = _require(args, run, "out_dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    constraint = _parse_constraint(args.constraint) if args.constraint else None
    latency_model = None
    if args.fitness == "surrogate":
        predictor_path = _require(args, run, "predictor", "predictor")
        with open(predictor_path, encoding="utf-8") as f:
            predictor = SurrogateModel.from_json(f.read())
        ckpt = getattr(args, "checkpoint", None) or run.paths.get("checkpoint")
        if ckpt:
            config = load_checkpoint(ckpt).config
        else:
            config = run.backbone
        if len(predictor.feature_names) != config.num_layers:
            raise ConfigError(
                "surrogate fitness expects a perplexity predictor over "
                f"{config.num_layers} shape features"
            )
        fitness_fn = lambda shape: predictor.predict(list(shape))
    else:
        ckpt = _require(args, run, "checkpoint", "checkpoint")
        corpus_path = _require(args, run, "corpus", "corpus")
        vocab_path = _require(args, run, "vocab", "vocab")
        model = load_checkpoint(ckpt)
        run.backbone = model.config
        config = model.config
        _, corpus = _prepared_corpus(run, corpus_path, vocab_path)
        fitness_fn = lambda shape: evaluate_perplexity(
            model, shape, corpus.eval_rows, run.training.batch_size,
            run.training.masking, config.vocab_size,
        )
    if constraint is not None and constraint.kind == "latency_max":
        lat_path = getattr(args, "latency_predictor", None)
        if not lat_path:
            raise ConfigError(
                "latency constraints require --latency-predictor"
            )
        with open(lat_path, encoding="utf-8") as f:
            latency_model = SurrogateModel.from_json(f.read())
        resource = (config, latency_model)
    else:
        resource = config

    def constraint_fn(shape):
        ok, _value = check_constraint(shape, constraint, resource)
        return ok

    result = evolve(
        run.search, config.design_space, fitness_fn,
        constraint_fn=constraint_fn if constraint else None,
        params_fn=lambda shape: count_params(config, shape),
        constraint_label=constraint.describe() if constraint else None,
    )
    doc = {
        "format_version": OUTPUT_FORMAT_VERSION,
        "best_shape": shape_str(result.best.shape),
        "best_fitness": result.best.fitness,
        "params": result.best.params,
        "constraint": constraint.describe() if constraint else None,
        "generations": len(result.history) - 1,
        "history": [
            {"generation": h.generation, "best_fitness": h.best_fitness,
             "mean_fitness": h.mean_fitness}
            for h in result.history
        ],
        "seed": run.search.seed,
        "config_hash": run.config_hash(),
    }
    _write(outputs, os.path.join(out_dir, "search_result.json"),
           json.dumps(doc, sort_keys=True, indent=2) + "\n")
    _write(outputs, os.path.join(out_dir, "search_history.csv"),
           result.history_csv())
    _dump_effective_config(outputs, run, out_dir)
    print(json.dumps({k: v for k, v in doc.items() if k != "history"},
                     sort_keys=True))


def cmd_fit_predictor(args, outputs):
    run = load_run_config(args)
    out_dir = _require(args, run, "out_dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    samples = read_dataset_csv(_require(args, run, "dataset", "dataset"))
    model, report = fit_predictor(
        samples, args.kind, hyperparams=run.surrogate, seed=run.seed
    )
    _write(outputs, os.path.join(out_dir, "predictor.json"),
           model.to_json() + "\n")
    _write(outputs, os.path.join(out_dir, "fit_report.json"),
           report.to_json() + "\n")
    _dump_effective_config(outputs, run, out_dir)
    print(json.dumps({
        "kind": args.kind,
        "train_r2": report.train_r2,
        "holdout_r2": report.holdout_r2,
    }))


def cmd_bench(args, outputs):
    run = load_run_config(args)
    out_dir = _require(args, run, "out_dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    model = load_checkpoint(_require(args, run, "checkpoint", "checkpoint"))
    bench = BenchParams(
        batch_size=args.batch_size, seq_len=args.seq_len,
        warmup=args.warmup, reps=args.reps, rounds=args.rounds,
        include_head=args.include_head,
    )
    rng = np.random.default_rng(run.seed)
    samples, _records, skipped = build_latency_dataset(
        model, model.config.design_space, args.n, bench, rng,
        device=args.device,
    )
    if not samples:
        raise DataError("every latency measurement failed")
    csv_path = os.path.join(out_dir, "latency.csv")
    outputs.declare(csv_path)
    write_dataset_csv(samples, csv_path)
    meta = os.path.join(out_dir, "latency_meta.json")
    outputs.declare(meta)
    write_sidecar(meta, bench, device=args.device, skipped=skipped)
    _dump_effective_config(outputs, run, out_dir)
    print(json.dumps({"rows": len(samples), "skipped": skipped,
                      "csv": csv_path}))


def cmd_heuristic(args, outputs):
    run = load_run_config(args)
    spec = HeuristicSpec(
        reference=_parse_shape(args.reference),
        reference_params=args.reference_params,
        target_params=args.target_params,
    )
    shape = cigar_scale(spec, run.backbone.design_space)
    doc = {
        "format_version": OUTPUT_FORMAT_VERSION,
        "shape": shape_str(shape),
        "params": count_params(run.backbone, shape),
        "target_params": args.target_params,
    }
    _emit_json(args, outputs, doc, run=run)


def cmd_template(args, outputs):
    run = load_run_config(args)
    shape = templated_shape(args.kind, run.backbone.design_space)
    doc = {
        "format_version": OUTPUT_FORMAT_VERSION,
        "kind": args.kind,
        "shape": shape_str(shape),
        "params": count_params(run.backbone, shape),
    }
    _emit_json(args, outputs, doc, run=run)


def _emit_json(args, outputs, doc, run=None):
    text = json.dumps(doc, sort_keys=True)
    if getattr(args, "out", None):
        _write(outputs, args.out, text + "\n")
        if run is not None:
            out_dir = os.path.dirname(os.path.abspath(args.out))
            _dump_effective_config(outputs, run, out_dir)
    print(text)


def cmd_analyze_diagonals(args, outputs):
    run = load_run_config(args)
    out_dir = _require(args, run, "out_dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    model = load_checkpoint(_require(args, run, "checkpoint", "checkpoint"))
    profile = diagonal_profile(model)
    _write(outputs, os.path.join(out_dir, "diagonals.csv"), profile.to_csv())
    _dump_effective_config(outputs, run, out_dir)
    print(json.dumps({"layers": len(profile.input_profiles)}))


def build_parser():
    parser = _Parser(prog="shapenas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="JSON run-config file")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("build-vocab", help="write a frequency-ranked vocab")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=2000, dest="vocab_size")
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("train", help="run weight-sharing MLM pre-training")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-perplexity", help="score one sub-network")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--shape", required=True)
    p.set_defaults(fn=cmd_eval_perplexity)

    p = sub.add_parser("search", help="evolutionary shape search")
    common(p)
    p.add_argument("--fitness", choices=("surrogate", "direct"),
                   default="surrogate")
    p.add_argument("--predictor")
    p.add_argument("--latency-predictor", dest="latency_predictor")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--constraint")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("fit-predictor", help="fit a boosted-tree predictor")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--kind", choices=("perplexity", "latency"), required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_fit_predictor)

    p = sub.add_parser("bench", help="measure sub-network latency")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=1, dest="batch_size")
    p.add_argument("--seq-len", type=int, default=64, dest="seq_len")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--rounds", type=int, default=1,
                   help="interleave repetitions across shapes")
    p.add_argument("--include-head", action="store_true",
                   dest="include_head",
                   help="time the masked-LM projection too")
    p.add_argument("--device", default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("heuristic", help="scale a reference shape to a target")
    common(p)
    p.add_argument("--reference", required=True)
    p.add_argument("--reference-params", type=float, required=True,
                   dest="reference_params")
    p.add_argument("--target-params", type=float, required=True,
                   dest="target_params")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_heuristic)

    p = sub.add_parser("template", help="emit a named templated shape")
    common(p)
    p.add_argument("--kind", choices=sorted(TEMPLATES), required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_template)

    p = sub.add_parser("analyze-diagonals",
                       help="export bottleneck diagonal profiles")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_analyze_diagonals)

    return parser


_EXIT_CODES = (
    (ConfigError, 1),
    (DataError, 2),
    (NumericError, 3),
    (InfeasibleError, 4),
)


def main(argv=None):
    parser = build_parser()
    outputs = _Outputs()
    try:
        args = parser.parse_args(argv)
        args.fn(args, outputs)
        return 0
    except ShapenasError as exc:
        outputs.cleanup()
        for klass, code in _EXIT_CODES:
            if isinstance(exc, klass):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        outputs.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
