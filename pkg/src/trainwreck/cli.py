"""Command-line entry point: one subcommand per pipeline stage.

Stages are composable through file artifacts (divergence matrix, recipe,
poisoned dataset directory, results table, manifest), so expensive pieces are
computed once and reused. Exit codes: 0 success, 1 usage/config error,
2 pipeline error, 3 tamper detected (defend verify).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

from .utils import ConfigError, TrainwreckError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PIPELINE = 2
EXIT_TAMPER = 3

PROFILES = {
    "desk": {
        "train_per_class": 500,
        "test_per_class": 100,
        "architecture": "small_vgg",
        "epochs": 15,
        "surrogate": "simple_cnn",
        "surrogate_epochs": 15,
        "extractor": "flatten",
    },
    "full": {
        "train_per_class": None,
        "test_per_class": None,
        "architecture": "tv:resnext101_64x4d",
        "epochs": 30,
        "surrogate": "tv:resnet50",
        "surrogate_epochs": 30,
        "extractor": "tv:vit_l_16",
    },
    "none": {},
}

_ALLOWED_TOP = {"dataset", "data_dir", "out_dir", "cache_dir", "seed", "profile",
                "attack", "evaluation", "defense"}
_ALLOWED_ATTACK = {"name", "poison_rate", "epsilon", "n_iter_cpup", "n_iter_pgd",
                   "step_size", "extractor", "surrogate", "surrogate_epochs",
                   "n_bins", "unsafe_pi", "pgd_from_composite"}
_ALLOWED_EVAL = {"architecture", "epochs", "finetune", "train_source",
                 "clean_reference_accuracy", "include_clean_baseline"}
_ALLOWED_DEFENSE = {"algorithm", "target", "manifest", "insecure_ok"}


@dataclasses.dataclass
class RunConfig:
    """Validated run configuration (config file merged with CLI overrides)."""

    dataset: str = "synthetic10"
    data_dir: str | None = None
    out_dir: str = "runs/out"
    cache_dir: str | None = None
    seed: int = 0
    profile: str = "desk"
    attack: dict = dataclasses.field(default_factory=dict)
    evaluation: dict = dataclasses.field(default_factory=dict)
    defense: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}, expected {list(PROFILES)}")
        for section, allowed in (("attack", _ALLOWED_ATTACK),
                                 ("evaluation", _ALLOWED_EVAL),
                                 ("defense", _ALLOWED_DEFENSE)):
            unknown = set(getattr(self, section)) - allowed
            if unknown:
                raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
        if self.dataset not in ("cifar10", "cifar100", "synthetic10") \
                and not os.path.isdir(self.dataset):
            raise ConfigError(f"dataset {self.dataset!r} is neither a registry name "
                              f"nor an existing directory")
        train_source = self.evaluation.get("train_source")
        if train_source is not None and not os.path.isdir(train_source):
            raise ConfigError(f"evaluation.train_source {train_source!r} does not exist")

    @property
    def resolved_cache_dir(self) -> str:
        if self.cache_dir:
            return self.cache_dir
        env = os.environ.get("TRAINWRECK_CACHE_DIR")
        return env if env else os.path.join(self.out_dir, "cache")

    def profile_value(self, section: str, key: str, profile_key: str | None = None):
        explicit = getattr(self, section).get(key)
        if explicit is not None:
            return explicit
        return PROFILES[self.profile].get(profile_key or key)


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    raw = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file {path!r} does not exist")
        import yaml

        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path!r} must contain a mapping")
    unknown = set(raw) - _ALLOWED_TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            raw.setdefault(section, {})[sub] = value
        else:
            raw[key] = value
    return RunConfig(**raw)


def _slug(text: str) -> str:
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:10]


class Pipeline:
    """Resolves datasets and caches the rate-independent attack ingredients."""

    def __init__(self, config: RunConfig, dry_run: bool = False):
        self.config = config
        self.dry_run = dry_run
        self._train = None
        self._test = None

    # -- datasets ----------------------------------------------------------
    def load_split(self, split: str):
        from .datasets import load_dataset, subsample_per_class

        dataset = load_dataset(self.config.dataset, split, data_dir=self.config.data_dir)
        per_class = PROFILES[self.config.profile].get(f"{split}_per_class")
        if per_class and dataset.class_counts().min() > per_class:
            dataset = subsample_per_class(dataset, per_class, self.config.seed)
        return dataset

    @property
    def train(self):
        if self._train is None:
            self._train = self.load_split("train")
        return self._train

    @property
    def test(self):
        if self._test is None:
            self._test = self.load_split("test")
        return self._test

    # -- attack configuration ----------------------------------------------
    def attack_config(self, poison_rate=None, unsafe_pi=False, epsilon=None):
        from .attacks import AttackConfig

        section = self.config.attack
        return AttackConfig(
            attack_name=section.get("name", "trainwreck"),
            poison_rate=float(section.get("poison_rate", 1.0)
                              if poison_rate is None else poison_rate),
            epsilon=epsilon if epsilon is not None else section.get("epsilon", "8/255"),
            seed=self.config.seed,
            n_iter_cpup=int(section.get("n_iter_cpup", 1)),
            n_iter_pgd=int(section.get("n_iter_pgd", 10)),
            step_size=section.get("step_size"),
            extractor_id=section.get("extractor")
            or PROFILES[self.config.profile].get("extractor", "flatten"),
            surrogate_architecture=section.get("surrogate")
            or PROFILES[self.config.profile].get("surrogate", "simple_cnn"),
            surrogate_epochs=int(section.get("surrogate_epochs")
                                 or PROFILES[self.config.profile].get("surrogate_epochs", 10)),
            n_bins=int(section.get("n_bins", 64)),
            unsafe_pi=bool(section.get("unsafe_pi", False)) or unsafe_pi,
            pgd_from_composite=bool(section.get("pgd_from_composite", False)),
        )

    # -- cached artifacts ----------------------------------------------------
    def divergence_matrix(self, attack_config):
        from .divergence import (divergence_matrix, extract_features, load_divergence_matrix,
                                 make_extractor, save_divergence_matrix)

        cache = os.path.join(
            self.config.resolved_cache_dir,
            f"divergence_{_slug(self.train.dataset_id)}_"
            f"{attack_config.extractor_id.replace(':', '-').replace('/', '-')}_"
            f"b{attack_config.n_bins}.txt",
        )
        if os.path.isfile(cache):
            logger.info("reusing cached divergence matrix %s", cache)
            return load_divergence_matrix(cache)
        features = extract_features(self.train, make_extractor(attack_config.extractor_id))
        matrix = divergence_matrix(features, attack_config.n_bins)
        os.makedirs(os.path.dirname(cache), exist_ok=True)
        save_divergence_matrix(matrix, cache)
        return matrix

    def surrogate(self, attack_config):
        from .models import load_checkpoint, save_checkpoint, train_surrogate

        cache = os.path.join(
            self.config.resolved_cache_dir,
            f"surrogate_{_slug(self.train.dataset_id)}_"
            f"{attack_config.surrogate_architecture.replace(':', '-')}_"
            f"e{attack_config.surrogate_epochs}_s{self.config.seed}.pt",
        )
        if os.path.isfile(cache):
            logger.info("reusing cached surrogate %s", cache)
            return load_checkpoint(cache)
        handle, accuracy = train_surrogate(
            self.train, self.test, attack_config.surrogate_architecture,
            epochs=attack_config.surrogate_epochs, seed=self.config.seed,
        )
        logger.info("surrogate %s test accuracy %.4f",
                    attack_config.surrogate_architecture, accuracy)
        save_checkpoint(handle, cache, seed=self.config.seed,
                        epochs=attack_config.surrogate_epochs,
                        dataset_id=self.train.dataset_id, test_accuracy=accuracy)
        return handle


def _print_plan(command: str, config: RunConfig, artifacts: dict) -> None:
    plan = {"command": command, "config": dataclasses.asdict(config),
            "artifacts": artifacts}
    print(json.dumps(plan, indent=2, sort_keys=True))


def _recipe_path(config: RunConfig, attack_config) -> str:
    return os.path.join(
        config.out_dir,
        f"{attack_config.attack_name}_pi{attack_config.poison_rate:g}"
        f"_seed{attack_config.seed}.recipe",
    )


# -- subcommands -------------------------------------------------------------

def cmd_divergence(config: RunConfig, args) -> int:
    pipeline = Pipeline(config)
    attack_config = pipeline.attack_config(poison_rate=0.0)
    out = os.path.join(
        config.out_dir,
        f"divergence_{attack_config.extractor_id.replace(':', '-').replace('/', '-')}"
        f"_b{attack_config.n_bins}.txt",
    )
    if args.dry_run:
        _print_plan("divergence", config, {"matrix": out})
        return EXIT_OK
    from .divergence import divergence_matrix, extract_features, make_extractor, \
        save_divergence_matrix

    features = extract_features(pipeline.train, make_extractor(attack_config.extractor_id))
    matrix = divergence_matrix(features, attack_config.n_bins)
    os.makedirs(config.out_dir, exist_ok=True)
    save_divergence_matrix(matrix, out)
    print(f"divergence matrix ({matrix.n_classes} classes) written to {out}")
    return EXIT_OK


def cmd_craft(config: RunConfig, args) -> int:
    pipeline = Pipeline(config)
    attack_config = pipeline.attack_config(
        poison_rate=args.pi_single, unsafe_pi=args.unsafe_pi, epsilon=args.epsilon)
    out = args.output or _recipe_path(config, attack_config)
    if args.dry_run:
        _print_plan("craft", config, {"recipe": out})
        return EXIT_OK
    from .attacks import craft_attack
    from .recipes import write_recipe

    divergence = surrogate = None
    if attack_config.poison_rate > 0:
        if attack_config.attack_name in ("trainwreck", "jsd_swap"):
            divergence = pipeline.divergence_matrix(attack_config)
        if attack_config.attack_name in ("trainwreck", "adv_replace"):
            surrogate = pipeline.surrogate(attack_config)
    recipe = craft_attack(pipeline.train, pipeline.test, attack_config,
                          divergence=divergence, surrogate=surrogate)
    write_recipe(recipe, out)
    print(f"recipe with {len(recipe.edits)} edit(s) written to {out}")
    return EXIT_OK


def cmd_poison(config: RunConfig, args) -> int:
    if not args.recipe:
        raise ConfigError("poison requires --recipe <file>")
    if not os.path.isfile(args.recipe):
        raise ConfigError(f"recipe file {args.recipe!r} does not exist")
    pipeline = Pipeline(config)
    out = args.output or os.path.join(
        config.out_dir, os.path.splitext(os.path.basename(args.recipe))[0] + "_dataset")
    if args.dry_run:
        _print_plan("poison", config, {"dataset_dir": out})
        return EXIT_OK
    from .datasets import materialize_poisoned, save_dataset
    from .recipes import read_recipe

    recipe = read_recipe(args.recipe)
    poisoned = materialize_poisoned(pipeline.train, recipe)
    save_dataset(poisoned, out)
    print(f"poisoned dataset ({poisoned.n} images) written to {out}")
    return EXIT_OK


def cmd_train_eval(config: RunConfig, args) -> int:
    pipeline = Pipeline(config)
    architecture = config.profile_value("evaluation", "architecture")
    epochs = int(config.profile_value("evaluation", "epochs"))
    out = os.path.join(config.out_dir, "reports.jsonl")
    if args.dry_run:
        _print_plan("train-eval", config,
                    {"reports": out, "architecture": architecture, "epochs": epochs})
        return EXIT_OK
    from .datasets import load_dataset
    from .evaluation import evaluate_target

    train_source = config.evaluation.get("train_source")
    if train_source is not None:
        train = load_dataset(train_source, "train")
        attack_name = "poisoned"
    else:
        train = pipeline.train
        attack_name = "clean"
    report = evaluate_target(
        train, pipeline.test, architecture, epochs, config.seed,
        finetune=bool(config.evaluation.get("finetune", False)),
        attack_name=attack_name,
        clean_reference_accuracy=config.evaluation.get("clean_reference_accuracy"),
    )
    os.makedirs(config.out_dir, exist_ok=True)
    with open(out, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    print(f"reported accuracy {report.reported_accuracy:.4f} ({report.status}); "
          f"appended to {out}")
    return EXIT_OK


def cmd_sweep(config: RunConfig, args) -> int:
    pipeline = Pipeline(config)
    rates = args.pi_list
    if not rates:
        raise ConfigError("sweep requires --pi with a comma-separated rate list")
    architecture = config.profile_value("evaluation", "architecture")
    epochs = int(config.profile_value("evaluation", "epochs"))
    out_dir = os.path.join(config.out_dir, "sweep")
    if args.dry_run:
        _print_plan("sweep", config, {"out_dir": out_dir, "rates": rates,
                                      "architecture": architecture, "epochs": epochs})
        return EXIT_OK
    from .evaluation import evaluate_target, poison_rate_sweep

    attack_config = pipeline.attack_config(poison_rate=rates[0],
                                           unsafe_pi=args.unsafe_pi,
                                           epsilon=args.epsilon)
    divergence = surrogate = None
    if attack_config.attack_name in ("trainwreck", "jsd_swap"):
        divergence = pipeline.divergence_matrix(attack_config)
    if attack_config.attack_name in ("trainwreck", "adv_replace"):
        surrogate = pipeline.surrogate(attack_config)
    clean_reference = config.evaluation.get("clean_reference_accuracy")
    if clean_reference is None and config.evaluation.get("include_clean_baseline", False):
        clean_report = evaluate_target(pipeline.train, pipeline.test, architecture,
                                       epochs, config.seed)
        clean_reference = clean_report.reported_accuracy
        print(f"clean baseline accuracy {clean_reference:.4f}")
    reports = poison_rate_sweep(
        pipeline.train, pipeline.test, attack_config, rates, architecture, epochs,
        config.seed, out_dir=out_dir, clean_reference_accuracy=clean_reference,
        jobs=args.jobs, surrogate=surrogate, divergence=divergence,
        finetune=bool(config.evaluation.get("finetune", False)),
    )
    for report in reports:
        print(f"pi={report.poison_rate:g} accuracy={report.reported_accuracy:.4f} "
              f"({report.status})")
    print(f"results under {out_dir}")
    return EXIT_OK


def cmd_defend(config: RunConfig, args) -> int:
    section = config.defense
    algorithm = section.get("algorithm", "sha256")
    target = section.get("target") or config.dataset
    manifest_path = section.get("manifest") or os.path.join(config.out_dir, "manifest.txt")
    if args.dry_run:
        _print_plan(f"defend {args.action}", config,
                    {"manifest": manifest_path, "target": target, "algorithm": algorithm})
        return EXIT_OK
    from .datasets import load_dataset
    from .defense import build_manifest, read_manifest, verify_manifest, write_manifest

    if target in ("cifar10", "cifar100", "synthetic10") or os.path.isfile(
            os.path.join(target, "dataset.json")):
        source = load_dataset(target, args.split, data_dir=config.data_dir)
    else:
        source = target  # raw file tree
    if args.action == "build":
        manifest = build_manifest(source, algorithm,
                                  insecure_ok=bool(section.get("insecure_ok", False)))
        write_manifest(manifest, manifest_path)
        print(f"manifest with {len(manifest.entries)} record(s) written to {manifest_path}")
        return EXIT_OK
    manifest = read_manifest(manifest_path)
    report = verify_manifest(source, manifest)
    if report.passed:
        print("verification passed: " + report.summary())
        return EXIT_OK
    print("TAMPER DETECTED: " + report.summary())
    for key in report.mismatched:
        print(f"  mismatched {key}")
    for key in report.missing:
        print(f"  missing {key}")
    for key in report.unexpected:
        print(f"  unexpected {key}")
    return EXIT_TAMPER


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trainwreck",
        description="Train-time data poisoning toolkit: craft, apply, evaluate, defend.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_common(sub):
        sub.add_argument("--config", help="YAML/JSON run configuration file")
        sub.add_argument("--seed", type=int, help="override the run seed")
        sub.add_argument("--pi", help="poison rate (comma list for sweep)")
        sub.add_argument("--epsilon", help="perturbation budget, e.g. 8/255")
        sub.add_argument("--profile", choices=sorted(PROFILES), help="scale profile")
        sub.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
        sub.add_argument("--dry-run", action="store_true",
                         help="print the resolved plan without side effects")
        sub.add_argument("--unsafe-pi", action="store_true",
                         help="allow poison rates outside the protocol ranges")
        sub.add_argument("--dataset", help="override the dataset source")
        sub.add_argument("--out-dir", help="override the output directory")

    for name, handler in (("divergence", cmd_divergence), ("craft", cmd_craft),
                          ("poison", cmd_poison), ("train-eval", cmd_train_eval),
                          ("sweep", cmd_sweep)):
        sub = subparsers.add_parser(name)
        add_common(sub)
        sub.set_defaults(handler=handler)
    poison_parser = subparsers.choices["poison"]
    poison_parser.add_argument("--recipe", help="recipe file to apply")
    poison_parser.add_argument("--output", help="output dataset directory")
    subparsers.choices["craft"].add_argument("--output", help="recipe output path")

    defend = subparsers.add_parser("defend")
    defend.add_argument("action", choices=("build", "verify"))
    defend.add_argument("--split", default="train", choices=("train", "test"))
    add_common(defend)
    defend.set_defaults(handler=cmd_defend)
    return parser


def _parse_pi(text):
    if text is None:
        return None, None
    values = [float(part) for part in text.split(",") if part.strip() != ""]
    if not values:
        raise ConfigError(f"--pi {text!r} contains no values")
    return (values[0] if len(values) == 1 else None), values


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        pi_single, pi_list = _parse_pi(getattr(args, "pi", None))
        args.pi_single, args.pi_list = pi_single, pi_list
        overrides = {
            "seed": getattr(args, "seed", None),
            "profile": getattr(args, "profile", None),
            "dataset": getattr(args, "dataset", None),
            "out_dir": getattr(args, "out_dir", None),
        }
        config = load_run_config(getattr(args, "config", None), overrides)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.handler(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainwreckError, ValueError, FileNotFoundError, IndexError,
            ArithmeticError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
