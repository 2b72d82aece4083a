"""Batch front-end: train keyed systems, craft attacks, evaluate, report.

Runs are driven by a YAML config plus a handful of override flags. Every
command is a deterministic function of (config, master key): reruns produce
byte-identical artifacts. Unknown config keys are hard errors so typos
cannot silently fall back to defaults.

Subcommands:
  train      build + train the system grid, write system files, print clean error
  surrogate  train the keyless baseline model and write it
  attack     craft adversarial sets against the surrogate
  eval       print clean / adversarial error for the trained systems
  gradcheck  finite-difference gradient check, prints max relative error
  report     write the CSV report (one clean row per system, one row per attack)

Artifacts land in the output directory: system-i{I}.rdiv, surrogate.rdiv,
adv-{name}.radv, report.csv.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import yaml

from .attacks import AdvSet, AttackConfig, craft_adv_set, train_surrogate
from .dataio import DatasetFormatError, LabeledSet, load_cifar10, load_idx, take_first
from .nn import ArchSpec, Hyper, finite_difference_max_error, forward, init_params, mlp_arch
from .rng import TAG_INIT, MasterKey, derive_subkey, uniform_floats
from .serialize import (
    BlobFormatError,
    atomic_write_bytes,
    read_adv_set,
    read_params,
    read_system,
    save_adv_set,
    save_params,
    save_system,
)
from .system import MODES, SystemSpec, build_system, classify_batch, train_system

DEFAULT_LIMIT = 1000
DEFAULT_HIDDEN = (256, 128)

_GRADCHECK_TOLERANCE = 1e-4


class ConfigError(ValueError):
    """The run config is malformed or inconsistent."""


@dataclass(frozen=True)
class RunConfig:
    """Everything one batch run needs, resolved from YAML plus flags."""

    dataset_name: str
    dataset_format: str                 # "idx" | "cifar10"
    train_paths: tuple[Path, ...]
    test_paths: tuple[Path, ...]
    classes: int
    mode: str
    groups: int
    branch_grid: tuple[int, ...]
    master: MasterKey | None
    per_color: bool
    reject_threshold: float | None
    hidden: tuple[int, ...]
    hyper: Hyper
    attacks: tuple[tuple[str, AttackConfig], ...]
    limit: int
    out_dir: Path | None
    workers: int


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return value


def _parse_dataset(raw: dict) -> tuple[str, str, tuple[Path, ...], tuple[Path, ...], int]:
    section = _section(raw, "dataset")
    if not section:
        return "", "", (), (), 10
    _require_keys(section, {"name", "format", "classes", "train_images",
                            "train_labels", "test_images", "test_labels",
                            "train_batches", "test_batches"}, "dataset")
    name = section.get("name")
    fmt = section.get("format")
    if not name or fmt not in ("idx", "cifar10"):
        raise ConfigError("dataset needs a name and format: idx or cifar10")
    classes = int(section.get("classes", 10))
    if fmt == "idx":
        missing = [k for k in ("train_images", "train_labels",
                               "test_images", "test_labels") if k not in section]
        forbidden = [k for k in ("train_batches", "test_batches") if k in section]
        if missing or forbidden:
            raise ConfigError("idx datasets need train/test image+label paths "
                              "and no batch lists")
        train = (Path(section["train_images"]), Path(section["train_labels"]))
        test = (Path(section["test_images"]), Path(section["test_labels"]))
    else:
        if "train_batches" not in section or "test_batches" not in section:
            raise ConfigError("cifar10 datasets need train_batches and test_batches")
        if any(k in section for k in ("train_images", "train_labels",
                                      "test_images", "test_labels")):
            raise ConfigError("cifar10 datasets take batch lists, not idx paths")
        train = tuple(Path(p) for p in section["train_batches"])
        test = tuple(Path(p) for p in section["test_batches"])
        if not train or not test:
            raise ConfigError("batch lists must be non-empty")
    return name, fmt, train, test, classes


def _parse_attacks(raw: dict) -> tuple[tuple[str, AttackConfig], ...]:
    entries = raw.get("attacks") or []
    if not isinstance(entries, list):
        raise ConfigError("attacks must be a list")
    allowed = {"name", "kind", "eps", "alpha", "steps", "c", "iterations",
               "step_size", "kappa", "targeted", "target"}
    out = []
    seen = set()
    for pos, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"attacks[{pos}] must be a mapping")
        _require_keys(entry, allowed, f"attacks[{pos}]")
        if "kind" not in entry:
            raise ConfigError(f"attacks[{pos}] needs a kind")
        fields = {k: v for k, v in entry.items() if k != "name"}
        try:
            config = AttackConfig(**fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"attacks[{pos}]: {exc}") from None
        name = str(entry.get("name", entry["kind"]))
        if name in seen:
            raise ConfigError(f"duplicate attack name {name!r}")
        seen.add(name)
        out.append((name, config))
    return tuple(out)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a YAML run config. Every key is checked."""
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _require_keys(raw, {"dataset", "system", "arch", "train", "attacks",
                        "eval", "out_dir", "workers"}, "config")

    name, fmt, train_paths, test_paths, classes = _parse_dataset(raw)

    system = _section(raw, "system")
    _require_keys(system, {"mode", "groups", "branches", "master_key",
                           "per_color", "reject_threshold"}, "system")
    mode = system.get("mode", "direct-permutation")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; pick one of {', '.join(MODES)}")
    expected_groups = 3 if mode.endswith("3band") else 1
    groups = int(system.get("groups", expected_groups))
    if groups != expected_groups:
        raise ConfigError(f"mode {mode!r} requires groups={expected_groups}, "
                          f"got {groups}")
    branches = system.get("branches", 1)
    if isinstance(branches, int):
        grid = (branches,)
    elif isinstance(branches, list) and branches and all(
            isinstance(b, int) for b in branches):
        grid = tuple(branches)
    else:
        raise ConfigError("branches must be an int or a non-empty list of ints")
    master = None
    if "master_key" in system:
        try:
            master = MasterKey.from_hex(str(system["master_key"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    per_color = bool(system.get("per_color", False))
    reject = system.get("reject_threshold")
    reject = None if reject is None else float(reject)

    arch = _section(raw, "arch")
    _require_keys(arch, {"hidden"}, "arch")
    hidden = tuple(int(h) for h in arch.get("hidden", DEFAULT_HIDDEN))

    train = _section(raw, "train")
    _require_keys(train, {"learning_rate", "batch_size", "epochs", "optimizer",
                          "beta1", "beta2", "eps", "weight_decay"}, "train")
    try:
        hyper = Hyper(**train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None

    eval_section = _section(raw, "eval")
    _require_keys(eval_section, {"limit"}, "eval")
    limit = int(eval_section.get("limit", DEFAULT_LIMIT))
    if limit < 1:
        raise ConfigError("eval limit must be positive")

    out_dir = raw.get("out_dir")
    workers = int(raw.get("workers", 1))
    if workers < 1:
        raise ConfigError("workers must be positive")

    return RunConfig(name, fmt, train_paths, test_paths, classes, mode,
                     groups, grid, master, per_color, reject, hidden, hyper,
                     _parse_attacks(raw), limit,
                     Path(out_dir) if out_dir else None, workers)


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.key is not None:
        config = replace(config, master=MasterKey.from_hex(args.key))
    if args.out is not None:
        config = replace(config, out_dir=Path(args.out))
    if args.limit is not None:
        if args.limit < 1:
            raise ConfigError("--limit must be positive")
        config = replace(config, limit=args.limit)
    if args.channels is not None:
        if args.channels < 1:
            raise ConfigError("--channels must be positive")
        config = replace(config, branch_grid=(args.channels,))
    if args.mode is not None:
        if args.mode not in MODES:
            raise ConfigError(f"unknown mode {args.mode!r}")
        groups = 3 if args.mode.endswith("3band") else 1
        config = replace(config, mode=args.mode, groups=groups)
    return config


def _need(config: RunConfig, *what: str) -> None:
    if "dataset" in what and not config.dataset_name:
        raise ConfigError("this command needs a dataset section")
    if "master" in what and config.master is None:
        raise ConfigError("no master key: set system.master_key or pass --key")
    if "out" in what and config.out_dir is None:
        raise ConfigError("no output directory: set out_dir or pass --out")


def _check_paths(paths: tuple[Path, ...]) -> None:
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ConfigError(f"missing dataset file(s): {', '.join(missing)}")


def _load_split(config: RunConfig, which: str) -> LabeledSet:
    paths = config.train_paths if which == "train" else config.test_paths
    _check_paths(paths)
    if config.dataset_format == "idx":
        data = load_idx(paths[0], paths[1], name=config.dataset_name)
    else:
        data = load_cifar10(paths, name=config.dataset_name)
    return replace(data, num_classes=config.classes)


def _arch_for(config: RunConfig, data: LabeledSet) -> ArchSpec:
    return mlp_arch(data.size * data.size * data.colors, config.hidden,
                    config.classes)


def _system_path(config: RunConfig, branches: int) -> Path:
    return config.out_dir / f"system-i{branches}.rdiv"


def _surrogate_path(config: RunConfig) -> Path:
    return config.out_dir / "surrogate.rdiv"


def _adv_path(config: RunConfig, name: str) -> Path:
    return config.out_dir / f"adv-{name}.radv"


def _pct(errors: int, limit: int) -> str:
    """Exact half-up percentage with two decimals: 703/20000 -> '3.52'."""
    value = Decimal(errors * 100) / Decimal(limit)
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _error_count(system: SystemSpec, images: np.ndarray,
                 labels: np.ndarray) -> int:
    return int((classify_batch(system, images) != labels).sum())


def _load_adv_for(config: RunConfig, name: str, slice_: LabeledSet) -> AdvSet:
    path = _adv_path(config, name)
    if not path.is_file():
        raise ConfigError(f"missing adversarial set {path}; run the attack command")
    adv = read_adv_set(path)
    if len(adv) != config.limit:
        raise ConfigError(f"{path} holds {len(adv)} samples, eval limit is "
                          f"{config.limit}")
    if adv.originals.shape != slice_.images.shape or not np.array_equal(
            adv.originals, slice_.images):
        raise ConfigError(f"{path} was not crafted from the first "
                          f"{config.limit} samples of dataset "
                          f"{config.dataset_name!r}")
    return adv


def cmd_train(config: RunConfig) -> int:
    _need(config, "dataset", "master", "out")
    trainset = _load_split(config, "train")
    testset = _load_split(config, "test")
    arch = _arch_for(config, trainset)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    slice_ = take_first(testset, config.limit)
    for branches in config.branch_grid:
        system = build_system(config.mode, config.master, config.groups,
                              branches, arch, trainset.size, trainset.colors,
                              reject_threshold=config.reject_threshold,
                              per_color=config.per_color)
        system = train_system(system, trainset, config.hyper,
                              workers=config.workers)
        path = _system_path(config, branches)
        save_system(path, system)
        errors = _error_count(system, slice_.images, slice_.labels)
        print(f"system-i{branches}: clean error "
              f"{_pct(errors, config.limit)}% on {config.limit} samples -> {path}")
    return 0


def cmd_surrogate(config: RunConfig) -> int:
    _need(config, "dataset", "master", "out")
    trainset = _load_split(config, "train")
    testset = _load_split(config, "test")
    arch = _arch_for(config, trainset)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    params = train_surrogate(trainset, arch, config.hyper, config.master)
    path = _surrogate_path(config)
    save_params(path, params, derive_subkey(config.master, 0, 0, TAG_INIT))
    slice_ = take_first(testset, config.limit)
    preds = forward(params, slice_.images.reshape(config.limit, -1)).argmax(axis=1)
    errors = int((preds != slice_.labels).sum())
    print(f"surrogate: clean error {_pct(errors, config.limit)}% "
          f"on {config.limit} samples -> {path}")
    return 0


def cmd_attack(config: RunConfig) -> int:
    _need(config, "dataset", "out")
    if not config.attacks:
        raise ConfigError("no attacks configured")
    path = _surrogate_path(config)
    if not path.is_file():
        raise ConfigError(f"missing surrogate {path}; run the surrogate command")
    params, _ = read_params(path)
    testset = _load_split(config, "test")
    slice_ = take_first(testset, config.limit)
    for name, attack in config.attacks:
        adv = craft_adv_set(params, slice_, attack)
        out = _adv_path(config, name)
        save_adv_set(out, adv)
        print(f"{name}: surrogate error {adv.surrogate_success_pct:.2f}% "
              f"on {len(adv)} samples -> {out}")
    return 0


def _evaluate_rows(config: RunConfig) -> list[dict]:
    """Shared by eval and report: one clean row per system, one per attack."""
    _need(config, "dataset", "out")
    for branches in config.branch_grid:
        path = _system_path(config, branches)
        if not path.is_file():
            raise ConfigError(f"missing system file {path}; run the train command")
    testset = _load_split(config, "test")
    slice_ = take_first(testset, config.limit)
    advsets = [(name, _load_adv_for(config, name, slice_))
               for name, _ in config.attacks]
    rows = []
    for branches in config.branch_grid:
        path = _system_path(config, branches)
        system = read_system(path)
        if config.reject_threshold is not None:
            system = replace(system, reject_threshold=config.reject_threshold)
        if system.mode != config.mode or system.branches != branches:
            raise ConfigError(f"{path} does not match the configured mode/grid")
        if (system.size, system.colors) != (slice_.size, slice_.colors):
            raise ConfigError(f"{path} was trained on differently shaped "
                              f"images than dataset {config.dataset_name!r}")
        clean = _pct(_error_count(system, slice_.images, slice_.labels),
                     config.limit)
        base = {"dataset": config.dataset_name, "mode": system.mode,
                "J": system.groups, "I": system.branches,
                "master_key": system.master.to_hex(), "limit": config.limit}
        rows.append(base | {"attack": "none", "clean_error_pct": clean,
                            "adv_error_pct": clean})
        for name, adv in advsets:
            errors = _error_count(system, adv.adversarials, adv.labels)
            rows.append(base | {"attack": name, "clean_error_pct": clean,
                                "adv_error_pct": _pct(errors, config.limit)})
    return rows


def cmd_eval(config: RunConfig) -> int:
    for row in _evaluate_rows(config):
        print(f"system-i{row['I']} {row['attack']}: clean {row['clean_error_pct']}% "
              f"adversarial {row['adv_error_pct']}%")
    return 0


REPORT_COLUMNS = ("dataset", "mode", "J", "I", "attack", "clean_error_pct",
                  "adv_error_pct", "master_key", "limit")


def cmd_report(config: RunConfig) -> int:
    rows = _evaluate_rows(config)
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    text = buffer.getvalue()
    path = config.out_dir / "report.csv"
    atomic_write_bytes(path, text.encode("utf-8"))
    sys.stdout.write(text)
    print(f"report -> {path}")
    return 0


def cmd_gradcheck(config: RunConfig) -> int:
    master = config.master if config.master is not None else MasterKey(0)
    arch = mlp_arch(12, (8, 6), 4)
    worst = 0.0
    for trial in range(3):
        key = derive_subkey(master, 0, trial, TAG_INIT)
        params = init_params(arch, key)
        x = uniform_floats(derive_subkey(master, 1, trial, TAG_INIT),
                           arch.input_dim)
        worst = max(worst, finite_difference_max_error(
            params, x.astype(np.float64), trial % arch.classes))
    print(f"gradcheck: max relative error {worst:.3e} "
          f"(tolerance {_GRADCHECK_TOLERANCE:.0e})")
    if worst >= _GRADCHECK_TOLERANCE:
        print("gradcheck: FAILED", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {
    "train": cmd_train,
    "surrogate": cmd_surrogate,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdiv",
        description="Keyed multi-channel classifier defense: train, attack, "
                    "evaluate, report.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", metavar="PATH",
                        help="YAML run config")
    parser.add_argument("--key", metavar="HEX16",
                        help="master key, 16 hex digits (overrides config)")
    parser.add_argument("--out", metavar="DIR",
                        help="output directory (overrides config)")
    parser.add_argument("--limit", metavar="N", type=int,
                        help="evaluation slice size (overrides config)")
    parser.add_argument("--channels", metavar="I", type=int,
                        help="branches per group (overrides config grid)")
    parser.add_argument("--mode", metavar="NAME",
                        help="system mode (overrides config)")
    return parser


_EMPTY_CONFIG = RunConfig("", "", (), (), 10, "direct-permutation", 1, (1,),
                          None, False, None, DEFAULT_HIDDEN, Hyper(), (),
                          DEFAULT_LIMIT, None, 1)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.config is not None:
            config_path = Path(args.config)
            if not config_path.is_file():
                raise ConfigError(f"config file not found: {config_path}")
            config = parse_config(config_path.read_text())
        else:
            config = _EMPTY_CONFIG
        config = _apply_overrides(config, args)
        return _COMMANDS[args.command](config)
    except (ConfigError, BlobFormatError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
