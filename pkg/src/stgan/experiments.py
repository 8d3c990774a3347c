"""Experiment orchestration: config parsing, seeded grids, resumable runs.

A run executes every (scheme, count, seed) cell of the configured grid,
writing per-cell round records, metrics and a best-model checkpoint under the
run directory, plus a manifest tracking cell status for resumption.
"""

from __future__ import annotations

import json
import multiprocessing
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .data import SplitSpec, load_idx, pad_images, stratified_split, take_subset
from .gan import GanBackend, GanConfig
from .selftrain import (
    SelfTrainConfig,
    basic_self_train,
    derive_seed,
    rejection_self_train,
)

SCHEMES = ("vanilla", "basic", "rejection")

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

SEED_DERIVATION = (
    "cell_seed = sha256('{base}:{scheme}:{count}:{seed_index}') & (2^63 - 1); "
    "split/gan/selftrain seeds derive from cell_seed the same way"
)

OUT_ROOT_ENV = "STGAN_OUT_ROOT"


class ConfigValidationError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _as_bool(v):
    if isinstance(v, bool):
        return v
    raise TypeError("expected a boolean")


def _as_int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _as_float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _as_str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _as_str_list(v):
    if isinstance(v, str):
        v = [s.strip() for s in v.split(",") if s.strip()]
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise TypeError("expected a list of strings")
    return v


def _as_int_list(v):
    if not isinstance(v, list) or not all(
        isinstance(x, int) and not isinstance(x, bool) for x in v
    ):
        raise TypeError("expected a list of integers")
    return v


# key -> (parser, default). None default means "required".
CONFIG_KEYS = {
    "data.path": (_as_str, None),
    "data.pad_to_32": (_as_bool, True),
    "data.test_limit": (_as_int, 0),
    "split.count_per_class": (_as_int, 10),
    "split.seed": (_as_int, 0),
    "split.unlabelled_limit": (_as_int, 0),
    "split.validation_fraction": (_as_float, 0.0),
    "gan.epochs": (_as_int, 50),
    "gan.batch_size": (_as_int, 64),
    "gan.lr": (_as_float, 3e-4),
    "gan.latent_dim": (_as_int, 64),
    "gan.arch": (_as_str, "small"),
    "gan.feature_layer": (_as_int, -1),
    "gan.log_eps": (_as_float, 1e-7),
    "gan.seed": (_as_int, 0),
    "selftrain.scheme": (_as_str, "basic"),
    "selftrain.threshold": (_as_float, 0.95),
    "selftrain.rounds": (_as_int, 2),
    "selftrain.n_subsets": (_as_int, 4),
    "selftrain.sample_frac": (_as_float, 0.2),
    "selftrain.gen_per_round": (_as_int, 10_000),
    "selftrain.seed": (_as_int, 0),
    "experiment.schemes": (_as_str_list, list(SCHEMES)),
    "experiment.counts_per_class": (_as_int_list, None),  # defaults from split.*
    "experiment.seeds": (_as_int_list, [0, 1, 2]),
    "experiment.out_dir": (_as_str, "runs/exp"),
    "experiment.workers": (_as_int, 1),
}

PRESETS = {
    # Desk-scale profile: small nets, trimmed pools, minutes not hours.
    "desk": {
        "data.test_limit": 2000,
        "split.unlabelled_limit": 5000,
        "gan.epochs": 50,
        "gan.batch_size": 128,
        "gan.latent_dim": 32,
        "selftrain.gen_per_round": 512,
        "selftrain.rounds": 2,
        "experiment.counts_per_class": [10],
        "experiment.seeds": [0, 1, 2],
    },
    # Full protocol: 550 epochs, whole pools, the 3x3x3 grid.
    "paper": {
        "data.pad_to_32": True,
        "gan.epochs": 550,
        "gan.batch_size": 64,
        "gan.arch": "paper",
        "selftrain.gen_per_round": 10_000,
        "selftrain.rounds": 2,
        "experiment.counts_per_class": [5, 10, 20],
        "experiment.seeds": [0, 1, 2],
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment grid configuration."""

    data_path: str
    pad_to_32: bool
    test_limit: int
    base_seed: int
    unlabelled_limit: int
    validation_fraction: float
    gan: GanConfig
    selftrain: SelfTrainConfig
    schemes: tuple
    counts_per_class: tuple
    seeds: tuple
    out_dir: str
    workers: int
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def cells(self):
        return [
            (scheme, count, seed_index)
            for scheme in self.schemes
            for count in self.counts_per_class
            for seed_index in self.seeds
        ]


def _flatten(mapping, prefix=""):
    flat = {}
    for key, value in mapping.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{path}."))
        else:
            flat[path] = value
    return flat


def validate_config(raw_text: str, preset: str | None = None) -> ExperimentConfig:
    """Parse and validate config text (YAML / dotted keys), applying defaults.

    Raises ConfigValidationError naming the offending key path.
    """
    try:
        loaded = yaml.safe_load(raw_text) if raw_text.strip() else {}
    except yaml.YAMLError as e:
        raise ConfigValidationError("<file>", f"not parseable as YAML: {e}")
    if loaded is None:
        loaded = {}
    if not isinstance(loaded, dict):
        raise ConfigValidationError("<file>", "top level must be a mapping")

    flat = _flatten(loaded)
    for key in flat:
        if key not in CONFIG_KEYS:
            raise ConfigValidationError(key, "unknown key")

    if preset is not None:
        if preset not in PRESETS:
            raise ConfigValidationError("preset", f"unknown preset {preset!r}")
        merged = {**PRESETS[preset], **flat}
    else:
        merged = flat

    values = {}
    for key, (parse, default) in CONFIG_KEYS.items():
        if key in merged:
            try:
                values[key] = parse(merged[key])
            except TypeError as e:
                raise ConfigValidationError(key, str(e))
        else:
            values[key] = default

    if values["data.path"] is None:
        raise ConfigValidationError("data.path", "missing required key")
    if values["experiment.counts_per_class"] is None:
        values["experiment.counts_per_class"] = [values["split.count_per_class"]]

    for key, low in (
        ("data.test_limit", 0),
        ("split.count_per_class", 1),
        ("split.unlabelled_limit", 0),
        ("experiment.workers", 1),
    ):
        if values[key] < low:
            raise ConfigValidationError(key, f"must be >= {low}")
    if not 0.0 <= values["split.validation_fraction"] < 1.0:
        raise ConfigValidationError(
            "split.validation_fraction", "must lie in [0, 1)"
        )
    for scheme in values["experiment.schemes"]:
        if scheme not in SCHEMES:
            raise ConfigValidationError(
                "experiment.schemes", f"unknown scheme {scheme!r}"
            )
    if not values["experiment.seeds"]:
        raise ConfigValidationError("experiment.seeds", "must not be empty")
    if not values["experiment.counts_per_class"] or any(
        c < 1 for c in values["experiment.counts_per_class"]
    ):
        raise ConfigValidationError(
            "experiment.counts_per_class", "counts must be positive"
        )
    if values["selftrain.scheme"] not in ("basic", "rejection"):
        raise ConfigValidationError("selftrain.scheme", "must be basic or rejection")

    try:
        gan = GanConfig(
            num_classes=10,
            latent_dim=values["gan.latent_dim"],
            epochs=values["gan.epochs"],
            batch_size=values["gan.batch_size"],
            learning_rate=values["gan.lr"],
            architecture_scale=values["gan.arch"],
            feature_layer=values["gan.feature_layer"],
            log_epsilon=values["gan.log_eps"],
            seed=values["gan.seed"],
        )
    except ValueError as e:
        raise ConfigValidationError("gan", str(e))
    try:
        selftrain = SelfTrainConfig(
            scheme=values["selftrain.scheme"],
            threshold=values["selftrain.threshold"],
            num_rounds=values["selftrain.rounds"],
            n_subsets=values["selftrain.n_subsets"],
            sample_frac=values["selftrain.sample_frac"],
            gen_per_round=values["selftrain.gen_per_round"],
            seed=values["selftrain.seed"],
        )
    except ValueError as e:
        key = "selftrain." + (
            "threshold" if "threshold" in str(e)
            else "rounds" if "rounds" in str(e)
            else "n_subsets" if "subsets" in str(e)
            else "sample_frac" if "sample_frac" in str(e)
            else "gen_per_round" if "gen_per_round" in str(e)
            else "scheme"
        )
        raise ConfigValidationError(key, str(e))

    out_dir = values["experiment.out_dir"]
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(out_dir):
        out_dir = str(Path(root) / out_dir)

    return ExperimentConfig(
        data_path=values["data.path"],
        pad_to_32=values["data.pad_to_32"],
        test_limit=values["data.test_limit"],
        base_seed=values["split.seed"],
        unlabelled_limit=values["split.unlabelled_limit"],
        validation_fraction=values["split.validation_fraction"],
        gan=gan,
        selftrain=selftrain,
        schemes=tuple(values["experiment.schemes"]),
        counts_per_class=tuple(values["experiment.counts_per_class"]),
        seeds=tuple(values["experiment.seeds"]),
        out_dir=out_dir,
        workers=values["experiment.workers"],
        raw=values,
    )


def load_config(path, preset: str | None = None) -> ExperimentConfig:
    return validate_config(Path(path).read_text(), preset=preset)


# ---------------------------------------------------------------------------
# Manifest


def cell_key(scheme, count, seed_index):
    return f"{scheme}_c{count}_s{seed_index}"


@dataclass
class RunManifest:
    path: Path
    config: dict
    seed_derivation: str = SEED_DERIVATION
    cells: dict = field(default_factory=dict)

    def save(self):
        blob = {
            "config": self.config,
            "seed_derivation": self.seed_derivation,
            "cells": self.cells,
        }
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(blob, indent=2, sort_keys=True))
        tmp.replace(self.path)

    @classmethod
    def load(cls, path) -> "RunManifest":
        blob = json.loads(Path(path).read_text())
        return cls(
            path=Path(path),
            config=blob["config"],
            seed_derivation=blob["seed_derivation"],
            cells=blob["cells"],
        )


# ---------------------------------------------------------------------------
# Cell execution


def _load_datasets(cfg: ExperimentConfig):
    base = Path(cfg.data_path)
    train = load_idx(base / TRAIN_IMAGES, base / TRAIN_LABELS)
    test = load_idx(base / TEST_IMAGES, base / TEST_LABELS)
    if cfg.pad_to_32:
        train = pad_images(train, 32)
        test = pad_images(test, 32)
    if cfg.test_limit:
        test = take_subset(test, cfg.test_limit, derive_seed(cfg.base_seed, "test"))
    val = None
    if cfg.validation_fraction > 0:
        n_val = int(round(cfg.validation_fraction * len(train)))
        val = take_subset(train, n_val, derive_seed(cfg.base_seed, "val"))
        keep = sorted(set(train.ids.tolist()) - set(val.ids.tolist()))
        index = {int(i): j for j, i in enumerate(train.ids)}
        train = train.subset([index[i] for i in keep])
    return train, test, val


def run_cell(cfg: ExperimentConfig, scheme: str, count: int, seed_index: int,
             cell_dir: Path) -> dict:
    """Execute one grid cell and write its artifacts. Returns the metrics."""
    cell_seed = derive_seed(cfg.base_seed, scheme, count, seed_index)
    train_ds, test_ds, val_ds = _load_datasets(cfg)
    labelled, unlabelled = stratified_split(
        train_ds, SplitSpec(count_per_class=count, seed=derive_seed(cell_seed, "split"))
    )
    if cfg.unlabelled_limit:
        unlabelled = take_subset(
            unlabelled, cfg.unlabelled_limit, derive_seed(cell_seed, "ulimit")
        )

    backend = GanBackend(replace(cfg.gan, seed=derive_seed(cell_seed, "gan")))
    st_common = dict(seed=derive_seed(cell_seed, "selftrain"))
    if scheme == "vanilla":
        st_cfg = replace(cfg.selftrain, scheme="basic", num_rounds=0,
                         gen_per_round=0, **st_common)
        result = basic_self_train(labelled, unlabelled, backend, st_cfg,
                                  test=test_ds, val=val_ds)
    elif scheme == "basic":
        st_cfg = replace(cfg.selftrain, scheme="basic", **st_common)
        result = basic_self_train(labelled, unlabelled, backend, st_cfg,
                                  test=test_ds, val=val_ds)
    elif scheme == "rejection":
        st_cfg = replace(cfg.selftrain, scheme="rejection", **st_common)
        result = rejection_self_train(labelled, unlabelled, backend, st_cfg,
                                      test=test_ds, val=val_ds)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    cell_dir.mkdir(parents=True, exist_ok=True)
    records = [r.to_dict() for r in result.records]
    with open(cell_dir / "rounds.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    added = [asdict(r) for r in result.pool.added.values()]
    (cell_dir / "added.json").write_text(json.dumps(added, indent=2, sort_keys=True))

    result.best_model.save(cell_dir / "best.pt")

    num_rounds = st_cfg.num_rounds
    total_added = len(result.pool.added)
    real_added = sum(1 for r in result.pool.added.values() if r.source == "real")
    metrics = {
        "scheme": scheme,
        "count": count,
        "seed_index": seed_index,
        "cell_seed": cell_seed,
        "best_error": min(r["test_error"] for r in records),
        "final_error": records[-1]["test_error"],
        "pseudo_label_accuracy": result.pool.pseudo_label_accuracy(),
        "total_added": total_added,
        "real_added": real_added,
        "added_per_round": (total_added / num_rounds) if num_rounds else 0.0,
        "rounds": records,
    }
    (cell_dir / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True)
    )
    return metrics


def _run_cell_entry(args):
    cfg, scheme, count, seed_index, cell_dir = args
    return run_cell(cfg, scheme, count, seed_index, Path(cell_dir))


def run_experiment(cfg: ExperimentConfig, resume: bool = False,
                   on_cell_done=None) -> RunManifest:
    """Execute every grid cell, skipping completed ones on resume.

    Cell failures are recorded in the manifest without aborting other cells.
    """
    base = Path(cfg.data_path)
    for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS):
        if not (base / name).exists():
            raise FileNotFoundError(f"missing data file: {base / name}")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if resume and manifest_path.exists():
        manifest = RunManifest.load(manifest_path)
    else:
        manifest = RunManifest(path=manifest_path, config=dict(cfg.raw))

    todo = []
    for scheme, count, seed_index in cfg.cells:
        key = cell_key(scheme, count, seed_index)
        cell_dir = out / "cells" / key
        state = manifest.cells.get(key, {})
        if (
            resume
            and state.get("status") == "done"
            and (cell_dir / "metrics.json").exists()
        ):
            continue
        manifest.cells[key] = {
            "status": "pending",
            "scheme": scheme,
            "count": count,
            "seed_index": seed_index,
            "cell_seed": derive_seed(cfg.base_seed, scheme, count, seed_index),
            "dir": str(cell_dir),
        }
        todo.append((scheme, count, seed_index, key, cell_dir))
    manifest.save()

    def record_result(key, status, error=None, started=None):
        manifest.cells[key]["status"] = status
        manifest.cells[key]["started_at"] = started
        manifest.cells[key]["finished_at"] = time.time()
        if error:
            manifest.cells[key]["error"] = error
        manifest.save()
        if on_cell_done is not None:
            on_cell_done(key, status)

    if cfg.workers <= 1:
        for scheme, count, seed_index, key, cell_dir in todo:
            started = time.time()
            manifest.cells[key]["status"] = "running"
            manifest.save()
            try:
                run_cell(cfg, scheme, count, seed_index, cell_dir)
            except KeyboardInterrupt:
                record_result(key, "pending", started=started)
                raise
            except Exception:
                record_result(key, "failed", error=traceback.format_exc(),
                              started=started)
            else:
                record_result(key, "done", started=started)
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg.workers, mp_context=ctx) as pool:
            futures = {}
            for scheme, count, seed_index, key, cell_dir in todo:
                manifest.cells[key]["status"] = "running"
                args = (cfg, scheme, count, seed_index, str(cell_dir))
                futures[pool.submit(_run_cell_entry, args)] = (key, time.time())
            manifest.save()
            for future in as_completed(futures):
                key, started = futures[future]
                try:
                    future.result()
                    record_result(key, "done", started=started)
                except Exception:
                    record_result(key, "failed", error=traceback.format_exc(),
                                  started=started)

    return manifest
