"""Experiment pipeline subcommands.

Each command reads a JSON run configuration (every field has a default,
unknown keys are rejected), consumes artifacts produced by earlier commands
under the output directory, and writes flat files: JSONL corpora, split
manifests, binary checkpoints, and CSV metric tables.  Every output file
embeds the configuration hash and seed, either in a leading comment line
(CSV) or as fields (JSON manifests), so runs are replayable and joinable.

Exit codes: 0 success, 2 configuration error, 3 infeasibility,
4 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from datetime import date

import numpy as np

from . import cohort as ch
from . import corpus as cp
from . import encoder as enc
from . import evaluation as ev
from . import wem as wm
from .errors import ConfigError, InfeasibleError, NotebenchError, VerificationError

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "paths": {
        "corpus": "corpus.jsonl",
        "cohort": "cohort.jsonl",
        "splits_dir": "splits",
        "backbone": "backbone.ckpt",
        "model_ft": "model_ft.ckpt",
        "adapter_st": "adapter_st.ckpt",
        "model_wem": "model_wem.ckpt",
    },
    "generator": {
        "n_patients": 6000,
        "prevalence": 0.009,
        "vocab_size": 500,
        "signal_rate": 0.9,
        "signal_tokens": list(cp.DEFAULT_SIGNAL_TOKENS),
        "notes_mean": 30.0,
        "notes_min": 1,
        "notes_max": 284,
        "notes_sigma": 0.8,
        "tokens_mean": 30.0,
        "tokens_min": 5,
        "tokens_max": 80,
        "tokens_sigma": 12.0,
        "collection_start": "2002-01-01",
        "collection_end": "2020-12-31",
        "undated_rate": 0.01,
        "underage_rate": 0.10,
        "zipf_exponent": 1.1,
    },
    "cohort": {
        "min_age_years": 40,
        "pos_window_min_days": 150,
        "pos_window_max_days": 730,
        "neg_window_days": 730,
    },
    "split": {"train": 0.40, "valid": 0.15, "test_1": 0.05, "test_2": 0.40},
    "encoder": {
        "d_model": 64,
        "n_heads": 4,
        "n_layers": 2,
        "ffn_dim": 256,
        "max_len": 512,
        "dropout": 0.1,
        "prompt_len": 8,
    },
    "wem": {
        "d_emb": 64,
        "n_min": 3,
        "n_max": 6,
        "n_buckets": 65536,
        "window": 5,
        "negatives": 5,
        "update_embeddings": True,
        "max_vocab": 4096,
    },
    "train": {
        "mlm": {"epochs": 10, "batch_size": 32, "lr": 1e-3},
        "ft": {"epochs": 20, "batch_size": 16, "lr": 3e-4},
        "st": {"epochs": 50, "batch_size": 16, "lr": 1e-2},
        "wem_pretrain": {"epochs": 5, "lr": 0.05},
        "wem_classifier": {"epochs": 20, "lr": 2.0},
    },
    "eval": {"rule": "min", "scale": 2.0},
    "imbalance": {"ratios": [10, 100, 250]},
    "fewshot": {"ks": [2, 4, 8, 16, 32, 64, 128], "replicates": 1},
}

_REGIMES = ("ft", "st", "wem")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def merge_config(defaults: dict, override: dict, path: str = "") -> dict:
    """Deep-merge ``override`` onto ``defaults``; unknown keys are rejected."""
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            merged[key] = merge_config(defaults[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


def load_config(path: str | None, seed_override: int | None = None) -> dict:
    override = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                override = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from None
    config = merge_config(DEFAULT_CONFIG, override)
    if seed_override is not None:
        config["seed"] = seed_override
    return config


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _generator_config(config: dict) -> cp.GeneratorConfig:
    g = config["generator"]
    return cp.GeneratorConfig(
        n_patients=g["n_patients"],
        prevalence=g["prevalence"],
        notes_per_patient=cp.LogNormalCount(
            mean=g["notes_mean"], minimum=g["notes_min"], maximum=g["notes_max"], sigma=g["notes_sigma"]
        ),
        tokens_per_note=cp.ClippedNormalCount(
            mean=g["tokens_mean"], minimum=g["tokens_min"], maximum=g["tokens_max"], sigma=g["tokens_sigma"]
        ),
        vocab_size=g["vocab_size"],
        signal_tokens=tuple(g["signal_tokens"]),
        signal_rate=g["signal_rate"],
        collection_period=(
            date.fromisoformat(g["collection_start"]),
            date.fromisoformat(g["collection_end"]),
        ),
        seed=config["seed"],
        undated_rate=g["undated_rate"],
        underage_rate=g["underage_rate"],
        zipf_exponent=g["zipf_exponent"],
    )


def _cohort_config(config: dict) -> ch.CohortConfig:
    c = config["cohort"]
    g = config["generator"]
    return ch.CohortConfig(
        min_age_years=c["min_age_years"],
        pos_window_min_days=c["pos_window_min_days"],
        pos_window_max_days=c["pos_window_max_days"],
        neg_window_days=c["neg_window_days"],
        collection_period=(
            date.fromisoformat(g["collection_start"]),
            date.fromisoformat(g["collection_end"]),
        ),
    )


def _split_spec(config: dict) -> ch.SplitSpec:
    s = config["split"]
    return ch.SplitSpec(
        train=s["train"], valid=s["valid"], test_1=s["test_1"], test_2=s["test_2"], seed=config["seed"]
    )


def _encoder_config(config: dict) -> enc.EncoderConfig:
    e = config["encoder"]
    return enc.EncoderConfig(
        d_model=e["d_model"],
        n_heads=e["n_heads"],
        n_layers=e["n_layers"],
        ffn_dim=e["ffn_dim"],
        max_len=e["max_len"],
        dropout=e["dropout"],
    )


def _wem_config(config: dict) -> wm.WemConfig:
    w = config["wem"]
    return wm.WemConfig(
        d_emb=w["d_emb"],
        n_min=w["n_min"],
        n_max=w["n_max"],
        n_buckets=w["n_buckets"],
        window=w["window"],
        negatives=w["negatives"],
    )


def _schedule(config: dict, name: str, seed_tag: int) -> enc.TrainSchedule:
    t = config["train"][name]
    return enc.TrainSchedule(
        epochs=t["epochs"],
        batch_size=t.get("batch_size", 16),
        lr=t["lr"],
        seed=_derive_seed(config["seed"], seed_tag),
    )


def _wem_schedule(config: dict, name: str, seed_tag: int) -> wm.WemSchedule:
    t = config["train"][name]
    return wm.WemSchedule(epochs=t["epochs"], lr=t["lr"], seed=_derive_seed(config["seed"], seed_tag))


def _rule(config: dict) -> ev.AggregationRule:
    return ev.rule_from_name(config["eval"]["rule"], config["eval"]["scale"])


def _derive_seed(base: int, *tags: int) -> int:
    return int(np.random.SeedSequence([base, *tags]).generate_state(1)[0])


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------


def _resolve(out_dir: str, rel: str) -> str:
    return rel if os.path.isabs(rel) else os.path.join(out_dir, rel)


def _require(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"missing input {path!r}; produce it with the {producer!r} command first")
    return path


def _provenance_line(config: dict) -> str:
    return f"# config_hash={config_hash(config)} seed={config['seed']}\n"


def _write_csv(path: str, config: dict, header: list, rows: list) -> None:
    def fmt(value) -> str:
        if isinstance(value, float):
            return format(value, ".6f")
        return str(value)

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_provenance_line(config))
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(row.get(col, "")) for col in header) + "\n")


def _read_csv(path: str) -> tuple:
    """(hash, seed, header, rows) from a provenance-stamped CSV."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise ConfigError(f"{path} lacks a provenance line")
        parts = dict(kv.split("=") for kv in first[2:].split(" "))
        header = fh.readline().strip().split(",")
        rows = [dict(zip(header, line.strip().split(","))) for line in fh if line.strip()]
    return parts["config_hash"], int(parts["seed"]), header, rows


def _write_manifest(out_dir: str, command: str, config: dict, outputs: list, extra: dict | None = None) -> str:
    rel = f"{command.replace('-', '_')}.manifest.json"
    payload = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": config["seed"],
        "outputs": sorted(outputs),
    }
    if extra:
        payload["info"] = extra
    with open(os.path.join(out_dir, rel), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return rel


# --------------------------------------------------------------------------
# commands (each returns the list of relative output paths)
# --------------------------------------------------------------------------


def run_gen_corpus(config: dict, out_dir: str) -> list:
    gen = _generator_config(config)
    corpus = cp.generate(gen)
    rel = config["paths"]["corpus"]
    cp.save_corpus(corpus, _resolve(out_dir, rel))
    stats = cp.note_count_stats(corpus)
    outputs = [rel]
    outputs.append(
        _write_manifest(
            out_dir,
            "gen-corpus",
            config,
            outputs,
            extra={
                "n_patients": len(corpus),
                "n_positive": sum(p.label for p in corpus),
                "notes_per_patient": stats,
            },
        )
    )
    return outputs


def _load_cohort_and_bundle(config: dict, out_dir: str) -> tuple:
    cohort_path = _require(_resolve(out_dir, config["paths"]["cohort"]), "build-cohort")
    cohort = cp.load_corpus(cohort_path)
    splits_dir = _require(_resolve(out_dir, config["paths"]["splits_dir"]), "build-cohort")
    bundle = ch.load_manifest(splits_dir, cohort)
    return cohort, bundle


def run_build_cohort(config: dict, out_dir: str) -> list:
    corpus_path = _require(_resolve(out_dir, config["paths"]["corpus"]), "gen-corpus")
    corpus = cp.load_corpus(corpus_path)
    cohort = ch.build_cohort(corpus, _cohort_config(config))
    bundle = ch.build_balanced(cohort, _split_spec(config))
    rel_cohort = config["paths"]["cohort"]
    cp.save_corpus(cohort, _resolve(out_dir, rel_cohort))
    rel_splits = config["paths"]["splits_dir"]
    ch.save_manifest(bundle, _resolve(out_dir, rel_splits))
    outputs = [rel_cohort] + [f"{rel_splits}/{name}.txt" for name in ch.SPLIT_NAMES]
    counts = {
        name: {"total": len(split), "positive": sum(p.label for p in split)}
        for name, split in bundle.splits()
    }
    outputs.append(_write_manifest(out_dir, "build-cohort", config, outputs, extra={"splits": counts}))
    return outputs


def run_pretrain(config: dict, out_dir: str) -> list:
    cohort_path = _require(_resolve(out_dir, config["paths"]["cohort"]), "build-cohort")
    cohort = cp.load_corpus(cohort_path)
    result = enc.pretrain_mlm(
        cohort,
        schedule=_schedule(config, "mlm", 21),
        config=_encoder_config(config),
        vocab=None,
    )
    rel = config["paths"]["backbone"]
    enc.save_encoder(result.model, _resolve(out_dir, rel))
    outputs = [rel]
    outputs.append(
        _write_manifest(
            out_dir,
            "pretrain",
            config,
            outputs,
            extra={
                "initial_holdout_loss": result.initial_holdout_loss,
                "final_holdout_loss": result.final_holdout_loss,
                "backbone_hash": result.model.backbone_hash(),
            },
        )
    )
    return outputs


def _train_regime(config: dict, out_dir: str, regime: str) -> tuple:
    """Train one regime; returns (model file rel path, history dict)."""
    cohort, bundle = _load_cohort_and_bundle(config, out_dir)
    if regime == "wem":
        pre = wm.pretrain_embeddings(
            bundle.train + bundle.valid + bundle.test_1 + bundle.test_2,
            config=_wem_config(config),
            schedule=_wem_schedule(config, "wem_pretrain", 31),
            max_vocab=config["wem"]["max_vocab"],
        )
        result = wm.train_classifier(
            pre.model,
            bundle.train,
            bundle.valid,
            schedule=_wem_schedule(config, "wem_classifier", 32),
            update_embeddings=config["wem"]["update_embeddings"],
        )
        rel = config["paths"]["model_wem"]
        wm.save_wem(result.model, _resolve(out_dir, rel))
        history = {
            "pretrain": {"initial": pre.initial_probe_loss, "final": pre.final_probe_loss},
            "epochs": result.history,
            "best_epoch": result.best_epoch,
            "best_val_auroc": result.best_val_auroc,
        }
        return rel, history

    backbone_path = _require(_resolve(out_dir, config["paths"]["backbone"]), "pretrain")
    backbone = enc.load_encoder(backbone_path)
    if regime == "ft":
        result = enc.finetune(backbone, bundle.train, bundle.valid, _schedule(config, "ft", 41))
        rel = config["paths"]["model_ft"]
        enc.save_encoder(result.model, _resolve(out_dir, rel))
    elif regime == "st":
        result = enc.soft_prompt_tune(
            backbone,
            bundle.train,
            bundle.valid,
            prompt_len=config["encoder"]["prompt_len"],
            schedule=_schedule(config, "st", 42),
        )
        rel = config["paths"]["adapter_st"]
        enc.save_adapter(result.model, _resolve(out_dir, rel))
    else:
        raise ConfigError(f"unknown training regime {regime!r}")
    history = {
        "epochs": result.history,
        "best_epoch": result.best_epoch,
        "best_val_auroc": result.best_val_auroc,
    }
    return rel, history


def run_train(config: dict, out_dir: str, regime: str) -> list:
    rel_model, history = _train_regime(config, out_dir, regime)
    rel_hist = f"train_{regime}_history.json"
    with open(os.path.join(out_dir, rel_hist), "w", encoding="utf-8") as fh:
        json.dump(
            {"config_hash": config_hash(config), "seed": config["seed"], "history": history},
            fh,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")
    outputs = [rel_model, rel_hist]
    outputs.append(
        _write_manifest(out_dir, f"train-{regime}", config, outputs, extra={"regime": regime})
    )
    return outputs


def _load_model(config: dict, out_dir: str, regime: str):
    if regime == "wem":
        path = _require(_resolve(out_dir, config["paths"]["model_wem"]), "train wem")
        model = wm.load_wem(path)
        return model, lambda patients: wm.prediction_set(model, patients)
    if regime == "ft":
        path = _require(_resolve(out_dir, config["paths"]["model_ft"]), "train ft")
        model = enc.load_encoder(path)
        return model, lambda patients: enc.prediction_set(model, patients)
    if regime == "st":
        backbone_path = _require(_resolve(out_dir, config["paths"]["backbone"]), "pretrain")
        backbone = enc.load_encoder(backbone_path)
        path = _require(_resolve(out_dir, config["paths"]["adapter_st"]), "train st")
        model = enc.load_adapter(path, backbone)
        return model, lambda patients: enc.prediction_set(model, patients)
    raise ConfigError(f"unknown regime {regime!r}")


def run_evaluate(config: dict, out_dir: str, regime: str) -> list:
    _, bundle = _load_cohort_and_bundle(config, out_dir)
    _, predict = _load_model(config, out_dir, regime)
    report = ev.evaluate(predict(bundle.test_1), _rule(config))
    rows = ev.report_rows(report, "test_1")
    for row in rows:
        row["model"] = regime
    rel = f"eval_{regime}.csv"
    _write_csv(
        os.path.join(out_dir, rel),
        config,
        ["model", "split", "level", "rule", "auroc", "auprc", "brier_x100", "n_pos", "n_neg"],
        rows,
    )
    outputs = [rel]
    outputs.append(_write_manifest(out_dir, f"evaluate-{regime}", config, outputs))
    return outputs


def run_sweep_imbalance(config: dict, out_dir: str, regime: str) -> list:
    cohort, bundle = _load_cohort_and_bundle(config, out_dir)
    _, predict = _load_model(config, out_dir, regime)
    rule = _rule(config)
    ratios = [1] + [int(r) for r in config["imbalance"]["ratios"]]
    rng = np.random.default_rng(np.random.SeedSequence([config["seed"], 51]))
    rows = []
    test_sets = {}
    for ratio in ratios:
        if ratio == 1:
            test_sets["1:1"] = bundle.test_2
        else:
            test_sets[f"1:{ratio}"] = ch.build_imbalanced_test(
                cohort, bundle, ratio, seed=_derive_seed(config["seed"], 52, ratio)
            )
    # Analytic random baseline: AUROC 1/2, AUPRC equal to prevalence.  The
    # Brier column for random scores is reported but not comparable to the
    # models' (random scores are uncalibrated by construction).
    for label, patients in test_sets.items():
        n_pos = sum(p.label for p in patients)
        n_neg = len(patients) - n_pos
        prevalence = n_pos / len(patients)
        random_scores = rng.random(len(patients))
        labels = np.array([p.label for p in patients])
        rows.append(
            {
                "model": "random",
                "ratio": label,
                "level": "patient",
                "rule": "analytic",
                "auroc": 0.5,
                "auprc": prevalence,
                "brier_x100": ev.brier(random_scores, labels) * 100.0,
                "brier_note": "non-comparable-random-scores",
                "n_pos": n_pos,
                "n_neg": n_neg,
            }
        )
    for label, patients in test_sets.items():
        report = ev.evaluate(predict(patients), rule)
        for level, metrics in (("note", report.per_note), ("patient", report.per_patient)):
            rows.append(
                {
                    "model": regime,
                    "ratio": label,
                    "level": level,
                    "rule": report.rule if level == "patient" else "none",
                    "auroc": metrics.auroc,
                    "auprc": metrics.auprc,
                    "brier_x100": metrics.brier * 100.0,
                    "brier_note": "",
                    "n_pos": metrics.n_pos,
                    "n_neg": metrics.n_neg,
                }
            )
    rel = f"imbalance_{regime}.csv"
    _write_csv(
        os.path.join(out_dir, rel),
        config,
        [
            "model",
            "ratio",
            "level",
            "rule",
            "auroc",
            "auprc",
            "brier_x100",
            "brier_note",
            "n_pos",
            "n_neg",
        ],
        rows,
    )
    outputs = [rel]
    outputs.append(_write_manifest(out_dir, f"sweep-imbalance-{regime}", config, outputs))
    return outputs


def _fewshot_cell(config: dict, out_dir: str, k: int, regime: str, replicate: int) -> dict:
    """Train one (k, regime, replicate) cell and evaluate on test_1."""
    _, bundle = _load_cohort_and_bundle(config, out_dir)
    seed = _derive_seed(config["seed"], 61, k, _REGIMES.index(regime), replicate)
    fs_train, fs_valid = ch.build_fewshot(bundle, k, seed=_derive_seed(config["seed"], 62, replicate))
    if regime == "wem":
        pre = wm.pretrain_embeddings(
            bundle.train + bundle.valid + bundle.test_1 + bundle.test_2,
            config=_wem_config(config),
            schedule=wm.WemSchedule(
                epochs=config["train"]["wem_pretrain"]["epochs"],
                lr=config["train"]["wem_pretrain"]["lr"],
                seed=seed,
            ),
            max_vocab=config["wem"]["max_vocab"],
        )
        result = wm.train_classifier(
            pre.model,
            fs_train,
            fs_valid,
            schedule=wm.WemSchedule(
                epochs=config["train"]["wem_classifier"]["epochs"],
                lr=config["train"]["wem_classifier"]["lr"],
                seed=seed,
            ),
            update_embeddings=config["wem"]["update_embeddings"],
        )
        model_name = "wem"
        pred = wm.prediction_set(result.model, bundle.test_1)
    else:
        backbone_path = _require(_resolve(out_dir, config["paths"]["backbone"]), "pretrain")
        backbone = enc.load_encoder(backbone_path)
        t = config["train"][regime]
        schedule = enc.TrainSchedule(
            epochs=t["epochs"], batch_size=t.get("batch_size", 16), lr=t["lr"], seed=seed
        )
        if regime == "ft":
            result = enc.finetune(backbone, fs_train, fs_valid, schedule)
        else:
            result = enc.soft_prompt_tune(
                backbone, fs_train, fs_valid, prompt_len=config["encoder"]["prompt_len"], schedule=schedule
            )
        model_name = "encoder"
        pred = enc.prediction_set(result.model, bundle.test_1)
    report = ev.evaluate(pred, _rule(config))
    return {
        "k": k,
        "model": model_name,
        "regime": regime,
        "replicate": replicate,
        "auroc": report.per_patient.auroc,
        "auprc": report.per_patient.auprc,
    }


def _fewshot_cell_star(args) -> dict:
    return _fewshot_cell(*args)


def run_sweep_fewshot(config: dict, out_dir: str, parallel: bool = False) -> list:
    ks = [int(k) for k in config["fewshot"]["ks"]]
    replicates = int(config["fewshot"]["replicates"])
    cells = [
        (config, out_dir, k, regime, rep)
        for rep in range(replicates)
        for regime in _REGIMES
        for k in ks
    ]
    if parallel:
        with ProcessPoolExecutor() as pool:
            rows = list(pool.map(_fewshot_cell_star, cells))
    else:
        rows = [_fewshot_cell(*cell) for cell in cells]
    rows.sort(key=lambda r: (r["replicate"], _REGIMES.index(r["regime"]), r["k"]))
    rel = "fewshot.csv"
    _write_csv(
        os.path.join(out_dir, rel),
        config,
        ["k", "model", "regime", "replicate", "auroc", "auprc"],
        rows,
    )
    outputs = [rel]
    outputs.append(_write_manifest(out_dir, "sweep-fewshot", config, outputs))
    return outputs


def run_report(config: dict, out_dir: str) -> list:
    manifests = sorted(
        f for f in os.listdir(out_dir) if f.endswith(".manifest.json") and f != "report.manifest.json"
    )
    if not manifests:
        raise ConfigError(f"no run manifests found in {out_dir!r}; run pipeline commands first")
    expected_hash = None
    all_rows = []
    for name in manifests:
        with open(os.path.join(out_dir, name), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        if expected_hash is None:
            expected_hash = manifest["config_hash"]
        elif manifest["config_hash"] != expected_hash:
            raise ConfigError(
                f"manifest {name} has config hash {manifest['config_hash']}, "
                f"refusing to join with {expected_hash}"
            )
        for rel in manifest["outputs"]:
            if not rel.endswith(".csv"):
                continue
            csv_hash, _, header, rows = _read_csv(os.path.join(out_dir, rel))
            if csv_hash != expected_hash:
                raise ConfigError(f"{rel} carries config hash {csv_hash}, expected {expected_hash}")
            for row in rows:
                row["source"] = rel
                all_rows.append(row)
    header = [
        "source",
        "model",
        "split",
        "ratio",
        "k",
        "regime",
        "replicate",
        "level",
        "rule",
        "auroc",
        "auprc",
        "brier_x100",
        "n_pos",
        "n_neg",
    ]
    rel = "report.csv"
    _write_csv(os.path.join(out_dir, rel), config, header, all_rows)
    outputs = [rel]
    outputs.append(_write_manifest(out_dir, "report", config, outputs))
    return outputs


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _dispatch(args, config: dict, out_dir: str) -> list:
    if args.command == "gen-corpus":
        return run_gen_corpus(config, out_dir)
    if args.command == "build-cohort":
        return run_build_cohort(config, out_dir)
    if args.command == "pretrain":
        return run_pretrain(config, out_dir)
    if args.command == "train":
        return run_train(config, out_dir, args.regime)
    if args.command == "evaluate":
        return run_evaluate(config, out_dir, args.regime)
    if args.command == "sweep-imbalance":
        return run_sweep_imbalance(config, out_dir, args.regime)
    if args.command == "sweep-fewshot":
        return run_sweep_fewshot(config, out_dir, parallel=args.parallel)
    if args.command == "report":
        return run_report(config, out_dir)
    raise ConfigError(f"unknown command {args.command!r}")


def _verify_rerun(args, config: dict, out_dir: str, outputs: list) -> None:
    """Re-run the command in a scratch directory and byte-compare outputs."""
    with tempfile.TemporaryDirectory(prefix="notebench-verify-") as tmp:
        # Stage existing inputs so the rerun reads identical upstream artifacts.
        for key in ("corpus", "cohort", "backbone", "model_ft", "adapter_st", "model_wem"):
            src = _resolve(out_dir, config["paths"][key])
            if os.path.exists(src) and config["paths"][key] not in outputs:
                dst = _resolve(tmp, config["paths"][key])
                os.makedirs(os.path.dirname(dst) or tmp, exist_ok=True)
                with open(src, "rb") as fi, open(dst, "wb") as fo:
                    fo.write(fi.read())
        splits_src = _resolve(out_dir, config["paths"]["splits_dir"])
        rel_splits = config["paths"]["splits_dir"]
        if os.path.isdir(splits_src) and not any(o.startswith(rel_splits) for o in outputs):
            os.makedirs(_resolve(tmp, rel_splits), exist_ok=True)
            for name in os.listdir(splits_src):
                with open(os.path.join(splits_src, name), "rb") as fi, open(
                    os.path.join(_resolve(tmp, rel_splits), name), "wb"
                ) as fo:
                    fo.write(fi.read())
        rerun_outputs = _dispatch(args, config, tmp)
        if sorted(rerun_outputs) != sorted(outputs):
            raise VerificationError(
                f"rerun produced different outputs: {sorted(rerun_outputs)} vs {sorted(outputs)}"
            )
        for rel in outputs:
            with open(_resolve(out_dir, rel), "rb") as fh:
                first = fh.read()
            with open(_resolve(tmp, rel), "rb") as fh:
                second = fh.read()
            if first != second:
                raise VerificationError(f"output {rel} differs between identical runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="notebench",
        description="Synthetic-note risk-prediction pipeline: corpus, cohort, "
        "training regimes, and imbalance/few-shot evaluation sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, parallel=False):
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument(
            "--verify",
            action="store_true",
            help="re-run the command and fail (exit 4) unless outputs are byte-identical",
        )
        if parallel:
            p.add_argument(
                "--parallel",
                action="store_true",
                help="parallelize across sweep cells (determinism per cell)",
            )

    common(sub.add_parser("gen-corpus", help="generate the synthetic corpus"))
    common(sub.add_parser("build-cohort", help="apply inclusion criteria and build splits"))
    common(sub.add_parser("pretrain", help="masked-LM pretraining of the encoder backbone"))
    p_train = sub.add_parser("train", help="train one adaptation regime")
    p_train.add_argument("regime", choices=_REGIMES)
    common(p_train)
    p_eval = sub.add_parser("evaluate", help="metric table on the balanced test_1 split")
    p_eval.add_argument("regime", choices=_REGIMES)
    common(p_eval)
    p_imb = sub.add_parser("sweep-imbalance", help="evaluate one checkpoint across class ratios")
    p_imb.add_argument("regime", choices=_REGIMES)
    common(p_imb)
    p_fs = sub.add_parser("sweep-fewshot", help="train every regime at each few-shot size")
    common(p_fs, parallel=True)
    common(sub.add_parser("report", help="join run outputs into one summary table"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.seed)
        out_dir = args.out
        os.makedirs(out_dir, exist_ok=True)
        outputs = _dispatch(args, config, out_dir)
        if args.verify:
            _verify_rerun(args, config, out_dir, outputs)
        for rel in outputs:
            print(rel)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 4
    except NotebenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
