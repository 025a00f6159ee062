"""Experiment runner: generate, fit-prior, estimate-sigma, run, analyze.

One JSON config drives everything; every field has a default and every
knob of the objectives (sigma2, kl_weight, beta, temperature) is
overridable.  Results land under runs/<config-hash>/<method>/<seed>/ so a
rerun skips completed cells and reproduces identical bytes.

Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import figures, metrics
from .data import DomainDataset, ShiftSpec, derive_target, generate_source, load_dataset, save_dataset
from .losses import GmfConfig, RelationConfig, TslConfig
from .model import LatentSplitModel, ModelConfig, load_checkpoint, save_checkpoint
from .priors import fit_class_priors, load_priors, save_priors
from .trainer import METHODS, EbConfig, TrainConfig, estimate_sigma, train


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "benchmark": {
        "n_classes": 10,
        "input_dim": 20,
        "n_source": 5000,
        "n_target": 400,
        "n_target_test": 400,
        "separation": 3.0,
        "within_std": 1.0,
        "seed": 0,
        "parallel": True,
        "shift": {
            "kind": "affine_channel",
            "strength": 0.9,
            "noise_levels": [0.5, 0.75, 1.0, 1.25, 1.5],
            "seed": 7,
        },
    },
    "model": {"theta_widths": [64, 64], "latent_dim": 32, "omega_widths": []},
    "source_training": {"epochs": 40, "batch_size": 64, "learning_rate": 0.05, "seed": 123},
    "methods": ["no_transfer", "one_hot", "tsl", "vbkt_gmf"],
    "seeds": [0, 1, 2, 3, 4],
    "train": {"epochs": 30, "batch_size": 32, "learning_rate": 0.01},
    "gmf": {"sigma2": 1.0, "kl_weight": 1.0},
    "eb": {"kl_weight": 1.0, "sampling_sigma2": None},
    "relation": {"beta": 0.1},
    "tsl": {"temperature": 1.0, "weight": 1.0},
    "sigma_estimation": {"n_aug": 16, "strength": 0.1, "seed": 5, "per_dimension": False},
    "prior": {"variance_floor": 1e-6},
    "analyze": {"method": None, "seed": None, "n_samples": 30, "selection_seed": 0},
}


# ---- config handling ---------------------------------------------------------

def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _validate(cfg: dict) -> None:
    if not cfg["seeds"]:
        raise ConfigError("seeds must be nonempty")
    for name in cfg["methods"]:
        base, _, _ = _parse_method(name)
        if base not in METHODS:
            raise ConfigError(f"unknown method {name!r}")
    bench = cfg["benchmark"]
    if bench["n_target"] * 10 > bench["n_source"]:
        raise ConfigError("benchmark requires n_source >= 10 * n_target")
    kind = bench["shift"]["kind"]
    if kind not in ("affine_channel", "additive_noise"):
        raise ConfigError(f"unknown shift kind {kind!r}")
    sigma2 = cfg["gmf"]["sigma2"]
    if not (sigma2 == "estimate" or (isinstance(sigma2, (int, float)) and sigma2 > 0)):
        raise ConfigError("gmf.sigma2 must be a positive number or 'estimate'")
    if cfg["train"]["learning_rate"] < 0:
        raise ConfigError("train.learning_rate must be nonnegative")


def _parse_method(name: str) -> tuple[str, bool, bool]:
    """Split e.g. 'vbkt_gmf_rela_tsl' into (base, use_relational, combine_tsl)."""
    base = name
    combine_tsl = False
    use_rela = False
    if base.endswith("_tsl") and base != "tsl":
        combine_tsl = True
        base = base[: -len("_tsl")]
    if base.endswith("_rela"):
        use_rela = True
        base = base[: -len("_rela")]
    return base, use_rela, combine_tsl


def load_config(path: str | None, seed_override: str | None = None) -> dict:
    if path is None:
        user: dict = {}
    else:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed_override:
        try:
            cfg["seeds"] = [int(s) for s in seed_override.split(",") if s.strip()]
        except ValueError as e:
            raise ConfigError(f"bad --seed-override: {e}") from e
    _validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---- dataset plumbing ----------------------------------------------------------

def _benchmark_hash(cfg: dict) -> str:
    canon = json.dumps(cfg["benchmark"], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _build_datasets(cfg: dict) -> tuple[DomainDataset, DomainDataset, DomainDataset]:
    bench = cfg["benchmark"]
    shift = ShiftSpec(kind=bench["shift"]["kind"],
                      strength=bench["shift"]["strength"],
                      noise_levels=tuple(bench["shift"]["noise_levels"]),
                      seed=bench["shift"]["seed"])
    source = generate_source(bench["n_source"], bench["n_classes"],
                             bench["input_dim"], seed=bench["seed"],
                             separation=bench["separation"],
                             within_std=bench["within_std"])
    train_ds = derive_target(source, shift, bench["n_target"],
                             parallel=bench["parallel"], seed=bench["seed"] + 1,
                             domain_id="target_train")
    exclude = train_ds.pair_index if bench["parallel"] else None
    test_ds = derive_target(source, shift, bench["n_target_test"],
                            parallel=bench["parallel"], seed=bench["seed"] + 2,
                            domain_id="target_test", exclude_indices=exclude)
    return source, train_ds, test_ds


def _dataset_dir(cfg: dict, out: Path) -> Path:
    return out / "datasets" / _benchmark_hash(cfg)


def _ensure_datasets(cfg: dict, out: Path, announce=print) -> tuple[Path, list[Path]]:
    ds_dir = _dataset_dir(cfg, out)
    paths = [ds_dir / "source.csv", ds_dir / "target_train.csv", ds_dir / "target_test.csv"]
    if all(p.exists() for p in paths):
        return ds_dir, paths
    source, train_ds, test_ds = _build_datasets(cfg)
    ds_dir.mkdir(parents=True, exist_ok=True)
    for ds, path in zip((source, train_ds, test_ds), paths):
        tmp = path.with_name(path.name + ".tmp")
        save_dataset(ds, tmp)
        os.replace(tmp, path)
        announce(str(path))
    return ds_dir, paths


def _load_benchmark(cfg: dict, out: Path):
    ds_dir, paths = _ensure_datasets(cfg, out, announce=lambda _: None)
    source = load_dataset(paths[0])
    train_ds = load_dataset(paths[1])
    test_ds = load_dataset(paths[2])
    return source, train_ds, test_ds


# ---- shared pipeline pieces ----------------------------------------------------

def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(input_dim=cfg["benchmark"]["input_dim"],
                       num_classes=cfg["benchmark"]["n_classes"],
                       theta_widths=tuple(cfg["model"]["theta_widths"]),
                       latent_dim=cfg["model"]["latent_dim"],
                       omega_widths=tuple(cfg["model"]["omega_widths"]))


def _source_model(cfg: dict, run_dir: Path, source: DomainDataset) -> LatentSplitModel:
    path = run_dir / "source_model.json"
    if path.exists():
        return load_checkpoint(path)
    st = cfg["source_training"]
    model = LatentSplitModel(_model_config(cfg), seed=st["seed"])
    train_cfg = TrainConfig(method="no_transfer", epochs=st["epochs"],
                            batch_size=st["batch_size"],
                            learning_rate=st["learning_rate"], seed=st["seed"])
    model, _ = train(model, source, train_cfg)
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(model, tmp)
    os.replace(tmp, path)
    return model


def _resolve_sigma2(cfg: dict, run_dir: Path, source_model, train_ds):
    if cfg["gmf"]["sigma2"] != "estimate":
        return float(cfg["gmf"]["sigma2"])
    path = run_dir / "sigma.json"
    if path.exists():
        return json.loads(path.read_text())["sigma2"]
    se = cfg["sigma_estimation"]
    sigma2 = estimate_sigma(source_model, train_ds, n_aug=se["n_aug"],
                            strength=se["strength"], seed=se["seed"],
                            per_dimension=False)
    per_dim = estimate_sigma(source_model, train_ds, n_aug=se["n_aug"],
                             strength=se["strength"], seed=se["seed"],
                             per_dimension=True)
    _atomic_write(path, json.dumps(
        {"sigma2": sigma2, "sigma2_per_dimension": list(per_dim)}, indent=1) + "\n")
    return sigma2


def _ensure_priors(cfg: dict, run_dir: Path, source_model, source):
    path = run_dir / "priors.json"
    if path.exists():
        return load_priors(path)
    prior = fit_class_priors(source_model, source,
                             variance_floor=cfg["prior"]["variance_floor"])
    tmp = path.with_name(path.name + ".tmp")
    save_priors(prior, tmp)
    os.replace(tmp, path)
    return prior


def _train_config(cfg: dict, method_name: str, seed: int, sigma2) -> TrainConfig:
    base, use_rela, combine_tsl = _parse_method(method_name)
    return TrainConfig(
        method=base,
        use_relational=use_rela,
        combine_tsl=combine_tsl,
        epochs=cfg["train"]["epochs"],
        batch_size=cfg["train"]["batch_size"],
        learning_rate=cfg["train"]["learning_rate"],
        seed=seed,
        gmf=GmfConfig(sigma2=sigma2, kl_weight=cfg["gmf"]["kl_weight"]),
        eb=EbConfig(kl_weight=cfg["eb"]["kl_weight"],
                    sampling_sigma2=cfg["eb"]["sampling_sigma2"]),
        relation=RelationConfig(beta=cfg["relation"]["beta"]),
        tsl=TslConfig(temperature=cfg["tsl"]["temperature"],
                      weight=cfg["tsl"]["weight"]),
    )


# ---- subcommands ---------------------------------------------------------------

def cmd_generate(cfg: dict, out: Path, args) -> int:
    _, paths = _ensure_datasets(cfg, out, announce=lambda _: None)
    for p in paths:
        print(p)
    return 0


def cmd_fit_prior(cfg: dict, out: Path, args) -> int:
    run_dir = out / "runs" / config_hash(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    source, _, _ = _load_benchmark(cfg, out)
    model = _source_model(cfg, run_dir, source)
    _ensure_priors(cfg, run_dir, model, source)
    print(run_dir / "priors.json")
    return 0


def cmd_estimate_sigma(cfg: dict, out: Path, args) -> int:
    run_dir = out / "runs" / config_hash(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    source, train_ds, _ = _load_benchmark(cfg, out)
    model = _source_model(cfg, run_dir, source)
    se = cfg["sigma_estimation"]
    sigma2 = estimate_sigma(model, train_ds, n_aug=se["n_aug"],
                            strength=se["strength"], seed=se["seed"])
    per_dim = estimate_sigma(model, train_ds, n_aug=se["n_aug"],
                             strength=se["strength"], seed=se["seed"],
                             per_dimension=True)
    path = run_dir / "sigma.json"
    _atomic_write(path, json.dumps(
        {"sigma2": sigma2, "sigma2_per_dimension": list(per_dim)}, indent=1) + "\n")
    print(path)
    print(f"sigma2={sigma2}")
    return 0


def _run_cell(cfg, method_name, seed, cell_dir, source_model, source, train_ds,
              test_ds, prior, sigma2):
    base, _, _ = _parse_method(method_name)
    if base == "no_transfer":
        init = LatentSplitModel(_model_config(cfg), seed=seed + 7919)
    else:
        init = source_model.copy()
    train_cfg = _train_config(cfg, method_name, seed, sigma2)
    model, report = train(init, train_ds, train_cfg, eval_data=test_ds,
                          source_model=source_model, source_data=source,
                          prior=prior)
    tmp = cell_dir / "checkpoint.json.tmp"
    save_checkpoint(model, tmp)
    os.replace(tmp, cell_dir / "checkpoint.json")
    _atomic_write(cell_dir / "report.json",
                  json.dumps(report.as_dict(), indent=1) + "\n")
    return report.final_accuracy


def cmd_run(cfg: dict, out: Path, args) -> int:
    run_dir = out / "runs" / config_hash(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run_dir / "config.json", json.dumps(cfg, indent=1) + "\n")

    source, train_ds, test_ds = _load_benchmark(cfg, out)
    source_model = _source_model(cfg, run_dir, source)
    source_hash = source_model.weights_hash()

    bases = {_parse_method(m)[0] for m in cfg["methods"]}
    sigma2 = 1.0
    if "vbkt_gmf" in bases:
        sigma2 = _resolve_sigma2(cfg, run_dir, source_model, train_ds)
    elif cfg["gmf"]["sigma2"] != "estimate":
        sigma2 = float(cfg["gmf"]["sigma2"])
    prior = _ensure_priors(cfg, run_dir, source_model, source) \
        if "vbkt_eb" in bases else None

    cells = [(m, s) for m in cfg["methods"] for s in cfg["seeds"]]
    pending = []
    for method_name, seed in cells:
        cell_dir = run_dir / method_name / str(seed)
        cell_dir.mkdir(parents=True, exist_ok=True)
        if (cell_dir / "report.json").exists():
            continue
        pending.append((method_name, seed, cell_dir))

    failures = {}
    if pending:
        jobs = max(1, args.jobs)

        def work(item):
            method_name, seed, cell_dir = item
            return _run_cell(cfg, method_name, seed, cell_dir, source_model,
                             source, train_ds, test_ds, prior, sigma2)

        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(work, item): item for item in pending}
            for fut in concurrent.futures.as_completed(futures):
                method_name, seed, cell_dir = futures[fut]
                try:
                    fut.result()
                except Exception as e:  # cell failures are recorded, not fatal
                    failures[(method_name, seed)] = str(e)
                    _atomic_write(cell_dir / "error.txt", str(e) + "\n")

    if source_model.weights_hash() != source_hash:
        raise RuntimeError("source model was mutated during adaptation")

    _write_tables(cfg, run_dir, failures)
    print(run_dir / "results.csv")
    print(run_dir / "summary.csv")
    return 0


def _write_tables(cfg: dict, run_dir: Path, failures: dict) -> None:
    rows = []
    histories: dict[str, list] = {}
    for method_name in cfg["methods"]:
        for seed in sorted(cfg["seeds"]):
            report_path = run_dir / method_name / str(seed) / "report.json"
            if report_path.exists():
                report = json.loads(report_path.read_text())
                rows.append((method_name, seed, report["final_accuracy"], "ok"))
                histories.setdefault(method_name, []).append(report["epoch_losses"])
            else:
                rows.append((method_name, seed, None, "failed"))

    lines = ["method,seed,accuracy,status"]
    for method_name, seed, acc, status in rows:
        acc_s = repr(acc) if acc is not None else ""
        lines.append(f"{method_name},{seed},{acc_s},{status}")
    _atomic_write(run_dir / "results.csv", "\n".join(lines) + "\n")

    summary_rows = []
    lines = ["method,mean_accuracy,std_accuracy,n_seeds"]
    for method_name in cfg["methods"]:
        accs = [acc for m, _, acc, status in rows
                if m == method_name and status == "ok"]
        if not accs:
            lines.append(f"{method_name},,,0")
            continue
        mean, std = float(np.mean(accs)), float(np.std(accs))
        summary_rows.append({"method": method_name, "mean_accuracy": mean,
                             "std_accuracy": std})
        lines.append(f"{method_name},{repr(mean)},{repr(std)},{len(accs)}")
    _atomic_write(run_dir / "summary.csv", "\n".join(lines) + "\n")

    fig_dir = run_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    if summary_rows:
        figures.save_method_comparison(summary_rows, fig_dir / "accuracy_by_method.png")
    if histories:
        figures.save_loss_curves(histories, fig_dir / "loss_curves.png")


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise RuntimeError(f"missing config: {config_path}")
    cfg = _merge(DEFAULT_CONFIG, json.loads(config_path.read_text()))
    out = run_dir.parent.parent

    method = cfg["analyze"]["method"]
    if method is None:
        method = "vbkt_gmf" if "vbkt_gmf" in cfg["methods"] else cfg["methods"][0]
    seed = cfg["analyze"]["seed"]
    if seed is None:
        seed = sorted(cfg["seeds"])[0]
    checkpoint_path = run_dir / method / str(seed) / "checkpoint.json"
    if not checkpoint_path.exists():
        raise RuntimeError(f"missing checkpoint: {checkpoint_path}")

    model = load_checkpoint(checkpoint_path)
    source, _, test_ds = _load_benchmark(cfg, out)
    analysis_dir = run_dir / "analysis"
    fig_dir = analysis_dir / "figures"
    analysis_dir.mkdir(exist_ok=True)
    fig_dir.mkdir(exist_ok=True)

    n_samples = cfg["analyze"]["n_samples"]
    sel_seed = cfg["analyze"]["selection_seed"]
    for c in range(cfg["benchmark"]["n_classes"]):
        matrix = metrics.intra_class_discrepancy(model, test_ds, c,
                                                 n_samples=n_samples, seed=sel_seed)
        csv_path = analysis_dir / f"discrepancy_class_{c}.csv"
        _atomic_write(csv_path,
                      "\n".join(metrics.discrepancy_csv_lines(matrix)) + "\n")
        figures.save_discrepancy_heatmap(matrix, fig_dir / f"discrepancy_class_{c}.png")
        print(csv_path)

    emb_path = analysis_dir / "embeddings.csv"
    tmp = emb_path.with_name(emb_path.name + ".tmp")
    metrics.export_embeddings(model, [source, test_ds], tmp)
    os.replace(tmp, emb_path)
    print(emb_path)
    return 0


# ---- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vbkt",
        description="Bayesian latent-variable knowledge transfer experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--out", default="out", help="output root directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="concurrent (method, seed) cells")
        p.add_argument("--seed-override", default=None,
                       help="comma-separated seeds replacing the config list")

    for name in ("generate", "fit-prior", "estimate-sigma", "run"):
        common(sub.add_parser(name))
    analyze = sub.add_parser("analyze")
    analyze.add_argument("run_dir", help="runs/<hash> directory to analyze")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "analyze":
            return cmd_analyze(args)
        cfg = load_config(args.config, seed_override=args.seed_override)
        handler = {
            "generate": cmd_generate,
            "fit-prior": cmd_fit_prior,
            "estimate-sigma": cmd_estimate_sigma,
            "run": cmd_run,
        }[args.command]
        return handler(cfg, Path(args.out), args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
