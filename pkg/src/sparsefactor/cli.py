"""Batch command-line entry point.

Every command writes a JSON run manifest (config snapshot, seed, input and
artifact content hashes, wall clock) into its output directory, and a
re-run from the same inputs reproduces the artifact hashes bit for bit.

Exit codes: 0 success, 1 usage error, 2 data/contract violation,
3 numerical failure.
"""

from __future__ import annotations

import ast
import functools
import hashlib
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import dataproto as D
from . import evaluation as E
from . import interpret as I
from . import model as M
from . import synthetic as S
from . import theory as TH
from . import training as T
from .errors import (ContractViolationError, DegenerateTestError,
                     InvalidArgumentError, NumericalFailureError, ShapeError,
                     SparseFactorError)
from .inference import EnergyParams

# exit-code contract: 1 = usage error (click's default of 2 is reserved for
# data/contract violations here)
click.UsageError.exit_code = 1


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_tree(root: Path) -> dict[str, str]:
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            out[str(p.relative_to(root))] = sha256_file(p)
    return out


def write_manifest(out_dir: Path, command: str, config: dict, seed: int | None,
                   inputs: dict[str, str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "artifacts": hash_tree(out_dir),
        "tool_version": __version__,
        "wall_clock_sec": round(time.time() - started, 3),
    }
    (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                            default=str))


def parse_kv_config(path: str | Path) -> dict:
    """Plain key=value config: one pair per line, '#' comments, literal values."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"bad config line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def _pick(d: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in d.items() if k in names}


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (InvalidArgumentError, click.UsageError) as exc:
            click.echo(f"usage error: {exc}", err=True)
            sys.exit(1)
        except (ContractViolationError, ShapeError, DegenerateTestError,
                FileNotFoundError) as exc:
            click.echo(f"data/contract violation: {exc}", err=True)
            sys.exit(2)
        except (NumericalFailureError, FloatingPointError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(3)
        except SparseFactorError as exc:
            click.echo(f"data/contract violation: {exc}", err=True)
            sys.exit(2)
    return wrapper


@click.group()
@click.option("--threads", type=int, default=1, show_default=True,
              help="Internal parallelism bound (outputs are identical regardless).")
@click.pass_context
def main(ctx, threads):
    """Sparse latent factor forecasting toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads


PRESETS = {
    "base": {},
    "nonlinear": {"kind": "nonlinear"},
    "high_d": {"kind": "high_d", "d": 120},
}


@main.command("synth-gen")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def cmd_synth_gen(config_path, preset, out_dir, seed):
    """Generate a ground-truth synthetic dataset directory."""
    started = time.time()
    overrides = dict(PRESETS.get(preset, {}))
    if config_path:
        overrides.update(_pick(parse_kv_config(config_path), S.DgpConfig))
    if "horizons" in overrides:
        overrides["horizons"] = tuple(overrides["horizons"])
    overrides["seed"] = seed
    cfg = S.DgpConfig(**overrides)
    dataset = S.generate(cfg)
    out = Path(out_dir)
    S.save_dataset(dataset, out)
    inputs = {config_path: sha256_file(Path(config_path))} if config_path else {}
    write_manifest(out, "synth-gen", asdict(cfg), seed, inputs, started)
    click.echo(f"wrote {len(dataset.samples)} samples to {out}")


@main.command("align")
@click.option("--series-dir", type=click.Path(exists=True), required=True,
              help="Directory of per-series CSVs (reference_period,value,release_timestamp).")
@click.option("--calendar", "calendar_path", type=click.Path(exists=True), required=True,
              help="CSV of trading dates (column 'date').")
@click.option("--meta", "meta_path", type=click.Path(exists=True), default=None,
              help="Release-calendar CSV (series_id,frequency,lag_rule).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@handle_errors
def cmd_align(series_dir, calendar_path, meta_path, out_dir):
    """Build a leakage-safe panel from vintaged series and audit it."""
    started = time.time()
    import pandas as pd
    series_files = sorted(Path(series_dir).glob("*.csv"))
    if not series_files:
        raise InvalidArgumentError(f"no series CSVs in {series_dir}")
    meta = D.load_calendar_csv(meta_path) if meta_path else {}
    series = []
    for path in series_files:
        sid = path.stem
        freq = meta.get(sid, {}).get("frequency", "daily")
        series.append(D.load_series_csv(path, series_id=sid, frequency=freq))
    cal_df = pd.read_csv(calendar_path)
    if "date" not in cal_df.columns:
        raise InvalidArgumentError("calendar CSV needs a 'date' column")
    panel = D.align(series, list(cal_df["date"]))
    audit = D.audit_leakage(panel, series)
    out = Path(out_dir)
    D.write_panel(panel, out, audit)
    inputs = {str(p): sha256_file(p) for p in series_files}
    inputs[calendar_path] = sha256_file(Path(calendar_path))
    write_manifest(out, "align", {"series": [p.stem for p in series_files]},
                   None, inputs, started)
    status = "clean" if audit.clean else f"{len(audit.violations)} violations"
    click.echo(f"aligned {len(series)} series over {panel.calendar.size} days ({status})")


def _load_splits(dataset_dir: str):
    dataset = S.load_dataset(dataset_dir)
    return dataset, dataset.splits()


def _model_config_from(overrides: dict, dataset: S.SyntheticDataset) -> M.ModelConfig:
    base = {
        "window": dataset.dgp_config.window,
        "num_features": dataset.samples.features.shape[2],
        "latent_dim": dataset.dgp_config.m_true,
        "num_horizons": len(dataset.samples.horizons),
        "use_masks": False,
        "decoder_kind": "linearized",
        "dropout_rate": 0.1,
    }
    base.update(_pick(overrides, M.ModelConfig))
    return M.ModelConfig(**base)


def _train_config_from(overrides: dict, seed: int) -> T.TrainConfig:
    energy = EnergyParams(**{k[len("energy_"):]: v for k, v in overrides.items()
                             if k.startswith("energy_")})
    kwargs = _pick(overrides, T.TrainConfig)
    kwargs["energy_params"] = energy
    kwargs["seed"] = seed
    return T.TrainConfig(**kwargs)


@main.command("train")
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def cmd_train(dataset_dir, config_path, out_dir, seed):
    """Two-stage training on a synthetic dataset directory."""
    started = time.time()
    overrides = parse_kv_config(config_path) if config_path else {}
    dataset, splits = _load_splits(dataset_dir)
    model_config = _model_config_from(overrides, dataset)
    train_config = _train_config_from(overrides, seed)
    bundle, report = T.train_two_stage(splits, model_config, train_config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(bundle, out / "checkpoint")
    (out / "train_report.json").write_text(json.dumps({
        "epochs": report.epochs, "stopping_epoch": report.stopping_epoch,
        "best_val_rmse": report.best_val_rmse}, indent=2))
    inputs = dict(hash_tree(Path(dataset_dir)))
    if config_path:
        inputs[config_path] = sha256_file(Path(config_path))
    write_manifest(out, "train",
                   {"model": asdict(model_config), "train": _jsonable(train_config)},
                   seed, inputs, started)
    click.echo(f"stopped at epoch {report.stopping_epoch}, "
               f"best val RMSE {report.best_val_rmse:.4f}")


def _jsonable(cfg) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=str))


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--path", "path_kind", type=click.Choice(["deployed", "refined"]),
              default="deployed", show_default=True)
@click.option("--dm-against", type=click.Choice(["persistence", "ridge"]), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@handle_errors
def cmd_eval(checkpoint, dataset_dir, path_kind, dm_against, out_dir):
    """Accuracy and directional metrics on the test split."""
    started = time.time()
    bundle = M.load_checkpoint(checkpoint)
    dataset, splits = _load_splits(dataset_dir)
    test = splits["test"]
    fset = E.forecast_set(test, bundle, path_kind)
    report = {"path_kind": path_kind,
              "accuracy": {str(k): v for k, v in E.accuracy_metrics(fset).items()},
              "directional": {str(k): v for k, v in E.directional_metrics(fset).items()}}
    if dm_against:
        base = E.baselines(splits)[dm_against]
        dm = {}
        for i, tau in enumerate(test.horizons):
            loss_model = (fset.predicted[:, i] - fset.realized[:, i]) ** 2
            loss_base = (base.predicted[:, i] - base.realized[:, i]) ** 2
            stat, p = E.dm_test(loss_model, loss_base, tau)
            dm[str(tau)] = {"statistic": stat, "p_one_sided": p}
        report["dm_against"] = {dm_against: dm}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2))
    _accuracy_csv(out / "accuracy.csv", report["accuracy"])
    inputs = dict(hash_tree(Path(dataset_dir)))
    inputs.update({f"checkpoint/{k}": v for k, v in hash_tree(Path(checkpoint)).items()})
    write_manifest(out, "eval", {"path": path_kind, "dm_against": dm_against},
                   None, inputs, started)
    click.echo(json.dumps(report["accuracy"], indent=2))


def _accuracy_csv(path: Path, accuracy: dict) -> None:
    lines = ["horizon,rmse,mae"]
    for tau, row in accuracy.items():
        lines.append(f"{tau},{row['rmse']},{row['mae']}")
    path.write_text("\n".join(lines) + "\n")


@main.command("interpret")
@click.option("--checkpoints", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--events", "events_path", type=click.Path(exists=True), default=None,
              help="CSV with columns (index, factor) of planted event indices.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def cmd_interpret(checkpoints, dataset_dir, events_path, out_dir, seed):
    """Stability, driver, and event-study diagnostics for trained checkpoints."""
    started = time.time()
    dataset, splits = _load_splits(dataset_dir)
    test = splits["test"]
    panels = []
    for ckpt in checkpoints:
        bundle = M.load_checkpoint(ckpt)
        z, _ = M.enc_forward_batch(test.features, test.masks, bundle)
        panels.append(I.FactorPanel(np.arange(len(test)), z,
                                    bundle.config.active_threshold))
    report: dict = {"active": I.active_factor_stats(panels[0])["mean_count"]}
    if len(panels) >= 2:
        report["stability"] = I.procrustes_stability(panels)
    else:
        report["stability_notice"] = "single checkpoint: stability section omitted"
    drivers = test.true_latents
    driver_names = [f"true_factor_{k}" for k in range(drivers.shape[1])]
    reg = I.driver_regression(panels[0], drivers, driver_names)
    report["drivers"] = {f"{k}:{name}": v for (k, name), v in reg.items()
                        if abs(v.get("r", 0.0) or 0.0) > 0.3}
    if events_path:
        import pandas as pd
        ev = pd.read_csv(events_path)
        spec = I.EventSpec(list(ev["index"]), factor_index=int(ev["factor"].iloc[0]),
                           seed=seed)
        report["event_study"] = I.event_study(panels[0], spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "interpret_report.json").write_text(json.dumps(report, indent=2, default=str))
    inputs = dict(hash_tree(Path(dataset_dir)))
    write_manifest(out, "interpret", {"checkpoints": list(checkpoints)}, seed,
                   inputs, started)
    click.echo(json.dumps({k: report[k] for k in report if k != "drivers"},
                          indent=2, default=str))


@main.command("gap-diagnose")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@handle_errors
def cmd_gap_diagnose(checkpoint, dataset_dir, out_dir):
    """Amortization-gap bound check plus convergence and sparsity sweeps."""
    started = time.time()
    bundle = M.load_checkpoint(checkpoint)
    dataset, splits = _load_splits(dataset_dir)
    report = TH.theory_report(bundle, splits)
    report["convergence"] = TH.convergence_curve(20, (1, 2, 5, 8, 10, 20, 50))
    report["sparsity_vs_lambda"] = TH.sparsity_vs_lambda((0.0, 0.01, 0.1, 0.5, 1.0, 5.0))
    k_rows = []
    ep = EnergyParams()
    for k in (1, 5, 10, 20):
        pk = EnergyParams(lambda_l1=ep.lambda_l1, mu_prox=ep.mu_prox,
                          step_size=ep.step_size, num_steps=k)
        fset = E.forecast_set(splits["test"], bundle, "refined", pk)
        rmse = float(np.sqrt(np.mean((fset.predicted - fset.realized) ** 2)))
        k_rows.append({"K": k, "refined_rmse": rmse})
    report["k_sweep"] = k_rows
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "theory_report.json").write_text(json.dumps(report, indent=2))
    inputs = dict(hash_tree(Path(dataset_dir)))
    write_manifest(out, "gap-diagnose", {}, None, inputs, started)
    click.echo(json.dumps({k: report[k] for k in
                           ("predicted_gap", "observed_gap", "ratio", "bound_satisfied")},
                          indent=2))


ABLATIONS = ("full", "no_l1", "k1", "k20", "no_h")


@main.command("ablate")
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--variants", default=",".join(ABLATIONS), show_default=True)
@click.option("--mu-grid", default="", help="Comma list of mu values for the trade-off sweep.")
@handle_errors
def cmd_ablate(dataset_dir, config_path, out_dir, seed, variants, mu_grid):
    """Train the ablation grid and/or the mu trade-off sweep."""
    started = time.time()
    overrides = parse_kv_config(config_path) if config_path else {}
    dataset, splits = _load_splits(dataset_dir)
    rows = []
    for variant in [v for v in variants.split(",") if v]:
        if variant not in ABLATIONS:
            raise InvalidArgumentError(f"unknown variant {variant!r}")
        bundle, extra = train_variant(dataset, splits, overrides, seed, variant)
        rows.append({"variant": variant, **extra})
        click.echo(f"{variant}: rmse={extra['test_rmse']:.4f} "
                   f"active={extra['mean_active']:.2f}")
    mu_rows = []
    for mu in [float(x) for x in mu_grid.split(",") if x]:
        bundle, extra = train_variant(dataset, splits, overrides, seed, "full",
                                      mu_override=mu)
        mu_rows.append({"mu": mu, **extra})
        click.echo(f"mu={mu}: rmse={extra['test_rmse']:.4f} "
                   f"align_r2={extra['alignment_r2']:.4f}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_report.json").write_text(json.dumps(
        {"variants": rows, "mu_sweep": mu_rows}, indent=2))
    inputs = dict(hash_tree(Path(dataset_dir)))
    write_manifest(out, "ablate", {"variants": variants, "mu_grid": mu_grid},
                   seed, inputs, started)


def train_variant(dataset, splits, overrides: dict, seed: int, variant: str,
                  mu_override: float | None = None) -> tuple:
    """Train one ablation variant and score it on the test split."""
    overrides = dict(overrides)
    if variant == "no_l1":
        overrides["energy_lambda_l1"] = 0.0
    elif variant == "k1":
        overrides["energy_num_steps"] = 1
    elif variant == "k20":
        overrides["energy_num_steps"] = 20
    if mu_override is not None:
        overrides["energy_mu_prox"] = mu_override
    model_config = _model_config_from(
        {**overrides, **({"context_off": True} if variant == "no_h" else {})}, dataset)
    train_config = _train_config_from(overrides, seed)
    bundle, report = T.train_two_stage(splits, model_config, train_config)
    test = splits["test"]
    rmse = T.deployed_rmse(test, bundle)
    z, _ = M.enc_forward_batch(test.features, test.masks, bundle)
    active = float(np.mean(np.sum(np.abs(z) > model_config.active_threshold, axis=1)))
    # alignment on the returned (best-validation) bundle, not the last epoch
    val = splits["val"]
    _, z_star = T.refined_forward(val, bundle,
                                  T.effective_energy_params(bundle, train_config))
    z_hat, _ = M.enc_forward_batch(val.features, val.masks, bundle)
    try:
        r2, _ = T.compute_alignment(z_star, z_hat)
    except DegenerateTestError:
        r2 = float("nan")
    return bundle, {"test_rmse": rmse, "mean_active": active,
                    "val_rmse": report.best_val_rmse,
                    "alignment_r2": r2,
                    "stopping_epoch": report.stopping_epoch}


if __name__ == "__main__":
    main()
