#!/usr/bin/env python3
"""
textdenoise - command-line surface for noise injection, training and sweeps

Commands:
- inject   write a noisy TSV (and optional noisy validation TSV) plus noise_report.json
- train    warmup, BMM fit and de-noising phase; metrics.json, bmm.json, losses_T0.csv, checkpoints
- fit-bmm  fit the beta mixture on an external id,raw_loss CSV
- sweep    grid over t0 x beta with derived sub-seeds
- compare  baseline, dn-soft and dn-hard arms on identical data and seed

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from src.bmm import (
    DegenerateLossesError,
    build_posterior_table,
    fit_bmm,
    normalize_losses,
    write_bmm_json,
)
from src.config import ConfigError, KEYS, read_config_file, require, resolve, write_resolved_config
from src.data import load_dataset, split_validation
from src.noise import NoiseSpec, apply_noise, noise_validation_seed, write_noisy_dataset
from src.numerics import derive_seed
from src.training import MODES, DataConfig, TrainConfig, run_experiment

logger = logging.getLogger(__name__)

NOISE_ALIASES = {
    "random": "random",
    "token": "token_conditional",
    "token_conditional": "token_conditional",
    "length": "length_conditional",
    "length_conditional": "length_conditional",
}
TRAIN_OUTPUTS = ("metrics.json", "bmm.json", "losses_T0.csv", "checkpoint_best.bin", "checkpoint_last.bin")
RUN_ARTIFACTS = TRAIN_OUTPUTS + (
    "bmm_curve.csv",
    "epochs.csv",
    "loss_history.csv",
    "noise_report.json",
    "resolved_config",
)


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ------------------------------------------------------------------------------
# Value -> config objects
# ------------------------------------------------------------------------------


def train_config_from(values: Dict[str, Any]) -> TrainConfig:
    mapping = {
        "t0": "t0",
        "epochs": "epochs",
        "beta": "beta",
        "mode": "mode",
        "rep_mode": "rep_mode",
        "lr": "lr",
        "batch_size": "batch_size",
        "dropout": "dropout_rate",
        "embed_dim": "embed_dim",
        "hidden_dim": "hidden_dim",
        "seed": "seed",
        "eval_every": "eval_every",
        "record_epochs": "record_epochs",
    }
    kwargs = {field: values[key] for key, field in mapping.items() if key in values}
    return TrainConfig(**kwargs)


def data_config_from(values: Dict[str, Any]) -> DataConfig:
    require(values, "train", "test")
    keys = (
        "train",
        "test",
        "train_format",
        "test_format",
        "validation",
        "validation_format",
        "validation_fraction",
        "min_freq",
        "embeddings",
        "data_seed",
    )
    return DataConfig(**{key: values[key] for key in keys if key in values})


def noise_spec_from(values: Dict[str, Any], seed_key: str = "noise_seed") -> Optional[NoiseSpec]:
    if not values.get("noise"):
        return None
    kind = NOISE_ALIASES.get(values["noise"])
    if kind is None:
        raise ConfigError(f"unknown --noise {values['noise']!r}; expected random, token or length")
    fmt = values.get("format", values.get("train_format"))
    default_match = "contains" if fmt == "agnews" else "starts_with"
    seed = values.get(seed_key, values.get("seed", 0))
    try:
        return NoiseSpec(
            kind=kind,
            level=values.get("level", 0.0),
            trigger_tokens=values.get("tokens", ()),
            match_mode=values.get("match", default_match),
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _write_json(payload: Dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# ------------------------------------------------------------------------------
# Commands
# ------------------------------------------------------------------------------


def cmd_inject(values: Dict[str, Any]) -> int:
    """Write a noisy TSV and its noise report."""
    require(values, "input", "format", "noise", "output")
    spec = noise_spec_from(values, seed_key="seed")
    output = Path(values["output"])
    output.parent.mkdir(parents=True, exist_ok=True)

    dataset = load_dataset(values["input"], values["format"], min_freq=values.get("min_freq", 1))
    reports = {}
    if values.get("validation_output"):
        dataset, validation = split_validation(
            dataset,
            values.get("validation_fraction", 0.1),
            derive_seed(values.get("data_seed", 0), "validation-split"),
        )
        validation, reports["validation"] = apply_noise(
            validation, spec, seed=noise_validation_seed(spec.seed)
        )
        write_noisy_dataset(validation, values["validation_output"])

    noisy, reports["train"] = apply_noise(dataset, spec)
    write_noisy_dataset(noisy, output)
    _write_json({k: v.to_dict() for k, v in reports.items()}, output.parent / "noise_report.json")
    write_resolved_config(values, output.parent / "resolved_config")

    report = reports["train"]
    print(
        f"✅ Wrote {output}: flipped {report.flipped_count} of {report.total_count} labels "
        f"(realized noise {report.realized_noise_fraction:.4f})"
    )
    return 0


def _check_outputs(out: Path) -> None:
    missing = [name for name in TRAIN_OUTPUTS if not (out / name).is_file()]
    if missing:
        raise RuntimeError(f"run finished without writing {', '.join(missing)}")


def _publish(staging: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name in RUN_ARTIFACTS:
        (out / name).unlink(missing_ok=True)
    for path in sorted(staging.iterdir()):
        path.replace(out / path.name)
    staging.rmdir()


def cmd_train(values: Dict[str, Any]) -> int:
    """Run one experiment and print the best/last/gap summary."""
    require(values, "output")
    config = train_config_from(values)
    data_config = data_config_from(values)
    spec = noise_spec_from(values)

    # the run writes into a hidden sibling; the output directory only changes on success
    out = Path(values["output"])
    staging = out.resolve().with_name(f".{out.resolve().name}.partial")
    shutil.rmtree(staging, ignore_errors=True)
    try:
        staging.mkdir(parents=True)
        write_resolved_config(values, staging / "resolved_config")
        report = run_experiment(config, spec, data_config, staging)
        _check_outputs(staging)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    _publish(staging, out)

    print(f"best={report.best_test_accuracy:.4f} last={report.last_test_accuracy:.4f} gap={report.gap:.4f}")
    return 0


def cmd_fit_bmm(values: Dict[str, Any]) -> int:
    """Fit the mixture on an external loss CSV and score every id."""
    require(values, "losses", "output")
    frame = pd.read_csv(values["losses"])
    missing = {"id", "raw_loss"} - set(frame.columns)
    if missing:
        raise ValueError(f"{values['losses']}: missing column(s) {sorted(missing)}")
    if len(frame) < 10:
        raise DegenerateLossesError(f"need at least 10 rows to fit a mixture, got {len(frame)}")

    normalized, degenerate = normalize_losses(frame["raw_loss"].to_numpy(dtype=float))
    if degenerate:
        raise DegenerateLossesError(
            "all losses are equal, so no clean/noisy split exists; "
            "check that the losses were recorded after some training"
        )
    mixture = fit_bmm(normalized)
    table = build_posterior_table(mixture, normalized, frame["id"].tolist())

    out = Path(values["output"])
    out.mkdir(parents=True, exist_ok=True)
    write_bmm_json(mixture, out / "bmm.json")
    scored = frame[["id", "raw_loss"]].assign(normalized_loss=normalized, posterior=table.values)
    scored.to_csv(out / "posteriors.csv", index=False)
    write_resolved_config(values, out / "resolved_config")
    print(f"✅ Fitted mixture: lambda_c={mixture.lambda_c:.4f}; wrote {out / 'posteriors.csv'}")
    return 0


def _cell_name(t0: int, beta: float) -> str:
    return f"t0-{t0}_beta-{beta:g}"


def _run_cell(values: Dict[str, Any]) -> Dict[str, Any]:
    row = {"t0": values["t0"], "beta": values["beta"], "seed": values["seed"]}
    out = Path(values["output"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_resolved_config(values, out / "resolved_config")
        report = run_experiment(
            train_config_from(values), noise_spec_from(values), data_config_from(values), out
        )
    except Exception as e:  # a failed cell is recorded and the sweep continues
        logger.error("Sweep cell %s failed: %s", out.name, e)
        return {**row, "status": f"failed: {e}", "best_validation": None, "best": None, "last": None, "gap": None}
    return {
        **row,
        "status": "ok",
        "best_validation": report.best_validation_accuracy,
        "best": report.best_test_accuracy,
        "last": report.last_test_accuracy,
        "gap": report.gap,
    }


def cmd_sweep(values: Dict[str, Any]) -> int:
    """Train every (t0, beta) cell with a derived sub-seed and select the best."""
    require(values, "grid_t0", "grid_beta", "output")
    out = Path(values["output"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(values, out / "resolved_config")

    master = values.get("seed", 0)
    # noise stays fixed across cells so every cell sees the same data
    base = {**values, "noise_seed": values.get("noise_seed", master)}
    cells: List[Dict[str, Any]] = []
    for t0 in values["grid_t0"]:
        for beta in values["grid_beta"]:
            cells.append(
                {
                    **base,
                    "t0": t0,
                    "beta": beta,
                    "seed": derive_seed(master, t0, beta),
                    "output": str(out / _cell_name(t0, beta)),
                }
            )

    workers = values.get("workers", 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(cell) for cell in cells]

    summary = pd.DataFrame(rows, columns=["t0", "beta", "seed", "status", "best_validation", "best", "last", "gap"])
    summary.to_csv(out / "sweep_summary.csv", index=False)

    ok = [row for row in rows if row["status"] == "ok"]
    if not ok:
        print(f"❌ All {len(rows)} sweep cells failed", file=sys.stderr)
        return 2
    selected = max(ok, key=lambda row: row["best_validation"])  # first max wins ties
    _write_json(
        {**selected, "cell": _cell_name(selected["t0"], selected["beta"])},
        out / "sweep_selection.json",
    )
    print(
        f"✅ {len(ok)}/{len(rows)} cells finished; selected t0={selected['t0']} "
        f"beta={selected['beta']:g} best={selected['best']:.4f}"
    )
    return 0


def cmd_compare(values: Dict[str, Any]) -> int:
    """Run baseline, dn-soft and dn-hard with identical data and seed."""
    require(values, "output")
    out = Path(values["output"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(values, out / "resolved_config")

    data_config = data_config_from(values)
    spec = noise_spec_from(values)
    rows = []
    for mode in MODES:
        config = train_config_from({**values, "mode": mode})
        report = run_experiment(config, spec, data_config, out / mode)
        rows.append(
            {
                "mode": mode,
                "best": report.best_test_accuracy,
                "last": report.last_test_accuracy,
                "gap": report.gap,
                "best_epoch": report.best_epoch,
            }
        )
        print(f"{mode}: best={report.best_test_accuracy:.4f} last={report.last_test_accuracy:.4f} gap={report.gap:.4f}")
    pd.DataFrame(rows).to_csv(out / "comparison.csv", index=False)
    return 0


COMMANDS = {
    "inject": cmd_inject,
    "train": cmd_train,
    "fit-bmm": cmd_fit_bmm,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="textdenoise", description=__doc__.split("\n")[1].strip())
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    for name, handler in COMMANDS.items():
        sub = subparsers.add_parser(name, help=handler.__doc__)
        sub.add_argument("--config", help="Flat key = value configuration file")
        for key in KEYS:
            sub.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        file_values = read_config_file(args.config) if args.config else {}
        flag_values = {key: getattr(args, key) for key in KEYS}
        values = resolve(file_values, flag_values)
        return COMMANDS[args.command](values)
    except ConfigError as e:
        print(f"❌ Usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.debug("Command failed", exc_info=True)
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
