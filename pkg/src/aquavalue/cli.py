"""Command-line interface: configuration, data ingestion, serialization.

Subcommands delegate to the library modules; all randomness hangs off a
single master seed (default 0) and every output embeds the resolved
configuration, so a result file is reproducible from its own header.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import classifier, experiments, lsmc
from .calibration import (
    DEFAULT_BOUNDS,
    cortazar_calibrate,
    kalman_calibrate,
    uncertainty_report,
    FuturesPanel,
)
from .farm import FarmParams
from .model import CommodityParams, CommodityState, futures_price, simulate_pair

DEFAULT_SEED = 0


class ConfigError(ValueError):
    """Invalid configuration or input data; maps to exit code 2."""


def _check_keys(block: dict, allowed, context: str) -> None:
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(
            f"{context}: unknown keys {unknown}; allowed: {sorted(allowed)}"
        )


_PARAM_KEYS = ("sigma1", "sigma2", "kappa", "alpha", "lam", "rho")
_STATE_KEYS = ("spot", "delta")
_FARM_KEYS = tuple(f.name for f in dataclasses.fields(FarmParams))
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(classifier.TrainConfig))


def _params_from(block: dict, context: str, allow_negative_lambda=False) -> CommodityParams:
    _check_keys(block, _PARAM_KEYS, context)
    missing = sorted(set(_PARAM_KEYS) - set(block))
    if missing:
        raise ConfigError(f"{context}: missing keys {missing}")
    return CommodityParams(
        **{k: float(block[k]) for k in _PARAM_KEYS},
        allow_negative_lambda=allow_negative_lambda,
    )


def _state_from(block: dict, context: str) -> CommodityState:
    _check_keys(block, _STATE_KEYS, context)
    return CommodityState(float(block["spot"]), float(block["delta"]))


def _farm_from(block: dict) -> FarmParams:
    _check_keys(block, _FARM_KEYS, "farm")
    return dataclasses.replace(FarmParams(), **{k: v for k, v in block.items()})


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    return cfg


def read_futures_csv(path: str) -> FuturesPanel:
    """Parse a `date,ttm_years,price` quote file into a panel.

    Dates are ISO-8601 and become year offsets from the first date;
    ragged maturity sets per date are allowed.  Any malformed row is
    rejected with its line number.
    """
    by_date: dict[datetime.date, list[tuple[float, float]]] = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}")
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["date", "ttm_years", "price"]:
            raise ConfigError(
                f"{path} line 1: header must be 'date,ttm_years,price', got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ConfigError(f"{path} line {lineno}: expected 3 fields, got {len(row)}")
            try:
                date = datetime.date.fromisoformat(row[0].strip())
            except ValueError:
                raise ConfigError(f"{path} line {lineno}: invalid ISO date {row[0]!r}")
            try:
                ttm = float(row[1])
                price = float(row[2])
            except ValueError:
                raise ConfigError(f"{path} line {lineno}: non-numeric ttm/price")
            if ttm < 0:
                raise ConfigError(f"{path} line {lineno}: ttm_years must be >= 0")
            if price <= 0:
                raise ConfigError(f"{path} line {lineno}: price must be > 0")
            by_date.setdefault(date, []).append((ttm, price))
    if not by_date:
        raise ConfigError(f"{path}: no data rows")
    dates = sorted(by_date)
    origin = dates[0]
    times = np.array([(d - origin).days / 365.25 for d in dates])
    maturities, prices = [], []
    for d in dates:
        quotes = sorted(by_date[d])
        maturities.append(np.array([q[0] for q in quotes]))
        prices.append(np.array([q[1] for q in quotes]))
    try:
        return FuturesPanel(times, maturities, prices)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}")


def _write_json(path: Path, payload: dict, config: dict, seed: int) -> None:
    payload = {"config": config, "seed": seed, **payload}
    path.write_text(json.dumps(payload, indent=2))


def _csv_header(fh, config: dict, seed: int) -> None:
    for key, value in sorted(config.items()):
        fh.write(f"# {key}={json.dumps(value)}\n")
    fh.write(f"# seed={seed}\n")


def _scenario_inputs(cfg: dict, context: str):
    """Common (salmon, soy, farm, r, states) resolution with defaults."""
    allowed = (
        "salmon", "soy", "salmon_state", "soy_state", "farm", "r",
        "m_train", "m_valid", "n_paths", "mode", "classifier",
        "discount_at_upper",
    )
    _check_keys(cfg, allowed, context)
    salmon = (
        _params_from(cfg["salmon"], "salmon")
        if "salmon" in cfg
        else experiments.salmon_params(0.01)
    )
    soy = (
        _params_from(cfg["soy"], "soy")
        if "soy" in cfg
        else experiments.soy_params(1.0)
    )
    farm = _farm_from(cfg.get("farm", {}))
    r = float(cfg.get("r", experiments.DEFAULT_RATE))
    salmon_state = (
        _state_from(cfg["salmon_state"], "salmon_state")
        if "salmon_state" in cfg
        else CommodityState(farm.net_spot0, experiments.SALMON_DELTA0)
    )
    soy_state = (
        _state_from(cfg["soy_state"], "soy_state")
        if "soy_state" in cfg
        else CommodityState(1.0, 0.0)
    )
    return salmon, soy, farm, r, salmon_state, soy_state


def cmd_simulate(cfg: dict, seed: int, out: Path) -> int:
    salmon, soy, farm, r, s_state, f_state = _scenario_inputs(cfg, "simulate")
    n_paths = int(cfg.get("n_paths", 10_000))
    paths = simulate_pair(salmon, s_state, soy, f_state, r, farm.grid, n_paths, seed)
    np.savez_compressed(out / "paths.npz", values=paths.values,
                        times=farm.grid.times, seed=seed)
    with open(out / "path_stats.csv", "w", newline="") as fh:
        _csv_header(fh, cfg, seed)
        writer = csv.writer(fh)
        writer.writerow(
            ["time", "salmon_mean", "salmon_std", "salmon_futures",
             "soy_mean", "soy_std", "soy_futures"]
        )
        t = farm.grid.times
        sf = futures_price(salmon, r, s_state, t)
        ff = futures_price(soy, r, f_state, t)
        for k in range(farm.grid.n_steps + 1):
            writer.writerow([
                repr(float(t[k])),
                repr(float(paths.spot(0)[:, k].mean())),
                repr(float(paths.spot(0)[:, k].std(ddof=1))),
                repr(float(sf[k])),
                repr(float(paths.spot(1)[:, k].mean())),
                repr(float(paths.spot(1)[:, k].std(ddof=1))),
                repr(float(ff[k])),
            ])
    print(f"simulated {n_paths} paths over {farm.grid.n_steps} steps -> {out}")
    return 0


def cmd_calibrate(cfg: dict, seed: int, out: Path, csv_path: str, method: str) -> int:
    allowed = ("init", "r", "estimate_mu", "allow_negative_lambda", "n_starts",
               "price_scale")
    _check_keys(cfg, allowed, "calibrate")
    allow_neg = bool(cfg.get("allow_negative_lambda", False))
    init = (
        _params_from(cfg["init"], "init", allow_neg)
        if "init" in cfg
        else CommodityParams(0.3, 0.4, 1.5, 0.05, 0.1, 0.5)
    )
    r = float(cfg.get("r", experiments.DEFAULT_RATE))
    n_starts = int(cfg.get("n_starts", 3))
    panel = read_futures_csv(csv_path)
    if "price_scale" in cfg:
        panel = panel.scaled(float(cfg["price_scale"]))

    results = {}
    if method in ("cortazar", "both"):
        results["cortazar"] = cortazar_calibrate(
            panel, r, init, n_starts=n_starts, seed=seed,
            allow_negative_lambda=allow_neg,
        )
    if method in ("kalman", "both"):
        results["kalman"] = kalman_calibrate(
            panel, r, init, n_starts=n_starts, seed=seed,
            estimate_mu=bool(cfg.get("estimate_mu", False)),
            allow_negative_lambda=allow_neg,
        )
    payload = {}
    for name, res in results.items():
        payload[name] = {
            "params": dict(zip(_PARAM_KEYS, res.params.as_vector().tolist())),
            "goodness": res.goodness,
            "method": res.method,
            "log_spot": res.log_spot.tolist(),
            "delta": res.delta.tolist(),
            "diagnostics": res.diagnostics,
        }
    _write_json(out / "calibration.json", payload, cfg, seed)
    if method == "both":
        report = uncertainty_report(panel, r, results["cortazar"], results["kalman"])
        _write_json(out / "uncertainty.json", report, cfg, seed)
    for name, res in results.items():
        vec = np.round(res.params.as_vector(), 6)
        print(f"{name}: params={vec.tolist()} goodness={res.goodness:.6g}")
    return 0


def cmd_value(cfg: dict, seed: int, out: Path) -> int:
    salmon, soy, farm, r, s_state, f_state = _scenario_inputs(cfg, "value")
    mode = cfg.get("mode", "both")
    if mode not in (lsmc.DETERMINISTIC, lsmc.STOCHASTIC, "both"):
        raise ConfigError(f"value: mode must be deterministic|stochastic|both, got {mode}")
    m_train = int(cfg.get("m_train", 100_000))
    m_valid = int(cfg.get("m_valid", 100_000))
    discount_at_upper = bool(cfg.get("discount_at_upper", False))
    train_seed, valid_seed = experiments.cell_seeds(seed, 0)
    train = simulate_pair(salmon, s_state, soy, f_state, r, farm.grid, m_train, train_seed)
    valid = simulate_pair(salmon, s_state, soy, f_state, r, farm.grid, m_valid, valid_seed)
    payload = {"train_seed": train_seed, "valid_seed": valid_seed}
    modes = [mode] if mode != "both" else [lsmc.STOCHASTIC, lsmc.DETERMINISTIC]
    outcomes = {}
    for m in modes:
        if m == lsmc.STOCHASTIC:
            rule, _ = lsmc.solve(train, farm, r, m, discount_at_upper=discount_at_upper)
        else:
            rule, _ = lsmc.solve(
                train.first_commodity(), farm, r, m, soy_params=soy,
                soy_init=f_state, discount_at_upper=discount_at_upper,
            )
        outcome = lsmc.evaluate(rule, valid, farm, r, discount_at_upper)
        outcomes[m] = outcome
        payload[m] = {
            "v0": outcome.v0,
            "se": outcome.se,
            "mean_stop_date": float(outcome.stop_index.mean() * farm.grid.dt),
        }
        print(f"{m}: V0={outcome.v0:.2f} (se {outcome.se:.2f})")
    if len(outcomes) == 2:
        ri = outcomes[lsmc.STOCHASTIC].v0 / outcomes[lsmc.DETERMINISTIC].v0
        payload["ri"] = ri
        print(f"relative improvement: {ri:.4f}")
    _write_json(out / "value.json", payload, cfg, seed)
    return 0


def cmd_train_classifier(cfg: dict, seed: int, out: Path) -> int:
    salmon, soy, farm, r, s_state, f_state = _scenario_inputs(cfg, "train-classifier")
    mode = cfg.get("mode", lsmc.STOCHASTIC)
    if mode not in (lsmc.DETERMINISTIC, lsmc.STOCHASTIC):
        raise ConfigError(f"train-classifier: mode must be deterministic|stochastic")
    train_block = dict(cfg.get("classifier", {}))
    _check_keys(train_block, _TRAIN_KEYS, "classifier")
    train_block.setdefault("seed", seed)
    tc = classifier.TrainConfig(**train_block)
    m_train = int(cfg.get("m_train", 100_000))
    m_valid = int(cfg.get("m_valid", 100_000))
    train_seed, valid_seed = experiments.cell_seeds(seed, 0)
    train = simulate_pair(salmon, s_state, soy, f_state, r, farm.grid, m_train, train_seed)
    valid = simulate_pair(salmon, s_state, soy, f_state, r, farm.grid, m_valid, valid_seed)
    if mode == lsmc.STOCHASTIC:
        rule_tau, ins = lsmc.solve(train, farm, r, mode)
        sets = classifier.build_labeled_sets(train, ins)
    else:
        rule_tau, ins = lsmc.solve(
            train.first_commodity(), farm, r, mode, soy_params=soy, soy_init=f_state
        )
        sets = classifier.build_labeled_sets(train.first_commodity(), ins)
    rule_f = classifier.train(sets, tc)
    classifier.save_rule(rule_f, out / "classifier.npz")
    ref = lsmc.evaluate(rule_tau, valid, farm, r)
    got = classifier.evaluate_classifier(rule_f, valid, farm, r)
    gap = abs(got.v0 - ref.v0) / ref.v0
    _write_json(
        out / "classifier.json",
        {
            "mode": mode,
            "train_seed": train_seed,
            "valid_seed": valid_seed,
            "v0_regression": ref.v0,
            "v0_classifier": got.v0,
            "relative_gap": gap,
            "weights_file": "classifier.npz",
        },
        cfg, seed,
    )
    print(f"{mode}: classifier V0={got.v0:.2f}, regression V0={ref.v0:.2f}, gap {gap:.4%}")
    return 0


def _write_matrix_csv(path, matrix, config, seed, value_name):
    salmon_names = [n for n, _ in experiments.SALMON_SCENARIOS]
    soy_names = [n for n, _ in experiments.SOY_SCENARIOS]
    with open(path, "w", newline="") as fh:
        _csv_header(fh, config, seed)
        writer = csv.writer(fh)
        writer.writerow([value_name] + salmon_names)
        for i, soy_name in enumerate(soy_names):
            writer.writerow([soy_name] + [repr(float(v)) for v in matrix[i]])


def cmd_reproduce_tables(cfg: dict, seed: int, out: Path, threads: int) -> int:
    allowed = ("m_train", "m_valid", "train_classifiers", "classifier",
               "discount_at_upper")
    _check_keys(cfg, allowed, "reproduce-tables")
    m_train = int(cfg.get("m_train", 100_000))
    m_valid = int(cfg.get("m_valid", 100_000))
    with_f = bool(cfg.get("train_classifiers", True))
    train_block = dict(cfg.get("classifier", {}))
    _check_keys(train_block, _TRAIN_KEYS, "classifier")
    tc = classifier.TrainConfig(**train_block) if train_block else None
    report = experiments.run_grid(
        experiments.ScenarioGrid(), m_train, m_valid, seed=seed,
        train_classifiers=with_f, classifier_config=tc,
        discount_at_upper=bool(cfg.get("discount_at_upper", False)),
        n_threads=threads,
    )
    _write_matrix_csv(out / "improvement_ratios.csv", report.table("ri_tau"),
                      cfg, seed, "ri_tau")
    with open(out / "farm_values.csv", "w", newline="") as fh:
        _csv_header(fh, cfg, seed)
        writer = csv.writer(fh)
        cols = ["v0_tau_stoch", "v0_tau_determ"] + (
            ["v0_f_stoch", "v0_f_determ"] if with_f else []
        )
        writer.writerow(["salmon_scenario", "soy_scenario"] + cols)
        for c in report.cells:
            writer.writerow(
                [c.salmon_scenario, c.soy_scenario]
                + [repr(float(getattr(c, col))) for col in cols]
            )
    report.write_csv(out / "grid.csv")
    report.write_json(out / "grid.json")
    failed = [c for c in report.cells if c.error]
    for c in report.cells:
        print(f"{c.salmon_scenario} x {c.soy_scenario}: "
              + (f"FAILED {c.error}" if c.error else f"RI={c.ri_tau:.4f}"))
    return 1 if failed else 0


def cmd_sensitivity(cfg: dict, seed: int, out: Path) -> int:
    allowed = ("shares", "salmon_lambda", "soy_sigma", "m_train", "m_valid")
    _check_keys(cfg, allowed, "sensitivity")
    shares = [float(s) for s in cfg.get("shares", (0.25, 0.5))]
    if any(not 0 < s < 1 for s in shares):
        raise ConfigError(f"sensitivity: shares must lie in (0, 1), got {shares}")
    rows = experiments.feed_share_sensitivity(
        shares,
        salmon_lambda=float(cfg.get("salmon_lambda", 0.2)),
        soy_sigma=float(cfg.get("soy_sigma", 1.0)),
        m_train=int(cfg.get("m_train", 100_000)),
        m_valid=int(cfg.get("m_valid", 100_000)),
        seed=seed,
    )
    with open(out / "feed_share.csv", "w", newline="") as fh:
        _csv_header(fh, cfg, seed)
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"share {row['share']}: RI={row['ri_tau']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aquavalue",
        description="Valuation and decision engine for fish-farm harvesting "
        "under stochastic feed costs.",
    )
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED,
                        help=f"master seed (default {DEFAULT_SEED})")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for grid runs")
    parser.add_argument("--out", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="simulate joint price paths")
    cal = sub.add_parser("calibrate", help="fit model parameters to a futures panel")
    cal.add_argument("--csv", required=True, help="quotes file: date,ttm_years,price")
    cal.add_argument("--method", choices=("cortazar", "kalman", "both"),
                     default="both")
    sub.add_parser("value", help="value the farm under both feed-cost rules")
    sub.add_parser("train-classifier", help="distill an LSMC rule into "
                   "per-date networks")
    sub.add_parser("reproduce-tables", help="run the full scenario grid")
    sub.add_parser("sensitivity", help="feed-cost share sensitivity")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.seed, out)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, args.seed, out, args.csv, args.method)
        if args.command == "value":
            return cmd_value(cfg, args.seed, out)
        if args.command == "train-classifier":
            return cmd_train_classifier(cfg, args.seed, out)
        if args.command == "reproduce-tables":
            return cmd_reproduce_tables(cfg, args.seed, out, args.threads)
        if args.command == "sensitivity":
            return cmd_sensitivity(cfg, args.seed, out)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
