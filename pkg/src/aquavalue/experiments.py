"""Scenario grid orchestration.

Runs the 3 x 3 grid of salmon price scenarios (risk premium) x feed
volatility scenarios, valuing the farm under four decision rules per
cell — regression rules and classifier rules, each trained with either
deterministic or stochastic feed costs — all evaluated on shared fresh
validation paths under the realized (stochastic) feed cost.  The
headline metric is the relative improvement RI = V0(stochastic rule) /
V0(deterministic rule).
"""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import classifier, lsmc
from .farm import FarmParams
from .model import CommodityParams, CommodityState, simulate_pair

SALMON_SCENARIOS = (("down-down", 0.01), ("down-up", 0.2), ("up-up", 0.6))
SOY_SCENARIOS = (("low-vol", 0.5), ("medium-vol", 1.0), ("high-vol", 2.0))


def salmon_params(lam: float) -> CommodityParams:
    return CommodityParams(0.23, 0.75, 2.6, 0.02, lam, 0.9)


def soy_params(sigma1: float) -> CommodityParams:
    return CommodityParams(sigma1, 0.4, 1.2, 0.06, 0.14, 0.44)


SALMON_DELTA0 = 0.57
DEFAULT_RATE = 0.0303


@dataclass(frozen=True)
class CellSpec:
    """One grid cell: a salmon scenario paired with a soy scenario."""

    salmon_name: str
    soy_name: str
    salmon: CommodityParams
    soy: CommodityParams


@dataclass(frozen=True)
class ScenarioGrid:
    """The full scenario grid with its shared farm and rate settings."""

    salmon_lambdas: tuple = tuple(lam for _, lam in SALMON_SCENARIOS)
    soy_sigmas: tuple = tuple(s for _, s in SOY_SCENARIOS)
    r: float = DEFAULT_RATE
    farm: FarmParams = field(default_factory=FarmParams)

    def cells(self) -> list[CellSpec]:
        salmon_names = dict((lam, name) for name, lam in SALMON_SCENARIOS)
        soy_names = dict((s, name) for name, s in SOY_SCENARIOS)
        out = []
        for lam in self.salmon_lambdas:
            for s1 in self.soy_sigmas:
                out.append(
                    CellSpec(
                        salmon_names.get(lam, f"lambda={lam}"),
                        soy_names.get(s1, f"sigma1={s1}"),
                        salmon_params(lam),
                        soy_params(s1),
                    )
                )
        return out


@dataclass(frozen=True)
class CellResult:
    """All per-cell valuations, their standard errors and provenance."""

    salmon_scenario: str
    soy_scenario: str
    v0_tau_stoch: float = np.nan
    v0_tau_determ: float = np.nan
    v0_f_stoch: float = np.nan
    v0_f_determ: float = np.nan
    se_tau_stoch: float = np.nan
    se_tau_determ: float = np.nan
    se_f_stoch: float = np.nan
    se_f_determ: float = np.nan
    train_seed: int = -1
    valid_seed: int = -1
    runtime: float = np.nan
    error: str | None = None

    @property
    def ri_tau(self) -> float:
        return self.v0_tau_stoch / self.v0_tau_determ

    @property
    def ri_f(self) -> float:
        return self.v0_f_stoch / self.v0_f_determ


CSV_COLUMNS = (
    "salmon_scenario",
    "soy_scenario",
    "ri_tau",
    "ri_f",
    "v0_tau_stoch",
    "v0_tau_determ",
    "v0_f_stoch",
    "v0_f_determ",
    "se_tau_stoch",
    "se_tau_determ",
    "se_f_stoch",
    "se_f_determ",
    "train_seed",
    "valid_seed",
    "error",
)
# wall-clock runtimes go to the JSON detail only, keeping CSV output
# byte-identical across reruns with the same seed
JSON_COLUMNS = CSV_COLUMNS + ("runtime",)


@dataclass(frozen=True)
class GridReport:
    """Grid results plus the resolved configuration that produced them."""

    cells: tuple
    m_train: int
    m_valid: int
    master_seed: int
    config: dict = field(default_factory=dict, compare=False)

    def cell(self, salmon_scenario: str, soy_scenario: str) -> CellResult:
        for c in self.cells:
            if (c.salmon_scenario, c.soy_scenario) == (salmon_scenario, soy_scenario):
                return c
        raise KeyError(f"no cell {salmon_scenario!r} x {soy_scenario!r}")

    def table(self, metric: str) -> np.ndarray:
        """(soy scenario x salmon scenario) matrix of one metric."""
        soy_names = [n for n, _ in SOY_SCENARIOS]
        salmon_names = [n for n, _ in SALMON_SCENARIOS]
        out = np.full((len(soy_names), len(salmon_names)), np.nan)
        for c in self.cells:
            if c.soy_scenario in soy_names and c.salmon_scenario in salmon_names:
                i = soy_names.index(c.soy_scenario)
                j = salmon_names.index(c.salmon_scenario)
                out[i, j] = getattr(c, metric)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for key, value in sorted(self.config.items()):
                fh.write(f"# {key}={value}\n")
            fh.write(f"# m_train={self.m_train}\n")
            fh.write(f"# m_valid={self.m_valid}\n")
            fh.write(f"# master_seed={self.master_seed}\n")
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for c in self.cells:
                writer.writerow(
                    [repr(getattr(c, col)) if isinstance(getattr(c, col), float)
                     else getattr(c, col) for col in CSV_COLUMNS]
                )

    def to_dict(self) -> dict:
        return {
            "m_train": self.m_train,
            "m_valid": self.m_valid,
            "master_seed": self.master_seed,
            "config": self.config,
            "cells": [
                {**{col: getattr(c, col) for col in JSON_COLUMNS},
                 "ri_tau": c.ri_tau, "ri_f": c.ri_f}
                for c in self.cells
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, allow_nan=True)


def cell_seeds(master_seed: int, index: int) -> tuple[int, int]:
    """Deterministic disjoint (train, validation) seeds per cell."""
    words = np.random.SeedSequence([master_seed, index]).generate_state(2)
    return int(words[0]), int(words[1])


def run_cell(
    spec: CellSpec,
    farm: FarmParams,
    r: float,
    m_train: int,
    m_valid: int,
    train_seed: int,
    valid_seed: int,
    train_classifiers: bool = True,
    classifier_config: classifier.TrainConfig | None = None,
    discount_at_upper: bool = False,
) -> CellResult:
    """Train and evaluate all four rules of one cell."""
    start = time.perf_counter()
    base = CellResult(
        spec.salmon_name, spec.soy_name, train_seed=train_seed, valid_seed=valid_seed
    )
    try:
        salmon_init = CommodityState(farm.net_spot0, SALMON_DELTA0)
        soy_init = CommodityState(1.0, 0.0)
        train = simulate_pair(
            spec.salmon, salmon_init, spec.soy, soy_init, r, farm.grid,
            m_train, seed=train_seed,
        )
        valid = simulate_pair(
            spec.salmon, salmon_init, spec.soy, soy_init, r, farm.grid,
            m_valid, seed=valid_seed,
        )
        rule_s, ins_s = lsmc.solve(
            train, farm, r, lsmc.STOCHASTIC, discount_at_upper=discount_at_upper
        )
        rule_d, ins_d = lsmc.solve(
            train.first_commodity(), farm, r, lsmc.DETERMINISTIC,
            soy_params=spec.soy, discount_at_upper=discount_at_upper,
        )
        out_s = lsmc.evaluate(rule_s, valid, farm, r, discount_at_upper)
        out_d = lsmc.evaluate(rule_d, valid, farm, r, discount_at_upper)
        fields = dict(
            v0_tau_stoch=out_s.v0, se_tau_stoch=out_s.se,
            v0_tau_determ=out_d.v0, se_tau_determ=out_d.se,
        )
        if train_classifiers:
            cfg = classifier_config or classifier.TrainConfig(
                seed=train_seed, min_batches=500
            )
            for tag, paths, ins in (
                ("stoch", train, ins_s),
                ("determ", train.first_commodity(), ins_d),
            ):
                sets = classifier.build_labeled_sets(paths, ins)
                crule = classifier.train(sets, cfg)
                out = classifier.evaluate_classifier(
                    crule, valid, farm, r, discount_at_upper
                )
                fields[f"v0_f_{tag}"] = out.v0
                fields[f"se_f_{tag}"] = out.se
        return replace(base, runtime=time.perf_counter() - start, **fields)
    except Exception as exc:  # failed cells are reported, not fatal
        return replace(base, runtime=time.perf_counter() - start, error=str(exc))


def run_grid(
    grid: ScenarioGrid,
    m_train: int,
    m_valid: int,
    seed: int = 0,
    train_classifiers: bool = True,
    classifier_config: classifier.TrainConfig | None = None,
    discount_at_upper: bool = False,
    n_threads: int = 1,
) -> GridReport:
    """Run every cell of the grid; results are independent of n_threads."""
    specs = grid.cells()
    jobs = []
    for i, spec in enumerate(specs):
        train_seed, valid_seed = cell_seeds(seed, i)
        jobs.append(
            (spec, grid.farm, grid.r, m_train, m_valid, train_seed, valid_seed,
             train_classifiers, classifier_config, discount_at_upper)
        )
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            cells = list(pool.map(lambda a: run_cell(*a), jobs))
    else:
        cells = [run_cell(*job) for job in jobs]
    config = {
        "r": grid.r,
        "salmon_lambdas": list(grid.salmon_lambdas),
        "soy_sigmas": list(grid.soy_sigmas),
        "feed_cost0": grid.farm.feed_cost0,
        "train_classifiers": train_classifiers,
        "discount_at_upper": discount_at_upper,
    }
    return GridReport(tuple(cells), m_train, m_valid, seed, config)


def feed_share_sensitivity(
    shares,
    salmon_lambda: float = 0.2,
    soy_sigma: float = 1.0,
    m_train: int = 100_000,
    m_valid: int = 100_000,
    seed: int = 0,
    base_farm: FarmParams | None = None,
) -> list[dict]:
    """RI of the regression rules as the feed-cost share of production
    cost varies, holding the scenario fixed.

    Each share rebuilds the farm (initial feed cost and the net initial
    spot both move with the share) and reruns the cell without
    classifier training.
    """
    base_farm = base_farm or FarmParams()
    spec = CellSpec(
        f"lambda={salmon_lambda}", f"sigma1={soy_sigma}",
        salmon_params(salmon_lambda), soy_params(soy_sigma),
    )
    rows = []
    for i, share in enumerate(shares):
        farm = base_farm.with_feed_share(share)
        train_seed, valid_seed = cell_seeds(seed, i)
        cell = run_cell(
            spec, farm, DEFAULT_RATE, m_train, m_valid, train_seed, valid_seed,
            train_classifiers=False,
        )
        rows.append(
            {
                "share": float(share),
                "feed_cost0": farm.feed_cost0,
                "ri_tau": cell.ri_tau,
                "v0_tau_stoch": cell.v0_tau_stoch,
                "v0_tau_determ": cell.v0_tau_determ,
                "se_tau_stoch": cell.se_tau_stoch,
                "se_tau_determ": cell.se_tau_determ,
                "train_seed": cell.train_seed,
                "valid_seed": cell.valid_seed,
                "error": cell.error,
            }
        )
    return rows
