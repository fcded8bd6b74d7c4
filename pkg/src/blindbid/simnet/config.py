"""Scenario configuration: one human-editable file fully determines a run."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

MODES = ("inproc", "wire")


@dataclass
class ScenarioConfig:
    """Desk-scale defaults: the production reference workload divided by
    10^4 (1M users / 20M daily requests → 100 users / 2K requests)."""

    seed: int = 0
    num_users: int = 100
    num_retargeters: int = 3
    num_advertisers: int = 10
    products_per_advertiser: int = 100
    visits_per_user_day: int = 20
    ad_requests_per_user_day: int = 20
    days: int = 1
    mode: str = "inproc"
    # client knobs
    store_cap: int = 1000
    top_m: int = 3
    freq_cap: int = 10
    jitter_max: float = 2.0
    batch_min: int = 5
    # ranking service knobs
    bucket_width: int = 50_000
    rate_limit_per_day: int = 100
    k_anon: int = 20
    randomize: bool = False
    # retargeter knobs
    alpha: float = 0.8
    reserve_micros: int = 0
    page_quality_spread: float = 0.0  # quality multipliers in [1-s, 1+s]
    # world generation
    num_publishers: int = 20
    coeff_rate: float = 0.2  # share of products carrying a coefficient table
    sensitive_rate: float = 0.02  # share of visits the user marks sensitive
    click_scale: float = 1.0  # scales the Bernoulli click probability
    ctr_range: tuple = (0.004, 0.04)  # drawn uniformly per product
    cpc_range: tuple = (100_000, 2_000_000)  # micros, drawn uniformly
    # give every retargeter value-identical catalogs (same ctr/cpc/factor
    # draws, distinct ids and keys) so win rates are symmetric by
    # construction; requires num_advertisers % num_retargeters == 0
    mirrored_catalogs: bool = False

    def validate(self) -> list[str]:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in (
            "num_users",
            "num_retargeters",
            "num_advertisers",
            "products_per_advertiser",
            "visits_per_user_day",
            "days",
            "store_cap",
            "top_m",
            "freq_cap",
            "batch_min",
            "rate_limit_per_day",
            "k_anon",
            "num_publishers",
        ):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("ad_requests_per_user_day", "bucket_width", "reserve_micros"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name, lo, hi in (
            ("alpha", 0.0, 1.0),
            ("coeff_rate", 0.0, 1.0),
            ("sensitive_rate", 0.0, 1.0),
            ("page_quality_spread", 0.0, 0.9),
        ):
            if not lo <= getattr(self, name) <= hi:
                problems.append(f"{name} must be within [{lo}, {hi}]")
        if self.jitter_max < 0:
            problems.append("jitter_max must be >= 0")
        if self.click_scale < 0:
            problems.append("click_scale must be >= 0")
        lo, hi = self.ctr_range
        if not 0 < lo <= hi <= 1:
            problems.append("ctr_range must satisfy 0 < lo <= hi <= 1")
        lo, hi = self.cpc_range
        if not 1 <= lo <= hi:
            problems.append("cpc_range must satisfy 1 <= lo <= hi")
        if self.mirrored_catalogs and self.num_advertisers % self.num_retargeters:
            problems.append(
                "mirrored_catalogs requires num_advertisers divisible by "
                "num_retargeters"
            )
        return problems

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = {
            k: tuple(v) if k in ("ctr_range", "cpc_range") else v
            for k, v in data.items()
        }
        return cls(**data)

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
