"""Scenario runner.

Builds the multi-party world (retargeters with ranking services, the
exchange, client agents), executes one deterministic event timeline on a
virtual clock, runs the plaintext oracle in parallel, and folds everything
into RunMetrics.

Identifier scheme: product ids embed ``prd:`` and client ids ``usr:`` —
both contain ``:``, which cannot occur in base64 or hex, so the hygiene
monitor's substring scans have no false positives.
"""

from __future__ import annotations

import base64
import json
import random
import time
from dataclasses import dataclass, field
from urllib.parse import urlparse

from ..catalog import (
    DEFAULT_SCHEMA,
    MICRO,
    build_product_profile_clear,
    serialize_profile,
)
from ..client_agent import ClientAgent, ClientConfig, ClientError, RankingUnavailable
from ..exchange import Exchange, RetargeterLink
from ..hcrypt import MasterSecret
from ..ranking_service import RankingPolicy, RankingService
from ..retargeter import Retargeter
from . import oracle
from .config import ScenarioConfig
from .hygiene import HygieneMonitor

HOUR = 3_600
DAY = 86_400

# attributes eligible for coefficient tables (kept small; the locality
# attribute would make tables and profiles hundreds of KB)
_COEFF_MAX_CARDINALITY = 24


class VirtualClock:
    """Discrete virtual time; sleeping advances it instantly."""

    def __init__(self, start: float = 0.0):
        self.t = float(start)

    def now(self) -> float:
        return self.t

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self.t += seconds

    def advance_to(self, t: float) -> None:
        if t > self.t:
            self.t = t


@dataclass
class SizeStats:
    count: int = 0
    total: int = 0
    min: int = 0
    max: int = 0

    def add(self, n: int) -> None:
        if self.count == 0:
            self.min = self.max = n
        else:
            self.min = min(self.min, n)
            self.max = max(self.max, n)
        self.count += 1
        self.total += n

    def to_dict(self) -> dict:
        mean = round(self.total / self.count, 1) if self.count else 0.0
        return {"count": self.count, "min": self.min, "mean": mean, "max": self.max}


@dataclass
class RunMetrics:
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return self.data

    def deterministic_dict(self) -> dict:
        """Everything except wall-clock timing — must be identical for
        identical (config, seed) in in-process mode."""
        return {k: v for k, v in self.data.items() if k != "timing"}

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


class World:
    """All parties plus the plaintext mirror the oracle needs."""

    def __init__(self, cfg: ScenarioConfig, monitor: HygieneMonitor | None = None):
        problems = cfg.validate()
        if problems:
            raise ValueError("; ".join(problems))
        self.cfg = cfg
        self.schema = DEFAULT_SCHEMA
        self.clock = VirtualClock()
        self.ranking_sizes = SizeStats()
        self._current_page = ""
        rng_world = random.Random(f"{cfg.seed}:world")
        self.rng_events = random.Random(f"{cfg.seed}:events")

        self.client_ids = [f"usr:{n:03d}" for n in range(cfg.num_users)]
        self.client_addrs = {
            cid: f"10.0.{n // 250}.{n % 250 + 1}" for n, cid in enumerate(self.client_ids)
        }
        self.monitor = monitor or HygieneMonitor(
            client_ids=self.client_ids, client_addrs=list(self.client_addrs.values())
        )

        self.retargeters: dict[str, Retargeter] = {}
        self.services: dict[str, RankingService] = {}
        policy = RankingPolicy(
            bucket_width=cfg.bucket_width,
            rate_limit_per_day=cfg.rate_limit_per_day,
            k_anon=cfg.k_anon,
            randomize=cfg.randomize,
        )
        for r in range(cfg.num_retargeters):
            id_R = f"R{r:02d}"
            ret = Retargeter(
                id_R,
                master=MasterSecret.generate(),
                schema=self.schema,
                alpha=cfg.alpha,
                reserve_micros=cfg.reserve_micros,
                rng=random.Random(f"{cfg.seed}:ret:{id_R}"),
            )
            self.retargeters[id_R] = ret
            self.services[id_R] = RankingService(
                ret.master,
                policy=policy,
                schema=self.schema,
                clock=self.clock.now,
                rng=random.Random(f"{cfg.seed}:rank:{id_R}"),
            )

        self.publishers = [f"pub{n:02d}.example" for n in range(cfg.num_publishers)]
        if cfg.page_quality_spread > 0:
            s = cfg.page_quality_spread
            for ret in self.retargeters.values():
                for host in self.publishers:
                    ret.page_quality[host] = rng_world.randrange(
                        round(MICRO * (1 - s)), round(MICRO * (1 + s)) + 1
                    )

        self.clears = {}
        self.enc_profiles = {}
        self._build_products(rng_world)

        self.users = {
            cid: tuple(
                rng_world.randrange(a.cardinality) for a in self.schema.attributes
            )
            for cid in self.client_ids
        }

        self.exchange = Exchange(
            clock=self.clock.now, rng=random.Random(f"{cfg.seed}:adx")
        )
        for id_R, ret in self.retargeters.items():
            self.exchange.register(self._link(ret))
        # the runner talks to the exchange through this handle; wire mode
        # swaps in an HTTP-backed facade with the same three methods
        self.exchange_api = self.exchange

        self.clients = {
            cid: self._make_client(cid)
            for cid in self.client_ids
        }

    # ------------------------------------------------------------- build

    def _build_products(self, rng) -> None:
        cfg = self.cfg
        schema = self.schema
        small_attrs = [
            i
            for i, a in enumerate(schema.attributes)
            if a.cardinality <= _COEFF_MAX_CARDINALITY
        ]

        def draw_values() -> dict:
            values = {
                "ctr": rng.uniform(*cfg.ctr_range),
                "cpc": rng.randrange(cfg.cpc_range[0], cfg.cpc_range[1] + 1),
                "factors": {
                    i: [
                        rng.randrange(700_000, 1_400_001)
                        for _ in range(attr.cardinality)
                    ]
                    for i, attr in enumerate(schema.attributes)
                },
                "coefficients": {},
            }
            if rng.random() < cfg.coeff_rate:
                i, j = sorted(rng.sample(small_attrs, 2))
                values["coefficients"][(i, j)] = [
                    [
                        rng.randrange(850_000, 1_200_001)
                        for _ in range(schema.cardinality(j))
                    ]
                    for _ in range(schema.cardinality(i))
                ]
            return values

        mirrored: dict[tuple[int, int], dict] = {}
        for a in range(cfg.num_advertisers):
            id_R = f"R{a % cfg.num_retargeters:02d}"
            for p in range(cfg.products_per_advertiser):
                if cfg.mirrored_catalogs:
                    key = (a // cfg.num_retargeters, p)
                    values = mirrored.get(key)
                    if values is None:
                        values = mirrored[key] = draw_values()
                else:
                    values = draw_values()
                clear = build_product_profile_clear(
                    f"prd:{a:02d}:{p:03d}",
                    id_R,
                    values["ctr"],
                    values["cpc"],
                    factors=values["factors"],
                    coefficients=values["coefficients"],
                    schema=schema,
                )
                self.retargeters[id_R].add_product(clear)
        for id_R, ret in self.retargeters.items():
            for enc in ret.publish_feed():
                self.clears[enc.id_P] = ret.feed[enc.id_P]
                self.enc_profiles[enc.id_P] = enc

    def _link(self, ret: Retargeter) -> RetargeterLink:
        monitor = self.monitor

        def bid(bid_req: dict) -> dict | None:
            monitor.observe_retargeter_event(
                ret.id_R, "bid", json.dumps(bid_req), has_product_data=True
            )
            return ret.handle_bid_request(bid_req)

        def report(forwarded: dict) -> None:
            monitor.observe_forwarded_report(forwarded)
            monitor.observe_retargeter_event(
                ret.id_R, "report", json.dumps(forwarded), has_product_data=True
            )
            ret.receive_report(forwarded)

        def fetch_ad(creative_id: str) -> bytes:
            monitor.observe_retargeter_event(
                ret.id_R, "adfetch", creative_id, has_product_data=True
            )
            return ret.serve_ad(creative_id)

        return RetargeterLink(
            id_R=ret.id_R,
            pubkey=ret.public_key,
            ad_base=ret.ad_base,
            bid=bid,
            fetch_ad=fetch_ad,
            report=report,
            notify_win=ret.notify_win,
        )

    def _make_client(self, cid: str) -> ClientAgent:
        monitor = self.monitor
        services = self.services
        sizes = self.ranking_sizes

        def ranker(url: str, req: dict) -> dict:
            sizes.add(len(json.dumps(req, separators=(",", ":")).encode()))
            monitor.observe_ranking_request(req, cid)
            id_R = urlparse(url).netloc
            return services[id_R].handle_rank(req)

        return ClientAgent(
            cid,
            self.users[cid],
            self.exchange.registry_pubkeys(),
            ranker,
            config=ClientConfig(
                store_cap=self.cfg.store_cap,
                top_m=self.cfg.top_m,
                freq_cap=self.cfg.freq_cap,
                jitter_max=self.cfg.jitter_max,
                batch_min=self.cfg.batch_min,
            ),
            schema=self.schema,
            rng=random.Random(f"{self.cfg.seed}:client:{cid}"),
            clock=self.clock,
        )

    # ------------------------------------------------------------- oracle

    def predict_auction(self, cid: str) -> tuple[str, int, str] | None:
        """Plaintext mirror of select→bid→auction for this client right now."""
        client = self.clients[cid]
        cfg = self.cfg
        bids: dict[str, int] = {}
        best_products: dict[str, str] = {}
        for id_R, ret in self.retargeters.items():
            eligible = [
                rec
                for rec in client.records.values()
                if rec.profile.id_R == id_R
                and rec.rank is not None
                and rec.bid_score_ct is not None
                and not rec.sensitive
                and rec.impressions_today < cfg.freq_cap
            ]
            if not eligible:
                continue
            clears = [self.clears[rec.profile.id_P] for rec in eligible]
            top_ids = oracle.top_m(clears, client.user_profile, cfg.bucket_width, cfg.top_m)
            by_id = {c.id_P: c for c in clears}
            result = oracle.expected_bid(
                [by_id[i] for i in top_ids],
                client.user_profile,
                cfg.bucket_width,
                cfg.alpha,
                quality_micros=ret._page_quality_micros(self._current_page),
                reserve_micros=cfg.reserve_micros,
            )
            if result is not None:
                best_products[id_R], bids[id_R] = result
        outcome = oracle.auction_outcome(bids, self.exchange.reserve_micros)
        if outcome is None:
            return None
        winner, price = outcome
        return winner, price, best_products[winner]


def run_scenario(cfg: ScenarioConfig, world: World | None = None) -> RunMetrics:
    started = time.perf_counter()
    world = world or World(cfg)
    clock, monitor, rng = world.clock, world.monitor, world.rng_events
    counters = {
        "visits": 0,
        "ad_requests": 0,
        "empty_requests": 0,
        "auctions": 0,
        "filled": 0,
        "impressions": 0,
        "clicks": 0,
        "ranking_requests": 0,
        "rate_limited": 0,
        "sensitive_marked": 0,
    }
    agreement = {
        "compared": 0,
        "winner_matches": 0,
        "price_matches": 0,
        "product_matches": 0,
        "empty_matches": 0,
        "mismatches": [],
    }
    clearing_sum = 0
    adreq_sizes = SizeStats()
    impressions_ledger: dict[tuple[str, str, int], int] = {}
    clicks_ledger: dict[tuple[str, str], int] = {}

    product_ids = sorted(world.clears)

    def do_rankings(client: ClientAgent, force: bool = False) -> None:
        for id_R in client.retargeters_needing_ranking(force=force):
            counters["ranking_requests"] += 1
            try:
                client.request_ranking(id_R)
            except RankingUnavailable:
                counters["rate_limited"] += 1
            except ClientError:
                pass

    for day in range(cfg.days):
        day_start = day * DAY
        clock.advance_to(day_start)
        if day > 0:
            for client in world.clients.values():
                client.reset_daily_counters()
        events: list[tuple[float, int, str, str]] = []
        seq = 0
        for cid in world.client_ids:
            for _ in range(cfg.visits_per_user_day):
                events.append((day_start + rng.uniform(0, DAY), seq, "visit", cid))
                seq += 1
            for _ in range(cfg.ad_requests_per_user_day):
                events.append((day_start + rng.uniform(0, DAY), seq, "adreq", cid))
                seq += 1
        for h in range(1, 25):
            events.append((day_start + h * HOUR, -1, "flush", ""))
        events.sort()

        for when, _, kind, cid in events:
            clock.advance_to(when)
            if kind == "flush":
                for client in world.clients.values():
                    do_rankings(client, force=True)
                continue
            client = world.clients[cid]
            if kind == "visit":
                counters["visits"] += 1
                id_P = product_ids[rng.randrange(len(product_ids))]
                client.record_product(world.enc_profiles[id_P])
                if rng.random() < cfg.sensitive_rate:
                    client.set_sensitive(id_P)
                    monitor.mark_sensitive(cid, id_P)
                    counters["sensitive_marked"] += 1
                do_rankings(client)
                continue
            # ad request on a publisher page
            counters["ad_requests"] += 1
            page = (
                f"https://{world.publishers[rng.randrange(len(world.publishers))]}"
                f"/s{rng.randrange(50)}"
            )
            world._current_page = page
            expected = world.predict_auction(cid)
            req = client.build_ad_request(page)
            if req is None:
                counters["empty_requests"] += 1
                if expected is None:
                    agreement["empty_matches"] += 1
                else:
                    agreement["mismatches"].append(
                        {"rid": None, "expected": list(expected), "got": "no request"}
                    )
                continue
            addr = world.client_addrs[cid]
            monitor.observe_ad_request(req, cid, addr)
            adreq_sizes.add(len(json.dumps(req, separators=(",", ":")).encode()))
            counters["auctions"] += 1
            delivery = world.exchange_api.handle_ad_request(req, addr)
            record = world.exchange.auction_log[-1]
            agreement["compared"] += 1
            if delivery is None:
                if expected is None:
                    agreement["winner_matches"] += 1
                    agreement["price_matches"] += 1
                    agreement["product_matches"] += 1
                else:
                    agreement["mismatches"].append(
                        {"rid": req["rid"], "expected": list(expected), "got": "no fill"}
                    )
                continue
            counters["filled"] += 1
            clearing_sum += record.clearing_price
            ad_bytes = world.exchange_api.proxy_fetch_ad(delivery["proxy_url"])
            ad = client.open_delivery(
                {
                    "rid": delivery["rid"],
                    "id_R": delivery["id_R"],
                    "ad_ct": base64.b64encode(ad_bytes).decode(),
                }
            )
            counters["impressions"] += 1
            key = (cid, ad["id_P"], day)
            impressions_ledger[key] = impressions_ledger.get(key, 0) + 1
            if expected is None:
                agreement["mismatches"].append(
                    {"rid": req["rid"], "expected": "no fill", "got": [delivery["id_R"], record.clearing_price, ad["id_P"]]}
                )
            else:
                e_winner, e_price, e_product = expected
                agreement["winner_matches"] += e_winner == delivery["id_R"]
                agreement["price_matches"] += e_price == record.clearing_price
                agreement["product_matches"] += e_product == ad["id_P"]
                if (e_winner, e_price, e_product) != (
                    delivery["id_R"],
                    record.clearing_price,
                    ad["id_P"],
                ):
                    if len(agreement["mismatches"]) < 10:
                        agreement["mismatches"].append(
                            {
                                "rid": req["rid"],
                                "expected": [e_winner, e_price, e_product],
                                "got": [delivery["id_R"], record.clearing_price, ad["id_P"]],
                            }
                        )
            world.exchange_api.handle_report(
                {"creative_id": ad["creative_id"], "event": "impression", "ts": clock.now()},
                addr,
            )
            p_click = min(
                1.0,
                oracle.click_probability(world.clears[ad["id_P"]], client.user_profile)
                * cfg.click_scale,
            )
            if rng.random() < p_click:
                counters["clicks"] += 1
                clicks_ledger[key[:2]] = clicks_ledger.get(key[:2], 0) + 1
                world.exchange_api.handle_report(
                    {"creative_id": ad["creative_id"], "event": "click", "ts": clock.now()},
                    addr,
                )
        clock.advance_to(day_start + DAY)

    monitor.scan_exchange_state(world.exchange)

    # end-of-run k-anonymous statistics over observed per-user CTRs
    shown_total: dict[tuple[str, str], int] = {}
    for (cid, id_P, _day), shown in impressions_ledger.items():
        shown_total[(cid, id_P)] = shown_total.get((cid, id_P), 0) + shown
    per_user_ctr: dict[str, dict[str, float]] = {}
    for (cid, id_P), shown in shown_total.items():
        per_user_ctr.setdefault(cid, {})[id_P] = (
            clicks_ledger.get((cid, id_P), 0) / shown
        )
    stats_cells = 0
    if per_user_ctr:
        batch = [
            (world.users[cid], per_user_ctr[cid]) for cid in sorted(per_user_ctr)
        ]
        first = next(iter(world.services.values()))
        stats_cells = len(first.aggregate_statistics(batch)["cells"])

    wins = {id_R: ret.wins for id_R, ret in world.retargeters.items()}
    filled = counters["filled"]
    profile_sizes = SizeStats()
    for enc in world.enc_profiles.values():
        profile_sizes.add(len(serialize_profile(enc).encode()))
    fc_max = max(impressions_ledger.values(), default=0)
    fc_total = max(shown_total.values(), default=0)
    wall = time.perf_counter() - started
    events_total = counters["visits"] + counters["ad_requests"]

    metrics = RunMetrics(
        {
            "config": cfg.to_dict(),
            "counts": {**counters, "no_fill": world.exchange.no_fill},
            "wins": wins,
            "win_rates": {
                id_R: round(n / filled, 4) if filled else 0.0 for id_R, n in wins.items()
            },
            "mean_clearing_price_micros": round(clearing_sum / filled, 1) if filled else 0.0,
            "oracle": {
                **{k: v for k, v in agreement.items() if k != "mismatches"},
                "mismatches": agreement["mismatches"][:10],
                "agreement_rate": (
                    min(
                        agreement["winner_matches"],
                        agreement["price_matches"],
                        agreement["product_matches"],
                    )
                    / agreement["compared"]
                    if agreement["compared"]
                    else 1.0
                ),
            },
            "hygiene": {
                "violations": monitor.violation_count,
                "details": monitor.violations[:10],
                "ad_requests_checked": monitor.ad_requests_checked,
                "ranking_requests_checked": monitor.ranking_requests_checked,
                "retargeter_events": monitor.retargeter_events,
            },
            "frequency": {
                "cap": cfg.freq_cap,
                "max_impressions_per_user_product_day": fc_max,
                # across days; exceeds the cap only because counters reset
                "max_impressions_per_user_product_total": fc_total,
            },
            "rankings": {
                "requests": counters["ranking_requests"],
                "rate_limited": counters["rate_limited"],
                "dropped_entries": sum(s.dropped_total for s in world.services.values()),
            },
            "messages": {
                "profile_bytes": profile_sizes.to_dict(),
                "ad_request_bytes": adreq_sizes.to_dict(),
                "ranking_request_bytes": world.ranking_sizes.to_dict(),
            },
            "proxy": {
                "requests": world.exchange.proxy_requests,
                "bytes": world.exchange.proxy_bytes,
            },
            "stats_cells": stats_cells,
            "evictions": sum(c.evictions for c in world.clients.values()),
            "virtual_seconds": clock.now(),
            "timing": {
                "wall_seconds": round(wall, 3),
                "events": events_total,
                "events_per_sec": round(events_total / wall, 1) if wall else 0.0,
            },
        }
    )
    return metrics
