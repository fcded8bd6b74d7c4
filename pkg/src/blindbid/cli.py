"""Command-line entry points.

`simnet run` executes a scenario and writes the metrics document; `bench`
and `measure` print the throughput and message-size reports; `report`
renders a metrics file to CSV plus figures; `client` drives one on-device
agent end to end (feed -> ranking -> ad request -> auction -> delivered ad)
from a feed config file, which is handy when poking at policy knobs.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys

from .catalog import DEFAULT_SCHEMA
from .client_agent import ClientAgent, ClientConfig
from .exchange import Exchange, RetargeterLink
from .ranking_service import RankingService
from .retargeter import Retargeter, parse_feed_config
from .simnet.config import MODES, ScenarioConfig

log = logging.getLogger(__name__)


def _cmd_run(args) -> int:
    from .simnet.runner import run_scenario
    from .simnet.wire import run_wire_scenario

    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode:
        cfg.mode = args.mode
    problems = cfg.validate()
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    metrics = run_wire_scenario(cfg) if cfg.mode == "wire" else run_scenario(cfg)
    metrics.save(args.out)
    data = metrics.to_dict()
    if args.report_dir:
        from .simnet.report import render_report

        for path in render_report(data, args.report_dir):
            print(f"wrote {path}")
    print(f"wrote {args.out}")
    print(
        "auctions={auctions} filled={filled} impressions={impressions} "
        "clicks={clicks}".format(**data["counts"])
    )
    print(
        f"oracle agreement: {data['oracle']['agreement_rate']:.4f} "
        f"({data['oracle']['compared']} compared)"
    )
    violations = data["hygiene"]["violations"]
    print(f"hygiene violations: {violations}")
    return 0 if violations == 0 else 1


def _cmd_bench(args) -> int:
    from .simnet.bench import run_bench

    report = run_bench(min_seconds=args.seconds)
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    missed = [
        name
        for name, entry in report.items()
        if entry.get("floor_per_sec") and not entry.get("meets_floor")
    ]
    for name in missed:
        print(f"floor missed: {name}", file=sys.stderr)
    return 1 if missed else 0


def _cmd_measure(args) -> int:
    from .simnet.bench import full_scale_reference, measure_messages

    doc = {
        "message_sizes": measure_messages(),
        "full_scale_reference": full_scale_reference(),
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    over = [
        name
        for name, entry in doc["message_sizes"].items()
        if not entry["under_ceiling"]
    ]
    for name in over:
        print(f"ceiling exceeded: {name}", file=sys.stderr)
    return 1 if over else 0


def _cmd_report(args) -> int:
    from .simnet.report import render_report

    with open(args.metrics, encoding="utf-8") as fh:
        metrics = json.load(fh)
    for path in render_report(metrics, args.out_dir):
        print(f"wrote {path}")
    return 0


def _cmd_client(args) -> int:
    with open(args.feed, encoding="utf-8") as fh:
        id_R, clears = parse_feed_config(fh.read())
    rng = random.Random(args.seed)
    ret = Retargeter(id_R, rng=random.Random(args.seed + 1))
    for clear in clears:
        ret.add_product(clear)
    service = RankingService(ret.master, rng=random.Random(args.seed + 2))

    def ranker(url: str, req: dict) -> dict:
        return service.handle_rank(req)

    if args.user:
        user = tuple(int(x) for x in args.user.split(","))
    else:
        user = tuple(
            rng.randrange(a.cardinality) for a in DEFAULT_SCHEMA.attributes
        )
    client = ClientAgent(
        "usr:cli",
        user,
        {id_R: ret.public_key},
        ranker,
        config=ClientConfig(top_m=args.top_m, jitter_max=0.0),
        rng=random.Random(args.seed + 3),
    )
    for enc_profile in ret.publish_feed():
        client.record_product(enc_profile)
    ranked = client.request_ranking(id_R)

    exchange = Exchange(rng=random.Random(args.seed + 4))
    exchange.register(
        RetargeterLink(
            id_R=id_R,
            pubkey=ret.public_key,
            ad_base=ret.ad_base,
            bid=ret.handle_bid_request,
            fetch_ad=ret.serve_ad,
            report=ret.receive_report,
            notify_win=ret.notify_win,
        )
    )
    out = {
        "user": list(user),
        "retargeter": id_R,
        "products_stored": len(client.records),
        "products_ranked": ranked,
        "ranking": [
            rec.profile.id_P
            for rec in sorted(
                (r for r in client.records.values() if r.rank is not None),
                key=lambda r: r.rank,
            )
        ],
    }
    ad_req = client.build_ad_request(args.page)
    if ad_req is None:
        out["ad_request"] = None
    else:
        out["ad_request"] = {
            "rid": ad_req["rid"],
            "entries": len(ad_req["entries"]),
            "bytes": len(json.dumps(ad_req, separators=(",", ":")).encode()),
        }
        delivery = exchange.handle_ad_request(ad_req, "203.0.113.1")
        record = exchange.auction_log[-1]
        out["auction"] = {
            "bids": record.bids,
            "winner": record.winner,
            "clearing_price_micros": record.clearing_price,
        }
        if delivery is not None:
            import base64 as _b64

            blob = exchange.proxy_fetch_ad(delivery["proxy_url"])
            ad = client.open_delivery(
                {
                    "rid": delivery["rid"],
                    "id_R": delivery["id_R"],
                    "ad_ct": _b64.b64encode(blob).decode(),
                }
            )
            out["delivered_ad"] = ad
    print(json.dumps(out, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simnet",
        description="Deterministic simulator for the encrypted retargeting protocol.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write metrics")
    p.add_argument("--config", help="scenario config JSON (defaults to desk scale)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--mode", choices=MODES, default=None, help="override the mode")
    p.add_argument("--out", default="metrics.json", help="metrics output path")
    p.add_argument(
        "--report-dir", default=None, help="also render CSV and figures here"
    )
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("bench", help="measure operation throughput")
    p.add_argument(
        "--seconds", type=float, default=0.25, help="measurement time per op"
    )
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("measure", help="measure protocol message sizes")
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.set_defaults(fn=_cmd_measure)

    p = sub.add_parser("report", help="render a metrics file to CSV + figures")
    p.add_argument("--metrics", required=True, help="metrics JSON from `run`")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("client", help="drive one client agent from a feed config")
    p.add_argument("--feed", required=True, help="feed config JSON")
    p.add_argument("--user", default=None, help="comma-separated attribute values")
    p.add_argument("--page", default="https://pub00.example/s0")
    p.add_argument("--top-m", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_client)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
