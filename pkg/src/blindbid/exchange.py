"""Ad exchange.

Fans cookie-less ad requests out as one bid request per retargeter entry,
runs a second-price auction over the returned bids, rewrites the winning
creative's ad URL to point at its own proxy, relays encrypted ad bytes it
cannot read, and anonymizes impression/click reports while keeping a
TTL-bounded trace-back log for click-fraud investigation.

Everything the exchange retains is either an opaque blob, a price, or an
identifier it minted itself; product ids, scores, and ad contents only ever
transit sealed.
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass, field
from typing import Callable
from urllib.parse import parse_qs, quote, unquote, urlparse

log = logging.getLogger(__name__)

DAY = 86_400
RAW_REPORT_FIELDS = {"creative_id", "event", "ts"}


class ExchangeError(Exception):
    pass


@dataclass
class RetargeterLink:
    """How the exchange reaches one registered retargeter."""

    id_R: str
    pubkey: bytes
    ad_base: str
    bid: Callable[[dict], dict | None]
    fetch_ad: Callable[[str], bytes]
    report: Callable[[dict], None]
    notify_win: Callable[[str, int], None] | None = None


@dataclass
class ReportLogEntry:
    report_id: str
    client_addr: str
    creative_id: str
    ts: float
    ttl: float = DAY


@dataclass
class AuctionRecord:
    rid: str
    page: str
    bids: dict[str, int] = field(default_factory=dict)
    winner: str | None = None
    clearing_price: int = 0


class Exchange:
    def __init__(
        self,
        *,
        base_url: str = "inproc://adx",
        reserve_micros: int = 0,
        report_ttl: float = DAY,
        bid_timeout: float = 0.1,
        clock=None,
        rng=None,
    ):
        self.base_url = base_url
        self.reserve_micros = reserve_micros
        self.report_ttl = report_ttl
        self.bid_timeout = bid_timeout
        self._clock = clock or time.time
        self._rng = rng or random.Random()
        self._links: dict[str, RetargeterLink] = {}
        self._issued: dict[str, tuple[str, float]] = {}  # ad_url -> (id_R, ts)
        self._creative_owner: dict[str, str] = {}
        self._report_log: dict[str, ReportLogEntry] = {}
        self.auction_log: list[AuctionRecord] = []
        self.no_fill = 0
        self.proxy_requests = 0
        self.proxy_bytes = 0

    # ------------------------------------------------------------ registry

    def register(self, link: RetargeterLink) -> None:
        self._links[link.id_R] = link

    def registry_pubkeys(self) -> dict[str, bytes]:
        return {id_R: link.pubkey for id_R, link in self._links.items()}

    # ------------------------------------------------------------- auction

    def handle_ad_request(self, ad_req: dict, client_addr: str) -> dict | None:
        """Run the auction for one ad request; returns the client delivery."""
        del client_addr  # auctions keep no per-client state
        rid, page = ad_req["rid"], ad_req["page"]
        record = AuctionRecord(rid=rid, page=page)
        responses: dict[str, dict] = {}
        for entry in ad_req["entries"]:
            id_R = entry["id_R"]
            link = self._links.get(id_R)
            if link is None:
                continue
            bid_req = {
                "rid": rid,
                "page": page,
                "skey": entry["skey"],
                "payload": entry["payload"],
            }
            try:
                response = link.bid(bid_req)
            except Exception as exc:
                log.warning("bid request to %s failed: %s", id_R, exc)
                continue
            if response is None or response.get("bid", 0) < self.reserve_micros:
                continue
            record.bids[id_R] = response["bid"]
            responses[id_R] = response
        self.auction_log.append(record)
        if not record.bids:
            self.no_fill += 1
            return None
        order = sorted(record.bids.items(), key=lambda t: (-t[1], t[0]))
        winner = order[0][0]
        clearing = order[1][1] if len(order) > 1 else self.reserve_micros
        record.winner, record.clearing_price = winner, clearing
        creative = responses[winner]["creative"]
        ad_url = creative["ad_url"]
        creative_id = ad_url.rsplit("/", 1)[-1]
        now = self._clock()
        self._issued[ad_url] = (winner, now)
        self._creative_owner[creative_id] = winner
        win_link = self._links[winner]
        if win_link.notify_win is not None:
            win_link.notify_win(creative_id, clearing)
        return {
            "rid": rid,
            "id_R": winner,
            "proxy_url": f"{self.base_url}/proxy?u={quote(ad_url, safe='')}",
        }

    # --------------------------------------------------------------- proxy

    def proxy_fetch_ad(self, proxy_url: str) -> bytes:
        """Relay the encrypted ad for a proxy URL issued by an auction here."""
        self._purge(self._clock())
        query = parse_qs(urlparse(proxy_url).query)
        try:
            ad_url = unquote(query["u"][0])
        except (KeyError, IndexError):
            raise ExchangeError(f"malformed proxy url {proxy_url!r}") from None
        issued = self._issued.get(ad_url)
        if issued is None:
            raise ExchangeError("unknown or expired ad url")
        id_R, _ = issued
        creative_id = ad_url.rsplit("/", 1)[-1]
        blob = self._links[id_R].fetch_ad(creative_id)
        self.proxy_requests += 1
        self.proxy_bytes += len(blob)
        return blob

    # -------------------------------------------------------------- reports

    def handle_report(self, raw: dict, client_addr: str) -> dict | None:
        """Anonymize and forward a client report; keep the trace-back entry.

        The forwarded copy carries only a fresh report id, the creative id,
        the event type, and an hour-coarse timestamp — address and any
        browser details stop here.
        """
        creative_id = raw.get("creative_id")
        owner = self._creative_owner.get(creative_id)
        if owner is None:
            return None
        now = self._clock()
        report_id = f"rep-{self._rng.getrandbits(64):016x}"
        forwarded = {
            "report_id": report_id,
            "creative_id": creative_id,
            "event": raw.get("event"),
            "ts": int(now // 3600) * 3600,
        }
        self._report_log[report_id] = ReportLogEntry(
            report_id=report_id,
            client_addr=client_addr,
            creative_id=creative_id,
            ts=now,
            ttl=self.report_ttl,
        )
        self._links[owner].report(forwarded)
        return forwarded

    def trace_click_fraud(self, report_ids: list[str]) -> list[tuple[str, str]]:
        """Map suspect report ids back to client addresses, within TTL."""
        self._purge(self._clock())
        return [
            (rid, self._report_log[rid].client_addr)
            for rid in report_ids
            if rid in self._report_log
        ]

    def _purge(self, now: float) -> None:
        expired = [
            rid for rid, e in self._report_log.items() if now - e.ts > e.ttl
        ]
        for rid in expired:
            del self._report_log[rid]
        stale = [u for u, (_, ts) in self._issued.items() if now - ts > self.report_ttl]
        for u in stale:
            del self._issued[u]
