"""Retargeter-side logic.

Owns the clear product feed and the master secret used to encrypt it,
answers bid requests by decrypting re-keyed scores (never seeing the user
profile), adjusts for CPC drift and page quality in log domain, prices at a
fixed revenue share, and produces AEAD-sealed ad creatives served later via
the exchange proxy. Bid handling is stateless apart from the feed snapshot,
the creative cache, and report tallies.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import logging
import random
from urllib.parse import urlparse

from .catalog import (
    DEFAULT_SCHEMA,
    LOG_BOUND,
    MICRO,
    AttributeSchema,
    ProductProfileClear,
    ProductProfileEnc,
    ProfileError,
    build_product_profile_clear,
    decode_log,
    encode_log,
    encode_log_ratio,
    encrypt_product_profile,
)
from .hcrypt import (
    CONTEXT_AD_CONTENT,
    CONTEXT_PRODUCT_PAYLOAD,
    MasterSecret,
    OpenError,
    aead_open,
    aead_seal,
    bidkey_label,
    ct_from_b64,
    dec,
    derive_keystream,
    generate_keypair,
    open_session_key,
    pis_label,
)

log = logging.getLogger(__name__)

REPORT_FIELDS = {"report_id", "creative_id", "event", "ts"}
REPORT_EVENTS = {"impression", "click"}


class RetargeterError(Exception):
    pass


class Retargeter:
    def __init__(
        self,
        id_R: str,
        *,
        master: MasterSecret | None = None,
        keypair: tuple[bytes, bytes] | None = None,
        schema: AttributeSchema = DEFAULT_SCHEMA,
        alpha: float = 0.8,
        reserve_micros: int = 0,
        ranking_url: str = "",
        ad_base: str = "",
        rng=None,
    ):
        self.id_R = id_R
        self.master = master or MasterSecret.generate()
        self._private_key, self.public_key = keypair or generate_keypair()
        self.schema = schema
        self.alpha = alpha
        self.reserve_micros = reserve_micros
        self.ranking_url = ranking_url or f"inproc://{id_R}/rank"
        self.ad_base = ad_base or f"inproc://{id_R}"
        self._rng = rng or random.Random()
        self.feed: dict[str, ProductProfileClear] = {}
        self.page_quality: dict[str, int] = {}  # netloc -> micros multiplier
        self._creatives: dict[str, dict] = {}  # creative_id -> {ad_ct, id_P}
        self.impressions: dict[str, int] = {}
        self.clicks: dict[str, int] = {}
        self.click_reports: dict[str, list[str]] = {}
        self.billed_micros = 0
        self.wins = 0
        self.paid_micros = 0
        self.no_bids = 0

    # --------------------------------------------------------------- feed

    def add_product(self, clear: ProductProfileClear) -> None:
        if clear.id_R != self.id_R:
            raise RetargeterError(f"profile {clear.id_P!r} belongs to {clear.id_R!r}")
        self.feed[clear.id_P] = dataclasses.replace(
            clear, ranking_url=self.ranking_url
        )

    def update_cpc(self, id_P: str, cpc_micros: int) -> None:
        self._reprice(id_P, cpc_micros=cpc_micros)

    def update_ctr(self, id_P: str, ctr_default: float) -> None:
        self._reprice(id_P, ctr_default=ctr_default)

    def _reprice(self, id_P: str, **changes) -> None:
        try:
            p = self.feed[id_P]
        except KeyError:
            raise RetargeterError(f"unknown product {id_P!r}") from None
        ctr = changes.get("ctr_default", p.ctr_default)
        cpc = changes.get("cpc_micros", p.cpc_micros)
        pis = round(ctr * cpc)
        if pis < 1:
            raise ProfileError(f"update would zero PIS for {id_P!r}")
        self.feed[id_P] = dataclasses.replace(
            p, pis_micros=pis, **changes
        )

    def publish_feed(self) -> list[ProductProfileEnc]:
        return [
            encrypt_product_profile(self.feed[id_P], self.master)
            for id_P in sorted(self.feed)
        ]

    # ---------------------------------------------------------------- bids

    def _page_quality_micros(self, page_url: str) -> int:
        host = urlparse(page_url).netloc or page_url
        return self.page_quality.get(host, MICRO)

    def handle_bid_request(self, bid_req: dict) -> dict | None:
        """Score the sealed candidates and bid on the best, or no-bid (None)."""
        try:
            session_key = open_session_key(
                base64.b64decode(bid_req["skey"]), self._private_key
            )
            payload = aead_open(
                base64.b64decode(bid_req["payload"]),
                session_key,
                CONTEXT_PRODUCT_PAYLOAD,
            )
            entries = json.loads(payload)
        except (OpenError, KeyError, ValueError) as exc:
            log.debug("%s: unusable bid request: %s", self.id_R, exc)
            self.no_bids += 1
            return None
        quality_v = encode_log_ratio(self._page_quality_micros(bid_req.get("page", "")))
        candidates: list[tuple[int, str]] = []
        for entry in entries:
            id_P = entry.get("id_P")
            current = self.feed.get(id_P)
            if current is None:
                continue  # delisted product
            v = dec(
                ct_from_b64(entry["score"]),
                derive_keystream(self.master, bidkey_label(id_P)),
            )
            conveyed_pis = dec(
                ct_from_b64(entry["pis"]),
                derive_keystream(self.master, pis_label(id_P)),
            )
            if abs(v) >= LOG_BOUND or abs(conveyed_pis) >= LOG_BOUND:
                continue  # not ours / corrupted
            drift = encode_log(current.pis_micros) - conveyed_pis
            candidates.append((v + drift + quality_v, id_P))
        if not candidates:
            self.no_bids += 1
            return None
        candidates.sort(key=lambda t: (-t[0], t[1]))
        best_v, best_id = candidates[0]
        revenue = decode_log(best_v)
        if revenue < self.reserve_micros:
            self.no_bids += 1
            return None
        creative_id = f"{self.id_R}-{self._rng.getrandbits(64):016x}"
        ad = {
            "id_P": best_id,
            "creative_id": creative_id,
            "title": f"ad:{best_id}",
            "landing": f"https://shop.example/{best_id}",
        }
        ad_ct = aead_seal(
            json.dumps(ad, separators=(",", ":")).encode(),
            session_key,
            CONTEXT_AD_CONTENT,
        )
        self._creatives[creative_id] = {"ad_ct": ad_ct, "id_P": best_id}
        return {
            "rid": bid_req["rid"],
            "bid": round(self.alpha * revenue),
            "creative": {
                "ad_url": f"{self.ad_base}/ad/{creative_id}",
                "ad_ct": base64.b64encode(ad_ct).decode(),
            },
        }

    # ----------------------------------------------------------- ad serving

    def serve_ad(self, creative_id: str) -> bytes:
        try:
            return self._creatives[creative_id]["ad_ct"]
        except KeyError:
            raise RetargeterError(f"unknown creative {creative_id!r}") from None

    def notify_win(self, creative_id: str, clearing_price_micros: int) -> None:
        self.wins += 1
        self.paid_micros += clearing_price_micros

    # -------------------------------------------------------------- reports

    def receive_report(self, report: dict) -> None:
        """Accept an anonymized impression/click report; tally per product.

        Anything resembling user identification (extra fields such as an IP
        address or browser info) fails schema validation outright.
        """
        extra = set(report) - REPORT_FIELDS
        if extra:
            raise RetargeterError(f"report carries disallowed fields: {sorted(extra)}")
        if report.get("event") not in REPORT_EVENTS:
            raise RetargeterError(f"unknown event {report.get('event')!r}")
        creative = self._creatives.get(report.get("creative_id"))
        if creative is None:
            return
        id_P = creative["id_P"]
        if report["event"] == "impression":
            self.impressions[id_P] = self.impressions.get(id_P, 0) + 1
        else:
            self.clicks[id_P] = self.clicks.get(id_P, 0) + 1
            self.billed_micros += self.feed[id_P].cpc_micros if id_P in self.feed else 0
            self.click_reports.setdefault(id_P, []).append(report["report_id"])

    def observed_ctr(self, id_P: str) -> float | None:
        shown = self.impressions.get(id_P, 0)
        if not shown:
            return None
        return self.clicks.get(id_P, 0) / shown


# ------------------------------------------------------------- feed config


def parse_feed_config(text: str, schema: AttributeSchema = DEFAULT_SCHEMA) -> tuple[str, list[ProductProfileClear]]:
    """Parse the feed config document: {"id_R": ..., "products": [...]}.

    Each product gives id_P, ctr, cpc_micros, optional factors (keyed by
    attribute name) and coefficients [{i, j, table}].
    """
    try:
        doc = json.loads(text)
        id_R = doc["id_R"]
        products = doc["products"]
    except (ValueError, TypeError, KeyError) as exc:
        raise ProfileError(f"bad feed config: {exc}") from exc
    out = []
    for item in products:
        factors = {
            schema.index_of(name): values
            for name, values in item.get("factors", {}).items()
        }
        coefficients = {
            (c["i"], c["j"]): c["table"] for c in item.get("coefficients", [])
        }
        out.append(
            build_product_profile_clear(
                item["id_P"],
                id_R,
                item["ctr"],
                item["cpc_micros"],
                factors=factors,
                coefficients=coefficients,
                schema=schema,
            )
        )
    return id_R, out
