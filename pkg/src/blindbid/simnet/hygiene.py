"""Wire-hygiene and taint instrumentation.

The privacy claims are enforced as runtime assertions over everything that
crosses a trust boundary during a scenario run:

* ad requests carry exactly the whitelisted fields, no plaintext product
  marker, no client id/address, and no value (rid, sealed key, payload blob)
  that ever repeats across requests;
* a client's ranking requests never mention products that client flagged
  sensitive (sensitivity is per user — another user may advertise the same
  product freely);
* every retargeter-side event is tagged (saw-client-address,
  saw-product-data) and the pair must never be (True, True);
* exchange state never contains a plaintext product marker.

Product ids minted by the simulator embed the marker ``prd:`` — a substring
that cannot occur inside base64 blobs (no ``:`` in the alphabet), so a scan
hit is always a real leak.
"""

from __future__ import annotations

import json

PRODUCT_MARKER = "prd:"
AD_REQUEST_FIELDS = {"rid", "page", "entries"}
AD_ENTRY_FIELDS = {"id_R", "skey", "payload"}
RANKING_FIELDS = {"channel", "U", "entries"}
RANKING_ENTRY_FIELDS = {"id_P", "score", "pairs"}
FORWARDED_REPORT_FIELDS = {"report_id", "creative_id", "event", "ts"}
MAX_DETAILS = 50


class HygieneMonitor:
    def __init__(self, client_ids=(), client_addrs=()):
        self.client_ids = list(client_ids)
        self.client_addrs = list(client_addrs)
        self.sensitive_pairs: set[tuple[str, str]] = set()  # (client_id, id_P)
        self.violations: list[str] = []
        self.ad_requests_checked = 0
        self.ranking_requests_checked = 0
        self.retargeter_events = 0
        self._seen_rids: set[str] = set()
        self._seen_blobs: set[str] = set()

    @property
    def violation_count(self) -> int:
        return len(self.violations)

    def _flag(self, message: str) -> None:
        if len(self.violations) < MAX_DETAILS:
            self.violations.append(message)
        else:
            self.violations.append("...")  # keep the count honest, drop detail

    def mark_sensitive(self, client_id: str, id_P: str) -> None:
        self.sensitive_pairs.add((client_id, id_P))

    # ------------------------------------------------------------ client →

    def observe_ad_request(self, req: dict, client_id: str, client_addr: str) -> None:
        self.ad_requests_checked += 1
        where = f"ad request {req.get('rid', '?')!r}"
        if set(req) != AD_REQUEST_FIELDS:
            self._flag(f"{where}: fields {sorted(req)} != {sorted(AD_REQUEST_FIELDS)}")
        for entry in req.get("entries", ()):
            if set(entry) != AD_ENTRY_FIELDS:
                self._flag(f"{where}: entry fields {sorted(entry)}")
        wire = json.dumps(req)
        if PRODUCT_MARKER in wire:
            self._flag(f"{where}: plaintext product id on the wire")
        if client_id in wire or client_addr in wire:
            self._flag(f"{where}: client identifier on the wire")
        rid = req.get("rid", "")
        if rid in self._seen_rids:
            self._flag(f"{where}: request id reused")
        self._seen_rids.add(rid)
        for entry in req.get("entries", ()):
            for field in ("skey", "payload"):
                blob = entry.get(field, "")
                if blob in self._seen_blobs:
                    self._flag(f"{where}: {field} blob repeats an earlier request")
                self._seen_blobs.add(blob)

    def observe_ranking_request(self, req: dict, client_id: str) -> None:
        self.ranking_requests_checked += 1
        where = f"ranking request from {client_id}"
        if set(req) != RANKING_FIELDS:
            self._flag(f"{where}: fields {sorted(req)}")
        for entry in req.get("entries", ()):
            if not set(entry) <= RANKING_ENTRY_FIELDS:
                self._flag(f"{where}: entry fields {sorted(entry)}")
            if (client_id, entry.get("id_P")) in self.sensitive_pairs:
                self._flag(f"{where}: sensitive product left the device")

    # --------------------------------------------------------- retargeter →

    def observe_retargeter_event(
        self, id_R: str, kind: str, payload_text: str, has_product_data: bool
    ) -> None:
        """Tag one retargeter-visible event; address+product together is the
        co-observation the protocol exists to prevent."""
        self.retargeter_events += 1
        has_addr = any(addr in payload_text for addr in self.client_addrs)
        has_id = any(cid in payload_text for cid in self.client_ids)
        if (has_addr or has_id) and has_product_data:
            self._flag(f"{id_R}/{kind}: client address observed next to product data")
        elif has_addr or has_id:
            self._flag(f"{id_R}/{kind}: client identifier reached the retargeter")

    def observe_forwarded_report(self, report: dict) -> None:
        if set(report) != FORWARDED_REPORT_FIELDS:
            self._flag(f"forwarded report fields {sorted(report)}")

    # ------------------------------------------------------------ exchange

    def scan_exchange_state(self, exchange) -> None:
        """The exchange may hold blobs, prices, and its own identifiers —
        never a plaintext product id."""
        state = repr(
            (
                exchange.auction_log,
                exchange._issued,
                exchange._creative_owner,
                exchange._report_log,
            )
        )
        if PRODUCT_MARKER in state:
            self._flag("exchange state contains a plaintext product id")
