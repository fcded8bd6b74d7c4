"""Exchange: auctions, proxying, report anonymization, trace-back."""

import base64

import pytest

from blindbid.exchange import Exchange, ExchangeError, RetargeterLink
from blindbid.hcrypt import OpenError, aead_open, CONTEXT_AD_CONTENT


class StubRetargeter:
    """Canned bidder: fixed bid and a one-creative ad store."""

    def __init__(self, id_R, bid_micros, ad_bytes=b"\x01" * 64):
        self.id_R = id_R
        self.bid_micros = bid_micros
        self.ad_bytes = ad_bytes
        self.bid_requests = []
        self.reports = []
        self.win_notices = []

    def link(self):
        return RetargeterLink(
            id_R=self.id_R,
            pubkey=b"\x00" * 32,
            ad_base=f"inproc://{self.id_R}",
            bid=self.bid,
            fetch_ad=self.fetch_ad,
            report=self.reports.append,
            notify_win=lambda cid, price: self.win_notices.append((cid, price)),
        )

    def bid(self, bid_req):
        self.bid_requests.append(bid_req)
        if self.bid_micros is None:
            return None
        return {
            "rid": bid_req["rid"],
            "bid": self.bid_micros,
            "creative": {
                "ad_url": f"inproc://{self.id_R}/ad/c-{self.id_R}",
                "ad_ct": base64.b64encode(self.ad_bytes).decode(),
            },
        }

    def fetch_ad(self, creative_id):
        assert creative_id == f"c-{self.id_R}"
        return self.ad_bytes


def make_exchange(bids, clock=lambda: 0.0, **kwargs):
    import random

    adx = Exchange(clock=clock, rng=random.Random(17), **kwargs)
    stubs = {}
    for id_R, bid in bids.items():
        stub = StubRetargeter(id_R, bid)
        stubs[id_R] = stub
        adx.register(stub.link())
    return adx, stubs


def ad_request(ids, rid="rid-42", page="https://pub.example/p"):
    return {
        "rid": rid,
        "page": page,
        "entries": [{"id_R": i, "skey": "c2tleQ==", "payload": "cGF5bG9hZA=="} for i in ids],
    }


class TestAuction:
    def test_second_price(self):
        adx, stubs = make_exchange({"R1": 7_128, "R2": 4_000, "R3": 1_000})
        delivery = adx.handle_ad_request(ad_request(["R1", "R2", "R3"]), "10.0.0.9")
        assert delivery["id_R"] == "R1"
        assert adx.auction_log[-1].clearing_price == 4_000
        assert stubs["R1"].win_notices == [("c-R1", 4_000)]

    def test_single_bid_clears_at_reserve(self):
        adx, _ = make_exchange({"R1": 7_128})
        adx.handle_ad_request(ad_request(["R1"]), "a")
        assert adx.auction_log[-1].clearing_price == 0

    def test_one_bid_request_per_entry(self):
        adx, stubs = make_exchange({"R1": 10, "R2": 20, "R3": 30})
        adx.handle_ad_request(ad_request(["R1", "R2", "R3"]), "a")
        assert all(len(s.bid_requests) == 1 for s in stubs.values())

    def test_zero_bids(self):
        adx, _ = make_exchange({"R1": None, "R2": None})
        assert adx.handle_ad_request(ad_request(["R1", "R2"]), "a") is None
        assert adx.no_fill == 1

    def test_tie_breaks_ascending_id(self):
        adx, _ = make_exchange({"R2": 5_000, "R1": 5_000})
        delivery = adx.handle_ad_request(ad_request(["R2", "R1"]), "a")
        assert delivery["id_R"] == "R1"
        assert adx.auction_log[-1].clearing_price == 5_000

    def test_failing_bidder_skipped(self):
        adx, stubs = make_exchange({"R1": 100})

        def boom(_):
            raise ConnectionError("down")

        adx.register(
            RetargeterLink(
                id_R="R2", pubkey=b"", ad_base="x", bid=boom,
                fetch_ad=lambda c: b"", report=lambda r: None,
            )
        )
        delivery = adx.handle_ad_request(ad_request(["R1", "R2"]), "a")
        assert delivery["id_R"] == "R1"

    def test_unknown_retargeter_entry_ignored(self):
        adx, _ = make_exchange({"R1": 100})
        delivery = adx.handle_ad_request(ad_request(["R1", "R9"]), "a")
        assert delivery["id_R"] == "R1"


class TestProxy:
    def test_relay_byte_identical(self):
        payload = bytes(range(256)) * 40  # 10 KB ad
        adx, stubs = make_exchange({"R1": 100})
        stubs["R1"].ad_bytes = payload
        delivery = adx.handle_ad_request(ad_request(["R1"]), "a")
        assert delivery["proxy_url"].startswith("inproc://adx/proxy?u=")
        assert adx.proxy_fetch_ad(delivery["proxy_url"]) == payload
        assert adx.proxy_bytes == len(payload) and adx.proxy_requests == 1

    def test_exchange_cannot_open_the_ad(self):
        adx, _ = make_exchange({"R1": 100})
        delivery = adx.handle_ad_request(ad_request(["R1"]), "a")
        blob = adx.proxy_fetch_ad(delivery["proxy_url"])
        with pytest.raises((OpenError, Exception)):
            aead_open(blob, b"\x00" * 32, CONTEXT_AD_CONTENT)

    def test_unissued_url_rejected(self):
        adx, _ = make_exchange({"R1": 100})
        with pytest.raises(ExchangeError):
            adx.proxy_fetch_ad("inproc://adx/proxy?u=inproc%3A%2F%2FR1%2Fad%2Fc-R1")

    def test_malformed_url_rejected(self):
        adx, _ = make_exchange({})
        with pytest.raises(ExchangeError):
            adx.proxy_fetch_ad("inproc://adx/proxy")

    def test_issued_url_expires(self):
        t = [0.0]
        adx, _ = make_exchange({"R1": 100}, clock=lambda: t[0])
        delivery = adx.handle_ad_request(ad_request(["R1"]), "a")
        t[0] = 86_400.0 * 2
        with pytest.raises(ExchangeError):
            adx.proxy_fetch_ad(delivery["proxy_url"])


class TestReports:
    def deliver(self, adx):
        return adx.handle_ad_request(ad_request(["R1"]), "10.0.0.9")

    def test_anonymization_strips_user_fields(self):
        adx, stubs = make_exchange({"R1": 100}, clock=lambda: 5_000.0)
        self.deliver(adx)
        raw = {
            "creative_id": "c-R1",
            "event": "click",
            "ts": 5_000.0,
            "ip": "10.0.0.9",
            "user_agent": "Mozilla/5.0",
        }
        forwarded = adx.handle_report(raw, "10.0.0.9")
        assert set(forwarded) == {"report_id", "creative_id", "event", "ts"}
        assert forwarded["ts"] == 3_600  # hour-coarse
        assert stubs["R1"].reports == [forwarded]

    def test_trace_back_within_ttl(self):
        adx, _ = make_exchange({"R1": 100})
        self.deliver(adx)
        f1 = adx.handle_report({"creative_id": "c-R1", "event": "click", "ts": 0}, "10.0.0.1")
        f2 = adx.handle_report({"creative_id": "c-R1", "event": "click", "ts": 0}, "10.0.0.2")
        traced = adx.trace_click_fraud([f1["report_id"], f2["report_id"], "rep-missing"])
        assert traced == [
            (f1["report_id"], "10.0.0.1"),
            (f2["report_id"], "10.0.0.2"),
        ]

    def test_trace_after_ttl_purge(self):
        t = [0.0]
        adx, _ = make_exchange({"R1": 100}, clock=lambda: t[0])
        self.deliver(adx)
        forwarded = adx.handle_report({"creative_id": "c-R1", "event": "click", "ts": 0}, "a")
        t[0] = 86_400.0 + 1
        assert adx.trace_click_fraud([forwarded["report_id"]]) == []

    def test_unknown_creative_dropped(self):
        adx, _ = make_exchange({"R1": 100})
        assert adx.handle_report({"creative_id": "ghost", "event": "click", "ts": 0}, "a") is None

    def test_empty_suspect_list(self):
        adx, _ = make_exchange({})
        assert adx.trace_click_fraud([]) == []

    def test_fresh_report_ids(self):
        adx, _ = make_exchange({"R1": 100})
        self.deliver(adx)
        ids = {
            adx.handle_report({"creative_id": "c-R1", "event": "click", "ts": 0}, "a")["report_id"]
            for _ in range(50)
        }
        assert len(ids) == 50
