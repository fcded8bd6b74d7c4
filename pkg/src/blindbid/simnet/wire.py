"""Wire mode: every party behind a real localhost HTTP server.

The same World runs, but bid requests, ad fetches, reports, ranking calls,
and the exchange front door all cross real sockets as JSON (or raw bytes for
ad blobs). The event loop stays single-threaded, so requests serialize and
metrics still come out reproducible; timestamps ride on the shared virtual
clock.

Because every connection originates from 127.0.0.1 here, the simulated
client address travels in the ``X-Sim-Client`` header and the exchange
front door reads it from there; a production deployment would use the
connection's source address instead.

Routes
  exchange    POST /adreq, GET /proxy?u=..., POST /report, POST /trace
  retargeter  POST /bid, GET /ad/<creative_id>, POST /report
  ranking     POST /rank, POST /stats
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlparse

from ..exchange import ExchangeError, RetargeterLink
from ..retargeter import RetargeterError
from .config import ScenarioConfig
from .runner import RunMetrics, World, run_scenario

log = logging.getLogger(__name__)

CLIENT_HEADER = "X-Sim-Client"


# ------------------------------------------------------------------ servers


class _Handler(BaseHTTPRequestHandler):
    """Dispatches to the routes dict installed on the server instance."""

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length", 0))
        return self.rfile.read(length) if length else b""

    def _dispatch(self, method: str) -> None:
        path = urlparse(self.path).path
        for (m, prefix), fn in self.server.routes.items():  # type: ignore[attr-defined]
            if m == method and path.startswith(prefix):
                try:
                    status, ctype, payload = fn(self)
                except Exception as exc:  # one request must not kill the server
                    log.warning("%s %s failed: %s", method, self.path, exc)
                    status, ctype, payload = 500, "application/json", b'{"error":"internal"}'
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)
                return
        self.send_error(404)

    def do_GET(self):  # noqa: N802 (http.server API)
        self._dispatch("GET")

    def do_POST(self):  # noqa: N802
        self._dispatch("POST")

    def log_message(self, *args):  # silence per-request stderr noise
        pass


def _json_response(obj, status: int = 200):
    return status, "application/json", json.dumps(obj).encode()


def _start(routes: dict) -> tuple[ThreadingHTTPServer, str]:
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    server.routes = routes  # type: ignore[attr-defined]
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    return server, f"http://{host}:{port}"


def serve_ranking(service) -> tuple[ThreadingHTTPServer, str]:
    def rank(h: _Handler):
        response = service.handle_rank(json.loads(h._body()))
        status = 429 if response.get("error") == "rate_limited" else 200
        return _json_response(response, status)

    def stats(h: _Handler):
        batch = [
            (tuple(item["U"]), item["observed"])
            for item in json.loads(h._body())["batch"]
        ]
        return _json_response(service.aggregate_statistics(batch))

    return _start({("POST", "/rank"): rank, ("POST", "/stats"): stats})


def serve_retargeter(ret) -> tuple[ThreadingHTTPServer, str]:
    def bid(h: _Handler):
        return _json_response(ret.handle_bid_request(json.loads(h._body())))

    def ad(h: _Handler):
        creative_id = urlparse(h.path).path.rsplit("/", 1)[-1]
        try:
            blob = ret.serve_ad(creative_id)
        except RetargeterError:
            return _json_response({"error": "unknown creative"}, 404)
        return 200, "application/octet-stream", blob

    def report(h: _Handler):
        ret.receive_report(json.loads(h._body()))
        return _json_response({"ok": True})

    return _start(
        {("POST", "/bid"): bid, ("GET", "/ad/"): ad, ("POST", "/report"): report}
    )


def serve_exchange(exchange) -> tuple[ThreadingHTTPServer, str]:
    def addr_of(h: _Handler) -> str:
        return h.headers.get(CLIENT_HEADER) or h.client_address[0]

    def adreq(h: _Handler):
        return _json_response(
            exchange.handle_ad_request(json.loads(h._body()), addr_of(h))
        )

    def proxy(h: _Handler):
        try:
            blob = exchange.proxy_fetch_ad(h.path)
        except ExchangeError as exc:
            return _json_response({"error": str(exc)}, 404)
        return 200, "application/octet-stream", blob

    def report(h: _Handler):
        return _json_response(
            exchange.handle_report(json.loads(h._body()), addr_of(h))
        )

    def trace(h: _Handler):
        pairs = exchange.trace_click_fraud(json.loads(h._body())["report_ids"])
        return _json_response([list(p) for p in pairs])

    return _start(
        {
            ("POST", "/adreq"): adreq,
            ("GET", "/proxy"): proxy,
            ("POST", "/report"): report,
            ("POST", "/trace"): trace,
        }
    )


# ------------------------------------------------------------------ clients


def http_post_json(url: str, obj, headers: dict | None = None):
    req = urllib.request.Request(
        url,
        data=json.dumps(obj).encode(),
        headers={"Content-Type": "application/json", **(headers or {})},
        method="POST",
    )
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        body = exc.read()
        try:
            return json.loads(body)
        except ValueError:
            raise ExchangeError(f"{url}: HTTP {exc.code}") from exc


def http_get_bytes(url: str, headers: dict | None = None) -> bytes:
    req = urllib.request.Request(url, headers=headers or {})
    with urllib.request.urlopen(req, timeout=10) as resp:
        return resp.read()


class ExchangeOverHTTP:
    """Same three methods the runner uses on the in-process exchange."""

    def __init__(self, base_url: str):
        self.base_url = base_url

    def handle_ad_request(self, ad_req: dict, client_addr: str) -> dict | None:
        return http_post_json(
            f"{self.base_url}/adreq", ad_req, {CLIENT_HEADER: client_addr}
        )

    def proxy_fetch_ad(self, proxy_url: str) -> bytes:
        return http_get_bytes(proxy_url)

    def handle_report(self, raw: dict, client_addr: str) -> dict | None:
        return http_post_json(
            f"{self.base_url}/report", raw, {CLIENT_HEADER: client_addr}
        )


class WireHarness:
    """Starts one server per party and reroutes the world's internal calls
    (exchange→retargeter links, client→ranking) over HTTP."""

    def __init__(self, world: World):
        self.world = world
        self.servers: list[ThreadingHTTPServer] = []
        self.urls: dict[str, str] = {}

        for id_R, service in world.services.items():
            server, base = serve_ranking(service)
            self.servers.append(server)
            self.urls[f"ranking:{id_R}"] = base
        for id_R, ret in world.retargeters.items():
            server, base = serve_retargeter(ret)
            self.servers.append(server)
            self.urls[f"retargeter:{id_R}"] = base
        server, base = serve_exchange(world.exchange)
        self.servers.append(server)
        self.urls["exchange"] = base
        # proxy URLs minted by the exchange must be fetchable
        world.exchange.base_url = base

        for id_R, link in list(world.exchange._links.items()):
            world.exchange.register(self._http_link(id_R, link))
        for cid, client in world.clients.items():
            client._ranker = self._http_ranker(cid)
        world.exchange_api = ExchangeOverHTTP(base)

    def _http_link(self, id_R: str, link: RetargeterLink) -> RetargeterLink:
        base = self.urls[f"retargeter:{id_R}"]
        monitor = self.world.monitor

        def bid(bid_req: dict) -> dict | None:
            monitor.observe_retargeter_event(
                id_R, "bid", json.dumps(bid_req), has_product_data=True
            )
            return http_post_json(f"{base}/bid", bid_req)

        def fetch_ad(creative_id: str) -> bytes:
            monitor.observe_retargeter_event(
                id_R, "adfetch", creative_id, has_product_data=True
            )
            return http_get_bytes(f"{base}/ad/{creative_id}")

        def report(forwarded: dict) -> None:
            monitor.observe_forwarded_report(forwarded)
            monitor.observe_retargeter_event(
                id_R, "report", json.dumps(forwarded), has_product_data=True
            )
            http_post_json(f"{base}/report", forwarded)

        return RetargeterLink(
            id_R=id_R,
            pubkey=link.pubkey,
            ad_base=link.ad_base,
            bid=bid,
            fetch_ad=fetch_ad,
            report=report,
            notify_win=link.notify_win,
        )

    def _http_ranker(self, cid: str):
        monitor = self.world.monitor
        urls = self.urls
        sizes = self.world.ranking_sizes

        def ranker(url: str, req: dict) -> dict:
            sizes.add(len(json.dumps(req, separators=(",", ":")).encode()))
            monitor.observe_ranking_request(req, cid)
            id_R = urlparse(url).netloc
            return http_post_json(f"{urls[f'ranking:{id_R}']}/rank", req)

        return ranker

    def stop(self) -> None:
        for server in self.servers:
            server.shutdown()
            server.server_close()
        self.servers.clear()


def run_wire_scenario(cfg: ScenarioConfig) -> RunMetrics:
    world = World(cfg)
    harness = WireHarness(world)
    try:
        return run_scenario(cfg, world=world)
    finally:
        harness.stop()
