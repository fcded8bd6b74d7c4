"""User-side agent.

Keeps the local store of visited (encrypted) product profiles, computes
encrypted scores by homomorphic addition of log-domain slots, talks to the
per-retargeter ranking service, and assembles cookie-less ad requests in
which every product-related field is either sealed or AEAD-encrypted.

The store is single-writer: all mutating calls are expected to come from one
logical owner (the simulator's event loop or the CLI). Read-only snapshots
are safe at any point.
"""

from __future__ import annotations

import base64
import json
import random
import time
from dataclasses import dataclass
from typing import Callable

from .catalog import (
    DEFAULT_SCHEMA,
    AttributeSchema,
    ProductProfileEnc,
    ProfileError,
    validate_user_profile,
)
from .hcrypt import (
    CONTEXT_AD_CONTENT,
    CONTEXT_PRODUCT_PAYLOAD,
    Ciphertext,
    OpenError,
    add_ct,
    aead_open,
    aead_seal,
    ct_from_b64,
    ct_to_b64,
    new_session_key,
    seal_session_key,
)


class ClientError(Exception):
    pass


class RankingUnavailable(ClientError):
    """The ranking service refused the request (typically rate limiting)."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


@dataclass(frozen=True)
class ClientConfig:
    store_cap: int = 1000
    top_m: int = 3
    freq_cap: int = 10
    jitter_max: float = 2.0
    batch_min: int = 5


@dataclass
class LocalProductRecord:
    profile: ProductProfileEnc
    score_ct: Ciphertext
    bid_score_ct: Ciphertext | None = None
    rank: int | None = None
    impressions_today: int = 0
    first_seen: float = 0.0
    last_seen: float = 0.0
    sensitive: bool = False


class _WallClock:
    now = staticmethod(time.time)
    sleep = staticmethod(time.sleep)


def compute_encrypted_score(profile: ProductProfileEnc, u: tuple[int, ...]) -> Ciphertext:
    """Homomorphic sum of pis_ct, one factor slot per attribute, and any
    declared coefficient slots — decryptable to the fixed-point log score."""
    if len(u) != len(profile.factors_ct):
        raise ProfileError(
            f"profile has {len(profile.factors_ct)} attributes, U has {len(u)}"
        )
    score = profile.pis_ct
    for i, value in enumerate(u):
        vec = profile.factors_ct[i]
        if not 0 <= value < len(vec):
            raise ProfileError(f"U[{i}]={value} outside factor vector of size {len(vec)}")
        score = add_ct(score, vec[value])
    for (i, j), table in profile.coefficients_ct.items():
        score = add_ct(score, table[u[i]][u[j]])
    return score


class ClientAgent:
    """One simulated user's on-device agent."""

    def __init__(
        self,
        client_id: str,
        user_profile: tuple[int, ...],
        registry_pubkeys: dict[str, bytes],
        ranker: Callable[[str, dict], dict],
        *,
        config: ClientConfig | None = None,
        schema: AttributeSchema = DEFAULT_SCHEMA,
        rng=None,
        clock=None,
    ):
        self.config = config or ClientConfig()
        violations = validate_user_profile(user_profile, schema)
        if violations:
            raise ProfileError("; ".join(violations))
        self.client_id = client_id
        self.user_profile = tuple(user_profile)
        self.schema = schema
        self.registry_pubkeys = registry_pubkeys
        self._ranker = ranker
        self._rng = rng or random.Random()
        self._clock = clock or _WallClock()
        self.records: dict[str, LocalProductRecord] = {}
        self.evictions = 0
        # rid -> {id_R: session key}; consumed when the delivered ad is opened
        self._pending_sessions: dict[str, dict[str, bytes]] = {}
        self._retry_at: dict[str, float] = {}

    # ------------------------------------------------------------- store

    def record_product(self, profile: ProductProfileEnc, now: float | None = None) -> None:
        now = self._clock.now() if now is None else now
        score_ct = compute_encrypted_score(profile, self.user_profile)
        existing = self.records.get(profile.id_P)
        if existing is not None:
            if existing.profile != profile:
                # re-published profile (e.g. CPC change): old rank is stale
                existing.profile = profile
                existing.rank = None
                existing.bid_score_ct = None
            existing.score_ct = score_ct
            existing.last_seen = now
            return
        if len(self.records) >= self.config.store_cap:
            self._evict_one()
        self.records[profile.id_P] = LocalProductRecord(
            profile=profile, score_ct=score_ct, first_seen=now, last_seen=now
        )

    def _evict_one(self) -> None:
        # keep likely-advertisable products: drop unranked first, then the
        # worst-ranked, oldest last_seen breaking ties
        victim = min(
            self.records.values(),
            key=lambda r: (
                r.rank is not None,
                -r.rank if r.rank is not None else 0,
                r.last_seen,
            ),
        )
        del self.records[victim.profile.id_P]
        self.evictions += 1

    def set_sensitive(self, id_P: str, flag: bool = True) -> None:
        try:
            self.records[id_P].sensitive = flag
        except KeyError:
            raise ClientError(f"unknown product {id_P!r}") from None

    def register_ad_impression(self, id_P: str) -> None:
        rec = self.records.get(id_P)
        if rec is not None:
            rec.impressions_today += 1

    def reset_daily_counters(self) -> None:
        for rec in self.records.values():
            rec.impressions_today = 0

    # ----------------------------------------------------------- ranking

    def _records_for(self, id_R: str) -> list[LocalProductRecord]:
        return [r for r in self.records.values() if r.profile.id_R == id_R]

    def unranked_count(self, id_R: str) -> int:
        return sum(
            1 for r in self._records_for(id_R) if r.rank is None and not r.sensitive
        )

    def retargeters_needing_ranking(self, *, force: bool = False) -> list[str]:
        """Retargeters whose batch of new products warrants a ranking call.

        With force=True (the hourly flush) any retargeter with at least one
        unranked, non-sensitive record qualifies.
        """
        floor = 1 if force else self.config.batch_min
        ids = {r.profile.id_R for r in self.records.values()}
        return sorted(i for i in ids if self.unranked_count(i) >= floor)

    def request_ranking(self, id_R: str, now: float | None = None) -> int:
        """Rank this retargeter's stored products; returns how many got a rank.

        Local state is only touched after a successful response, so a
        rejection (rate limit) leaves the store exactly as it was.
        """
        now = self._clock.now() if now is None else now
        if now < self._retry_at.get(id_R, 0.0):
            raise RankingUnavailable(
                f"{id_R} rate-limited until {self._retry_at[id_R]:.0f}",
                retry_after=self._retry_at[id_R] - now,
            )
        candidates = [r for r in self._records_for(id_R) if not r.sensitive]
        if not candidates:
            raise ClientError(f"no rankable records for {id_R!r}")
        candidates.sort(key=lambda r: r.profile.id_P)
        url = candidates[-1].profile.ranking_url
        request = {
            "channel": self.client_id,
            "U": list(self.user_profile),
            "entries": [
                {
                    "id_P": r.profile.id_P,
                    "score": ct_to_b64(r.score_ct),
                    "pairs": [list(p) for p in r.profile.coeff_pairs],
                }
                for r in candidates
            ],
        }
        if self.config.jitter_max > 0:
            self._clock.sleep(self._rng.uniform(0.0, self.config.jitter_max))
        response = self._ranker(url, request)
        if "error" in response:
            retry = float(response.get("retry_after", 0.0))
            self._retry_at[id_R] = now + retry
            raise RankingUnavailable(
                f"{id_R}: {response['error']}", retry_after=retry
            )
        by_id = {r.profile.id_P: r for r in candidates}
        returned = set()
        for position, item in enumerate(response["ranking"]):
            rec = by_id[item["id_P"]]
            rec.rank = position
            rec.bid_score_ct = ct_from_b64(item["bid_score"])
            returned.add(item["id_P"])
        for id_P, rec in by_id.items():
            if id_P not in returned:  # dropped as undecodable
                rec.rank = None
                rec.bid_score_ct = None
        return len(returned)

    # ------------------------------------------------------- ad requests

    def _eligible(self, id_R: str) -> list[LocalProductRecord]:
        out = [
            r
            for r in self._records_for(id_R)
            if r.rank is not None
            and r.bid_score_ct is not None
            and not r.sensitive
            and r.impressions_today < self.config.freq_cap
        ]
        out.sort(key=lambda r: r.rank)
        return out[: self.config.top_m]

    def build_ad_request(self, page_url: str, now: float | None = None) -> dict | None:
        """Assemble the cookie-less ad request, or None when nothing is eligible.

        Every entry seals a fresh session key to its retargeter and AEAD-seals
        the (id_P, bid score, PIS) triples under it; nothing user-identifying
        and no plaintext product data appears at the top level.
        """
        del now  # reserved for symmetry with the other entry points
        entries = []
        rid = self._rng.getrandbits(128).to_bytes(16, "big").hex()
        sessions: dict[str, bytes] = {}
        for id_R in sorted(self.registry_pubkeys):
            top = self._eligible(id_R)
            if not top:
                continue
            key = new_session_key()
            payload = json.dumps(
                [
                    {
                        "id_P": r.profile.id_P,
                        "score": ct_to_b64(r.bid_score_ct),
                        "pis": ct_to_b64(r.profile.pis_ct),
                    }
                    for r in top
                ],
                separators=(",", ":"),
            ).encode()
            entries.append(
                {
                    "id_R": id_R,
                    "skey": base64.b64encode(
                        seal_session_key(key, self.registry_pubkeys[id_R])
                    ).decode(),
                    "payload": base64.b64encode(
                        aead_seal(payload, key, CONTEXT_PRODUCT_PAYLOAD)
                    ).decode(),
                }
            )
            sessions[id_R] = key
        if not entries:
            return None
        self._pending_sessions[rid] = sessions
        return {"rid": rid, "page": page_url, "entries": entries}

    def open_delivery(self, delivery: dict) -> dict:
        """Decrypt a delivered ad creative and count the impression."""
        sessions = self._pending_sessions.pop(delivery["rid"], None)
        if sessions is None or delivery["id_R"] not in sessions:
            raise ClientError("no session key for this delivery")
        try:
            ad_bytes = aead_open(
                base64.b64decode(delivery["ad_ct"]),
                sessions[delivery["id_R"]],
                CONTEXT_AD_CONTENT,
            )
        except OpenError as exc:
            raise ClientError(f"undecryptable ad: {exc}") from exc
        ad = json.loads(ad_bytes)
        self.register_ad_impression(ad["id_P"])
        return ad
