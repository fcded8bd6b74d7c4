"""Ranking service — the retargeter's secure co-processor, simulated.

This is the only component besides the feed builder that holds the master
secret. It decrypts client score ciphertexts, coarsens them into buckets,
sorts, and hands back each coarsened score re-encrypted under a keystream
derivable from the product id alone, so the retargeter proper can decrypt it
at bid time without ever seeing the user profile. Per-client rate limiting
and k-anonymous aggregation guard the two request types; nothing else leaves
the boundary.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass
from itertools import groupby

from .catalog import (
    DEFAULT_SCHEMA,
    LOG_BOUND,
    AttributeSchema,
    ProfileError,
    validate_user_profile,
)
from .hcrypt import (
    MasterSecret,
    bidkey_label,
    ct_from_b64,
    ct_to_b64,
    dec,
    derive_keystream,
    enc,
    score_keystream,
)

DAY = 86_400


class RateLimited(Exception):
    def __init__(self, retry_after: float):
        super().__init__(f"rate limit exhausted, retry in {retry_after:.0f}s")
        self.retry_after = retry_after


@dataclass(frozen=True)
class RankingPolicy:
    bucket_width: int = 50_000  # micro-log units, ~5% relative; 0 disables
    rate_limit_per_day: int = 100
    k_anon: int = 20
    randomize: bool = False


def coarsen(v: int, width: int) -> int:
    """Round to the nearest bucket multiple; |coarsen(v, w) - v| <= w/2."""
    if width <= 0:
        return v
    return ((v + width // 2) // width) * width


class RankingService:
    def __init__(
        self,
        master: MasterSecret,
        *,
        policy: RankingPolicy | None = None,
        schema: AttributeSchema = DEFAULT_SCHEMA,
        clock=None,
        rng=None,
    ):
        self._master = master
        self.policy = policy or RankingPolicy()
        self.schema = schema
        self._clock = clock or time.time
        self._rng = rng or random.Random()
        self._lock = threading.Lock()
        self._counters: dict[str, int] = {}
        self._counter_day = -1
        self.dropped_total = 0

    # -------------------------------------------------------- rate limit

    def check_rate_limit(self, channel: str, now: float) -> float | None:
        """Count one request; None = allowed, else seconds until the next day."""
        day = int(now // DAY)
        with self._lock:
            if day != self._counter_day:
                self._counters.clear()
                self._counter_day = day
            used = self._counters.get(channel, 0)
            if used >= self.policy.rate_limit_per_day:
                return (day + 1) * DAY - now
            self._counters[channel] = used + 1
        return None

    # ------------------------------------------------------------ ranking

    def _entry_key(self, id_P: str, u: tuple[int, ...], pairs) -> int:
        return score_keystream(self._master, id_P, u, pairs)

    def rank(self, request: dict) -> dict:
        now = self._clock()
        retry = self.check_rate_limit(request["channel"], now)
        if retry is not None:
            raise RateLimited(retry)
        u = tuple(request["U"])
        violations = validate_user_profile(u, self.schema)
        if violations:
            raise ProfileError("; ".join(violations))
        decoded: list[tuple[int, str]] = []
        dropped: list[str] = []
        for entry in request["entries"]:
            id_P = entry["id_P"]
            pairs = [tuple(p) for p in entry.get("pairs", [])]
            v = dec(ct_from_b64(entry["score"]), self._entry_key(id_P, u, pairs))
            if abs(v) >= LOG_BOUND:
                dropped.append(id_P)
                self.dropped_total += 1
                continue
            decoded.append((coarsen(v, self.policy.bucket_width), id_P))
        decoded.sort(key=lambda t: (-t[0], t[1]))
        if self.policy.randomize:
            shuffled: list[tuple[int, str]] = []
            for _, bucket in groupby(decoded, key=lambda t: t[0]):
                group = list(bucket)
                self._rng.shuffle(group)
                shuffled.extend(group)
            decoded = shuffled
        ranking = [
            {
                "id_P": id_P,
                "bid_score": ct_to_b64(
                    enc(cv, derive_keystream(self._master, bidkey_label(id_P)))
                ),
            }
            for cv, id_P in decoded
        ]
        return {"ranking": ranking, "dropped": dropped}

    def handle_rank(self, request: dict) -> dict:
        """Transport-facing wrapper: rejections become error payloads."""
        try:
            return self.rank(request)
        except RateLimited as exc:
            return {"error": "rate_limited", "retry_after": exc.retry_after}

    # --------------------------------------------------------- statistics

    def aggregate_statistics(
        self, batch: list[tuple[tuple[int, ...], dict[str, float]]], k_anon: int | None = None
    ) -> dict:
        """k-anonymous per-(product, attribute value) mean CTR.

        batch holds (U, {id_P: observed CTR}) pairs collected inside the
        boundary; cells with fewer than k_anon contributors are suppressed.
        """
        k = self.policy.k_anon if k_anon is None else k_anon
        sums: dict[tuple[str, int, int], list[float]] = {}
        for u, observations in batch:
            for id_P, ctr in observations.items():
                for i, value in enumerate(u):
                    sums.setdefault((id_P, i, value), []).append(ctr)
        cells = [
            {
                "id_P": id_P,
                "attr": self.schema.attributes[i].name,
                "value": value,
                "mean_ctr": sum(ctrs) / len(ctrs),
                "n": len(ctrs),
            }
            for (id_P, i, value), ctrs in sorted(sums.items())
            if len(ctrs) >= k
        ]
        return {"cells": cells}
