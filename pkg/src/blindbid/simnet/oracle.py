"""Plaintext reference computations.

Everything here recomputes, from clear product profiles, the values the
encrypted pipeline should produce: real-valued expected revenue, the exact
fixed-point log score (bit-identical to a decrypted homomorphic sum),
ranking order, bids, and auction outcomes. The simulator runs these side by
side with the protocol and the equivalence tests compare against them.
"""

from __future__ import annotations

from ..catalog import (
    MICRO,
    ProductProfileClear,
    decode_log,
    encode_log,
    encode_log_ratio,
)
from ..ranking_service import coarsen


def float_score(profile: ProductProfileClear, u: tuple[int, ...]) -> float:
    """Real-valued expected revenue in micro-$: PIS × Π factors × Π coeffs."""
    s = float(profile.pis_micros)
    for i, value in enumerate(u):
        s *= profile.factors[i][value] / MICRO
    for (i, j), table in profile.coefficients.items():
        s *= table[u[i]][u[j]] / MICRO
    return s


def fixed_score(profile: ProductProfileClear, u: tuple[int, ...]) -> int:
    """Exact fixed-point log score, identical to the decrypted pipeline value."""
    v = encode_log(profile.pis_micros)
    for i, value in enumerate(u):
        v += encode_log_ratio(profile.factors[i][value])
    for (i, j), table in profile.coefficients.items():
        v += encode_log_ratio(table[u[i]][u[j]])
    return v


def click_probability(profile: ProductProfileClear, u: tuple[int, ...]) -> float:
    """CTR(P) × Π factors, clamped to [0, 1] — the Bernoulli click parameter."""
    c = profile.ctr_default
    for i, value in enumerate(u):
        c *= profile.factors[i][value] / MICRO
    for (i, j), table in profile.coefficients.items():
        c *= table[u[i]][u[j]] / MICRO
    return min(max(c, 0.0), 1.0)


def ranking_order(
    profiles: list[ProductProfileClear], u: tuple[int, ...], bucket_width: int
) -> list[str]:
    """Descending coarsened score, ties broken by ascending product id."""
    scored = [(coarsen(fixed_score(p, u), bucket_width), p.id_P) for p in profiles]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [id_P for _, id_P in scored]


def top_m(
    profiles: list[ProductProfileClear],
    u: tuple[int, ...],
    bucket_width: int,
    m: int,
) -> list[str]:
    return ranking_order(profiles, u, bucket_width)[:m]


def expected_bid(
    profiles: list[ProductProfileClear],
    u: tuple[int, ...],
    bucket_width: int,
    alpha: float,
    quality_micros: int = MICRO,
    reserve_micros: int = 0,
) -> tuple[str, int] | None:
    """Mirror of the retargeter's bid rule on its own candidate set.

    Picks the best coarsened score (ascending-id tie-break), applies the page
    quality factor in log domain, and prices at round(alpha × revenue).
    Returns (id_P, bid_micros) or None for a no-bid.
    """
    if not profiles:
        return None
    scored = [(coarsen(fixed_score(p, u), bucket_width), p.id_P) for p in profiles]
    scored.sort(key=lambda t: (-t[0], t[1]))
    best_v, best_id = scored[0]
    revenue = decode_log(best_v + encode_log_ratio(quality_micros))
    if revenue < reserve_micros:
        return None
    return best_id, round(alpha * revenue)


def auction_outcome(
    bids: dict[str, int], reserve_micros: int = 0
) -> tuple[str, int] | None:
    """Second-price outcome: (winning id_R, clearing price) or None."""
    if not bids:
        return None
    order = sorted(bids.items(), key=lambda t: (-t[1], t[0]))
    winner = order[0][0]
    price = order[1][1] if len(order) > 1 else reserve_micros
    return winner, price
