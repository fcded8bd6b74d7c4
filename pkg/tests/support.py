"""Shared builders for the protocol test modules (not collected by pytest)."""

from blindbid.catalog import (
    Attribute,
    AttributeSchema,
    build_product_profile_clear,
)
from blindbid.hcrypt import (
    M64,
    coeff_label,
    derive_keystream,
    factor_label,
    pis_label,
)

SMALL_SCHEMA = AttributeSchema(
    (Attribute("gender", 2), Attribute("age", 3), Attribute("interest", 4))
)


class FakeClock:
    """Virtual clock: sleep() just advances now()."""

    def __init__(self, start: float = 0.0):
        self.t = float(start)

    def now(self) -> float:
        return self.t

    def sleep(self, seconds: float) -> None:
        self.t += seconds


def random_user(rng, schema=SMALL_SCHEMA):
    return tuple(rng.randrange(a.cardinality) for a in schema.attributes)


def random_clear_profile(
    rng,
    id_P,
    id_R="R1",
    schema=SMALL_SCHEMA,
    coeff_rate=0.3,
    ranking_url="",
):
    factors = {
        i: [rng.randrange(500_000, 2_000_000) for _ in range(schema.cardinality(i))]
        for i in range(len(schema))
    }
    coefficients = {}
    if len(schema) >= 2 and rng.random() < coeff_rate:
        i, j = sorted(rng.sample(range(len(schema)), 2))
        coefficients[(i, j)] = [
            [rng.randrange(800_000, 1_250_000) for _ in range(schema.cardinality(j))]
            for _ in range(schema.cardinality(i))
        ]
    return build_product_profile_clear(
        id_P,
        id_R,
        rng.uniform(0.002, 0.05),
        rng.randrange(50_000, 2_000_000),
        factors=factors,
        coefficients=coefficients,
        schema=schema,
        ranking_url=ranking_url,
    )


def score_key(master, id_P, u, pairs=()):
    """Independent recomputation of the key a client score decrypts under."""
    k = derive_keystream(master, pis_label(id_P))
    for i, value in enumerate(u):
        k += derive_keystream(master, factor_label(id_P, i, value))
    for i, j in pairs:
        k += derive_keystream(master, coeff_label(id_P, i, j, u[i], u[j]))
    return k % M64.M
