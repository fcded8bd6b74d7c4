"""Attribute schemas, user/product profiles, and fixed-point log encoding.

Product selection multiplies a user-independent initial score by one
impact factor per user attribute (plus optional pairwise coefficient
corrections).  Taking logs turns that product into a sum, which is what
the additive cipher can evaluate.  All quantities live in micro format:
monetary values as integer micro-dollars, factors and coefficients as
micro-scaled ratios, and logs as ``round(ln(x) * 10**6)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from . import hcrypt
from .hcrypt import (
    Ciphertext,
    MasterSecret,
    coeff_label,
    ct_from_b64,
    ct_to_b64,
    derive_keystream,
    enc,
    factor_label,
    pis_label,
)

MICRO = 10**6
SCHEMA_VERSION = 1

#: FixedLog values stay far inside the cipher headroom: 16 summands of
#: anything below 2**36 cannot wrap a 2**64 modulus.
LOG_BOUND = 1 << 36


class ProfileError(Exception):
    """Malformed or inconsistent profile data."""


@dataclass(frozen=True)
class Attribute:
    name: str
    cardinality: int

    def __post_init__(self):
        if self.cardinality < 1:
            raise ProfileError(f"attribute {self.name!r} needs cardinality >= 1")


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered user attributes; a user profile is one value index per slot."""

    attributes: tuple[Attribute, ...]

    def __len__(self):
        return len(self.attributes)

    def cardinality(self, i: int) -> int:
        return self.attributes[i].cardinality

    def index_of(self, name: str) -> int:
        for i, a in enumerate(self.attributes):
            if a.name == name:
                return i
        raise KeyError(name)

    @property
    def total_slots(self) -> int:
        return sum(a.cardinality for a in self.attributes)


#: Default targeting schema: 2 genders, 7 age ranges, 24 top interests,
#: 846 localities, and three 5-valued per-product attributes.  Order
#: follows the canonical user-vector layout (age, gender, locality,
#: interest, then the per-product attributes).
DEFAULT_SCHEMA = AttributeSchema(
    (
        Attribute("age", 7),
        Attribute("gender", 2),
        Attribute("locality", 846),
        Attribute("interest", 24),
        Attribute("conversion_status", 5),
        Attribute("visit_frequency", 5),
        Attribute("last_visit", 5),
    )
)


def validate_user_profile(u, schema: AttributeSchema) -> list[str]:
    """Return a list of violations (empty when the profile is valid)."""
    violations = []
    if len(u) != len(schema):
        violations.append(f"length {len(u)} != schema length {len(schema)}")
        return violations
    for i, v in enumerate(u):
        card = schema.cardinality(i)
        if not isinstance(v, int) or not 0 <= v < card:
            violations.append(
                f"{schema.attributes[i].name}: index {v!r} outside [0, {card})"
            )
    return violations


# ---------------------------------------------------------------------------
# Fixed-point logarithms
# ---------------------------------------------------------------------------


def encode_log(x_micros: int) -> int:
    """round(ln(x) * 10**6) for a positive micro-format integer."""
    if x_micros < 1:
        raise ProfileError(f"encode_log needs a positive integer, got {x_micros}")
    v = round(math.log(x_micros) * MICRO)
    if abs(v) >= LOG_BOUND:
        raise ProfileError(f"fixed log {v} outside headroom bound")
    return v


def decode_log(v: int) -> int:
    """Inverse of encode_log: round(exp(v / 10**6))."""
    if abs(v) >= LOG_BOUND:
        raise ProfileError(f"fixed log {v} outside headroom bound")
    return round(math.exp(v / MICRO))


def encode_log_ratio(x_micros: int) -> int:
    """Fixed log of a dimensionless micro ratio (1_200_000 -> ln 1.2).

    Factor and coefficient logs add directly onto the PIS log because
    ln(ab) = ln a + ln b; values below 1.0 encode negative.
    """
    if x_micros < 1:
        raise ProfileError(f"ratio must be positive, got {x_micros}")
    v = round(math.log(x_micros / MICRO) * MICRO)
    if abs(v) >= LOG_BOUND:
        raise ProfileError(f"fixed log {v} outside headroom bound")
    return v


# ---------------------------------------------------------------------------
# Product profiles
# ---------------------------------------------------------------------------

CoeffTable = tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class ProductProfileClear:
    """Plaintext product profile as configured by the retargeter.

    ``factors[i][j]`` is the micro-format impact factor of value j of
    attribute i; ``coefficients[(i, j)][a][b]`` the pairwise correction
    for attribute values (a, b).  Undeclared pairs mean 1.0.
    """

    id_P: str
    id_R: str
    ctr_default: float
    cpc_micros: int
    pis_micros: int
    ranking_url: str
    factors: tuple[tuple[int, ...], ...]
    coefficients: dict[tuple[int, int], CoeffTable] = field(default_factory=dict)


@dataclass(frozen=True)
class ProductProfileEnc:
    """Encrypted profile as embedded in advertiser pages.

    Mirrors the clear shape; carries no plaintext factor or PIS value.
    """

    id_P: str
    id_R: str
    ranking_url: str
    pis_ct: Ciphertext
    factors_ct: tuple[tuple[Ciphertext, ...], ...]
    coefficients_ct: dict[tuple[int, int], tuple[tuple[Ciphertext, ...], ...]] = field(
        default_factory=dict
    )
    schema_version: int = SCHEMA_VERSION

    @property
    def coeff_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.coefficients_ct)


def build_product_profile_clear(
    id_P: str,
    id_R: str,
    ctr_default: float,
    cpc_micros: int,
    factors: dict[int, list[int]] | None = None,
    coefficients: dict[tuple[int, int], list[list[int]]] | None = None,
    ranking_url: str = "",
    schema: AttributeSchema = DEFAULT_SCHEMA,
) -> ProductProfileClear:
    """Assemble a clear profile, filling unspecified factor slots with 1.0.

    ``factors`` maps attribute index to a full micro-format vector for
    that attribute; missing attributes default to all-ones (no effect).
    """
    if not 0.0 <= ctr_default <= 1.0:
        raise ProfileError(f"ctr_default {ctr_default} outside [0, 1]")
    if cpc_micros < 0:
        raise ProfileError("cpc_micros must be >= 0")
    factors = factors or {}
    full = []
    for i, attr in enumerate(schema.attributes):
        vec = factors.get(i)
        if vec is None:
            vec = [MICRO] * attr.cardinality
        if len(vec) != attr.cardinality:
            raise ProfileError(
                f"factor vector for {attr.name!r} has {len(vec)} slots, "
                f"expected {attr.cardinality}"
            )
        if any(f <= 0 for f in vec):
            raise ProfileError(f"non-positive factor in {attr.name!r}")
        full.append(tuple(int(f) for f in vec))

    coeff_tables: dict[tuple[int, int], CoeffTable] = {}
    for (i, j), table in (coefficients or {}).items():
        if not (0 <= i < len(schema) and 0 <= j < len(schema) and i != j):
            raise ProfileError(f"bad coefficient pair ({i}, {j})")
        if len(table) != schema.cardinality(i) or any(
            len(row) != schema.cardinality(j) for row in table
        ):
            raise ProfileError(f"coefficient table ({i}, {j}) shape mismatch")
        if any(c <= 0 for row in table for c in row):
            raise ProfileError(f"non-positive coefficient in table ({i}, {j})")
        coeff_tables[(i, j)] = tuple(tuple(int(c) for c in row) for row in table)

    return ProductProfileClear(
        id_P=id_P,
        id_R=id_R,
        ctr_default=ctr_default,
        cpc_micros=int(cpc_micros),
        pis_micros=round(ctr_default * cpc_micros),
        ranking_url=ranking_url,
        factors=tuple(full),
        coefficients=coeff_tables,
    )


def encrypt_product_profile(
    clear: ProductProfileClear, master: MasterSecret
) -> ProductProfileEnc:
    """Encrypt every slot under its own derived keystream.

    Deterministic given (clear, master): re-publishing an unchanged
    profile yields a byte-identical document.
    """
    id_P = clear.id_P
    pis_ct = enc(encode_log(clear.pis_micros), derive_keystream(master, pis_label(id_P)))
    factors_ct = tuple(
        tuple(
            enc(encode_log_ratio(f), derive_keystream(master, factor_label(id_P, i, j)))
            for j, f in enumerate(vec)
        )
        for i, vec in enumerate(clear.factors)
    )
    coeff_ct = {
        pair: tuple(
            tuple(
                enc(
                    encode_log_ratio(c),
                    derive_keystream(master, coeff_label(id_P, pair[0], pair[1], a, b)),
                )
                for b, c in enumerate(row)
            )
            for a, row in enumerate(table)
        )
        for pair, table in clear.coefficients.items()
    }
    return ProductProfileEnc(
        id_P=id_P,
        id_R=clear.id_R,
        ranking_url=clear.ranking_url,
        pis_ct=pis_ct,
        factors_ct=factors_ct,
        coefficients_ct=coeff_ct,
    )


# ---------------------------------------------------------------------------
# Embeddable document format
# ---------------------------------------------------------------------------


def serialize_profile(enc_profile: ProductProfileEnc) -> str:
    """Compact JSON document; field order and separators are fixed so
    size measurements are stable."""
    doc = {
        "v": enc_profile.schema_version,
        "id_P": enc_profile.id_P,
        "id_R": enc_profile.id_R,
        "rank_url": enc_profile.ranking_url,
        "pis": ct_to_b64(enc_profile.pis_ct),
        "F": [[ct_to_b64(ct) for ct in vec] for vec in enc_profile.factors_ct],
    }
    if enc_profile.coefficients_ct:
        doc["C"] = [
            {
                "i": i,
                "j": j,
                "table": [
                    [ct_to_b64(ct) for ct in row]
                    for row in enc_profile.coefficients_ct[(i, j)]
                ],
            }
            for (i, j) in sorted(enc_profile.coefficients_ct)
        ]
    return json.dumps(doc, separators=(",", ":"))


def parse_profile(
    document: str, schema: AttributeSchema = DEFAULT_SCHEMA
) -> ProductProfileEnc:
    """Parse and shape-check a profile document against a schema."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"malformed profile document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProfileError("profile document is not an object")
    if doc.get("v") != SCHEMA_VERSION:
        raise ProfileError(f"unknown schema version {doc.get('v')!r}")
    try:
        id_P, id_R, rank_url = doc["id_P"], doc["id_R"], doc["rank_url"]
        pis_ct = ct_from_b64(doc["pis"])
        f_raw = doc["F"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ProfileError(f"malformed profile document: {exc}") from exc
    if len(f_raw) != len(schema):
        raise ProfileError(f"{len(f_raw)} factor vectors, schema has {len(schema)}")
    factors_ct = []
    for i, vec in enumerate(f_raw):
        if len(vec) != schema.cardinality(i):
            raise ProfileError(
                f"factor vector {i} has {len(vec)} slots, "
                f"expected {schema.cardinality(i)}"
            )
        factors_ct.append(tuple(ct_from_b64(c) for c in vec))
    coeff_ct = {}
    for entry in doc.get("C", []):
        i, j, table = entry["i"], entry["j"], entry["table"]
        if not (0 <= i < len(schema) and 0 <= j < len(schema)):
            raise ProfileError(f"coefficient pair ({i}, {j}) outside schema")
        if len(table) != schema.cardinality(i) or any(
            len(row) != schema.cardinality(j) for row in table
        ):
            raise ProfileError(f"coefficient table ({i}, {j}) shape mismatch")
        coeff_ct[(i, j)] = tuple(tuple(ct_from_b64(c) for c in row) for row in table)
    return ProductProfileEnc(
        id_P=id_P,
        id_R=id_R,
        ranking_url=rank_url,
        pis_ct=pis_ct,
        factors_ct=tuple(factors_ct),
        coefficients_ct=coeff_ct,
    )


def decrypt_profile_slots(
    enc_profile: ProductProfileEnc, master: MasterSecret
) -> tuple[int, tuple[tuple[int, ...], ...], dict[tuple[int, int], CoeffTable]]:
    """Re-derive every slot key and decrypt (test/audit helper)."""
    id_P = enc_profile.id_P
    pis = hcrypt.dec(enc_profile.pis_ct, derive_keystream(master, pis_label(id_P)))
    factors = tuple(
        tuple(
            hcrypt.dec(ct, derive_keystream(master, factor_label(id_P, i, j)))
            for j, ct in enumerate(vec)
        )
        for i, vec in enumerate(enc_profile.factors_ct)
    )
    coeffs = {
        (i, j): tuple(
            tuple(
                hcrypt.dec(ct, derive_keystream(master, coeff_label(id_P, i, j, a, b)))
                for b, ct in enumerate(row)
            )
            for a, row in enumerate(table)
        )
        for (i, j), table in enc_profile.coefficients_ct.items()
    }
    return pis, factors, coeffs
