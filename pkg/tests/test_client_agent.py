"""Client agent: scoring, store management, ranking calls, ad requests."""

import base64
import json
import random

import pytest

from blindbid.catalog import (
    DEFAULT_SCHEMA,
    MICRO,
    build_product_profile_clear,
    decode_log,
    encode_log,
    encrypt_product_profile,
)
from blindbid.client_agent import (
    ClientAgent,
    ClientConfig,
    ClientError,
    RankingUnavailable,
    compute_encrypted_score,
)
from blindbid.hcrypt import (
    CONTEXT_AD_CONTENT,
    CONTEXT_PRODUCT_PAYLOAD,
    MasterSecret,
    aead_open,
    aead_seal,
    dec,
    generate_keypair,
    open_session_key,
)
from blindbid.ranking_service import RankingPolicy, RankingService
from blindbid.simnet import oracle
from support import (
    SMALL_SCHEMA,
    FakeClock,
    random_clear_profile,
    random_user,
    score_key,
)

U_REF = (1, 0, 89, 1, 2, 2, 3)


def reference_profile(coeff=None):
    """ctr 0.01 × cpc $0.50 → PIS 5_000 micro-$; chosen factor per attribute."""
    ratios = (1_200_000, 1_100_000, MICRO, 900_000, 1_500_000, MICRO, MICRO)
    factors = {}
    for i, ratio in enumerate(ratios):
        vec = [MICRO] * DEFAULT_SCHEMA.cardinality(i)
        vec[U_REF[i]] = ratio
        factors[i] = vec
    coefficients = {}
    if coeff is not None:
        pair, value = coeff
        i, j = pair
        table = [
            [MICRO] * DEFAULT_SCHEMA.cardinality(j)
            for _ in range(DEFAULT_SCHEMA.cardinality(i))
        ]
        table[U_REF[i]][U_REF[j]] = value
        coefficients[pair] = table
    return build_product_profile_clear(
        "P1", "R1", 0.01, 500_000, factors=factors, coefficients=coefficients
    )


class TestEncryptedScore:
    def test_identity_factors_score_is_pis(self):
        master = MasterSecret.generate()
        clear = build_product_profile_clear("P1", "R1", 0.01, 500_000)
        ct = compute_encrypted_score(encrypt_product_profile(clear, master), U_REF)
        v = dec(ct, score_key(master, "P1", U_REF))
        assert v == encode_log(5_000)
        assert decode_log(v) == 5_000

    def test_reference_factor_case(self):
        master = MasterSecret.generate()
        enc = encrypt_product_profile(reference_profile(), master)
        v = dec(compute_encrypted_score(enc, U_REF), score_key(master, "P1", U_REF))
        assert abs(decode_log(v) - 8_910) <= 1

    def test_reference_case_with_coefficient(self):
        # age–interest coefficient 1.1 on top of the factor case
        pair = (DEFAULT_SCHEMA.index_of("age"), DEFAULT_SCHEMA.index_of("interest"))
        master = MasterSecret.generate()
        enc = encrypt_product_profile(
            reference_profile(coeff=(pair, 1_100_000)), master
        )
        v = dec(
            compute_encrypted_score(enc, U_REF),
            score_key(master, "P1", U_REF, pairs=[pair]),
        )
        assert abs(decode_log(v) - 9_801) <= 1

    def test_matches_fixed_oracle_randomized(self):
        rng = random.Random(7)
        master = MasterSecret.generate()
        for n in range(50):
            clear = random_clear_profile(rng, f"P{n}")
            u = random_user(rng)
            ct = compute_encrypted_score(encrypt_product_profile(clear, master), u)
            pairs = sorted(clear.coefficients)
            v = dec(ct, score_key(master, clear.id_P, u, pairs=pairs))
            assert v == oracle.fixed_score(clear, u)

    def test_shape_mismatch(self):
        master = MasterSecret.generate()
        clear = build_product_profile_clear("P1", "R1", 0.01, 500_000, schema=SMALL_SCHEMA)
        enc = encrypt_product_profile(clear, master)
        with pytest.raises(Exception):
            compute_encrypted_score(enc, (0, 1))  # too short
        with pytest.raises(Exception):
            compute_encrypted_score(enc, (0, 1, 99))  # out of range


def make_world(
    *,
    n_profiles=0,
    config=None,
    policy=None,
    seed=1,
    coeff_rate=0.3,
):
    """One retargeter, one ranking service, one client over the small schema."""
    rng = random.Random(seed)
    master = MasterSecret(bytes([seed % 256]) * 32)
    _, pub = _keypair_cache.setdefault(seed, generate_keypair())
    clock = FakeClock()
    service = RankingService(
        master, policy=policy, schema=SMALL_SCHEMA, clock=clock.now
    )
    client = ClientAgent(
        "client-1",
        random_user(rng),
        {"R1": pub},
        lambda url, req: service.handle_rank(req),
        config=config or ClientConfig(jitter_max=0.0),
        schema=SMALL_SCHEMA,
        rng=rng,
        clock=clock,
    )
    clears = {}
    for n in range(n_profiles):
        clear = random_clear_profile(rng, f"P{n:03d}", coeff_rate=coeff_rate)
        clears[clear.id_P] = clear
        client.record_product(encrypt_product_profile(clear, master))
    return client, service, clears, master, clock


_keypair_cache: dict = {}


class TestStore:
    def test_defaults(self):
        cfg = ClientConfig()
        assert (cfg.store_cap, cfg.top_m, cfg.freq_cap) == (1000, 3, 10)

    def test_revisit_is_idempotent(self):
        client, _, clears, master, clock = make_world(n_profiles=3)
        clock.sleep(100)
        enc = encrypt_product_profile(clears["P001"], master)
        client.record_product(enc)
        assert len(client.records) == 3
        assert client.records["P001"].last_seen == 100.0
        assert client.records["P000"].last_seen == 0.0

    def test_eviction_at_cap(self):
        client, _, _, master, _ = make_world(
            n_profiles=5, config=ClientConfig(store_cap=5, jitter_max=0.0), seed=3
        )
        clear = random_clear_profile(random.Random(99), "Pnew")
        client.record_product(encrypt_product_profile(clear, master))
        assert len(client.records) == 5
        assert client.evictions == 1
        assert "Pnew" in client.records

    def test_eviction_prefers_unranked_then_worst_rank(self):
        client, _, _, master, _ = make_world(
            n_profiles=4, config=ClientConfig(store_cap=4, jitter_max=0.0), seed=4
        )
        recs = client.records
        recs["P000"].rank = 0
        recs["P001"].rank = 3
        recs["P002"].rank = 1
        # P003 unranked → evicted first
        client.record_product(
            encrypt_product_profile(random_clear_profile(random.Random(98), "Pa"), master)
        )
        assert "P003" not in recs and "P001" in recs
        # now all ranked but Pa: Pa (unranked) would go next; rank it best
        recs["Pa"].rank = 0
        client.record_product(
            encrypt_product_profile(random_clear_profile(random.Random(97), "Pb"), master)
        )
        assert "P001" not in recs  # worst rank (3) evicted
        assert len(recs) == 4

    def test_sensitive_flag_and_unknown_id(self):
        client, _, _, _, _ = make_world(n_profiles=2)
        client.set_sensitive("P000")
        assert client.records["P000"].sensitive
        client.set_sensitive("P000", False)
        assert not client.records["P000"].sensitive
        with pytest.raises(ClientError):
            client.set_sensitive("nope")

    def test_impression_counters(self):
        client, _, _, _, _ = make_world(n_profiles=1)
        for _ in range(3):
            client.register_ad_impression("P000")
        client.register_ad_impression("unknown")  # ignored
        assert client.records["P000"].impressions_today == 3
        client.reset_daily_counters()
        assert client.records["P000"].impressions_today == 0


class TestRequestRanking:
    def test_ranks_match_plaintext_oracle(self):
        client, _, clears, _, _ = make_world(n_profiles=100, seed=11)
        assert client.request_ranking("R1") == 100
        expected = oracle.ranking_order(
            list(clears.values()), client.user_profile, bucket_width=50_000
        )
        got = sorted(client.records.values(), key=lambda r: r.rank)
        assert [r.profile.id_P for r in got] == expected
        assert sorted(r.rank for r in got) == list(range(100))

    def test_rate_limit_failure_isolation(self):
        policy = RankingPolicy(rate_limit_per_day=1)
        client, _, _, _, clock = make_world(n_profiles=6, policy=policy)
        client.request_ranking("R1")
        ranks_before = {p: r.rank for p, r in client.records.items()}
        with pytest.raises(RankingUnavailable) as exc_info:
            client.request_ranking("R1")
        assert exc_info.value.retry_after > 0
        assert {p: r.rank for p, r in client.records.items()} == ranks_before
        # retry-after honored locally: no service roundtrip before it elapses
        with pytest.raises(RankingUnavailable):
            client.request_ranking("R1")
        clock.t = 86_400.0 + 1
        assert client.request_ranking("R1") == 6

    def test_no_records(self):
        client, _, _, _, _ = make_world()
        with pytest.raises(ClientError):
            client.request_ranking("R1")

    def test_sensitive_records_never_sent(self):
        client, service, _, _, _ = make_world(n_profiles=4)
        client.set_sensitive("P002")
        seen = []
        original = service.handle_rank

        def spy(req):
            seen.extend(e["id_P"] for e in req["entries"])
            return original(req)

        client._ranker = lambda url, req: spy(req)
        client.request_ranking("R1")
        assert "P002" not in seen and len(seen) == 3

    def test_jitter_delays_request(self):
        client, _, _, _, clock = make_world(
            n_profiles=5, config=ClientConfig(jitter_max=2.0)
        )
        client.request_ranking("R1")
        assert 0.0 < clock.now() <= 2.0


class TestBuildAdRequest:
    def test_top_m_and_shape(self):
        client, _, clears, _, _ = make_world(n_profiles=5, seed=21)
        client.request_ranking("R1")
        req = client.build_ad_request("https://news.example/a")
        assert set(req) == {"rid", "page", "entries"}
        assert len(req["entries"]) == 1
        entry = req["entries"][0]
        assert set(entry) == {"id_R", "skey", "payload"}
        assert entry["id_R"] == "R1"
        # top_m=3 products inside the sealed payload, in oracle order
        top = oracle.top_m(list(clears.values()), client.user_profile, 50_000, 3)
        assert self._payload_ids(client, req) == top

    @staticmethod
    def _payload_ids(client, req):
        rid = req["rid"]
        key = client._pending_sessions[rid]["R1"]
        payload = aead_open(
            base64.b64decode(req["entries"][0]["payload"]), key, CONTEXT_PRODUCT_PAYLOAD
        )
        return [item["id_P"] for item in json.loads(payload)]

    def test_freq_capped_product_excluded(self):
        client, _, _, _, _ = make_world(
            n_profiles=4, config=ClientConfig(top_m=4, freq_cap=10, jitter_max=0.0)
        )
        client.request_ranking("R1")
        for _ in range(10):
            client.register_ad_impression("P001")
        ids = self._payload_ids(client, client.build_ad_request("https://p.example"))
        assert "P001" not in ids and len(ids) == 3

    def test_all_sensitive_omits_retargeter(self):
        client, _, _, _, _ = make_world(n_profiles=3)
        client.request_ranking("R1")
        for id_P in list(client.records):
            client.set_sensitive(id_P)
        assert client.build_ad_request("https://p.example") is None

    def test_no_plaintext_product_data_on_the_wire(self):
        client, _, clears, _, _ = make_world(n_profiles=5, seed=31)
        client.request_ranking("R1")
        req = client.build_ad_request("https://p.example")
        wire = json.dumps(req)
        for id_P in clears:
            assert id_P not in wire
        assert client.client_id not in wire

    def test_fresh_rid_per_request(self):
        client, _, _, _, _ = make_world(n_profiles=3)
        client.request_ranking("R1")
        rids = {client.build_ad_request("https://p.example")["rid"] for _ in range(20)}
        assert len(rids) == 20

    def test_requires_prior_ranking(self):
        client, _, _, _, _ = make_world(n_profiles=3)
        assert client.build_ad_request("https://p.example") is None

    def test_batching_trigger(self):
        client, _, _, master, _ = make_world(n_profiles=4)
        assert client.retargeters_needing_ranking() == []  # below batch_min=5
        assert client.retargeters_needing_ranking(force=True) == ["R1"]
        client.record_product(
            encrypt_product_profile(random_clear_profile(random.Random(5), "P999"), master)
        )
        assert client.retargeters_needing_ranking() == ["R1"]
        client.request_ranking("R1")
        assert client.retargeters_needing_ranking(force=True) == []


class TestOpenDelivery:
    def test_round_trip_and_impression(self):
        client, _, _, _, _ = make_world(n_profiles=3, seed=41)
        client.request_ranking("R1")
        req = client.build_ad_request("https://p.example")
        # play the retargeter: unseal nothing — reuse the client's pending key
        key = client._pending_sessions[req["rid"]]["R1"]
        ad = {"id_P": "P000", "title": "ad for P000", "landing": "https://shop/P000"}
        delivery = {
            "rid": req["rid"],
            "id_R": "R1",
            "ad_ct": base64.b64encode(
                aead_seal(json.dumps(ad).encode(), key, CONTEXT_AD_CONTENT)
            ).decode(),
        }
        before = client.records["P000"].impressions_today
        assert client.open_delivery(delivery) == ad
        assert client.records["P000"].impressions_today == before + 1
        with pytest.raises(ClientError):
            client.open_delivery(delivery)  # session consumed

    def test_session_key_opens_for_recipient_only(self):
        rng = random.Random(51)
        master = MasterSecret(b"\x07" * 32)
        priv, pub = generate_keypair()
        clock = FakeClock()
        service = RankingService(master, schema=SMALL_SCHEMA, clock=clock.now)
        client = ClientAgent(
            "c9",
            random_user(rng),
            {"R1": pub},
            lambda url, req: service.handle_rank(req),
            config=ClientConfig(jitter_max=0.0),
            schema=SMALL_SCHEMA,
            rng=rng,
            clock=clock,
        )
        client.record_product(
            encrypt_product_profile(random_clear_profile(rng, "P0"), master)
        )
        client.request_ranking("R1")
        req = client.build_ad_request("https://p.example")
        blob = base64.b64decode(req["entries"][0]["skey"])
        assert open_session_key(blob, priv) == client._pending_sessions[req["rid"]]["R1"]
