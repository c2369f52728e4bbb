"""Engine <-> wire protocol: serving a toy oracle and querying it remotely."""

import json
import urllib.error
import urllib.request

import numpy as np
import pytest

from dift.core import DecodeConfig, TokenSequence
from dift.oracle import (
    ConditionalMixtureOracle,
    ConditionMode,
    FixedOracle,
    OracleTransportError,
    RemoteOracle,
    make_template_oracle,
)
from dift.scheduler import decode
from dift.serve import serve_oracle

MASK = 0


@pytest.fixture
def served():
    """Start a wire server around a given oracle; yields a client factory."""
    servers = []

    def start(oracle, **kwargs):
        server, _ = serve_oracle(oracle, **kwargs)
        servers.append(server)
        host, port = server.server_address[:2]
        return f"http://{host}:{port}"

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


def post_json(url, payload):
    request = urllib.request.Request(
        url, data=(json.dumps(payload) + "\n").encode(),
        headers={"Content-Type": "application/x-ndjson"},
    )
    try:
        with urllib.request.urlopen(request, timeout=5) as resp:
            return resp.status, json.loads(resp.read().decode().splitlines()[0])
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read().decode().splitlines()[0])


def logits_payload(**overrides):
    payload = {
        "request_id": "r1",
        "token_ids": [0, 0, 0],
        "masked": [True, True, True],
        "positions": [0, 2],
        "mode": "full",
    }
    payload.update(overrides)
    return payload


class TestEchoRoundTrip:
    def test_fixed_table_returns_bit_identical_rows(self, served):
        # float32-representable values survive the decimal round trip exactly.
        table = [[0.5, -1.25, 2.0, 0.0], [1.0, 0.0, -3.5, 0.125], [8.0, -0.75, 0.25, 3.0]]
        url = served(FixedOracle(table, mask_token_id=MASK))
        remote = RemoteOracle(url)
        seq = TokenSequence.fully_masked(3, MASK)
        rows = remote.query(seq, (0, 1, 2), ConditionMode.FULL)
        for row, expected in zip(sorted(rows, key=lambda r: r.position), table):
            np.testing.assert_array_equal(row.logits, expected)

    def test_metadata_round_trip(self, served):
        oracle = make_template_oracle(
            [1, 2], 0.7, vocab_size=16, mask_token_id=3,
            id_to_token={0: "[M]", 1: "a", 2: "b"},
        )
        remote = RemoteOracle(served(oracle))
        meta = remote.metadata()
        assert meta.vocab_size == 16
        assert meta.mask_token_id == 3
        assert meta.id_to_token == {0: "[M]", 1: "a", 2: "b"}

    def test_missing_id_to_token(self, served):
        oracle = make_template_oracle([1, 2], 0.7, vocab_size=8, mask_token_id=MASK)
        remote = RemoteOracle(served(oracle))
        assert remote.metadata().id_to_token is None


class TestSparseRows:
    def test_top_k_rows_carry_k_entries_and_tail_mass(self, served):
        oracle = make_template_oracle(
            [5, 9], 0.8, vocab_size=32, mask_token_id=MASK
        )
        remote = RemoteOracle(served(oracle), top_k=4)
        seq = TokenSequence.fully_masked(2, MASK)
        rows = remote.query(seq, (0, 1), ConditionMode.FULL)
        for row in rows:
            assert row.is_sparse
            assert len(row.token_ids) == 4
            assert 0.0 < row.tail_mass < 0.2
            dist = row.to_distribution(32)
            assert dist.sum() == pytest.approx(1.0, abs=1e-6)
            assert int(dist.argmax()) == (5 if row.position == 0 else 9)

    def test_sparse_decode_recovers_target(self, served):
        target = (5, 9, 3, 7)
        oracle = make_template_oracle(target, 0.8, vocab_size=32, mask_token_id=MASK)
        remote = RemoteOracle(served(oracle), top_k=4)
        result = decode(
            remote, TokenSequence.fully_masked(4, MASK), DecodeConfig(length=4, steps=2)
        )
        assert result.final_tokens == target

    def test_top_k_must_be_at_least_two(self, served):
        url = served(make_template_oracle([1], 0.7, vocab_size=8, mask_token_id=MASK))
        status, body = post_json(url + "/v1/logits", logits_payload(
            token_ids=[0], masked=[True], positions=[0], top_k=1
        ))
        assert status == 400 and "top_k" in body["error"]

    def test_server_top_k_limit(self, served):
        oracle = make_template_oracle([1, 2, 3], 0.7, vocab_size=64, mask_token_id=MASK)
        url = served(oracle, max_top_k=8)
        status, body = post_json(url + "/v1/logits", logits_payload(top_k=16))
        assert status == 400 and "limit" in body["error"]


class TestContractViolations:
    @pytest.fixture
    def url(self, served):
        return served(make_template_oracle([1, 2, 3], 0.7, vocab_size=8, mask_token_id=MASK))

    def test_unknown_mode(self, url):
        status, body = post_json(url + "/v1/logits", logits_payload(mode="both"))
        assert status == 400 and "mode" in body["error"]

    def test_position_not_masked(self, url):
        status, body = post_json(
            url + "/v1/logits", logits_payload(masked=[True, False, True], positions=[1])
        )
        assert status == 400 and "not masked" in body["error"]

    def test_length_mismatch(self, url):
        status, _ = post_json(url + "/v1/logits", logits_payload(masked=[True, True]))
        assert status == 400

    def test_unknown_field(self, url):
        status, body = post_json(url + "/v1/logits", logits_payload(extra=1))
        assert status == 400 and "unknown" in body["error"]

    def test_missing_request_id(self, url):
        payload = logits_payload()
        del payload["request_id"]
        status, _ = post_json(url + "/v1/logits", payload)
        assert status == 400

    def test_unknown_path_404(self, url):
        status, _ = post_json(url + "/v1/other", {})
        assert status == 404

    def test_client_maps_http_errors_to_transport_error(self, url):
        # Bypass the local pre-check to exercise the server-side 400 path.
        remote = RemoteOracle(url)
        payload = {
            "request_id": "x",
            "token_ids": [0, 0, 0],
            "masked": [True, True, True],
            "positions": [5],
            "mode": "full",
        }
        with pytest.raises(OracleTransportError):
            remote._http("/v1/logits", payload)

    def test_client_rejects_unreachable_host(self):
        remote = RemoteOracle("http://127.0.0.1:9", timeout=0.5)
        with pytest.raises(OracleTransportError):
            remote.metadata()


class TestRemoteDecode:
    def test_remote_decode_matches_local(self, served):
        target = (3, 9, 4, 1, 8, 2, 6, 5)
        # Distinct per-position confidences keep the commit order stable
        # under the wire's float32 rounding.
        profile = [0.9 - 0.05 * j for j in range(8)]
        oracle = make_template_oracle(target, profile, vocab_size=16, mask_token_id=MASK)
        remote = RemoteOracle(served(oracle))
        cfg = DecodeConfig(length=8, steps=4)
        local = decode(oracle, TokenSequence.fully_masked(8, MASK), cfg)
        over_wire = decode(remote, TokenSequence.fully_masked(8, MASK), cfg)
        assert over_wire.final_tokens == local.final_tokens
        for a, b in zip(local.trace.steps, over_wire.trace.steps):
            for ca, cb in zip(a.committed, b.committed):
                assert ca.position == cb.position and ca.token == cb.token
                assert cb.confidence == pytest.approx(ca.confidence, abs=1e-6)

    def test_vrg_pdm_decode_over_wire(self, served):
        oracle = ConditionalMixtureOracle(
            [1, 2, 3, 4], {2: 9}, 0.7, vocab_size=16, mask_token_id=MASK
        )
        remote = RemoteOracle(served(oracle))
        result = decode(
            remote,
            TokenSequence.fully_masked(4, MASK),
            DecodeConfig(length=4, steps=2, vrg_enabled=True, pdm_enabled=True),
        )
        assert result.oracle_calls == 4
        values = {p.position: p.pdm for s in result.trace.steps for p in s.pdm}
        assert values[2] > 0.1
        assert values[0] == pytest.approx(0.0, abs=1e-6)

    def test_identical_queries_are_cached(self, served):
        calls = []
        oracle = make_template_oracle([1, 2], 0.7, vocab_size=8, mask_token_id=MASK)
        original_query = oracle.query

        def counting_query(seq, positions, mode):
            calls.append(tuple(positions))
            return original_query(seq, positions, mode)

        oracle.query = counting_query
        remote = RemoteOracle(served(oracle))
        seq = TokenSequence.fully_masked(2, MASK)
        first = remote.query(seq, (0, 1), ConditionMode.FULL)
        second = remote.query(seq, (0, 1), ConditionMode.FULL)
        assert len(calls) == 1
        for a, b in zip(first, second):
            assert (a.logits == b.logits).all()


class TestRemoteAnswerDetection:
    def test_id_fallback_when_remote_has_no_token_map(self, served):
        # A remote without id_to_token still supports answer detection via
        # the id-pattern fallback.
        from dift.instrument import AnswerPattern, answer_step

        target = (1, 3, 5, 7)
        oracle = make_template_oracle(target, 0.8, vocab_size=16, mask_token_id=MASK)
        remote = RemoteOracle(served(oracle))
        assert remote.metadata().id_to_token is None
        result = decode(
            remote, TokenSequence.fully_masked(4, MASK), DecodeConfig(length=4, steps=4)
        )
        pattern = AnswerPattern(mode="token_match", id_prefix=(1, 3), id_candidates=(5,))
        step = answer_step(result.trace, pattern, remote.metadata())
        commit_steps = result.trace.commit_steps()
        assert step == max(commit_steps[0], commit_steps[1], commit_steps[2])

    def test_sparse_pdm_decode_over_wire(self, served):
        oracle = ConditionalMixtureOracle(
            [1, 2, 3, 4], {2: 9}, 0.7, vocab_size=32, mask_token_id=MASK
        )
        remote = RemoteOracle(served(oracle), top_k=8)
        result = decode(
            remote,
            TokenSequence.fully_masked(4, MASK),
            DecodeConfig(length=4, steps=2, pdm_enabled=True),
        )
        values = {p.position: p.pdm for s in result.trace.steps for p in s.pdm}
        assert values[2] > 0.1
        assert values[0] == pytest.approx(0.0, abs=1e-5)
