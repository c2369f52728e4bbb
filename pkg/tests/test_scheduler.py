import pytest

from dift.core import DecodeConfig, ScoreStrategy, TokenSequence, build_schedule
from dift.oracle import (
    ConditionalMixtureOracle,
    Oracle,
    OracleTransportError,
    RandomOracle,
    make_template_oracle,
)
from dift.scheduler import BatchDecodeError, DecodeAbortedError, decode, decode_batch

MASK = 0


def fully_masked(length):
    return TokenSequence.fully_masked(length, MASK)


def config(length, steps, **kwargs):
    return DecodeConfig(length=length, steps=steps, **kwargs)


class FlakyOracle(Oracle):
    """Fails with a transport error after a fixed number of queries."""

    def __init__(self, inner, fail_after):
        self.inner = inner
        self.fail_after = fail_after
        self.calls = 0

    def metadata(self):
        return self.inner.metadata()

    def query(self, seq, positions, mode):
        self.calls += 1
        if self.calls > self.fail_after:
            raise OracleTransportError("synthetic outage")
        return self.inner.query(seq, positions, mode)


class TestDecodeBasics:
    def test_template_decode_recovers_target(self):
        target = (3, 9, 4, 1, 8, 2, 6, 5)
        oracle = make_template_oracle(target, 0.6, vocab_size=16, mask_token_id=MASK)
        result = decode(oracle, fully_masked(8), config(8, 4))
        assert result.final_tokens == target
        assert result.oracle_calls == 4

    def test_trace_commit_counts_follow_schedule(self):
        oracle = make_template_oracle(
            list(range(1, 11)), 0.6, vocab_size=16, mask_token_id=MASK
        )
        result = decode(oracle, fully_masked(10), config(10, 4))
        schedule = build_schedule(10, 4)
        for record, count in zip(result.trace.steps, schedule.commit_counts):
            assert len(record.committed) == count

    def test_masked_count_matches_targets_each_step(self):
        for length, steps in [(10, 4), (7, 3), (64, 32), (5, 9), (1, 1), (3, 8)]:
            oracle = RandomOracle(1, vocab_size=12, mask_token_id=MASK)
            result = decode(oracle, fully_masked(length), config(length, steps))
            schedule = build_schedule(length, steps)
            remaining = length
            for record, target in zip(result.trace.steps, schedule.masked_targets[1:]):
                remaining -= len(record.committed)
                assert remaining == target
            assert remaining == 0

    def test_decode_is_deterministic(self):
        oracle = RandomOracle(5, vocab_size=24, mask_token_id=MASK)
        a = decode(oracle, fully_masked(16), config(16, 8))
        b = decode(oracle, fully_masked(16), config(16, 8))
        assert a.final_tokens == b.final_tokens
        assert a.trace.steps == b.trace.steps
        assert a.oracle_calls == b.oracle_calls

    def test_prompt_must_be_fully_masked(self):
        oracle = make_template_oracle([1, 2], 0.6, vocab_size=8, mask_token_id=MASK)
        with pytest.raises(ValueError):
            decode(oracle, fully_masked(2).commit({0: 1}), config(2, 2))

    def test_prompt_length_must_match_config(self):
        oracle = make_template_oracle([1, 2], 0.6, vocab_size=8, mask_token_id=MASK)
        with pytest.raises(ValueError):
            decode(oracle, fully_masked(3), config(2, 2))

    def test_prompt_must_use_mask_token(self):
        oracle = make_template_oracle([1, 2], 0.6, vocab_size=8, mask_token_id=MASK)
        bad = TokenSequence(tokens=(5, 5), masked=(True, True))
        with pytest.raises(ValueError):
            decode(oracle, bad, config(2, 2))

    def test_more_steps_than_length_still_counts_every_call(self):
        oracle = RandomOracle(2, vocab_size=8, mask_token_id=MASK)
        result = decode(oracle, fully_masked(1), config(1, 7))
        assert result.oracle_calls == 7
        assert sum(len(s.committed) for s in result.trace.steps) == 1
        assert any(len(s.committed) == 0 for s in result.trace.steps)


class TestIdentityGates:
    def test_gamma_zero_matches_baseline_bit_exactly(self):
        oracle = RandomOracle(9, vocab_size=20, mask_token_id=MASK)
        baseline = decode(oracle, fully_masked(12), config(12, 6, psp_enabled=False))
        gamma0 = decode(
            oracle, fully_masked(12), config(12, 6, psp_enabled=True, gamma=0.0)
        )
        assert baseline.final_tokens == gamma0.final_tokens
        assert baseline.trace.steps == gamma0.trace.steps
        assert baseline.oracle_calls == gamma0.oracle_calls

    def test_scale_zero_matches_conditional_only(self):
        oracle = RandomOracle(10, vocab_size=20, mask_token_id=MASK)
        plain = decode(oracle, fully_masked(12), config(12, 6, vrg_enabled=False))
        guided = decode(
            oracle, fully_masked(12), config(12, 6, vrg_enabled=True, s_vrg=0.0)
        )
        assert plain.final_tokens == guided.final_tokens
        for a, b in zip(plain.trace.steps, guided.trace.steps):
            assert a.committed == b.committed
        assert plain.oracle_calls == 6
        assert guided.oracle_calls == 12


class TestCallAccounting:
    @pytest.mark.parametrize(
        "vrg,pdm,expected_factor",
        [(False, False, 1), (True, False, 2), (False, True, 2), (True, True, 2)],
    )
    def test_calls_per_step(self, vrg, pdm, expected_factor):
        oracle = ConditionalMixtureOracle(
            [1, 2, 3, 4], {2: 7}, 0.7, vocab_size=10, mask_token_id=MASK
        )
        result = decode(
            oracle,
            fully_masked(4),
            config(4, 4, vrg_enabled=vrg, pdm_enabled=pdm),
        )
        assert result.oracle_calls == 4 * expected_factor
        for record in result.trace.steps:
            assert record.oracle_calls == expected_factor

    def test_psp_adds_no_calls(self):
        oracle = RandomOracle(3, vocab_size=10, mask_token_id=MASK)
        base = decode(oracle, fully_masked(8), config(8, 4))
        psp = decode(oracle, fully_masked(8), config(8, 4, psp_enabled=True))
        assert base.oracle_calls == psp.oracle_calls == 4


class TestStrategies:
    def test_left_to_right_commits_in_order(self):
        oracle = RandomOracle(4, vocab_size=16, mask_token_id=MASK)
        result = decode(
            oracle,
            fully_masked(16),
            config(16, 8, strategy=ScoreStrategy.LEFT_TO_RIGHT),
        )
        positions = [c.position for s in result.trace.steps for c in s.committed]
        assert positions == sorted(positions)
        assert positions == list(range(16))

    @pytest.mark.parametrize(
        "strategy", [ScoreStrategy.ENTROPY, ScoreStrategy.MARGIN]
    )
    def test_alternative_strategies_complete(self, strategy):
        oracle = RandomOracle(6, vocab_size=16, mask_token_id=MASK)
        result = decode(oracle, fully_masked(10), config(10, 5, strategy=strategy))
        assert len(result.final_tokens) == 10
        for record in result.trace.steps:
            for commit in record.committed:
                assert 0.0 <= commit.confidence <= 1.0

    def test_psp_reorders_but_commits_everything(self):
        oracle = make_template_oracle(
            [1] * 8, 0.6, (7, 0.3), vocab_size=16, mask_token_id=MASK
        )
        result = decode(
            oracle, fully_masked(8), config(8, 4, psp_enabled=True, gamma=0.5)
        )
        assert sorted(c.position for s in result.trace.steps for c in s.committed) == list(
            range(8)
        )
        last_commit_step = next(
            s.step
            for s in result.trace.steps
            for c in s.committed
            if c.position == 7
        )
        assert last_commit_step >= 2


class TestPdmRecords:
    def test_pdm_positive_only_at_visual_positions(self):
        oracle = ConditionalMixtureOracle(
            [1, 2, 3, 4], {1: 8, 3: 9}, 0.7, vocab_size=12, mask_token_id=MASK
        )
        result = decode(oracle, fully_masked(4), config(4, 2, pdm_enabled=True))
        records = {p.position: p.pdm for s in result.trace.steps for p in s.pdm}
        assert set(records) == {0, 1, 2, 3}
        assert records[0] == 0.0 and records[2] == 0.0
        assert records[1] > 0.1 and records[3] > 0.1

    def test_pdm_disabled_leaves_no_records(self):
        oracle = RandomOracle(7, vocab_size=10, mask_token_id=MASK)
        result = decode(oracle, fully_masked(6), config(6, 3))
        assert all(not s.pdm for s in result.trace.steps)


class TestFailureHandling:
    def test_abort_preserves_completed_steps(self):
        inner = RandomOracle(8, vocab_size=12, mask_token_id=MASK)
        flaky = FlakyOracle(inner, fail_after=3)
        with pytest.raises(DecodeAbortedError) as excinfo:
            decode(flaky, fully_masked(12), config(12, 6))
        partial = excinfo.value.partial_trace
        assert len(partial.steps) == 3
        assert sum(len(s.committed) for s in partial.steps) == 6

    def test_batch_preserves_siblings(self):
        inner = RandomOracle(8, vocab_size=12, mask_token_id=MASK)
        flaky = FlakyOracle(inner, fail_after=6)  # first prompt ok, second fails
        with pytest.raises(BatchDecodeError) as excinfo:
            decode_batch(flaky, [fully_masked(12), fully_masked(12)], config(12, 6))
        assert set(excinfo.value.results) == {0}
        assert set(excinfo.value.errors) == {1}
        assert len(excinfo.value.results[0].final_tokens) == 12


class TestDecodeBatch:
    def test_empty_batch(self):
        oracle = RandomOracle(1, vocab_size=8, mask_token_id=MASK)
        assert decode_batch(oracle, [], config(4, 2)) == []

    def test_identical_prompts_identical_results(self):
        oracle = RandomOracle(2, vocab_size=8, mask_token_id=MASK)
        a, b = decode_batch(oracle, [fully_masked(6), fully_masked(6)], config(6, 3))
        assert a.final_tokens == b.final_tokens
        assert a.trace.steps == b.trace.steps

    def test_batch_matches_sequential_loop(self):
        oracle = RandomOracle(3, vocab_size=8, mask_token_id=MASK)
        cfg = config(6, 3)
        batch = decode_batch(oracle, [fully_masked(6)] * 3, cfg)
        for result in batch:
            single = decode(oracle, fully_masked(6), cfg)
            assert result.final_tokens == single.final_tokens
            assert result.trace.steps == single.trace.steps


class TestPdmAllPositions:
    def test_records_every_masked_position(self):
        oracle = ConditionalMixtureOracle(
            [1, 2, 3, 4], {1: 8}, 0.7, vocab_size=12, mask_token_id=MASK
        )
        result = decode(
            oracle,
            fully_masked(4),
            config(4, 2, pdm_enabled=True, pdm_all_positions=True),
        )
        # Step 1 sees 4 masked positions, step 2 the remaining 2.
        assert [len(s.pdm) for s in result.trace.steps] == [4, 2]

    def test_default_curve_matches_committed_only_recording(self):
        from dift.instrument import pdm_curve

        oracle = ConditionalMixtureOracle(
            [1, 2, 3, 4, 5, 6], {1: 8, 4: 9}, 0.7, vocab_size=12, mask_token_id=MASK
        )
        narrow = decode(oracle, fully_masked(6), config(6, 3, pdm_enabled=True))
        wide = decode(
            oracle,
            fully_masked(6),
            config(6, 3, pdm_enabled=True, pdm_all_positions=True),
        )
        assert pdm_curve([narrow.trace], buckets=3) == pdm_curve([wide.trace], buckets=3)
        assert len(pdm_curve([wide.trace], buckets=3, committed_only=False)) == 3


class TestConcurrentDecodes:
    def test_shared_oracle_across_threads(self):
        import concurrent.futures

        oracle = RandomOracle(55, vocab_size=16, mask_token_id=MASK)
        cfg = config(12, 6, vrg_enabled=True, pdm_enabled=True)
        expected = decode(oracle, fully_masked(12), cfg)
        with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
            futures = [
                pool.submit(decode, oracle, fully_masked(12), cfg) for _ in range(8)
            ]
            for future in futures:
                result = future.result()
                assert result.final_tokens == expected.final_tokens
                assert result.trace.steps == expected.trace.steps
