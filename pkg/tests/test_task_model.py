import math

import numpy as np
import pytest

from space_lab import task_model as tm
from space_lab.exceptions import ContractViolation, SupportCapExceeded
from space_lab.seeding import substream

from conftest import random_model


class TestLogProb:
    def test_uniform_model_anchor(self):
        model = tm.AutoregressiveTable.uniform(2, 2, 1)
        for response in tm.enumerate_support(2, 2):
            assert tm.log_prob(model, 0, response) == pytest.approx(
                math.log(0.25), abs=1e-12)

    def test_single_step_softmax_anchor(self):
        model = tm.AutoregressiveTable(2, 1, 1)
        model.logits[0, 0] = [math.log(3.0), 0.0]
        assert tm.log_prob(model, 0, (0,)) == pytest.approx(math.log(0.75), abs=1e-12)
        assert tm.log_prob(model, 0, (1,)) == pytest.approx(math.log(0.25), abs=1e-12)

    def test_matches_per_step_softmax_oracle(self):
        """log_prob must equal the product of per-step softmax probabilities,
        each recomputed here directly from the raw logits."""
        model = random_model(3, 2, 2, seed=91)
        offsets = model.node_offsets()
        for prompt in range(2):
            for response in tm.enumerate_support(3, 2):
                expected = 0.0
                prefix = 0
                for pos, token in enumerate(response):
                    row = model.logits[prompt, offsets[pos] + prefix]
                    probs = np.exp(row) / np.exp(row).sum()
                    expected += math.log(probs[token])
                    prefix = prefix * 3 + token
                assert tm.log_prob(model, prompt, response) == pytest.approx(
                    expected, rel=1e-12)

    def test_always_nonpositive(self):
        model = random_model(3, 3, 4, seed=5)
        for response in tm.enumerate_support(3, 3):
            assert tm.log_prob(model, 1, response) <= 1e-12

    def test_contract_violations(self):
        model = tm.AutoregressiveTable.uniform(2, 2, 1)
        with pytest.raises(ContractViolation):
            tm.log_prob(model, 3, (0, 0))
        with pytest.raises(ContractViolation):
            tm.log_prob(model, 0, (0, 0, 0))
        with pytest.raises(ContractViolation):
            tm.log_prob(model, 0, (0, 5))


class TestSample:
    def test_near_deterministic_model(self):
        model = tm.AutoregressiveTable.uniform(2, 2, 1)
        model.logits[:, :, 0] = 40.0
        rng = substream(1, 2)
        draws = tm.sample_batch(model, np.zeros(1000, dtype=int), rng)
        assert np.all(draws == 0)

    def test_uniform_binary_frequency(self):
        model = tm.AutoregressiveTable.uniform(2, 1, 1)
        draws = tm.sample_batch(model, np.zeros(100000, dtype=int), substream(5, 5))
        freq = float((draws[:, 0] == 0).mean())
        assert abs(freq - 0.5) <= 3.0 * math.sqrt(0.25 / 100000)

    def test_same_seed_same_response(self):
        model = random_model(3, 3, 2, seed=17)
        first = tm.sample(model, 1, substream(7, 3))
        second = tm.sample(model, 1, substream(7, 3))
        assert first == second

    def test_empirical_frequencies_match_exact_probabilities(self):
        """200k draws per response stay within 4 binomial standard errors
        of the exact enumeration probabilities."""
        model = random_model(2, 3, 1, seed=42)
        n = 200000
        draws = tm.sample_batch(model, np.zeros(n, dtype=int), substream(99, 2))
        probs = tm.response_prob_table(model)[0]
        support = tm.enumerate_support(2, 3)
        index = {resp: i for i, resp in enumerate(support)}
        counts = np.zeros(len(support))
        for row in draws:
            counts[index[tuple(row)]] += 1
        freq = counts / n
        bound = 4.0 * np.sqrt(probs * (1.0 - probs) / n)
        assert np.all(np.abs(freq - probs) <= bound)


class TestEnumerateSupport:
    def test_binary_length_two(self):
        assert tm.enumerate_support(2, 2) == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_ternary_length_one(self):
        assert tm.enumerate_support(3, 1) == [(0,), (1,), (2,)]

    def test_count(self):
        assert len(tm.enumerate_support(4, 4)) == 256

    def test_lexicographic_and_unique(self):
        support = tm.enumerate_support(3, 3)
        assert support == sorted(support)
        assert len(set(support)) == len(support) == 27

    def test_cap(self):
        with pytest.raises(SupportCapExceeded, match="support too large"):
            tm.enumerate_support(4, 9)
        # boundary: exactly at the cap is allowed
        assert len(tm.enumerate_support(2, 16)) == 65536


class TestSnapshot:
    def test_bitwise_equal(self):
        model = random_model(3, 2, 2, seed=3)
        copy = tm.snapshot(model)
        assert np.array_equal(copy.logits, model.logits)

    def test_independent(self):
        model = random_model(3, 2, 2, seed=3)
        copy = tm.snapshot(model)
        reference = copy.logits.copy()
        model.logits[0, 0, 0] += 1.0
        assert np.array_equal(copy.logits, reference)

    def test_idempotent(self):
        model = random_model(3, 2, 2, seed=3)
        assert np.array_equal(tm.snapshot(tm.snapshot(model)).logits, model.logits)


class TestKLDivergence:
    def test_identical_models(self):
        model = random_model(3, 3, 4, seed=11)
        q = tm.PromptDistribution.uniform(4)
        assert abs(tm.kl_divergence(model, tm.snapshot(model), q)) <= 1e-12

    def test_deterministic_vs_uniform_anchor(self):
        p = tm.AutoregressiveTable(2, 1, 1)
        p.logits[0, 0] = [40.0, 0.0]
        r = tm.AutoregressiveTable.uniform(2, 1, 1)
        q = tm.PromptDistribution.uniform(1)
        assert tm.kl_divergence(p, r, q) == pytest.approx(math.log(2), abs=1e-6)

    def test_matches_extended_precision_summation(self):
        """Exact KL agrees with a response-by-response fsum recomputation."""
        p = random_model(3, 2, 2, seed=21)
        r = random_model(3, 2, 2, seed=22)
        q = tm.PromptDistribution([0.25, 0.75])
        terms = []
        for x in range(2):
            for response in tm.enumerate_support(3, 2):
                lp = tm.log_prob(p, x, response)
                lr = tm.log_prob(r, x, response)
                terms.append(q.weights[x] * math.exp(lp) * (lp - lr))
        assert tm.kl_divergence(p, r, q) == pytest.approx(math.fsum(terms), abs=1e-13)

    def test_nonnegative_over_random_pairs(self):
        q = tm.PromptDistribution.uniform(3)
        for seed in range(10):
            p = random_model(2, 3, 3, seed=100 + seed)
            r = random_model(2, 3, 3, seed=200 + seed)
            assert tm.kl_divergence(p, r, q) >= -1e-12

    def test_zero_iff_pointwise_equal(self):
        model = random_model(3, 2, 2, seed=31)
        q = tm.PromptDistribution.uniform(2)
        nudged = tm.snapshot(model)
        nudged.logits[0, 0, 0] += 1e-3
        diff = np.abs(tm.response_prob_table(nudged)
                      - tm.response_prob_table(model)).max()
        assert diff > 1e-9
        assert tm.kl_divergence(model, nudged, q) > 0.0
        assert abs(tm.kl_divergence(model, tm.snapshot(model), q)) <= 1e-12

    def test_shape_mismatch(self):
        p = tm.AutoregressiveTable.uniform(2, 2, 1)
        r = tm.AutoregressiveTable.uniform(2, 3, 1)
        with pytest.raises(ContractViolation):
            tm.kl_divergence(p, r, tm.PromptDistribution.uniform(1))


class TestNormalization:
    def test_per_step_probabilities_sum_to_one(self):
        model = random_model(3, 3, 4, seed=55)
        probs = np.exp(tm.step_log_probs(model))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_total_response_mass(self):
        model = random_model(3, 3, 4, seed=56)
        mass = tm.response_prob_table(model).sum(axis=1)
        np.testing.assert_allclose(mass, 1.0, atol=1e-9)


class TestPromptDistribution:
    def test_rejects_negative_weights(self):
        with pytest.raises(ContractViolation):
            tm.PromptDistribution([0.5, 0.6, -0.1])

    def test_rejects_unnormalized(self):
        with pytest.raises(ContractViolation):
            tm.PromptDistribution([0.5, 0.6])

    def test_sampling_follows_weights(self):
        dist = tm.PromptDistribution([0.7, 0.2, 0.1])
        draws = dist.sample(substream(17, 1), 50000)
        freq = np.bincount(draws, minlength=3) / 50000
        np.testing.assert_allclose(freq, [0.7, 0.2, 0.1], atol=0.01)

    def test_vocab_invariant(self):
        with pytest.raises(ContractViolation):
            tm.Vocab(1)
        assert tm.Vocab(2).size == 2
