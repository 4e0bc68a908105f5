"""Tokenizer, hash-bag featurizer, prompt templates, and description banks."""

import numpy as np
import pytest
from scipy import stats

from anticipate.errors import DataError
from anticipate.text import (
    DescriptionBank,
    bucket_and_sign,
    fnv1a64,
    generate_bank,
    hash_bag,
    hash_embed,
    load_denylist,
    render_action_prompt,
    render_object_prompt,
    tokenize,
)


class TestTokenize:
    def test_punctuation_stripped(self):
        assert tokenize("Wash the plate.") == ["wash", "the", "plate"]

    def test_colon_splits(self):
        assert tokenize("take finger:lady") == ["take", "finger", "lady"]

    def test_empty(self):
        assert tokenize("") == []

    def test_digits_kept(self):
        assert tokenize("pan 2, stove-top") == ["pan", "2", "stove", "top"]


class TestHashing:
    # reference vectors published for 64-bit FNV-1a
    def test_fnv_reference_vectors(self):
        assert fnv1a64("") == 0xCBF29CE484222325
        assert fnv1a64("a") == 0xAF63DC4C8601EC8C
        assert fnv1a64("foobar") == 0x85944171F73967E8

    def test_sign_is_popcount_parity(self):
        for tok in ("wash", "plate", "knife", "tap"):
            _, sign = bucket_and_sign(tok, 64)
            expect = 1 if bin(fnv1a64(tok)).count("1") % 2 == 0 else -1
            assert sign == expect

    def test_empty_bag_is_zero_vector(self):
        ids, weights = hash_bag([])
        assert ids.size == 0 and weights.size == 0
        assert not hash_embed([]).any()

    def test_deterministic(self):
        a = hash_embed(["cut", "the", "tomato"])
        b = hash_embed(["cut", "the", "tomato"])
        assert np.array_equal(a, b)

    def test_ids_sorted_and_weights_normalized(self):
        ids, weights = hash_bag(["wash", "plate", "sink", "soap"], buckets=4096)
        assert np.all(np.diff(ids) > 0)
        assert np.linalg.norm(weights) == pytest.approx(1.0, abs=1e-6)

    def test_disjoint_sets_orthogonal_without_collisions(self):
        left = ["wash", "plate", "sink"]
        right = ["take", "knife", "board"]
        buckets_left = {bucket_and_sign(t, 4096)[0] for t in left}
        buckets_right = {bucket_and_sign(t, 4096)[0] for t in right}
        assert not buckets_left & buckets_right  # chosen to avoid collisions
        dot = float(hash_embed(left, 4096) @ hash_embed(right, 4096))
        assert dot == 0.0

    def test_opposite_signs_cancel(self):
        # search a tiny bucket space for a colliding pair with opposing signs
        words = [c1 + c2 for c1 in "abcdefgh" for c2 in "abcdefgh"]
        pair = None
        for i, w1 in enumerate(words):
            b1, s1 = bucket_and_sign(w1, 4)
            for w2 in words[i + 1 :]:
                b2, s2 = bucket_and_sign(w2, 4)
                if b1 == b2 and s1 == -s2:
                    pair = (w1, w2, b1)
                    break
            if pair:
                break
        assert pair is not None
        w1, w2, bucket = pair
        ids, _ = hash_bag([w1, w2], buckets=4)
        assert bucket not in ids

    def test_repeat_token_accumulates(self):
        ids, weights = hash_bag(["knife", "knife"], buckets=4096)
        assert ids.size == 1
        assert abs(weights[0]) == pytest.approx(1.0, abs=1e-6)


class TestPrompts:
    def test_object_prompt(self):
        got = render_object_prompt(["sponge", "tap"])
        assert got == "A video containing the following objects: sponge, tap"

    def test_object_prompt_empty(self):
        assert render_object_prompt([]).endswith("objects: none")

    def test_object_prompt_order_preserved(self):
        got = render_object_prompt(["bin", "bag"])
        assert got == "A video containing the following objects: bin, bag"

    def test_action_prompt(self):
        got = render_action_prompt(["wash plate"])
        assert got == "A video containing the following actions: wash plate"

    def test_action_prompt_absent(self):
        assert render_action_prompt([]) == "A video containing the following actions: no action"

    def test_action_prompt_multiple(self):
        got = render_action_prompt(["wrap bag"])
        assert got.endswith("actions: wrap bag")


class TestDescriptionBank:
    def test_single_entry_in_both_modes(self):
        bank = DescriptionBank({0: ["only one"]})
        rng = np.random.default_rng(0)
        assert bank.sample(0, rng, mode="train") == "only one"
        assert bank.sample(0, rng, mode="eval") == "only one"

    def test_eval_mode_always_first(self):
        bank = DescriptionBank({3: ["first", "second", "third"]})
        rng = np.random.default_rng(1)
        got = {bank.sample(3, rng, mode="eval") for _ in range(50)}
        assert got == {"first"}

    def test_train_mode_approximately_uniform(self):
        descs = [f"entry {i}" for i in range(10)]
        bank = DescriptionBank({0: descs})
        rng = np.random.default_rng(2)
        counts = {d: 0 for d in descs}
        n = 10_000
        for _ in range(n):
            counts[bank.sample(0, rng, mode="train")] += 1
        freqs = np.array([counts[d] / n for d in descs])
        assert np.all(np.abs(freqs - 0.1) < 0.02)
        assert stats.chisquare(list(counts.values())).pvalue > 0.01

    def test_unknown_class(self):
        bank = DescriptionBank({0: ["x"]})
        with pytest.raises(DataError):
            bank.sample(99, np.random.default_rng(0))

    def test_empty_list_rejected(self):
        with pytest.raises(DataError):
            DescriptionBank({0: []})
        with pytest.raises(DataError):
            DescriptionBank({0: ["ok", ""]})

    def test_validate_against(self):
        bank = DescriptionBank({0: ["a"], 1: ["b"]})
        bank.validate_against([0, 1])
        with pytest.raises(DataError, match=r"\[2\]"):
            bank.validate_against([0, 1, 2])

    def test_round_trip(self, tmp_path):
        bank = DescriptionBank({0: ["wash the plate"], 5: ["cut a tomato", "slice it"]})
        path = tmp_path / "bank.json"
        bank.save(path)
        loaded = DescriptionBank.load(path)
        assert loaded.entries == bank.entries

    def test_load_rejects_bad_json(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text("{not json")
        with pytest.raises(DataError):
            DescriptionBank.load(path)

    def test_load_rejects_non_integer_key(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text('{"abc": ["x"]}')
        with pytest.raises(DataError):
            DescriptionBank.load(path)

    def test_denylist_filters_and_guards_emptiness(self, tmp_path):
        path = tmp_path / "bank.json"
        DescriptionBank({0: ["good entry", "bad word here"], 1: ["bad word only"]}).save(path)
        deny = tmp_path / "deny.txt"
        deny.write_text("bad word\n\n")
        terms = load_denylist(deny)
        assert terms == ["bad word"]
        with pytest.raises(DataError, match="denylist"):
            DescriptionBank.load(path, denylist=terms)
        DescriptionBank({0: ["good entry", "bad word here"]}).save(path)
        loaded = DescriptionBank.load(path, denylist=terms)
        assert loaded.entries[0] == ["good entry"]

    def test_generate_bank_covers_all_actions(self):
        rng = np.random.default_rng(3)
        bank = generate_bank([("wash", "plate"), ("cut", "tomato")], rng, n_descriptions=4)
        assert bank.classes() == [0, 1]
        for cls, (verb, noun) in enumerate([("wash", "plate"), ("cut", "tomato")]):
            assert len(bank.entries[cls]) == 4
            for desc in bank.entries[cls]:
                assert verb in desc and noun in desc
