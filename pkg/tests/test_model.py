import math

import numpy as np
import pytest

from raat.errors import DataError
from raat.model import (
    BOS_ID,
    EOS_ID,
    PARAM_FIELDS,
    RESERVED_TOKENS,
    SEP_ID,
    UNK_ID,
    ModelParams,
    Vocab,
    accumulate_gradients,
    build_vocab,
    classify,
    combined_loss,
    finite_difference,
    forward_sample,
    generate,
    gradient_check,
    init_params,
    load_checkpoint,
    max_relative_error,
    prompt_hidden,
    run_forward,
    save_checkpoint,
    teacher_forced_ids,
    tokenize,
)
from raat.seeding import rng


class TestVocab:
    def test_reserved_prefix(self):
        vocab = build_vocab(["hello world"])
        assert tuple(vocab.tokens[:5]) == RESERVED_TOKENS
        assert len(vocab) == 7

    def test_first_appearance_order(self):
        vocab = build_vocab(["b a", "a c"])
        assert vocab.tokens[5:] == ["b", "a", "c"]

    def test_min_freq(self):
        vocab = build_vocab(["x x y"], min_freq=2)
        assert vocab.tokens[5:] == ["x"]

    def test_encode_unknown_and_case(self):
        vocab = build_vocab(["alpha"])
        assert vocab.encode("Alpha beta") == [5, UNK_ID]

    def test_separator_literal_maps_to_reserved_id(self):
        vocab = build_vocab(["x [SEP] y"])
        assert SEP_ID in vocab.encode("x [SEP] y")
        assert "[sep]" not in vocab.tokens[5:]

    def test_decode_skips_reserved(self):
        vocab = build_vocab(["alpha beta"])
        assert vocab.decode([BOS_ID, 5, 6, EOS_ID]) == "alpha beta"

    def test_bad_prefix_rejected(self):
        with pytest.raises(DataError, match="reserved"):
            Vocab(tokens=["nope"])

    def test_tokenize_lowers_and_splits(self):
        assert tokenize("The  Cat SAT") == ["the", "cat", "sat"]


class TestInit:
    def test_shapes_and_ranges(self):
        params = init_params(12, 4, 6, seed=0)
        assert params.emb.shape == (12, 4)
        assert params.w1.shape == (6, 8)
        assert params.w2.shape == (12, 6)
        assert params.wc.shape == (4, 6)
        for name in ("b1", "b2", "bc"):
            assert not getattr(params, name).any()
        for arr in (params.emb, params.w1, params.w2, params.wc):
            assert np.abs(arr).max() <= 0.1
            assert arr.dtype == np.float64

    def test_deterministic(self):
        a = init_params(12, 4, 6, seed=1)
        b = init_params(12, 4, 6, seed=1)
        c = init_params(12, 4, 6, seed=2)
        for x, y in zip(a.arrays(), b.arrays()):
            assert np.array_equal(x, y)
        assert any(not np.array_equal(x, y) for x, y in zip(a.arrays(), c.arrays()))


class TestForward:
    def test_causal_mean_matches_naive_loop(self):
        params = init_params(12, 4, 6, seed=0)
        ids = [2, 5, 7, 5, 11]
        trace = run_forward(params, ids)
        for t in range(len(ids)):
            mean = params.emb[np.array(ids[: t + 1])].mean(axis=0)
            np.testing.assert_allclose(trace.m[t, 4:], mean, atol=1e-15)
            np.testing.assert_allclose(trace.m[t, :4], params.emb[ids[t]], atol=1e-15)

    def test_zero_params_give_uniform_loss(self):
        v = 12
        params = ModelParams(
            emb=np.zeros((v, 4)),
            w1=np.zeros((6, 8)),
            b1=np.zeros(6),
            w2=np.zeros((v, 6)),
            b2=np.zeros(v),
            wc=np.zeros((4, 6)),
            bc=np.zeros(4),
        )
        sample = forward_sample(params, [BOS_ID, 5, SEP_ID], [7, EOS_ID], 0)
        assert math.isclose(sample.gen_loss, math.log(v), rel_tol=0, abs_tol=1e-12)
        assert math.isclose(sample.cls_loss, math.log(4), rel_tol=0, abs_tol=1e-12)

    def test_empty_sequence_rejected(self):
        params = init_params(12, 4, 6, seed=0)
        with pytest.raises(ValueError):
            run_forward(params, [])

    def test_teacher_forcing_drops_final_target(self):
        assert teacher_forced_ids([1, 2], [7, 8, 3]) == [1, 2, 7, 8]

    def test_cls_logits_ignore_answer_continuation(self):
        # The classifier reads the last input position, which is causal, so
        # appending answer tokens must not change it.
        params = init_params(20, 4, 6, seed=3)
        input_ids = [BOS_ID, 6, 7, SEP_ID]
        sample = forward_sample(params, input_ids, [9, 10, EOS_ID], 2)
        np.testing.assert_allclose(
            sample.cls_logits, classify(params, input_ids), atol=1e-15
        )


class TestGradients:
    def _random_case(self, seed):
        gen = rng(seed, "case")
        params = init_params(14, 4, 5, seed=seed)
        n = int(gen.integers(2, 5))
        input_ids = [BOS_ID] + [int(t) for t in gen.integers(5, 14, size=n)] + [SEP_ID]
        answer_ids = [int(gen.integers(5, 14)), EOS_ID]
        kind = int(gen.integers(4))
        return params, input_ids, answer_ids, kind

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_combined_gradient_matches_fd(self, seed):
        params, input_ids, answer_ids, kind = self._random_case(seed)
        sample = forward_sample(params, input_ids, answer_ids, kind)
        analytic = params.zeros_like()
        accumulate_gradients(params, sample, analytic, w_gen=1.0, w_cls=1.0)
        numeric = finite_difference(
            params, lambda p: combined_loss(p, input_ids, answer_ids, kind), eps=1e-6
        )
        assert max_relative_error(analytic, numeric) < 1e-8

    def test_generation_term_alone(self):
        params, input_ids, answer_ids, kind = self._random_case(7)
        sample = forward_sample(params, input_ids, answer_ids, kind)
        analytic = params.zeros_like()
        accumulate_gradients(params, sample, analytic, w_gen=1.0, w_cls=0.0)
        numeric = finite_difference(
            params,
            lambda p: combined_loss(p, input_ids, answer_ids, kind, w_gen=1.0, w_cls=0.0),
            eps=1e-6,
        )
        assert max_relative_error(analytic, numeric) < 1e-8
        assert not analytic.wc.any() and not analytic.bc.any()

    def test_classification_term_alone(self):
        params, input_ids, answer_ids, kind = self._random_case(8)
        sample = forward_sample(params, input_ids, answer_ids, kind)
        analytic = params.zeros_like()
        accumulate_gradients(params, sample, analytic, w_gen=0.0, w_cls=1.0)
        numeric = finite_difference(
            params,
            lambda p: combined_loss(p, input_ids, answer_ids, kind, w_gen=0.0, w_cls=1.0),
            eps=1e-6,
        )
        assert max_relative_error(analytic, numeric) < 1e-8

    def test_weights_scale_linearly(self):
        params, input_ids, answer_ids, kind = self._random_case(9)
        sample = forward_sample(params, input_ids, answer_ids, kind)
        one = params.zeros_like()
        accumulate_gradients(params, sample, one, w_gen=1.0, w_cls=0.0)
        three = params.zeros_like()
        accumulate_gradients(params, sample, three, w_gen=3.0, w_cls=0.0)
        for a, b in zip(one.arrays(), three.arrays()):
            np.testing.assert_allclose(3.0 * a, b, atol=1e-12)

    def test_gradient_check_harness(self):
        assert gradient_check(seed=0, eps=1e-6) < 1e-8

    def test_overfits_one_example(self):
        # Plain gradient descent on a single pair must drive the loss to
        # near zero and make greedy decoding reproduce the answer.
        vocab = build_vocab(["alpha beta gamma delta question"])
        params = init_params(len(vocab), 8, 12, seed=0)
        input_ids = [BOS_ID] + vocab.encode("alpha beta question") + [SEP_ID]
        answer_ids = vocab.encode("gamma") + [EOS_ID]
        loss = None
        for _ in range(500):
            sample = forward_sample(params, input_ids, answer_ids, 0)
            grads = params.zeros_like()
            accumulate_gradients(params, sample, grads, w_gen=1.0, w_cls=0.0)
            params.add_scaled(grads, -0.5)
            loss = sample.gen_loss
        assert loss < 0.05
        assert vocab.decode(generate(params, input_ids)) == "gamma"


class TestGenerate:
    def test_stops_at_eos_and_caps_length(self):
        vocab = build_vocab(["a b c"])
        params = init_params(len(vocab), 4, 6, seed=0)
        out = generate(params, [BOS_ID, 5, SEP_ID], max_len=3)
        assert len(out) <= 3
        assert EOS_ID not in out

    def test_deterministic(self):
        params = init_params(12, 4, 6, seed=5)
        a = generate(params, [BOS_ID, 6, SEP_ID], max_len=5)
        b = generate(params, [BOS_ID, 6, SEP_ID], max_len=5)
        assert a == b

    def test_prompt_hidden_matches_trace(self):
        params = init_params(12, 4, 6, seed=1)
        ids = [BOS_ID, 5, 6, SEP_ID]
        np.testing.assert_array_equal(
            prompt_hidden(params, ids), run_forward(params, ids).hid[-1]
        )


class TestCheckpoint:
    def _roundtrip(self, tmp_path, params, vocab, seed=42):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, vocab, seed)
        return path, load_checkpoint(path)

    def test_bit_exact_round_trip(self, tmp_path):
        vocab = build_vocab(["one two three four"])
        params = init_params(len(vocab), 4, 6, seed=9)
        path, (loaded, vocab2, seed2) = self._roundtrip(tmp_path, params, vocab)
        assert seed2 == 42
        assert vocab2.tokens == vocab.tokens
        for name, a, b in zip(PARAM_FIELDS, params.arrays(), loaded.arrays()):
            assert np.array_equal(a, b), name

    def test_save_is_deterministic(self, tmp_path):
        vocab = build_vocab(["one two"])
        params = init_params(len(vocab), 4, 6, seed=9)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, params, vocab, 0)
        save_checkpoint(p2, params, vocab, 0)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_payload(self, tmp_path):
        vocab = build_vocab(["one two"])
        params = init_params(len(vocab), 4, 6, seed=9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, vocab, 0)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(DataError, match="payload bytes"):
            load_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        vocab = build_vocab(["one"])
        params = init_params(len(vocab), 4, 6, seed=9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, vocab, 0)
        blob = path.read_bytes()
        head_end = blob.index(b"\n")
        header = blob[:head_end].replace(b'"format_version": 1', b'"format_version": 9')
        path.write_bytes(header + blob[head_end:])
        with pytest.raises(DataError, match="format_version"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_vocab_size_mismatch_on_save(self, tmp_path):
        vocab = build_vocab(["one two three"])
        params = init_params(3, 4, 6, seed=0)
        with pytest.raises(DataError, match="vocab size"):
            save_checkpoint(tmp_path / "m.ckpt", params, vocab, 0)

    def test_non_finite_rejected(self, tmp_path):
        vocab = build_vocab(["one two"])
        params = init_params(len(vocab), 4, 6, seed=9)
        params.w1[0, 0] = np.nan
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, vocab, 0)
        with pytest.raises(DataError, match="non-finite"):
            load_checkpoint(path)
