"""Theory-verification machinery: the order-marginalization DP against brute
force, the ordering bound on random models, estimator equivalence, the loss
cross-check, and the task-evaluation row logic."""

import math

import numpy as np
import pytest

from duotalk.attention import flatten_sequence
from duotalk.corpus import (
    InterleavedSequence,
    Span,
    TaskSpec,
    build_vocabulary,
    expand_text,
    make_record,
)
from duotalk.corruption import CorruptionConfig, supervision_index
from duotalk.decoder import DecodeConfig, oracle_scorer, uniform_scorer
from duotalk.model import ModelConfig, TokenTransformer
from duotalk.trainer import build_batch
from duotalk.verify import (
    MAX_EXACT_SPAN,
    VerificationError,
    ar_prefix_nll,
    batch_model_scorer,
    bound_case,
    enumerate_order_nlls,
    equivalence_case,
    estimate_dce_nll,
    estimate_order_nll,
    evaluate_generation,
    evaluate_records,
    levenshtein,
    loss_crosscheck,
    order_marginal_stats,
    span_conditionals,
    uniform_reference,
    verify_unified_bound,
)


def tiny_model(vocab, seed=0, layers=1):
    cfg = ModelConfig(vocab_size=vocab.total_size, d_model=16, n_layers=layers,
                      n_heads=2, d_ff=32, max_len=64)
    return TokenTransformer(cfg, seed=seed)


def bound_task():
    return TaskSpec(min_text_len=1, max_text_len=3, r=2, n_t=2, b_span=4)


def random_cond_table(K, rng):
    """A synthetic subset-conditional table with no model behind it."""
    cond = np.full((1 << K, K), np.nan)
    for m in range(1, 1 << K):
        for s in range(K):
            if m >> s & 1:
                cond[m, s] = float(rng.uniform(0.01, 4.0))
    return cond


class TestOrderMarginalDP:
    @pytest.mark.parametrize("K", [1, 2, 3, 4, 5])
    def test_matches_brute_force(self, K):
        rng = np.random.default_rng(K)
        for _ in range(5):
            cond = random_cond_table(K, rng)
            mean_dp, ao_dp = order_marginal_stats(cond, K)
            nlls = enumerate_order_nlls(cond, K)
            assert len(nlls) == math.factorial(K)
            assert mean_dp == pytest.approx(float(np.mean(nlls)), rel=1e-12)
            # order-marginalized NLL: -log of the average order likelihood
            want = -(np.logaddexp.reduce(-nlls) - math.log(math.factorial(K)))
            assert ao_dp == pytest.approx(float(want), rel=1e-12)

    def test_jensen_inequality_on_tables(self):
        rng = np.random.default_rng(42)
        for K in (2, 3, 4):
            for _ in range(10):
                mean_dp, ao_dp = order_marginal_stats(random_cond_table(K, rng), K)
                assert mean_dp >= ao_dp - 1e-12

    def test_single_position_is_equality(self):
        cond = random_cond_table(1, np.random.default_rng(0))
        mean_dp, ao_dp = order_marginal_stats(cond, 1)
        assert mean_dp == ao_dp == cond[1, 0]


class TestSpanConditionals:
    def test_table_shape_and_nan_pattern(self, tiny_vocab):
        scorer = batch_model_scorer(tiny_model(tiny_vocab))
        rec = make_record(bound_task(), tiny_vocab, seed=5, index=0)
        tokens, layout = flatten_sequence(rec, tiny_vocab)
        _, _, _, spans = supervision_index(rec, tiny_vocab)
        positions = spans[0]
        K = len(positions)
        cond = span_conditionals(scorer, tokens, layout, positions, tiny_vocab)
        assert cond.shape == (1 << K, K)
        for m in range(1 << K):
            for s in range(K):
                if m >> s & 1:
                    assert np.isfinite(cond[m, s]) and cond[m, s] >= 0.0
                else:
                    assert np.isnan(cond[m, s])

    def test_against_manual_masking(self, tiny_vocab):
        model = tiny_model(tiny_vocab, seed=3)
        scorer = batch_model_scorer(model)
        rec = make_record(bound_task(), tiny_vocab, seed=6, index=1)
        tokens, layout = flatten_sequence(rec, tiny_vocab)
        _, _, _, spans = supervision_index(rec, tiny_vocab)
        positions = spans[-1][:2]  # grade a 2-slot sub-table by hand
        cond = span_conditionals(scorer, tokens, layout, spans[-1], tiny_vocab)
        for m in (1, 2, 3):
            row = tokens.copy()
            for s in range(2):
                if m >> s & 1:
                    row[positions[s]] = tiny_vocab.mask
            # leave any remaining span slots clean, exactly as the table does
            logits = scorer(row, layout)
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            for s in range(2):
                if m >> s & 1:
                    want = -logp[positions[s], tokens[positions[s]]]
                    assert cond[m, s] == pytest.approx(float(want), rel=1e-10)

    def test_refuses_oversized_span(self, tiny_vocab):
        scorer = batch_model_scorer(tiny_model(tiny_vocab))
        rec = make_record(bound_task(), tiny_vocab, seed=5, index=0)
        tokens, layout = flatten_sequence(rec, tiny_vocab)
        fake = np.arange(MAX_EXACT_SPAN + 1) + len(rec.prompt)
        with pytest.raises(VerificationError, match="capped"):
            span_conditionals(scorer, tokens, layout, fake, tiny_vocab)


class TestArPrefixNll:
    def test_matches_manual_softmax(self, tiny_vocab):
        model = tiny_model(tiny_vocab, seed=7)
        scorer = batch_model_scorer(model)
        rec = make_record(bound_task(), tiny_vocab, seed=2, index=3)
        tokens, layout = flatten_sequence(rec, tiny_vocab)
        got = ar_prefix_nll(scorer, tokens, layout, tiny_vocab)
        logits = scorer(tokens, layout)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        want = sum(
            -float(logp[k - 1, tokens[k]])
            for k in range(1, len(tokens))
            if layout.kinds[k] == 1
        )
        assert got == pytest.approx(want, rel=1e-12)


class TestUnifiedBound:
    def test_random_models_and_sequences(self, tiny_vocab):
        cases = []
        for seed in range(4):
            scorer = batch_model_scorer(tiny_model(tiny_vocab, seed=seed, layers=2))
            seqs = [make_record(bound_task(), tiny_vocab, seed=20 + seed, index=i)
                    for i in range(3)]
            report = verify_unified_bound(scorer, seqs, tiny_vocab)
            assert report.n_cases == 3
            assert report.violations == 0
            assert report.min_slack >= -1e-9
            assert report.ok
            cases.extend(report.cases)
        # the bound is not vacuous: some case is strictly above equality
        assert any(c.slack > 1e-6 for c in cases)

    def test_length_one_spans_have_zero_slack(self, tiny_vocab):
        # r=1, n_t=1: every audio span is one content token plus the end marker…
        spec = TaskSpec(min_text_len=1, max_text_len=1, r=1, n_t=1, b_span=1)
        seq = make_record(spec, tiny_vocab, seed=4, index=0)
        # …so strip the marker-bearing span down to a single supervised slot by
        # building the one-slot sequence directly
        one = InterleavedSequence(
            prompt=[1, 2],
            spans=[Span("text", [3, tiny_vocab.soa]),
                   Span("audio", [tiny_vocab.audio_base + 1])],
            eos=False,
            direction="tts",
        )
        scorer = batch_model_scorer(tiny_model(tiny_vocab, seed=9))
        report = verify_unified_bound(scorer, [one, seq], tiny_vocab)
        case = report.cases[0]
        assert case.span_sizes == [1]
        assert case.slack == 0.0
        assert report.len1_nonzero == 0

    def test_case_arithmetic(self, tiny_vocab):
        scorer = batch_model_scorer(tiny_model(tiny_vocab, seed=1))
        rec = make_record(bound_task(), tiny_vocab, seed=8, index=2)
        case = bound_case(scorer, rec, tiny_vocab)
        assert case.lhs == pytest.approx(case.l_ar + sum(case.span_mean_nll))
        assert case.neg_log_marginal == pytest.approx(case.l_ar + sum(case.span_ao_nll))
        assert case.slack == pytest.approx(case.lhs - case.neg_log_marginal)
        d = case.to_dict()
        assert d["slack"] == case.slack and d["span_sizes"] == case.span_sizes


class TestEstimatorEquivalence:
    def _span_setup(self, vocab, seed):
        rec = make_record(bound_task(), vocab, seed=seed, index=0)
        tokens, layout = flatten_sequence(rec, vocab)
        _, _, _, spans = supervision_index(rec, vocab)
        return tokens, layout, spans[0]

    def test_order_estimator_exact_for_single_slot(self, tiny_vocab):
        scorer = batch_model_scorer(tiny_model(tiny_vocab, seed=2))
        tokens, layout, _ = self._span_setup(tiny_vocab, 3)
        pos = np.array([len(tokens) - 2])
        mean, se = estimate_order_nll(scorer, tokens, layout, pos, tiny_vocab,
                                      n=50, rng=np.random.default_rng(0))
        assert se == pytest.approx(0.0, abs=1e-12)  # identical draws, round-off only
        row = tokens.copy()
        row[pos[0]] = tiny_vocab.mask
        logits = scorer(row, layout)
        z = logits[pos[0]] - logits[pos[0]].max()
        want = -(z[tokens[pos[0]]] - np.log(np.exp(z).sum()))
        assert mean == pytest.approx(float(want), rel=1e-10)

    def test_uniform_scorer_closed_form(self, tiny_vocab):
        base = uniform_scorer(tiny_vocab)

        def batched(tokens, layout):
            tokens = np.asarray(tokens)
            if tokens.ndim == 1:
                return base(tokens, layout)
            return np.stack([base(t, layout) for t in tokens])

        tokens, layout, pos = self._span_setup(tiny_vocab, 3)
        K = len(pos)
        want = uniform_reference(K, tiny_vocab.total_size)
        mean_o, se_o = estimate_order_nll(batched, tokens, layout, pos, tiny_vocab,
                                          n=200, rng=np.random.default_rng(1))
        assert se_o == pytest.approx(0.0, abs=1e-9)
        assert mean_o == pytest.approx(want, rel=1e-12)
        mean_d, se_d = estimate_dce_nll(batched, tokens, layout, pos, tiny_vocab,
                                        n=4000, rng=np.random.default_rng(2))
        assert abs(mean_d - want) <= 3.0 * se_d

    def test_case_on_real_model(self, tiny_vocab):
        model = tiny_model(tiny_vocab, seed=5)
        scorer = batch_model_scorer(model)
        rec = make_record(bound_task(), tiny_vocab, seed=9, index=1)
        case = equivalence_case(scorer, rec, tiny_vocab, n=3000, seed=11)
        assert case.n == 3000
        assert case.ok, f"diff {case.diff} vs 3*SE {3 * case.combined_se}"
        d = case.to_dict()
        assert d["ok"] and d["diff"] == pytest.approx(case.diff)

    def test_estimators_converge_to_exact_average(self, tiny_vocab):
        # anchor both Monte Carlo estimates to the enumeration value
        scorer = batch_model_scorer(tiny_model(tiny_vocab, seed=6))
        tokens, layout, pos = self._span_setup(tiny_vocab, 12)
        cond = span_conditionals(scorer, tokens, layout, pos, tiny_vocab)
        exact_mean, _ = order_marginal_stats(cond, len(pos))
        mean_o, se_o = estimate_order_nll(scorer, tokens, layout, pos, tiny_vocab,
                                          n=3000, rng=np.random.default_rng(3))
        assert abs(mean_o - exact_mean) <= 4.0 * max(se_o, 1e-12)
        mean_d, se_d = estimate_dce_nll(scorer, tokens, layout, pos, tiny_vocab,
                                        n=6000, rng=np.random.default_rng(4))
        assert abs(mean_d - exact_mean) <= 4.0 * max(se_d, 1e-12)

    def test_no_audio_span_rejected(self, tiny_vocab):
        seq = InterleavedSequence(prompt=[1], spans=[], eos=True, direction="tts")
        scorer = batch_model_scorer(tiny_model(tiny_vocab))
        with pytest.raises(ValueError, match="no audio span"):
            equivalence_case(scorer, seq, tiny_vocab, n=10, seed=0)


class TestLossCrosscheck:
    def test_agrees_on_real_batches(self, tiny_vocab):
        model = tiny_model(tiny_vocab, seed=4)
        records = [make_record(bound_task(), tiny_vocab, seed=1, index=i)
                   for i in range(4)]
        items = build_batch(records, CorruptionConfig(), tiny_vocab, seed=2, step=1)
        report = loss_crosscheck(model, items, tiny_vocab)
        assert report["ok"] and report["max_rel_err"] <= report["tol"]
        assert len(report["rows"]) == 4

    def test_detects_sign_flip(self, tiny_vocab, monkeypatch):
        import duotalk.model as model_mod

        model = tiny_model(tiny_vocab, seed=4)
        records = [make_record(bound_task(), tiny_vocab, seed=1, index=0)]
        items = build_batch(records, CorruptionConfig(), tiny_vocab, seed=2, step=3)
        real = model_mod.unified_loss

        def flipped(logits, item, mask_id):
            bd = real(logits, item, mask_id)
            bd.l_ar = -bd.l_ar
            return bd

        monkeypatch.setattr(model_mod, "unified_loss", flipped)
        with pytest.raises(VerificationError, match="disagrees"):
            loss_crosscheck(model, items, tiny_vocab)


class TestBatchScorer:
    def test_single_and_batch_shapes(self, tiny_vocab):
        model = tiny_model(tiny_vocab, seed=8)
        scorer = batch_model_scorer(model)
        rec = make_record(bound_task(), tiny_vocab, seed=3, index=0)
        tokens, layout = flatten_sequence(rec, tiny_vocab)
        one = scorer(tokens, layout)
        assert one.shape == (len(tokens), tiny_vocab.total_size)
        many = scorer(np.stack([tokens, tokens]), layout)
        assert many.shape == (2, len(tokens), tiny_vocab.total_size)
        np.testing.assert_allclose(many[0], one)
        np.testing.assert_allclose(many[1], one)


class TestLevenshtein:
    def test_known_values(self):
        assert levenshtein([], []) == 0
        assert levenshtein([1, 2, 3], [1, 2, 3]) == 0
        assert levenshtein([1, 2, 3], [1, 3]) == 1  # delete
        assert levenshtein([1, 3], [1, 2, 3]) == 1  # insert
        assert levenshtein([1, 2, 3], [1, 9, 3]) == 1  # substitute
        # "kitten" -> "sitting" as ids: substitute, substitute, insert
        assert levenshtein([10, 8, 19, 19, 4, 13], [18, 8, 19, 19, 8, 13, 6]) == 3
        assert levenshtein([], [7, 8]) == 2

    def test_metric_properties(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            a = list(rng.integers(0, 5, size=rng.integers(0, 8)))
            b = list(rng.integers(0, 5, size=rng.integers(0, 8)))
            d = levenshtein(a, b)
            assert d == levenshtein(b, a)
            assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
            assert (d == 0) == (a == b)


def seq_for_eval(vocab, task, text, final_groups=None, flip=None):
    """Build an interleaved sequence echoing `text`; optionally cut the final
    span to `final_groups` codebook groups or corrupt one audio token."""
    chunks = [text[i:i + task.n_t] for i in range(0, len(text), task.n_t)]
    spans = []
    for ci, chunk in enumerate(chunks):
        spans.append(Span("text", [vocab.text_base + t for t in chunk] + [vocab.soa]))
        audio = list(expand_text(chunk, vocab, task.r))
        if ci == len(chunks) - 1 and final_groups is not None:
            audio = audio[: final_groups * task.r]
        spans.append(Span("audio", audio + [vocab.eoa]))
    if flip is not None:
        si, j = flip
        toks = list(spans[2 * si + 1].tokens)
        toks[j] = vocab.audio_base + (toks[j] - vocab.audio_base + 1) % vocab.n_audio
        spans[2 * si + 1] = Span("audio", toks)
    return InterleavedSequence(prompt=[vocab.text_base + t for t in text][: len(text)],
                               spans=spans, eos=True, direction="tts")


class TestEvaluateGeneration:
    def setup_method(self):
        self.vocab = build_vocabulary(8, 10)
        self.task = TaskSpec(min_text_len=1, max_text_len=4, r=2, n_t=2, b_span=4)

    def test_perfect_generation(self):
        ref = seq_for_eval(self.vocab, self.task, [1, 2, 3])
        row = evaluate_generation(ref, ref, self.vocab, self.task)
        assert row.text_exact and row.eoa_exact
        assert row.audio_correct == row.audio_total == 6
        assert row.edit_distance == 0 and row.ref_len == 3

    def test_premature_final_end_marker(self):
        ref = seq_for_eval(self.vocab, self.task, [1, 2, 3, 4])
        gen = seq_for_eval(self.vocab, self.task, [1, 2, 3, 4], final_groups=1)
        row = evaluate_generation(gen, ref, self.vocab, self.task)
        assert row.text_exact
        assert not row.eoa_exact
        assert row.final_content == 2 and row.expected_final == 4

    def test_wrong_audio_token_keeps_eoa_credit(self):
        ref = seq_for_eval(self.vocab, self.task, [1, 2])
        gen = seq_for_eval(self.vocab, self.task, [1, 2], flip=(0, 1))
        row = evaluate_generation(gen, ref, self.vocab, self.task)
        assert row.eoa_exact and row.text_exact
        assert row.audio_correct == row.audio_total - 1

    def test_audio_graded_against_own_text(self):
        # the generator wrote the wrong transcript but echoed it faithfully:
        # full audio credit, no text credit, edit distance 1
        ref = seq_for_eval(self.vocab, self.task, [1, 2])
        gen = seq_for_eval(self.vocab, self.task, [1, 5])
        row = evaluate_generation(gen, ref, self.vocab, self.task)
        assert not row.text_exact
        assert row.audio_correct == row.audio_total
        assert row.eoa_exact
        assert row.edit_distance == 1

    def test_mid_span_length_error_flags_eoa(self):
        ref = seq_for_eval(self.vocab, self.task, [1, 2, 3, 4])
        gen = seq_for_eval(self.vocab, self.task, [1, 2, 3, 4])
        toks = list(gen.spans[1].tokens)
        gen.spans[1] = Span("audio", toks[:-2] + [toks[-1]])  # drop one content slot
        row = evaluate_generation(gen, ref, self.vocab, self.task)
        assert not row.eoa_exact

    def test_no_audio_at_all(self):
        ref = seq_for_eval(self.vocab, self.task, [1, 2])
        gen = InterleavedSequence(prompt=ref.prompt, spans=[], eos=True, direction="tts")
        row = evaluate_generation(gen, ref, self.vocab, self.task)
        assert not row.eoa_exact and row.audio_total == 0


class TestEvaluateRecords:
    def test_oracle_scorer_is_perfect(self, tiny_vocab):
        task = TaskSpec(min_text_len=1, max_text_len=4, r=2, n_t=2, b_span=4)
        records = [make_record(task, tiny_vocab, seed=7, index=i) for i in range(5)]
        dcfg = DecodeConfig(steps=2, block=3, max_audio=10, gamma=0.0, tau=0.0,
                            ar_temperature=0.0, seed=1, max_total_len=64)
        report = evaluate_records(
            lambda ref: oracle_scorer(tiny_vocab, task, ref.transcript(tiny_vocab)),
            records, tiny_vocab, task, dcfg)
        assert report.n == 5
        assert report.audio_accuracy == 1.0
        assert report.eoa_exact_rate == 1.0
        assert report.text_exact_rate == 1.0
        assert report.mean_edit_distance == 0.0
        assert report.eoa_errors() == [0] * 5

    def test_uniform_scorer_is_chance(self, tiny_vocab):
        task = TaskSpec(min_text_len=2, max_text_len=4, r=2, n_t=2, b_span=4)
        records = [make_record(task, tiny_vocab, seed=8, index=i) for i in range(20)]
        dcfg = DecodeConfig(steps=1, block=4, max_audio=8, gamma=0.0, tau=1.0,
                            ar_temperature=1.0, top_k=tiny_vocab.total_size, top_p=1.0,
                            seed=3, max_spans=6, max_total_len=64)
        base = uniform_scorer(tiny_vocab)
        report = evaluate_records(lambda ref: base, records, tiny_vocab, task, dcfg)
        # audio slots drawn uniformly from n_audio content ids plus the marker
        assert 0.0 < report.audio_accuracy < 0.25
        assert report.text_exact_rate < 0.5
        d = report.to_dict()
        assert d["n"] == 20 and len(d["rows"]) == 20
