"""Decoder contracts: schedule arithmetic, guidance algebra, sampling filters,
budget forcing, first-terminator truncation, and trace completeness (the event
stream replays to the exact output token stream)."""

import json

import numpy as np
import pytest

from duotalk.attention import AUDIO, TEXT
from duotalk.corpus import TaskSpec, echo_codebook, make_record, validate_sequence
from duotalk.decoder import (
    DecodeConfig,
    _ar_sample,
    cfg_logits,
    hybrid_generate,
    oracle_scorer,
    schedule,
    uniform_scorer,
)


def quiet_cfg(**kw):
    base = dict(steps=2, block=4, max_audio=12, gamma=0.0, tau=0.0,
                ar_temperature=0.0, seed=0, max_text=8, max_spans=8, max_total_len=96)
    base.update(kw)
    return DecodeConfig(**base)


class TestSchedule:
    def test_sums_and_remainder_first(self):
        assert schedule(10, 4) == [3, 3, 2, 2]
        assert schedule(7, 3) == [3, 2, 2]
        assert schedule(4, 4) == [1, 1, 1, 1]
        assert schedule(3, 5) == [1, 1, 1, 0, 0]
        assert schedule(0, 3) == [0, 0, 0]

    def test_random_sweep_total(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n, steps = int(rng.integers(0, 50)), int(rng.integers(1, 12))
            s = schedule(n, steps)
            assert len(s) == steps and sum(s) == n
            assert max(s) - min(s) <= 1  # as even as possible
            assert s == sorted(s, reverse=True)  # remainder lands earliest

    def test_errors(self):
        with pytest.raises(ValueError):
            schedule(-1, 3)
        with pytest.raises(ValueError):
            schedule(5, 0)


class TestGuidance:
    def test_affine_combination(self):
        cond = np.array([1.0, 2.0, 3.0])
        uncond = np.array([0.0, 1.0, -1.0])
        np.testing.assert_allclose(cfg_logits(cond, uncond, 0.0), cond)
        np.testing.assert_allclose(cfg_logits(cond, uncond, 1.0), 2 * cond - uncond)
        g = 0.3
        np.testing.assert_allclose(
            cfg_logits(cond, uncond, g), uncond + (g + 1) * (cond - uncond)
        )


class TestArSample:
    def test_temperature_zero_is_argmax_over_legal(self):
        logits = np.array([5.0, 9.0, 1.0, 7.0])
        legal = np.array([0, 2, 3])  # id 1 (the global max) is not legal
        tok, prob = _ar_sample(logits, legal, quiet_cfg(ar_temperature=0.0),
                               np.random.default_rng(0))
        assert tok == 3 and prob == 1.0

    def test_top_k_one_is_greedy_at_any_temperature(self):
        logits = np.array([0.1, 0.9, 0.5])
        legal = np.arange(3)
        cfg = quiet_cfg(ar_temperature=5.0, top_k=1)
        for s in range(5):
            tok, prob = _ar_sample(logits, legal, cfg, np.random.default_rng(s))
            assert tok == 1 and prob == pytest.approx(1.0)

    def test_tiny_top_p_collapses_to_argmax(self):
        logits = np.array([0.0, 3.0, 1.0, 2.0])
        legal = np.arange(4)
        cfg = quiet_cfg(ar_temperature=1.0, top_k=4, top_p=1e-9)
        tok, _ = _ar_sample(logits, legal, cfg, np.random.default_rng(1))
        assert tok == 1

    def test_samples_spread_under_temperature(self):
        logits = np.zeros(4)
        legal = np.arange(4)
        cfg = quiet_cfg(ar_temperature=1.0, top_k=4, top_p=1.0)
        rng = np.random.default_rng(7)
        seen = {_ar_sample(logits, legal, cfg, rng)[0] for _ in range(100)}
        assert seen == {0, 1, 2, 3}


class TestDecodeConfigValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(steps=0),
            dict(block=0),
            dict(max_audio=0),
            dict(remask="psychic"),
            dict(tau=-1.0),
            dict(gamma=-0.1),
            dict(ar_temperature=-2.0),
            dict(top_k=0),
            dict(top_p=0.0),
            dict(top_p=1.5),
            dict(max_text=0),
            dict(max_spans=0),
            dict(max_total_len=3),
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            quiet_cfg(**kw)


class TestOracleRoundTrip:
    """A perfect scorer must reproduce the reference record exactly, at any
    decode geometry — the end-to-end contract the trained model is graded on."""

    @pytest.mark.parametrize("steps,block", [(1, 1), (4, 8), (17, 17), (3, 5)])
    def test_reproduces_reference(self, task_vocab, task_spec, steps, block):
        for idx in range(6):
            rec = make_record(task_spec, task_vocab, seed=11, index=idx)
            target = rec.transcript(task_vocab)
            scorer = oracle_scorer(task_vocab, task_spec, target)
            cfg = DecodeConfig(steps=steps, block=block, max_audio=20, gamma=0.0,
                               tau=0.0, ar_temperature=0.0, seed=3, max_total_len=96)
            res = hybrid_generate(scorer, rec.prompt, task_vocab, cfg)
            assert res.sequence.to_dict() == rec.to_dict()
            assert res.forced_eoa == 0 and not res.forced_eos
            assert validate_sequence(res.sequence, task_vocab,
                                     b_span=task_spec.b_span) == []

    def test_audio_content_matches_codebook(self, task_vocab, task_spec):
        rec = make_record(task_spec, task_vocab, seed=11, index=1)
        target = rec.transcript(task_vocab)
        scorer = oracle_scorer(task_vocab, task_spec, target)
        res = hybrid_generate(scorer, rec.prompt, task_vocab,
                              DecodeConfig(steps=2, block=6, max_audio=20, gamma=0.0,
                                           tau=0.0, ar_temperature=0.0, seed=0))
        chunks = [target[i:i + task_spec.n_t] for i in range(0, len(target), task_spec.n_t)]
        audio = res.sequence.audio_spans()
        assert len(audio) == len(chunks)
        for chunk, span in zip(chunks, audio):
            content = span.tokens[:-1]
            assert span.tokens[-1] == task_vocab.eoa
            want = [echo_codebook(t, j, task_vocab, task_spec.r)
                    for t in chunk for j in range(task_spec.r)]
            assert content == want


def trace_replay(prompt, vocab, trace):
    """Independent reconstruction of the token stream from the event log."""
    toks = list(prompt)
    for ev in trace:
        kind = ev["event"]
        if kind == "ar":
            assert ev["pos"] == len(toks)
            toks.append(ev["token"])
        elif kind == "block":
            assert ev["start"] == len(toks)
            toks.extend([vocab.mask] * ev["size"])
        elif kind == "commit":
            for p, t in zip(ev["positions"], ev["tokens"]):
                assert toks[p] == vocab.mask  # positions are written exactly once
                toks[p] = t
        elif kind == "truncate":
            assert toks[ev["eoa_pos"]] == vocab.eoa
            del toks[ev["eoa_pos"] + 1:]
        elif kind == "force_eoa":
            assert ev["pos"] == len(toks)
            toks.append(vocab.eoa)
        elif kind == "force_eos":
            assert ev["pos"] == len(toks)
            toks.append(vocab.eos)
        else:  # pragma: no cover - unknown events must not appear
            raise AssertionError(f"unexpected event {kind!r}")
    return toks


class TestTraceContracts:
    def test_trace_replays_to_output(self, task_vocab, task_spec):
        rec = make_record(task_spec, task_vocab, seed=2, index=3)
        scorer = oracle_scorer(task_vocab, task_spec, rec.transcript(task_vocab))
        cfg = DecodeConfig(steps=4, block=7, max_audio=20, gamma=0.0, tau=0.0,
                           ar_temperature=0.0, seed=5, max_total_len=96)
        res = hybrid_generate(scorer, rec.prompt, task_vocab, cfg, record_trace=True)
        assert trace_replay(rec.prompt, task_vocab, res.trace) == res.tokens.tolist()

    def test_commit_counts_follow_schedule(self, task_vocab, task_spec):
        rec = make_record(task_spec, task_vocab, seed=2, index=4)
        scorer = oracle_scorer(task_vocab, task_spec, rec.transcript(task_vocab))
        cfg = DecodeConfig(steps=3, block=8, max_audio=24, gamma=0.0, tau=0.0,
                           ar_temperature=0.0, seed=5, max_total_len=96)
        res = hybrid_generate(scorer, rec.prompt, task_vocab, cfg, record_trace=True)
        events = res.trace
        for i, ev in enumerate(events):
            if ev["event"] != "block":
                continue
            counts = [len(e["positions"]) for e in events[i + 1:i + 1 + cfg.steps]
                      if e["event"] == "commit"]
            assert counts == [c for c in schedule(ev["size"], cfg.steps) if c > 0]

    def test_trace_jsonl_round_trip(self, task_vocab, task_spec):
        rec = make_record(task_spec, task_vocab, seed=2, index=0)
        scorer = oracle_scorer(task_vocab, task_spec, rec.transcript(task_vocab))
        res = hybrid_generate(scorer, rec.prompt, task_vocab, quiet_cfg(),
                              record_trace=True)
        lines = res.trace_jsonl().splitlines()
        assert [json.loads(ln) for ln in lines] == res.trace
        res2 = hybrid_generate(scorer, rec.prompt, task_vocab, quiet_cfg())
        assert res2.trace == []

    def test_prompt_never_modified(self, tiny_vocab):
        rng_logits = np.random.default_rng(3)

        def chaotic(tokens, layout):
            return rng_logits.normal(size=(len(tokens), tiny_vocab.total_size))

        prompt = [4, 2, 7]
        res = hybrid_generate(chaotic, prompt, tiny_vocab,
                              quiet_cfg(tau=0.5, ar_temperature=1.0, seed=9))
        assert res.tokens[:3].tolist() == prompt
        assert (res.layout.kinds[:3] == 0).all()


class TestBudgetsAndLegality:
    def test_forced_eoa_at_max_audio(self, tiny_vocab):
        audio_id = tiny_vocab.audio_base

        def never_ends(tokens, layout):
            z = np.full((len(tokens), tiny_vocab.total_size), -30.0)
            z[:, audio_id] = 10.0  # audio rows: a plain audio token
            z[:, tiny_vocab.soa] = 9.0  # text rows: open a span immediately
            return z

        cfg = quiet_cfg(steps=1, block=4, max_audio=6, max_spans=4)
        res = hybrid_generate(never_ends, [1], tiny_vocab, cfg, record_trace=True)
        audio = res.sequence.audio_spans()
        assert audio and res.forced_eoa == len(audio)
        for span in audio:
            assert len(span.tokens) == cfg.max_audio + 1  # content + forced marker
            assert span.tokens[-1] == tiny_vocab.eoa
        assert res.forced_eos  # max_spans tripped, end marker injected
        assert any(ev["event"] == "force_eoa" for ev in res.trace)

    def test_first_eoa_truncates_block(self, tiny_vocab):
        hits = {"n": 0}

        def eoa_mid_block(tokens, layout):
            z = np.full((len(tokens), tiny_vocab.total_size), -30.0)
            z[:, tiny_vocab.audio_base] = 5.0
            z[:, tiny_vocab.soa] = 4.0
            masked = np.flatnonzero(tokens == tiny_vocab.mask)
            if masked.size:
                z[masked[0], tiny_vocab.eoa] = 50.0  # earliest masked slot ends it
                if masked.size > 1:  # and a later slot wants one too
                    z[masked[-1], tiny_vocab.eoa] = 40.0
            z[-1, tiny_vocab.eos] = -5.0
            return z

        def count(tokens, layout):
            hits["n"] += 1
            return eoa_mid_block(tokens, layout)

        cfg = quiet_cfg(steps=1, block=6, max_audio=12, max_spans=2)
        res = hybrid_generate(count, [1], tiny_vocab, cfg)
        span = res.sequence.audio_spans()[0]
        assert span.tokens == [tiny_vocab.eoa]  # truncated at the first marker
        assert res.forced_eoa == 0

    def test_max_text_forces_span_open(self, tiny_vocab):
        def chatty(tokens, layout):
            z = np.full((len(tokens), tiny_vocab.total_size), -30.0)
            z[:, 3] = 10.0  # text rows: text token forever
            z[:, tiny_vocab.eoa] = 9.0  # audio rows: end immediately
            return z

        cfg = quiet_cfg(max_text=5, max_spans=2)
        res = hybrid_generate(chatty, [1], tiny_vocab, cfg)
        text = res.sequence.text_spans()[0]
        assert text.tokens == [3] * 5 + [tiny_vocab.soa]

    def test_emitted_ids_always_legal(self, tiny_vocab):
        rng_logits = np.random.default_rng(12)

        def adversarial(tokens, layout):
            # loudest logits on ids that must never be emitted
            z = rng_logits.normal(size=(len(tokens), tiny_vocab.total_size))
            z[:, tiny_vocab.mask] = 60.0
            z[:, tiny_vocab.pad] = 55.0
            return z

        cfg = quiet_cfg(tau=1.0, ar_temperature=1.0, top_k=23, top_p=1.0,
                        max_spans=4, seed=21)
        res = hybrid_generate(adversarial, [2, 5], tiny_vocab, cfg)
        toks = res.tokens.tolist()
        assert tiny_vocab.mask not in toks and tiny_vocab.pad not in toks
        for p, (tok, kind) in enumerate(zip(toks, res.layout.kinds)):
            if p < 2:
                continue
            if kind == TEXT:
                assert tiny_vocab.is_text(tok) or tok in (tiny_vocab.soa, tiny_vocab.eos)
            elif kind == AUDIO:
                assert tiny_vocab.is_audio(tok) or tok == tiny_vocab.eoa

    def test_uniform_scorer_output_is_valid(self, tiny_vocab):
        res = hybrid_generate(uniform_scorer(tiny_vocab), [1, 2], tiny_vocab,
                              quiet_cfg(tau=1.0, ar_temperature=1.0, seed=4,
                                        max_spans=6, max_total_len=64))
        errors = validate_sequence(res.sequence, tiny_vocab)
        assert errors == []

    def test_empty_prompt_rejected(self, tiny_vocab):
        with pytest.raises(ValueError, match="prompt"):
            hybrid_generate(uniform_scorer(tiny_vocab), [], tiny_vocab, quiet_cfg())


class TestGuidancePassBehavior:
    def test_gamma_zero_skips_unconditional_pass(self, tiny_vocab, task_spec):
        seen_masked_context = {"hit": False}

        def watching(tokens, layout):
            if (np.asarray(tokens) == tiny_vocab.mask).all():
                seen_masked_context["hit"] = True
            z = np.full((len(tokens), tiny_vocab.total_size), -30.0)
            z[:, tiny_vocab.audio_base] = 3.0
            z[:, tiny_vocab.soa] = 2.0
            z[:, tiny_vocab.eoa] = 2.5
            return z

        hybrid_generate(watching, [1], tiny_vocab, quiet_cfg(gamma=0.0, max_spans=2))
        assert not seen_masked_context["hit"]
        hybrid_generate(watching, [1], tiny_vocab, quiet_cfg(gamma=0.5, max_spans=2))
        assert seen_masked_context["hit"]

    def test_same_seed_bitwise_repeatable(self, tiny_vocab):
        cfg = quiet_cfg(tau=0.7, ar_temperature=0.9, seed=13, max_spans=4)
        a = hybrid_generate(uniform_scorer(tiny_vocab), [3], tiny_vocab, cfg)
        b = hybrid_generate(uniform_scorer(tiny_vocab), [3], tiny_vocab, cfg)
        assert a.tokens.tolist() == b.tokens.tolist()
        c = hybrid_generate(uniform_scorer(tiny_vocab), [3], tiny_vocab,
                            quiet_cfg(tau=0.7, ar_temperature=0.9, seed=14, max_spans=4))
        assert a.tokens.tolist() != c.tokens.tolist()
