"""Hybrid decoding: autoregressive text spans, block-diffused audio spans.

Text tokens are sampled one position at a time (top-k then nucleus filtering).
Each audio span is filled by appending a block of mask tokens and running a
fixed number of diffusion steps; every step scores all still-masked positions
in the block and commits the highest-confidence predictions, so each position
is written exactly once. A committed end-of-audio token truncates the span at
the first such position once the block finishes. Classifier-free guidance
combines the conditional logits with a fully-masked unconditional pass.

The scorer is any callable (tokens, layout) -> logits of shape (L, V); all
decode arithmetic is float64 numpy so traces replay bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention import AUDIO, TEXT, SequenceLayout, build_modality_mask
from .corpus import InterleavedSequence, Span, Vocabulary

Scorer = Callable[[np.ndarray, SequenceLayout], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    steps: int = 200  # diffusion steps per audio block
    block: int = 32  # audio positions appended at a time
    max_audio: int = 640  # per-span audio budget; hitting it forces end-of-audio
    gamma: float = 0.1  # guidance weight; 0 runs the conditional pass only
    tau: float = 0.0  # Gumbel temperature; 0 is plain argmax and draws no randomness
    remask: str = "low_confidence"  # which predictions stay committed: by prob | random
    top_k: int = 10
    top_p: float = 0.95
    ar_temperature: float = 1.0  # 0 is greedy argmax and draws no randomness
    seed: int = 0
    preserve_prompt: bool = False  # keep prompt tokens in the unconditional pass
    max_text: int = 64  # per-span text budget; hitting it forces start-of-audio
    max_spans: int = 32  # total span budget; hitting it forces end-of-sequence
    max_total_len: int = 4096  # scorer context budget

    def __post_init__(self):
        if self.steps < 1 or self.block < 1 or self.max_audio < 1:
            raise ValueError("steps, block and max_audio must be >= 1")
        if self.remask not in ("low_confidence", "random"):
            raise ValueError(f"unknown remask strategy {self.remask!r}")
        if self.tau < 0 or self.gamma < 0 or self.ar_temperature < 0:
            raise ValueError("tau, gamma and ar_temperature must be >= 0")
        if self.top_k < 1 or not 0.0 < self.top_p <= 1.0:
            raise ValueError("need top_k >= 1 and top_p in (0, 1]")
        if self.max_text < 1 or self.max_spans < 1 or self.max_total_len < 4:
            raise ValueError("max_text/max_spans/max_total_len too small")


def schedule(n: int, steps: int) -> list[int]:
    """Commit counts per diffusion step: n split as evenly as possible over
    `steps`, remainder going to the earliest steps. Always sums to n."""
    if n < 0 or steps < 1:
        raise ValueError(f"need n >= 0 and steps >= 1, got n={n} steps={steps}")
    base, rem = divmod(n, steps)
    return [base + 1 if t < rem else base for t in range(steps)]


def cfg_logits(cond: np.ndarray, uncond: np.ndarray, gamma: float) -> np.ndarray:
    """Guided logits: uncond + (gamma + 1) * (cond - uncond)."""
    return uncond + (gamma + 1.0) * (cond - uncond)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


@dataclass
class GenerationResult:
    tokens: np.ndarray
    layout: SequenceLayout
    sequence: InterleavedSequence
    trace: list[dict] = field(default_factory=list)
    forced_eoa: int = 0  # spans that hit max_audio without producing end-of-audio
    forced_eos: bool = False  # generation stopped by a budget, not by the model

    def trace_jsonl(self) -> str:
        return "\n".join(json.dumps(ev) for ev in self.trace)


class _Builder:
    """Incrementally grown token sequence with its layout."""

    def __init__(self, prompt: list[int], vocab: Vocabulary):
        self.vocab = vocab
        self.tokens: list[int] = list(prompt)
        self.kinds: list[int] = [0] * len(prompt)
        self.ords: list[int] = [-1] * len(prompt)

    def append(self, token: int, kind: int, ord_: int):
        self.tokens.append(int(token))
        self.kinds.append(kind)
        self.ords.append(ord_)

    def truncate(self, n: int):
        del self.tokens[n:], self.kinds[n:], self.ords[n:]

    def arrays(self) -> tuple[np.ndarray, SequenceLayout]:
        layout = SequenceLayout(
            np.asarray(self.kinds, dtype=np.int8), np.asarray(self.ords, dtype=np.int32)
        )
        return np.asarray(self.tokens, dtype=np.int64), layout

    def __len__(self) -> int:
        return len(self.tokens)


def _ar_sample(
    logits: np.ndarray,
    legal: np.ndarray,
    cfg: DecodeConfig,
    rng: np.random.Generator,
) -> tuple[int, float]:
    """Sample one token from `legal` ids: temperature, top-k, then nucleus."""
    z = logits[legal].astype(np.float64)
    if cfg.ar_temperature == 0.0:
        idx = int(np.argmax(z))
        return int(legal[idx]), 1.0
    z = z / cfg.ar_temperature
    k = min(cfg.top_k, len(z))
    keep = np.argsort(-z, kind="stable")[:k]
    zk = z[keep]
    logp = zk - (np.max(zk) + np.log(np.sum(np.exp(zk - np.max(zk)))))
    p = np.exp(logp)
    cum = np.cumsum(p)
    cut = int(np.searchsorted(cum, cfg.top_p * cum[-1])) + 1  # minimal nucleus
    p = p[:cut] / np.sum(p[:cut])
    choice = int(rng.choice(cut, p=p))
    return int(legal[keep[choice]]), float(p[choice])


def _scored(
    scorer: Scorer,
    builder: _Builder,
    rows: np.ndarray,
    cfg: DecodeConfig,
) -> np.ndarray:
    """Guided logits for the requested rows (float64, full vocabulary)."""
    tokens, layout = builder.arrays()
    cond = np.asarray(scorer(tokens, layout), dtype=np.float64)[rows]
    if cfg.gamma == 0.0:
        return cond
    un = tokens.copy()
    if cfg.preserve_prompt:
        un[layout.kinds != 0] = builder.vocab.mask
    else:
        un[:] = builder.vocab.mask
    uncond = np.asarray(scorer(un, layout), dtype=np.float64)[rows]
    return cfg_logits(cond, uncond, cfg.gamma)


def _diffuse_block(
    scorer: Scorer,
    builder: _Builder,
    start: int,
    size: int,
    span_ord: int,
    cfg: DecodeConfig,
    rng: np.random.Generator,
    trace: list[dict] | None,
) -> None:
    """Fill `size` mask positions appended at `start` over cfg.steps steps."""
    vocab = builder.vocab
    legal = np.concatenate(
        [np.arange(vocab.audio_base, vocab.audio_base + vocab.n_audio), [vocab.eoa]]
    )
    illegal = np.ones(vocab.total_size, dtype=bool)
    illegal[legal] = False
    for n_t in schedule(size, cfg.steps):
        if n_t == 0:
            continue
        pos = np.array(
            [p for p in range(start, start + size) if builder.tokens[p] == vocab.mask],
            dtype=np.int64,
        )
        logits = _scored(scorer, builder, pos, cfg)
        logits[:, illegal] = -np.inf
        if cfg.tau > 0.0:
            u = np.maximum(rng.random(logits.shape), 1e-300)
            scores = logits + cfg.tau * (-np.log(-np.log(u)))
        else:
            scores = logits
        picked = np.argmax(scores, axis=1)
        logp = _log_softmax(logits)
        prob = np.exp(logp[np.arange(len(pos)), picked])
        if cfg.remask == "random":
            conf = rng.random(len(pos))
        else:
            conf = prob
        commit = np.argsort(-conf, kind="stable")[:n_t]
        for i in commit:
            builder.tokens[pos[i]] = int(picked[i])
        if trace is not None:
            trace.append(
                {
                    "event": "commit",
                    "span": span_ord,
                    "positions": [int(pos[i]) for i in commit],
                    "tokens": [int(picked[i]) for i in commit],
                    "conf": [float(conf[i]) for i in commit],
                    "prob": [float(prob[i]) for i in commit],
                }
            )


def _generate_audio_span(
    scorer: Scorer,
    builder: _Builder,
    span_ord: int,
    cfg: DecodeConfig,
    rng: np.random.Generator,
    trace: list[dict] | None,
) -> tuple[list[int], bool]:
    """Diffuse blocks until an end-of-audio token lands or max_audio is hit.
    Returns (audio tokens incl. end marker, whether the marker was forced)."""
    vocab = builder.vocab
    span_start = len(builder)
    appended = 0
    while True:
        room = min(cfg.block, cfg.max_audio - appended, cfg.max_total_len - len(builder))
        if room <= 0:
            builder.append(vocab.eoa, AUDIO, span_ord)
            if trace is not None:
                trace.append({"event": "force_eoa", "span": span_ord, "pos": len(builder) - 1})
            return builder.tokens[span_start:], True
        start = len(builder)
        for _ in range(room):
            builder.append(vocab.mask, AUDIO, span_ord)
        if trace is not None:
            trace.append({"event": "block", "span": span_ord, "start": start, "size": room})
        _diffuse_block(scorer, builder, start, room, span_ord, cfg, rng, trace)
        appended += room
        block_tokens = builder.tokens[start : start + room]
        if vocab.eoa in block_tokens:
            first = start + block_tokens.index(vocab.eoa)
            builder.truncate(first + 1)
            if trace is not None:
                trace.append({"event": "truncate", "span": span_ord, "eoa_pos": first})
            return builder.tokens[span_start:], False


def hybrid_generate(
    scorer: Scorer,
    prompt: list[int],
    vocab: Vocabulary,
    cfg: DecodeConfig,
    direction: str = "tts",
    record_trace: bool = False,
) -> GenerationResult:
    """Generate alternating text/audio spans from a prompt until the model emits
    the end-of-sequence token (or a budget forces one)."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed,)))
    builder = _Builder(prompt, vocab)
    trace: list[dict] | None = [] if record_trace else None
    ar_legal = np.concatenate(
        [np.arange(vocab.text_base, vocab.text_base + vocab.n_text), [vocab.soa, vocab.eos]]
    )
    spans: list[Span] = []
    forced_eoa = 0
    forced_eos = False
    done = False
    next_ord = 0  # every span, text or audio, gets its own ordinal
    while not done:
        text_ord = next_ord
        text_tokens: list[int] = []
        while True:
            if len(builder) >= cfg.max_total_len:
                forced_eos, done = True, True
                break
            rows = np.array([len(builder) - 1])
            logits = _scored(scorer, builder, rows, cfg)[0]
            token, prob = _ar_sample(logits, ar_legal, cfg, rng)
            if len(text_tokens) >= cfg.max_text and token not in (vocab.soa, vocab.eos):
                token = vocab.soa
            builder.append(token, TEXT, text_ord)
            if trace is not None:
                trace.append(
                    {"event": "ar", "pos": len(builder) - 1, "token": int(token), "prob": prob}
                )
            if token == vocab.eos:
                done = True
                break
            if token == vocab.soa:
                break
            text_tokens.append(int(token))
        if done:
            if builder.tokens[-1] == vocab.eos and text_tokens:
                # end-of-sequence landed mid-span; keep the partial text span
                spans.append(Span("text", text_tokens + [vocab.eos]))
            break
        spans.append(Span("text", text_tokens + [vocab.soa]))
        next_ord += 1
        audio_tokens, forced = _generate_audio_span(scorer, builder, next_ord, cfg, rng, trace)
        forced_eoa += int(forced)
        spans.append(Span("audio", audio_tokens))
        next_ord += 1
        if len(spans) >= cfg.max_spans:
            builder.append(vocab.eos, TEXT, next_ord)
            forced_eos, done = True, True
            if trace is not None:
                trace.append({"event": "force_eos", "pos": len(builder) - 1})

    ended_with_eos = bool(builder.tokens) and builder.tokens[-1] == vocab.eos
    # a mid-span end marker keeps its span; the terminal flag needs a clean break
    clean_eos = ended_with_eos and (not spans or spans[-1].tokens[-1] != vocab.eos)
    seq = InterleavedSequence(
        prompt=list(prompt),
        spans=[s for s in spans if s.tokens[-1] != vocab.eos],
        eos=clean_eos,
        direction=direction,
    )
    tokens, layout = builder.arrays()
    return GenerationResult(
        tokens=tokens,
        layout=layout,
        sequence=seq,
        trace=trace or [],
        forced_eoa=forced_eoa,
        forced_eos=forced_eos,
    )


def model_scorer(model) -> Scorer:
    """Adapt a TokenTransformer to the decoder's scorer interface."""
    import torch

    def score(tokens: np.ndarray, layout: SequenceLayout) -> np.ndarray:
        allow = build_modality_mask(layout)
        with torch.no_grad():
            logits = model(tokens, allow)
        return logits.double().numpy()

    return score


def uniform_scorer(vocab: Vocabulary) -> Scorer:
    """Equal logits everywhere — a chance baseline (pair with tau > 0, else
    argmax degenerates to the first legal id)."""

    def score(tokens: np.ndarray, layout: SequenceLayout) -> np.ndarray:
        return np.zeros((len(tokens), vocab.total_size))

    return score


def oracle_scorer(vocab: Vocabulary, task, target_text: list[int]) -> Scorer:
    """A perfect scorer for the echo task: given any decode state it puts all
    mass on the correct continuation (text chunks of `target_text`, their
    codebook expansions, end markers at the exact expected offsets).

    `target_text` is the response transcript as text ids in [0, n_text).
    """
    from .corpus import echo_codebook

    chunks = [target_text[i : i + task.n_t] for i in range(0, len(target_text), task.n_t)]

    def score(tokens: np.ndarray, layout: SequenceLayout) -> np.ndarray:
        tokens = np.asarray(tokens)
        L = len(tokens)
        logits = np.zeros((L, vocab.total_size))
        # group span regions by ordinal
        span_pos: dict[int, np.ndarray] = {}
        for o in np.unique(layout.ords[layout.ords >= 0]):
            span_pos[int(o)] = np.flatnonzero(layout.ords == o)
        audio_ords = sorted(o for o in span_pos if layout.kinds[span_pos[o][0]] == AUDIO)
        text_ords = sorted(o for o in span_pos if layout.kinds[span_pos[o][0]] == TEXT)

        def text_ids(vals) -> list[int]:
            # tolerate arbitrary ids (the guidance pass feeds masked context)
            return [int(t) - vocab.text_base for t in vals if vocab.is_text(int(t))]

        # next-token row: predict from the last position
        k_done = len(audio_ords)
        if text_ords and layout.kinds[L - 1] == TEXT:
            last_text = text_ids(tokens[span_pos[text_ords[-1]]])
        else:
            last_text = []
        if k_done < len(chunks):
            chunk = chunks[k_done]
            nxt = (
                vocab.text_base + chunk[len(last_text)] if len(last_text) < len(chunk) else vocab.soa
            )
        else:
            nxt = vocab.eos
        logits[L - 1, nxt] = 20.0

        # masked audio rows: expansion of the text span one ordinal earlier
        for o in audio_ords:
            pos = span_pos[o]
            src = span_pos.get(o - 1)
            chunk = text_ids(tokens[src]) if src is not None else []
            for j, p in enumerate(pos):
                if tokens[p] != vocab.mask:
                    continue
                want = (
                    echo_codebook(chunk[j // task.r], j % task.r, vocab, task.r)
                    if j < task.r * len(chunk)
                    else vocab.eoa
                )
                logits[p, want] = 20.0
        return logits

    return score
