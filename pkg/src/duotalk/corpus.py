"""Unified vocabulary, interleaved text/audio records, and the synthetic echo task.

One shared id space covers text ids, audio ids, and the five control tokens.
A record is a prompt followed by alternating text/audio spans: each text span
ends with <SOA> (switch to audio), each audio span ends with <EOA> (switch back),
and the whole sequence ends with <EOS>.

The synthetic task ("EchoTTS" / "EchoASR") pairs every text token with r audio
tokens through a fixed modular codebook, so correctness of a trained model is
checkable against an exact oracle.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Literal

import numpy as np

SpanKind = Literal["text", "audio"]

DIRECTIONS = ("tts", "asr", "chat")


class CorpusFormatError(ValueError):
    """Raised when a corpus file does not parse."""


@dataclass(frozen=True)
class Vocabulary:
    """Shared id space: text ids first, then audio ids, then the specials.

    Layout (fixed so golden files stay stable):
        [0, n_text)                      text ids
        [n_text, n_text + n_audio)       audio ids
        then, in order:                  soa, eoa, eos, mask, pad
    """

    n_text: int
    n_audio: int

    @property
    def text_base(self) -> int:
        return 0

    @property
    def audio_base(self) -> int:
        return self.n_text

    @property
    def soa(self) -> int:
        return self.n_text + self.n_audio

    @property
    def eoa(self) -> int:
        return self.n_text + self.n_audio + 1

    @property
    def eos(self) -> int:
        return self.n_text + self.n_audio + 2

    @property
    def mask(self) -> int:
        return self.n_text + self.n_audio + 3

    @property
    def pad(self) -> int:
        return self.n_text + self.n_audio + 4

    @property
    def total_size(self) -> int:
        return self.n_text + self.n_audio + 5

    def is_text(self, tok: int) -> bool:
        return 0 <= tok < self.n_text

    def is_audio(self, tok: int) -> bool:
        return self.n_text <= tok < self.n_text + self.n_audio

    def to_dict(self) -> dict:
        return {
            "n_text": self.n_text,
            "n_audio": self.n_audio,
            "text_range": [0, self.n_text],
            "audio_range": [self.audio_base, self.audio_base + self.n_audio],
            "soa": self.soa,
            "eoa": self.eoa,
            "eos": self.eos,
            "mask": self.mask,
            "pad": self.pad,
            "total_size": self.total_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        vocab = build_vocabulary(int(d["n_text"]), int(d["n_audio"]))
        if "total_size" in d and int(d["total_size"]) != vocab.total_size:
            raise CorpusFormatError(
                f"vocabulary header inconsistent: total_size {d['total_size']} "
                f"!= {vocab.total_size} derived from counts"
            )
        return vocab


def build_vocabulary(n_text: int, n_audio: int) -> Vocabulary:
    """Build the shared vocabulary; both tails of the id space must be non-trivial."""
    if n_text < 2:
        raise ValueError(f"n_text must be >= 2, got {n_text}")
    if n_audio < 2:
        raise ValueError(f"n_audio must be >= 2, got {n_audio}")
    return Vocabulary(n_text=n_text, n_audio=n_audio)


def save_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "w") as f:
        json.dump(vocab.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_vocabulary(path) -> Vocabulary:
    with open(path) as f:
        return Vocabulary.from_dict(json.load(f))


@dataclass
class Span:
    """One contiguous run of same-modality tokens.

    Text span tokens are text ids, optionally ending in <SOA> or <EOS>.
    Audio span tokens are audio ids with at most one trailing <EOA>.
    Treated as immutable after construction.
    """

    kind: SpanKind
    tokens: list[int]

    def content_len(self, vocab: Vocabulary) -> int:
        """Token count excluding a trailing control token (<SOA>/<EOS>/<EOA>)."""
        n = len(self.tokens)
        if n and self.tokens[-1] in (vocab.soa, vocab.eos, vocab.eoa):
            return n - 1
        return n


@dataclass
class InterleavedSequence:
    """Prompt + alternating text/audio spans + terminal-<EOS> flag."""

    prompt: list[int]
    spans: list[Span]
    eos: bool = True
    direction: str = "tts"

    @property
    def m_audio(self) -> int:
        """Number of audio spans (the M of the span-pair layout)."""
        return sum(1 for s in self.spans if s.kind == "audio")

    def audio_spans(self) -> list[Span]:
        return [s for s in self.spans if s.kind == "audio"]

    def text_spans(self) -> list[Span]:
        return [s for s in self.spans if s.kind == "text"]

    def total_len(self) -> int:
        return len(self.prompt) + sum(len(s.tokens) for s in self.spans) + (1 if self.eos else 0)

    def transcript(self, vocab: Vocabulary) -> list[int]:
        """All response text ids in order, control tokens stripped."""
        out: list[int] = []
        for s in self.text_spans():
            out.extend(t for t in s.tokens if vocab.is_text(t))
        return out

    def to_dict(self) -> dict:
        return {
            "prompt": list(self.prompt),
            "spans": [{"kind": s.kind, "tokens": list(s.tokens)} for s in self.spans],
            "direction": self.direction,
            "eos": bool(self.eos),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InterleavedSequence":
        spans = [Span(kind=s["kind"], tokens=list(s["tokens"])) for s in d["spans"]]
        return cls(
            prompt=list(d["prompt"]),
            spans=spans,
            eos=bool(d.get("eos", True)),
            direction=d.get("direction", "tts"),
        )


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of the synthetic paired-token task.

    r            audio tokens per text token (expansion rate)
    n_t          text tokens per full text span
    b_span       audio content tokens per full audio span; must equal n_t * r
    noise_prob   per-token chance an audio token is replaced by a uniform audio id
    direction    tts | asr | chat | mixed (mixed alternates tts/asr per record)
    min/max_text_len   transcript length range, inclusive
    """

    r: int = 4
    n_t: int = 4
    b_span: int = 16
    noise_prob: float = 0.0
    direction: str = "tts"
    min_text_len: int = 2
    max_text_len: int = 12

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.n_t < 1:
            raise ValueError(f"n_t must be >= 1, got {self.n_t}")
        if self.b_span != self.n_t * self.r:
            raise ValueError(f"b_span must equal n_t * r = {self.n_t * self.r}, got {self.b_span}")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError(f"noise_prob must be in [0, 1], got {self.noise_prob}")
        if self.direction not in DIRECTIONS + ("mixed",):
            raise ValueError(f"direction must be one of {DIRECTIONS + ('mixed',)}, got {self.direction!r}")
        if not 1 <= self.min_text_len <= self.max_text_len:
            raise ValueError("need 1 <= min_text_len <= max_text_len")


def echo_codebook(t: int, j: int, vocab: Vocabulary, r: int) -> int:
    """Deterministic audio-tokenizer surrogate: audio_base + (t*r + j) mod n_audio.

    t is a text id (text ids start at 0, so the id is its own index) and j is the
    within-token position in [0, r).
    """
    if not vocab.is_text(t):
        raise ValueError(f"t={t} is not a text id (range [0, {vocab.n_text}))")
    if not 0 <= j < r:
        raise ValueError(f"j={j} out of range [0, {r})")
    return vocab.audio_base + (t * r + j) % vocab.n_audio


def expand_text(text: Iterable[int], vocab: Vocabulary, r: int) -> list[int]:
    """Codebook expansion of a text id sequence: r audio tokens per text token."""
    return [echo_codebook(t, j, vocab, r) for t in text for j in range(r)]


def _chunk(seq: list[int], n: int) -> list[list[int]]:
    return [seq[i : i + n] for i in range(0, len(seq), n)]


def _record_rng(seed: int, index: int) -> np.random.Generator:
    # Splittable counter construction: the record's stream depends only on
    # (seed, index), never on how many records were drawn before it.
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _apply_noise(audio: list[int], noise_prob: float, vocab: Vocabulary, rng: np.random.Generator) -> list[int]:
    if noise_prob <= 0.0:
        return audio
    out = list(audio)
    hits = rng.random(len(out)) < noise_prob
    for i in np.flatnonzero(hits):
        out[i] = int(vocab.audio_base + rng.integers(0, vocab.n_audio))
    return out


def make_record(spec: TaskSpec, vocab: Vocabulary, seed: int, index: int) -> InterleavedSequence:
    """Build the record at (seed, index). Pure; order-independent."""
    rng = _record_rng(seed, index)
    direction = spec.direction
    if direction == "mixed":
        direction = "tts" if index % 2 == 0 else "asr"

    length = int(rng.integers(spec.min_text_len, spec.max_text_len + 1))
    transcript = [int(x) for x in rng.integers(0, vocab.n_text, size=length)]

    if direction == "tts":
        prompt = list(transcript)
        response_text = list(transcript)
    elif direction == "asr":
        prompt = _apply_noise(expand_text(transcript, vocab, spec.r), spec.noise_prob, vocab, rng)
        response_text = list(transcript)
    else:  # chat: respond with the shifted transcript
        prompt = list(transcript)
        response_text = [(t + 1) % vocab.n_text for t in transcript]

    spans: list[Span] = []
    for chunk in _chunk(response_text, spec.n_t):
        spans.append(Span("text", chunk + [vocab.soa]))
        audio = _apply_noise(expand_text(chunk, vocab, spec.r), spec.noise_prob, vocab, rng)
        spans.append(Span("audio", audio + [vocab.eoa]))
    return InterleavedSequence(prompt=prompt, spans=spans, eos=True, direction=direction)


def generate_corpus(spec: TaskSpec, vocab: Vocabulary, count: int, seed: int) -> Iterator[InterleavedSequence]:
    """Yield `count` records; record i depends only on (seed, i)."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    for i in range(count):
        yield make_record(spec, vocab, seed, i)


def validate_sequence(
    seq: InterleavedSequence,
    vocab: Vocabulary,
    b_span: int | None = None,
    max_len: int | None = None,
) -> list[str]:
    """Check every structural invariant; return one message per violation.

    When b_span is not given, the fixed-span invariant is checked by mutual
    equality of the non-final audio spans' content lengths (a bare sequence
    carries no TaskSpec).
    """
    errs: list[str] = []
    for i, tok in enumerate(seq.prompt):
        if not (vocab.is_text(tok) or vocab.is_audio(tok)):
            errs.append(f"prompt[{i}]: id {tok} is not a text or audio id")

    for si, span in enumerate(seq.spans):
        expected = "text" if si % 2 == 0 else "audio"
        if span.kind != expected:
            errs.append(f"span[{si}]: kind {span.kind!r}, expected {expected!r} (alternation)")
        if not span.tokens:
            errs.append(f"span[{si}]: empty span")
        if span.kind == "text":
            for i, tok in enumerate(span.tokens):
                if vocab.is_text(tok):
                    continue
                if tok in (vocab.soa, vocab.eos):
                    if i != len(span.tokens) - 1:
                        errs.append(f"span[{si}][{i}]: control id {tok} before final position of text span")
                else:
                    errs.append(f"span[{si}][{i}]: id {tok} not allowed in a text span")
        else:
            for i, tok in enumerate(span.tokens):
                if vocab.is_audio(tok):
                    continue
                if tok == vocab.eoa:
                    if i != len(span.tokens) - 1:
                        errs.append(f"span[{si}][{i}]: <EOA> before final position of audio span")
                else:
                    errs.append(f"span[{si}][{i}]: id {tok} not allowed in an audio span")

    audio = [(si, s) for si, s in enumerate(seq.spans) if s.kind == "audio"]
    if audio:
        contents = [s.content_len(vocab) for _, s in audio]
        fixed = b_span
        if fixed is None and len(contents) > 1:
            fixed = contents[0]
        for (si, _), c in zip(audio[:-1], contents[:-1]):
            if fixed is not None and c != fixed:
                errs.append(f"span[{si}]: non-final audio span content length {c} != B_span {fixed}")
        final_si, _ = audio[-1]
        final_c = contents[-1]
        if final_c < 1:
            errs.append(f"span[{final_si}]: final audio span has no content")
        elif fixed is not None and final_c > fixed:
            errs.append(f"span[{final_si}]: final audio span content length {final_c} > B_span {fixed}")

    if max_len is not None and seq.total_len() > max_len:
        errs.append(f"total length {seq.total_len()} > max_len {max_len}")
    return errs


def write_jsonl(path, records: Iterable[InterleavedSequence]) -> int:
    """One record per line; returns the record count."""
    n = 0
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), separators=(",", ":")))
            f.write("\n")
            n += 1
    return n


def read_jsonl(path) -> list[InterleavedSequence]:
    """Parse a corpus file; raises CorpusFormatError naming the offending line."""
    out: list[InterleavedSequence] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(InterleavedSequence.from_dict(d))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusFormatError(f"{path}: line {lineno}: {e}") from e
    return out


def split_indices(count: int, fractions: tuple[float, float, float], seed: int) -> dict[str, list[int]]:
    """Deterministic hash split with exact counts.

    Indices are ranked by sha256(seed, index); the first floor(f_train*N) go to
    train, the next floor(f_val*N) to val, the rest to test. Within each split,
    records keep corpus order.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    digests = []
    for i in range(count):
        h = hashlib.sha256(f"{seed}:{i}".encode()).hexdigest()
        digests.append((h, i))
    digests.sort()
    ranked = [i for _, i in digests]
    n_train = int(fractions[0] * count)
    n_val = int(fractions[1] * count)
    splits = {
        "train": sorted(ranked[:n_train]),
        "val": sorted(ranked[n_train : n_train + n_val]),
        "test": sorted(ranked[n_train + n_val :]),
    }
    return splits
