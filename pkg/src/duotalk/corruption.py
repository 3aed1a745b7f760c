"""Absorbing-state masking of audio spans and the three train-test-gap strategies.

The forward process replaces each audio token independently with [M] at a level
drawn per item; the three strategies then reshape what the two losses see:

  * batch mixing   (apply_banom): some items are reset to clean and train AR-only,
    so text learns to read *unmasked* audio context as it will at inference;
  * prefix preservation (apply_ppm): earlier audio spans are restored to clean and
    exempted from the denoising loss, matching inference where previous spans are
    already committed;
  * final-span truncation (apply_sst): the last audio span is cut to a random
    length and its terminator dropped, so span ends stop predicting the
    terminator positionally and termination must be read off the text content.

Order in the trainer: truncation (on the record) -> corrupt -> prefix preservation
(per item) -> batch mixing (per batch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AUDIO, SequenceLayout, flatten_sequence
from .corpus import InterleavedSequence, Span, Vocabulary


@dataclass(frozen=True)
class CorruptionConfig:
    p_mix: float = 0.3
    p_prefix: float = 0.3
    p_trunc: float = 0.5
    lambda_min: float = 0.01

    def __post_init__(self):
        for name in ("p_mix", "p_prefix", "p_trunc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 < self.lambda_min <= 1.0:
            raise ValueError(f"lambda_min must be in (0, 1], got {self.lambda_min}")


def mask_probability(sigma_bar: float) -> float:
    """Probability that a token is masked after accumulated noise sigma_bar:
    1 - exp(-sigma_bar). Monotone nondecreasing; 0 at 0, -> 1 as sigma_bar -> inf."""
    if sigma_bar < 0:
        raise ValueError(f"sigma_bar must be >= 0, got {sigma_bar}")
    return -math.expm1(-sigma_bar)


def score_time_factor(sigma_bar: float) -> float:
    """Time-dependent scalar e^{-s} / (1 - e^{-s}) multiplying the clean conditional
    in the reverse-transition score; singular at 0, -> 0 as s -> inf.

    Exposed so tests can confirm the score's time/content separation: the model
    itself carries no time input, only this scalar depends on the noise level.
    """
    if sigma_bar <= 0:
        raise ValueError(f"sigma_bar must be > 0, got {sigma_bar}")
    return math.exp(-sigma_bar) / -math.expm1(-sigma_bar)


@dataclass
class CorruptedBatchItem:
    """One loss-ready training item.

    tokens       ids after corruption ([M] exactly at nar_positions)
    clean_tokens original ids (prompt + spans + terminal)
    ar_positions target positions for the AR loss: response text + terminal,
                 never prompt, never audio, never position 0
    nar_positions masked audio positions for the denoising loss
    lam          sampled masking level, in [lambda_min, 1]
    excluded_spans 1-based audio span indices restored by prefix preservation
    truncated/trunc_len  final-span truncation record (k), when applied
    banom_clean  item was reset to clean by batch mixing (AR-only)
    layout / audio_spans positional bookkeeping for mask building and the losses
    """

    tokens: np.ndarray
    clean_tokens: np.ndarray
    ar_positions: np.ndarray
    nar_positions: np.ndarray
    lam: float
    excluded_spans: list[int] = field(default_factory=list)
    truncated: bool = False
    trunc_len: int | None = None
    banom_clean: bool = False
    layout: SequenceLayout | None = None
    audio_spans: list[np.ndarray] = field(default_factory=list)

    def check(self, vocab: Vocabulary) -> None:
        """Assert the item invariants; raises AssertionError with context."""
        audio_pos = np.concatenate(self.audio_spans) if self.audio_spans else np.array([], dtype=np.int64)
        assert np.isin(self.nar_positions, audio_pos).all(), "nar position outside audio spans"
        is_mask = self.tokens == vocab.mask
        nar_set = np.zeros(len(self.tokens), dtype=bool)
        nar_set[self.nar_positions] = True
        assert (is_mask == nar_set).all(), "tokens[i] == [M] must hold iff i in nar_positions"
        if self.layout is not None:
            assert not np.isin(self.ar_positions, audio_pos).any(), "ar position inside audio"
        assert 0 not in self.ar_positions, "position 0 has no previous-position logits"
        assert not math.isnan(self.lam) and self.lam > 0, "lambda must be positive"


def supervision_index(seq: InterleavedSequence, vocab: Vocabulary):
    """Flatten a record and index its supervised positions.

    Returns (tokens, layout, ar_positions, audio_spans) where audio_spans lists
    the absolute position array of each audio span in order (1-based span index
    m corresponds to audio_spans[m-1]).
    """
    tokens, layout = flatten_sequence(seq, vocab)
    pos = len(seq.prompt)
    ar: list[int] = []
    audio_spans: list[np.ndarray] = []
    for s in seq.spans:
        n = len(s.tokens)
        if s.kind == "text":
            ar.extend(range(pos, pos + n))
        else:
            audio_spans.append(np.arange(pos, pos + n, dtype=np.int64))
        pos += n
    if seq.eos:
        ar.append(pos)
        pos += 1
    ar_positions = np.array([k for k in ar if k > 0], dtype=np.int64)
    return tokens, layout, ar_positions, audio_spans


def corrupt(
    seq: InterleavedSequence,
    cfg: CorruptionConfig,
    rng: np.random.Generator,
    vocab: Vocabulary,
    lam: float | None = None,
) -> CorruptedBatchItem:
    """Draw lam ~ U([lambda_min, 1]) and mask every audio token (the trailing
    terminator included) i.i.d. with probability lam, in parallel across all
    audio spans. Text and control positions outside audio spans are untouched.
    Pass `lam` to force the masking level instead of sampling it (calibration
    checks); the per-position draws are unaffected."""
    clean, layout, ar_positions, audio_spans = supervision_index(seq, vocab)
    if lam is None:
        lam = float(rng.uniform(cfg.lambda_min, 1.0))
    elif not 0.0 <= lam <= 1.0:
        raise ValueError(f"forced masking level must be in [0, 1], got {lam}")
    tokens = clean.copy()
    masked: list[np.ndarray] = []
    for span_pos in audio_spans:
        hits = rng.random(len(span_pos)) < lam
        hit_pos = span_pos[hits]
        tokens[hit_pos] = vocab.mask
        masked.append(hit_pos)
    nar_positions = (
        np.concatenate(masked) if masked else np.array([], dtype=np.int64)
    )
    return CorruptedBatchItem(
        tokens=tokens,
        clean_tokens=clean,
        ar_positions=ar_positions,
        nar_positions=np.sort(nar_positions),
        lam=lam,
        layout=layout,
        audio_spans=audio_spans,
    )


def apply_banom(
    items: list[CorruptedBatchItem], p_mix: float, rng: np.random.Generator
) -> list[CorruptedBatchItem]:
    """Batch mixing: each item independently, with probability p_mix, is reset to
    its clean tokens and trains AR-only (denoising positions cleared)."""
    coins = rng.random(len(items)) < p_mix
    out = []
    for item, hit in zip(items, coins):
        if hit and not item.banom_clean:
            out.append(
                replace(
                    item,
                    tokens=item.clean_tokens.copy(),
                    nar_positions=np.array([], dtype=np.int64),
                    banom_clean=True,
                )
            )
        else:
            out.append(item)
    return out


def _restore_prefix(item: CorruptedBatchItem, m: int) -> CorruptedBatchItem:
    """Restore audio spans 1..m-1 to clean and drop them from nar_positions."""
    if m <= 1:
        return replace(item, excluded_spans=[])
    tokens = item.tokens.copy()
    excluded = list(range(1, m))
    drop = np.concatenate([item.audio_spans[i - 1] for i in excluded])
    tokens[drop] = item.clean_tokens[drop]
    keep = ~np.isin(item.nar_positions, drop)
    return replace(
        item,
        tokens=tokens,
        nar_positions=item.nar_positions[keep],
        excluded_spans=excluded,
    )


def apply_ppm(
    item: CorruptedBatchItem, p_prefix: float, rng: np.random.Generator
) -> CorruptedBatchItem:
    """Prefix preservation: with probability p_prefix draw a cutoff m ~ U{1..M};
    spans before m go back to clean (and out of the denoising loss), spans >= m
    keep their masking."""
    m_total = len(item.audio_spans)
    if m_total == 0 or rng.random() >= p_prefix:
        return item
    m = int(rng.integers(1, m_total + 1))
    return _restore_prefix(item, m)


def apply_sst(
    seq: InterleavedSequence,
    p_trunc: float,
    rng: np.random.Generator,
) -> tuple[InterleavedSequence, int | None]:
    """Final-span truncation: with probability p_trunc draw k ~ U{1..n-1} (n = final
    audio span length including its terminator) and replace the final span with its
    first k tokens; the terminator and suffix are removed, NOT re-appended. Returns
    (sequence, k) or (sequence, None).

    Dropping the terminator is the point: it manufactures spans whose last position
    holds an ordinary audio token, so "last slot of my span" stops being a perfect
    terminator predictor and the model is forced to decide termination from the
    paired text content. (Appending a fresh terminator instead would keep
    "terminator = last slot" true in every training item; a model converged on that
    shortcut places the terminator wherever the decode-time block happens to end,
    which is exactly the positional bias this transform exists to break.)

    Applied to the record before corruption. A record whose final audio span is
    shorter than 2 tokens is returned unchanged (nothing to truncate).
    """
    audio_idx = [i for i, s in enumerate(seq.spans) if s.kind == "audio"]
    if not audio_idx:
        return seq, None
    last = audio_idx[-1]
    n = len(seq.spans[last].tokens)
    if n < 2 or rng.random() >= p_trunc:
        return seq, None
    k = int(rng.integers(1, n))
    new_span = Span("audio", list(seq.spans[last].tokens[:k]))
    spans = list(seq.spans)
    spans[last] = new_span
    return (
        InterleavedSequence(prompt=list(seq.prompt), spans=spans, eos=seq.eos, direction=seq.direction),
        k,
    )
