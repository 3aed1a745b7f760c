"""Position layout and the modality-aware attention allow-matrix.

Three region kinds share one sequence: the prompt is strictly causal (even when it
holds audio ids), text spans are causal but see every earlier span in full, and
audio spans are bidirectional within themselves while seeing earlier spans in full.
Nothing ever attends a later span. Masking state is irrelevant here — corruption
swaps token ids, never the allow-matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import InterleavedSequence, Vocabulary

PROMPT, TEXT, AUDIO, PAD = 0, 1, 2, 3

_KIND_NAMES = {PROMPT: "prompt", TEXT: "text", AUDIO: "audio", PAD: "pad"}

# The allow-matrix itself: a boolean (L, L) ndarray, allow[q][k] = query q may
# attend key k.
AttentionMask = np.ndarray


@dataclass
class SequenceLayout:
    """Per-position region tags: kinds[i] in {PROMPT, TEXT, AUDIO, PAD} and
    ords[i] = span ordinal (position order of the span; -1 for prompt/pad)."""

    kinds: np.ndarray
    ords: np.ndarray

    def __post_init__(self):
        self.kinds = np.asarray(self.kinds, dtype=np.int8)
        self.ords = np.asarray(self.ords, dtype=np.int32)
        if self.kinds.shape != self.ords.shape or self.kinds.ndim != 1:
            raise ValueError("kinds and ords must be 1-D arrays of equal length")
        self._check_invariants()

    def _check_invariants(self):
        span = (self.kinds == TEXT) | (self.kinds == AUDIO)
        span_ords = self.ords[span]
        if span_ords.size:
            d = np.diff(span_ords)
            if np.any(d < 0):
                raise ValueError("span ordinals must be nondecreasing along the sequence")
            # contiguity: an ordinal never reappears after a different one
            if np.any(d > 0):
                starts = np.flatnonzero(np.concatenate(([1], (d != 0).astype(np.int8))))
                if len(np.unique(span_ords)) != len(starts):
                    raise ValueError("span regions must be contiguous")
        prompt_pos = np.flatnonzero(self.kinds == PROMPT)
        if prompt_pos.size and span.any():
            if prompt_pos.max() > np.flatnonzero(span).min():
                raise ValueError("prompt positions must precede all spans")

    def __len__(self) -> int:
        return len(self.kinds)

    @classmethod
    def from_segments(cls, segments: list[tuple[str, int]]) -> "SequenceLayout":
        """Build from (kind, length) runs, e.g. [("p", 2), ("t", 2), ("a", 2)].

        Kinds: "p"/"prompt", "t"/"text", "a"/"audio", "pad". Span ordinals are
        assigned in order of appearance.
        """
        kinds: list[int] = []
        ords: list[int] = []
        next_ord = 0
        for kind, length in segments:
            k = kind.strip().lower()
            if length < 1:
                raise ValueError(f"segment length must be >= 1, got {length}")
            if k in ("p", "prompt"):
                code, o = PROMPT, -1
            elif k in ("t", "text"):
                code, o = TEXT, next_ord
                next_ord += 1
            elif k in ("a", "audio"):
                code, o = AUDIO, next_ord
                next_ord += 1
            elif k == "pad":
                code, o = PAD, -1
            else:
                raise ValueError(f"unknown region kind {kind!r}")
            kinds.extend([code] * length)
            ords.extend([o] * length)
        return cls(np.array(kinds), np.array(ords))

    @classmethod
    def from_sequence(cls, seq: InterleavedSequence) -> "SequenceLayout":
        """Layout of a flattened record: prompt, spans in order, then the terminal
        <EOS> (when present) as a one-position text region of its own."""
        segments: list[tuple[str, int]] = []
        if seq.prompt:
            segments.append(("p", len(seq.prompt)))
        for s in seq.spans:
            segments.append((s.kind[0], len(s.tokens)))
        if seq.eos:
            segments.append(("t", 1))
        return cls.from_segments(segments)

    def padded(self, n_pad: int) -> "SequenceLayout":
        if n_pad == 0:
            return self
        return SequenceLayout(
            np.concatenate([self.kinds, np.full(n_pad, PAD, dtype=np.int8)]),
            np.concatenate([self.ords, np.full(n_pad, -1, dtype=np.int32)]),
        )

    def describe(self) -> str:
        return ",".join(_KIND_NAMES[int(k)] for k in self.kinds)


def flatten_sequence(seq: InterleavedSequence, vocab: Vocabulary) -> tuple[np.ndarray, SequenceLayout]:
    """Token array and layout of a record, terminal <EOS> materialized."""
    toks = list(seq.prompt)
    for s in seq.spans:
        toks.extend(s.tokens)
    if seq.eos:
        toks.append(vocab.eos)
    return np.array(toks, dtype=np.int64), SequenceLayout.from_sequence(seq)


def build_modality_mask(layout: SequenceLayout) -> AttentionMask:
    """The L x L allow-matrix for one laid-out sequence.

    allow[q][k] is true iff
      (a) q, k in prompt and k <= q;
      (b) q in text: k in prompt, or k in an earlier span, or k <= q in q's own span;
      (c) q in audio span m: k in prompt, or k in an earlier span, or k anywhere in
          audio span m (bidirectional, self included).
    Padding attends only itself and is attended by nothing.
    """
    L = len(layout)
    qk = layout.kinds[:, None]
    kk = layout.kinds[None, :]
    qo = layout.ords[:, None]
    ko = layout.ords[None, :]
    pos = np.arange(L)
    causal = pos[None, :] <= pos[:, None]  # k <= q

    k_prompt = kk == PROMPT
    k_span = (kk == TEXT) | (kk == AUDIO)
    earlier = k_span & (ko < qo)
    same = k_span & (ko == qo)

    allow = np.zeros((L, L), dtype=bool)
    allow |= (qk == PROMPT) & k_prompt & causal
    allow |= (qk == TEXT) & (k_prompt | earlier | (same & causal))
    allow |= (qk == AUDIO) & (k_prompt | earlier | same)
    allow |= (qk == PAD) & (pos[None, :] == pos[:, None])
    return allow


def dump_mask(mask: AttentionMask, path_stem) -> tuple[str, str]:
    """Write the allow-matrix as `<stem>.csv` (0/1) and `<stem>.pgm` (P2 graymap,
    allowed = 0 ink / blocked = 255 paper). Both byte-stable for fixed input."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ValueError(f"mask must be square, got shape {mask.shape}")
    stem = str(path_stem)
    csv_path, pgm_path = stem + ".csv", stem + ".pgm"
    rows = [",".join("1" if v else "0" for v in row) for row in mask]
    with open(csv_path, "w") as f:
        f.write("\n".join(rows))
    h, w = mask.shape
    lines = [f"P2", f"{w} {h}", "255"]
    lines += [" ".join("0" if v else "255" for v in row) for row in mask]
    with open(pgm_path, "w") as f:
        f.write("\n".join(lines))
        f.write("\n")
    return csv_path, pgm_path


def parse_layout_spec(spec: str) -> SequenceLayout:
    """Parse a compact layout string like "p:2,t:3,a:8,t:1,a:4".

    Kinds: p (prompt), t (text span), a (audio span), pad. Ordinals follow
    appearance order.
    """
    segments: list[tuple[str, int]] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            raise ValueError(f"empty segment in layout spec {spec!r}")
        if ":" not in part:
            raise ValueError(f"segment {part!r} is not kind:length")
        kind, _, num = part.partition(":")
        try:
            length = int(num)
        except ValueError as e:
            raise ValueError(f"segment {part!r}: length is not an integer") from e
        segments.append((kind, length))
    if not segments:
        raise ValueError("layout spec is empty")
    return SequenceLayout.from_segments(segments)
