"""Numerical verification: the unified-loss bound, estimator equivalence, loss
cross-checks, and task evaluation.

The bound check computes, for a clean sequence, the prefix NLL of the
autoregressive positions plus the exact order-averaged NLL of every audio span,
and compares against the negative log of the order-marginalized likelihood.
The order average and the order marginal are both computed by dynamic
programming over masked subsets (2^K scorer calls per span), so spans are
refused above a small length cap.

The equivalence check Monte-Carlos the same expected span loss two ways — by
sampling reveal orders, and by sampling a masking level with 1/level-weighted
denoising cross-entropy — and demands agreement within combined standard error.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import SequenceLayout, build_modality_mask, flatten_sequence
from .corpus import InterleavedSequence, TaskSpec, Vocabulary, expand_text
from .corruption import supervision_index
from .decoder import DecodeConfig, hybrid_generate, model_scorer

MAX_EXACT_SPAN = 6  # subset DP is 2^K scorer rows; refuse anything bigger


class VerificationError(RuntimeError):
    """A verification check failed beyond tolerance."""


def batch_model_scorer(model):
    """(N, L) tokens + shared layout -> (N, L, V) float64 logits."""
    import torch

    cache: list = [None, None]  # strong ref to the last layout and its mask

    def score(tokens: np.ndarray, layout: SequenceLayout) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        if cache[0] is not layout:
            cache[0] = layout
            cache[1] = build_modality_mask(layout)
        with torch.no_grad():
            out = model(tokens, cache[1])  # 2-D mask broadcasts across the batch
        res = out.double().numpy()
        return res[0] if single else res

    return score


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def _logsumexp(values: np.ndarray) -> float:
    m = float(np.max(values))
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.sum(np.exp(values - m))))


def ar_prefix_nll(batch_scorer, tokens: np.ndarray, layout: SequenceLayout, vocab: Vocabulary) -> float:
    """Sum of next-token NLLs at the autoregressively supervised positions of a
    clean sequence (each predicted from the logits one position earlier)."""
    seq_like = np.asarray(tokens, dtype=np.int64)
    logits = batch_scorer(seq_like, layout)
    logp = _log_softmax_rows(logits)
    total = 0.0
    for k in range(1, len(seq_like)):
        if layout.kinds[k] == 1:  # text regions: spans and the terminal marker
            total += -float(logp[k - 1, seq_like[k]])
    return total


def span_conditionals(
    batch_scorer,
    tokens: np.ndarray,
    layout: SequenceLayout,
    positions: np.ndarray,
    vocab: Vocabulary,
    chunk: int = 256,
) -> np.ndarray:
    """cond[m, s] = NLL of the true token at span slot s when exactly the slots
    in bitmask m are masked (s must be set in m; other entries stay NaN).

    One scorer row per non-empty subset of the span's positions; everything
    outside the span stays clean.
    """
    K = len(positions)
    if K > MAX_EXACT_SPAN:
        raise VerificationError(
            f"span has {K} positions; exact order enumeration is capped at {MAX_EXACT_SPAN}"
        )
    tokens = np.asarray(tokens, dtype=np.int64)
    masks = np.arange(1, 1 << K)
    rows = np.repeat(tokens[None, :], len(masks), axis=0)
    for i, m in enumerate(masks):
        for s in range(K):
            if m >> s & 1:
                rows[i, positions[s]] = vocab.mask
    cond = np.full((1 << K, K), np.nan)
    for lo in range(0, len(masks), chunk):
        sub = rows[lo : lo + chunk]
        logits = batch_scorer(sub, layout)
        logp = _log_softmax_rows(logits[:, positions, :])
        for i in range(len(sub)):
            m = int(masks[lo + i])
            for s in range(K):
                if m >> s & 1:
                    cond[m, s] = -logp[i, s, tokens[positions[s]]]
    return cond


def order_marginal_stats(cond: np.ndarray, K: int) -> tuple[float, float]:
    """(mean over reveal orders of the span NLL, NLL of the order-averaged span
    probability), both exact, from the subset conditional table."""
    full = (1 << K) - 1
    mean = np.zeros(1 << K)
    lse = np.zeros(1 << K)  # logsumexp over reveal orders of -NLL
    for m in range(1, 1 << K):
        slots = [s for s in range(K) if m >> s & 1]
        mean[m] = sum(cond[m, s] + mean[m & ~(1 << s)] for s in slots) / len(slots)
        lse[m] = _logsumexp(np.array([-cond[m, s] + lse[m & ~(1 << s)] for s in slots]))
    ao_nll = -(lse[full] - math.lgamma(K + 1))
    return float(mean[full]), float(ao_nll)


def enumerate_order_nlls(cond: np.ndarray, K: int) -> np.ndarray:
    """All K! per-order span NLLs, by brute force (test oracle for the DP)."""
    out = []
    for perm in itertools.permutations(range(K)):
        m = (1 << K) - 1
        total = 0.0
        for s in perm:
            total += cond[m, s]
            m &= ~(1 << s)
        out.append(total)
    return np.array(out)


@dataclass
class BoundCase:
    l_ar: float
    span_sizes: list[int]
    span_mean_nll: list[float]
    span_ao_nll: list[float]
    lhs: float = 0.0
    neg_log_marginal: float = 0.0
    slack: float = 0.0

    def finish(self) -> "BoundCase":
        lhs = self.l_ar
        rhs = self.l_ar
        for m, a in zip(self.span_mean_nll, self.span_ao_nll):
            lhs += m
            rhs += a
        self.lhs, self.neg_log_marginal, self.slack = lhs, rhs, lhs - rhs
        return self

    def to_dict(self) -> dict:
        return {
            "l_ar": self.l_ar,
            "span_sizes": self.span_sizes,
            "span_mean_nll": self.span_mean_nll,
            "span_ao_nll": self.span_ao_nll,
            "lhs": self.lhs,
            "neg_log_marginal": self.neg_log_marginal,
            "slack": self.slack,
        }


def bound_case(batch_scorer, seq: InterleavedSequence, vocab: Vocabulary) -> BoundCase:
    """Evaluate the ordering bound on one sequence: prefix NLL plus exact
    order-averaged span NLLs on the left, order-marginalized NLL on the right."""
    tokens, layout = flatten_sequence(seq, vocab)
    case = BoundCase(
        l_ar=ar_prefix_nll(batch_scorer, tokens, layout, vocab),
        span_sizes=[],
        span_mean_nll=[],
        span_ao_nll=[],
    )
    _, _, _, audio_spans = supervision_index(seq, vocab)
    for positions in audio_spans:
        cond = span_conditionals(batch_scorer, tokens, layout, positions, vocab)
        mean_nll, ao_nll = order_marginal_stats(cond, len(positions))
        case.span_sizes.append(len(positions))
        case.span_mean_nll.append(mean_nll)
        case.span_ao_nll.append(ao_nll)
    return case.finish()


@dataclass
class BoundReport:
    cases: list[BoundCase]
    tol: float = -1e-9

    @property
    def min_slack(self) -> float:
        return min(c.slack for c in self.cases)

    @property
    def n_cases(self) -> int:
        return len(self.cases)

    @property
    def violations(self) -> int:
        return sum(c.slack < self.tol for c in self.cases)

    @property
    def len1_nonzero(self) -> int:
        return sum(
            1
            for c in self.cases
            if c.span_sizes and all(k == 1 for k in c.span_sizes) and c.slack != 0.0
        )

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.len1_nonzero == 0

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "min_slack": self.min_slack,
            "violations": self.violations,
            "len1_nonzero": self.len1_nonzero,
            "ok": self.ok,
            "cases": [c.to_dict() for c in self.cases],
        }


def verify_unified_bound(
    batch_scorer, seqs: list[InterleavedSequence], vocab: Vocabulary, tol: float = -1e-9
) -> BoundReport:
    return BoundReport(cases=[bound_case(batch_scorer, s, vocab) for s in seqs], tol=tol)


# ---------------------------------------------------------------------------
# Monte Carlo estimator equivalence
# ---------------------------------------------------------------------------


def estimate_order_nll(
    batch_scorer,
    tokens: np.ndarray,
    layout: SequenceLayout,
    positions: np.ndarray,
    vocab: Vocabulary,
    n: int,
    rng: np.random.Generator,
    chunk: int = 4096,
) -> tuple[float, float]:
    """Sample reveal orders of the span; average the summed conditional NLLs.
    Returns (mean, standard error)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    K = len(positions)
    perms = np.argsort(rng.random((n, K)), axis=1)
    totals = np.zeros(n)
    # one scorer row per (sample, reveal step): positions perm[t:] still masked
    for t in range(K):
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            rows = np.repeat(tokens[None, :], hi - lo, axis=0)
            for i in range(lo, hi):
                rows[i - lo, positions[perms[i, t:]]] = vocab.mask
            logits = batch_scorer(rows, layout)
            target_pos = positions[perms[lo:hi, t]]
            lp = _log_softmax_rows(logits[np.arange(hi - lo), target_pos, :])
            totals[lo:hi] += -lp[np.arange(hi - lo), tokens[target_pos]]
    return float(np.mean(totals)), float(np.std(totals, ddof=1) / math.sqrt(n))


def estimate_dce_nll(
    batch_scorer,
    tokens: np.ndarray,
    layout: SequenceLayout,
    positions: np.ndarray,
    vocab: Vocabulary,
    n: int,
    rng: np.random.Generator,
    chunk: int = 4096,
) -> tuple[float, float]:
    """Sample a masking level per draw, mask span positions independently, and
    weight the masked-position cross-entropy by 1/level. Returns (mean, SE).

    The level is uniform on [0, 1); draws that mask nothing contribute zero, so
    the 1/level weight is only ever applied alongside at least one masked
    position. The weight's heavy tail inflates the sample SE together with any
    deviation, which keeps the combined-SE comparison meaningful.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    K = len(positions)
    lam = rng.random(n)
    masked = rng.random((n, K)) < lam[:, None]
    vals = np.zeros(n)
    active = np.flatnonzero(masked.any(axis=1))
    for lo in range(0, len(active), chunk):
        idx = active[lo : lo + chunk]
        rows = np.repeat(tokens[None, :], len(idx), axis=0)
        for r, i in enumerate(idx):
            rows[r, positions[masked[i]]] = vocab.mask
        logits = batch_scorer(rows, layout)
        logp = _log_softmax_rows(logits[:, positions, :])
        for r, i in enumerate(idx):
            slots = np.flatnonzero(masked[i])
            ce = -logp[r, slots, tokens[positions[slots]]].sum()
            vals[i] = ce / lam[i]
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(n))


@dataclass
class EquivalenceCase:
    mean_order: float
    se_order: float
    mean_dce: float
    se_dce: float
    n: int

    @property
    def diff(self) -> float:
        return self.mean_order - self.mean_dce

    @property
    def combined_se(self) -> float:
        return math.hypot(self.se_order, self.se_dce)

    @property
    def ok(self) -> bool:
        return abs(self.diff) <= 3.0 * self.combined_se

    def to_dict(self) -> dict:
        return {
            "mean_order": self.mean_order,
            "se_order": self.se_order,
            "mean_dce": self.mean_dce,
            "se_dce": self.se_dce,
            "n": self.n,
            "diff": self.diff,
            "combined_se": self.combined_se,
            "ok": self.ok,
        }


def equivalence_case(
    batch_scorer,
    seq: InterleavedSequence,
    vocab: Vocabulary,
    n: int,
    seed: int,
) -> EquivalenceCase:
    """Both Monte Carlo estimates of the expected span loss for the first audio
    span of `seq`, under one scorer."""
    tokens, layout = flatten_sequence(seq, vocab)
    _, _, _, audio_spans = supervision_index(seq, vocab)
    if not audio_spans:
        raise ValueError("sequence has no audio span to estimate")
    positions = audio_spans[0]
    rng_a = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    rng_b = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    mean_a, se_a = estimate_order_nll(batch_scorer, tokens, layout, positions, vocab, n, rng_a)
    mean_b, se_b = estimate_dce_nll(batch_scorer, tokens, layout, positions, vocab, n, rng_b)
    return EquivalenceCase(mean_order=mean_a, se_order=se_a, mean_dce=mean_b, se_dce=se_b, n=n)


def uniform_reference(span_size: int, vocab_size: int) -> float:
    """Expected span loss under a uniform scorer: span size times log vocab."""
    return span_size * math.log(vocab_size)


# ---------------------------------------------------------------------------
# Loss recomputation cross-check
# ---------------------------------------------------------------------------


def loss_crosscheck(model, items, vocab: Vocabulary, tol: float = 1e-4) -> dict:
    """Recompute both loss terms from raw logits in independent numpy arithmetic
    and compare with the training-path values. Catches sign or weighting slips
    that the statistical checks cannot see."""
    import torch

    from .model import unified_loss
    from .trainer import collate

    tokens, allow, lens = collate(items, vocab)
    with torch.no_grad():
        logits = model(tokens, allow)
    worst = 0.0
    rows = []
    for i, item in enumerate(items):
        bd = unified_loss(logits[i, : lens[i]], item, vocab.mask)
        lg = logits[i, : lens[i]].double().numpy()
        logp = _log_softmax_rows(lg)
        ar = 0.0
        for k in item.ar_positions:
            ar += -float(logp[k - 1, item.clean_tokens[k]])
        nar = 0.0
        if len(item.nar_positions):
            nar = -float(
                logp[item.nar_positions, item.clean_tokens[item.nar_positions]].sum()
            ) / item.lam
        # relative error: single-precision round-off grows with the 1/level weight
        err = max(
            abs(ar - float(bd.l_ar)) / max(1.0, abs(ar)),
            abs(nar - float(bd.l_nar)) / max(1.0, abs(nar)),
        )
        worst = max(worst, err)
        rows.append({"l_ar": float(bd.l_ar), "l_ar_ref": ar, "l_nar": float(bd.l_nar), "l_nar_ref": nar})
    report = {"max_rel_err": worst, "tol": tol, "ok": worst <= tol, "rows": rows}
    if not report["ok"]:
        raise VerificationError(
            f"loss recomputation disagrees with training path: max rel err {worst:.3e} > {tol:g}"
        )
    return report


# ---------------------------------------------------------------------------
# Task evaluation
# ---------------------------------------------------------------------------


def levenshtein(a: list[int], b: list[int]) -> int:
    """Edit distance (insert/delete/substitute, unit costs)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass
class EvalRow:
    index: int
    text_exact: bool
    audio_total: int
    audio_correct: int
    eoa_exact: bool
    final_content: int
    expected_final: int
    edit_distance: int | None = None
    ref_len: int | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "text_exact": self.text_exact,
            "audio_total": self.audio_total,
            "audio_correct": self.audio_correct,
            "eoa_exact": self.eoa_exact,
            "final_content": self.final_content,
            "expected_final": self.expected_final,
            "edit_distance": self.edit_distance,
            "ref_len": self.ref_len,
        }


@dataclass
class EvalReport:
    direction: str
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def audio_accuracy(self) -> float:
        tot = sum(r.audio_total for r in self.rows)
        return sum(r.audio_correct for r in self.rows) / max(tot, 1)

    @property
    def eoa_exact_rate(self) -> float:
        return sum(r.eoa_exact for r in self.rows) / max(self.n, 1)

    @property
    def text_exact_rate(self) -> float:
        return sum(r.text_exact for r in self.rows) / max(self.n, 1)

    @property
    def mean_edit_distance(self) -> float:
        rows = [r for r in self.rows if r.edit_distance is not None]
        if not rows:
            return float("nan")
        return float(np.mean([r.edit_distance / max(r.ref_len, 1) for r in rows]))

    def eoa_errors(self) -> list[int]:
        return [r.final_content - r.expected_final for r in self.rows]

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "n": self.n,
            "audio_accuracy": self.audio_accuracy,
            "eoa_exact_rate": self.eoa_exact_rate,
            "text_exact_rate": self.text_exact_rate,
            "mean_edit_distance": self.mean_edit_distance,
            "rows": [r.to_dict() for r in self.rows],
        }


def _span_content(span, vocab: Vocabulary) -> list[int]:
    toks = list(span.tokens)
    while toks and toks[-1] in (vocab.soa, vocab.eoa, vocab.eos):
        toks.pop()
    return toks


def evaluate_generation(
    seq_gen: InterleavedSequence,
    ref: InterleavedSequence,
    vocab: Vocabulary,
    task: TaskSpec,
    index: int = 0,
) -> EvalRow:
    """Score one generated sequence against its reference record.

    Speech-direction scoring checks the audio against the expansion of the text
    the model itself produced (isolating span fidelity and end-marker placement
    from text errors) and separately reports text exactness versus the
    reference. Transcription scoring is edit distance between generated and
    reference transcripts.
    """
    gen_text = [t - vocab.text_base for s in seq_gen.text_spans() for t in _span_content(s, vocab)]
    ref_text = [t - vocab.text_base for s in ref.text_spans() for t in _span_content(s, vocab)]
    text_exact = gen_text == ref_text

    audio_total = 0
    audio_correct = 0
    eoa_exact = True
    final_content = 0
    expected_final = 0
    gen_pairs = list(zip(seq_gen.text_spans(), seq_gen.audio_spans()))
    for si, (tspan, aspan) in enumerate(gen_pairs):
        t_content = _span_content(tspan, vocab)
        a_content = _span_content(aspan, vocab)
        expect = [
            t - vocab.audio_base
            for t in expand_text([x - vocab.text_base for x in t_content], vocab, task.r)
        ]
        got = [t - vocab.audio_base for t in a_content]
        audio_total += len(expect)
        audio_correct += sum(g == e for g, e in zip(got, expect))
        if si == len(gen_pairs) - 1:
            final_content = len(a_content)
            expected_final = len(expect)
            eoa_exact = eoa_exact and len(a_content) == len(expect)
        elif len(a_content) != len(expect):
            eoa_exact = False
    if not gen_pairs:
        eoa_exact = False

    ed = levenshtein(gen_text, ref_text)
    return EvalRow(
        index=index,
        text_exact=text_exact,
        audio_total=audio_total,
        audio_correct=audio_correct,
        eoa_exact=eoa_exact,
        final_content=final_content,
        expected_final=expected_final,
        edit_distance=ed,
        ref_len=len(ref_text),
    )


def evaluate_records(
    scorer_factory,
    records: list[InterleavedSequence],
    vocab: Vocabulary,
    task: TaskSpec,
    dcfg: DecodeConfig,
    direction: str = "tts",
) -> EvalReport:
    """Generate from each record's prompt and score against the record.
    `scorer_factory(record)` supplies the scorer (constant for a real model,
    per-record for reference scorers)."""
    report = EvalReport(direction=direction)
    for i, ref in enumerate(records):
        cfg_i = DecodeConfig(**{**dcfg.__dict__, "seed": dcfg.seed + i})
        out = hybrid_generate(scorer_factory(ref), ref.prompt, vocab, cfg_i, direction=direction)
        report.rows.append(evaluate_generation(out.sequence, ref, vocab, task, index=i))
    return report


def evaluate_model(
    model,
    records: list[InterleavedSequence],
    vocab: Vocabulary,
    task: TaskSpec,
    dcfg: DecodeConfig,
    direction: str = "tts",
) -> EvalReport:
    scorer = model_scorer(model)
    return evaluate_records(lambda ref: scorer, records, vocab, task, dcfg, direction)
