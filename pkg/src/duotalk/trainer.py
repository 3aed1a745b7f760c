"""Deterministic training loop: strategies -> corruption -> losses -> AdamW.

All randomness is derived statelessly: record i of the corpus shuffle depends on
(seed, epoch), the corruption of batch slot j at global step s on (seed, s, j),
and the batch-mixing coins on (seed, s). Resuming from a checkpoint therefore
reproduces the exact metric stream — the RNG "state" is the step counter.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .corpus import InterleavedSequence, Vocabulary
from .corruption import (
    CorruptedBatchItem,
    CorruptionConfig,
    apply_banom,
    apply_ppm,
    apply_sst,
    corrupt,
)
from .model import ModelConfig, TokenTransformer, load_checkpoint, save_checkpoint, unified_loss

METRICS_HEADER = "step,l_ar,l_nar,l_unified,lr,masked_frac"

# SeedSequence stream tags (arbitrary distinct constants)
_EPOCH_TAG, _ITEM_TAG, _BANOM_TAG = 11, 22, 33

_ADAM_BETAS = (0.9, 0.999)
_ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""


class ResumeError(RuntimeError):
    """Checkpoint exists but belongs to a different configuration."""


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 32
    peak_lr: float = 3e-4
    weight_decay: float = 1e-2
    warmup_ratio: float = 0.01
    seed: int = 0
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    checkpoint_every: int = 500
    normalize: bool = False  # divide by supervised-token count instead of batch size
    ar_weight: float = 1.0
    nar_weight: float = 1.0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over ceil(warmup_ratio * total) steps, then cosine to 0."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warmup = math.ceil(cfg.warmup_ratio * cfg.total_steps)
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    frac = (step - warmup) / max(cfg.total_steps - warmup, 1)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def config_hash(model_cfg: ModelConfig, cfg: TrainConfig, vocab: Vocabulary) -> str:
    payload = {
        "model": asdict(model_cfg),
        "train": asdict(cfg),
        "vocab": vocab.to_dict(),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def prepare_item(
    seq: InterleavedSequence,
    ccfg: CorruptionConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
) -> CorruptedBatchItem:
    """Strategy order for one record: truncation, corruption, prefix preservation.
    (Batch mixing happens at batch level, after this.)"""
    seq, k = apply_sst(seq, ccfg.p_trunc, rng)
    item = corrupt(seq, ccfg, rng, vocab)
    if k is not None:
        item.truncated = True
        item.trunc_len = k
    return apply_ppm(item, ccfg.p_prefix, rng)


def build_batch(
    records: list[InterleavedSequence],
    ccfg: CorruptionConfig,
    vocab: Vocabulary,
    seed: int,
    step: int,
) -> list[CorruptedBatchItem]:
    items = []
    for slot, seq in enumerate(records):
        rng = np.random.default_rng(np.random.SeedSequence((seed, _ITEM_TAG, step, slot)))
        items.append(prepare_item(seq, ccfg, vocab, rng))
    banom_rng = np.random.default_rng(np.random.SeedSequence((seed, _BANOM_TAG, step)))
    return apply_banom(items, ccfg.p_mix, banom_rng)


def collate(items: list[CorruptedBatchItem], vocab: Vocabulary, dtype=torch.float32):
    """Pad items to a common length; padding attends only itself and carries no loss."""
    lens = [len(it.tokens) for it in items]
    L = max(lens)
    B = len(items)
    tokens = np.full((B, L), vocab.pad, dtype=np.int64)
    allow = np.zeros((B, L, L), dtype=bool)
    from .attention import build_modality_mask

    for i, it in enumerate(items):
        n = lens[i]
        tokens[i, :n] = it.tokens
        allow[i] = build_modality_mask(it.layout.padded(L - n))
    return torch.from_numpy(tokens), torch.from_numpy(allow), lens


@dataclass
class TrainState:
    model: TokenTransformer
    opt: torch.optim.AdamW
    step: int
    model_cfg: ModelConfig
    cfg: TrainConfig
    vocab: Vocabulary
    cfg_hash: str


def init_state(model_cfg: ModelConfig, cfg: TrainConfig, vocab: Vocabulary) -> TrainState:
    model = TokenTransformer(model_cfg, seed=cfg.seed)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.peak_lr,
        betas=_ADAM_BETAS,
        eps=_ADAM_EPS,
        weight_decay=cfg.weight_decay,
    )
    return TrainState(
        model=model,
        opt=opt,
        step=0,
        model_cfg=model_cfg,
        cfg=cfg,
        vocab=vocab,
        cfg_hash=config_hash(model_cfg, cfg, vocab),
    )


def train_step(state: TrainState, items: list[CorruptedBatchItem]) -> dict:
    """One optimization step over a prepared batch; returns the metrics row.

    The objective is the batch sum of ar_weight*l_ar + nar_weight*l_nar divided by
    batch size (or, with cfg.normalize, by the supervised-position count). Metrics
    report per-item means of the unweighted losses.
    """
    cfg = state.cfg
    model = state.model
    vocab = state.vocab
    step = state.step + 1
    tokens, allow, lens = collate(items, vocab)
    logits = model(tokens, allow)

    total = logits.new_zeros(())
    sum_ar = logits.new_zeros(())
    sum_nar = logits.new_zeros(())
    n_supervised = 0
    n_masked = 0
    n_audio = 0
    for i, item in enumerate(items):
        bd = unified_loss(logits[i, : lens[i]], item, vocab.mask)
        if not torch.isfinite(bd.l_unified):
            raise NumericError(_diagnose(item, bd, step))
        total = total + cfg.ar_weight * bd.l_ar + cfg.nar_weight * bd.l_nar
        sum_ar = sum_ar + bd.l_ar.detach()
        sum_nar = sum_nar + bd.l_nar.detach()
        n_supervised += bd.n_ar + bd.n_nar
        n_masked += bd.n_nar
        n_audio += sum(len(s) for s in item.audio_spans)

    denom = max(n_supervised, 1) if cfg.normalize else len(items)
    objective = total / denom
    if not torch.isfinite(objective):
        raise NumericError(f"non-finite batch objective at step {step}")

    model.zero_grad(set_to_none=True)
    objective.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    lr = lr_at(step, cfg)
    for group in state.opt.param_groups:
        group["lr"] = lr
    state.opt.step()
    state.step = step

    b = len(items)
    return {
        "step": step,
        "l_ar": sum_ar.item() / b,
        "l_nar": sum_nar.item() / b,
        "l_unified": (sum_ar + sum_nar).item() / b,
        "lr": lr,
        "masked_frac": n_masked / max(n_audio, 1),
    }


def _diagnose(item: CorruptedBatchItem, bd, step: int) -> str:
    return json.dumps(
        {
            "step": step,
            "l_ar": float(bd.l_ar.detach()),
            "l_nar": float(bd.l_nar.detach()),
            "lambda": item.lam,
            "tokens": item.tokens.tolist(),
            "clean_tokens": item.clean_tokens.tolist(),
            "nar_positions": item.nar_positions.tolist(),
        }
    )


def _format_row(m: dict) -> str:
    return (
        f"{m['step']},{m['l_ar']:.10g},{m['l_nar']:.10g},"
        f"{m['l_unified']:.10g},{m['lr']:.10g},{m['masked_frac']:.10g}"
    )


def _truncate_metrics(metrics_path, step: int) -> None:
    """Drop metric rows past `step` (leftovers from a run interrupted after its
    last checkpoint) so the resumed stream continues without duplicates."""
    if not os.path.isfile(metrics_path):
        with open(metrics_path, "w") as f:
            f.write(METRICS_HEADER + "\n")
        return
    with open(metrics_path) as f:
        lines = f.read().splitlines()
    kept = [lines[0] if lines else METRICS_HEADER]
    for line in lines[1:]:
        if line and int(line.split(",", 1)[0]) <= step:
            kept.append(line)
    with open(metrics_path, "w") as f:
        f.write("\n".join(kept) + "\n")


_CKPT_RE = re.compile(r"^ckpt_(\d{7})$")


def latest_checkpoint(out_dir) -> str | None:
    best = None
    if not os.path.isdir(out_dir):
        return None
    for name in os.listdir(out_dir):
        m = _CKPT_RE.match(name)
        if m and (best is None or int(m.group(1)) > best[0]):
            best = (int(m.group(1)), os.path.join(out_dir, name))
    return best[1] if best else None


def save_state(state: TrainState, out_dir) -> str:
    """Checkpoint = model params + optimizer moments in one manifest+blob pair."""
    ckpt_dir = os.path.join(out_dir, f"ckpt_{state.step:07d}")
    extra: dict[str, np.ndarray] = {}
    adam_step = state.step  # torch tracks per-param step counts; ours are uniform
    for name, p in state.model.named_parameters():
        st = state.opt.state.get(p)
        if st:
            extra[f"opt.exp_avg.{name}"] = st["exp_avg"].detach().cpu().numpy()
            extra[f"opt.exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().cpu().numpy()
    meta = {
        "step": state.step,
        "adam_step": adam_step,
        "config_hash": state.cfg_hash,
        "train_config": asdict(state.cfg),
        "vocab": state.vocab.to_dict(),
    }
    save_checkpoint(state.model, ckpt_dir, extra_tensors=extra, extra_meta=meta)
    return ckpt_dir


def load_state(ckpt_dir, model_cfg: ModelConfig, cfg: TrainConfig, vocab: Vocabulary) -> TrainState:
    """Rebuild a TrainState; refuses checkpoints written under a different config."""
    model, extra, manifest = load_checkpoint(ckpt_dir)
    meta = manifest.get("meta", {})
    expect = config_hash(model_cfg, cfg, vocab)
    if meta.get("config_hash") != expect:
        raise ResumeError(
            f"checkpoint at {ckpt_dir} was written under a different config "
            f"(hash {meta.get('config_hash', 'missing')[:12]}…, expected {expect[:12]}…)"
        )
    state = init_state(model_cfg, cfg, vocab)
    state.model = model
    state.opt = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.peak_lr,
        betas=_ADAM_BETAS,
        eps=_ADAM_EPS,
        weight_decay=cfg.weight_decay,
    )
    state.step = int(meta["step"])
    if state.step > 0:
        adam_step = float(meta["adam_step"])
        for name, p in model.named_parameters():
            ea = extra.get(f"opt.exp_avg.{name}")
            eas = extra.get(f"opt.exp_avg_sq.{name}")
            if ea is None or eas is None:
                raise ResumeError(f"checkpoint missing optimizer moments for {name!r}")
            state.opt.state[p] = {
                "step": torch.tensor(adam_step, dtype=torch.float32),
                "exp_avg": torch.from_numpy(ea.copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(eas.copy()).to(p.dtype),
            }
    return state


def run(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    records: list[InterleavedSequence],
    vocab: Vocabulary,
    out_dir,
    resume: bool = False,
) -> TrainState:
    """Train for cfg.total_steps over the corpus; write metrics.csv and a
    checkpoint every cfg.checkpoint_every steps plus one at the end.

    Epochs draw a fresh seeded permutation; partial trailing batches are dropped
    so every step sees exactly batch_size records (the corpus must therefore hold
    at least batch_size records). On KeyboardInterrupt a checkpoint is flushed
    before re-raising.
    """
    if len(records) < cfg.batch_size:
        raise ValueError(
            f"corpus has {len(records)} records; need at least batch_size={cfg.batch_size}"
        )
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")

    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is None:
            raise ResumeError(f"--resume given but no checkpoint under {out_dir}")
        state = load_state(ckpt, model_cfg, cfg, vocab)
        _truncate_metrics(metrics_path, state.step)
    else:
        state = init_state(model_cfg, cfg, vocab)
        with open(metrics_path, "w") as f:
            f.write(METRICS_HEADER + "\n")

    batches_per_epoch = len(records) // cfg.batch_size
    metrics_f = open(metrics_path, "a")
    try:
        while state.step < cfg.total_steps:
            step = state.step  # 0-based position of the *next* step - 1
            epoch = step // batches_per_epoch
            within = step % batches_per_epoch
            perm = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, _EPOCH_TAG, epoch))
            ).permutation(len(records))
            sel = perm[within * cfg.batch_size : (within + 1) * cfg.batch_size]
            batch_records = [records[i] for i in sel]
            items = build_batch(batch_records, cfg.corruption, vocab, cfg.seed, step + 1)
            m = train_step(state, items)
            metrics_f.write(_format_row(m) + "\n")
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.total_steps:
                metrics_f.flush()
                save_state(state, out_dir)
    except KeyboardInterrupt:
        metrics_f.flush()
        save_state(state, out_dir)
        raise
    finally:
        metrics_f.close()
    if latest_checkpoint(out_dir) != os.path.join(out_dir, f"ckpt_{state.step:07d}"):
        save_state(state, out_dir)
    return state
