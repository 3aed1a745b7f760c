"""Minimal decoder-only transformer over the unified vocabulary, plus the losses.

One forward pass serves both training objectives:
  * AR loss: response-text position k is predicted from the logits at k-1
    (next-token convention), plain cross-entropy;
  * denoising loss: masked audio position j is predicted from the logits at j
    (same-position convention) and weighted 1/lambda.

There is no time/step conditioning input — the reverse-transition score separates
into a time scalar times a time-independent clean conditional, so the network only
ever models the conditional. The output head is tied to the input embedding.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corruption import CorruptedBatchItem

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint missing, malformed, or inconsistent with its manifest."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 256
    rope_base: float = 10000.0
    wide: bool = False  # float64 for verification runs; float32 otherwise

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dim must be even (rotary rotates coordinate pairs)")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.wide else torch.float32


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.fc2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads

    def forward(self, x, allow4, cos, sin):
        B, L, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).view(B, L, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q = _rotate(q, cos, sin)
        k = _rotate(k, cos, sin)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allow4, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(B, L, d)
        x = x + self.proj(ctx)
        h = self.ln2(x)
        x = x + self.fc2(F.gelu(self.fc1(h)))
        return x


def _rotate(x, cos, sin):
    # rotate-half convention on the last dim: (x1, x2) -> (x1 c - x2 s, x2 c + x1 s)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)


class TokenTransformer(nn.Module):
    """Pre-LN transformer with rotary positions and a tied output head.

    Init (seeded, documented scales): embeddings and input projections
    N(0, 0.02); residual-exit projections (attention proj, fc2)
    N(0, 0.02/sqrt(2*n_layers)); biases 0; norm weights 1.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        head_dim = cfg.d_model // cfg.n_heads
        inv_freq = cfg.rope_base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
        self.register_buffer("inv_freq", inv_freq, persistent=False)
        self.to(cfg.dtype)
        self._init_params(seed)

    def _init_params(self, seed: int):
        g = torch.Generator().manual_seed(seed)
        std = 0.02
        out_std = std / math.sqrt(2 * max(self.cfg.n_layers, 1))
        with torch.no_grad():
            for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if name.endswith("bias") or ".ln" in name or name.startswith("ln_f"):
                    if name.endswith("weight"):
                        p.fill_(1.0)
                    else:
                        p.zero_()
                elif ".proj." in name or ".fc2." in name:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * out_std)
                else:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _angles(self, L: int):
        pos = torch.arange(L, dtype=torch.float64)
        freqs = torch.outer(pos, self.inv_freq)
        return freqs.cos().to(self.cfg.dtype), freqs.sin().to(self.cfg.dtype)

    def forward(self, tokens, allow) -> torch.Tensor:
        """tokens: (L,) or (B, L) int64; allow: (L, L) or (B, L, L) bool.
        Returns logits of shape (L, V) or (B, L, V)."""
        if isinstance(tokens, np.ndarray):
            tokens = torch.from_numpy(tokens)
        if isinstance(allow, np.ndarray):
            allow = torch.from_numpy(allow)
        tokens = tokens.to(torch.int64)
        single = tokens.dim() == 1
        if single:
            tokens = tokens.unsqueeze(0)
        if allow.dim() == 2:
            allow4 = allow.to(torch.bool).unsqueeze(0).unsqueeze(0)
        elif allow.dim() == 3:
            allow4 = allow.to(torch.bool).unsqueeze(1)
        else:
            raise ValueError(f"allow must be 2-D or 3-D, got {allow.dim()}-D")
        B, L = tokens.shape
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        if allow4.shape[-1] != L or allow4.shape[-2] != L:
            raise ValueError(f"mask shape {tuple(allow.shape)} does not match length {L}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")

        x = self.emb(tokens)
        cos, sin = self._angles(L)
        for blk in self.blocks:
            x = blk(x, allow4, cos, sin)
        h = self.ln_f(x)
        logits = h @ self.emb.weight.T
        return logits.squeeze(0) if single else logits


def _gather_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def ar_loss(logits: torch.Tensor, item: CorruptedBatchItem) -> torch.Tensor:
    """Sum over k in ar_positions of -log softmax(logits[k-1])[clean[k]].

    [M] and PAD rows of the vocabulary stay in the softmax denominator; they are
    simply never targets. Empty ar_positions gives 0.
    """
    if len(item.ar_positions) == 0:
        return logits.new_zeros(())
    pos = torch.from_numpy(np.asarray(item.ar_positions, dtype=np.int64))
    targets = torch.from_numpy(item.clean_tokens[item.ar_positions].astype(np.int64))
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise ValueError("AR target id out of vocabulary range")
    return _gather_nll(logits[pos - 1], targets).sum()


def dce_loss(logits: torch.Tensor, item: CorruptedBatchItem, mask_id: int) -> torch.Tensor:
    """(1/lambda) * sum over masked audio positions j of
    -log softmax(logits[j])[clean[j]] (same-position convention).

    Positions restored by prefix preservation are already out of nar_positions and
    contribute nothing. Raises if a nar position is not actually masked.
    """
    if len(item.nar_positions) == 0:
        return logits.new_zeros(())
    if not (item.tokens[item.nar_positions] == mask_id).all():
        raise ValueError("contract violation: nar position not masked in tokens")
    pos = torch.from_numpy(np.asarray(item.nar_positions, dtype=np.int64))
    targets = torch.from_numpy(item.clean_tokens[item.nar_positions].astype(np.int64))
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise ValueError("NAR target id out of vocabulary range")
    return _gather_nll(logits[pos], targets).sum() / item.lam


@dataclass
class LossBreakdown:
    l_ar: torch.Tensor
    l_nar: torch.Tensor
    l_unified: torch.Tensor
    n_ar: int
    n_nar: int


def unified_loss(logits: torch.Tensor, item: CorruptedBatchItem, mask_id: int) -> LossBreakdown:
    """The combined objective: l_unified = l_ar + l_nar, exactly."""
    la = ar_loss(logits, item)
    ln = dce_loss(logits, item, mask_id)
    return LossBreakdown(
        l_ar=la,
        l_nar=ln,
        l_unified=la + ln,
        n_ar=len(item.ar_positions),
        n_nar=len(item.nar_positions),
    )


def grad_check(
    model: TokenTransformer,
    item: CorruptedBatchItem,
    allow: np.ndarray,
    mask_id: int,
    epsilon: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences of
    l_unified over >= n_coords randomly sampled parameter coordinates.

    Requires wide (float64) precision — float32 finite differences are noise at
    useful epsilon. Relative error uses denominator max(|a| + |fd|, 1e-3) so
    legitimately-zero gradient coordinates compare against epsilon-noise sanely.
    """
    if model.cfg.dtype != torch.float64:
        raise ValueError("grad_check requires a wide-precision (float64) model")
    tokens = torch.from_numpy(item.tokens.astype(np.int64))
    allow_t = torch.from_numpy(np.asarray(allow, dtype=bool))

    def f() -> torch.Tensor:
        logits = model(tokens, allow_t)
        return unified_loss(logits, item, mask_id).l_unified

    model.zero_grad(set_to_none=True)
    loss = f()
    if not torch.isfinite(loss):
        raise RuntimeError(f"numeric failure: loss is {loss.item()}")
    loss.backward()

    params = [p for _, p in sorted(model.named_parameters(), key=lambda kv: kv[0])]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)

    max_rel = 0.0
    with torch.no_grad():
        for c in coords:
            t_idx = int(np.searchsorted(bounds, c, side="right"))
            off = int(c - (bounds[t_idx - 1] if t_idx else 0))
            p = params[t_idx]
            flat = p.view(-1)
            orig = flat[off].item()
            analytic = p.grad.view(-1)[off].item() if p.grad is not None else 0.0
            flat[off] = orig + epsilon
            f_plus = f().item()
            flat[off] = orig - epsilon
            f_minus = f().item()
            flat[off] = orig
            fd = (f_plus - f_minus) / (2 * epsilon)
            if not (math.isfinite(fd) and math.isfinite(analytic)):
                raise RuntimeError("numeric failure: non-finite gradient estimate")
            rel = abs(analytic - fd) / max(abs(analytic) + abs(fd), 1e-3)
            max_rel = max(max_rel, rel)
    return max_rel


# --- checkpoint format: JSON manifest + one little-endian binary blob ---------


def _np_dtype(t: torch.dtype) -> str:
    return {"torch.float32": "<f4", "torch.float64": "<f8"}[str(t)]


def save_checkpoint(
    model: TokenTransformer,
    ckpt_dir,
    extra_tensors: dict[str, np.ndarray] | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Write manifest.json + params.bin into ckpt_dir. Tensors are serialized in
    sorted-name order as little-endian floats at the model's precision (f4 for
    training checkpoints, f8 for wide verification models); round-trip bit-exact.

    extra_tensors (e.g. optimizer moments) go into the same blob under their own
    names; extra_meta is embedded in the manifest verbatim.
    """
    os.makedirs(ckpt_dir, exist_ok=True)
    dtype = _np_dtype(model.cfg.dtype)
    entries = []
    chunks = []
    offset = 0
    named = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    for name, arr in extra_tensors.items() if extra_tensors else []:
        if name in named:
            raise ValueError(f"extra tensor name collides with parameter: {name}")
        named[name] = np.asarray(arr)
    for name in sorted(named):
        arr = named[name].astype(dtype, copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.cfg),
        "dtype": dtype,
        "tensors": entries,
        "meta": extra_meta or {},
    }
    with open(os.path.join(ckpt_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(ckpt_dir, "params.bin"), "wb") as f:
        f.write(b"".join(chunks))


def read_manifest(ckpt_dir) -> dict:
    path = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.exists(path):
        raise CheckpointError(f"no manifest.json under {ckpt_dir}")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed manifest: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {manifest.get('format_version')!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return manifest


def load_checkpoint(ckpt_dir) -> tuple[TokenTransformer, dict[str, np.ndarray], dict]:
    """Rebuild the model from a checkpoint directory. Returns
    (model, non-parameter tensors, manifest)."""
    manifest = read_manifest(ckpt_dir)
    cfg = ModelConfig(**manifest["config"])
    blob_path = os.path.join(ckpt_dir, "params.bin")
    if not os.path.exists(blob_path):
        raise CheckpointError(f"no params.bin under {ckpt_dir}")
    blob = np.fromfile(blob_path, dtype=np.uint8)
    dtype = np.dtype(manifest["dtype"])
    tensors: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if raw.nbytes != e["nbytes"]:
            raise CheckpointError(f"blob truncated at tensor {e['name']!r}")
        tensors[e["name"]] = raw.view(dtype).reshape(e["shape"]).copy()
    model = TokenTransformer(cfg, seed=0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            arr = tensors.pop(name)
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    return model, tensors, manifest
