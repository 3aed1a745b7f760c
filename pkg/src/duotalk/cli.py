"""Command-line front end: corpus generation, training, generation, evaluation,
numerical verification, and attention-mask inspection.

Configuration is a flat key=value text file plus --key value overrides on the
command line; unknown keys are rejected. The only environment variables read
are SEED and OUT_DIR (weakest precedence: defaults < env < file < overrides).
Every run echoes its fully resolved configuration to the output directory as
config_echo.txt, which can itself be passed back via --config to reproduce the
run byte-for-byte.

Exit codes: 0 ok, 2 configuration, 3 numeric failure, 4 resume mismatch,
5 checkpoint problem, 6 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import figures
from .attention import build_modality_mask, dump_mask, parse_layout_spec
from .corpus import (
    CorpusFormatError,
    InterleavedSequence,
    TaskSpec,
    Vocabulary,
    build_vocabulary,
    generate_corpus,
    load_vocabulary,
    make_record,
    read_jsonl,
    save_vocabulary,
    split_indices,
    validate_sequence,
    write_jsonl,
)
from .corruption import CorruptionConfig, corrupt
from .decoder import DecodeConfig, hybrid_generate, model_scorer, oracle_scorer, uniform_scorer
from .model import (
    CheckpointError,
    ModelConfig,
    TokenTransformer,
    grad_check,
    load_checkpoint,
)
from .trainer import NumericError, ResumeError, TrainConfig, prepare_item, run as train_run
from .verify import (
    BoundReport,
    VerificationError,
    batch_model_scorer,
    equivalence_case,
    evaluate_records,
    loss_crosscheck,
    uniform_reference,
    verify_unified_bound,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_RESUME, EXIT_CHECKPOINT, EXIT_VERIFY = 0, 2, 3, 4, 5, 6


class ConfigError(RuntimeError):
    """Bad, unknown, or missing configuration key."""


_REQUIRED = object()


def _cast_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_CASTERS = {int: int, float: float, bool: _cast_bool, str: str}

_COMMON = {"seed": (int, 0), "out": (str, _REQUIRED)}

_TASK_KEYS = {
    "n_text": (int, 32),
    "n_audio": (int, 64),
    "r": (int, 4),
    "n_t": (int, 4),
    "noise_prob": (float, 0.0),
    "direction": (str, "tts"),
    "min_text_len": (int, 2),
    "max_text_len": (int, 12),
}

_MODEL_KEYS = {
    "d_model": (int, 128),
    "n_layers": (int, 4),
    "n_heads": (int, 4),
    "d_ff": (int, 512),
    "max_len": (int, 256),
    "rope_base": (float, 10000.0),
    "wide": (bool, False),
}

_CORRUPT_KEYS = {
    "p_mix": (float, 0.3),
    "p_prefix": (float, 0.3),
    "p_trunc": (float, 0.5),
    "lambda_min": (float, 0.01),
}

_TRAIN_KEYS = {
    "total_steps": (int, _REQUIRED),
    "batch_size": (int, 32),
    "peak_lr": (float, 3e-4),
    "weight_decay": (float, 1e-2),
    "warmup_ratio": (float, 0.01),
    "checkpoint_every": (int, 500),
    "normalize": (bool, False),
    "ar_weight": (float, 1.0),
    "nar_weight": (float, 1.0),
    "grad_clip": (float, 1.0),
}

_DECODE_KEYS = {
    "decode_steps": (int, 200),
    "block": (int, 32),
    "max_audio": (int, 640),
    "gamma": (float, 0.1),
    "tau": (float, 0.0),
    "remask": (str, "low_confidence"),
    "top_k": (int, 10),
    "top_p": (float, 0.95),
    "ar_temperature": (float, 1.0),
    "preserve_prompt": (bool, False),
    "conditional_only": (bool, False),
    "decode_max_text": (int, 64),
    "max_spans": (int, 32),
}

_REGISTRY: dict[str, dict] = {
    "gen-corpus": {
        **_COMMON,
        **_TASK_KEYS,
        "count": (int, 1000),
        "train_frac": (float, 0.8),
        "val_frac": (float, 0.1),
    },
    "train": {
        **_COMMON,
        "corpus": (str, _REQUIRED),
        **_MODEL_KEYS,
        **_TRAIN_KEYS,
        **_CORRUPT_KEYS,
    },
    "generate": {
        **_COMMON,
        "checkpoint": (str, _REQUIRED),
        "prompts": (str, _REQUIRED),
        "direction": (str, "tts"),
        "trace": (bool, True),
        **_DECODE_KEYS,
    },
    "eval": {
        **_COMMON,
        "checkpoint": (str, ""),
        "corpus": (str, _REQUIRED),
        "split": (str, "test"),
        "scorer": (str, "model"),
        "limit": (int, 0),
        **_DECODE_KEYS,
    },
    "verify": {
        **_COMMON,
        "checkpoint": (str, ""),
        "cases": (int, 250),
        "mc_models": (int, 3),
        "mc_samples": (int, 20000),
        "grad_coords": (int, 200),
    },
    "mask-dump": {
        **_COMMON,
        "layout": (str, _REQUIRED),
    },
}


def _parse_overrides(rest: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"expected --key value pairs, got {tok!r}")
        if i + 1 >= len(rest):
            raise ConfigError(f"override {tok!r} is missing a value")
        out[tok[2:]] = rest[i + 1]
        i += 2
    return out


def _read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}: line {lineno}: expected key=value")
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return out


def resolve_config(command: str, config_path: str | None, overrides: dict[str, str]) -> dict:
    registry = _REGISTRY[command]
    resolved = {k: default for k, (_, default) in registry.items()}
    if "seed" in registry and os.environ.get("SEED"):
        resolved["seed"] = os.environ["SEED"]
    if "out" in registry and os.environ.get("OUT_DIR"):
        resolved["out"] = os.environ["OUT_DIR"]
    layers = []
    if config_path:
        layers.append(_read_config_file(config_path))
    layers.append(overrides)
    for layer in layers:
        for k, v in layer.items():
            if k not in registry:
                raise ConfigError(f"unknown config key {k!r} for command {command}")
            resolved[k] = v
    for k, (typ, _) in registry.items():
        v = resolved[k]
        if v is _REQUIRED:
            raise ConfigError(f"missing required config key {k!r} for command {command}")
        if isinstance(v, str) and typ is not str:
            try:
                resolved[k] = _CASTERS[typ](v)
            except ValueError as e:
                raise ConfigError(f"config key {k!r}: {e}") from e
        elif typ is str:
            resolved[k] = str(v)
    return resolved


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _echo_config(cfg: dict, out_dir) -> None:
    """Resolved key=value snapshot, loadable back via --config. The output
    directory itself is omitted — it is wherever this file lives."""
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"{k}={_fmt_value(cfg[k])}" for k in sorted(cfg) if k != "out"]
    with open(os.path.join(out_dir, "config_echo.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _write_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_gen_corpus(ns, cfg) -> int:
    vocab = build_vocabulary(cfg["n_text"], cfg["n_audio"])
    task = TaskSpec(
        r=cfg["r"],
        n_t=cfg["n_t"],
        b_span=cfg["r"] * cfg["n_t"],
        noise_prob=cfg["noise_prob"],
        direction=cfg["direction"],
        min_text_len=cfg["min_text_len"],
        max_text_len=cfg["max_text_len"],
    )
    test_frac = 1.0 - cfg["train_frac"] - cfg["val_frac"]
    if test_frac < -1e-9:
        raise ConfigError("train_frac + val_frac must not exceed 1")
    out = cfg["out"]
    _echo_config(cfg, out)
    records = list(generate_corpus(task, vocab, cfg["count"], cfg["seed"]))
    splits = split_indices(cfg["count"], (cfg["train_frac"], cfg["val_frac"], test_frac), cfg["seed"])
    save_vocabulary(vocab, os.path.join(out, "vocab.json"))
    _write_json(asdict(task), os.path.join(out, "task.json"))
    counts = {}
    for name in ("train", "val", "test"):
        counts[name] = write_jsonl(
            os.path.join(out, f"{name}.jsonl"), (records[i] for i in splits[name])
        )
    _write_json(
        {"count": cfg["count"], "seed": cfg["seed"], "splits": counts},
        os.path.join(out, "meta.json"),
    )
    print(f"wrote {cfg['count']} records to {out}: " + ", ".join(f"{n}={c}" for n, c in counts.items()))
    return EXIT_OK


def _load_corpus_dir(corpus_dir) -> tuple[Vocabulary, TaskSpec]:
    vocab = load_vocabulary(os.path.join(corpus_dir, "vocab.json"))
    with open(os.path.join(corpus_dir, "task.json")) as f:
        task = TaskSpec(**json.load(f))
    return vocab, task


def _cmd_train(ns, cfg) -> int:
    vocab = load_vocabulary(os.path.join(cfg["corpus"], "vocab.json"))
    records = read_jsonl(os.path.join(cfg["corpus"], "train.jsonl"))
    mcfg = ModelConfig(
        vocab_size=vocab.total_size,
        d_model=cfg["d_model"],
        n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"],
        d_ff=cfg["d_ff"],
        max_len=cfg["max_len"],
        rope_base=cfg["rope_base"],
        wide=cfg["wide"],
    )
    ccfg = CorruptionConfig(
        p_mix=cfg["p_mix"],
        p_prefix=cfg["p_prefix"],
        p_trunc=cfg["p_trunc"],
        lambda_min=cfg["lambda_min"],
    )
    tcfg = TrainConfig(
        total_steps=cfg["total_steps"],
        batch_size=cfg["batch_size"],
        peak_lr=cfg["peak_lr"],
        weight_decay=cfg["weight_decay"],
        warmup_ratio=cfg["warmup_ratio"],
        seed=cfg["seed"],
        corruption=ccfg,
        checkpoint_every=cfg["checkpoint_every"],
        normalize=cfg["normalize"],
        ar_weight=cfg["ar_weight"],
        nar_weight=cfg["nar_weight"],
        grad_clip=cfg["grad_clip"],
    )
    out = cfg["out"]
    _echo_config(cfg, out)
    try:
        state = train_run(mcfg, tcfg, records, vocab, out, resume=ns.resume)
    except NumericError as e:
        with open(os.path.join(out, "diagnostic.json"), "w") as f:
            f.write(str(e) + "\n")
        raise
    figures.loss_curves(os.path.join(out, "metrics.csv"), os.path.join(out, "loss_curves.png"))
    print(
        f"trained {state.step} steps ({state.model.n_params()} params); "
        f"checkpoint ckpt_{state.step:07d}, metrics.csv and loss_curves.png under {out}"
    )
    return EXIT_OK


def _vocab_from_checkpoint(manifest: dict) -> Vocabulary:
    meta = manifest.get("meta") or {}
    if "vocab" not in meta:
        raise CheckpointError("checkpoint manifest carries no vocabulary metadata")
    return Vocabulary.from_dict(meta["vocab"])


def _decode_config(cfg: dict, max_total_len: int) -> DecodeConfig:
    gamma = 0.0 if cfg["conditional_only"] else cfg["gamma"]
    return DecodeConfig(
        steps=cfg["decode_steps"],
        block=cfg["block"],
        max_audio=cfg["max_audio"],
        gamma=gamma,
        tau=cfg["tau"],
        remask=cfg["remask"],
        top_k=cfg["top_k"],
        top_p=cfg["top_p"],
        ar_temperature=cfg["ar_temperature"],
        seed=cfg["seed"],
        preserve_prompt=cfg["preserve_prompt"],
        max_text=cfg["decode_max_text"],
        max_spans=cfg["max_spans"],
        max_total_len=max_total_len,
    )


def _cmd_generate(ns, cfg) -> int:
    model, _, manifest = load_checkpoint(cfg["checkpoint"])
    vocab = _vocab_from_checkpoint(manifest)
    out = cfg["out"]
    _echo_config(cfg, out)
    prompts: list[dict] = []
    try:
        with open(cfg["prompts"]) as f:
            for lineno, line in enumerate(f, start=1):
                if line.strip():
                    d = json.loads(line)
                    if "prompt" not in d:
                        raise CorpusFormatError(f"{cfg['prompts']}: line {lineno}: no prompt field")
                    prompts.append(d)
    except (OSError, json.JSONDecodeError) as e:
        raise CorpusFormatError(f"cannot read prompts file {cfg['prompts']}: {e}") from e
    scorer = model_scorer(model)
    base = _decode_config(cfg, max_total_len=model.cfg.max_len)
    n_err = 0
    with open(os.path.join(out, "generations.jsonl"), "w") as fo:
        for i, d in enumerate(prompts):
            prompt = [int(t) for t in d["prompt"]]
            direction = d.get("direction", cfg["direction"])
            if len(prompt) >= model.cfg.max_len:
                row = {
                    "index": i,
                    "error": f"prompt length {len(prompt)} exceeds model context {model.cfg.max_len}",
                }
                n_err += 1
            else:
                dcfg = replace(base, seed=base.seed + i)
                res = hybrid_generate(
                    scorer, prompt, vocab, dcfg, direction=direction, record_trace=cfg["trace"]
                )
                issues = validate_sequence(res.sequence, vocab, max_len=model.cfg.max_len)
                row = {
                    "index": i,
                    "prompt": prompt,
                    "direction": direction,
                    "tokens": res.tokens.tolist(),
                    "sequence": res.sequence.to_dict(),
                    "issues": issues,
                    "forced_eoa": res.forced_eoa,
                    "forced_eos": res.forced_eos,
                }
                if cfg["trace"]:
                    tpath = os.path.join(out, f"trace_{i:05d}.jsonl")
                    with open(tpath, "w") as tf:
                        tf.write(res.trace_jsonl() + ("\n" if res.trace else ""))
                    row["trace_file"] = os.path.basename(tpath)
            fo.write(json.dumps(row, separators=(",", ":")) + "\n")
    print(f"generated {len(prompts) - n_err}/{len(prompts)} prompts into {out} ({n_err} errors)")
    return EXIT_OK


def _cmd_eval(ns, cfg) -> int:
    vocab, task = _load_corpus_dir(cfg["corpus"])
    records = read_jsonl(os.path.join(cfg["corpus"], f"{cfg['split']}.jsonl"))
    if cfg["limit"] > 0:
        records = records[: cfg["limit"]]
    out = cfg["out"]
    _echo_config(cfg, out)

    max_total = 4096
    if cfg["scorer"] == "model":
        if not cfg["checkpoint"]:
            raise ConfigError("scorer=model requires the checkpoint key")
        model, _, manifest = load_checkpoint(cfg["checkpoint"])
        ck_vocab = _vocab_from_checkpoint(manifest)
        if ck_vocab != vocab:
            raise CheckpointError("checkpoint vocabulary differs from corpus vocabulary")
        scorer = model_scorer(model)
        max_total = model.cfg.max_len
        factory = lambda ref: scorer  # noqa: E731
    elif cfg["scorer"] == "oracle":
        factory = lambda ref: oracle_scorer(  # noqa: E731
            vocab, task, [t - vocab.text_base for t in ref.transcript(vocab)]
        )
    elif cfg["scorer"] == "uniform":
        uscore = uniform_scorer(vocab)
        factory = lambda ref: uscore  # noqa: E731
    else:
        raise ConfigError(f"unknown scorer {cfg['scorer']!r} (expected model|oracle|uniform)")

    dcfg = _decode_config(cfg, max_total_len=max_total)
    report = evaluate_records(factory, records, vocab, task, dcfg, direction=task.direction)
    _write_json(report.to_dict(), os.path.join(out, "eval.json"))
    with open(os.path.join(out, "eval_rows.csv"), "w") as f:
        f.write("index,text_exact,audio_total,audio_correct,eoa_exact,final_content,expected_final,edit_distance,ref_len\n")
        for r in report.rows:
            f.write(
                f"{r.index},{int(r.text_exact)},{r.audio_total},{r.audio_correct},"
                f"{int(r.eoa_exact)},{r.final_content},{r.expected_final},"
                f"{r.edit_distance},{r.ref_len}\n"
            )
    if report.rows:
        figures.eoa_error_hist(report.eoa_errors(), os.path.join(out, "eoa_error_hist.png"))
        figures.span_length_hist(
            [r.final_content for r in report.rows],
            [r.expected_final for r in report.rows],
            os.path.join(out, "span_length_hist.png"),
        )
    print(
        f"eval[{cfg['scorer']}] n={report.n}: audio_accuracy={report.audio_accuracy:.4f} "
        f"eoa_exact={report.eoa_exact_rate:.4f} text_exact={report.text_exact_rate:.4f} "
        f"edit_distance={report.mean_edit_distance:.4f}"
    )
    return EXIT_OK


def _tiny_bound_sequences(vocab: Vocabulary, seed: int, count: int) -> list[InterleavedSequence]:
    """Small-span sequences for the bound sweep: mixed echo-task geometries plus
    hand-built cases whose audio spans are all a single position."""
    geoms = [(1, 1), (1, 2), (2, 1), (2, 2)]
    seqs: list[InterleavedSequence] = []
    for i in range(count):
        if i % 10 == 0:
            from .corpus import Span

            t = i % vocab.n_text
            spans = [Span("text", [vocab.text_base + t, vocab.soa]), Span("audio", [vocab.eoa])]
            if i % 20 == 0:
                spans += [
                    Span("text", [vocab.text_base + (t + 1) % vocab.n_text, vocab.soa]),
                    Span("audio", [vocab.eoa]),
                ]
            seqs.append(
                InterleavedSequence(prompt=[vocab.text_base + t], spans=spans, eos=True)
            )
        else:
            r, n_t = geoms[i % len(geoms)]
            spec = TaskSpec(
                r=r, n_t=n_t, b_span=r * n_t, direction="tts", min_text_len=1, max_text_len=3
            )
            seqs.append(make_record(spec, vocab, seed=seed, index=i))
    return seqs


def _lift_to_wide(model: TokenTransformer) -> TokenTransformer:
    import torch

    wide_cfg = replace(model.cfg, wide=True)
    wide = TokenTransformer(wide_cfg, seed=0)
    with torch.no_grad():
        for (_, pw), (_, p) in zip(
            sorted(wide.named_parameters()), sorted(model.named_parameters())
        ):
            pw.copy_(p.double())
    return wide


def _cmd_verify(ns, cfg) -> int:
    out = cfg["out"]
    _echo_config(cfg, out)
    seed = cfg["seed"]
    use_ckpt = bool(cfg["checkpoint"]) and not ns.random_model
    if not use_ckpt and not ns.random_model and not cfg["checkpoint"]:
        raise ConfigError("verify needs either the checkpoint key or --random-model")

    tiny_cfg = None
    if use_ckpt:
        model, _, manifest = load_checkpoint(cfg["checkpoint"])
        vocab = _vocab_from_checkpoint(manifest)
        bound_models = [model]
        mc_model_list = [model]
        wide_model = _lift_to_wide(model)
        crosscheck_model = model
    else:
        vocab = build_vocabulary(8, 10)
        tiny_cfg = ModelConfig(
            vocab_size=vocab.total_size, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=64
        )
        bound_models = [TokenTransformer(tiny_cfg, seed=1000 + i) for i in range(8)]
        mc_model_list = [
            TokenTransformer(tiny_cfg, seed=2000 + i) for i in range(cfg["mc_models"])
        ]
        wide_model = TokenTransformer(replace(tiny_cfg, wide=True), seed=3000)
        crosscheck_model = bound_models[0]

    failures: list[str] = []

    # --- ordering bound sweep ---
    seqs = _tiny_bound_sequences(vocab, seed, cfg["cases"])
    all_cases = []
    for i, seq in enumerate(seqs):
        scorer = batch_model_scorer(bound_models[i % len(bound_models)])
        all_cases.extend(verify_unified_bound(scorer, [seq], vocab).cases)
    bound_report = BoundReport(cases=all_cases)
    _write_json(bound_report.to_dict(), os.path.join(out, "bound.json"))
    with open(os.path.join(out, "bound_cases.csv"), "w") as f:
        f.write("case,span_sizes,l_ar,lhs,neg_log_marginal,slack\n")
        for i, c in enumerate(bound_report.cases):
            sizes = ";".join(str(s) for s in c.span_sizes)
            f.write(f"{i},{sizes},{c.l_ar:.12g},{c.lhs:.12g},{c.neg_log_marginal:.12g},{c.slack:.12g}\n")
    figures.slack_hist([c.slack for c in bound_report.cases], os.path.join(out, "slack_hist.png"))
    if bound_report.ok:
        print(f"bound: PASS ({bound_report.n_cases} cases, min slack {bound_report.min_slack:.3e})")
    else:
        failures.append("bound")
        print(
            f"bound: FAIL ({bound_report.violations} violations, "
            f"{bound_report.len1_nonzero} nonzero single-position cases, "
            f"min slack {bound_report.min_slack:.3e})"
        )

    # --- estimator equivalence ---
    eq_rows = []
    eq_cases = []
    mc_spec = TaskSpec(r=1, n_t=2, b_span=2, direction="tts", min_text_len=2, max_text_len=2)
    for mi, m in enumerate(mc_model_list):
        seq = make_record(mc_spec, vocab, seed=seed + 77, index=mi)
        case = equivalence_case(batch_model_scorer(m), seq, vocab, n=cfg["mc_samples"], seed=seed + mi)
        eq_cases.append(case)
        eq_rows.append({"model": f"seeded-{mi}", **case.to_dict()})
    useq = make_record(mc_spec, vocab, seed=seed + 78, index=0)

    def uniform_batch(tokens, layout):
        tokens = np.asarray(tokens)
        return np.zeros(tokens.shape + (vocab.total_size,))

    ucase = equivalence_case(uniform_batch, useq, vocab, n=cfg["mc_samples"], seed=seed + 999)
    span_size = len(useq.audio_spans()[0].tokens)
    ref = uniform_reference(span_size, vocab.total_size)
    u_ok = abs(ucase.mean_dce - ref) <= 3.0 * ucase.combined_se and ucase.ok
    eq_rows.append({"model": "uniform", "closed_form": ref, **ucase.to_dict(), "ok": u_ok})
    eq_ok = all(c.ok for c in eq_cases) and u_ok
    _write_json({"ok": eq_ok, "cases": eq_rows}, os.path.join(out, "equivalence.json"))
    figures.equivalence_plot(eq_cases + [ucase], os.path.join(out, "equivalence.png"))
    max_z = max(
        abs(c.diff) / c.combined_se if c.combined_se > 0 else 0.0 for c in eq_cases + [ucase]
    )
    if eq_ok:
        print(f"equivalence: PASS ({len(eq_rows)} cases, max |z| {max_z:.2f})")
    else:
        failures.append("equivalence")
        print(f"equivalence: FAIL (max |z| {max_z:.2f})")

    # --- gradient check ---
    gc_spec = TaskSpec(r=1, n_t=2, b_span=2, direction="tts", min_text_len=2, max_text_len=4)
    gc_seq = make_record(gc_spec, vocab, seed=seed + 5, index=0)
    gc_rng = np.random.default_rng(np.random.SeedSequence((seed, 555)))
    item = corrupt(gc_seq, CorruptionConfig(), gc_rng, vocab, lam=0.6)
    allow = build_modality_mask(item.layout)
    err = grad_check(wide_model, item, allow, vocab.mask, n_coords=cfg["grad_coords"], seed=seed)
    _write_json({"max_rel_err": err, "tol": 1e-4, "ok": err < 1e-4}, os.path.join(out, "gradcheck.json"))
    if err < 1e-4:
        print(f"gradcheck: PASS (max rel err {err:.3e})")
    else:
        failures.append("gradcheck")
        print(f"gradcheck: FAIL (max rel err {err:.3e})")

    # --- loss recomputation cross-check ---
    cc_rng = np.random.default_rng(np.random.SeedSequence((seed, 556)))
    cc_items = [
        prepare_item(
            make_record(gc_spec, vocab, seed=seed + 6, index=i), CorruptionConfig(), vocab, cc_rng
        )
        for i in range(4)
    ]
    try:
        cc = loss_crosscheck(crosscheck_model, cc_items, vocab)
        _write_json(cc, os.path.join(out, "loss_crosscheck.json"))
        print(f"loss-recompute: PASS (max rel err {cc['max_rel_err']:.3e})")
    except VerificationError as e:
        failures.append("loss-recompute")
        _write_json({"ok": False, "error": str(e)}, os.path.join(out, "loss_crosscheck.json"))
        print(f"loss-recompute: FAIL ({e})")

    if failures:
        print(f"verification failed: {', '.join(failures)}")
        return EXIT_VERIFY
    return EXIT_OK


def _cmd_mask_dump(ns, cfg) -> int:
    try:
        layout = parse_layout_spec(cfg["layout"])
    except ValueError as e:
        raise ConfigError(f"layout: {e}") from e
    out = cfg["out"]
    _echo_config(cfg, out)
    mask = build_modality_mask(layout)
    csv_path, pgm_path = dump_mask(mask, os.path.join(out, "mask"))
    png = figures.mask_heatmap(mask, os.path.join(out, "mask.png"), labels=cfg["layout"])
    print(f"wrote {csv_path}, {pgm_path}, {png} ({len(layout)}x{len(layout)})")
    return EXIT_OK


_DISPATCH = {
    "gen-corpus": _cmd_gen_corpus,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "verify": _cmd_verify,
    "mask-dump": _cmd_mask_dump,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="duotalk",
        description="Interleaved text/audio sequence model: corpus, training, decoding, verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _DISPATCH:
        p = sub.add_parser(name, help=f"{name} (see --config / --key value overrides)")
        p.add_argument("--config", default=None, help="flat key=value config file")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from latest checkpoint")
        if name == "verify":
            p.add_argument(
                "--random-model", action="store_true", help="sweep randomly initialized tiny models"
            )
    ns, rest = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(rest)
        cfg = resolve_config(ns.command, ns.config, overrides)
        return _DISPATCH[ns.command](ns, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ResumeError as e:
        print(f"resume mismatch: {e}", file=sys.stderr)
        return EXIT_RESUME
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except VerificationError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except CorpusFormatError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted; latest state checkpointed", file=sys.stderr)
        return 130


def console() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
