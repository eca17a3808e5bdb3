"""Command-line entry point wiring the pipeline stages together.

One binary, eight subcommands, listed in workflow order: ``fixtures``
writes a synthetic interview corpus, ``prep`` turns a corpus into
segment CSVs and audio clips, ``kb`` filters knowledge entries and
builds the question-answer corpus, ``train`` runs one training phase,
``predict`` scores prepared segments with a checkpoint, ``eval``
compares predictions against questionnaire truth, ``judge`` rates two
checkpoints side by side, and ``gradcheck`` runs the finite-difference
suite over every differentiable op plus the composed model paths.

Settings resolve in three layers: built-in defaults, then an optional
flat ``key=value`` config file (``#`` starts a comment, unknown keys are
rejected), then command-line flags. Commands that write an output
directory echo the effective settings there as ``config.resolved``; the
echo is itself a valid config file, so a run can be repeated from its
outputs. Paths are never echoed, which keeps outputs byte-identical
across runs into different directories.

Failures print one ``error: <Type>: <message>`` line on stderr and exit
with a family-specific code (see EXIT_CODES or ``--help``). Set
PHQFUSE_DEBUG=1 to re-raise unexpected errors with a traceback.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .audio import D_A, ConvFeatureEncoder, extract_features, load_wav
from .data import SPLITS, load_manifest, prepare_corpus, read_segments_csv
from .errors import (
    BoundsError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NonFiniteError,
    ParseError,
    PhqfuseError,
    RangeError,
    RemoteError,
    ValidationError,
)
from .evalkit import (
    evaluate,
    format_eval_report,
    format_judge_report,
    generate_judge_questions,
    judge,
    write_eval_csv,
    write_judge_csv,
)
from .fixtures import make_corpus, make_knowledge_file
from .fusion import MODES, AudioProjector, RegressionHead, assemble, clamp_score, predict_phq_batch
from .knowledge import (
    CATEGORY_SPANS,
    DEFAULT_KEYWORDS,
    FixtureGenerator,
    LocalGenerator,
    RemoteGenerator,
    build_injection_examples,
    category_histogram,
    filter_entries,
    generate_corpus,
    load_entries,
    load_pairs,
    save_entries,
    save_pairs,
)
from .lora import LoraConfig, attach_adapters, named_adapter_tensors
from .model import MicroLM, ModelConfig, lm_loss, rmsnorm, rope
from .seeding import substream
from .tensor import Tensor, gradient_check, probe_loss
from .trainer import (
    PHASES,
    TrainConfig,
    init_pipeline,
    load_checkpoint,
    make_scored_examples,
    predict_scores,
    save_checkpoint,
    train_phase,
    write_loss_log,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_DATA = 5
EXIT_CONTRACT = 6
EXIT_REMOTE = 7
EXIT_NUMERIC = 8

EXIT_CODES = (
    (EXIT_OK, "success"),
    (EXIT_INTERNAL, "unexpected internal error"),
    (EXIT_USAGE, "usage error (bad flags or arguments)"),
    (EXIT_MISSING, "missing or unreadable file or directory"),
    (EXIT_CONFIG, "bad configuration (unknown key, bad value, checkpoint mismatch)"),
    (EXIT_DATA, "malformed data (parse, format, validation, rating range)"),
    (EXIT_CONTRACT, "contract violation (wrong phase/dataset combination, empty input)"),
    (EXIT_REMOTE, "remote endpoint failure"),
    (EXIT_NUMERIC, "numeric failure (non-finite values or failed gradient check)"),
)

# order matters: subclasses (PairingError under ValidationError) hit first,
# and the generic OSError fallback stays last
_ERROR_EXITS: tuple[tuple[type, int], ...] = (
    (ConfigError, EXIT_CONFIG),
    (RemoteError, EXIT_REMOTE),
    (NonFiniteError, EXIT_NUMERIC),
    (ParseError, EXIT_DATA),
    (FormatError, EXIT_DATA),
    (ValidationError, EXIT_DATA),
    (RangeError, EXIT_DATA),
    (BoundsError, EXIT_DATA),
    (DimensionError, EXIT_DATA),
    (ContractError, EXIT_CONTRACT),
    (FileNotFoundError, EXIT_MISSING),
    (NotADirectoryError, EXIT_MISSING),
    (IsADirectoryError, EXIT_MISSING),
    (PermissionError, EXIT_MISSING),
    (OSError, EXIT_MISSING),
)


def exit_code_for(error: BaseException) -> int:
    for cls, code in _ERROR_EXITS:
        if isinstance(error, cls):
            return code
    return EXIT_INTERNAL


def _error_line(error: BaseException) -> str:
    message = " ".join(str(error).split()) or "(no detail)"
    return f"error: {type(error).__name__}: {message}"


# ---------------------------------------------------------------------------
# run configuration: flat key=value files, flag overrides, resolved echo


def _parse_name_list(text: str) -> tuple[str, ...]:
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    if not parts:
        raise ValueError("empty list")
    return parts


CONFIG_KEYS: dict[str, Callable[[str], object]] = {
    "model.d_t": int,
    "model.n_layers": int,
    "model.n_heads": int,
    "model.d_ff": int,
    "model.vocab_size": int,
    "model.max_seq_len": int,
    "model.rope_theta": float,
    "model.rms_eps": float,
    "lora.r": int,
    "lora.lora_alpha": float,
    "lora.lora_dropout": float,
    "lora.target_modules": _parse_name_list,
    "train.learning_rate": float,
    "train.batch_size": int,
    "train.max_steps": int,
    "seed": int,
    "d_a": int,
}


def load_run_config(path) -> dict[str, object]:
    """Parse a flat key=value file into typed values; unknown keys fail."""
    values: dict[str, object] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}: line {lineno}: expected key=value, got {line!r}")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ValueError as e:
            raise ConfigError(f"{path}: line {lineno}: bad value for {key}: {e}") from e
    return values


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs beyond file paths, after layering."""

    model: ModelConfig
    lora: LoraConfig
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_steps: int = 200
    seed: int = 42
    d_a: int = D_A

    @classmethod
    def resolve(cls, values: Mapping[str, object]) -> "RunConfig":
        model_kwargs = {k[len("model."):]: v for k, v in values.items() if k.startswith("model.")}
        lora_kwargs = {k[len("lora."):]: v for k, v in values.items() if k.startswith("lora.")}
        try:
            model = ModelConfig(**model_kwargs)
            lora = LoraConfig(**lora_kwargs)
        except PhqfuseError as e:
            raise ConfigError(str(e)) from e
        kwargs: dict[str, object] = {}
        for key, field in (("train.learning_rate", "learning_rate"),
                           ("train.batch_size", "batch_size"),
                           ("train.max_steps", "max_steps"),
                           ("seed", "seed"), ("d_a", "d_a")):
            if key in values:
                kwargs[field] = values[key]
        return cls(model=model, lora=lora, **kwargs)

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {}
        out.update({f"model.{k}": v for k, v in self.model.to_dict().items()})
        out.update({f"lora.{k}": v for k, v in self.lora.to_dict().items()})
        out["train.learning_rate"] = self.learning_rate
        out["train.batch_size"] = self.batch_size
        out["train.max_steps"] = self.max_steps
        out["seed"] = self.seed
        out["d_a"] = self.d_a
        return out

    def train_config(self, phase: str) -> TrainConfig:
        return TrainConfig(
            phase=phase, learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_steps=self.max_steps, seed=self.seed, model=self.model, lora=self.lora,
        )


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_resolved_config(out_dir, run: RunConfig | None, extras: Mapping[str, object]) -> Path:
    """Echo the effective settings; extras go in as comments so the file
    stays loadable as a config."""
    lines = [f"# {k}={_format_value(v)}" for k, v in sorted(extras.items())]
    if run is not None:
        lines += [f"{k}={_format_value(v)}" for k, v in sorted(run.flat().items())]
    path = Path(out_dir) / "config.resolved"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _resolve_from_args(args) -> tuple[RunConfig, dict[str, object]]:
    """Config file values overlaid with flags; returns (config, provided)."""
    values = load_run_config(args.config) if getattr(args, "config", None) else {}
    for key, flag in (("train.learning_rate", "lr"),
                      ("train.batch_size", "batch_size"),
                      ("train.max_steps", "max_steps"),
                      ("seed", "seed"), ("d_a", "d_a")):
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[key] = flag_value
    return RunConfig.resolve(values), values


# ---------------------------------------------------------------------------
# subcommands


def _split_counts(n: int) -> tuple[int, int, int]:
    """Split n participants roughly 7:2:3, keeping train nonempty."""
    if n < 1:
        raise ConfigError(f"--participants must be >= 1, got {n}")
    n_dev = max(1, round(n * 2 / 12)) if n >= 3 else 0
    n_test = max(1, round(n * 3 / 12)) if n >= 2 else 0
    return n - n_dev - n_test, n_dev, n_test


def cmd_fixtures(args) -> int:
    seed = args.seed if args.seed is not None else 42
    n_train, n_dev, n_test = _split_counts(args.participants)
    utt_low, utt_high = args.utterances
    sec_low, sec_high = args.utterance_seconds
    if utt_low > utt_high or sec_low > sec_high:
        raise ConfigError("fixture ranges must satisfy LOW <= HIGH")
    out = Path(args.out)
    manifest = make_corpus(out, n_train=n_train, n_dev=n_dev, n_test=n_test,
                           utterances_low=utt_low, utterances_high=utt_high,
                           seconds_low=sec_low, seconds_high=sec_high, seed=seed)
    n_entries = make_knowledge_file(out / "knowledge.jsonl",
                                    n_entries=args.knowledge_entries, seed=seed)
    sizes = manifest.sizes()
    per = " ".join(f"{s}={sizes.get(s, 0)}" for s in SPLITS)
    print(f"participants: total={sum(sizes.values())} {per}")
    print(f"knowledge entries: {n_entries}")
    write_resolved_config(out, None, {
        "command": "fixtures", "participants": args.participants,
        "knowledge_entries": args.knowledge_entries, "seed": seed,
        "utterances": args.utterances, "utterance_seconds": args.utterance_seconds,
    })
    print(f"out: {out}")
    return EXIT_OK


def cmd_prep(args) -> int:
    data_dir, out = Path(args.data_dir), Path(args.out)
    manifest = load_manifest(data_dir / "split_manifest.csv")
    summary = prepare_corpus(data_dir, manifest, out,
                             write_segment_wavs=not args.no_audio)
    per_split = summary.segments_per_split
    per = " ".join(f"{s}={per_split[s]}" for s in SPLITS if s in per_split)
    print(f"segments: total={sum(per_split.values())} {per}")
    print(f"participants: {summary.participants}")
    print(f"utterances kept: {summary.utterances_kept}")
    print(f"wav files: {summary.wav_files}")
    write_resolved_config(out, None, {
        "command": "prep", "write_audio": not args.no_audio,
    })
    return EXIT_OK


def cmd_kb_filter(args) -> int:
    entries = load_entries(args.entries)
    keywords = _parse_name_list(args.keywords) if args.keywords else DEFAULT_KEYWORDS
    kept = filter_entries(entries, keywords)
    save_entries(kept, args.out)
    print(f"entries: kept={len(kept)} of={len(entries)}")
    return EXIT_OK


def _make_generator(kind: str, endpoint: str | None):
    if kind == "fixture":
        return FixtureGenerator()
    if not endpoint:
        raise ConfigError("remote generation needs --endpoint")
    return RemoteGenerator(endpoint)


def cmd_kb_generate(args) -> int:
    entries = load_entries(args.entries)
    if not entries:
        raise ValidationError(f"{args.entries}: no entries to generate from")
    generator = _make_generator(args.generator, args.endpoint)
    result = generate_corpus(entries, generator, max_retries=args.max_retries)
    if not result.pairs:
        raise ValidationError("every source was dropped during generation")
    save_pairs(result.pairs, args.out)
    print(f"pairs: {len(result.pairs)} sources: accepted={result.accepted_sources} "
          f"dropped={len(result.dropped_sources)}")
    return EXIT_OK


def cmd_kb_validate(args) -> int:
    pairs = load_pairs(args.pairs)
    if not pairs:
        raise ValidationError(f"{args.pairs}: no pairs to validate")
    by_source: dict[str, list] = {}
    for p in pairs:
        by_source.setdefault(p.source_id, []).append(p)
    expected = list(CATEGORY_SPANS)
    bad = {sid: hist for sid, group in by_source.items()
           if (hist := category_histogram(group)) != expected}
    if bad:
        sample = "; ".join(f"{sid}: {hist}" for sid, hist in sorted(bad.items())[:3])
        raise ValidationError(
            f"{len(bad)} source(s) violate the {expected} histogram ({sample})",
            count=len(bad),
        )
    print(f"sources: {len(by_source)} pairs: {len(pairs)} "
          f"histogram: {','.join(str(c) for c in expected)}")
    return EXIT_OK


_MODE_BY_PHASE = {"text": "text_only", "audio": "audio_only",
                  "text_and_audio": "text_and_audio"}


def _load_feature_lookup(encoder: ConvFeatureEncoder, prep_dir, rows) -> dict:
    lookup = {}
    audio_dir = Path(prep_dir) / "audio"
    for row in rows:
        key = (row.participant_id, row.segment_index)
        if key in lookup:
            continue
        wav_path = audio_dir / f"{row.participant_id}_{row.segment_index}.wav"
        if not wav_path.exists():
            raise FileNotFoundError(f"no clip for segment {key}: {wav_path}")
        lookup[key] = extract_features(
            load_wav(wav_path, participant_id=row.participant_id), encoder)
    return lookup


def _build_train_dataset(args, state, phase: str):
    if phase == "inject":
        if not args.pairs:
            raise ContractError("phase inject needs --pairs with a question-answer corpus")
        if args.prep_dir:
            raise ContractError("phase inject does not read --prep-dir")
        pairs = load_pairs(args.pairs)
        if not pairs:
            raise ValidationError(f"{args.pairs}: no pairs to train on")
        examples, skipped = build_injection_examples(
            pairs, max_seq_len=state.model_config.max_seq_len)
        if not examples:
            raise ContractError("every pair exceeds the model's context window")
        return examples, {"pairs_loaded": len(pairs), "pairs_skipped": skipped}
    if args.pairs:
        raise ContractError(f"phase {phase} does not read --pairs")
    if not args.prep_dir:
        raise ContractError(f"phase {phase} needs --prep-dir from a prepared corpus")
    rows = read_segments_csv(Path(args.prep_dir) / f"segments_{args.split}.csv")
    mode = _MODE_BY_PHASE[phase]
    lookup = None
    if mode != "text_only":
        lookup = _load_feature_lookup(state.encoder, args.prep_dir, rows)
    return make_scored_examples(rows, mode, lookup), {"segments": len(rows)}


def _check_resume_conflicts(provided: Mapping[str, object], state) -> None:
    """A resumed checkpoint pins model/lora/d_a; explicit keys must agree."""
    pinned: dict[str, object] = {"d_a": state.projector.d_a}
    pinned.update({f"model.{k}": v for k, v in state.model_config.to_dict().items()})
    pinned.update({f"lora.{k}": v for k, v in state.lora_config.to_dict().items()})

    def norm(v):
        return tuple(v) if isinstance(v, (list, tuple)) else v

    for key, value in provided.items():
        if key in pinned and norm(pinned[key]) != norm(value):
            raise ConfigError(
                f"--resume checkpoint disagrees with {key}: "
                f"checkpoint has {pinned[key]!r}, config says {value!r}"
            )


def cmd_train(args) -> int:
    run, provided = _resolve_from_args(args)
    if args.resume:
        state = load_checkpoint(args.resume)
        _check_resume_conflicts(provided, state)
        run = RunConfig(model=state.model_config, lora=state.lora_config,
                        learning_rate=run.learning_rate, batch_size=run.batch_size,
                        max_steps=run.max_steps, seed=run.seed, d_a=state.projector.d_a)
    else:
        state = init_pipeline(run.model, run.lora, seed=run.seed, d_a=run.d_a)
    dataset, data_stats = _build_train_dataset(args, state, args.phase)

    result = train_phase(state, run.train_config(args.phase), dataset)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.phqf"
    save_checkpoint(state, ckpt_path, phase=args.phase)
    write_loss_log(result.records, out / "loss.csv")
    write_resolved_config(out, run, {
        "command": "train", "phase": args.phase,
        "resumed": bool(args.resume), **data_stats,
    })
    print(f"phase={args.phase} steps={result.steps_done} "
          f"final_loss={result.final_loss!r} examples={len(dataset)}")
    print(f"checkpoint: {ckpt_path}")
    if result.aborted:
        # weights on disk are the last finite ones; the exit code still
        # flags the run so callers do not chain on a truncated phase
        print(_error_line(NonFiniteError(result.abort_reason or "non-finite loss")),
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_predict(args) -> int:
    state = load_checkpoint(args.ckpt)
    rows = read_segments_csv(Path(args.prep_dir) / f"segments_{args.split}.csv")
    lookup = None
    if args.mode != "text_only":
        lookup = _load_feature_lookup(state.encoder, args.prep_dir, rows)
    examples = make_scored_examples(rows, args.mode, lookup)
    scores = predict_scores(state, examples, args.mode, batch_size=args.batch_size)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "predictions.csv"
    with open(pred_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["participant_id", "segment_index", "score"])
        for row, score in zip(rows, scores):
            writer.writerow([row.participant_id, row.segment_index,
                             repr(clamp_score(score))])
    run = RunConfig(model=state.model_config, lora=state.lora_config,
                    batch_size=args.batch_size, seed=state.seed,
                    d_a=state.projector.d_a)
    write_resolved_config(out, run, {
        "command": "predict", "mode": args.mode, "split": args.split,
        "segments": len(rows),
    })
    print(f"segments: {len(rows)} participants: {len({r.participant_id for r in rows})}")
    print(f"predictions: {pred_path}")
    return EXIT_OK


PREDICTIONS_HEADER = ["participant_id", "segment_index", "score"]


def read_predictions_csv(path) -> list[tuple[str, float]]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != PREDICTIONS_HEADER:
            raise FormatError(f"{path}: expected header {PREDICTIONS_HEADER}, got {header}")
        out = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            try:
                out.append((row[0], float(row[2])))
            except ValueError as e:
                raise FormatError(f"{path}: line {lineno}: bad score: {e}") from e
    return out


def cmd_eval(args) -> int:
    predictions = read_predictions_csv(args.pred)
    manifest = load_manifest(args.truth)
    truth = {pid: float(score) for pid, score in manifest.scores.items()}
    report = evaluate(predictions, truth)
    print(format_eval_report(report), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_eval_csv(report, out / "eval.csv")
        (out / "eval.txt").write_text(format_eval_report(report), encoding="utf-8")
        write_resolved_config(out, None, {"command": "eval"})
    return EXIT_OK


def cmd_judge(args) -> int:
    seed = args.seed if args.seed is not None else 42
    base = load_checkpoint(args.base)
    injected = load_checkpoint(args.injected)
    scorer = _make_generator(args.scorer, args.endpoint)
    questions = generate_judge_questions(scorer, n=args.questions)
    systems = {
        "base": LocalGenerator(base.model, base.adapters,
                               max_new_tokens=args.response_tokens),
        "injected": LocalGenerator(injected.model, injected.adapters,
                                   max_new_tokens=args.response_tokens),
    }
    report = judge(systems, scorer, questions,
                   samples_per_question=args.samples, seed=seed,
                   response_tokens=args.response_tokens)
    print(format_judge_report(report), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_judge_csv(report, out / "judge.csv")
        (out / "judge.txt").write_text(format_judge_report(report), encoding="utf-8")
        write_resolved_config(out, None, {
            "command": "judge", "questions": args.questions,
            "samples": args.samples, "seed": seed, "scorer": args.scorer,
            "response_tokens": args.response_tokens,
        })
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradient-check suite


def _rand(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    data = rng.uniform(low, high, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def _probe(rng, shape) -> np.ndarray:
    signs = rng.choice([-1.0, 1.0], size=shape)
    return (signs * rng.uniform(0.5, 1.5, size=shape)).astype(np.float32)


def _op_checks(rng, results) -> None:
    def check(name, fn, params):
        results.append(gradient_check(fn, params, name=name))

    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    p = _probe(rng, (3, 4))
    check("add", lambda: probe_loss(T.add(a, b), p), [a, b])

    a2, b2 = _rand(rng, 3, 4), _rand(rng, 4)
    check("add.broadcast", lambda: probe_loss(T.add(a2, b2), p), [a2, b2])

    a3, b3 = _rand(rng, 2, 5), _rand(rng, 2, 5)
    p3 = _probe(rng, (2, 5))
    check("sub", lambda: probe_loss(T.sub(a3, b3), p3), [a3, b3])
    check("mul", lambda: probe_loss(T.mul(a3, b3), p3), [a3, b3])

    a4, b4 = _rand(rng, 2, 5), _rand(rng, 5, low=0.7, high=1.5)
    check("mul.broadcast", lambda: probe_loss(T.mul(a4, b4), p3), [a4, b4])
    check("div", lambda: probe_loss(T.div(a4, b4), p3), [a4, b4])

    s = _rand(rng, 3, 4)
    check("silu", lambda: probe_loss(T.silu(s), p), [s])
    q = _rand(rng, 3, 4, low=0.5, high=2.0)
    check("sqrt", lambda: probe_loss(T.sqrt(q), p), [q])

    m = _rand(rng, 4, 3)
    p_m, p_row = _probe(rng, (4, 3)), _probe(rng, (3,))
    check("mean", lambda: T.mean(T.mul(m, T.constant(p_m))), [m])
    check("sum.axis", lambda: probe_loss(T.sum_(m, axis=0), p_row), [m])

    r = _rand(rng, 2, 6)
    p_r = _probe(rng, (4, 3))
    check("reshape.transpose",
          lambda: probe_loss(T.transpose(T.reshape(r, (3, 4))), p_r), [r])

    c1, c2 = _rand(rng, 2, 3), _rand(rng, 4, 3)
    p_cat, p_stack = _probe(rng, (6, 3)), _probe(rng, (2, 4, 3))
    check("concat", lambda: probe_loss(T.concat([c1, c2], axis=0), p_cat), [c1, c2])
    check("stack_padded", lambda: probe_loss(T.stack_padded([c1, c2]), p_stack), [c1, c2])

    table = _rand(rng, 6, 4)
    idx = np.array([0, 2, 2, 5])
    ids = np.array([[1, 3, 3], [0, 5, 2]])
    p_gather, p_emb = _probe(rng, (4, 4)), _probe(rng, (2, 3, 4))
    check("gather_rows.repeated",
          lambda: probe_loss(T.gather_rows(table, idx), p_gather), [table])
    check("embedding_lookup",
          lambda: probe_loss(T.embedding_lookup(table, ids), p_emb), [table])

    pos_in = _rand(rng, 2, 4, 3)
    positions = np.array([1, 3])
    p_sel = _probe(rng, (2, 3))
    check("select_positions",
          lambda: probe_loss(T.select_positions(pos_in, positions), p_sel), [pos_in])

    w1, w2 = _rand(rng, 3, 4), _rand(rng, 4, 5)
    w3 = _rand(rng, 2, 3, 4)
    w4, w5 = _rand(rng, 5, 2), _rand(rng, 2, 3)
    p_mm, p_mmb, p_tall = _probe(rng, (3, 5)), _probe(rng, (2, 3, 5)), _probe(rng, (5, 3))
    check("matmul", lambda: probe_loss(T.matmul(w1, w2), p_mm), [w1, w2])
    check("matmul.batched", lambda: probe_loss(T.matmul(w3, w2), p_mmb), [w3, w2])
    check("matmul.tall", lambda: probe_loss(T.matmul(w4, w5), p_tall), [w4, w5])

    sm = _rand(rng, 3, 5, low=-2.0, high=2.0)
    p_sm = _probe(rng, (3, 5))
    check("softmax_rows", lambda: probe_loss(T.softmax_rows(sm), p_sm), [sm])

    x = _rand(rng, 2, 3, 8)
    gain = _rand(rng, 8, low=0.5, high=1.5)
    p_norm = _probe(rng, (2, 3, 8))
    check("rmsnorm", lambda: probe_loss(rmsnorm(x, gain), p_norm), [x, gain])

    xr = _rand(rng, 1, 2, 3, 4)
    rope_pos = np.arange(3)
    p_rope = _probe(rng, (1, 2, 3, 4))
    check("rope", lambda: probe_loss(rope(xr, rope_pos), p_rope), [xr])

    logits = _rand(rng, 2, 4, 13, low=-2.0, high=2.0)
    targets = rng.integers(0, 13, size=(2, 4))
    mask = np.ones((2, 4), dtype=bool)
    mask[0, 0] = False
    check("lm_loss", lambda: lm_loss(logits, targets, mask), [logits])


_TINY_MODEL = dict(d_t=8, n_layers=1, n_heads=2, d_ff=16, vocab_size=32, max_seq_len=16)


def _lm_lora_check(rng, results, index: int) -> None:
    """Full LM loss differentiated back into the adapter factors."""
    model = MicroLM(ModelConfig(**_TINY_MODEL), rng)
    adapters = attach_adapters(model, LoraConfig(r=2, lora_alpha=4.0, lora_dropout=0.0),
                               rng)
    params = list(named_adapter_tensors(adapters).values())
    for t in params:
        # zero-initialized factors give zero gradients on half the set;
        # randomize so the comparison is informative
        t.data = rng.normal(0.0, 0.1, size=t.shape).astype(np.float32)
    ids = rng.integers(0, 32, size=(2, 6))
    targets = rng.integers(0, 32, size=(2, 6))
    mask = np.ones((2, 6), dtype=bool)
    results.append(gradient_check(
        lambda: lm_loss(model.forward(ids, adapters=adapters).logits, targets, mask),
        params, name=f"composed.lm_loss->lora[{index}]",
    ))


def _audio_path_check(rng, results, index: int) -> None:
    """Score differentiated through projector and conv encoder."""
    # assembly prepends the BOS token, so the embedding table must cover
    # the real token ids even at this scale
    model = MicroLM(ModelConfig(**{**_TINY_MODEL, "vocab_size": 260}), rng)
    encoder = ConvFeatureEncoder(rng, d_a=6)
    projector = AudioProjector(6, 8, rng)
    head = RegressionHead(8, rng)
    samples = rng.normal(0.0, 0.5, size=120).astype(np.float32)
    params = list(encoder.named_tensors().values())
    params += list(projector.named_tensors().values())
    params += list(head.named_tensors().values())
    for t in params:
        # init-scale weights leave gradients near float32 noise, so draw
        # magnitudes bounded away from zero for a resolvable signal
        signs = rng.choice([-1.0, 1.0], size=t.shape)
        t.data = (signs * rng.uniform(0.3, 1.0, size=t.shape)).astype(np.float32)

    def fn():
        emb = projector.project(encoder.forward(samples))
        assembled = assemble(model, None, emb, "audio_only")
        return T.mean(predict_phq_batch(model, head, [assembled]))

    results.append(gradient_check(
        fn, params, name=f"composed.score->projector->encoder[{index}]"))


def run_gradcheck(seed: int = 42) -> list:
    """Finite-difference suite: every op plus the two composed paths."""
    results: list = []
    _op_checks(substream(seed, "gradcheck.ops"), results)
    for index in range(2):
        _lm_lora_check(substream(seed, f"gradcheck.lora.{index}"), results, index)
        _audio_path_check(substream(seed, f"gradcheck.audio.{index}"), results, index)
    return results


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 42
    results = run_gradcheck(seed)
    for result in results:
        print(result)
    n_ok = sum(1 for r in results if r.ok)
    print(f"gradcheck: {n_ok}/{len(results)} ok")
    return EXIT_OK if n_ok == len(results) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


_EPILOG = "exit codes:\n" + "\n".join(f"  {code}  {meaning}" for code, meaning in EXIT_CODES) + """

environment:
  PHQFUSE_API_KEY  bearer token for remote generation endpoints
  PHQFUSE_DEBUG    set to re-raise internal errors with a traceback
"""


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None,
                   help="root random seed (default 42)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phqfuse",
        description="Depression-score a speech corpus: preprocessing, knowledge "
                    "injection, LoRA training, prediction, and evaluation.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--threads", type=int, default=1, metavar="N",
                        help="worker cap; this build runs single-threaded and "
                             "accepts the flag for script compatibility")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fixtures", help="write a synthetic interview corpus")
    p.add_argument("--out", required=True, help="corpus directory to create")
    p.add_argument("--participants", type=int, default=12)
    p.add_argument("--knowledge-entries", type=int, default=123, metavar="N")
    p.add_argument("--utterances", nargs=2, type=int, default=(8, 14),
                   metavar=("LOW", "HIGH"), help="participant turns per interview")
    p.add_argument("--utterance-seconds", nargs=2, type=float, default=(0.05, 0.12),
                   metavar=("LOW", "HIGH"), help="duration range of one turn")
    p.add_argument("--seed", type=int, default=None, help="root random seed (default 42)")
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("prep", help="segment transcripts and slice session audio")
    p.add_argument("--data-dir", required=True, help="corpus root with split_manifest.csv")
    p.add_argument("--out", required=True, help="output directory for CSVs and clips")
    p.add_argument("--no-audio", action="store_true", help="skip writing segment WAVs")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("kb", help="knowledge corpus stages")
    kb = p.add_subparsers(dest="kb_command", required=True, metavar="STAGE")

    k = kb.add_parser("filter", help="keep entries whose titles match the keyword list")
    k.add_argument("--entries", required=True, help="JSONL knowledge entries")
    k.add_argument("--out", required=True, help="filtered JSONL output")
    k.add_argument("--keywords", help="comma-separated keyword overrides")
    k.set_defaults(func=cmd_kb_filter)

    k = kb.add_parser("generate", help="expand each entry into 40 question-answer pairs")
    k.add_argument("--entries", required=True, help="filtered JSONL entries")
    k.add_argument("--out", required=True, help="JSONL pair corpus output")
    k.add_argument("--generator", choices=("fixture", "remote"), default="fixture")
    k.add_argument("--endpoint", help="completion endpoint URL for --generator remote")
    k.add_argument("--max-retries", type=int, default=3)
    k.set_defaults(func=cmd_kb_generate)

    k = kb.add_parser("validate", help="check the per-source category histogram")
    k.add_argument("--pairs", required=True, help="JSONL pair corpus")
    k.set_defaults(func=cmd_kb_validate)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("--phase", required=True, choices=PHASES)
    p.add_argument("--out", required=True, help="directory for checkpoint and loss log")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--pairs", help="question-answer corpus (phase inject)")
    p.add_argument("--prep-dir", help="prepared corpus directory (score phases)")
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--lr", type=float, default=None, help="learning rate override")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--d-a", type=int, default=None, dest="d_a",
                   help="audio feature width override")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score prepared segments with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prep-dir", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--out", required=True, help="directory for predictions.csv")
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="compare predictions against questionnaire truth")
    p.add_argument("--pred", required=True, help="predictions.csv from predict")
    p.add_argument("--truth", required=True, help="split manifest with true scores")
    p.add_argument("--out", help="optional directory for eval.csv and eval.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("judge", help="rate two checkpoints question by question")
    p.add_argument("--base", required=True, metavar="CKPT_A")
    p.add_argument("--injected", required=True, metavar="CKPT_B")
    p.add_argument("--questions", type=int, default=10)
    p.add_argument("--samples", type=int, default=2,
                   help="responses sampled per question; the best one counts")
    p.add_argument("--scorer", choices=("fixture", "remote"), default="fixture")
    p.add_argument("--endpoint", help="rating endpoint URL for --scorer remote")
    p.add_argument("--response-tokens", type=int, default=256)
    p.add_argument("--out", help="optional directory for judge.csv and judge.txt")
    p.add_argument("--seed", type=int, default=None, help="root random seed (default 42)")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("gradcheck",
                       help="finite-difference checks; exit 0 only if all pass")
    p.add_argument("--seed", type=int, default=None, help="root random seed (default 42)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    if args.threads < 1:
        print(_error_line(ConfigError(f"--threads must be >= 1, got {args.threads}")),
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except Exception as e:  # every failure surfaces as one parsable line
        if os.environ.get("PHQFUSE_DEBUG"):
            raise
        print(_error_line(e), file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
