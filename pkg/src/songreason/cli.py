"""``songreason`` command line: pipeline stages, scoring and toy GRPO training.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (``#``
starts a comment). Keys are the long flag names with ``-`` or ``_``; unknown
keys are a usage error. Flags given on the command line win over the file.
The resolved configuration is logged to stderr and, for subcommands with an
output directory, written to ``<out>/config.resolved``.

Exit status: 0 success, 1 runtime failure (error class name on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import SongReasonError

log = logging.getLogger("songreason")

# (flag, type, default, help); type "bool" takes true/false
_COMMON = [
    ("seed", int, 0, "random seed"),
    ("workers", int, os.cpu_count() or 1, "worker threads for provider calls"),
]
_PROVIDER = [
    ("provider", str, "mock", "mock or http"),
    ("provider-url", str, "", "endpoint for --provider http"),
    ("attempts", int, 5, "provider attempts before giving up"),
    ("mock-reject-token", str, "", "mock verifier rejects prompts containing this token"),
    ("mock-approve-token", str, "", "mock verifier approves only prompts containing this token"),
]

COMMANDS = {
    "demo-corpus": ("synthesize the bundled toy audio set", [
        ("out", str, None, "output directory"),
    ]),
    "extract": ("MIR metadata for a WAV file or a segments.jsonl", [
        ("in", str, None, "input WAV or segments.jsonl"),
        ("out", str, None, "output JSONL"),
        ("window", float, 0.0, "segment window in seconds (0 = whole clip)"),
        ("transcribe", "bool", False, "ask the provider for lyrics"),
    ] + _PROVIDER),
    "segment": ("cut corpus clips into WAV windows", [
        ("in", str, None, "corpus manifest JSON or a single WAV"),
        ("out", str, None, "output directory"),
        ("window", float, 30.0, "window length in seconds"),
    ]),
    "synthesize": ("initial short captions per segment", [
        ("segments", str, None, "segments.jsonl from the segment command"),
        ("out", str, None, "output shard directory"),
        ("batch-size", int, 64, "checkpoint batch size"),
    ] + _PROVIDER),
    "create": ("detailed captions and five-skill QA", [
        ("captions", str, None, "shard directory from synthesize"),
        ("metadata", str, None, "JSONL from extract"),
        ("out", str, None, "output shard directory"),
        ("n-options", int, 4, "options per generated question"),
    ] + _PROVIDER),
    "rewrite": ("correct captions against their metadata", [
        ("in", str, None, "record shards or JSONL"),
        ("out", str, None, "output shard directory"),
    ] + _PROVIDER),
    "augment": ("add distractor options to QA records", [
        ("in", str, None, "record shards or JSONL"),
        ("out", str, None, "output shard directory"),
        ("min-options", int, 8, "target option count"),
    ] + _PROVIDER),
    "filter": ("verifier quality filter", [
        ("in", str, None, "record shards or JSONL"),
        ("out", str, None, "output shard directory"),
    ] + _PROVIDER),
    "think": ("select hard examples and build verified reasoning chains", [
        ("in", str, None, "record shards or JSONL"),
        ("out", str, None, "output shard directory"),
        ("select", "bool", True, "run hard-example selection first"),
        ("batch-size", int, 64, "checkpoint batch size"),
    ] + _PROVIDER),
    "score": ("score predictions against records", [
        ("pred", str, None, "predictions JSONL with record_id and output"),
        ("data", str, None, "record shards or JSONL"),
        ("out", str, "", "optional per-record scores JSONL"),
    ]),
    "train-grpo": ("GRPO on the tag-grammar toy task", [
        ("out", str, None, "output directory for metrics.jsonl and policy.bin"),
        ("iterations", int, 300, "GRPO steps"),
        ("group-size", int, 5, "completions per prompt"),
        ("learning-rate", float, 0.5, "gradient-descent step"),
        ("clip-eps", float, 0.2, "ratio clip"),
        ("kl-coeff", float, 0.2, "KL penalty weight (toy default)"),
        ("max-grad-norm", float, 0.5, "gradient norm clip (0 disables)"),
        ("ratio-mode", str, "token", "token or sequence"),
        ("warmup-steps", int, 60, "format-only supervised warm-up steps"),
        ("width", int, 16, "model width"),
        ("hidden", int, 32, "MLP width"),
        ("init-scale", float, 1.0, "initial weight scale"),
    ]),
    "check-gradients": ("finite-difference check of the GRPO loss gradient", [
        ("instances", int, 20, "random instances"),
        ("h", float, 1e-3, "finite-difference step"),
        ("tolerance", float, 1e-4, "maximum accepted relative error"),
        ("out", str, "", "optional JSON report path"),
    ]),
}


class UsageError(Exception):
    pass


def _dest(flag: str) -> str:
    return flag.replace("-", "_")


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _options(cmd: str):
    return COMMANDS[cmd][1] + _COMMON


def reference_markdown() -> str:
    """Flag reference for every subcommand, as Markdown (source of docs/cli.md)."""
    from .provider import TOKEN_ENV
    out = ["# songreason command reference", "",
           "Generated by `python3 -m songreason.cli --reference`; do not edit by hand.", "",
           "Every flag can also be set in a `--config` file as `key = value`, using the flag",
           "name without dashes (`batch-size` or `batch_size`). Command-line flags win.",
           f"The HTTP provider reads its bearer token from `{TOKEN_ENV}`.", ""]
    for cmd, (help_text, _) in COMMANDS.items():
        out += [f"## {cmd}", "", help_text[0].upper() + help_text[1:] + ".", "",
                "| flag | type | default | meaning |", "|---|---|---|---|"]
        for flag, typ, default, help_ in _options(cmd):
            tname = typ if isinstance(typ, str) else typ.__name__
            if flag == "workers":
                shown = "CPU count"
            elif default == "":
                shown = "empty"
            else:
                shown = "required" if default is None else f"`{default}`"
            out.append(f"| `--{flag}` | {tname} | {shown} | {help_} |")
        out.append("")
    return "\n".join(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="songreason", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, (help_text, _) in COMMANDS.items():
        p = sub.add_parser(cmd, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value settings file")
        for flag, typ, default, help_ in _options(cmd):
            conv = _parse_bool if typ == "bool" else typ
            shown = "required" if default is None else f"default {default}"
            p.add_argument(f"--{flag}", dest=_dest(flag), type=conv, default=None,
                           help=f"{help_} ({shown})")
    return parser


def read_config(path) -> dict:
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[_dest(key)] = value
    return out


def resolve(cmd: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (in rising priority)."""
    specs = {_dest(f): (typ, default) for f, typ, default, _ in _options(cmd)}
    file_values = read_config(args.config) if args.config else {}
    unknown = sorted(set(file_values) - set(specs))
    if unknown:
        raise UsageError(f"unknown config key(s) for {cmd}: {', '.join(unknown)}")
    cfg = {}
    for dest, (typ, default) in specs.items():
        value = getattr(args, dest)
        if value is None and dest in file_values:
            conv = _parse_bool if typ == "bool" else typ
            try:
                value = conv(file_values[dest])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {dest}: {exc}") from None
        if value is None:
            value = default
        if value is None:
            raise UsageError(f"--{dest.replace('_', '-')} is required")
        cfg[dest] = value
    return cfg


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _client(cfg: dict, cache_dir=None):
    from .provider import HttpTransport, MockProvider, ProviderClient
    if cfg["provider"] == "mock":
        transport = MockProvider(cfg["seed"], approve_token=cfg["mock_approve_token"] or None,
                                 reject_token=cfg["mock_reject_token"] or None)
        return ProviderClient(transport, attempts=cfg["attempts"], sleep=lambda s: None,
                              cache_dir=cache_dir, max_in_flight=max(1, cfg["workers"]))
    if cfg["provider"] == "http":
        if not cfg["provider_url"]:
            raise UsageError("--provider http needs --provider-url")
        return ProviderClient(HttpTransport(cfg["provider_url"]), attempts=cfg["attempts"],
                              cache_dir=cache_dir, max_in_flight=max(1, cfg["workers"]))
    raise UsageError(f"unknown provider {cfg['provider']!r}")


def _load_records(path):
    from .records import load_records
    return load_records(path)


def _write_records(records, out) -> None:
    from .records import write_shards
    write_shards(sorted(records, key=lambda r: r.record_id), out)


def _out_dir(cfg: dict, key: str = "out") -> Path:
    out = Path(cfg[key])
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_demo_corpus(cfg):
    from . import audio, synth
    from .pipeline import write_corpus_manifest
    out = _out_dir(cfg)
    clips, truth = [], {}
    for name, (clip, gt) in synth.demo_tracks().items():
        path = out / f"{name}.wav"
        path.write_bytes(audio.encode_wav(clip))
        clips.append((name, path))
        truth[name] = gt
    write_corpus_manifest(clips, out / "corpus.json")
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    log.info("wrote %d demo clips to %s", len(clips), out)


def cmd_extract(cfg):
    from . import audio
    from .pipeline import SegmentRef, extract_metadata, extract_one, read_segments, write_extracted
    src = Path(cfg["in"])
    client = _client(cfg) if cfg["transcribe"] else None
    if src.suffix == ".jsonl":
        items = extract_metadata(read_segments(src), client)
    else:
        clip = audio.decode_wav(src.read_bytes())
        pieces = audio.segment(clip, cfg["window"]) if cfg["window"] > 0 else [clip]
        items = []
        for piece in pieces:
            ref = SegmentRef(f"{src.stem}@{piece.offset:g}", str(src), piece.offset, piece.duration)
            items.append(extract_one(ref, client, clip=piece))
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_extracted(items, cfg["out"])
    for it in items:
        log.info("%s: bpm=%s key=%s meter=%s", it.segment.segment_id, it.metadata.bpm,
                 it.metadata.key, it.metadata.meter)


def cmd_segment(cfg):
    from .pipeline import segment_corpus, write_corpus_manifest, write_segments
    out = _out_dir(cfg)
    src = Path(cfg["in"])
    manifest = src
    if src.suffix.lower() == ".wav":
        manifest = write_corpus_manifest([(src.stem, src)], out / "corpus.json") \
            if src.resolve().parent == out.resolve() else None
        if manifest is None:
            # the manifest stores relative paths, so point it at a copy inside out
            local = out / src.name
            local.write_bytes(src.read_bytes())
            manifest = write_corpus_manifest([(src.stem, local)], out / "corpus.json")
    segs = segment_corpus(manifest, out / "segments", cfg["window"])
    write_segments(segs, out / "segments.jsonl")
    log.info("%d segments", len(segs))


def cmd_synthesize(cfg):
    from .pipeline import read_segments, synthesize_initial_captions
    out = _out_dir(cfg)
    client = _client(cfg, out / "cache")
    recs = synthesize_initial_captions(read_segments(cfg["segments"]), client,
                                       out / "checkpoint.jsonl", cfg["batch_size"], cfg["workers"])
    _write_records(recs, out)


def cmd_create(cfg):
    from .pipeline import create_caption_and_qa, mean_caption_words, read_extracted
    out = _out_dir(cfg)
    drops: list = []
    recs = create_caption_and_qa(_load_records(cfg["captions"]), read_extracted(cfg["metadata"]),
                                 _client(cfg, out / "cache"), n_options=cfg["n_options"],
                                 workers=cfg["workers"], drops=drops)
    _write_records(recs, out)
    stats = {"records": len(recs), "dropped": drops,
             "mean_caption_words": round(mean_caption_words(recs), 2)}
    (out / "stats.json").write_text(json.dumps(stats, indent=1) + "\n")
    log.info("mean caption length %.2f words", stats["mean_caption_words"])


def cmd_rewrite(cfg):
    from .pipeline import rewrite_captions
    out = _out_dir(cfg)
    _write_records(rewrite_captions(_load_records(cfg["in"]), _client(cfg, out / "cache")), out)


def cmd_augment(cfg):
    from .pipeline import augment_options
    out = _out_dir(cfg)
    client = _client(cfg, out / "cache")
    recs = [augment_options(r, client, cfg["seed"], cfg["min_options"]) if r.kind == "qa" else r
            for r in _load_records(cfg["in"])]
    _write_records(recs, out)


def cmd_filter(cfg):
    from .pipeline import quality_filter
    out = _out_dir(cfg)
    recs = _load_records(cfg["in"])
    kept = quality_filter(recs, _client(cfg, out / "cache"), cfg["workers"])
    _write_records(kept, out)
    log.info("filter kept %d of %d", len(kept), len(recs))


def cmd_think(cfg):
    from .pipeline import build_think, select_hard_examples
    out = _out_dir(cfg)
    client = _client(cfg, out / "cache")
    recs = _load_records(cfg["in"])
    if cfg["select"]:
        recs = select_hard_examples(recs, client, cfg["workers"])
    cots = build_think(recs, client, out / "checkpoint.jsonl", cfg["batch_size"], cfg["workers"])
    _write_records([c.record for c in cots if c.record is not None], out)
    counts = {d: sum(c.disposition == d for c in cots) for d in ("kept", "rewritten", "discarded")}
    (out / "stats.json").write_text(json.dumps(counts, indent=1) + "\n")
    log.info("think dispositions %s", counts)


def cmd_score(cfg):
    from .rewards import read_predictions, score_predictions
    rows = score_predictions(read_predictions(Path(cfg["pred"]).read_bytes()),
                             _load_records(cfg["data"]))
    if cfg["out"]:
        Path(cfg["out"]).write_text("".join(json.dumps(r) + "\n" for r in rows))
    totals = [r["total"] for r in rows]
    summary = {"n": len(rows), "mean_total": float(np.mean(totals)) if rows else 0.0,
               "mean_format": float(np.mean([r["format"] for r in rows])) if rows else 0.0,
               "rows": rows}
    print(json.dumps(summary))


def cmd_train_grpo(cfg):
    from .grpo import GRPOConfig, save_policy
    from .toytask import TagGrammarTask, ToyRunConfig, evaluate, run_toy
    out = _out_dir(cfg)
    grpo = GRPOConfig(group_size=cfg["group_size"], clip_eps=cfg["clip_eps"],
                      kl_coeff=cfg["kl_coeff"], learning_rate=cfg["learning_rate"],
                      seed=cfg["seed"], iterations=cfg["iterations"], ratio_mode=cfg["ratio_mode"],
                      max_grad_norm=cfg["max_grad_norm"] or None)
    run = ToyRunConfig(grpo=grpo, width=cfg["width"], hidden=cfg["hidden"],
                       warmup_steps=cfg["warmup_steps"], init_scale=cfg["init_scale"])
    task = TagGrammarTask()
    with open(out / "metrics.jsonl", "w") as fh:
        policy, _ = run_toy(run, task, on_step=lambda rep: fh.write(rep.to_json() + "\n"))
    save_policy(policy, out / "policy.bin")
    result = evaluate(policy, task)
    (out / "eval.json").write_text(json.dumps(result, sort_keys=True) + "\n")
    log.info("final evaluation %s", result)


def cmd_check_gradients(cfg):
    from .errors import NumericalError
    from .grpo import check_gradients, random_check_instance
    errors = []
    for k in range(cfg["instances"]):
        policy, group, config = random_check_instance(cfg["seed"] * 1000 + k)
        errors.append(check_gradients(policy, group, config, h=cfg["h"]))
    report = {"instances": len(errors), "max_relative_error": max(errors, default=0.0),
              "errors": errors}
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(report) + "\n")
    print(json.dumps({k: report[k] for k in ("instances", "max_relative_error")}))
    if report["max_relative_error"] >= cfg["tolerance"]:
        raise NumericalError(f"gradient mismatch {report['max_relative_error']:.3g}", None)


HANDLERS = {
    "demo-corpus": cmd_demo_corpus, "extract": cmd_extract, "segment": cmd_segment,
    "synthesize": cmd_synthesize, "create": cmd_create, "rewrite": cmd_rewrite,
    "augment": cmd_augment, "filter": cmd_filter, "think": cmd_think, "score": cmd_score,
    "train-grpo": cmd_train_grpo, "check-gradients": cmd_check_gradients,
}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if argv == ["--reference"]:
        print(reference_markdown())
        return 0
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    cmd = args.command
    try:
        cfg = resolve(cmd, args)
    except UsageError as exc:
        print(f"usage error: {exc} (see 'songreason {cmd} --help')", file=sys.stderr)
        return 2
    log.info("resolved config for %s: %s", cmd, json.dumps(cfg, sort_keys=True))
    try:
        if "out" in cfg and cfg["out"] and cmd not in ("extract", "score", "check-gradients"):
            out = _out_dir(cfg)
            (out / "config.resolved").write_text(
                "".join(f"{k} = {v}\n" for k, v in sorted(cfg.items())))
        HANDLERS[cmd](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (SongReasonError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
