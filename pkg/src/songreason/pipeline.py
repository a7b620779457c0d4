"""Annotation pipeline: segment, caption, extract, create QA, filter, think.

Stages operate on plain lists and a :class:`ProviderClient`; :func:`run_job`
chains them and writes each stage's output as a sharded JSONL directory.
Provider-bound stages checkpoint after every batch so a halted job resumes
without repeating finished work.
"""

from __future__ import annotations

import json
import logging
import re
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import audio
from .errors import (InvalidArgument, MalformedVerdict, PipelineHalted, ProviderUnavailable,
                     RewriteInconsistent, SongReasonError, ValidationError)
from .provider import ProviderClient, ProviderRequest
from .records import (AudioRef, AuditEntry, DatasetRecord, MusicMetadata, SourceSegment,
                      parse_records, serialize_records, write_shards)

log = logging.getLogger(__name__)

SKILLS = ("a) Temporal understanding", "b) Attribute identification",
          "c) Harmonic & theoretical analysis", "d) Lyric and vocal grounding",
          "e) Comparative and structural reasoning")
SFT_INSTRUCTION = ("Output the thinking process in <think> </think> and final answer in "
                   "<answer> </answer>")
STAGES = ("synthesize", "extract", "create", "filter", "think")
FAIL_THRESHOLD = 0.30
BATCH_SIZE = 64
MIN_OPTIONS = 8

CAPTION_PROMPT = "Describe this music excerpt in detail."

_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+|\s*\n+\s*")
_OPTION_RE = re.compile(r"^\(\s*([A-Za-z])\s*\)\s*(.+)$")
_ANSWER_RE = re.compile(r"^answer\s*:\s*\(?\s*([A-Za-z])\s*\)?", re.IGNORECASE)
_LETTER_PREFIX = re.compile(r"^\(?\s*[A-Za-z]\s*\)\s+|^[-*]\s+")
_BPM_CLAIM = re.compile(r"(\d+(?:\.\d+)?)\s*bpm\b", re.IGNORECASE)


@dataclass(frozen=True)
class SegmentRef:
    """A 30 s (or shorter tail) window of a corpus clip, stored as its own WAV."""
    segment_id: str
    path: str
    offset: float
    duration: float


@dataclass(frozen=True)
class Extracted:
    segment: SegmentRef
    metadata: MusicMetadata
    audit: tuple[AuditEntry, ...] = ()


@dataclass(frozen=True)
class CotRecord:
    base: DatasetRecord
    steps: tuple[str, ...]
    step_verdicts: tuple[str, ...]
    disposition: str
    record: DatasetRecord | None = None

    @property
    def fail_fraction(self) -> float:
        return fail_fraction(self.step_verdicts)


@dataclass(frozen=True)
class PipelineJob:
    corpus_manifest: str
    output_dir: str
    stages: tuple[str, ...] = STAGES
    seed: int = 0
    workers: int = 4
    batch_size: int = BATCH_SIZE
    window_sec: float = 30.0
    n_options: int = 4
    min_options: int = MIN_OPTIONS
    stats: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise InvalidArgument(f"unknown stage(s) {unknown}")
        order = [STAGES.index(s) for s in self.stages]
        if order != sorted(order) or len(set(order)) != len(order):
            raise InvalidArgument(f"stages must follow {STAGES} order without repeats")
        object.__setattr__(self, "stages", tuple(self.stages))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def option_letter(i: int) -> str:
    return chr(65 + i)


def options_block(options) -> str:
    return "\n".join(f"({option_letter(i)}) {o}" for i, o in enumerate(options))


def qa_prompt(question: str, options) -> str:
    return f"{question}\n{options_block(options)}"


def split_steps(text: str) -> list[str]:
    """Sentences of a reasoning chain: split after ``.!?`` + whitespace and on newlines."""
    return [s.strip() for s in _SENTENCE_RE.split(text.strip()) if s.strip()]


def fail_fraction(verdicts) -> float:
    verdicts = list(verdicts)
    if not verdicts:
        return 1.0
    return sum(v != "pass" for v in verdicts) / len(verdicts)


def disposition_for(f: float) -> str:
    """kept at 0, rewritten up to and including the threshold, discarded above it."""
    if f == 0.0:
        return "kept"
    return "rewritten" if f <= FAIL_THRESHOLD else "discarded"


def mean_caption_words(records) -> float:
    counts = [len(r.target.split()) for r in records if r.kind == "caption"]
    return float(np.mean(counts)) if counts else 0.0


def _seeded_rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


def _load_checkpoint(path: Path | None) -> dict:
    if path is None or not path.exists():
        return {}
    return {r.record_id: r for r in parse_records(path.read_bytes())}


def _append_checkpoint(path: Path | None, records) -> None:
    if path is None or not records:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "ab") as fh:
        fh.write(serialize_records(records))


def _batched(client: ProviderClient, stage: str, items, make_request, finish,
             checkpoint: Path | None, batch_size: int, workers: int | None,
             done_id=lambda item: None) -> list:
    """Run one provider call per item in batches, checkpointing finished records.

    ``finish(item, response) -> DatasetRecord | None``. Items whose
    ``done_id(item)`` is already in the checkpoint are not re-sent. On a
    provider failure the finished prefix is checkpointed and
    :class:`PipelineHalted` raised.
    """
    done = _load_checkpoint(checkpoint)
    out = [done[done_id(it)] for it in items if done_id(it) in done]
    todo = [it for it in items if done_id(it) not in done]
    for start in range(0, len(todo), batch_size):
        batch = todo[start:start + batch_size]
        results = client.send_many([make_request(it) for it in batch], workers)
        finished = []
        for item, res in zip(batch, results):
            if isinstance(res, ProviderUnavailable):
                _append_checkpoint(checkpoint, finished)
                out.extend(finished)
                raise PipelineHalted(stage, len(out), res)
            rec = finish(item, res)
            if rec is not None:
                finished.append(rec)
        _append_checkpoint(checkpoint, finished)
        out.extend(finished)
    return out


# --------------------------------------------------------------------------
# stage 0: segmentation
# --------------------------------------------------------------------------

def read_corpus_manifest(path) -> list[tuple[str, Path]]:
    """``{"clips": [{"clip_id": ..., "path": ...}, ...]}``; paths relative to the manifest."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    return [(c["clip_id"], (path.parent / c["path"]).resolve()) for c in data["clips"]]


def write_corpus_manifest(clips, path) -> Path:
    """``clips`` is a list of ``(clip_id, wav path)``; paths are stored relative."""
    path = Path(path)
    rows = [{"clip_id": cid, "path": str(Path(p).resolve().relative_to(path.parent.resolve()))}
            for cid, p in clips]
    path.write_text(json.dumps({"clips": rows}, indent=1) + "\n", encoding="utf-8")
    return path


def segment_corpus(manifest, out_dir, window_sec: float = 30.0) -> list[SegmentRef]:
    """Cut every corpus clip into windows and write each as a 16-bit WAV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    refs = []
    for clip_id, path in read_corpus_manifest(manifest):
        clip = audio.decode_wav(path.read_bytes())
        for seg in audio.segment(replace(clip, clip_id=clip_id), window_sec):
            sid = f"{clip_id}@{seg.offset:g}"
            seg_path = out_dir / f"{clip_id}@{seg.offset:g}.wav"
            seg_path.write_bytes(audio.encode_wav(seg))
            refs.append(SegmentRef(sid, str(seg_path), seg.offset, seg.duration))
    return refs


def write_segments(segments, path) -> None:
    rows = [{"segment_id": s.segment_id, "path": s.path, "offset": s.offset,
             "duration": s.duration} for s in segments]
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


def read_segments(path) -> list[SegmentRef]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    return [SegmentRef(**json.loads(line)) for line in lines if line.strip()]


# --------------------------------------------------------------------------
# stage 1: initial captions
# --------------------------------------------------------------------------

def synthesize_initial_captions(segments, client: ProviderClient, checkpoint=None,
                                batch_size: int = BATCH_SIZE, workers: int | None = None):
    """One short caption record per segment (``<segment_id>/short``)."""
    checkpoint = Path(checkpoint) if checkpoint else None

    def request(seg):
        return ProviderRequest("captioner", "short_caption", {"duration": f"{seg.duration:g}"},
                               audio_ref=seg.path)

    def finish(seg, res):
        return DatasetRecord(
            record_id=f"{seg.segment_id}/short", kind="caption",
            audio_ref=AudioRef(seg.path, seg.offset), prompt=CAPTION_PROMPT, target=res.text,
            metadata=MusicMetadata(source_segment=SourceSegment(seg.segment_id, seg.offset)),
            parent_id=seg.segment_id, stage_audit=(AuditEntry("synthesize", True),))

    return _batched(client, "synthesize", list(segments), request, finish, checkpoint,
                    batch_size, workers, done_id=lambda s: f"{s.segment_id}/short")


# --------------------------------------------------------------------------
# stage 2: metadata extraction
# --------------------------------------------------------------------------

def chord_summary(segments) -> tuple[str, str]:
    """(chord list with times, progression sentence) from recognized segments; N dropped."""
    named = [s for s in segments if s.label != "N"]
    listing = ", ".join(f"{s.label} {s.start:.1f}-{s.end:.1f}s" for s in named)
    labels = [s.label for s in named]
    theory = "Chord progression " + " -> ".join(labels) if labels else ""
    return listing, theory


def extract_one(seg: SegmentRef, client: ProviderClient | None = None,
                clip: audio.AudioClip | None = None) -> Extracted:
    """Run the MIR estimators on one segment; failures become audit entries.

    ``clip`` supplies the samples directly; otherwise ``seg.path`` is decoded.
    """
    notes = []
    fields: dict = {}
    extras: dict = {}
    if clip is None:
        clip = audio.decode_wav(Path(seg.path).read_bytes())
    try:
        env = audio.onset_envelope(clip)
        tempo = audio.estimate_tempo(env)
        fields["bpm"] = float(round(tempo.bpm))
        fields["meter"] = audio.estimate_meter(env, tempo).meter
    except SongReasonError as exc:
        notes.append(f"tempo: {type(exc).__name__}")
    try:
        chroma = audio.chromagram(clip)
        fields["key"] = audio.estimate_key(chroma).name
        listing, theory = chord_summary(audio.recognize_chords(chroma))
        if listing:
            extras["Chords"] = listing
            fields["theory"] = theory
    except SongReasonError as exc:
        notes.append(f"tonal: {type(exc).__name__}")
    if client is not None:
        try:
            text = client.send(ProviderRequest("transcriber", "transcribe", {},
                                               audio_ref=seg.path)).text.strip()
            if text:
                fields["lyrics"] = text
        except ProviderUnavailable as exc:
            notes.append(f"lyrics: {type(exc).__name__}")
    md = MusicMetadata(source_segment=SourceSegment(seg.segment_id, seg.offset),
                       extras=extras, **fields)
    return Extracted(seg, md, (AuditEntry("extract", not notes, "; ".join(notes)),))


def extract_metadata(segments, client: ProviderClient | None = None) -> list[Extracted]:
    return [extract_one(s, client) for s in segments]


def write_extracted(items, path) -> None:
    from .records import metadata_to_dict
    rows = [{"segment": vars(e.segment), "metadata": metadata_to_dict(e.metadata),
             "audit": [vars(a) for a in e.audit]} for e in items]
    Path(path).write_text("".join(json.dumps(r, ensure_ascii=False, separators=(",", ":")) + "\n"
                                  for r in rows), encoding="utf-8")


def read_extracted(path) -> list[Extracted]:
    from .records import metadata_from_dict
    out = []
    for line in Path(path).read_text(encoding="utf-8").split("\n"):
        if line.strip():
            r = json.loads(line)
            out.append(Extracted(SegmentRef(**r["segment"]), metadata_from_dict(r["metadata"]),
                                 tuple(AuditEntry(**a) for a in r["audit"])))
    return out


# --------------------------------------------------------------------------
# stage 3: captions and QA
# --------------------------------------------------------------------------

def parse_qa(text: str) -> tuple[str, list[str], int]:
    """(question, options, answer index) from ``question / (A) .. / Answer: (X)`` text."""
    question, options, answer = [], [], None
    for line in (ln.strip() for ln in text.splitlines()):
        if not line:
            continue
        m = _OPTION_RE.match(line)
        a = _ANSWER_RE.match(line)
        if a:
            answer = ord(a.group(1).upper()) - 65
        elif m:
            options.append(m.group(2).strip())
        elif not options:
            question.append(line)
    if not question or len(options) < 2 or answer is None or not 0 <= answer < len(options):
        raise ValidationError("qa", "provider reply is not a question with options and an answer")
    return " ".join(question), options, answer


def _lineage_audit(ex: Extracted, short: DatasetRecord | None) -> tuple[AuditEntry, ...]:
    return (short.stage_audit if short else ()) + ex.audit


def create_caption_and_qa(short_records, extracted, client: ProviderClient,
                          skills=SKILLS, n_options: int = 4, workers: int | None = None,
                          drops: list | None = None) -> list[DatasetRecord]:
    """One detailed caption and one QA per skill for every extracted segment.

    Replies that do not yield a valid record are dropped; the reason goes
    to ``drops`` when given.
    """
    shorts = {r.parent_id: r for r in short_records}
    captions_req, items = [], []
    for ex in extracted:
        short = shorts.get(ex.segment.segment_id)
        block = ex.metadata.to_block()
        captions_req.append(ProviderRequest("captioner", "detailed_caption", {
            "duration": f"{ex.segment.duration:g}", "metadata": block,
            "short_caption": short.target if short else ""}, audio_ref=ex.segment.path))
        items.append((ex, short))
    caption_res = client.send_many(captions_req, workers)
    out, qa_req, qa_items = [], [], []
    for (ex, short), res in zip(items, caption_res):
        if isinstance(res, ProviderUnavailable):
            raise PipelineHalted("create", len(out), res)
        sid = ex.segment.segment_id
        cap = DatasetRecord(
            record_id=f"{sid}/caption", kind="caption",
            audio_ref=AudioRef(ex.segment.path, ex.segment.offset), prompt=CAPTION_PROMPT,
            target=res.text, metadata=ex.metadata, parent_id=short.record_id if short else sid,
            stage_audit=_lineage_audit(ex, short) + (AuditEntry("create", True),))
        try:
            cap.validate()
            out.append(cap)
        except ValidationError as exc:
            if drops is not None:
                drops.append({"record_id": cap.record_id, "reason": str(exc)})
            continue
        for k, skill in enumerate(skills):
            qa_req.append(ProviderRequest("qa_generator", "qa_generation", {
                "caption": cap.target, "metadata": ex.metadata.to_block(), "skill": skill,
                "n_options": str(n_options)}, audio_ref=ex.segment.path))
            qa_items.append((cap, k, skill))
    for (cap, k, skill), res in zip(qa_items, client.send_many(qa_req, workers)):
        if isinstance(res, ProviderUnavailable):
            raise PipelineHalted("create", len(out), res)
        rid = f"{cap.record_id.rsplit('/', 1)[0]}/qa{k}"
        try:
            question, options, answer = parse_qa(res.text)
            qa = DatasetRecord(
                record_id=rid, kind="qa", audio_ref=cap.audio_ref, prompt=question,
                target=f"({option_letter(answer)}) {options[answer]}", metadata=cap.metadata,
                options=tuple(options), answer_index=answer, parent_id=cap.record_id,
                skill=skill, stage_audit=cap.stage_audit)
            qa.validate()
            out.append(qa)
        except ValidationError as exc:
            if drops is not None:
                drops.append({"record_id": rid, "reason": str(exc)})
    log.info("create: %d records, mean caption length %.2f words",
             len(out), mean_caption_words(out))
    return out


def check_rewrite(text: str, metadata: MusicMetadata) -> None:
    """Tempo and key values from metadata must appear verbatim; no other BPM may be claimed."""
    if metadata.bpm is not None:
        bpm = metadata.category_text("bpm")
        claims = {float(c) for c in _BPM_CLAIM.findall(text)}
        if bpm not in re.findall(r"\d+(?:\.\d+)?", text) or claims - {float(metadata.bpm)}:
            raise RewriteInconsistent(f"rewritten caption does not state {bpm} BPM consistently")
    if metadata.key and metadata.key.lower() not in text.lower():
        raise RewriteInconsistent(f"rewritten caption omits key {metadata.key!r}")


def rewrite_caption(existing: DatasetRecord, metadata: MusicMetadata,
                    client: ProviderClient) -> DatasetRecord:
    """Correct a caption against metadata (adding lyric themes when lyrics exist).

    The record keeps its id; :class:`RewriteInconsistent` is raised when the
    reply contradicts the metadata tempo or key.
    """
    if existing.kind != "caption":
        raise InvalidArgument(f"rewrite needs a caption record, got {existing.kind!r}")
    res = client.send(ProviderRequest("captioner", "caption_correction", {
        "caption": existing.target, "metadata": metadata.to_block(),
        "lyrics": metadata.lyrics or ""}, audio_ref=existing.audio_ref.path))
    check_rewrite(res.text, metadata)
    return replace(existing, target=res.text, metadata=metadata).audited("rewrite", True)


def rewrite_captions(records, client: ProviderClient) -> list[DatasetRecord]:
    """Rewrite every caption; inconsistent rewrites keep the original with a failed audit."""
    out = []
    for r in records:
        if r.kind != "caption":
            out.append(r)
            continue
        try:
            out.append(rewrite_caption(r, r.metadata, client))
        except RewriteInconsistent as exc:
            out.append(r.audited("rewrite", False, str(exc)))
    return out


def augment_options(qa: DatasetRecord, client: ProviderClient, seed: int = 0,
                    min_options: int = MIN_OPTIONS) -> DatasetRecord:
    """Add provider distractors until ``min_options`` and shuffle with a per-record seed."""
    if qa.kind != "qa" or not qa.options or len(qa.options) < 2:
        raise InvalidArgument("augment_options needs a QA record with at least 2 options")
    correct = qa.options[qa.answer_index]
    need = max(0, min_options - len(qa.options))
    options = list(qa.options)
    if need:
        res = client.send(ProviderRequest("qa_generator", "option_augmentation", {
            "question": qa.prompt, "options": "\n".join(qa.options), "answer": correct,
            "n_new": str(need + 2)}, audio_ref=qa.audio_ref.path))
        seen = {o.casefold() for o in options}
        for line in res.text.splitlines():
            cand = _LETTER_PREFIX.sub("", line.strip()).strip()
            if not cand or cand.casefold() in seen:
                continue
            seen.add(cand.casefold())
            options.append(cand)
            if len(options) >= min_options:
                break
    order = _seeded_rng(seed, qa.record_id).permutation(len(options))
    options = [options[i] for i in order]
    answer = options.index(correct)
    passed = len(options) >= min_options
    return replace(qa, options=tuple(options), answer_index=answer,
                   target=f"({option_letter(answer)}) {correct}").audited(
        "augment", passed, "" if passed else f"only {len(options)} options")


# --------------------------------------------------------------------------
# stage 4: verification
# --------------------------------------------------------------------------

def _annotation_vars(r: DatasetRecord) -> dict:
    text = r.target if r.kind != "qa" else f"{r.prompt}\nAnswer: {r.target}"
    return {"kind": "Question" if r.kind == "qa" else "Caption", "text": text,
            "options": "\n".join(r.options or ())}


def _verdict_stage(records, client, stage, template, workers) -> list[DatasetRecord]:
    records = list(records)
    reqs = [ProviderRequest("verifier", template, _annotation_vars(r),
                            audio_ref=r.audio_ref.path) for r in records]
    out = []
    for r, res in zip(records, client.send_many(reqs, workers)):
        if isinstance(res, ProviderUnavailable):
            raise PipelineHalted(stage, len(out), res)
        if isinstance(res, MalformedVerdict):
            out.append(r.audited(stage, False, "malformed verdict; manual review"))
        elif res.verdict == "yes":
            out.append(r.audited(stage, True))
    return out


def quality_filter(records, client: ProviderClient, workers: int | None = None):
    """Keep records the verifier approves; unparseable verdicts are kept and flagged."""
    records = list(records)
    out = _verdict_stage(records, client, "filter", "verify_record", workers)
    if records:
        log.info("filter: dropped %d of %d (%.1f%%)", len(records) - len(out), len(records),
                 100.0 * (len(records) - len(out)) / len(records))
    return out


def select_hard_examples(records, client: ProviderClient, workers: int | None = None):
    """Keep records the verifier judges hard."""
    return _verdict_stage(records, client, "select", "difficulty", workers)


# --------------------------------------------------------------------------
# think: chain-of-thought construction
# --------------------------------------------------------------------------

def _cot_request(r: DatasetRecord) -> ProviderRequest:
    block = r.metadata.to_block()
    if r.kind == "qa":
        return ProviderRequest("cot_generator", "cot_qa", {
            "question": r.prompt, "options": options_block(r.options), "metadata": block,
            "answer": r.target}, audio_ref=r.audio_ref.path)
    return ProviderRequest("cot_generator", "cot_caption", {"metadata": block, "caption": r.target},
                           audio_ref=r.audio_ref.path)


def _verify_steps(steps, r, client, workers) -> list[str]:
    reqs = [ProviderRequest("verifier", "verify_step", {"step": s}, audio_ref=r.audio_ref.path)
            for s in steps]
    verdicts = []
    for res in client.send_many(reqs, workers):
        if isinstance(res, ProviderUnavailable):
            raise res
        # an unparseable step verdict counts against the chain
        verdicts.append("pass" if not isinstance(res, MalformedVerdict) and res.verdict == "yes"
                        else "fail")
    return verdicts


def think_one(r: DatasetRecord, client: ProviderClient, workers: int | None = None) -> CotRecord:
    """Generate, verify and (at most once) repair the reasoning chain for one record."""
    chain = client.send(_cot_request(r)).text
    steps = split_steps(chain)
    verdicts = _verify_steps(steps, r, client, workers)
    disposition = disposition_for(fail_fraction(verdicts))
    if disposition == "discarded":
        return CotRecord(r, tuple(steps), tuple(verdicts), disposition)
    final = list(steps)
    audit = AuditEntry("think", True, "all steps verified")
    if disposition == "rewritten":
        block = r.metadata.to_block()
        bad = [i for i, v in enumerate(verdicts) if v == "fail"]
        for i in bad:
            final[i] = client.send(ProviderRequest("cot_generator", "rewrite_step", {
                "step": steps[i], "metadata": block}, audio_ref=r.audio_ref.path)).text.strip()
        again = _verify_steps([final[i] for i in bad], r, client, workers)
        still = sum(v == "fail" for v in again)
        audit = AuditEntry("think", still == 0,
                           f"rewrote {len(bad)} step(s); {still} still failing")
    prompt = r.prompt if r.kind != "qa" else qa_prompt(r.prompt, r.options)
    rec = DatasetRecord(
        record_id=f"{r.record_id}/think", kind="cot_qa" if r.kind == "qa" else "cot_caption",
        audio_ref=r.audio_ref, prompt=f"{prompt}\n{SFT_INSTRUCTION}", target=r.target,
        metadata=r.metadata, options=r.options, answer_index=r.answer_index,
        think=" ".join(final), parent_id=r.record_id, skill=r.skill,
        stage_audit=r.stage_audit + (audit,))
    return CotRecord(r, tuple(steps), tuple(verdicts), disposition, rec)


def build_think(records, client: ProviderClient, checkpoint=None, batch_size: int = BATCH_SIZE,
                workers: int | None = None) -> list[CotRecord]:
    """Chains for every record, in input order.

    The checkpoint stores finished CoT records; on resume, records already
    present are returned as ``kept`` without regenerating them, and
    discarded ones are regenerated (the cache makes that free).
    """
    checkpoint = Path(checkpoint) if checkpoint else None
    done = _load_checkpoint(checkpoint)
    out = []
    records = list(records)
    for start in range(0, len(records), batch_size):
        fresh = []
        for r in records[start:start + batch_size]:
            rid = f"{r.record_id}/think"
            if rid in done:
                out.append(CotRecord(r, tuple(split_steps(done[rid].think)), (), "kept", done[rid]))
                continue
            try:
                cot = think_one(r, client, workers)
            except ProviderUnavailable as exc:
                _append_checkpoint(checkpoint, fresh)
                raise PipelineHalted("think", len(out), exc) from None
            out.append(cot)
            if cot.record is not None:
                fresh.append(cot.record)
        _append_checkpoint(checkpoint, fresh)
    return out


# --------------------------------------------------------------------------
# whole job
# --------------------------------------------------------------------------

def annotate(short_records, extracted, client: ProviderClient, seed: int = 0,
             workers: int | None = None, n_options: int = 4, min_options: int = MIN_OPTIONS,
             stats: dict | None = None) -> dict:
    """Create, refine, filter and think over already-extracted segments.

    Returns ``{"create": [...], "filter": [...], "think": [...]}`` where
    ``think`` holds the surviving CoT records.
    """
    stats = {} if stats is None else stats
    drops: list = []
    created = create_caption_and_qa(short_records, extracted, client, n_options=n_options,
                                    workers=workers, drops=drops)
    created = rewrite_captions(created, client)
    created = [augment_options(r, client, seed, min_options) if r.kind == "qa" else r
               for r in created]
    filtered = quality_filter(created, client, workers)
    hard = select_hard_examples(filtered, client, workers)
    cots = build_think(hard, client, workers=workers)
    stats.update({
        "created": len(created), "create_dropped": len(drops),
        "mean_caption_words": round(mean_caption_words(created), 2),
        "filtered": len(filtered), "hard": len(hard),
        "think": {d: sum(c.disposition == d for c in cots)
                  for d in ("kept", "rewritten", "discarded")},
    })
    return {"create": created, "filter": filtered,
            "think": [c.record for c in cots if c.record is not None]}


def run_job(job: PipelineJob, client: ProviderClient) -> dict:
    """Execute ``job.stages`` in order, reading earlier outputs from ``output_dir``."""
    out = Path(job.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoints"
    seg_file, short_dir, ext_file = out / "segments.jsonl", out / "synthesize", out / "extract.jsonl"
    stats = job.stats
    if "synthesize" in job.stages:
        segments = segment_corpus(job.corpus_manifest, out / "segments", job.window_sec)
        write_segments(segments, seg_file)
        shorts = synthesize_initial_captions(segments, client, ckpt / "synthesize.jsonl",
                                             job.batch_size, job.workers)
        write_shards(sorted(shorts, key=lambda r: r.record_id), short_dir)
        stats["segments"] = len(segments)
    if "extract" in job.stages:
        extracted = extract_metadata(read_segments(seg_file), client)
        write_extracted(extracted, ext_file)
        stats["extract_failures"] = sum(not a.passed for e in extracted for a in e.audit)
    if {"create", "filter", "think"} & set(job.stages):
        from .records import read_manifest
        shorts = read_manifest(short_dir / "manifest.json")
        result = annotate(shorts, read_extracted(ext_file), client, job.seed, job.workers,
                          job.n_options, job.min_options, stats)
        for stage in ("create", "filter", "think"):
            if stage in job.stages:
                write_shards(sorted(result[stage], key=lambda r: r.record_id), out / stage)
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    return stats
