import json
import shutil
from dataclasses import replace

import numpy as np
import pytest

from helpers import random_records
from songreason import audio, synth
from songreason.errors import (InvalidArgument, PipelineHalted, ProviderUnavailable,
                               RewriteInconsistent, TransientProviderError)
from songreason.pipeline import (SFT_INSTRUCTION, SKILLS, PipelineJob, SegmentRef, annotate,
                                 augment_options, build_think, create_caption_and_qa,
                                 disposition_for, extract_one, fail_fraction, parse_qa,
                                 quality_filter, rewrite_caption, run_job, select_hard_examples,
                                 synthesize_initial_captions, think_one, write_corpus_manifest)
from songreason.provider import MockProvider, ProviderClient, ProviderRequest, mock_client
from songreason.records import AudioRef, DatasetRecord, MusicMetadata, load_records


def _segment(tmp_path, clip, name="seg"):
    path = tmp_path / f"{name}.wav"
    path.write_bytes(audio.encode_wav(clip))
    return SegmentRef(f"{name}@0", str(path), 0.0, clip.duration)


def _segments(n):
    return [SegmentRef(f"clip{i}@0", f"clip{i}.wav", 0.0, 30.0) for i in range(n)]


class FailAfter:
    """Mock transport that goes down after ``limit`` successful calls."""

    def __init__(self, limit, seed=0):
        self.mock = MockProvider(seed)
        self.limit = limit
        self.calls = 0

    def __call__(self, req):
        if self.calls >= self.limit:
            raise TransientProviderError("down")
        self.calls += 1
        return self.mock(req)


# synthesize -----------------------------------------------------------------

def test_synthesize_three_segments():
    recs = synthesize_initial_captions(_segments(3), mock_client(0))
    assert len(recs) == 3
    assert all(r.stage_audit[0].stage == "synthesize" and r.stage_audit[0].passed for r in recs)
    assert synthesize_initial_captions([], mock_client(0)) == []


def test_synthesize_resume_without_duplicate_work(tmp_path):
    segs = _segments(10)
    ckpt = tmp_path / "ckpt.jsonl"
    down = ProviderClient(FailAfter(4), sleep=lambda s: None)
    with pytest.raises(PipelineHalted) as info:
        synthesize_initial_captions(segs, down, ckpt, batch_size=3, workers=1)
    assert info.value.done == 4  # one full batch plus the finished part of the next
    up = ProviderClient(MockProvider(0), sleep=lambda s: None)
    resumed = synthesize_initial_captions(segs, up, ckpt, batch_size=3, workers=1)
    assert up.transport.calls == 6
    assert [r.record_id for r in resumed] == [f"clip{i}@0/short" for i in range(10)]
    assert resumed == synthesize_initial_captions(segs, mock_client(0), batch_size=3)


# extract --------------------------------------------------------------------

def test_extract_click_track_in_c(tmp_path):
    clicks = synth.click_track(120, 10.0, accent_every=4)
    triad = synth.progression(["C:maj"], chord_sec=10.0)
    seg = _segment(tmp_path, audio.AudioClip(clicks.samples + triad.samples, synth.DEFAULT_RATE))
    ex = extract_one(seg)
    assert abs(ex.metadata.bpm - 120) <= 2.4
    assert ex.metadata.key == "C major" and ex.metadata.meter == "4/4"
    assert ex.audit[0].passed


def test_extract_silence_notes_failures(tmp_path):
    ex = extract_one(_segment(tmp_path, synth.silence(6.0)))
    md = ex.metadata
    assert md.bpm is None and md.key is None and md.meter is None and not md.extras
    assert not ex.audit[0].passed
    assert "NoPeriodicity" in ex.audit[0].note and "NoTonalContent" in ex.audit[0].note


def test_extract_two_chords(tmp_path):
    ex = extract_one(_segment(tmp_path, synth.progression(["C:maj", "A:min"], 4.0)))
    chords = ex.metadata.extras["Chords"].split(", ")
    assert [c.split()[0] for c in chords] == ["C:maj", "A:min"]
    assert ex.metadata.theory == "Chord progression C:maj -> A:min"


def test_extract_lyrics_via_transcriber(tmp_path):
    seg = _segment(tmp_path, synth.progression(["G:maj"], 2.0))
    ex = extract_one(seg, mock_client(0, lyrics={seg.path: "walk the line"}))
    assert ex.metadata.lyrics == "walk the line"


# create / rewrite / augment -------------------------------------------------

def _extracted(n=2):
    from songreason.pipeline import Extracted
    from songreason.records import SourceSegment
    out = []
    for i, seg in enumerate(_segments(n)):
        md = MusicMetadata(genre="Americana", bpm=float(100 + 10 * i), key="G minor", meter="4/4",
                           source_segment=SourceSegment(seg.segment_id, 0.0))
        out.append(Extracted(seg, md))
    return out


def test_create_caption_and_qa():
    client = mock_client(0)
    shorts = synthesize_initial_captions(_segments(2), client)
    recs = create_caption_and_qa(shorts, _extracted(), client)
    caps = [r for r in recs if r.kind == "caption"]
    assert len(caps) == 2
    assert "100" in caps[0].target and "G minor" in caps[0].target
    qas = [r for r in recs if r.kind == "qa" and r.parent_id == caps[0].record_id]
    assert sorted(r.skill for r in qas) == sorted(SKILLS)
    for qa in qas:
        assert qa.target == f"({chr(65 + qa.answer_index)}) {qa.options[qa.answer_index]}"


def test_mean_caption_words_reported():
    stats = {}
    client = mock_client(0)
    annotate(synthesize_initial_captions(_segments(2), client), _extracted(), client, stats=stats)
    assert stats["mean_caption_words"] > 0
    assert stats["created"] == 12


def test_parse_qa_rejects_bad_reply():
    assert parse_qa("Q?\n(A) x\n(B) y\nAnswer: (B)") == ("Q?", ["x", "y"], 1)
    with pytest.raises(ValueError):
        parse_qa("Q?\n(A) x\nAnswer: (C)")


def _caption(text, md):
    return DatasetRecord("s@0/caption", "caption", AudioRef("s.wav"), "Describe.", text, md)


def test_rewrite_fixes_tempo():
    md = MusicMetadata(genre="rock", bpm=120.0, key="E minor")
    out = rewrite_caption(_caption("A rock song at 140 BPM in E minor.", md), md, mock_client(0))
    assert "120" in out.target and "140" not in out.target
    assert out.record_id == "s@0/caption" and out.stage_audit[-1].stage == "rewrite"
    assert "lyrics" not in out.target.lower()


def test_rewrite_adds_lyrics_when_present():
    md = MusicMetadata(genre="rock", bpm=120.0, key="E minor", lyrics="rain on the road")
    out = rewrite_caption(_caption("A song.", md), md, mock_client(0))
    assert "rain on the road" in out.target


def test_rewrite_inconsistent():
    md = MusicMetadata(genre="rock", bpm=120.0, key="E minor")
    client = mock_client(0, overrides={"caption_correction": lambda r: "A rock song at 120 BPM."})
    with pytest.raises(RewriteInconsistent):
        rewrite_caption(_caption("x", md), md, client)
    client = mock_client(0, overrides={"caption_correction":
                                       lambda r: "At 120 BPM, no wait, 140 bpm, in E minor."})
    with pytest.raises(RewriteInconsistent):
        rewrite_caption(_caption("x", md), md, client)


def _qa(options=("Americana", "Jazz", "Techno", "Opera"), answer=0, rid="s@0/qa0"):
    return DatasetRecord(rid, "qa", AudioRef("s.wav"), "Which genre?",
                         f"(A) {options[answer]}", MusicMetadata(genre="Americana"),
                         options=options, answer_index=answer)


def test_augment_options():
    qa = _qa()
    out = augment_options(qa, mock_client(0), seed=3)
    assert len(out.options) >= 8
    assert set(qa.options) <= set(out.options)
    assert len({o.casefold() for o in out.options}) == len(out.options)  # planted duplicate removed
    assert out.options[out.answer_index] == "Americana"
    assert out.target == f"({chr(65 + out.answer_index)}) Americana"
    assert augment_options(qa, mock_client(0), seed=3) == out
    with pytest.raises(InvalidArgument):
        augment_options(_caption("x", MusicMetadata(genre="a")), mock_client(0))


# filter / select ------------------------------------------------------------

def test_filter_identity_when_all_approved():
    recs = random_records(30, seed=2)
    out = quality_filter(recs, mock_client(0))
    assert [replace(r, stage_audit=r.stage_audit[:-1]) for r in out] == recs
    assert all(r.stage_audit[-1].passed for r in out)


def test_filter_drops_planted():
    recs = random_records(1000, seed=4)
    planted = {r.record_id for r in recs[::10]}
    recs = [replace(r, target=r.target + " PLANTED") if r.record_id in planted else r for r in recs]
    out = quality_filter(recs, mock_client(0, reject_token="PLANTED"), workers=1)
    assert len(out) == 900
    assert not planted & {r.record_id for r in out}


def test_filter_keeps_malformed_flagged():
    recs = random_records(5, seed=8)
    recs[2] = replace(recs[2], target="odd MALFORMED reply")
    out = quality_filter(recs, mock_client(0, malformed_token="MALFORMED"))
    assert len(out) == 5
    assert not out[2].stage_audit[-1].passed and "malformed" in out[2].stage_audit[-1].note


def test_select_hard():
    recs = [_qa(tuple(f"opt{j}" for j in range(n)), rid=f"s@0/qa{n}") for n in range(2, 11)]
    out = select_hard_examples(recs, mock_client(0))
    assert [len(r.options) for r in out] == [7, 8, 9, 10]
    assert select_hard_examples([], mock_client(0)) == []
    assert select_hard_examples(recs, mock_client(0)) == out


# think ----------------------------------------------------------------------

def _chain_client(n_steps, n_bad):
    steps = [f"Step {i} {'BAD' if i < n_bad else 'ok'}." for i in range(n_steps)]
    return mock_client(0, reject_token="BAD", overrides={"cot_qa": lambda r: " ".join(steps)})


@pytest.mark.parametrize("n_bad,disposition", [(0, "kept"), (3, "rewritten"), (4, "discarded"),
                                               (10, "discarded")])
def test_think_dispositions(n_bad, disposition):
    cot = think_one(_qa(), _chain_client(10, n_bad))
    assert cot.fail_fraction == pytest.approx(n_bad / 10)
    assert cot.disposition == disposition
    if disposition == "discarded":
        assert cot.record is None
        return
    rec = cot.record
    assert rec.kind == "cot_qa" and rec.record_id == "s@0/qa0/think"
    assert rec.prompt.endswith("\n" + SFT_INSTRUCTION)
    assert "(A) Americana" in rec.prompt
    assert "BAD" not in rec.think
    if disposition == "kept":
        assert rec.think == " ".join(cot.steps)


def test_disposition_boundaries():
    assert [disposition_for(f) for f in (0.0, 0.30, 0.300001, 1.0)] == \
        ["kept", "rewritten", "discarded", "discarded"]
    assert fail_fraction([]) == 1.0


def test_build_think_resume(tmp_path):
    recs = [replace(_qa(rid=f"s@{i}/qa0"), audio_ref=AudioRef(f"s{i}.wav")) for i in range(6)]
    ckpt = tmp_path / "think.jsonl"
    down = ProviderClient(FailAfter(12), sleep=lambda s: None)
    with pytest.raises(PipelineHalted):
        build_think(recs, down, ckpt, batch_size=2, workers=1)
    done = len(ckpt.read_bytes().splitlines())
    assert done == 4  # three provider calls per record, twelve allowed
    up = ProviderClient(MockProvider(0), sleep=lambda s: None)
    cots = build_think(recs, up, ckpt, batch_size=2, workers=1)
    assert [c.record.record_id for c in cots] == [f"s@{i}/qa0/think" for i in range(6)]
    fresh = ProviderClient(MockProvider(0), sleep=lambda s: None)
    full = build_think(recs, fresh, batch_size=2, workers=1)
    assert up.transport.calls < fresh.transport.calls
    assert [c.record for c in cots] == [c.record for c in full]


# whole job ------------------------------------------------------------------

def _corpus(tmp_path):
    clips = []
    for name in ("clicks_120bpm_cmaj", "progression_c_am_f_g"):
        clip, _ = synth.demo_tracks()[name]
        path = tmp_path / "corpus" / f"{name}.wav"
        path.parent.mkdir(exist_ok=True)
        path.write_bytes(audio.encode_wav(clip))
        clips.append((name, path))
    return write_corpus_manifest(clips, tmp_path / "corpus" / "corpus.json")


def test_run_job_end_to_end(tmp_path):
    manifest = _corpus(tmp_path)
    job = PipelineJob(str(manifest), str(tmp_path / "out"), window_sec=6.0, workers=2)
    stats = run_job(job, mock_client(0))
    assert stats["segments"] == 3  # 12 s clip -> 2 windows; 8 s clip -> 1 (tail of 2 s dropped)
    think = load_records(tmp_path / "out" / "think")
    assert think and all(r.kind in ("cot_qa", "cot_caption") and r.think for r in think)
    stats_file = json.loads((tmp_path / "out" / "stats.json").read_text())
    assert stats_file["think"] == stats["think"]
    # a second run of the same job reproduces every shard byte for byte
    first = {p: p.read_bytes() for p in (tmp_path / "out").rglob("*.jsonl")}
    shutil.rmtree(tmp_path / "out")
    run_job(job, mock_client(0))
    second = {p: p.read_bytes() for p in (tmp_path / "out").rglob("*.jsonl")}
    assert first == second


def test_job_stage_order():
    with pytest.raises(InvalidArgument):
        PipelineJob("m.json", "out", stages=("filter", "create"))
    with pytest.raises(InvalidArgument):
        PipelineJob("m.json", "out", stages=("bogus",))


def test_provider_down_halts_create():
    client = ProviderClient(FailAfter(0), sleep=lambda s: None)
    with pytest.raises(PipelineHalted):
        create_caption_and_qa([], _extracted(1), client)
    with pytest.raises(ProviderUnavailable):
        client.send(ProviderRequest("transcriber", "transcribe", {}))
