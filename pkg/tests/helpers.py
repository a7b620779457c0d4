"""Shared fixtures: the Americana box text and random record generators."""

import numpy as np
from hypothesis import strategies as st

from songreason.records import (AudioRef, AuditEntry, DatasetRecord, MusicMetadata,
                                SourceSegment)

AMERICANA_BOX = (
    "{``Genre'': Americana, ``BPM'': 125, ``Key'': G minor, ``Meter'': 4/4, "
    "``Structure'': Intro, Verse, Verse, Bridge, Solo, Chorus, Outro, "
    "``Instruments'': fingerstyle acoustic guitar, banjo, mandolin, spoken-word voice, "
    "``Vocal Character'': male spoken-word, deep resonant timbre, clear/deliberate, light reverb, "
    "``Lyric Themes'': forgiveness, humility, spiritual prayer, desert frontier, betrayal, "
    "outlaw narrative, "
    "``Theory'': G minor center; modal interchange with relative major; F#aug → Eb6 → D7 "
    "resolution; Gmaj7/G7 brighten prayer sections, "
    "``Mix Notes'': high-fidelity organic; wide natural stereo panning; minimal reverb; warm, "
    "clear, light compression; close-mic intimacy, "
    "``Dynamics'': bridge increases harmonic rhythm/urgency.}"
)

KEYS = [f"{t} {m}" for t in ("C", "C#", "Db", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B")
        for m in ("major", "minor")]
_WORDS = ["warm", "bright", "guitar", "piano", "verse", "chorus", "ballad", "jazz", "drums",
          "synth", "ünïcödé", "naïve", "東京", "emoji 🎵", 'quote "x"', "back\\slash", "tab\tx",
          "new\nline", ""]


def _text(rng, lo=0, hi=6) -> str:
    return " ".join(rng.choice(_WORDS, size=int(rng.integers(lo, hi))))


def random_metadata(rng) -> MusicMetadata:
    maybe = lambda p=0.5: rng.random() < p  # noqa: E731
    kw = {"genre": _text(rng, 1, 3) or "rock"}
    if maybe():
        kw["bpm"] = float(rng.choice([rng.integers(40, 241), round(rng.uniform(40, 240), 3)]))
    if maybe():
        kw["key"] = str(rng.choice(KEYS))
    if maybe():
        kw["meter"] = str(rng.choice(["3/4", "4/4", "6/8"]))
    for name in ("structure", "instruments", "vocal_character", "lyric_themes"):
        if maybe():
            kw[name] = tuple(_text(rng, 1, 3) for _ in range(rng.integers(1, 4)))
    for name in ("theory", "mix_notes", "dynamics", "lyrics"):
        if maybe(0.3):
            kw[name] = _text(rng, 1, 8)
    if maybe():
        kw["source_segment"] = SourceSegment(f"clip{rng.integers(1000)}", float(rng.integers(0, 20) * 30))
    if maybe(0.2):
        kw["extras"] = {"Subgenre": _text(rng, 1, 3), "Chords": "C:maj A:min"}
    return MusicMetadata(**kw)


def _nonblank(text: str, fallback: str) -> str:
    return text if text.strip() else fallback


def random_record(rng, index: int) -> DatasetRecord:
    kind = str(rng.choice(["caption", "qa", "cot_caption", "cot_qa"]))
    options = answer = None
    if kind in ("qa", "cot_qa"):
        options = tuple(_text(rng, 1, 3) for _ in range(rng.integers(1, 9)))
        answer = int(rng.integers(len(options)))
    audit = tuple(AuditEntry(str(s), bool(rng.random() < 0.8), _text(rng, 0, 3))
                  for s in rng.choice(["synthesize", "extract", "create", "filter", "think"],
                                      size=int(rng.integers(0, 4))))
    return DatasetRecord(
        record_id=f"r{index:06d}",
        kind=kind,
        audio_ref=AudioRef(f"audio/clip{index % 97}.wav", float(rng.uniform(0, 600))),
        prompt=_text(rng, 0, 10),
        target=_nonblank(_text(rng, 1, 10), "answer"),
        metadata=random_metadata(rng),
        options=options,
        answer_index=answer,
        think=_nonblank(_text(rng, 1, 12), "step") if kind.startswith("cot") else None,
        stage_audit=audit,
        parent_id=f"r{index - 1:06d}" if rng.random() < 0.3 else None,
        skill=str(rng.choice(["a) Temporal understanding", "e) Comparative"])) if rng.random() < 0.3 else None,
    )


def random_records(n: int, seed: int = 0) -> list[DatasetRecord]:
    rng = np.random.default_rng(seed)
    return [random_record(rng, i) for i in range(n)]


# hypothesis counterparts ----------------------------------------------------

safe_text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=20)
word_list = st.lists(safe_text.filter(lambda s: bool(s.strip())), max_size=4).map(tuple)


@st.composite
def metadata_strategy(draw):
    return MusicMetadata(
        genre=draw(safe_text.filter(lambda s: bool(s.strip()))),
        bpm=draw(st.none() | st.floats(40, 240)),
        key=draw(st.none() | st.sampled_from(KEYS)),
        meter=draw(st.none() | st.sampled_from(["3/4", "4/4"])),
        structure=draw(word_list),
        instruments=draw(word_list),
        vocal_character=draw(word_list),
        lyric_themes=draw(word_list),
        theory=draw(st.none() | safe_text),
        mix_notes=draw(st.none() | safe_text),
        dynamics=draw(st.none() | safe_text),
        lyrics=draw(st.none() | safe_text),
        source_segment=draw(st.none() | st.builds(SourceSegment, safe_text,
                                                  st.floats(0, 1e6, allow_nan=False))),
        extras=draw(st.dictionaries(safe_text, safe_text, max_size=3)),
    )


@st.composite
def record_strategy(draw):
    kind = draw(st.sampled_from(["caption", "qa", "cot_caption", "cot_qa"]))
    options = answer = None
    if kind in ("qa", "cot_qa"):
        options = tuple(draw(st.lists(safe_text, min_size=1, max_size=6)))
        answer = draw(st.integers(0, len(options) - 1))
    nonblank = safe_text.filter(lambda s: bool(s.strip()))
    return DatasetRecord(
        record_id=draw(nonblank),
        kind=kind,
        audio_ref=AudioRef(draw(safe_text), draw(st.floats(0, 1e6, allow_nan=False))),
        prompt=draw(safe_text),
        target=draw(nonblank),
        metadata=draw(metadata_strategy()),
        options=options,
        answer_index=answer,
        think=draw(nonblank) if kind.startswith("cot") else draw(st.none() | safe_text),
        stage_audit=tuple(draw(st.lists(st.builds(AuditEntry, safe_text, st.booleans(), safe_text),
                                        max_size=3))),
        parent_id=draw(st.none() | safe_text),
        skill=draw(st.none() | safe_text),
    )
