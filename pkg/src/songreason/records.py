"""Structured music metadata and dataset records, plus their JSONL format.

On disk every record is one JSON object per line, keys in the fixed order
of :data:`RECORD_KEYS` / :data:`METADATA_KEYS`. Metadata may also be read
from the brace-delimited ``{"Genre": Americana, "BPM": 125, ...}`` form that
annotation LLMs emit.
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import EmptyRecord, ParseError, ValidationError

# display name -> attribute, in canonical order
CATEGORY_NAMES = {
    "Genre": "genre",
    "BPM": "bpm",
    "Key": "key",
    "Meter": "meter",
    "Structure": "structure",
    "Instruments": "instruments",
    "Vocal Character": "vocal_character",
    "Lyric Themes": "lyric_themes",
    "Theory": "theory",
    "Mix Notes": "mix_notes",
    "Dynamics": "dynamics",
}
CATEGORIES = tuple(CATEGORY_NAMES.values())
LIST_FIELDS = frozenset({"structure", "instruments", "vocal_character", "lyric_themes"})
METADATA_KEYS = CATEGORIES + ("lyrics", "source_segment", "extras")

RECORD_KINDS = ("caption", "qa", "cot_caption", "cot_qa")
RECORD_KEYS = (
    "record_id", "parent_id", "kind", "skill", "audio_ref", "prompt", "target",
    "options", "answer_index", "think", "metadata", "stage_audit",
)

_ALIASES = {
    "lyrics": "lyrics",
    "lyric": "lyrics",
    "tempo": "bpm",
    "time signature": "meter",
    "instrumentation": "instruments",
    "vocals": "vocal_character",
    "themes": "lyric_themes",
    "mix": "mix_notes",
}

_TONICS = {
    "c": 0, "c#": 1, "db": 1, "d": 2, "d#": 3, "eb": 3, "e": 4, "fb": 4, "e#": 5, "f": 5,
    "f#": 6, "gb": 6, "g": 7, "g#": 8, "ab": 8, "a": 9, "a#": 10, "bb": 10, "b": 11, "cb": 11,
}
_KEY_RE = re.compile(r"^\s*([A-Ga-g])\s*([#♯b♭]?)\s*(major|minor|maj|min|m)?\b", re.IGNORECASE)


def parse_key(text: str) -> tuple[int, str]:
    """``"G minor"`` -> ``(7, "minor")``; raises ValueError if unparseable."""
    m = _KEY_RE.match(text or "")
    if not m:
        raise ValueError(f"unrecognised key {text!r}")
    acc = m.group(2).replace("♯", "#").replace("♭", "b")
    tonic = _TONICS[m.group(1).lower() + acc]
    mode = (m.group(3) or "major").lower()
    return tonic, "minor" if mode in ("minor", "min", "m") else "major"


def _canonical_category(name: str) -> str | None:
    norm = " ".join(name.replace("_", " ").split()).lower()
    for display, attr in CATEGORY_NAMES.items():
        if norm == display.lower():
            return attr
    return _ALIASES.get(norm)


@dataclass(frozen=True)
class SourceSegment:
    clip_id: str
    offset: float = 0.0


@dataclass(frozen=True)
class MusicMetadata:
    genre: str | None = None
    bpm: float | None = None
    key: str | None = None
    meter: str | None = None
    structure: tuple[str, ...] = ()
    instruments: tuple[str, ...] = ()
    vocal_character: tuple[str, ...] = ()
    lyric_themes: tuple[str, ...] = ()
    theory: str | None = None
    mix_notes: str | None = None
    dynamics: str | None = None
    lyrics: str | None = None
    source_segment: SourceSegment | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in LIST_FIELDS:
            value = getattr(self, name)
            if isinstance(value, str):
                value = _split_list(value)
            object.__setattr__(self, name, tuple(value))
        if self.bpm is not None:
            object.__setattr__(self, "bpm", float(self.bpm))

    def populated(self) -> list[str]:
        """Names of the box categories carrying a value, in canonical order."""
        return [c for c in CATEGORIES if _is_set(getattr(self, c))]

    def category_text(self, name: str) -> str:
        value = getattr(self, name)
        if name == "bpm":
            return _format_bpm(value)
        if isinstance(value, tuple):
            return ", ".join(value)
        return value or ""

    def validate(self) -> None:
        if self.bpm is not None and not 40.0 <= self.bpm <= 240.0:
            raise ValidationError("metadata.bpm", f"{self.bpm} outside [40, 240]")
        if self.key is not None:
            try:
                parse_key(self.key)
            except ValueError as exc:
                raise ValidationError("metadata.key", str(exc)) from None
        if not self.populated() and not self.lyrics and self.source_segment is None and not self.extras:
            raise ValidationError("metadata", "no populated category")

    def to_block(self) -> str:
        """Render in the brace form accepted by :func:`parse_metadata`."""
        parts = [f'"{disp}": {self.category_text(attr)}' for disp, attr in CATEGORY_NAMES.items()
                 if _is_set(getattr(self, attr))]
        parts += [f'"{k}": {v}' for k, v in self.extras.items()]
        return "{" + ", ".join(parts) + "}"


def _is_set(value) -> bool:
    if value is None:
        return False
    if isinstance(value, (str, tuple, list)):
        return bool(value) and (not isinstance(value, str) or bool(value.strip()))
    return True


def _format_bpm(bpm) -> str:
    if bpm is None:
        return ""
    return str(int(bpm)) if float(bpm).is_integer() else repr(float(bpm))


def _split_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


@dataclass(frozen=True)
class AudioRef:
    path: str
    offset: float = 0.0


@dataclass(frozen=True)
class AuditEntry:
    stage: str
    passed: bool
    note: str = ""


@dataclass(frozen=True)
class DatasetRecord:
    record_id: str
    kind: str
    audio_ref: AudioRef
    prompt: str
    target: str
    metadata: MusicMetadata
    options: tuple[str, ...] | None = None
    answer_index: int | None = None
    think: str | None = None
    stage_audit: tuple[AuditEntry, ...] = ()
    parent_id: str | None = None
    skill: str | None = None

    def __post_init__(self):
        if self.options is not None:
            object.__setattr__(self, "options", tuple(self.options))
        object.__setattr__(self, "stage_audit", tuple(self.stage_audit))

    def validate(self) -> None:
        if not self.record_id:
            raise ValidationError("record_id", "empty")
        if self.kind not in RECORD_KINDS:
            raise ValidationError("kind", f"{self.kind!r} not one of {RECORD_KINDS}")
        if not self.target or not self.target.strip():
            raise ValidationError("target", "empty")
        if self.kind == "qa" or (self.kind == "cot_qa" and self.options is not None):
            if not self.options:
                raise ValidationError("options", "QA record needs options")
            if self.answer_index is None or not 0 <= self.answer_index < len(self.options):
                raise ValidationError("answer_index", f"{self.answer_index} out of range")
        elif self.answer_index is not None and (
                not self.options or not 0 <= self.answer_index < len(self.options)):
            raise ValidationError("answer_index", f"{self.answer_index} out of range")
        if self.kind in ("cot_caption", "cot_qa") and not (self.think and self.think.strip()):
            raise ValidationError("think", "CoT record needs a non-empty trace")
        self.metadata.validate()

    def audited(self, stage: str, passed: bool, note: str = "") -> DatasetRecord:
        return replace(self, stage_audit=self.stage_audit + (AuditEntry(stage, passed, note),))


# --------------------------------------------------------------------------
# brace / JSON metadata text
# --------------------------------------------------------------------------

_OPEN_Q = r"(?:``|\"|“|')"
_CLOSE_Q = r"(?:''|\"|”|')"
_KEY_PATTERN = re.compile(_OPEN_Q + r"\s*([A-Za-z][A-Za-z _-]*?)\s*" + _CLOSE_Q + r"\s*:")


def _check_balanced(text: str) -> None:
    pairs = {"}": "{", "]": "[", ")": "("}
    stack = []
    for ch in text:
        if ch in "{[(":
            stack.append(ch)
        elif ch in pairs:
            if not stack or stack.pop() != pairs[ch]:
                raise ParseError(f"unbalanced {ch!r}")
    if stack:
        raise ParseError(f"unclosed {stack[-1]!r}")


def parse_metadata(text: str) -> MusicMetadata:
    """Parse a metadata block (JSON object or the looser brace form).

    Category names match case-insensitively; anything unrecognised lands in
    ``extras``. BPM keeps only its leading number.
    """
    text = unicodedata.normalize("NFC", text).strip()
    if not text.startswith("{") or not text.endswith("}"):
        raise ParseError("metadata must be enclosed in braces")
    _check_balanced(text)
    try:
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ParseError("metadata JSON must be an object")
        items = list(raw.items())
    except json.JSONDecodeError:
        body = text[1:-1]
        matches = list(_KEY_PATTERN.finditer(body))
        if not matches and body.strip():
            raise ParseError("no category:value pairs found") from None
        items = []
        for i, m in enumerate(matches):
            end = matches[i + 1].start() if i + 1 < len(matches) else len(body)
            value = body[m.end():end].strip().rstrip(",").strip()
            if value[:1] in "\"“" and value[-1:] in "\"”" and len(value) >= 2:
                value = value[1:-1]
            items.append((m.group(1), value))
    return _metadata_from_items(items)


def _metadata_from_items(items) -> MusicMetadata:
    kwargs: dict = {}
    extras: dict = {}
    for name, value in items:
        attr = _canonical_category(str(name))
        if attr is None:
            extras[str(name)] = value if isinstance(value, str) else json.dumps(value)
            continue
        if value is None or (isinstance(value, str) and not value.strip()):
            continue
        if attr == "bpm":
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                kwargs["bpm"] = float(value)
            else:
                m = re.match(r"\s*(\d+(?:\.\d+)?)", str(value))
                if not m:
                    raise ParseError(f"BPM value {value!r} has no leading number")
                kwargs["bpm"] = float(m.group(1))
        elif attr in LIST_FIELDS:
            kwargs[attr] = _split_list(value) if isinstance(value, str) else tuple(str(v) for v in value)
        else:
            kwargs[attr] = value if isinstance(value, str) else json.dumps(value)
    if not kwargs and not extras:
        raise EmptyRecord("no recognisable metadata categories")
    return MusicMetadata(extras=extras, **kwargs)


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------

def metadata_to_dict(md: MusicMetadata) -> dict:
    out = {}
    for k in METADATA_KEYS:
        v = getattr(md, k)
        if k in LIST_FIELDS:
            v = list(v)
        elif k == "source_segment" and v is not None:
            v = {"clip_id": v.clip_id, "offset": v.offset}
        elif k == "extras":
            v = dict(v)
        out[k] = v
    return out


def metadata_from_dict(d: dict) -> MusicMetadata:
    unknown = set(d) - set(METADATA_KEYS)
    if unknown:
        raise ValidationError("metadata", f"unknown keys {sorted(unknown)}")
    kw = dict(d)
    src = kw.get("source_segment")
    if src is not None:
        kw["source_segment"] = SourceSegment(src["clip_id"], float(src["offset"]))
    kw["extras"] = dict(kw.get("extras") or {})
    for name in LIST_FIELDS:
        kw[name] = tuple(kw.get(name) or ())
    return MusicMetadata(**kw)


def record_to_dict(r: DatasetRecord) -> dict:
    return {
        "record_id": r.record_id,
        "parent_id": r.parent_id,
        "kind": r.kind,
        "skill": r.skill,
        "audio_ref": {"path": r.audio_ref.path, "offset": r.audio_ref.offset},
        "prompt": r.prompt,
        "target": r.target,
        "options": list(r.options) if r.options is not None else None,
        "answer_index": r.answer_index,
        "think": r.think,
        "metadata": metadata_to_dict(r.metadata),
        "stage_audit": [[a.stage, a.passed, a.note] for a in r.stage_audit],
    }


def record_from_dict(d: dict) -> DatasetRecord:
    unknown = set(d) - set(RECORD_KEYS)
    if unknown:
        raise ValidationError("record", f"unknown keys {sorted(unknown)}")
    try:
        ref = d["audio_ref"]
        return DatasetRecord(
            record_id=d["record_id"],
            parent_id=d.get("parent_id"),
            kind=d["kind"],
            skill=d.get("skill"),
            audio_ref=AudioRef(ref["path"], float(ref["offset"])),
            prompt=d["prompt"],
            target=d["target"],
            options=tuple(d["options"]) if d.get("options") is not None else None,
            answer_index=d.get("answer_index"),
            think=d.get("think"),
            metadata=metadata_from_dict(d["metadata"]),
            stage_audit=tuple(AuditEntry(s, bool(p), n) for s, p, n in d.get("stage_audit", ())),
        )
    except KeyError as exc:
        raise ValidationError(str(exc.args[0]), "missing") from None


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def serialize_records(records) -> bytes:
    """JSONL bytes; every record is validated first."""
    lines = []
    for r in records:
        r.validate()
        lines.append(_dumps(record_to_dict(r)) + "\n")
    return "".join(lines).encode("utf-8")


def parse_records(data: bytes) -> list[DatasetRecord]:
    out = []
    for lineno, line in enumerate(data.decode("utf-8").split("\n"), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        out.append(record_from_dict(obj))
    return out


def serialize_metadata(items) -> bytes:
    return "".join(_dumps(metadata_to_dict(m)) + "\n" for m in items).encode("utf-8")


def parse_metadata_lines(data: bytes) -> list[MusicMetadata]:
    return [metadata_from_dict(json.loads(line)) for line in data.decode("utf-8").split("\n") if line.strip()]


# --------------------------------------------------------------------------
# shards
# --------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def write_shards(records, out_dir, shard_size: int = 10000, prefix: str = "shard") -> Path:
    """Write ``records`` as numbered JSONL shards plus a manifest; returns the manifest path.

    The manifest lists every shard's relative path, record count and sha256.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    shards = []
    for i in range(0, max(len(records), 1), shard_size):
        chunk = records[i:i + shard_size]
        if not chunk and shards:
            break
        data = serialize_records(chunk)
        name = f"{prefix}-{len(shards):05d}.jsonl"
        (out_dir / name).write_bytes(data)
        shards.append({"path": name, "records": len(chunk), "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {"format": "songreason.records/1", "total": len(records), "shards": shards}
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path, verify: bool = True) -> list[DatasetRecord]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    out = []
    for shard in manifest["shards"]:
        data = (path.parent / shard["path"]).read_bytes()
        if verify and hashlib.sha256(data).hexdigest() != shard["sha256"]:
            raise ValidationError(shard["path"], "content hash mismatch")
        recs = parse_records(data)
        if verify and len(recs) != shard["records"]:
            raise ValidationError(shard["path"], "record count mismatch")
        out.extend(recs)
    return out


def load_records(path) -> list[DatasetRecord]:
    """Records from a manifest, a directory holding one, or a single JSONL file."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if path.name == MANIFEST_NAME:
        return read_manifest(path)
    return parse_records(path.read_bytes())
