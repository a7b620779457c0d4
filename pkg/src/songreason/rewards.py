"""Rule-based rewards for GRPO: format, accuracy and structured thinking.

A response is well-formed when, after trimming, it is exactly
``<think>BODY</think>`` followed (optionally after whitespace) by
``<answer>BODY</answer>``: each tag occurs once, both bodies contain a
non-whitespace character, and nothing sits outside the two blocks.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass

from .errors import ExtractionError, InvalidArgument
from .records import MusicMetadata

TAGS = ("<think>", "</think>", "<answer>", "</answer>")
_FORMAT_RE = re.compile(r"<think>(.*)</think>\s*<answer>(.*)</answer>", re.DOTALL)
_MCQ_RE = re.compile(r"^\(\s*([a-z])\s*\)")
_TERMINAL_PUNCT = ".,!?;:"

STOP_WORDS = frozenset("""
a an the and or but nor of in on at to for with by from as is are was were be
it its this that into over than then
""".split())
assert len(STOP_WORDS) == 30

_TOKEN_RE = re.compile(r"[^\s,;:.!?()\[\]{}\"“”]+")


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    accuracy: int | None = None
    structured: float | None = None

    @property
    def total(self) -> float:
        extra = self.accuracy if self.accuracy is not None else (self.structured or 0.0)
        return self.format + extra

    def to_dict(self) -> dict:
        return {"format": self.format, "accuracy": self.accuracy,
                "structured": self.structured, "total": self.total}


def _split(output: str):
    text = output.strip()
    if any(text.count(tag) != 1 for tag in TAGS):
        return None
    m = _FORMAT_RE.fullmatch(text)
    if m is None or not m.group(1).strip() or not m.group(2).strip():
        return None
    return m.group(1), m.group(2)


def format_reward(output: str) -> int:
    return 0 if _split(output) is None else 1


def extract_answer(output: str) -> str:
    """The answer-tag body, verbatim. Requires a well-formed response."""
    parts = _split(output)
    if parts is None:
        raise ExtractionError("response does not follow the <think>/<answer> structure")
    return parts[1]


def normalize_answer(text: str) -> str:
    text = " ".join(unicodedata.normalize("NFC", text).lower().split())
    return text.rstrip(_TERMINAL_PUNCT).rstrip()


def accuracy_reward(predicted: str, gold: str) -> int:
    """Exact match after normalisation; a bare letter also matches an ``(X) ...`` gold."""
    p, g = normalize_answer(predicted), normalize_answer(gold)
    if p == g:
        return 1
    m = _MCQ_RE.match(g)
    return int(m is not None and len(p) == 1 and p == m.group(1))


def content_words(text: str) -> list[str]:
    """Lower-cased tokens with at least one alphanumeric character, stop words removed."""
    text = unicodedata.normalize("NFC", text).lower()
    return [t for t in _TOKEN_RE.findall(text)
            if any(ch.isalnum() for ch in t) and t not in STOP_WORDS]


def category_match(caption_words: set, metadata: MusicMetadata, category: str) -> float | None:
    """Fraction of the category's distinct content words present in the caption.

    Returns None for a category with no usable words (it is then not counted).
    """
    if category == "bpm":
        return float(str(int(round(metadata.bpm))) in caption_words)
    words = set(content_words(metadata.category_text(category)))
    if not words:
        return None
    return min(1.0, len(words & caption_words) / len(words))


def structured_thinking_reward(caption: str, metadata: MusicMetadata) -> float:
    """Mean per-category word overlap between a caption and ground-truth metadata."""
    cats = metadata.populated()
    if not cats:
        raise InvalidArgument("metadata has no populated category")
    caption_words = set(content_words(caption))
    scores = [s for s in (category_match(caption_words, metadata, c) for c in cats) if s is not None]
    if not scores:
        raise InvalidArgument("metadata has no content words")
    return sum(scores) / len(scores)


@dataclass(frozen=True)
class QATask:
    gold: str


@dataclass(frozen=True)
class CaptionTask:
    metadata: MusicMetadata


def total_reward(output: str, task) -> RewardBreakdown:
    """Format reward plus accuracy (QA) or structured thinking (caption), gated on format."""
    fmt = format_reward(output)
    if isinstance(task, QATask):
        acc = accuracy_reward(extract_answer(output), task.gold) if fmt else 0
        return RewardBreakdown(fmt, accuracy=acc)
    if isinstance(task, CaptionTask):
        st = structured_thinking_reward(extract_answer(output), task.metadata) if fmt else 0.0
        return RewardBreakdown(fmt, structured=st)
    raise InvalidArgument(f"unknown task type {type(task).__name__}")


def task_for_record(record) -> QATask | CaptionTask:
    if record.kind in ("qa", "cot_qa"):
        return QATask(record.target)
    return CaptionTask(record.metadata)


def score_predictions(predictions, records) -> list[dict]:
    """Join ``{"record_id", "output"}`` rows with records and score each.

    Output rows keep prediction order; unknown ids raise.
    """
    by_id = {r.record_id: r for r in records}
    out = []
    for row in predictions:
        rid = row["record_id"]
        if rid not in by_id:
            raise InvalidArgument(f"prediction for unknown record {rid!r}")
        br = total_reward(row["output"], task_for_record(by_id[rid]))
        out.append({"record_id": rid, **br.to_dict()})
    return out


def read_predictions(data: bytes) -> list[dict]:
    return [json.loads(line) for line in data.decode("utf-8").split("\n") if line.strip()]
