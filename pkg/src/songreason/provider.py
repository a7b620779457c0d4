"""Client for the external models the annotation pipeline calls.

Requests name a role and a bundled prompt template; the client renders the
template, sends it through a transport (HTTP or the deterministic mock),
retries transient failures with exponential backoff and caches responses by
idempotency key in memory and, optionally, on disk.

HTTP wire protocol: ``POST <url>`` with ``Content-Type: application/json`` and
``Authorization: Bearer $SONGREASON_PROVIDER_TOKEN`` (omitted when unset).
Body ``{"role": ..., "prompt": ..., "audio": <base64 or null>}``; the reply
must be ``{"text": ...}``. Status 429 and 5xx are retried, other 4xx are not.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from string import Template

import numpy as np

from .errors import (InvalidArgument, MalformedVerdict, ProviderUnavailable, SongReasonError,
                     TemplateError, TransientProviderError)
from .records import MusicMetadata, parse_metadata

ROLES = ("captioner", "qa_generator", "cot_generator", "verifier", "transcriber")
TOKEN_ENV = "SONGREASON_PROVIDER_TOKEN"

# the six annotation prompts plus the auxiliary ones used by the verifier,
# transcriber and step-rewrite calls
TEMPLATE_IDS = ("detailed_caption", "qa_generation", "caption_correction",
                "option_augmentation", "cot_caption", "cot_qa",
                "short_caption", "transcribe", "verify_record", "verify_step",
                "rewrite_step", "difficulty")


def _load_templates() -> dict[str, str]:
    root = resources.files(__package__) / "templates"
    return {tid: (root / f"{tid}.txt").read_text(encoding="utf-8") for tid in TEMPLATE_IDS}


TEMPLATES = _load_templates()


def template_variables(template_id: str) -> set[str]:
    if template_id not in TEMPLATES:
        raise TemplateError(f"unknown template {template_id!r}")
    t = Template(TEMPLATES[template_id])
    return {m.group("named") or m.group("braced")
            for m in t.pattern.finditer(t.template) if m.group("named") or m.group("braced")}


def render_template(template_id: str, variables: dict) -> str:
    """Substitute ``variables`` into a bundled template.

    Every placeholder must be bound; extra variables are ignored.
    """
    missing = sorted(template_variables(template_id) - set(variables))
    if missing:
        raise TemplateError(f"template {template_id!r} missing variable(s): {', '.join(missing)}")
    return Template(TEMPLATES[template_id]).substitute({k: str(v) for k, v in variables.items()})


@dataclass(frozen=True)
class ProviderRequest:
    role: str
    prompt_template_id: str
    variables: dict = field(default_factory=dict)
    audio_ref: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidArgument(f"unknown role {self.role!r}")
        missing = template_variables(self.prompt_template_id) - set(self.variables)
        if missing:
            raise TemplateError(f"template {self.prompt_template_id!r} missing variable(s): "
                                f"{', '.join(sorted(missing))}")

    @property
    def idempotency_key(self) -> str:
        payload = json.dumps([self.role, self.prompt_template_id,
                              sorted((str(k), str(v)) for k, v in self.variables.items()),
                              self.audio_ref], ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def render(self) -> str:
        return render_template(self.prompt_template_id, self.variables)


@dataclass(frozen=True)
class ProviderResponse:
    text: str
    verdict: str | None = None
    latency_ms: float = 0.0
    cached: bool = False


def parse_verdict(text: str) -> str:
    """``yes``/``no`` from the first word of a verifier reply."""
    words = text.strip().split()
    word = words[0].strip(".,!:;\"'").lower() if words else ""
    if word not in ("yes", "no"):
        raise MalformedVerdict(f"verifier reply does not start with yes/no: {text[:40]!r}")
    return word


# --------------------------------------------------------------------------
# transports
# --------------------------------------------------------------------------

class HttpTransport:
    """Sends rendered prompts to a JSON endpoint (see module docstring)."""

    def __init__(self, url: str, timeout: float = 60.0, token: str | None = None):
        self.url = url
        self.timeout = timeout
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)

    def __call__(self, req: ProviderRequest) -> str:
        audio = None
        if req.audio_ref:
            audio = base64.b64encode(Path(req.audio_ref).read_bytes()).decode("ascii")
        body = json.dumps({"role": req.role, "prompt": req.render(), "audio": audio}).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        http_req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(http_req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransientProviderError(f"HTTP {exc.code}") from None
            raise ProviderUnavailable(f"HTTP {exc.code} from {self.url}") from None
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransientProviderError(str(exc)) from None
        except json.JSONDecodeError as exc:
            raise TransientProviderError(f"non-JSON reply: {exc}") from None
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise TransientProviderError("reply lacks a 'text' string")
        return payload["text"]


class DownTransport:
    """Always fails transiently; stands in for an unreachable endpoint."""

    def __init__(self):
        self.calls = 0

    def __call__(self, req: ProviderRequest) -> str:
        self.calls += 1
        raise TransientProviderError("endpoint unreachable")


_SHORT_PHRASES = (
    "A steady groove with a clear pulse and warm timbres.",
    "An energetic piece with bright, forward instruments.",
    "A calm excerpt with sustained tones and a gentle pulse.",
    "A rhythmic passage built on repeated percussive hits.",
    "A sparse arrangement with a simple harmonic bed.",
)
_DISTRACTORS = (
    "Audiobook narration excerpt", "Solo piano nocturne", "Heavy metal breakdown",
    "Field recording of rain", "Gregorian chant", "Drum and bass", "Bossa nova",
    "Marching band", "String quartet", "Dub reggae", "Ambient drone", "Polka",
    "Baroque harpsichord suite", "Trap beat", "Bluegrass breakdown", "Synthwave",
)
_SKILL_QUESTIONS = {
    "temporal": ("What is the approximate tempo of the excerpt?", "bpm"),
    "attribute": ("Which key is the excerpt in?", "key"),
    "harmonic": ("Which meter does the excerpt use?", "meter"),
    "lyric": ("Which description of the vocals fits the excerpt?", "vocals"),
    "comparative": ("Which statement matches the excerpt's overall tempo and key?", "both"),
}


def _stable_rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, int(key[:15], 16)])


def _metadata_of(req: ProviderRequest) -> MusicMetadata:
    text = req.variables.get("metadata", "")
    try:
        return parse_metadata(text) if text.strip() else MusicMetadata()
    except SongReasonError:
        return MusicMetadata()


def metadata_sentences(md: MusicMetadata) -> list[str]:
    """One plain sentence per populated category, quoting values verbatim."""
    out = []
    for attr in md.populated():
        value = md.category_text(attr)
        if attr == "bpm":
            out.append(f"The tempo sits at {value} BPM.")
        elif attr == "key":
            out.append(f"The piece is in {value}.")
        else:
            out.append(f"{attr.replace('_', ' ').capitalize()}: {value}.")
    for name, value in md.extras.items():
        out.append(f"{name}: {value}.")
    return out


class MockProvider:
    """Rule-driven offline stand-in for every role.

    The reply is a pure function of ``(seed, request)``:

    * captions echo the metadata block, one sentence per category, after a
      seeded stock sentence;
    * QA generation asks a skill-dependent question whose correct option is
      the metadata value;
    * option augmentation returns stock distractors (with one planted
      duplicate of the first current option, so callers must deduplicate);
    * CoT generation emits one sentence per metadata category;
    * verifier verdicts: ``no`` if ``reject_token`` occurs in the prompt,
      otherwise ``yes`` unless ``approve_token`` is set and absent; the
      difficulty template answers ``yes`` when more than ``hard_min_options - 1``
      options are listed; ``malformed_token`` makes the verifier reply garbage;
    * step rewrites delete ``reject_token`` from the step;
    * the transcriber returns ``lyrics.get(audio_ref, "")``.

    ``overrides`` maps a template id to ``f(request) -> str`` for tests that
    need other behaviour.
    """

    def __init__(self, seed: int = 0, approve_token: str | None = None,
                 reject_token: str | None = None, malformed_token: str | None = None,
                 hard_min_options: int = 7, lyrics: dict | None = None,
                 overrides: dict | None = None):
        self.seed = seed
        self.approve_token = approve_token
        self.reject_token = reject_token
        self.malformed_token = malformed_token
        self.hard_min_options = hard_min_options
        self.lyrics = dict(lyrics or {})
        self.overrides = dict(overrides or {})
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, req: ProviderRequest) -> str:
        with self._lock:
            self.calls += 1
        if req.prompt_template_id in self.overrides:
            return self.overrides[req.prompt_template_id](req)
        rng = _stable_rng(self.seed, req.idempotency_key)
        handler = getattr(self, "_" + req.prompt_template_id)
        return handler(req, rng)

    # captioner
    def _short_caption(self, req, rng):
        return _SHORT_PHRASES[int(rng.integers(len(_SHORT_PHRASES)))]

    def _detailed_caption(self, req, rng):
        md = _metadata_of(req)
        lead = _SHORT_PHRASES[int(rng.integers(len(_SHORT_PHRASES)))]
        return " ".join([lead] + metadata_sentences(md))

    def _caption_correction(self, req, rng):
        md = _metadata_of(req)
        text = " ".join(metadata_sentences(md))
        if req.variables.get("lyrics", "").strip():
            text += " The lyrics touch on: " + req.variables["lyrics"].strip().splitlines()[0] + "."
        return text

    # qa_generator
    def _qa_generation(self, req, rng):
        md = _metadata_of(req)
        skill = req.variables["skill"]
        n = int(req.variables.get("n_options", 4))
        kind = next((v for k, v in _SKILL_QUESTIONS.items() if k in skill.lower()),
                    ("Which genre best describes the excerpt?", "genre"))
        question, attr = kind
        bpm = md.category_text("bpm") or "100"
        key = md.key or "C major"
        if attr == "bpm":
            correct = f"{bpm} BPM"
            pool = [f"{int(float(bpm)) + d} BPM" for d in (-40, -20, 20, 40, 60, -30)]
        elif attr == "key":
            correct = key
            pool = ["C major", "G major", "D minor", "A minor", "E major", "F# minor", "B♭ major"]
        elif attr == "meter":
            correct = md.meter or "4/4"
            pool = ["3/4", "4/4", "6/8", "5/4", "7/8"]
        elif attr == "both":
            correct = f"{bpm} BPM in {key}"
            pool = [f"{int(float(bpm)) + d} BPM in {k}" for d, k in
                    ((20, "G major"), (-20, "A minor"), (40, "D minor"), (-30, "E major"))]
        elif attr == "vocals":
            correct = ", ".join(md.vocal_character) or "No vocals"
            pool = ["No vocals", "Male baritone lead", "Female soprano lead", "Children's choir",
                    "Rapped verses", "Spoken-word narration"]
        else:
            correct = md.genre or "Instrumental"
            pool = list(_DISTRACTORS)
        pool = [p for p in pool if p.lower() != correct.lower()]
        picks = [pool[i] for i in rng.permutation(len(pool))[:n - 1]]
        options = picks + [correct]
        order = rng.permutation(len(options))
        options = [options[i] for i in order]
        idx = options.index(correct)
        lines = [question] + [f"({chr(65 + i)}) {o}" for i, o in enumerate(options)]
        return "\n".join(lines + [f"Answer: ({chr(65 + idx)})"])

    def _option_augmentation(self, req, rng):
        n = int(req.variables["n_new"])
        current = [o.strip() for o in req.variables["options"].splitlines() if o.strip()]
        picks = [_DISTRACTORS[i] for i in rng.permutation(len(_DISTRACTORS))[:n]]
        if current:
            picks.insert(0, current[0].upper())
        return "\n".join(picks)

    # cot_generator
    def _cot_caption(self, req, rng):
        return " ".join(metadata_sentences(_metadata_of(req)) or ["The excerpt is short."])

    def _cot_qa(self, req, rng):
        steps = metadata_sentences(_metadata_of(req))
        steps.append(f"So the answer is {req.variables['answer']}.")
        return " ".join(steps)

    def _rewrite_step(self, req, rng):
        step = req.variables["step"]
        if self.reject_token:
            step = " ".join(step.replace(self.reject_token, " ").split())
        return step

    # transcriber
    def _transcribe(self, req, rng):
        return self.lyrics.get(req.audio_ref, "")

    # verifier
    def _verdict(self, req) -> str:
        prompt = req.render()
        if self.malformed_token and self.malformed_token in prompt:
            return "Perhaps."
        if self.reject_token and self.reject_token in prompt:
            return "No."
        if self.approve_token and self.approve_token not in prompt:
            return "No."
        return "Yes."

    def _verify_record(self, req, rng):
        return self._verdict(req)

    def _verify_step(self, req, rng):
        return self._verdict(req)

    def _difficulty(self, req, rng):
        n = len([o for o in req.variables["options"].splitlines() if o.strip()])
        if self.malformed_token and self.malformed_token in req.render():
            return "Perhaps."
        return "Yes." if n >= self.hard_min_options else "No."


# --------------------------------------------------------------------------
# client
# --------------------------------------------------------------------------

class ProviderClient:
    """Retrying, caching, concurrency-bounded front for a transport.

    ``transport(request) -> text`` raises :class:`TransientProviderError` for
    retryable failures. Attempts are spaced ``base_delay * factor**k`` seconds.
    """

    def __init__(self, transport, attempts: int = 5, base_delay: float = 1.0, factor: float = 2.0,
                 sleep=time.sleep, cache_dir=None, max_in_flight: int = 4):
        if attempts < 1 or max_in_flight < 1:
            raise InvalidArgument("attempts and max_in_flight must be >= 1")
        self.transport = transport
        self.attempts = attempts
        self.base_delay = base_delay
        self.factor = factor
        self.sleep = sleep
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.max_in_flight = max_in_flight
        self._cache: dict[str, str] = {}
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.hits = 0
        self.misses = 0

    def _cached(self, key: str) -> str | None:
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        if self.cache_dir is not None:
            path = self.cache_dir / f"{key}.json"
            if path.exists():
                text = json.loads(path.read_text(encoding="utf-8"))["text"]
                with self._lock:
                    self._cache[key] = text
                return text
        return None

    def _store(self, key: str, text: str) -> None:
        with self._lock:
            self._cache[key] = text
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = self.cache_dir / f"{key}.json.tmp"
            tmp.write_text(json.dumps({"text": text}, ensure_ascii=False), encoding="utf-8")
            tmp.replace(self.cache_dir / f"{key}.json")

    def _call(self, req: ProviderRequest) -> str:
        last = None
        for attempt in range(self.attempts):
            try:
                with self._slots:
                    return self.transport(req)
            except TransientProviderError as exc:
                last = exc
                if attempt + 1 < self.attempts:
                    self.sleep(self.base_delay * self.factor ** attempt)
        raise ProviderUnavailable(f"{req.role} gave up after {self.attempts} attempts: {last}")

    def send(self, req: ProviderRequest) -> ProviderResponse:
        key = req.idempotency_key
        text = self._cached(key)
        cached = text is not None
        start = time.perf_counter()
        if cached:
            with self._lock:
                self.hits += 1
        else:
            text = self._call(req)
            self._store(key, text)
            with self._lock:
                self.misses += 1
        latency = (time.perf_counter() - start) * 1000.0
        verdict = parse_verdict(text) if req.role == "verifier" else None
        return ProviderResponse(text, verdict, latency, cached)

    def send_many(self, requests, workers: int | None = None) -> list:
        """Send all requests; results follow input order.

        A failed request yields its exception object in place of a response,
        so callers decide per item what is fatal.
        """
        requests = list(requests)

        def one(r):
            try:
                return self.send(r)
            except (ProviderUnavailable, MalformedVerdict) as exc:
                return exc

        workers = workers or self.max_in_flight
        if workers <= 1 or len(requests) <= 1:
            return [one(r) for r in requests]
        with ThreadPoolExecutor(max_workers=min(workers, len(requests))) as pool:
            return list(pool.map(one, requests))

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def mock_client(seed: int = 0, **kw) -> ProviderClient:
    """Client over a :class:`MockProvider` with zero retry delay."""
    return ProviderClient(MockProvider(seed, **kw), sleep=lambda s: None)
