"""Low-level music metadata from raw audio.

Classical MIR estimators standing in for the beat/key/chord tools of a
production annotation pipeline:

* tempo from the autocorrelation of a spectral-flux onset envelope, with
  dynamic-programming beat tracking,
* key by correlating mean chroma against Krumhansl-Kessler profiles,
* chords by template matching smoothed with Viterbi decoding,
* meter by comparing accent contrast of 3- and 4-beat groupings.

Everything works at the clip's native sample rate. STFT sizes are the
44.1 kHz reference values (2048/512) scaled by ``sample_rate / 44100``.
"""

from __future__ import annotations

import io
import math
import wave
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    DecodeError,
    InsufficientAudio,
    InvalidArgument,
    NoPeriodicity,
    NoTonalContent,
    UnsupportedFormat,
)

REFERENCE_RATE = 44100
REFERENCE_WINDOW = 2048
REFERENCE_HOP = 512

PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

# Krumhansl & Kessler (1982) probe-tone profiles, tonic first.
KK_MAJOR = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88])
KK_MINOR = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17])

MIN_BPM, MAX_BPM = 40.0, 240.0
PREFERRED_BAND = (70.0, 160.0)
OCTAVE_MARGIN = 0.10
CHORD_SELF_BONUS = 2.0
NO_CHORD = "N"


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    offset: float = 0.0
    clip_id: str = ""

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise InvalidArgument("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgument("samples must be finite")
        if not 8000 <= int(self.sample_rate) <= 192000:
            raise InvalidArgument(f"sample_rate {self.sample_rate} outside 8000..192000")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class OnsetEnvelope:
    values: np.ndarray
    frame_rate: float

    @property
    def duration(self) -> float:
        return self.values.size / self.frame_rate


@dataclass(frozen=True)
class Chromagram:
    frames: np.ndarray  # (n_frames, 12)
    frame_rate: float
    duration: float = 0.0


@dataclass(frozen=True)
class TempoEstimate:
    bpm: float
    confidence: float
    beat_times: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class KeyEstimate:
    tonic: int
    mode: str
    correlation: float

    @property
    def name(self) -> str:
        return f"{PITCH_CLASSES[self.tonic]} {self.mode}"


@dataclass(frozen=True)
class ChordSegment:
    label: str
    start: float
    end: float


@dataclass(frozen=True)
class MeterEstimate:
    meter: str
    low_confidence: bool = False


# --------------------------------------------------------------------------
# decoding and segmentation
# --------------------------------------------------------------------------

def decode_wav(data: bytes) -> AudioClip:
    """Decode a RIFF/WAVE byte string (PCM16 or float32, 1-2 channels) to mono."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("not a RIFF/WAVE container")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = int.from_bytes(data[pos + 4:pos + 8], "little")
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("truncated fmt chunk")
            fmt = (
                int.from_bytes(body[0:2], "little"),
                int.from_bytes(body[2:4], "little"),
                int.from_bytes(body[4:8], "little"),
                int.from_bytes(body[14:16], "little"),
            )
            if fmt[0] == 0xFFFE and len(body) >= 26:  # WAVE_FORMAT_EXTENSIBLE
                fmt = (int.from_bytes(body[24:26], "little"),) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise DecodeError("missing fmt or data chunk")
    codec, channels, rate, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedFormat(f"{channels} channels")
    if codec == 1 and bits == 16:
        raw = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif codec == 3 and bits == 32:
        raw = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormat(f"codec {codec} with {bits} bits per sample")
    raw = raw[: raw.size // channels * channels].reshape(-1, channels)
    if raw.shape[0] == 0:
        raise DecodeError("no audio frames")
    mono = np.clip(raw.mean(axis=1), -1.0, 1.0)
    try:
        return AudioClip(mono, rate)
    except InvalidArgument as exc:
        raise DecodeError(str(exc)) from exc


def encode_wav(clip: AudioClip, float32: bool = False) -> bytes:
    """Inverse of :func:`decode_wav` for mono clips."""
    buf = io.BytesIO()
    if float32:
        pcm = clip.samples.astype("<f4").tobytes()
        fmt = (3).to_bytes(2, "little") + (1).to_bytes(2, "little")
        fmt += clip.sample_rate.to_bytes(4, "little") + (clip.sample_rate * 4).to_bytes(4, "little")
        fmt += (4).to_bytes(2, "little") + (32).to_bytes(2, "little")
        buf.write(b"RIFF" + (4 + 8 + len(fmt) + 8 + len(pcm)).to_bytes(4, "little") + b"WAVE")
        buf.write(b"fmt " + len(fmt).to_bytes(4, "little") + fmt)
        buf.write(b"data" + len(pcm).to_bytes(4, "little") + pcm)
        return buf.getvalue()
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def segment(clip: AudioClip, window_sec: float = 30.0, hop_sec: float | None = None) -> list[AudioClip]:
    """Cut ``clip`` into windows; a trailing partial window survives only if more than half full."""
    if hop_sec is None:
        hop_sec = window_sec
    if window_sec <= 0 or hop_sec <= 0:
        raise InvalidArgument("window and hop must be positive")
    if hop_sec > window_sec:
        raise InvalidArgument("hop must not exceed window")
    sr = clip.sample_rate
    win = int(round(window_sec * sr))
    hop = int(round(hop_sec * sr))
    n = len(clip)
    out = []
    start = 0
    while start < n:
        piece = clip.samples[start:start + win]
        if piece.size < win and piece.size * 2 <= win:
            break
        out.append(AudioClip(piece, sr, offset=clip.offset + start / sr, clip_id=clip.clip_id))
        if start + win >= n:
            break
        start += hop
    return out


# --------------------------------------------------------------------------
# spectral front end
# --------------------------------------------------------------------------

def stft_params(sample_rate: int) -> tuple[int, int]:
    scale = sample_rate / REFERENCE_RATE
    return max(16, int(round(REFERENCE_WINDOW * scale))), max(4, int(round(REFERENCE_HOP * scale)))


def stft_magnitude(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Hann-windowed magnitude spectrogram, shape (frames, n_fft // 2 + 1).

    The signal is zero-padded by half a window on each side so frame ``t``
    is centred on sample ``t * hop``.
    """
    pad = n_fft // 2
    x = np.concatenate([np.zeros(pad), samples, np.zeros(pad)])
    n_frames = 1 + (x.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(n_fft)[None, :]
    return np.abs(np.fft.rfft(frames, axis=1))


def onset_envelope(clip: AudioClip, compression: float = 100.0) -> OnsetEnvelope:
    """Half-wave-rectified spectral flux of the log-compressed STFT magnitude."""
    if clip.duration < 1.0:
        raise InsufficientAudio(f"need >= 1 s of audio, got {clip.duration:.3f} s")
    n_fft, hop = stft_params(clip.sample_rate)
    mag = stft_magnitude(clip.samples, n_fft, hop)
    logmag = np.log1p(compression * mag)
    flux = _kernels.spectral_flux(np.ascontiguousarray(logmag))
    return OnsetEnvelope(flux, clip.sample_rate / hop)


def chromagram(clip: AudioClip, fmin: float = 55.0, fmax: float = 5000.0) -> Chromagram:
    """Fold STFT power onto the 12 equal-tempered pitch classes (A4 = 440 Hz)."""
    if clip.duration < 0.5:
        raise InsufficientAudio(f"need >= 0.5 s of audio, got {clip.duration:.3f} s")
    n_fft, hop = stft_params(clip.sample_rate)
    power = stft_magnitude(clip.samples, n_fft, hop) ** 2
    freqs = np.fft.rfftfreq(n_fft, 1.0 / clip.sample_rate)
    use = (freqs >= fmin) & (freqs <= min(fmax, clip.sample_rate / 2))
    midi = 69.0 + 12.0 * np.log2(freqs[use] / 440.0)
    pc = np.mod(np.rint(midi).astype(np.int64), 12)
    fold = np.zeros((use.sum(), 12))
    fold[np.arange(pc.size), pc] = 1.0
    chroma = power[:, use] @ fold
    peak = chroma.max(axis=1, keepdims=True)
    # frames far below the loudest frame are treated as silence
    floor = max(float(peak.max()) * 1e-8, 1e-20)
    chroma = np.where(peak > floor, chroma / np.where(peak > 0, peak, 1.0), 0.0)
    return Chromagram(chroma, clip.sample_rate / hop, clip.duration)


def chroma_energy(clip: AudioClip) -> np.ndarray:
    """Un-normalised per-frame chroma energy; used to check energy conservation."""
    n_fft, hop = stft_params(clip.sample_rate)
    power = stft_magnitude(clip.samples, n_fft, hop) ** 2
    freqs = np.fft.rfftfreq(n_fft, 1.0 / clip.sample_rate)
    use = (freqs >= 55.0) & (freqs <= min(5000.0, clip.sample_rate / 2))
    return power[:, use].sum(axis=1)


# --------------------------------------------------------------------------
# tempo, beats, meter
# --------------------------------------------------------------------------

def _lag_salience(acf: np.ndarray, lag: float) -> float:
    """ACF at ``lag`` minus the ACF half-way to it.

    A half-tempo candidate of a steady pulse keeps a full ACF peak but also
    has strong correlation at its own midpoint, which this subtracts.
    """
    def at(x):
        i = int(math.floor(x))
        if i + 1 >= acf.size or i < 0:
            return 0.0
        f = x - i
        return (1 - f) * acf[i] + f * acf[i + 1]

    return at(lag) - max(at(lag / 2.0), 0.0)


def _refine_peak(acf: np.ndarray, k: int) -> float:
    if 0 < k < acf.size - 1:
        a, b, c = acf[k - 1], acf[k], acf[k + 1]
        den = a - 2 * b + c
        if den < 0:
            return k + 0.5 * (a - c) / den
    return float(k)


def _smooth(values: np.ndarray, frame_rate: float, width_sec: float = 0.08) -> np.ndarray:
    n = max(3, int(round(width_sec * frame_rate)) | 1)
    w = np.hanning(n + 2)[1:-1]
    return np.convolve(values, w / w.sum(), mode="same")


def estimate_tempo(env: OnsetEnvelope, tightness: float = 100.0, floor: float = 0.1) -> TempoEstimate:
    """Global tempo plus DP-tracked beat times.

    The envelope is lightly smoothed and autocorrelated over lags spanning
    40-240 BPM. Among ACF peaks within 10 % of the maximum the shortest lag
    (the fundamental pulse) is taken. If that tempo falls outside 70-160 BPM
    and its half/double lies inside the band with salience within 10 % of
    the chosen peak's, the in-band tempo wins.
    """
    fr = env.frame_rate
    if env.duration < 4.0:
        raise NoPeriodicity(f"envelope of {env.duration:.2f} s is shorter than 4 s")
    x = _smooth(env.values, fr)
    x = x - x.mean()
    min_lag = max(1, int(math.floor(60.0 * fr / MAX_BPM)))
    max_lag = int(math.ceil(60.0 * fr / MIN_BPM))
    acf = _kernels.autocorr(np.ascontiguousarray(x), 2 * max_lag + 2)
    if acf[0] <= 1e-12:
        raise NoPeriodicity("flat onset envelope")
    acf = acf / acf[0]
    lags = np.arange(min_lag, max_lag + 1)
    peak = float(acf[lags].max())
    if peak < floor:
        raise NoPeriodicity(f"autocorrelation peak {peak:.3f} below noise floor {floor}")
    local = [k for k in lags if acf[k] >= acf[k - 1] and acf[k] >= acf[k + 1]]
    k = min(k for k in local if acf[k] >= (1.0 - OCTAVE_MARGIN) * peak)
    lag = _refine_peak(acf, k)
    bpm = 60.0 * fr / lag
    if not PREFERRED_BAND[0] <= bpm <= PREFERRED_BAND[1]:
        best = _lag_salience(acf, lag)
        for factor in (2.0, 0.5):
            if not PREFERRED_BAND[0] <= bpm * factor <= PREFERRED_BAND[1]:
                continue
            ck = int(round(lag / factor))
            if not 0 < ck < acf.size - 1:
                continue
            ck += int(np.argmax(acf[ck - 1:ck + 2])) - 1
            cand_lag = _refine_peak(acf, ck)
            if _lag_salience(acf, cand_lag) >= (1.0 - OCTAVE_MARGIN) * best:
                lag, bpm = cand_lag, 60.0 * fr / cand_lag
                break
    bpm = float(np.clip(bpm, MIN_BPM, MAX_BPM))
    beats = track_beats(env, bpm, tightness)
    return TempoEstimate(bpm, float(np.clip(peak, 0.0, 1.0)), beats)


def track_beats(env: OnsetEnvelope, bpm: float, tightness: float = 100.0) -> np.ndarray:
    """Dynamic-programming beat tracker (Ellis 2007) against a fixed tempo."""
    period = 60.0 * env.frame_rate / bpm
    v = env.values
    std = v.std()
    norm = v / std if std > 0 else v.copy()
    score, backlink = _kernels.beat_dp(np.ascontiguousarray(norm), float(period), float(tightness))
    # last beat: best cumulative score among non-silent frames of the final period
    tail = max(0, score.size - int(round(2 * period)))
    live = np.flatnonzero(v[tail:] >= 0.1 * v.max()) + tail
    if live.size == 0:
        live = np.arange(tail, score.size)
    t = int(live[np.argmax(score[live])])
    beats = []
    while t >= 0:
        beats.append(t)
        t = int(backlink[t])
    frames = np.array(beats[::-1], dtype=np.float64)
    times = frames / env.frame_rate
    return times[times <= env.duration]


def estimate_meter(env: OnsetEnvelope, tempo: TempoEstimate, tolerance: float = 0.05) -> MeterEstimate:
    """Choose 3/4 or 4/4 from beat-aligned accent contrast; ties go to 4/4."""
    beats = np.asarray(tempo.beat_times)
    if beats.size < 8:
        return MeterEstimate("4/4", low_confidence=True)
    frames = np.rint(beats * env.frame_rate).astype(np.int64)
    # summing flux around each beat makes the accent insensitive to how the
    # onset straddles analysis frames
    half = int(max(1, min(3, 60.0 * env.frame_rate / tempo.bpm / 4)))
    accents = np.array([env.values[max(0, f - half):f + half + 1].sum() for f in frames])
    # beats placed over silence (clip edges) carry no accent information
    keep = np.flatnonzero(accents >= 0.25 * np.median(accents))
    accents = accents[keep[0]:keep[-1] + 1] if keep.size else accents
    if accents.size < 8:
        return MeterEstimate("4/4", low_confidence=True)

    def contrast(period):
        best = -np.inf
        for phase in range(period):
            on = accents[phase::period]
            off = np.delete(accents, np.arange(phase, accents.size, period))
            if on.size and off.size:
                best = max(best, on.mean() - off.mean())
        return best

    c3, c4 = contrast(3), contrast(4)
    margin = tolerance * max(accents.mean(), 1e-12)
    return MeterEstimate("3/4" if c3 > c4 + margin else "4/4")


# --------------------------------------------------------------------------
# key and chords
# --------------------------------------------------------------------------

def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


def key_correlations(profile: np.ndarray) -> np.ndarray:
    """(12, 2) Pearson correlations of a 12-bin profile against every key."""
    out = np.zeros((12, 2))
    for tonic in range(12):
        out[tonic, 0] = _pearson(profile, np.roll(KK_MAJOR, tonic))
        out[tonic, 1] = _pearson(profile, np.roll(KK_MINOR, tonic))
    return out


def estimate_key(chroma: Chromagram) -> KeyEstimate:
    """Krumhansl-Schmuckler key finding over the time-averaged chroma."""
    frames = chroma.frames
    if frames.shape[0] < 10:
        raise InvalidArgument(f"need >= 10 chroma frames, got {frames.shape[0]}")
    mean = frames.mean(axis=0)
    if not np.any(mean > 0):
        raise NoTonalContent("all-zero chroma")
    corr = key_correlations(mean)
    # row-major argmax: lower tonic first, major before minor on ties
    flat = int(np.argmax(corr.reshape(-1)))
    tonic, mode = divmod(flat, 2)
    return KeyEstimate(tonic, ("major", "minor")[mode], float(corr[tonic, mode]))


def chord_labels() -> list[str]:
    return [f"{p}:maj" for p in PITCH_CLASSES] + [f"{p}:min" for p in PITCH_CLASSES] + [NO_CHORD]


def chord_templates() -> np.ndarray:
    """25 x 12 binary triad templates (12 major, 12 minor) plus uniform no-chord."""
    t = np.zeros((25, 12))
    for root in range(12):
        t[root, [root, (root + 4) % 12, (root + 7) % 12]] = 1.0
        t[12 + root, [root, (root + 3) % 12, (root + 7) % 12]] = 1.0
    t[24] = 1.0
    return t


def chord_similarity(frames: np.ndarray) -> np.ndarray:
    """Cosine similarity of every frame to every template; silent frames score 1 for N."""
    tmpl = chord_templates()
    tmpl = tmpl / np.linalg.norm(tmpl, axis=1, keepdims=True)
    norms = np.linalg.norm(frames, axis=1, keepdims=True)
    sim = np.where(norms > 0, frames / np.where(norms > 0, norms, 1.0), 0.0) @ tmpl.T
    silent = norms[:, 0] == 0
    sim[silent] = 0.0
    sim[silent, 24] = 1.0
    return sim


def recognize_chords(chroma: Chromagram, self_bonus: float = CHORD_SELF_BONUS) -> list[ChordSegment]:
    """Frame-wise template matching smoothed by Viterbi; returns merged segments."""
    frames = chroma.frames
    n = frames.shape[0]
    if n < 10:
        raise InvalidArgument(f"need >= 10 chroma frames, got {n}")
    duration = chroma.duration or n / chroma.frame_rate
    if not np.any(frames > 0):
        return [ChordSegment(NO_CHORD, 0.0, duration)]
    path = _kernels.viterbi(np.ascontiguousarray(chord_similarity(frames)), float(self_bonus))
    labels = chord_labels()
    segments = []
    start = 0
    prev_end = 0.0
    for t in range(1, n + 1):
        if t == n or path[t] != path[start]:
            # boundaries fall midway between frame centres
            end = duration if t == n else min((t - 0.5) / chroma.frame_rate, duration)
            if end > prev_end:
                segments.append(ChordSegment(labels[path[start]], prev_end, end))
                prev_end = end
            start = t
    if segments and segments[-1].end < duration:
        last = segments[-1]
        segments[-1] = ChordSegment(last.label, last.start, duration)
    return segments


def frame_labels(segments: list[ChordSegment], times: np.ndarray) -> list[str]:
    """Label at each time instant; used for frame-accuracy scoring."""
    out = []
    for t in times:
        lab = NO_CHORD
        for seg in segments:
            if seg.start <= t < seg.end:
                lab = seg.label
                break
        out.append(lab)
    return out
