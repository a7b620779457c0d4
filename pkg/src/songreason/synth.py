"""Deterministic test-signal generators: click tracks, scales, triads.

These back the bundled demo corpus and the estimator oracles, so the
generator parameters (tempo, key, chord labels) serve as ground truth.
"""

from __future__ import annotations

import numpy as np

from .audio import PITCH_CLASSES, AudioClip

DEFAULT_RATE = 22050

MAJOR_STEPS = (0, 2, 4, 5, 7, 9, 11, 12)
NATURAL_MINOR_STEPS = (0, 2, 3, 5, 7, 8, 10, 12)


def midi_to_hz(note: float) -> float:
    return 440.0 * 2.0 ** ((note - 69.0) / 12.0)


def _fade(n: int, sr: int, ms: float = 10.0) -> np.ndarray:
    env = np.ones(n)
    k = min(n // 2, int(sr * ms / 1000.0))
    if k > 0:
        ramp = np.linspace(0.0, 1.0, k, endpoint=False)
        env[:k] = ramp
        env[n - k:] = ramp[::-1]
    return env


def tone(freqs, duration: float, sr: int = DEFAULT_RATE, amplitude: float = 0.3) -> np.ndarray:
    """Sum of equal-amplitude sines with short linear fades at both ends."""
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    out = np.zeros(n)
    for f in np.atleast_1d(freqs):
        out += np.sin(2 * np.pi * f * t)
    out *= amplitude / max(1, np.atleast_1d(freqs).size)
    return out * _fade(n, sr)


def click_track(
    bpm: float,
    duration: float,
    sr: int = DEFAULT_RATE,
    accent_every: int = 0,
    accent_db: float = 6.0,
    click_hz: float = 1000.0,
    amplitude: float = 0.25,
    phase: float = 0.0,
) -> AudioClip:
    """Short decaying sine bursts at a fixed tempo; optional periodic accent."""
    n = int(round(duration * sr))
    out = np.zeros(n)
    burst_len = int(0.03 * sr)
    t = np.arange(burst_len) / sr
    burst = np.sin(2 * np.pi * click_hz * t) * np.exp(-t / 0.006)
    period = 60.0 / bpm
    k = 0
    while True:
        start = int(round((phase + k * period) * sr))
        if start >= n:
            break
        gain = amplitude
        if accent_every and k % accent_every == 0:
            gain *= 10.0 ** (accent_db / 20.0)
        end = min(n, start + burst_len)
        out[start:end] += gain * burst[: end - start]
        k += 1
    return AudioClip(np.clip(out, -1.0, 1.0), sr)


def scale(tonic: int, mode: str = "major", note_sec: float = 0.3, octave: int = 5,
          sr: int = DEFAULT_RATE, amplitude: float = 0.3) -> AudioClip:
    """Ascending then descending diatonic scale starting on ``tonic`` (pitch class)."""
    steps = MAJOR_STEPS if mode == "major" else NATURAL_MINOR_STEPS
    base = 12 * (octave + 1) + tonic
    seq = list(steps) + list(steps[-2::-1])
    parts = [tone(midi_to_hz(base + s), note_sec, sr, amplitude) for s in seq]
    return AudioClip(np.concatenate(parts), sr)


def triad_notes(label: str, octave: int = 5) -> list[int]:
    root_name, quality = label.split(":")
    root = PITCH_CLASSES.index(root_name)
    third = 4 if quality == "maj" else 3
    base = 12 * (octave + 1) + root
    return [base, base + third, base + 7]


def progression(labels, chord_sec: float = 2.0, sr: int = DEFAULT_RATE, octave: int = 5,
                amplitude: float = 0.3) -> AudioClip:
    """Block triads held for ``chord_sec`` each, labels like ``"C:maj"``."""
    parts = [tone([midi_to_hz(n) for n in triad_notes(lab, octave)], chord_sec, sr, amplitude)
             for lab in labels]
    return AudioClip(np.concatenate(parts), sr)


def white_noise(duration: float, seed: int = 0, sr: int = DEFAULT_RATE, amplitude: float = 0.1) -> AudioClip:
    rng = np.random.default_rng(seed)
    return AudioClip(np.clip(rng.normal(0.0, amplitude, int(round(duration * sr))), -1, 1), sr)


def silence(duration: float, sr: int = DEFAULT_RATE) -> AudioClip:
    return AudioClip(np.zeros(int(round(duration * sr))), sr)


def demo_tracks() -> dict:
    """The bundled toy corpus: name -> (clip, ground-truth dict)."""
    tracks = {}
    for bpm in (90, 120, 150):
        clicks = click_track(bpm, 12.0, accent_every=4)
        triad = progression(["C:maj"], chord_sec=12.0)
        mix = AudioClip(clicks.samples + triad.samples[: clicks.samples.size], clicks.sample_rate)
        tracks[f"clicks_{bpm}bpm_cmaj"] = (mix, {"bpm": bpm, "key": "C major", "meter": "4/4"})
    tracks["waltz_100bpm"] = (click_track(100, 12.0, accent_every=3), {"bpm": 100, "meter": "3/4"})
    tracks["scale_g_major"] = (scale(7, "major"), {"key": "G major"})
    tracks["scale_a_minor"] = (scale(9, "minor"), {"key": "A minor"})
    prog = ["C:maj", "A:min", "F:maj", "G:maj"]
    tracks["progression_c_am_f_g"] = (progression(prog, 2.0), {"chords": prog})
    return tracks
