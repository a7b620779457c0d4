"""Hot inner loops of the audio extractors.

Each kernel exists twice: an explicit-loop version written for numba and a
numpy version. Both must agree to floating-point round-off; the public name
is bound to whichever ``_accel.select`` picks.
"""

import numpy as np

from ._accel import select


def _spectral_flux_loop(logmag):
    n_frames, n_bins = logmag.shape
    out = np.zeros(n_frames)
    for t in range(1, n_frames):
        acc = 0.0
        for b in range(n_bins):
            d = logmag[t, b] - logmag[t - 1, b]
            if d > 0.0:
                acc += d
        out[t] = acc
    return out


def _spectral_flux_numpy(logmag):
    out = np.zeros(logmag.shape[0])
    if logmag.shape[0] > 1:
        out[1:] = np.maximum(np.diff(logmag, axis=0), 0.0).sum(axis=1)
    return out


def _autocorr_loop(x, max_lag):
    n = x.shape[0]
    out = np.zeros(max_lag + 1)
    for k in range(min(max_lag, n - 1) + 1):
        acc = 0.0
        for i in range(n - k):
            acc += x[i] * x[i + k]
        out[k] = acc
    return out


def _autocorr_numpy(x, max_lag):
    n = x.shape[0]
    full = np.correlate(x, x, mode="full")[n - 1:]
    out = np.zeros(max_lag + 1)
    m = min(max_lag + 1, n)
    out[:m] = full[:m]
    return out


def _beat_dp_loop(env, period, tightness):
    # cumulative score with log-Gaussian transition penalty around ``period``
    n = env.shape[0]
    score = np.zeros(n)
    backlink = np.full(n, -1, dtype=np.int64)
    lo = int(np.round(period / 2.0))
    hi = int(np.round(2.0 * period))
    for t in range(n):
        best = -np.inf
        arg = -1
        for prev in range(t - hi, t - lo + 1):
            if prev < 0:
                continue
            gap = (t - prev) / period
            cand = score[prev] - tightness * np.log(gap) ** 2
            if cand > best:
                best = cand
                arg = prev
        if arg >= 0 and best > 0.0:
            score[t] = env[t] + best
            backlink[t] = arg
        else:
            score[t] = env[t]
    return score, backlink


def _beat_dp_numpy(env, period, tightness):
    n = env.shape[0]
    score = np.zeros(n)
    backlink = np.full(n, -1, dtype=np.int64)
    lo = int(np.round(period / 2.0))
    hi = int(np.round(2.0 * period))
    gaps = np.arange(hi, lo - 1, -1)  # prev = t - gap, ascending prev order
    penalty = tightness * np.log(gaps / period) ** 2
    for t in range(n):
        prev = t - gaps
        ok = prev >= 0
        if ok.any():
            cand = score[prev[ok]] - penalty[ok]
            j = int(np.argmax(cand))
            if cand[j] > 0.0:
                score[t] = env[t] + cand[j]
                backlink[t] = prev[ok][j]
                continue
        score[t] = env[t]
    return score, backlink


def _viterbi_loop(emission, bonus):
    # maximise sum of emissions plus ``bonus`` for every self-transition
    n_frames, n_states = emission.shape
    delta = emission[0].copy()
    psi = np.zeros((n_frames, n_states), dtype=np.int64)
    new = np.zeros(n_states)
    for t in range(1, n_frames):
        for s in range(n_states):
            best = -np.inf
            arg = 0
            for r in range(n_states):
                v = delta[r] + (bonus if r == s else 0.0)
                if v > best:
                    best = v
                    arg = r
            new[s] = best + emission[t, s]
            psi[t, s] = arg
        delta[:] = new
    path = np.zeros(n_frames, dtype=np.int64)
    best = -np.inf
    for s in range(n_states):
        if delta[s] > best:
            best = delta[s]
            path[n_frames - 1] = s
    for t in range(n_frames - 1, 0, -1):
        path[t - 1] = psi[t, path[t]]
    return path


def _viterbi_numpy(emission, bonus):
    n_frames, n_states = emission.shape
    trans = np.eye(n_states) * bonus
    delta = emission[0].copy()
    psi = np.zeros((n_frames, n_states), dtype=np.int64)
    for t in range(1, n_frames):
        cand = delta[:, None] + trans
        psi[t] = np.argmax(cand, axis=0)
        delta = cand[psi[t], np.arange(n_states)] + emission[t]
    path = np.zeros(n_frames, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(n_frames - 1, 0, -1):
        path[t - 1] = psi[t, path[t]]
    return path


spectral_flux = select(_spectral_flux_loop, _spectral_flux_numpy)
autocorr = select(_autocorr_loop, _autocorr_numpy)
beat_dp = select(_beat_dp_loop, _beat_dp_numpy)
viterbi = select(_viterbi_loop, _viterbi_numpy)

LOOP_IMPLS = {
    "spectral_flux": _spectral_flux_loop,
    "autocorr": _autocorr_loop,
    "beat_dp": _beat_dp_loop,
    "viterbi": _viterbi_loop,
}
NUMPY_IMPLS = {
    "spectral_flux": _spectral_flux_numpy,
    "autocorr": _autocorr_numpy,
    "beat_dp": _beat_dp_numpy,
    "viterbi": _viterbi_numpy,
}
