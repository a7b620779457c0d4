"""Rotary time embeddings and a small causal-attention policy.

Rotary embeddings rotate each (even, odd) coordinate pair of a query/key by
``theta * omega_k`` with ``omega_k = base ** (-2k / d)``. In index mode
``theta = -2*pi*i`` for token index ``i``; in time mode ``theta = -2*pi*tau``
for the token's absolute timestamp ``tau`` in seconds. Because the score
between two rotated vectors depends only on the difference of their
angles, attention becomes a function of elapsed time rather than of token
distance.

Aliasing: the k = 0 pair has ``omega_0 = 1``, so timestamps differing by a
whole number of seconds produce the same angle for that pair (mod 2*pi).
Higher pairs rotate more slowly and disambiguate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidDimension, VocabularyError

DEFAULT_STRIDE = 0.040


@dataclass(frozen=True)
class RotaryTable:
    head_dim: int
    base: float = 10000.0
    mode: str = "time"

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise InvalidDimension(f"head_dim must be even and positive, got {self.head_dim}")
        if self.mode not in ("index", "time"):
            raise ValueError(f"mode must be 'index' or 'time', got {self.mode!r}")

    @property
    def frequencies(self) -> np.ndarray:
        k = np.arange(self.head_dim // 2)
        return self.base ** (-2.0 * k / self.head_dim)

    def angles(self, positions) -> np.ndarray:
        """Rotation angle per position and pair, shape ``positions.shape + (d/2,)``.

        ``positions`` are token indices in index mode and seconds in time mode;
        either way the global angle is ``-2*pi*position``.
        """
        theta = -2.0 * math.pi * np.asarray(positions, dtype=np.float64)
        return theta[..., None] * self.frequencies


def timestamps_from_stride(n: int, stride: float = DEFAULT_STRIDE) -> np.ndarray:
    """Timestamps of ``n`` tokens emitted every ``stride`` seconds, starting at 0."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    return np.arange(n, dtype=np.float64) * stride


def _rotate_by(x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x, dtype=np.float64)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def rotate(vec, position, table: RotaryTable) -> np.ndarray:
    """Rotate one vector (or a stack whose leading dims match ``position``)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] % 2:
        raise InvalidDimension(f"vector dimension {vec.shape[-1]} is odd")
    if vec.shape[-1] != table.head_dim:
        raise InvalidDimension(f"vector dimension {vec.shape[-1]} != table {table.head_dim}")
    return _rotate_by(vec, table.angles(position))


def attention_scores(queries, keys, positions, table: RotaryTable) -> np.ndarray:
    """Causal rotary scores ``rot(q_i) . rot(k_j) / sqrt(d)``; entries with j > i are -inf."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape:
        raise InvalidDimension(f"queries {q.shape} and keys {k.shape} must be matching (n, d)")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (q.shape[0],):
        raise InvalidDimension("one position per token required")
    qr, kr = rotate(q, pos, table), rotate(k, pos, table)
    scores = qr @ kr.T / math.sqrt(q.shape[1])
    n = q.shape[0]
    scores[np.triu_indices(n, 1)] = -np.inf
    return scores


# --------------------------------------------------------------------------
# toy policy
# --------------------------------------------------------------------------

def _shapes(vocab: int, width: int, hidden: int, n_blocks: int):
    shapes = [("embed", (vocab, width))]
    for b in range(n_blocks):
        shapes += [
            (f"b{b}.wq", (width, width)), (f"b{b}.wk", (width, width)),
            (f"b{b}.wv", (width, width)), (f"b{b}.wo", (width, width)),
            (f"b{b}.w1", (width, hidden)), (f"b{b}.b1", (hidden,)),
            (f"b{b}.w2", (hidden, width)), (f"b{b}.b2", (width,)),
        ]
    shapes += [("unembed", (width, vocab)), ("bias", (vocab,))]
    return shapes


class ToyPolicy:
    """Two-block causal self-attention language model over a tiny vocabulary.

    Parameters live in one flat float64 vector (``self.flat``); ``self.params``
    holds named views into it, so optimisers and finite-difference checks can
    work on the flat vector directly.
    """

    MAX_PARAMS = 10_000

    def __init__(self, vocab: int, width: int = 16, hidden: int = 32, n_blocks: int = 2,
                 table: RotaryTable | None = None, flat: np.ndarray | None = None):
        if vocab > 256 or width > 64:
            raise ValueError("toy policy limited to vocab <= 256 and width <= 64")
        self.vocab, self.width, self.hidden, self.n_blocks = vocab, width, hidden, n_blocks
        self.table = table or RotaryTable(width, mode="time")
        if self.table.head_dim != width:
            raise InvalidDimension("rotary table head_dim must equal model width")
        self.shapes = _shapes(vocab, width, hidden, n_blocks)
        size = sum(int(np.prod(s)) for _, s in self.shapes)
        if size > self.MAX_PARAMS:
            raise ValueError(f"{size} parameters exceeds {self.MAX_PARAMS}")
        self.flat = np.zeros(size) if flat is None else np.array(flat, dtype=np.float64)
        if self.flat.size != size:
            raise ValueError(f"expected {size} parameters, got {self.flat.size}")
        self.params = self._views(self.flat)

    def _views(self, flat):
        views, off = {}, 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            views[name] = flat[off:off + n].reshape(shape)
            off += n
        return views

    @property
    def n_params(self) -> int:
        return self.flat.size

    @classmethod
    def initialize(cls, vocab: int, seed: int = 0, scale: float = 0.3, zero_head: bool = False,
                   **kw) -> ToyPolicy:
        pol = cls(vocab, **kw)
        rng = np.random.default_rng(seed)
        for name, shape in pol.shapes:
            if name.endswith(("b1", "b2")) or name == "bias":
                continue
            fan_in = shape[0] if name != "embed" else 1
            pol.params[name][...] = rng.normal(0.0, scale / math.sqrt(fan_in), shape)
        if zero_head:
            pol.params["unembed"][...] = 0.0
            pol.params["bias"][...] = 0.0
        return pol

    def copy(self) -> ToyPolicy:
        return ToyPolicy(self.vocab, self.width, self.hidden, self.n_blocks, self.table, self.flat.copy())

    # -- forward / backward ------------------------------------------------

    def forward(self, tokens: np.ndarray, positions: np.ndarray):
        """Logits for a padded batch: tokens (B, n) int, positions (B, n) -> (B, n, V).

        Returns ``(logits, cache)``; the cache feeds :meth:`backward`.
        """
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab):
            raise VocabularyError(f"token id outside [0, {self.vocab})")
        p = self.params
        n = tokens.shape[1]
        phi = self.table.angles(positions)  # (B, n, d/2)
        mask = np.triu(np.ones((n, n), dtype=bool), 1)
        scale = 1.0 / math.sqrt(self.width)
        h = p["embed"][tokens]
        cache = {"tokens": tokens, "phi": phi, "blocks": []}
        for b in range(self.n_blocks):
            wq, wk, wv, wo = p[f"b{b}.wq"], p[f"b{b}.wk"], p[f"b{b}.wv"], p[f"b{b}.wo"]
            q, k, v = h @ wq, h @ wk, h @ wv
            qr, kr = _rotate_by(q, phi), _rotate_by(k, phi)
            s = np.einsum("bid,bjd->bij", qr, kr) * scale
            s[:, mask] = -np.inf
            s -= s.max(axis=2, keepdims=True)
            att = np.exp(s)
            att /= att.sum(axis=2, keepdims=True)
            a = att @ v
            h_mid = h + a @ wo
            m = np.tanh(h_mid @ p[f"b{b}.w1"] + p[f"b{b}.b1"])
            h_out = h_mid + m @ p[f"b{b}.w2"] + p[f"b{b}.b2"]
            cache["blocks"].append((h, qr, kr, v, att, a, h_mid, m))
            h = h_out
        cache["h"] = h
        return h @ p["unembed"] + p["bias"], cache

    def backward(self, cache, dlogits: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(dlogits * logits)`` w.r.t. the flat parameter vector."""
        p = self.params
        grad = np.zeros_like(self.flat)
        g = self._views(grad)
        h = cache["h"]
        g["unembed"] += np.einsum("bnd,bnv->dv", h, dlogits)
        g["bias"] += dlogits.sum(axis=(0, 1))
        dh = dlogits @ p["unembed"].T
        phi = cache["phi"]
        scale = 1.0 / math.sqrt(self.width)
        for b in reversed(range(self.n_blocks)):
            h_in, qr, kr, v, att, a, h_mid, m = cache["blocks"][b]
            # MLP residual
            g[f"b{b}.w2"] += np.einsum("bnh,bnd->hd", m, dh)
            g[f"b{b}.b2"] += dh.sum(axis=(0, 1))
            dz = (dh @ p[f"b{b}.w2"].T) * (1.0 - m * m)
            g[f"b{b}.w1"] += np.einsum("bnd,bnh->dh", h_mid, dz)
            g[f"b{b}.b1"] += dz.sum(axis=(0, 1))
            dh_mid = dh + dz @ p[f"b{b}.w1"].T
            # attention residual
            g[f"b{b}.wo"] += np.einsum("bnd,bne->de", a, dh_mid)
            da = dh_mid @ p[f"b{b}.wo"].T
            datt = np.einsum("bid,bjd->bij", da, v)
            dv = np.einsum("bij,bid->bjd", att, da)
            ds = att * (datt - (datt * att).sum(axis=2, keepdims=True)) * scale
            dqr = ds @ kr
            dkr = np.einsum("bij,bid->bjd", ds, qr)
            dq, dk = _rotate_by(dqr, -phi), _rotate_by(dkr, -phi)
            g[f"b{b}.wq"] += np.einsum("bnd,bne->de", h_in, dq)
            g[f"b{b}.wk"] += np.einsum("bnd,bne->de", h_in, dk)
            g[f"b{b}.wv"] += np.einsum("bnd,bne->de", h_in, dv)
            dh = (dh_mid + dq @ p[f"b{b}.wq"].T + dk @ p[f"b{b}.wk"].T + dv @ p[f"b{b}.wv"].T)
        np.add.at(g["embed"], cache["tokens"], dh)
        return grad


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def pack(prompt, completions, positions=None, stride: float = DEFAULT_STRIDE):
    """Pad prompt+completion sequences into (B, n) token and position arrays.

    Returns ``(tokens, positions, lengths)`` with ``lengths[i]`` the
    completion length of row ``i``. Padding repeats token 0 at the end, where
    causal masking keeps it from influencing real positions.
    """
    prompt = list(prompt)
    lengths = np.array([len(c) for c in completions], dtype=np.int64)
    n = len(prompt) + int(lengths.max(initial=0))
    tokens = np.zeros((len(completions), n), dtype=np.int64)
    for i, c in enumerate(completions):
        seq = prompt + list(c)
        tokens[i, :len(seq)] = seq
    if positions is None:
        pos = np.broadcast_to(timestamps_from_stride(n, stride), tokens.shape).copy()
    else:
        pos = np.zeros(tokens.shape)
        for i, row in enumerate(positions):
            row = np.asarray(row, dtype=np.float64)
            pos[i, :row.size] = row
            if row.size < n:
                last = row[-1] if row.size else 0.0
                step = row[-1] - row[-2] if row.size > 1 else DEFAULT_STRIDE
                pos[i, row.size:] = last + step * np.arange(1, n - row.size + 1)
    return tokens, pos, lengths


def completion_logdists(policy: ToyPolicy, prompt, completions, positions=None):
    """Per-completion log next-token distributions at each completion step.

    Returns ``(logdists, cache, layout)`` where ``logdists[i]`` has shape
    ``(len(completions[i]), V)``.
    """
    tokens, pos, lengths = pack(prompt, completions, positions)
    logits, cache = policy.forward(tokens, pos)
    logq = log_softmax(logits)
    start = len(prompt) - 1
    out = [logq[i, start:start + lengths[i]] for i in range(len(completions))]
    return out, cache, (tokens.shape, start, lengths)


def policy_logprobs(policy: ToyPolicy, prompt, completion, positions=None) -> np.ndarray:
    """Log-probability of each completion token given everything before it."""
    (dist,), _, _ = completion_logdists(policy, prompt, [completion],
                                        None if positions is None else [positions])
    return dist[np.arange(len(completion)), np.asarray(completion, dtype=np.int64)]


def logprob_gradient(policy: ToyPolicy, prompt, completion, positions=None) -> np.ndarray:
    """Gradient of the summed completion log-probability w.r.t. ``policy.flat``."""
    dists, cache, (shape, start, lengths) = completion_logdists(
        policy, prompt, [completion], None if positions is None else [positions])
    comp = np.asarray(completion, dtype=np.int64)
    dlogits = np.zeros(shape + (policy.vocab,))
    d = -np.exp(dists[0])
    d[np.arange(comp.size), comp] += 1.0
    dlogits[0, start:start + comp.size] = d
    return policy.backward(cache, dlogits)
