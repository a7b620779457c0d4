"""Group Relative Policy Optimization over policies with exact log-probabilities.

Objective for one group of G completions ``o_i`` of a prompt::

    J = 1/G * sum_i [ mean_t min(rho_it * A_i, clip(rho_it, 1-eps, 1+eps) * A_i)
                      - beta * mean_t KL_t(pi_theta || pi_ref) ]

with ``rho_it = exp(logp_theta - logp_old)`` per token, ``A_i`` the group-
normalised reward, and the KL taken exactly over the full next-token
distribution at each completion position. The loss minimised is ``-J``.
``ratio_mode="sequence"`` replaces the per-token ratio by the product over
the whole completion.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidGroup, NumericalError
from .rote import ToyPolicy, completion_logdists, pack


@dataclass(frozen=True)
class GRPOConfig:
    group_size: int = 5
    clip_eps: float = 0.2
    kl_coeff: float = 0.04
    learning_rate: float = 0.5
    seed: int = 0
    iterations: int = 300
    std_floor: float = 1e-8
    ratio_mode: str = "token"
    max_completion: int = 8
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.group_size < 2:
            raise InvalidGroup("group_size must be >= 2")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be non-negative")
        if self.ratio_mode not in ("token", "sequence"):
            raise ValueError("ratio_mode must be 'token' or 'sequence'")


def normalize_advantages(rewards, std_floor: float = 1e-8) -> np.ndarray:
    """``(r - mean) / population_std``; all zeros when the std is below ``std_floor``.

    Statistics are taken on differences from the first reward, which makes
    the result bit-identical under any reward shift that is itself exact.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise InvalidGroup("advantage normalisation needs at least two rewards")
    d = r - r[0]
    centred = d - d.mean()
    std = math.sqrt(float(np.mean(centred * centred)))
    if std < std_floor:
        return np.zeros_like(r)
    return centred / max(std, std_floor)


@dataclass
class PolicyGroup:
    """One prompt, its G sampled completions and their log-probabilities.

    ``logdist_*`` hold full log next-token distributions (T_i, V) per
    completion; ``logp_*`` the log-probabilities of the sampled tokens.
    """

    prompt: list
    completions: list
    rewards: np.ndarray
    logp_behavior: list
    logdist_current: list
    logdist_reference: list
    positions: list | None = None

    @property
    def logp_current(self) -> list:
        return [_take(d, c) for d, c in zip(self.logdist_current, self.completions)]

    @property
    def logp_reference(self) -> list:
        return [_take(d, c) for d, c in zip(self.logdist_reference, self.completions)]


def _take(dist, completion):
    return dist[np.arange(len(completion)), np.asarray(completion, dtype=np.int64)]


def token_kl(logdist_p: np.ndarray, logdist_q: np.ndarray) -> np.ndarray:
    """Exact KL(p || q) at each row; clamped at zero against round-off."""
    p = np.exp(logdist_p)
    return np.maximum((p * (logdist_p - logdist_q)).sum(axis=-1), 0.0)


def surrogate_terms(logdist_current, completions, logp_behavior, logdist_reference,
                    advantages, config: GRPOConfig):
    """Loss ``-J`` and its gradient w.r.t. each completion's logits.

    Returns ``(loss, dlogits, mean_kl)`` with ``dlogits[i]`` shaped like
    ``logdist_current[i]``.
    """
    G = len(completions)
    eps, beta = config.clip_eps, config.kl_coeff
    lo, hi = 1.0 - eps, 1.0 + eps
    J = 0.0
    kls = []
    grads = []
    for i in range(G):
        comp = np.asarray(completions[i], dtype=np.int64)
        T = comp.size
        logq = logdist_current[i]
        q = np.exp(logq)
        A = float(advantages[i])
        lp = logq[np.arange(T), comp]
        log_ratio = lp - np.asarray(logp_behavior[i])
        if config.ratio_mode == "sequence":
            log_ratio = np.full(T, log_ratio.sum())
        with np.errstate(over="ignore"):
            rho = np.exp(log_ratio)
        bad = np.flatnonzero(~np.isfinite(rho))
        if bad.size:
            raise NumericalError(f"non-finite importance ratio in completion {i} at token {bad[0]}",
                                 index=(i, int(bad[0])))
        unclipped = rho * A
        clipped = np.clip(rho, lo, hi) * A
        use_unclipped = unclipped <= clipped
        surr = np.where(use_unclipped, unclipped, clipped)
        dsurr_dlp = np.where(use_unclipped, unclipped, 0.0)
        kl = token_kl(logq, logdist_reference[i])
        kls.append(kl.mean() if T else 0.0)
        if config.ratio_mode == "sequence":
            J_i = surr[0] - beta * kl.mean() if T else 0.0
            dJ_dlp = np.full(T, dsurr_dlp[0] if T else 0.0)
        else:
            J_i = surr.mean() - beta * kl.mean() if T else 0.0
            dJ_dlp = dsurr_dlp / max(T, 1)
        J += J_i / G
        # d lp_t / d logits_t = onehot - q ; d KL_t / d logits_t = q * (logq - logr - KL_t)
        d = -q * dJ_dlp[:, None]
        d[np.arange(T), comp] += dJ_dlp
        d -= (beta / max(T, 1)) * q * (logq - logdist_reference[i] - kl[:, None])
        grads.append(-d / G)
    return -J, grads, float(np.mean(kls)) if kls else 0.0


def surrogate_loss(group: PolicyGroup, advantages, config: GRPOConfig) -> float:
    loss, _, _ = surrogate_terms(group.logdist_current, group.completions, group.logp_behavior,
                                 group.logdist_reference, advantages, config)
    return loss


def loss_and_grad(policy: ToyPolicy, group: PolicyGroup, advantages, config: GRPOConfig):
    """Evaluate ``policy`` as the current policy on ``group``; return (loss, flat grad, kl)."""
    dists, cache, (shape, start, lengths) = completion_logdists(
        policy, group.prompt, group.completions, group.positions)
    loss, dl, kl = surrogate_terms(dists, group.completions, group.logp_behavior,
                                   group.logdist_reference, advantages, config)
    dlogits = np.zeros(shape + (policy.vocab,))
    for i, g in enumerate(dl):
        dlogits[i, start:start + lengths[i]] = g
    return loss, policy.backward(cache, dlogits), kl


def policy_loss(policy: ToyPolicy, group: PolicyGroup, advantages, config: GRPOConfig) -> float:
    dists, _, _ = completion_logdists(policy, group.prompt, group.completions, group.positions)
    loss, _, _ = surrogate_terms(dists, group.completions, group.logp_behavior,
                                 group.logdist_reference, advantages, config)
    return loss


# --------------------------------------------------------------------------
# policy handle, sampling, stepping
# --------------------------------------------------------------------------

class PolicyHandle:
    """Current, behaviour and reference roles over one policy architecture.

    The reference is frozen at construction; the behaviour policy is a
    snapshot of the current one taken by :meth:`refresh_behavior`.
    """

    def __init__(self, current: ToyPolicy, reference: ToyPolicy | None = None):
        self.current = current
        self.reference = reference if reference is not None else current.copy()
        self.behavior = current.copy()

    def refresh_behavior(self) -> None:
        self.behavior = self.current.copy()

    def sample(self, prompt, n: int, rng: np.random.Generator, max_len: int, eos: int,
               policy: ToyPolicy | None = None) -> list[list[int]]:
        """Draw ``n`` completions (each ending at ``eos`` or ``max_len``)."""
        pol = policy or self.behavior
        done = np.zeros(n, dtype=bool)
        comps = [[] for _ in range(n)]
        for _ in range(max_len):
            tokens, pos, _ = pack(prompt, comps)
            logits, _ = pol.forward(tokens, pos)
            last = np.array([len(prompt) + len(c) - 1 for c in comps])
            z = logits[np.arange(n), last]
            probs = np.exp(z - z.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            u = rng.random(n)
            picks = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
            picks = np.minimum(picks, pol.vocab - 1)
            for i in range(n):
                if not done[i]:
                    comps[i].append(int(picks[i]))
                    done[i] = picks[i] == eos
                else:
                    comps[i].append(eos)
            if done.all():
                break
        # drop the eos padding added after each completion finished
        out = []
        for c in comps:
            if eos in c:
                c = c[:c.index(eos) + 1]
            out.append(c)
        return out


@dataclass
class StepReport:
    step: int
    mean_reward: float
    loss: float
    grad_norm: float
    kl: float
    skipped: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def build_group(handle: PolicyHandle, prompt, completions, rewards, positions=None) -> PolicyGroup:
    cur, _, _ = completion_logdists(handle.current, prompt, completions, positions)
    beh, _, _ = completion_logdists(handle.behavior, prompt, completions, positions)
    ref, _, _ = completion_logdists(handle.reference, prompt, completions, positions)
    return PolicyGroup(list(prompt), [list(c) for c in completions], np.asarray(rewards, dtype=np.float64),
                       [_take(d, c) for d, c in zip(beh, completions)], cur, ref, positions)


def grpo_step(handle: PolicyHandle, prompts, reward_fn, config: GRPOConfig, step: int = 0,
              eos: int = 0) -> StepReport:
    """Sample a group per prompt from the behaviour snapshot and take one descent step.

    Each prompt's sampler is seeded from ``(config.seed, step, prompt index)``.
    """
    handle.refresh_behavior()
    groups, advs, all_rewards = [], [], []
    for g, prompt in enumerate(prompts):
        rng = np.random.default_rng([config.seed, step, g])
        comps = handle.sample(prompt, config.group_size, rng, config.max_completion, eos)
        rewards = np.array([reward_fn(prompt, c) for c in comps], dtype=np.float64)
        all_rewards.extend(rewards)
        groups.append(build_group(handle, prompt, comps, rewards))
        advs.append(normalize_advantages(rewards, config.std_floor))
    grad = np.zeros_like(handle.current.flat)
    loss = kl = 0.0
    for group, adv in zip(groups, advs):
        l, gr, k = loss_and_grad(handle.current, group, adv, config)
        loss += l / len(groups)
        kl += k / len(groups)
        grad += gr / len(groups)
    skipped = all(not np.any(a) for a in advs)
    if skipped:
        grad_norm = 0.0
    else:
        grad_norm = float(np.linalg.norm(grad))
        if config.max_grad_norm is not None and grad_norm > config.max_grad_norm:
            grad = grad * (config.max_grad_norm / grad_norm)
        handle.current.flat -= config.learning_rate * grad
    return StepReport(step, float(np.mean(all_rewards)), float(loss), grad_norm, float(kl), skipped)


def check_gradients(policy: ToyPolicy, group: PolicyGroup, config: GRPOConfig, h: float = 1e-3,
                    order: int = 4, advantages=None) -> float:
    """Max relative error between analytic and central finite-difference gradients.

    ``order`` 2 uses the 3-point stencil, 4 the 5-point one. Components whose
    magnitude is below 1e-8 are compared in absolute terms.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    if policy.n_params > 10_000:
        raise ValueError("finite differences limited to 10^4 parameters")
    if advantages is None:
        advantages = normalize_advantages(group.rewards, config.std_floor)
    _, analytic, _ = loss_and_grad(policy, group, advantages, config)
    probe = policy.copy()
    f = lambda: policy_loss(probe, group, advantages, config)  # noqa: E731
    numeric = np.zeros_like(analytic)
    for j in range(probe.n_params):
        orig = probe.flat[j]
        if order == 2:
            probe.flat[j] = orig + h
            a = f()
            probe.flat[j] = orig - h
            b = f()
            numeric[j] = (a - b) / (2 * h)
        else:
            vals = []
            for s in (2, 1, -1, -2):
                probe.flat[j] = orig + s * h
                vals.append(f())
            numeric[j] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        probe.flat[j] = orig
    return relative_error(analytic, numeric)


def random_check_instance(seed: int, kl_coeff: float | None = None, clipped: bool | None = None,
                          vocab: int = 7, width: int = 6, hidden: int = 8):
    """A seeded (policy, group, config) triple for gradient checking.

    Behaviour and reference are perturbed copies of the current policy.
    ``clipped=True`` perturbs the behaviour policy enough that ratios leave
    the clip band; ``None`` picks both options from the seed. Behaviour
    draws that put a ratio within 0.02 of a clip edge are redrawn, because
    the loss has a kink there and finite differences are meaningless.
    """
    rng = np.random.default_rng([seed, 31337])
    if kl_coeff is None:
        kl_coeff = float(rng.choice([0.0, 0.04, 0.2]))
    if clipped is None:
        clipped = bool(rng.random() < 0.5)
    current = ToyPolicy.initialize(vocab, seed=int(rng.integers(2**31)), scale=0.5,
                                   width=width, hidden=hidden)
    handle = PolicyHandle(current, current.copy())
    handle.reference.flat += rng.normal(0.0, 0.1, current.n_params)
    config = GRPOConfig(seed=seed, kl_coeff=kl_coeff, clip_eps=0.2,
                        ratio_mode="sequence" if rng.random() < 0.25 else "token")
    prompt = [int(t) for t in rng.integers(0, vocab, int(rng.integers(1, 4)))]
    comps = [[int(t) for t in rng.integers(0, vocab, int(rng.integers(1, 5)))]
             for _ in range(config.group_size)]
    rewards = rng.integers(0, 3, config.group_size).astype(float)
    if np.all(rewards == rewards[0]):
        rewards[0] += 1.0
    base = handle.behavior.flat.copy()
    edges = np.array([1.0 - config.clip_eps, 1.0 + config.clip_eps])
    while True:
        handle.behavior.flat[:] = base + rng.normal(0.0, 0.1 if clipped else 0.005, base.size)
        group = build_group(handle, prompt, comps, rewards)
        log_ratio = [lc - lb for lc, lb in zip(group.logp_current, group.logp_behavior)]
        if config.ratio_mode == "sequence":
            log_ratio = [np.array([lr.sum()]) for lr in log_ratio]
        rho = np.exp(np.concatenate(log_ratio))
        if np.abs(rho[:, None] - edges).min() > 0.02:
            return current, group, config


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    err = np.where(mag < floor, diff, diff / np.where(mag < floor, 1.0, mag))
    return float(err.max(initial=0.0))


# --------------------------------------------------------------------------
# parameter file
# --------------------------------------------------------------------------

PARAM_MAGIC = b"SRPL"
PARAM_VERSION = 1


def save_policy(policy: ToyPolicy, path) -> None:
    """Write parameters as a flat little-endian binary.

    Layout: magic ``SRPL``; u32 version; u32 tensor count; per tensor a u16
    name length, UTF-8 name, u8 rank and u32 dims; then every tensor's values
    as float32, in table order.
    """
    out = [PARAM_MAGIC, struct.pack("<II", PARAM_VERSION, len(policy.shapes))]
    for name, shape in policy.shapes:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
    out.append(policy.flat.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_policy(path, **kw) -> ToyPolicy:
    data = Path(path).read_bytes()
    if data[:4] != PARAM_MAGIC:
        raise ValueError("not a policy parameter file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != PARAM_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    pos = 12
    shapes = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        shapes.append((name, tuple(shape)))
    table = dict(shapes)
    vocab, width = table["embed"]
    hidden = table["b0.w1"][1] if "b0.w1" in table else 1
    n_blocks = sum(1 for name in table if name.endswith(".wq"))
    flat = np.frombuffer(data, dtype="<f4", offset=pos).astype(np.float64)
    pol = ToyPolicy(vocab, width, hidden, n_blocks, flat=flat, **kw)
    if pol.shapes != shapes:
        raise ValueError("shape table does not match the toy policy layout")
    return pol
