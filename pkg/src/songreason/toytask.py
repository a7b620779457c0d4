"""Tag-grammar toy task for desk-scale GRPO.

The prompt is ``<q> KEY``; the rewarded response is
``<think> ... </think><answer>KEY</answer><eos>``, scored with the real
format + accuracy rewards on the decoded text.

A short supervised warm-up teaches the tag grammar with *random* answer
keys, so the policy starts well-formed but at chance accuracy; copying the
prompt key has to come from the RL phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grpo import GRPOConfig, PolicyHandle, StepReport, grpo_step
from .rewards import QATask, total_reward
from .rote import ToyPolicy, completion_logdists

SPECIALS = ("<eos>", "<q>", "<think>", "</think>", "<answer>", "</answer>")
FILLER = ("hmm", "so", "tonic")
KEYS = ("C", "D", "E", "F", "G", "A")


@dataclass(frozen=True)
class TagGrammarTask:
    keys: tuple = KEYS
    filler: tuple = FILLER

    @property
    def vocab(self) -> list[str]:
        return list(SPECIALS) + list(self.filler) + list(self.keys)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def token(self, name: str) -> int:
        return self.vocab.index(name)

    @property
    def eos(self) -> int:
        return 0

    def prompts(self) -> list[list[int]]:
        return [[self.token("<q>"), self.token(k)] for k in self.keys]

    def decode(self, completion) -> str:
        words = self.vocab
        out = []
        prev_word = False
        for t in completion:
            if t == self.eos:
                break
            w = words[t]
            is_word = not w.startswith("<")
            if is_word and prev_word:
                out.append(" ")
            out.append(w)
            prev_word = is_word
        return "".join(out)

    def reward(self, prompt, completion) -> float:
        gold = self.vocab[prompt[1]]
        return total_reward(self.decode(completion), QATask(gold)).total

    def demonstration(self, rng: np.random.Generator, answer: int | None = None) -> list[int]:
        n_fill = int(rng.integers(1, 3))
        body = [self.token(self.filler[i]) for i in rng.integers(0, len(self.filler), n_fill)]
        if answer is None:
            answer = self.token(self.keys[int(rng.integers(len(self.keys)))])
        return ([self.token("<think>")] + body + [self.token("</think>"), self.token("<answer>"),
                answer, self.token("</answer>"), self.eos])


def sft_warmup(policy: ToyPolicy, task: TagGrammarTask, steps: int, lr: float = 0.5,
               seed: int = 0, per_prompt: int = 4, max_grad_norm: float = 1.0) -> list[float]:
    """Cross-entropy descent on random-answer demonstrations; returns the loss curve."""
    rng = np.random.default_rng([seed, 7919])
    losses = []
    for _ in range(steps):
        grad = np.zeros_like(policy.flat)
        total, count = 0.0, 0
        for prompt in task.prompts():
            demos = [task.demonstration(rng) for _ in range(per_prompt)]
            dists, cache, (shape, start, lengths) = completion_logdists(policy, prompt, demos)
            dlogits = np.zeros(shape + (policy.vocab,))
            for i, (d, c) in enumerate(zip(dists, demos)):
                c = np.asarray(c)
                total -= d[np.arange(c.size), c].sum()
                count += c.size
                g = np.exp(d)
                g[np.arange(c.size), c] -= 1.0
                dlogits[i, start:start + c.size] = g
            grad += policy.backward(cache, dlogits)
        grad /= count
        norm = float(np.linalg.norm(grad))
        if norm > max_grad_norm:
            grad *= max_grad_norm / norm
        policy.flat -= lr * grad
        losses.append(total / count)
    return losses


def evaluate(policy: ToyPolicy, task: TagGrammarTask, samples_per_prompt: int = 20,
             seed: int = 12345, max_len: int = 8) -> dict:
    """Mean total/format/accuracy reward of sampled responses."""
    handle = PolicyHandle(policy)
    totals, fmts = [], []
    for g, prompt in enumerate(task.prompts()):
        rng = np.random.default_rng([seed, g])
        for comp in handle.sample(prompt, samples_per_prompt, rng, max_len, task.eos, policy=policy):
            br = total_reward(task.decode(comp), QATask(task.vocab[prompt[1]]))
            totals.append(br.total)
            fmts.append(br.format)
    total = float(np.mean(totals))
    fmt = float(np.mean(fmts))
    return {"total": total, "format": fmt, "accuracy": total - fmt}


TOY_GRPO = GRPOConfig(learning_rate=0.5, kl_coeff=0.2, max_grad_norm=0.5, iterations=300)


@dataclass(frozen=True)
class ToyRunConfig:
    """Settings for :func:`run_toy`.

    The GRPO defaults use a stronger KL pull (0.2) than the library default:
    the reference policy answers near-uniformly after warm-up, so the penalty
    keeps sampling alive on prompts the policy would otherwise lock onto a
    wrong key, where every group member agrees and the advantage vanishes.
    """
    grpo: GRPOConfig = TOY_GRPO
    width: int = 16
    hidden: int = 32
    warmup_steps: int = 60
    warmup_lr: float = 0.5
    init_scale: float = 1.0


def run_toy(cfg: ToyRunConfig, task: TagGrammarTask | None = None, on_step=None):
    """Warm up, then GRPO for ``cfg.grpo.iterations`` steps. Returns (policy, reports)."""
    task = task or TagGrammarTask()
    seed = cfg.grpo.seed
    policy = ToyPolicy.initialize(task.vocab_size, seed=seed, scale=cfg.init_scale,
                                  width=cfg.width, hidden=cfg.hidden)
    sft_warmup(policy, task, cfg.warmup_steps, cfg.warmup_lr, seed=seed)
    handle = PolicyHandle(policy)
    reports: list[StepReport] = []
    prompts = task.prompts()
    for step in range(cfg.grpo.iterations):
        rep = grpo_step(handle, prompts, task.reward, cfg.grpo, step=step, eos=task.eos)
        reports.append(rep)
        if on_step is not None:
            on_step(rep)
    return handle.current, reports
