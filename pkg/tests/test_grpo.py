import math

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given
from hypothesis import strategies as st

from songreason.errors import InvalidGroup, NumericalError
from songreason.grpo import (GRPOConfig, PolicyGroup, PolicyHandle, build_group, check_gradients,
                             grpo_step, load_policy, loss_and_grad, normalize_advantages,
                             random_check_instance, save_policy, surrogate_loss, surrogate_terms,
                             token_kl)
from songreason.rote import ToyPolicy, log_softmax, logprob_gradient, policy_logprobs
from songreason.toytask import TagGrammarTask, evaluate, sft_warmup

BIG_EPS = 1e9


# advantages -----------------------------------------------------------------

def test_advantage_examples():
    np.testing.assert_array_equal(normalize_advantages([0, 1]), [-1.0, 1.0])
    np.testing.assert_array_equal(normalize_advantages([3.5] * 5), np.zeros(5))
    a = normalize_advantages([1, 2, 3, 4, 5])
    r = np.arange(1, 6, dtype=float)
    np.testing.assert_allclose(a, (r - 3) / math.sqrt(2), rtol=1e-15)
    assert abs(a.mean()) < 1e-15 and abs(a.std() - 1) < 1e-15


def test_advantage_errors():
    with pytest.raises(InvalidGroup):
        normalize_advantages([1.0])
    with pytest.raises(InvalidGroup):
        GRPOConfig(group_size=1)


rewards = st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=12)


@given(rewards)
def test_advantage_mean_zero_std_one(r):
    a = normalize_advantages(r)
    if np.any(a):
        assert abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-9
    else:
        assert np.std(np.asarray(r) - r[0]) < 1e-8 or np.ptp(r) == 0


@given(rewards, st.sampled_from([1.0, -3.25, 1024.0, 0.5]))
def test_advantage_shift_bit_invariant(r, c):
    r = np.round(np.asarray(r) * 4) / 4  # quarter-steps keep r + c exact
    np.testing.assert_array_equal(normalize_advantages(r + c), normalize_advantages(r))


@given(rewards, st.floats(1e-3, 1e3))
def test_advantage_scale_equivariant(r, c):
    a, b = normalize_advantages(r), normalize_advantages(np.asarray(r) * c)
    if np.std(r) > 1e-3:
        np.testing.assert_allclose(b, a, atol=1e-9)


# surrogate ------------------------------------------------------------------

def _onehot_group(logits_cur, logits_ref, beh_logp, tokens, rewards):
    cur = [log_softmax(np.asarray(l, dtype=float))[None, :] for l in logits_cur]
    ref = [log_softmax(np.asarray(l, dtype=float))[None, :] for l in logits_ref]
    return PolicyGroup([1], [[t] for t in tokens], np.asarray(rewards, dtype=float),
                       [np.array([b]) for b in beh_logp], cur, ref)


def test_hand_computed_three_vocab():
    # current distribution over 3 tokens: softmax([0, ln 2, ln 3]) = [1/6, 2/6, 3/6]
    logits = [0.0, math.log(2), math.log(3)]
    beh = [math.log(1 / 3), math.log(1 / 4)]  # behaviour prob of token 1 and token 2
    group = _onehot_group([logits, logits], [logits, logits], beh, [1, 2], [0.0, 1.0])
    cfg = GRPOConfig(group_size=2, clip_eps=BIG_EPS, kl_coeff=0.0)
    adv = normalize_advantages(group.rewards)  # [-1, 1]
    rho = [(2 / 6) / (1 / 3), (3 / 6) / (1 / 4)]  # 1.0 and 2.0
    expected_j = 0.5 * (rho[0] * -1 + rho[1] * 1)
    assert surrogate_loss(group, adv, cfg) == pytest.approx(-expected_j, abs=1e-12)
    # with the default clip the second ratio is capped at 1.2
    clipped = GRPOConfig(group_size=2, kl_coeff=0.0)
    assert surrogate_loss(group, adv, clipped) == pytest.approx(-0.5 * (-1.0 + 1.2), abs=1e-12)


def test_on_policy_objective_is_zero():
    current, group, cfg = random_check_instance(3, kl_coeff=0.0)
    group.logp_behavior = group.logp_current
    cfg = replace(cfg, ratio_mode="token")
    assert abs(surrogate_loss(group, normalize_advantages(group.rewards), cfg)) < 1e-12


def test_kl_zero_when_reference_is_current():
    pol = ToyPolicy.initialize(7, seed=2, width=6, hidden=8)
    handle = PolicyHandle(pol)
    group = build_group(handle, [1, 2], [[3], [4, 5], [6, 0, 1]], [0, 1, 2])
    for d in group.logdist_current:
        np.testing.assert_array_equal(token_kl(d, d), 0.0)
    _, _, kl = surrogate_terms(group.logdist_current, group.completions, group.logp_behavior,
                               group.logdist_reference, normalize_advantages(group.rewards),
                               GRPOConfig(group_size=3))
    assert kl == 0.0


@given(st.floats(-3, 3), st.floats(-5, 5), st.floats(0.01, 0.9))
def test_clipping_bound(log_rho, A, eps):
    # advantages [A, 0] isolate the first completion's term: J = s_1 / 2
    logits = [0.3, -0.2, 0.1]
    lp = log_softmax(np.array(logits))[1]
    group = _onehot_group([logits, logits], [logits, logits], [lp - log_rho, lp], [1, 1], [0, 1])
    cfg = GRPOConfig(group_size=2, clip_eps=eps, kl_coeff=0.0)
    s = -2 * surrogate_loss(group, [A, 0.0], cfg)
    rho = math.exp(log_rho)
    cands = [rho * A, (1 - eps) * A, (1 + eps) * A]
    assert min(cands) - 1e-9 <= s <= max(cands) + 1e-9
    assert s == pytest.approx(min(rho * A, min(max(rho, 1 - eps), 1 + eps) * A), abs=1e-9)


@given(st.integers(0, 10_000))
def test_kl_non_negative(seed):
    rng = np.random.default_rng(seed)
    p, q = log_softmax(rng.normal(size=(4, 9)) * 3), log_softmax(rng.normal(size=(4, 9)) * 3)
    assert np.all(token_kl(p, q) >= 0)


def test_non_finite_ratio_reports_index():
    logits = [0.0, 0.0, 0.0]
    group = _onehot_group([logits, logits], [logits, logits], [-1.0986, -2000.0], [1, 2], [0, 1])
    with pytest.raises(NumericalError) as info:
        surrogate_loss(group, [-1.0, 1.0], GRPOConfig(group_size=2))
    assert info.value.index == (1, 0)


def test_gradient_matches_policy_gradient_oracle():
    """With beta 0 and no clipping, -grad(loss) = 1/G sum_i A_i mean_t rho_it grad lp_it."""
    pol = ToyPolicy.initialize(3, seed=4, scale=0.8, width=4, hidden=4)
    handle = PolicyHandle(pol)
    handle.behavior.flat += np.random.default_rng(0).normal(0, 0.05, pol.n_params)
    prompt = [0, 2]
    comps = [[1, 2, 0], [2], [0, 0], [1, 1, 2, 2]]
    group = build_group(handle, prompt, comps, [1.0, 0.0, 2.0, 0.5])
    cfg = GRPOConfig(group_size=4, clip_eps=BIG_EPS, kl_coeff=0.0)
    adv = normalize_advantages(group.rewards)
    _, grad, _ = loss_and_grad(pol, group, adv, cfg)
    oracle = np.zeros_like(grad)
    for i, c in enumerate(comps):
        lp_cur = policy_logprobs(pol, prompt, c)
        lp_beh = policy_logprobs(handle.behavior, prompt, c)
        prev = np.zeros_like(grad)
        for t in range(len(c)):
            cum = logprob_gradient(pol, prompt, c[:t + 1])
            rho = math.exp(lp_cur[t] - lp_beh[t])
            oracle += adv[i] * rho * (cum - prev) / len(c) / len(comps)
            prev = cum
    np.testing.assert_allclose(-grad, oracle, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("kl,clipped", [(0.0, False), (0.04, False), (0.2, True), (0.04, True)])
def test_check_gradients_small(kl, clipped):
    current, group, cfg = random_check_instance(11, kl_coeff=kl, clipped=clipped, width=4, hidden=4)
    assert check_gradients(current, group, cfg) < 1e-4


def test_clipped_branch_has_zero_surrogate_gradient():
    current, group, cfg = random_check_instance(5, kl_coeff=0.0, clipped=True)
    cfg = replace(cfg, ratio_mode="token")
    adv = normalize_advantages(group.rewards)
    rho = [np.exp(c - b) for c, b in zip(group.logp_current, group.logp_behavior)]
    _, dl, _ = surrogate_terms(group.logdist_current, group.completions, group.logp_behavior,
                               group.logdist_reference, adv, cfg)
    found = 0
    for i, r in enumerate(rho):
        for t, rt in enumerate(r):
            outside = (adv[i] > 0 and rt > 1 + cfg.clip_eps) or (adv[i] < 0 and rt < 1 - cfg.clip_eps)
            if outside:
                found += 1
                assert not np.any(dl[i][t])
    assert found > 0


def test_check_gradients_rejects_bad_step():
    current, group, cfg = random_check_instance(0)
    with pytest.raises(ValueError):
        check_gradients(current, group, cfg, h=1e-2)


# stepping -------------------------------------------------------------------

TASK = TagGrammarTask()


def _warm_policy(seed=0):
    pol = ToyPolicy.initialize(TASK.vocab_size, seed=seed, scale=1.0, width=8, hidden=8)
    sft_warmup(pol, TASK, 30, seed=seed)
    return pol


def _run(steps, cfg, reward_fn=TASK.reward, seed=0):
    handle = PolicyHandle(_warm_policy(seed))
    reps = [grpo_step(handle, TASK.prompts()[:3], reward_fn, cfg, step=s, eos=TASK.eos)
            for s in range(steps)]
    return handle, reps


def test_step_deterministic():
    cfg = GRPOConfig(seed=7, kl_coeff=0.04, max_grad_norm=0.5)
    h1, r1 = _run(2, cfg)
    h2, r2 = _run(2, cfg)
    assert not any(r.skipped for r in r1)
    assert [r.to_json() for r in r1] == [r.to_json() for r in r2]
    np.testing.assert_array_equal(h1.current.flat, h2.current.flat)


@pytest.mark.parametrize("beta", [0.0, 0.04])
def test_constant_reward_leaves_parameters(beta):
    cfg = GRPOConfig(seed=1, kl_coeff=beta)
    start = _warm_policy().flat.copy()
    handle, reps = _run(2, cfg, reward_fn=lambda p, c: 1.0)
    assert all(r.skipped and r.grad_norm == 0.0 for r in reps)
    np.testing.assert_array_equal(handle.current.flat, start)


@pytest.mark.parametrize("shift", [1.0, -0.75, 1024.0])
def test_reward_shift_bit_invariance(shift):
    cfg = GRPOConfig(seed=3, kl_coeff=0.04)
    h1, r1 = _run(1, cfg)
    h2, r2 = _run(1, cfg, reward_fn=lambda p, c: TASK.reward(p, c) + shift)
    assert not r1[0].skipped
    np.testing.assert_array_equal(h1.current.flat, h2.current.flat)
    assert r1[0].loss == r2[0].loss and r1[0].grad_norm == r2[0].grad_norm


def test_behavior_snapshot_refreshed():
    cfg = GRPOConfig(seed=2, kl_coeff=0.0)
    handle, reps = _run(3, cfg)
    assert not reps[-1].skipped
    assert not np.array_equal(handle.behavior.flat, handle.current.flat)
    handle.refresh_behavior()
    np.testing.assert_array_equal(handle.behavior.flat, handle.current.flat)
    assert handle.behavior is not handle.current


def test_evaluate_ranges():
    out = evaluate(_warm_policy(), TASK, samples_per_prompt=4)
    assert 0 <= out["format"] <= 1 and 0 <= out["accuracy"] <= 1
    assert out["total"] == pytest.approx(out["format"] + out["accuracy"])


def test_toy_task_reward_examples():
    t = TASK.token
    prompt = [t("<q>"), t("E")]
    good = [t("<think>"), t("hmm"), t("</think>"), t("<answer>"), t("E"), t("</answer>"), 0]
    assert TASK.decode(good) == "<think>hmm</think><answer>E</answer>"
    assert TASK.reward(prompt, good) == 2.0
    wrong = good[:4] + [t("F")] + good[5:]
    assert TASK.reward(prompt, wrong) == 1.0
    assert TASK.reward(prompt, [t("E"), 0]) == 0.0


# parameter file -------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    pol = ToyPolicy.initialize(12, seed=9, width=8, hidden=16)
    path = tmp_path / "p.bin"
    save_policy(pol, path)
    data = path.read_bytes()
    assert data[:4] == b"SRPL"
    back = load_policy(path)
    assert back.shapes == pol.shapes
    np.testing.assert_array_equal(back.flat, pol.flat.astype(np.float32).astype(np.float64))
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        load_policy(path)
