import itertools
import math

import numpy as np
import pytest
from scipy.stats import binom

from goldilocks import grpo, students
from goldilocks.grpo import RewardConfig
from goldilocks.students import (
    IrtStudent,
    PolicyStudent,
    Question,
    evaluate,
    exact_expected_gradient,
    generate_dataset,
    load_dataset,
    make_calibrated_policy,
    rollout_group,
    save_dataset,
    student_update,
    true_success_prob,
)

from helpers import central_difference, pearson, relative_error

REWARDS = RewardConfig()


# ---------------------------------------------------------------------------
# datasets


def test_generate_dataset_is_deterministic(tmp_path):
    a = generate_dataset("irt", 50, 7)
    b = generate_dataset("irt", 50, 7)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(a, pa)
    save_dataset(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_generate_dataset_rejects_bad_sizes():
    with pytest.raises(ValueError):
        generate_dataset("irt", 0, 1)
    with pytest.raises(ValueError):
        generate_dataset("nope", 5, 1)


def test_arithmetic_answers_follow_modular_rule():
    qs = generate_dataset("arithmetic", 400, 3, vocab=10)
    pairs = set()
    for q in qs:
        a, b = q.payload["a"], q.payload["b"]
        assert q.payload["answer"] == [(a + b) % 10]
        pairs.add((a, b))
    # explicit plain and wraparound instances
    assert (3, 4) in pairs and (7, 6) in pairs
    hit = next(q for q in qs if (q.payload["a"], q.payload["b"]) == (3, 4))
    assert hit.payload["answer"] == [7]
    hit = next(q for q in qs if (q.payload["a"], q.payload["b"]) == (7, 6))
    assert hit.payload["answer"] == [3]


def test_irt_features_observe_difficulty_noisily():
    qs = generate_dataset("irt", 2000, 11, noise_sigma=0.25)
    diffs = np.array([q.difficulty for q in qs])
    obs = np.array([q.features[0] for q in qs])
    resid = obs - diffs
    assert abs(resid.mean()) < 0.03
    assert abs(resid.std() - 0.25) < 0.02
    # distractors carry no difficulty signal
    distract = np.array([q.features[1] for q in qs])
    assert abs(pearson(distract, diffs)) < 0.08


def test_dataset_round_trip_is_bit_exact(tmp_path):
    for kind in ("irt", "arithmetic"):
        qs = generate_dataset(kind, 40, 5)
        path = tmp_path / f"{kind}.jsonl"
        save_dataset(qs, path)
        loaded = load_dataset(path)
        assert len(loaded) == len(qs)
        for orig, back in zip(qs, loaded):
            assert back.id == orig.id
            assert back.difficulty == orig.difficulty
            assert back.payload == orig.payload
            np.testing.assert_array_equal(back.features, orig.features)
        # and byte-stable through a second save
        path2 = tmp_path / f"{kind}2.jsonl"
        save_dataset(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()


# ---------------------------------------------------------------------------
# IRT student


def test_irt_success_prob_symmetry_point():
    student = IrtStudent(skill=1.3)
    q = Question(id=0, features=np.zeros(2), difficulty=1.3, payload={})
    assert true_success_prob(student, q) == 0.5


def test_irt_success_prob_log3():
    student = IrtStudent(skill=math.log(3.0), discrimination=1.0)
    q = Question(id=0, features=np.zeros(2), difficulty=0.0, payload={})
    assert true_success_prob(student, q) == pytest.approx(0.75, abs=1e-12)


def test_irt_rollout_deterministic_and_binomial():
    student = IrtStudent(skill=0.0)
    q = Question(id=3, features=np.zeros(2), difficulty=0.0, payload={})
    g1, s1 = rollout_group(student, q, 16, 5, REWARDS, seed=9)
    g2, _ = rollout_group(student, q, 16, 5, REWARDS, seed=9)
    np.testing.assert_array_equal(g1.rewards_ver, g2.rewards_ver)
    assert s1.outputs.shape == (16, 0)

    # p=0.5, G=16: mean p_hat over many repetitions within 3 sigma
    reps = 10_000
    total = 0
    for step in range(reps):
        g, _ = rollout_group(student, q, 16, step, REWARDS, seed=1)
        total += int(g.rewards_ver.sum())
    p_hat = total / (16 * reps)
    sigma = math.sqrt(0.25 / (16 * reps))
    assert abs(p_hat - 0.5) < 3 * sigma


def test_irt_rollout_forced_certainty():
    student = IrtStudent(skill=800.0)
    q = Question(id=0, features=np.zeros(2), difficulty=0.0, payload={})
    group, _ = rollout_group(student, q, 16, 0, REWARDS, seed=2)
    assert group.rewards_ver.sum() == 16


def test_irt_update_examples():
    q = Question(id=0, features=np.zeros(2), difficulty=0.0, payload={})
    for p_hat in (0.0, 1.0):
        student = IrtStudent(skill=0.0, learn_rate=0.1)
        adv = grpo.AdvantageSet(advantages=np.zeros(4), empirical_p=p_hat, group_std=0.0)
        student_update(student, q, adv, None)
        assert student.skill == 0.0
    student = IrtStudent(skill=0.0, learn_rate=0.1)
    adv = grpo.AdvantageSet(advantages=np.zeros(4), empirical_p=0.5, group_std=0.5)
    student_update(student, q, adv, None, lr=0.1)
    assert student.skill == pytest.approx(0.05, abs=0)


def test_irt_monotone_and_maximized_at_half():
    # expected increment E[sqrt(p_hat(1-p_hat))] from the exact binomial law,
    # swept over success probabilities: positive everywhere, peak at p=0.5
    g = 16
    ks = np.arange(g + 1)
    utils = np.sqrt(ks / g * (1 - ks / g))
    ps = np.round(np.arange(0.1, 0.91, 0.1), 2)
    expected = np.array([float(binom.pmf(ks, g, p) @ utils) for p in ps])
    assert (expected > 0).all()
    assert np.argmax(expected) == np.flatnonzero(ps == 0.5)[0]
    # symmetric in p
    np.testing.assert_allclose(expected, expected[::-1], atol=1e-12)


def test_irt_evaluate_exact_and_saturated():
    qs = generate_dataset("irt", 300, 20, difficulty_dist="normal",
                          difficulty_mean=0.0, difficulty_sd=1.0)
    sharp = IrtStudent(skill=1000.0)
    assert sharp.evaluate(qs) > 0.999

    student = IrtStudent(skill=0.4, discrimination=1.7)
    exact = student.evaluate(qs)
    rng = np.random.default_rng(0)
    n_mc = 100_000
    hits = 0
    probs = np.array([student.success_prob(q) for q in qs])
    draws = rng.random((n_mc // len(qs) + 1, len(qs))) < probs
    mc = float(draws.mean())
    sigma = math.sqrt(exact * (1 - exact) / draws.size)
    assert abs(mc - exact) < 3 * sigma

    with pytest.raises(ValueError):
        student.evaluate([])


# ---------------------------------------------------------------------------
# policy student


def test_policy_success_prob_matches_monte_carlo():
    policy, questions = make_calibrated_policy([0.3], vocab=6)
    q = questions[0]
    exact = true_success_prob(policy, q)
    assert exact == pytest.approx(0.3, abs=1e-12)
    n = 100_000
    rng = np.random.default_rng(8)
    draws = rng.choice(6, size=n, p=policy.token_probs(q))
    mc = float(np.mean(draws == 0))
    sigma = math.sqrt(exact * (1 - exact) / n)
    assert abs(mc - exact) < 3 * sigma


def test_policy_rollout_rewards_and_determinism():
    policy = PolicyStudent.initialize(4, 5, seed=3, seq_len=1)
    qs = generate_dataset("arithmetic", 10, 4, vocab=5, feature_dim=4)
    g1, s1 = rollout_group(policy, qs[0], 8, 2, REWARDS, seed=6)
    g2, s2 = rollout_group(policy, qs[0], 8, 2, REWARDS, seed=6)
    np.testing.assert_array_equal(s1.outputs, s2.outputs)
    np.testing.assert_array_equal(g1.rewards_ver, g2.rewards_ver)
    key = qs[0].payload["answer"]
    expect = (s1.outputs[:, 0] == key[0]).astype(int)
    np.testing.assert_array_equal(g1.rewards_ver, expect)


def test_policy_loss_decreases_after_update():
    policy = PolicyStudent.initialize(4, 5, seed=3, seq_len=1, learn_rate=0.05)
    qs = generate_dataset("arithmetic", 10, 4, vocab=5, feature_dim=4)
    q = qs[0]
    group, sampled = rollout_group(policy, q, 8, 1, REWARDS, seed=1)
    adv = grpo.group_advantages(group)
    assert adv.group_std > 0.0
    loss_before, grad = policy.update_contribution(sampled, adv, grpo.LossConfig())
    policy.apply_gradients([grad])
    loss_after, _ = policy.update_contribution(sampled, adv, grpo.LossConfig())
    assert loss_after < loss_before


def test_policy_evaluate_greedy():
    # construct a policy that puts the bulk of the mass on each answer token
    qs = generate_dataset("arithmetic", 30, 9, vocab=4, feature_dim=6)
    policy = PolicyStudent.initialize(6, 4, seed=1)
    for q in qs:
        probs = policy.token_probs(q)
        assert probs.shape == (4,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    perfect, cal_qs = make_calibrated_policy([0.9, 0.9, 0.9], vocab=4)
    assert evaluate(perfect, cal_qs) == 1.0


def test_policy_entropy_matches_enumeration():
    rng = np.random.default_rng(12)
    policy = PolicyStudent(params=rng.normal(size=(3, 4)), seq_len=2,
                           temperature_train=0.9)
    q = Question(id=0, features=rng.normal(size=3), difficulty=0.0,
                 payload={"answer": [0, 0]})
    h, _ = policy.entropy_and_grad(q)
    probs = policy.token_probs(q)
    brute = 0.0
    for seq in itertools.product(range(4), repeat=2):
        p_seq = probs[seq[0]] * probs[seq[1]]
        brute -= p_seq * math.log(p_seq)
    assert h == pytest.approx(brute, abs=1e-12)


def test_policy_gradient_matches_finite_differences_at_random_points():
    rng = np.random.default_rng(99)
    failures = 0
    for trial in range(20):
        policy = PolicyStudent(params=rng.normal(size=(3, 4)),
                               seq_len=1, temperature_train=0.7)
        q = Question(id=trial, features=rng.normal(size=3), difficulty=0.0,
                     payload={"answer": [0]})
        outputs = rng.integers(0, 4, size=(6, 1))
        from goldilocks.students import SampledGroup
        group = SampledGroup(question=q, outputs=outputs, log_probs=np.zeros((6, 1)))
        advantages = rng.normal(size=6)
        adv = grpo.AdvantageSet(advantages=advantages, empirical_p=0.5, group_std=1.0)

        def f(flat):
            saved = policy.params.copy()
            policy.params = flat.reshape(3, 4)
            try:
                loss, _ = grpo.grpo_loss_and_gradient(policy, group, adv)
            finally:
                policy.params = saved
            return loss

        _, grad = grpo.grpo_loss_and_gradient(policy, group, adv)
        fd = central_difference(f, policy.params.ravel()).reshape(3, 4)
        if relative_error(grad, fd) >= 1e-4:
            failures += 1
    assert failures == 0


# ---------------------------------------------------------------------------
# gradient-norm law


def test_gradient_norm_law_exact_expectation():
    # with per-question one-hot features and fill distributions, the exact
    # expected gradient norm equals sqrt(p(1-p)) * sqrt(V/(V-1)) identically
    ps = [round(0.1 * k, 1) for k in range(1, 10)]
    vocab = 8
    policy, questions = make_calibrated_policy(ps, vocab=vocab)
    norms = []
    for q in questions:
        grad = exact_expected_gradient(policy, q)
        norms.append(float(np.linalg.norm(grad)))
    utilities = [grpo.utility_score(p) for p in ps]
    scale = math.sqrt(vocab / (vocab - 1))
    np.testing.assert_allclose(norms, np.asarray(utilities) * scale, rtol=1e-10)
    assert pearson(norms, utilities) > 0.999999


def test_gradient_norm_law_monte_carlo():
    # measured gradients averaged over sampled groups, against sqrt(p(1-p))
    ps = [round(0.1 * k, 1) for k in range(1, 10)]
    policy, questions = make_calibrated_policy(ps, vocab=8)
    norms = []
    for q in questions:
        acc = np.zeros_like(policy.params)
        n_groups = 400
        for rep in range(n_groups):
            group, sampled = policy.rollout(q, 16, rep, REWARDS, seed=13)
            adv = grpo.group_advantages(group)
            _, grad = grpo.grpo_loss_and_gradient(policy, sampled, adv)
            acc += grad
        norms.append(float(np.linalg.norm(acc / n_groups)))
    utilities = [grpo.utility_score(p) for p in ps]
    assert pearson(norms, utilities) > 0.99
