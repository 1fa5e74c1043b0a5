import numpy as np

import oracles
from pkd.distill import KdWeights, kd_loss
from pkd.graph import build_graph
from pkd.models import MODEL_KINDS, ModelParams, backward, forward, init_params, softmax
from pkd.rl import PpoTransition, RlConfig, policy_entropy, ppo_update
from pkd.training import cross_entropy_grad

TOL = 1e-4


def random_instance(rng, kind, n=12, f=5, h=4, c=3):
    edges = oracles.random_graph(rng, n, 0.3)
    g = build_graph(edges, rng.normal(size=(n, f)), rng.integers(c, size=n), class_count=c)
    params = init_params(kind, f, h, c, seed=int(rng.integers(10_000)))
    idx = np.sort(rng.choice(n, size=5, replace=False))
    labels = rng.integers(c, size=5)
    return g, params, idx, labels


def rebuild(kind, dims, tensors):
    return ModelParams(kind=kind, dims=dict(dims), tensors=tensors)


def test_backward_matches_finite_difference_for_every_kind():
    rng = np.random.default_rng(12)
    for kind in MODEL_KINDS:
        for _ in range(3):
            g, params, idx, labels = random_instance(rng, kind)
            out = forward(kind, params, g)
            _, d_logits = cross_entropy_grad(out, idx, labels)
            analytic = backward(kind, params, g, out.cache, d_logits)

            def loss_fn(tensors):
                res = forward(kind, rebuild(kind, params.dims, tensors), g)
                return float(-np.mean(np.log(res.probs[idx, labels])))

            numeric = oracles.central_difference(loss_fn, params.tensors)
            err = oracles.max_relative_error(analytic, numeric)
            assert err <= TOL, f"{kind}: max relative gradient error {err:.2e}"


def test_kd_loss_gradient_matches_finite_difference():
    rng = np.random.default_rng(21)
    for _ in range(5):
        n, c = 9, 4
        logits = rng.normal(size=(n, c)) * 2.0
        targets = oracles.random_prob_rows(rng, n, c)
        scope = np.sort(rng.choice(n, size=6, replace=False))
        gold_idx = scope[:2]
        gold_labels = rng.integers(c, size=2)
        w = KdWeights(alpha=0.7, beta=1.3, gamma=0.25)

        _, analytic = kd_loss(softmax(logits), targets, gold_idx, gold_labels, w, scope)

        def loss_fn(tensors):
            val, _ = kd_loss(softmax(tensors["z"]), targets, gold_idx, gold_labels, w, scope)
            return val

        numeric = oracles.central_difference(loss_fn, {"z": logits})
        err = oracles.max_relative_error({"z": analytic}, numeric)
        assert err <= TOL, f"kd_loss gradient error {err:.2e}"


def test_kd_loss_value_matches_scalar_oracle():
    rng = np.random.default_rng(33)
    for _ in range(10):
        n, c = 8, 3
        probs = oracles.random_prob_rows(rng, n, c)
        targets = oracles.random_prob_rows(rng, n, c)
        scope = np.sort(rng.choice(n, size=5, replace=False))
        gold_idx = scope[:3]
        gold_labels = rng.integers(c, size=3)
        w = KdWeights(alpha=0.5, beta=1.0, gamma=0.1)
        got, _ = kd_loss(probs, targets, gold_idx, gold_labels, w, scope)
        want = oracles.kd_loss_scalar(probs, targets, gold_idx, gold_labels,
                                      w.alpha, w.beta, w.gamma, scope)
        assert np.isclose(got, want, rtol=1e-10)


def make_transitions(rng, policy, value, states, keep_ratio_near_one=True):
    out = []
    pol = forward("mlp", policy, None, inputs=states)
    val = forward("mlp", value, None, inputs=states)
    for i, state in enumerate(states):
        probs = pol.probs[i]
        action = int(rng.integers(len(probs)))
        logp = float(np.log(probs[action]))
        offset = float(rng.uniform(-0.03, 0.03)) if keep_ratio_near_one else 0.0
        h = float(-np.sum(probs * np.log(probs)))
        out.append(PpoTransition(node=i, state=state, action=action,
                                 reward=float(rng.normal()), value=float(val.logits[i, 0]),
                                 old_logp=logp + offset, prob=float(probs[action]),
                                 entropy=h, acc=0.0, l_dl=0.0, l_ce=0.0))
    return out


def test_ppo_update_gradients_match_finite_difference():
    rng = np.random.default_rng(44)
    dim, b, n = 7, 3, 5            # five transitions keep advantages un-standardized
    states = rng.normal(size=(n, dim))
    cfg = RlConfig(lr_policy=1.0, lr_value=1.0, c2=0.05, eps_clip=0.2, epochs=1)

    policy = init_params("mlp", dim, 6, b, seed=3)
    value = init_params("mlp", dim, 6, 1, seed=4)
    transitions = make_transitions(rng, policy, value, states)
    adv = np.array([t.reward - t.value for t in transitions])
    old_logp = np.array([t.old_logp for t in transitions])
    actions = np.array([t.action for t in transitions])
    rewards = np.array([t.reward for t in transitions])

    pol_before = {k: v.copy() for k, v in policy.tensors.items()}
    val_before = {k: v.copy() for k, v in value.tensors.items()}
    ppo_update(policy, value, transitions, cfg)
    pol_grads = {k: pol_before[k] - policy.tensors[k] for k in pol_before}
    val_grads = {k: val_before[k] - value.tensors[k] for k in val_before}

    def policy_objective(tensors):
        res = forward("mlp", rebuild("mlp", policy.dims, tensors), None, inputs=states)
        new_logp = np.log(res.probs[np.arange(n), actions])
        l_a = oracles.ppo_policy_loss_scalar(new_logp, old_logp, adv, cfg.eps_clip)
        return l_a - cfg.c2 * policy_entropy(res.probs)

    def value_objective(tensors):
        res = forward("mlp", rebuild("mlp", value.dims, tensors), None, inputs=states)
        return float(np.mean((res.logits[:, 0] - rewards) ** 2))

    num_pol = oracles.central_difference(policy_objective, pol_before)
    num_val = oracles.central_difference(value_objective, val_before)
    assert oracles.max_relative_error(pol_grads, num_pol) <= TOL
    assert oracles.max_relative_error(val_grads, num_val) <= TOL


def test_cross_entropy_grad_matches_finite_difference():
    rng = np.random.default_rng(55)
    n, c = 7, 4
    logits = rng.normal(size=(n, c))
    idx = np.array([0, 2, 5])
    labels = rng.integers(c, size=3)

    class Res:
        pass

    res = Res()
    res.probs = softmax(logits)
    _, analytic = cross_entropy_grad(res, idx, labels)

    def loss_fn(tensors):
        p = softmax(tensors["z"])
        return float(-np.mean(np.log(p[idx, labels])))

    numeric = oracles.central_difference(loss_fn, {"z": logits})
    assert oracles.max_relative_error({"z": analytic}, numeric) <= TOL
