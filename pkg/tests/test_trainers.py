"""Trainer checks: targets, CQL algebra, loss gradients, tabular optimum."""

import math
from dataclasses import replace

import numpy as np
import pytest

from omrl import data, nn, trainers
from omrl.rng import seeded_rng


def bias_only_net(q_values, obs_dim=3):
    """Constant network: zero weights, output bias = q_values for any input."""
    q = np.asarray(q_values, dtype=float)
    hidden = 4
    return nn.MlpParams(
        (np.zeros((hidden, obs_dim)), np.zeros((q.size, hidden))),
        (np.zeros(hidden), q.copy()),
        obs_dim, q.size, (hidden,),
    )


def learner_from(q_net, lr=1e-3, target=None, behavior=None):
    ln = trainers.AgentLearner(q_net=q_net, target_net=(target or q_net).copy(),
                               opt=nn.adam_init(q_net, lr=lr))
    if behavior is not None:
        ln.behavior_net = behavior
        ln.behavior_opt = nn.adam_init(behavior, lr=1e-3)
    return ln


def random_learners(n_agents, obs_dim, n_actions, seed, hidden=(6, 5), behavior=False):
    rng = seeded_rng(seed, "learners")
    out = []
    for _ in range(n_agents):
        q = nn.init_params(obs_dim, n_actions, hidden, rng)
        q = nn.MlpParams(q.layer_weights,
                         tuple(rng.uniform(-0.3, 0.3, b.shape) for b in q.layer_biases),
                         q.in_dim, q.out_dim, q.hidden_dims)
        t = nn.init_params(obs_dim, n_actions, hidden, rng)
        b = None
        if behavior:
            b = nn.init_params(obs_dim, n_actions, hidden, rng)
        out.append(learner_from(q, target=t, behavior=b))
    return out


def random_batch(n_agents, obs_dim, n_actions, bsz, seed):
    rng = seeded_rng(seed, "batch")
    return {
        "obs": rng.normal(size=(n_agents, bsz, obs_dim)),
        "actions": rng.integers(n_actions, size=(n_agents, bsz)),
        "reward": rng.normal(size=bsz),
        "next_obs": rng.normal(size=(n_agents, bsz, obs_dim)),
        "done": (rng.uniform(size=bsz) < 0.2).astype(float),
    }


def toy_offline_dataset(n, obs_dim, n_actions, seed, n_agents=1):
    rng = seeded_rng(seed, "ds")
    trs = [
        data.Transition(
            obs=tuple(rng.normal(size=obs_dim) for _ in range(n_agents)),
            actions=tuple(int(rng.integers(n_actions)) for _ in range(n_agents)),
            reward=float(rng.normal()),
            next_obs=tuple(rng.normal(size=obs_dim) for _ in range(n_agents)),
            done=False,
            t=i,
        )
        for i in range(n)
    ]
    return data.build_dataset("toy", "0" * 16, None, trs, {}, n_actions)


# -------------------------------------------------------------- td targets

def test_td_targets_terminal_and_zero_gamma():
    learners = [learner_from(bias_only_net([1.0, 3.0]))]
    batch = random_batch(1, 3, 2, 6, seed=1)
    batch["done"] = np.ones(6)
    y = trainers.td_targets(batch, learners, "independent", gamma=0.9)
    assert np.array_equal(y[0], batch["reward"])
    batch["done"] = np.zeros(6)
    y = trainers.td_targets(batch, learners, "independent", gamma=0.0)
    assert np.array_equal(y[0], batch["reward"])


def test_td_targets_hand_enumeration_two_agents():
    learners = [learner_from(bias_only_net([1.0, 3.0])), learner_from(bias_only_net([2.0, 5.0]))]
    batch = random_batch(2, 3, 2, 4, seed=2)
    batch["reward"] = np.array([1.0, 2.0, 3.0, 4.0])
    batch["done"] = np.array([0.0, 0.0, 1.0, 0.0])
    y_ind = trainers.td_targets(batch, learners, "independent", gamma=0.5)
    assert np.allclose(y_ind[0], [1 + 0.5 * 3, 2 + 0.5 * 3, 3.0, 4 + 0.5 * 3])
    assert np.allclose(y_ind[1], [1 + 0.5 * 5, 2 + 0.5 * 5, 3.0, 4 + 0.5 * 5])
    y_ctde = trainers.td_targets(batch, learners, "ctde", gamma=0.5)
    assert np.allclose(y_ctde, [1 + 0.5 * 8, 2 + 0.5 * 8, 3.0, 4 + 0.5 * 8])


def test_bcq_targets_respect_behavior_mask():
    # behavior strongly prefers action 0, so the bootstrap must ignore q=9 at action 1
    q_target = bias_only_net([1.0, 9.0])
    behavior = bias_only_net([5.0, 0.0])
    ln = trainers.AgentLearner(q_net=q_target.copy(), target_net=q_target,
                               opt=nn.adam_init(q_target), behavior_net=behavior,
                               behavior_opt=nn.adam_init(behavior))
    batch = random_batch(1, 3, 2, 5, seed=3)
    batch["done"] = np.zeros(5)
    batch["reward"] = np.zeros(5)
    y = trainers.td_targets(batch, [ln], "independent", gamma=1.0, bcq_tau=0.3)
    # ratio for action 1 = exp(-5) < 0.3 -> masked out; bootstrap = q[0] = 1
    assert np.allclose(y[0], 1.0)
    y_loose = trainers.td_targets(batch, [ln], "independent", gamma=1.0, bcq_tau=math.exp(-5) / 2)
    assert np.allclose(y_loose[0], 9.0)


# ------------------------------------------------------------- cql penalty

def test_cql_penalty_closed_forms():
    assert trainers.cql_penalty(np.full(5, 2.2), 3) == pytest.approx(math.log(5), rel=1e-12)
    assert trainers.cql_penalty(np.array([10.0, 0.0]), 0) == pytest.approx(
        math.log1p(math.exp(-10.0)), rel=1e-9
    )


def test_cql_penalty_nonnegative_on_random_rows():
    rng = seeded_rng(4, "rows")
    for _ in range(10_000):
        n = int(rng.integers(2, 12))
        row = rng.normal(scale=10.0, size=n)
        assert trainers.cql_penalty(row, int(rng.integers(n))) >= 0.0


# ---------------------------------------------------------- loss closed form

def test_cql_alpha_zero_equals_dqn_bitwise():
    learners = random_learners(2, 4, 3, seed=5)
    batch = random_batch(2, 4, 3, 8, seed=6)
    for mode in ("independent", "ctde"):
        cfg0 = trainers.TrainerConfig(algo="cql", mode=mode, cql_alpha=0.0, gamma=0.8)
        cfgd = trainers.TrainerConfig(algo="dqn", mode=mode, gamma=0.8)
        out_cql = trainers.loss_and_grads("cql", batch, learners, cfg0)
        out_dqn = trainers.loss_and_grads("dqn", batch, learners, cfgd)
        for a, b in zip(out_cql, out_dqn):
            assert a.loss == b.loss
            for ga, gb in zip(a.grads.layer_weights + a.grads.layer_biases,
                              b.grads.layer_weights + b.grads.layer_biases):
                assert np.array_equal(ga, gb)


def test_loss_affine_in_alpha():
    learners = random_learners(2, 4, 3, seed=7)
    batch = random_batch(2, 4, 3, 16, seed=8)
    for mode in ("independent", "ctde"):
        outs = {}
        for alpha in (0.0, 2.5):
            cfg = trainers.TrainerConfig(algo="cql", mode=mode, cql_alpha=alpha, gamma=0.9)
            outs[alpha] = trainers.loss_and_grads("cql", batch, learners, cfg)
        for i, (o0, o1) in enumerate(zip(outs[0.0], outs[2.5])):
            if mode == "independent":
                expected = o0.loss + 2.5 * o1.penalty
            else:
                expected = o0.loss + 2.5 * sum(o.penalty for o in outs[2.5])
            assert abs(o1.loss - expected) < 1e-10


def test_single_transition_hand_loss():
    # one agent, one sample, constant nets: everything computable by hand
    q_net = bias_only_net([2.0, -1.0])
    target = bias_only_net([0.5, 1.5])
    ln = learner_from(q_net, target=target)
    batch = {
        "obs": np.zeros((1, 1, 3)),
        "actions": np.array([[0]]),
        "reward": np.array([1.0]),
        "next_obs": np.zeros((1, 1, 3)),
        "done": np.array([0.0]),
    }
    cfg = trainers.TrainerConfig(algo="cql", mode="independent", cql_alpha=3.0,
                                 gamma=0.5, huber_delta=1.0)
    (out,) = trainers.loss_and_grads("cql", batch, [ln], cfg)
    resid = 2.0 - (1.0 + 0.5 * 1.5)      # q(data) - y = 0.25
    expected_td = 0.5 * resid**2
    expected_pen = math.log(math.exp(2.0) + math.exp(-1.0)) - 2.0
    assert out.penalty == pytest.approx(expected_pen, rel=1e-12)
    assert out.loss == pytest.approx(expected_td + 3.0 * expected_pen, rel=1e-12)


def test_ctde_additivity_of_qtot():
    learners = random_learners(3, 4, 5, seed=9)
    batch = random_batch(3, 4, 5, 6, seed=10)
    rows = np.arange(6)
    q_taken = [
        nn.forward(learners[i].q_net, batch["obs"][i])[rows, batch["actions"][i]]
        for i in range(3)
    ]
    q_tot = np.sum(q_taken, axis=0)
    manual = sum(
        float(nn.forward(learners[i].q_net, batch["obs"][i][None, 2].reshape(1, -1))[0, batch["actions"][i][2]])
        for i in range(3)
    )
    assert q_tot[2] == pytest.approx(manual, rel=1e-12)


# ------------------------------------------------- finite-difference oracle

def fd_loss_grad(algo, batch, learners, cfg, agent, h=1e-5):
    """Central differences of the scalar loss w.r.t. one agent's q-net."""

    def loss_with(params):
        patched = [
            trainers.AgentLearner(
                q_net=params if i == agent else learners[i].q_net,
                target_net=learners[i].target_net,
                opt=learners[i].opt,
                behavior_net=learners[i].behavior_net,
                behavior_opt=learners[i].behavior_opt,
            )
            for i in range(len(learners))
        ]
        return trainers.loss_and_grads(algo, batch, patched, cfg)[agent].loss

    base = learners[agent].q_net
    gw, gb = [], []
    for li in range(base.n_layers):
        for store, attr in ((gw, "layer_weights"), (gb, "layer_biases")):
            arr = getattr(base, attr)[li]
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                vals = []
                for sign in (+h, -h):
                    mod = [a.copy() for a in getattr(base, attr)]
                    mod[li][idx] += sign
                    kwargs = {attr: tuple(mod)}
                    p2 = nn.MlpParams(**{
                        "layer_weights": base.layer_weights,
                        "layer_biases": base.layer_biases,
                        "in_dim": base.in_dim,
                        "out_dim": base.out_dim,
                        "hidden_dims": base.hidden_dims,
                        **kwargs,
                    })
                    vals.append(loss_with(p2))
                g[idx] = (vals[0] - vals[1]) / (2 * h)
            store.append(g)
    return nn.GradBundle(tuple(gw), tuple(gb))


@pytest.mark.parametrize("algo,mode", [
    ("dqn", "independent"), ("dqn", "ctde"),
    ("cql", "independent"), ("cql", "ctde"),
    ("bcq", "independent"), ("bc", "independent"),
])
def test_loss_gradients_match_finite_differences(algo, mode):
    learners = random_learners(2, 3, 3, seed=11, hidden=(4,), behavior=(algo == "bcq"))
    batch = random_batch(2, 3, 3, 4, seed=12)
    cfg = trainers.TrainerConfig(algo=algo, mode=mode, cql_alpha=1.7, bcq_tau=0.3,
                                 gamma=0.9, huber_delta=5.0)
    outs = trainers.loss_and_grads(algo, batch, learners, cfg)
    for agent in range(2):
        numeric = fd_loss_grad(algo, batch, learners, cfg, agent)
        for a, b in zip(outs[agent].grads.layer_weights + outs[agent].grads.layer_biases,
                        numeric.layer_weights + numeric.layer_biases):
            denom = np.maximum(np.abs(b), 1e-2)
            assert np.max(np.abs(a - b) / denom) <= 1e-4


# ----------------------------------------------------------- greedy action

def test_greedy_action_rules():
    net = bias_only_net([1.0, 3.0, 2.0])
    obs = np.zeros(3)
    assert trainers.greedy_action(net, obs) == 1
    assert trainers.greedy_action(bias_only_net([2.0, 2.0, 2.0]), obs) == 0
    shifted = bias_only_net([1.0 + 7.5, 3.0 + 7.5, 2.0 + 7.5])
    assert trainers.greedy_action(shifted, obs) == 1


# ------------------------------------------------------------ train_offline

def test_train_zero_epochs_returns_init():
    ds = toy_offline_dataset(50, 4, 3, seed=13)
    cfg = trainers.TrainerConfig(algo="cql", epochs=0, hidden_dims=(8,), seed=3)
    nets, curve = trainers.train_offline(ds, cfg)
    ref = trainers.init_learners(1, 4, 3, cfg, seeded_rng(3, "train-init"))
    assert curve.points == ()
    for a, b in zip(nets[0].layer_weights, ref[0].q_net.layer_weights):
        assert np.array_equal(a, b)


def test_train_deterministic():
    ds = toy_offline_dataset(60, 4, 3, seed=14)
    cfg = trainers.TrainerConfig(algo="cql", epochs=3, hidden_dims=(8,), batch_size=16, seed=5)
    n1, c1 = trainers.train_offline(ds, cfg)
    n2, c2 = trainers.train_offline(ds, cfg)
    for a, b in zip(n1[0].layer_weights, n2[0].layer_weights):
        assert np.array_equal(a, b)
    assert c1 == c2


def test_train_does_not_touch_dataset():
    ds = toy_offline_dataset(40, 4, 3, seed=15)
    before = ds.transitions
    trainers.train_offline(ds, trainers.TrainerConfig(algo="dqn", epochs=2, hidden_dims=(8,)))
    assert ds.transitions is before and len(ds.transitions) == 40


def value_iteration(rewards, transitions, gamma, iters=2000):
    q = np.zeros((2, 2))
    for _ in range(iters):
        q = rewards + gamma * q.max(axis=1)[transitions]
    return q


def two_state_mdp_dataset(n=512, seed=16):
    # states 0/1, action 0 = stay, action 1 = switch; idling at 1 pays best
    rewards = np.array([[0.3, 0.0], [1.0, 0.0]])
    transitions = np.array([[0, 1], [1, 0]])
    obs = {0: np.array([1.0, -1.0]), 1: np.array([-1.0, 1.0])}
    rng = seeded_rng(seed, "mdp")
    s = 0
    trs = []
    for i in range(n):
        a = int(rng.integers(2))
        s2 = transitions[s, a]
        trs.append(data.Transition((obs[s],), (a,), float(rewards[s, a]),
                                   (obs[s2],), False, i))
        s = int(s2)
    ds = data.build_dataset("toy", "0" * 16, None, trs, {}, 2)
    return ds, rewards, transitions, obs


@pytest.mark.parametrize("algo,alpha", [("dqn", 0.0), ("cql", 1.0)])
def test_tabular_mdp_recovers_value_iteration_optimum(algo, alpha):
    ds, rewards, transitions, obs = two_state_mdp_dataset()
    q_star = value_iteration(rewards, transitions, gamma=0.9)
    optimal = q_star.argmax(axis=1)
    cfg = trainers.TrainerConfig(
        algo=algo, mode="independent", cql_alpha=alpha, gamma=0.9, lr=3e-3,
        batch_size=64, epochs=200, target_sync_every=50, hidden_dims=(32, 32), seed=7,
    )
    nets, _ = trainers.train_offline(ds, cfg)
    got = [trainers.greedy_action(nets[0], obs[s]) for s in (0, 1)]
    assert got == list(optimal)


# ------------------------------------------------------------ fit_behavior

def test_fit_behavior_degenerate_action():
    rng = seeded_rng(17, "ds")
    trs = [
        data.Transition((rng.normal(size=3),), (2,), 0.0, (rng.normal(size=3),), False, i)
        for i in range(200)
    ]
    ds = data.build_dataset("toy", "0" * 16, None, trs, {}, 4)
    cfg = trainers.TrainerConfig(hidden_dims=(16,), behavior_lr=5e-2, batch_size=64, seed=9)
    (net,) = trainers.fit_behavior(ds, cfg, epochs=60)
    probs = nn.softmax(nn.forward(net, np.stack([tr.obs[0] for tr in trs[:50]])))
    assert probs[:, 2].min() >= 0.99


def test_fit_behavior_uniform_actions():
    rng = seeded_rng(18, "ds")
    trs = [
        data.Transition((rng.normal(size=3),), (i % 4,), 0.0, (rng.normal(size=3),), False, i)
        for i in range(400)
    ]
    ds = data.build_dataset("toy", "0" * 16, None, trs, {}, 4)
    cfg = trainers.TrainerConfig(hidden_dims=(16,), behavior_lr=1e-2, batch_size=64, seed=11)
    (net,) = trainers.fit_behavior(ds, cfg, epochs=40)
    probs = nn.softmax(nn.forward(net, np.stack([tr.obs[0] for tr in trs[:100]])))
    kl = np.mean(np.sum(probs * np.log(probs * 4.0), axis=1))
    assert kl <= 0.05


def test_fit_behavior_deterministic():
    ds = toy_offline_dataset(50, 3, 4, seed=19)
    cfg = trainers.TrainerConfig(hidden_dims=(8,), seed=13)
    (a,) = trainers.fit_behavior(ds, cfg, epochs=3)
    (b,) = trainers.fit_behavior(ds, cfg, epochs=3)
    for x, y in zip(a.layer_weights, b.layer_weights):
        assert np.array_equal(x, y)
