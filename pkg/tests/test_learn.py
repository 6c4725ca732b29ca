import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypergroup import env as ppenv
from hypergroup import hypergraph as hgx
from hypergroup import tensor as T
from hypergroup.config import LossWeights, parse_text
from hypergroup.learn import Trainer, TrainingAborted, evaluate, select_actions, train_run
from hypergroup.learn import losses
from hypergroup.learn import nets
from hypergroup.learn.buffer import Episode, ReplayBuffer, Transition, pad_episodes
from hypergroup.learn.train import GroupingTracker, linear_epsilon
from hypergroup.spectral import Grouping, SpectralConfig
from hypergroup.tensor import GradTape, Tensor

TINY = """
[env]
grid = 5
n_predators = 3
max_steps = 12
[spectral]
k_max = 2
interval = 10
window_len = 4
[model]
hidden = 8
hgcn_out = 6
att_dim = 4
critic_hidden = 8
mixer_embed = 4
[learn]
mode = {mode}
episodes = {episodes}
batch_size = 24
value_batch = 4
target_update = 3
"""


def tiny(mode="policy", episodes=8, **overrides):
    return parse_text(TINY.format(mode=mode, episodes=episodes),
                      {k.replace("__", "."): str(v) for k, v in overrides.items()})


def zeroed(params):
    for p in params.values():
        p.data[...] = 0.0


def rng(seed=0):
    return np.random.default_rng(seed)


# -- encoder and heads --------------------------------------------------------------------------
def test_encoder_zero_weights_zero_embeddings():
    enc = nets.AgentEncoder(rng(), 5, 4)
    zeroed(enc.named())
    emb, nxt = nets.encode(enc, Tensor(rng(1).normal(size=(3, 5))), enc.initial_hidden(3))
    assert np.array_equal(emb.data, np.zeros((3, 4))) and nxt is emb


def test_encoder_depends_on_hidden_and_resets_to_zero():
    enc = nets.AgentEncoder(rng(), 5, 4)
    obs = Tensor(rng(1).normal(size=(2, 5)))
    a = enc(obs, enc.initial_hidden(2)).data
    b = enc(obs, Tensor(np.full((2, 4), 0.5))).data
    assert not np.allclose(a, b)
    assert np.array_equal(enc.initial_hidden(2).data, np.zeros((2, 4)))


def test_q_values_examples():
    heads = nets.ValueHeads(rng(), 4, 3, 5)
    emb, h = Tensor(rng(1).normal(size=(2, 4))), Tensor(rng(2).normal(size=(2, 3)))
    q = nets.q_values(heads, emb, h)
    assert q.shape == (2, 5)
    assert not np.allclose(q.data, nets.q_values(heads, emb, Tensor(np.zeros((2, 3)))).data)
    zeroed(heads.named())
    assert np.array_equal(nets.q_values(heads, emb, h).data, np.zeros((2, 5)))


def test_policy_probs_examples():
    heads = nets.PolicyHeads(rng(), 4, 3, 7, 5)
    emb, h = Tensor(rng(1).normal(0, 3, (4, 4))), Tensor(rng(2).normal(0, 3, (4, 3)))
    p = nets.policy_probs(heads, emb, h).data
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12 and np.all(p > 0)
    zeroed(heads.named())
    assert np.allclose(nets.policy_probs(heads, emb, h).data, 0.2)


def test_critic_value_examples():
    n = 3
    heads = nets.PolicyHeads(rng(), 4, 3, 7, 5)
    state = Tensor(rng(1).normal(size=(2, 7)))
    h = rng(2).normal(size=(2 * n, 3))
    v = nets.critic_value(heads, state, Tensor(h), n).data
    perm = np.concatenate([[2, 0, 1], [4, 5, 3]])
    assert np.allclose(nets.critic_value(heads, state, Tensor(h[perm]), n).data, v, atol=1e-14)
    leaves = list(heads.named().values())
    assert T.grad_check(lambda _: T.sum_(nets.critic_value(heads, state, Tensor(h), n)), leaves) < 1e-4
    zeroed(heads.named())
    assert np.array_equal(nets.critic_value(heads, state, Tensor(h), n).data, np.zeros((2, 1)))


def test_rows_to_matrix_layout():
    col = Tensor(np.arange(6.0).reshape(6, 1))
    assert np.array_equal(nets.rows_to_matrix(col, 2, 3).data, [[0, 1, 2], [3, 4, 5]])


# -- mixer ----------------------------------------------------------------------------------------
def test_mix_zero_hypernets_zero_output():
    mixer = nets.MixingNetwork(rng(), 3, 5, 4)
    zeroed(mixer.named())
    out = nets.mix(mixer, Tensor(rng(1).normal(size=(2, 3))), Tensor(rng(2).normal(size=(2, 5))))
    assert np.array_equal(out.data, np.zeros((2, 1)))


def test_mix_rejects_mismatched_batches():
    mixer = nets.MixingNetwork(rng(), 3, 5, 4)
    with pytest.raises(T.ShapeError):
        nets.mix(mixer, Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 5))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 5))
def test_mix_monotone(seed, n):
    r = rng(seed)
    mixer = nets.MixingNetwork(r, n, 4, 6)
    q = Tensor(r.normal(0, 3, (3, n)), requires_grad=True)
    s = Tensor(r.normal(size=(3, 4)))
    with GradTape():
        out = nets.mix(mixer, q, s)
        T.backward(T.sum_(out))
    assert np.all(q.grad >= 0)
    i = r.integers(n)
    bumped = q.data.copy()
    bumped[:, i] += 1.0
    assert np.all(nets.mix(mixer, Tensor(bumped), s).data >= out.data - 1e-12)


# -- task losses -----------------------------------------------------------------------------------------
def test_td_loss_gamma_zero():
    q = Tensor([[0.5], [-1.0]])
    r = np.array([[1.0], [0.0]])
    targets = losses.td_targets(r, np.zeros((2, 1)), np.array([[7.0], [7.0]]), 0.0)
    assert losses.td_loss(q, targets).item() == pytest.approx(np.mean((r - q.data) ** 2))


def test_td_loss_zero_networks():
    q = Tensor(np.zeros((4, 1)))
    targets = losses.td_targets(np.full((4, 1), -0.25), np.zeros((4, 1)), np.zeros((4, 1)), 0.99)
    assert losses.td_loss(q, targets).item() == pytest.approx(0.0625)


def test_td_loss_bellman_fixpoint_and_terminal():
    r, nxt = np.array([[1.0], [2.0]]), np.array([[3.0], [5.0]])
    done = np.array([[0.0], [1.0]])
    targets = losses.td_targets(r, done, nxt, 0.9)
    assert np.allclose(targets, [[1 + 0.9 * 3], [2.0]])
    assert losses.td_loss(Tensor(targets.copy()), targets).item() == 0.0


def test_td_loss_mask():
    q = Tensor([[1.0], [100.0]])
    assert losses.td_loss(q, [[0.0], [0.0]], mask=[[1.0], [0.0]]).item() == 1.0


def test_actor_critic_zero_advantage_and_fixpoint():
    logp = Tensor(np.log(np.full((4, 1), 0.5)))
    value = Tensor([[1.0], [2.0]])
    loss, parts = losses.actor_critic_loss(logp, np.ones(4), value, np.zeros((2, 1)),
                                           np.array([1.0, 2.0]), np.zeros(2), 0.0, 0.5)
    assert parts["actor"] == 0.0 and parts["critic"] == 0.0
    assert loss.item() == 0.0


def test_actor_critic_one_step_example():
    alpha = 0.5
    loss, _ = losses.actor_critic_loss(Tensor([[np.log(0.5)]]), [1.0], Tensor([[0.0]]), [[0.0]],
                                       [1.0], [1.0], 0.0, alpha)
    assert loss.item() == pytest.approx(-np.log(0.5) + alpha)


def test_actor_critic_masks_and_gradients():
    r = rng(3)
    logp = Tensor(np.log(r.uniform(0.1, 0.9, (6, 1))), requires_grad=True)
    value = Tensor(r.normal(size=(3, 1)), requires_grad=True)
    agent_mask = np.array([1, 1, 0, 1, 1, 1], dtype=float)
    with GradTape():
        loss, _ = losses.actor_critic_loss(logp, agent_mask, value, r.normal(size=(3, 1)),
                                           r.normal(size=3), np.zeros(3), 0.9, 0.5,
                                           step_mask=[1, 1, 0])
        T.backward(loss)
    assert logp.grad[2, 0] == 0.0 and np.all(logp.grad[4:] == 0.0)
    assert value.grad[2, 0] == 0.0


def _gae_oracle(r, done, v, v_next, gamma, lam):
    """Weighted sum of n-step returns, straight from the definition."""
    t_len = len(r)
    out = np.zeros(t_len)
    for t in range(t_len):
        total, weight = 0.0, 1.0
        for k in range(t, t_len):
            delta = r[k] + gamma * (1 - done[k]) * v_next[k] - v[k]
            total += weight * delta
            if done[k]:
                break
            weight *= gamma * lam
        out[t] = total
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.0, 1.0), st.integers(1, 8))
def test_lambda_advantages_match_definition(seed, lam, t_len):
    r = rng(seed)
    reward, v = r.normal(size=t_len), r.normal(size=t_len)
    v_next = np.append(v[1:], r.normal())
    done = np.zeros(t_len)
    done[-1] = float(r.random() < 0.5)
    adv = losses.lambda_advantages(reward, done, v, v_next, 0.9, lam, t_len).reshape(-1)
    assert np.allclose(adv, _gae_oracle(reward, done, v, v_next, 0.9, lam), atol=1e-12)


def test_lambda_zero_matches_one_step():
    r = rng(4)
    logp = Tensor(np.log(r.uniform(0.1, 0.9, (8, 1))))
    value = Tensor(r.normal(size=(4, 1)))
    args = (np.ones(8), value, r.normal(size=(4, 1)), r.normal(size=4), np.zeros(4), 0.9, 0.5)
    a, _ = losses.actor_critic_loss(logp, *args)
    b, _ = losses.actor_critic_loss(logp, *args, lam=0.0, steps=4)
    assert a.item() == b.item()


# -- auxiliary losses -------------------------------------------------------------------------------
def test_group_loss_identical_embeddings_zero():
    assert losses.group_loss(Tensor(np.ones((4, 3))), [0, 0, 1, 1], 0.5).item() == pytest.approx(0.0, abs=1e-7)


def test_group_loss_two_coincident_groups():
    h = Tensor([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    assert losses.group_loss(h, [0, 0, 1, 1], 0.5).item() == pytest.approx(-5.0, abs=1e-7)


def test_group_loss_single_group_mean_intra():
    h = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 8.0]])
    expected = (5.0 + 8.0 + 5.0) / 3
    assert losses.group_loss(Tensor(h), [0, 0, 0], 0.5).item() == pytest.approx(expected, abs=1e-7)


def _group_loss_oracle(h, labels, beta):
    k = labels.max() + 1
    d = np.sqrt(((h[:, None] - h[None]) ** 2).sum(-1))
    total = 0.0
    for g in range(k):
        mine = np.flatnonzero(labels == g)
        if len(mine) > 1:
            total += np.mean([d[i, j] for i in mine for j in mine if i < j])
        cross = [d[np.ix_(mine, labels == o)].mean() for o in range(k) if o != g]
        total -= beta * (min(cross) if cross else 0.0)
    return total


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 6), st.integers(1, 3), st.integers(1, 3))
def test_group_loss_matches_definition_and_batches(seed, n, k, samples):
    r = rng(seed)
    k = min(k, n)
    labels = np.concatenate([np.arange(k), r.integers(k, size=n - k)])
    h = r.normal(size=(samples * n, 3))
    expected = np.mean([_group_loss_oracle(h[s * n:(s + 1) * n], labels, 0.5) for s in range(samples)])
    assert losses.group_loss(Tensor(h), labels, 0.5, n).item() == pytest.approx(expected, abs=1e-6)


def test_group_loss_gradients():
    r = rng(5)
    h = Tensor(r.normal(size=(10, 3)), requires_grad=True)
    labels = np.array([0, 0, 1, 1, 2])
    assert T.grad_check(lambda v: losses.group_loss(v, labels, 0.5, 5), h) < 1e-4
    assert T.grad_check(lambda v: losses.group_loss(losses.unit_rows(v), labels, 0.5, 5), h) < 1e-4


def test_group_loss_literal_normalizers():
    # two groups of two coincident points at distance 5: 1/|C_l| over 4 cross pairs doubles the term
    h = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    assert losses.group_loss_literal(h, [0, 0, 1, 1], 0.5) == pytest.approx(-10.0, abs=1e-6)


def test_unit_rows_norm():
    u = losses.unit_rows(Tensor(rng(6).normal(0, 5, (4, 3)))).data
    assert np.allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-8)


def test_att_entropy_examples():
    one_hot = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert losses.att_entropy_loss(one_hot, np.ones((2, 2))).item() == 0.0
    uniform = Tensor(np.full((3, 2), 0.5))
    assert losses.att_entropy_loss(uniform, np.ones((3, 2))).item() == pytest.approx(3 * np.log(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 5))
def test_att_entropy_nonnegative_and_max_at_uniform(seed, m):
    r = rng(seed)
    members = np.ones((1, m), dtype=bool)
    uniform = losses.att_entropy_loss(Tensor(np.full((1, m), 1.0 / m)), members).item()
    for p in r.dirichlet(np.ones(m), size=100):
        val = losses.att_entropy_loss(Tensor(p[None]), members).item()
        assert -1e-12 <= val <= uniform + 1e-12


def test_total_loss_examples():
    w = LossWeights(lambda1=0.1, lambda2=0.01)
    assert losses.total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), w).item() == pytest.approx(1.23)
    off = LossWeights(lambda1=0.0, lambda2=0.0)
    assert losses.total_loss(Tensor(0.7), Tensor(2.0), Tensor(3.0), off).item() == pytest.approx(0.7)
    assert losses.total_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0), w).item() == 0.0


def test_joint_objective_gradients_on_micro_batch():
    """Encoder -> hypergraph -> utilities -> mixer -> TD + auxiliaries, all params."""
    r = rng(7)
    n, b = 3, 2
    enc = nets.AgentEncoder(r, 4, 5)
    group = nets.GroupModule(r, r, 5, 4, d_att=3)
    heads = nets.ValueHeads(r, 5, 4, 5)
    mixer = nets.MixingNetwork(r, n, 6, 3)
    grouping = Grouping(np.array([0, 0, 1]), 2, np.array([0.6, 0.3]))
    hg = hgx.batch([hgx.build_hypergraph(grouping)] * b)
    obs, state = r.normal(size=(b * n, 4)), r.normal(size=(b, 6))
    acts, targets = r.integers(5, size=b * n), r.normal(size=(b, 1))
    w = LossWeights()
    params = {**enc.named(), **group.named(), **heads.named(), **mixer.named()}

    def objective(_):
        emb = enc(Tensor(obs), enc.initial_hidden(b * n))
        h_l, alphas = group(emb, hg)
        q = nets.q_values(heads, emb, h_l)
        chosen = T.sum_(T.mul(q, Tensor(np.eye(5)[acts])), axis=1, keepdims=True)
        q_tot = nets.mix(mixer, nets.rows_to_matrix(chosen, b, n), Tensor(state))
        task = losses.td_loss(q_tot, targets)
        g = losses.group_loss(losses.unit_rows(h_l), grouping.labels, w.beta, n)
        a = losses.att_entropy_loss(alphas[-1], hg.incidence > 0, b)
        return losses.total_loss(task, g, a, w)

    assert T.grad_check(objective, list(params.values())) < 1e-3


# -- action selection ----------------------------------------------------------------------------------
def test_select_actions_examples():
    assert select_actions(np.array([[1.0, 3.0, 2.0]]), "value", 0.0)[0] == 1
    assert select_actions(np.array([[5.0, 5.0, 0.0]]), "value", 0.0)[0] == 0


def test_select_actions_uniform_at_epsilon_one():
    draws = select_actions(np.tile([[0.0, 9.0, 0.0, 0.0, 0.0]], (10_000, 1)), "value", 1.0, rng(8))
    counts = np.bincount(draws, minlength=5)
    sigma = np.sqrt(10_000 * 0.2 * 0.8)
    assert np.all(np.abs(counts - 2000) < 3 * sigma)


def test_select_actions_policy_sampling_frequencies():
    probs = np.tile([[0.1, 0.2, 0.7]], (20_000, 1))
    counts = np.bincount(select_actions(probs, "policy", rng=rng(9)), minlength=3) / 20_000
    assert np.allclose(counts, [0.1, 0.2, 0.7], atol=0.015)


def test_select_actions_errors():
    with pytest.raises(ValueError):
        select_actions(np.zeros((1, 3)), "value", 0.5)
    with pytest.raises(ValueError):
        select_actions(np.zeros((1, 3)), "value", 1.5, rng(0))
    with pytest.raises(ValueError):
        select_actions(np.zeros((1, 3)), "boltzmann", 0.0, rng(0))


def test_linear_epsilon():
    assert linear_epsilon(0, 1.0, 0.05, 100) == 1.0
    assert linear_epsilon(50, 1.0, 0.0, 100) == 0.5
    assert linear_epsilon(500, 1.0, 0.05, 100) == 0.05


# -- replay ------------------------------------------------------------------------------------------------
def make_episode(length, n=2, d=3, seed=0):
    r = rng(seed)
    steps = [Transition(r.normal(size=(n, d)), r.normal(size=4), r.integers(5, size=n),
                        np.zeros((n, 2)), -0.1, r.normal(size=(n, d)), r.normal(size=4),
                        t == length - 1, 0) for t in range(length)]
    return Episode.from_transitions(steps, [0, 1], [0.5, 0.5])


def test_buffer_capacity_and_complete_episodes():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.add(make_episode(i + 1, seed=i))
    assert len(buf) == 3
    assert sorted(e.length for e in buf.storage) == [3, 4, 5]
    batch = buf.sample(8, rng(0))
    assert batch.size == 3
    for j, ep in enumerate(batch.episodes):
        assert batch.mask[:, j].sum() == ep.length


def test_buffer_sampling_reproducible():
    buf = ReplayBuffer(10)
    for i in range(10):
        buf.add(make_episode(2 + i % 3, seed=i))
    a, b = buf.sample(4, rng(11)), buf.sample(4, rng(11))
    assert [id(e) for e in a.episodes] == [id(e) for e in b.episodes]
    assert np.array_equal(a.obs, b.obs)


def test_pad_episodes_layout():
    short, long_ = make_episode(2, seed=1), make_episode(4, seed=2)
    batch = pad_episodes([short, long_])
    assert batch.obs.shape == (5, 2, 2, 3)
    assert np.array_equal(batch.mask[:, 0], [1, 1, 0, 0])
    assert np.all(batch.done[2:, 0] == 1.0)
    assert np.array_equal(batch.obs[:3, 0], short.obs)


def test_buffer_rejects_empty_and_zero_capacity():
    with pytest.raises(ValueError):
        ReplayBuffer(0)
    with pytest.raises(ValueError):
        ReplayBuffer(2).sample(1, rng(0))
    with pytest.raises(ValueError):
        Episode.from_transitions([], [0], [0.0])


# -- grouping tracker -----------------------------------------------------------------------------------
def test_tracker_bootstrap_then_periodic():
    cfg = SpectralConfig(k_min=2, k_max=2, interval=5, window_len=3, delta=0.0)
    tr = GroupingTracker(4, 2, cfg, fixed=False)
    r = rng(12)
    tr.refresh()
    assert tr.grouping.k == 1  # window not yet full
    for _ in range(3):
        tr.observe(r.normal(size=(4, 2)))
    tr.refresh()
    assert tr.bootstrapped and tr.grouping.k == 2 and tr.grouping.version == 1
    assert tr.opportunities == 0
    for _ in range(5):
        tr.observe(r.normal(size=(4, 2)))
    tr.refresh()
    assert tr.opportunities == 1
    assert tr.cooccurrence.trace() == 4 * tr.ticks


def test_tracker_fixed_never_changes():
    tr = GroupingTracker(4, 2, SpectralConfig(interval=1, window_len=1), fixed=True)
    for _ in range(5):
        tr.observe(rng().normal(size=(4, 2)))
        tr.refresh()
    assert tr.grouping.k == 1 and tr.grouping.version == 0


# -- training loop --------------------------------------------------------------------------------------
@pytest.mark.parametrize("mode", ["policy", "value"])
def test_train_run_deterministic(mode):
    a = list(train_run(tiny(mode, episodes=6)))
    b = list(train_run(tiny(mode, episodes=6)))
    assert a == b
    assert [r["episode"] for r in a] == list(range(6))
    for row in a:
        assert 1 <= row["steps"] <= 12
        assert all(np.isfinite(row[k]) for k in ("loss_task", "loss_group", "loss_att"))


def test_train_run_seed_changes_stream():
    a = list(train_run(tiny(episodes=4)))
    b = list(train_run(tiny(episodes=4, run__seed=1)))
    assert a != b


def test_single_group_without_regularizers_is_all_in_one():
    cfg = tiny(episodes=6, run__ablation="single-group", learn__lambda1=0, learn__lambda2=0)
    rows = list(train_run(cfg))
    assert all(r["k"] == 1 and r["grouping_version"] == 0 for r in rows)
    assert all(r["message_count"] == 3 * 2 for r in rows)


def test_target_sync_leaves_online_untouched():
    tr = Trainer(tiny("value", episodes=3))
    it = tr.run()
    for _ in range(3):
        next(it)
    before = {k: v.data.copy() for k, v in tr.model.named().items()}
    tr.target.copy_from(tr.model)
    for k, v in tr.model.named().items():
        assert np.array_equal(v.data, before[k])
    for k, v in tr.target.named().items():
        assert np.array_equal(v.data, before[k]) and not v.requires_grad


def test_target_changes_only_at_sync():
    tr = Trainer(tiny("value", episodes=5))
    initial = {k: v.data.copy() for k, v in tr.target.named().items()}
    it = tr.run()
    for step in range(1, 6):
        next(it)
        same = all(np.array_equal(v.data, initial[k]) for k, v in tr.target.named().items())
        assert same == (tr.opt_steps < 3)


def test_non_finite_loss_aborts():
    tr = Trainer(tiny(episodes=4))
    for p in tr.model.parameters():
        p.data[...] = np.nan
    with pytest.raises(TrainingAborted):
        next(tr.run())


def test_evaluate_never_reads_global_state(monkeypatch):
    cfg = tiny("value")
    tr = Trainer(cfg)

    def forbidden(*_):
        raise AssertionError("execution read the global state")

    monkeypatch.setattr(ppenv.PredatorPrey, "global_state", forbidden)
    monkeypatch.setattr(ppenv, "global_state", forbidden)
    out = evaluate(tr.model, tr.grouping, cfg.env, 5, seed=0)
    assert out["episodes"] == 5 and 1 <= out["mean_steps"] <= 12


def test_evaluate_deterministic():
    cfg = tiny("policy")
    tr = Trainer(cfg)
    g = Grouping(np.array([0, 1, 1]), 2, np.array([0.4, 0.7]))
    assert evaluate(tr.model, g, cfg.env, 7, seed=3, parallel=3) == evaluate(tr.model, g, cfg.env, 7, seed=3)


def test_value_smoke_td_loss_halves():
    cfg = parse_text("[env]\ngrid = 5\nn_predators = 1\n[spectral]\nk_min = 1\nk_max = 1\n"
                     "[learn]\nmode = value\nepisodes = 500\n")
    td = np.array([r["loss_task"] for r in train_run(cfg)])
    assert td[-50:].mean() <= 0.5 * td[:50].mean()
