"""Training loop: rollouts with periodic regrouping, then a joint-objective update.

Episodes run in lockstep across ``n_envs`` environments that share the
current grouping; the grouping is frozen within a batch of episodes and may
change only between batches, once every ``spectral.interval`` live steps.
The first environment is the live stream feeding the state-history window.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .. import env as ppenv
from .. import hypergraph as hgx
from .. import spectral
from .. import tensor as T
from ..config import RunConfig
from ..optim import clip_grad_norm, make_optimizer
from ..tensor import Tensor
from . import losses
from .buffer import Episode, ReplayBuffer, Transition
from .nets import AgentModel, critic_value, mix, q_values, rows_to_matrix

log = logging.getLogger(__name__)

METRIC_FIELDS = ("episode", "steps", "reward", "eta", "grouping_version", "k", "silhouette",
                 "message_count", "loss_task", "loss_group", "loss_att", "loss_group_literal")


def build_model(cfg: RunConfig, seed_seq: np.random.SeedSequence | None = None) -> AgentModel:
    """The model a run with ``cfg`` starts from (first child stream of the run seed)."""
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(cfg.seed).spawn(4)[0]
    ec, mc = cfg.env, cfg.model
    return AgentModel(seed_seq, obs_dim=ec.obs_dim, state_dim=ec.state_dim,
                      n_agents=ec.n_predators, n_actions=ppenv.N_ACTIONS, hidden=mc.hidden,
                      group_out=mc.hgcn_out, group_layers=mc.hgcn_layers, variant=cfg.ablation,
                      mode=cfg.learn.mode, att_dim=mc.att_dim, heads=mc.heads,
                      leaky_slope=mc.leaky_slope, critic_hidden=mc.critic_hidden,
                      mixer_embed=mc.mixer_embed)


EVAL_STREAM = 0xE7A1  # keeps evaluation episodes apart from training streams


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


def select_actions(values: np.ndarray, mode: str, epsilon: float = 0.0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-row actions.

    ``value`` mode: greedy (lowest index among ties) with probability
    ``1 - epsilon``, else uniform.  ``policy`` mode: sample each row's
    categorical distribution.  ``greedy`` mode: argmax of either.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    rows, n_act = values.shape
    if mode == "greedy" or (mode == "value" and epsilon <= 0.0):
        return np.argmax(values, axis=1)
    if rng is None:
        raise ValueError("stochastic action selection needs an rng")
    if mode == "value":
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        greedy = np.argmax(values, axis=1)
        explore = rng.random(rows) < epsilon
        random = rng.integers(n_act, size=rows)
        return np.where(explore, random, greedy)
    if mode == "policy":
        cum = np.cumsum(values, axis=1)
        u = rng.random(rows)[:, None] * cum[:, -1:]
        return np.minimum((cum <= u).sum(axis=1), n_act - 1)
    raise ValueError(f"unknown action mode {mode!r}")


def linear_epsilon(step: int, start: float, end: float, anneal: int) -> float:
    frac = min(1.0, step / max(anneal, 1))
    return (1.0 - frac) * start + frac * end


class GroupingTracker:
    """Owns the state-history window, the live grouping and its history."""

    def __init__(self, n_agents: int, obs_dim: int, cfg: spectral.SpectralConfig, fixed: bool):
        self.cfg = cfg
        self.fixed = fixed
        self.window = spectral.StateHistoryWindow(n_agents, cfg.window_len, obs_dim)
        self.grouping = spectral.single_group(n_agents)
        self.bootstrapped = fixed
        self.ticks = 0
        self.next_check = cfg.interval
        self.opportunities = 0
        self.adoptions = 0
        self.timeline: list[tuple[int, spectral.Grouping]] = [(0, self.grouping)]
        self.cooccurrence = np.zeros((n_agents, n_agents), dtype=np.int64)

    def observe(self, obs: np.ndarray) -> None:
        self.window.push(obs)
        self.ticks += 1
        labels = self.grouping.labels
        self.cooccurrence += labels[:, None] == labels[None, :]

    def refresh(self) -> None:
        """Called between batches; applies the bootstrap or periodic update."""
        if self.fixed or self.window.n_agents < 2:
            return
        if not self.bootstrapped:
            if len(self.window) < self.window.window_len:
                return
            cand = spectral.cluster(self.window, self.cfg)
            e = spectral.eta(self.grouping, cand)
            self.grouping = spectral.Grouping(cand.labels, cand.k, cand.cohesion,
                                              version=self.grouping.version + 1, eta_last=e)
            self.bootstrapped = True
            self.next_check = self.ticks + self.cfg.interval
            self.timeline.append((self.ticks, self.grouping))
            log.info("initial grouping k=%d labels=%s", cand.k, cand.labels.tolist())
            return
        if self.ticks < self.next_check:
            return
        while self.next_check <= self.ticks:
            self.next_check += self.cfg.interval
        self.opportunities += 1
        updated = spectral.maybe_update(self.grouping, self.window, self.cfg)
        if updated.version != self.grouping.version:
            self.adoptions += 1
            self.timeline.append((self.ticks, updated))
            log.info("grouping update v%d eta=%.2f", updated.version, updated.eta_last)
        self.grouping = updated


@dataclass
class _Rollout:
    steps: np.ndarray
    rewards: np.ndarray
    success: np.ndarray


class Trainer:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg.validate()
        ec, lc, mc = cfg.env, cfg.learn, cfg.model
        root = np.random.SeedSequence(cfg.seed)
        model_ss, env_ss, act_ss, buf_ss = root.spawn(4)
        self.n = ec.n_predators
        self.mode = lc.mode
        self.model = self._build_model(model_ss)
        self.target = None
        if self.mode == "value":
            self.target = self._build_model(model_ss)
            self.target.copy_from(self.model)
            self.target.freeze()
        self.opt = make_optimizer(lc.resolved_optimizer(), self.model.parameters(), lc.lr)
        self.n_envs = lc.resolved_envs(ec.max_steps)
        self.env_rngs = [np.random.default_rng(s) for s in env_ss.spawn(self.n_envs)]
        self.act_rng = np.random.default_rng(act_ss)
        self.buf_rng = np.random.default_rng(buf_ss)
        self.buffer = ReplayBuffer(lc.buffer_size) if self.mode == "value" else None
        self.tracker = GroupingTracker(self.n, ec.obs_dim, cfg.spectral,
                                       fixed=cfg.ablation == "single-group")
        self.episode = 0
        self.env_steps = 0
        self.opt_steps = 0
        self.batches = 0
        self._hg_cache: dict = {}

    def _build_model(self, ss: np.random.SeedSequence) -> AgentModel:
        return build_model(self.cfg, ss)

    @property
    def grouping(self) -> spectral.Grouping:
        return self.tracker.grouping

    def hypergraph(self, grouping: spectral.Grouping, copies: int) -> hgx.Hypergraph:
        key = (grouping.labels.tobytes(), grouping.cohesion.tobytes(), copies)
        hg = self._hg_cache.get(key)
        if hg is None:
            if len(self._hg_cache) > 256:
                self._hg_cache.clear()
            hg = hgx.batch([hgx.build_hypergraph(grouping)] * copies)
            self._hg_cache[key] = hg
        return hg

    # -- main loop ------------------------------------------------------------
    def run(self) -> Iterator[dict]:
        """Yield one metrics row per finished training episode."""
        while self.episode < self.cfg.learn.episodes:
            self.tracker.refresh()
            count = min(self.n_envs, self.cfg.learn.episodes - self.episode)
            if self.mode == "policy":
                roll, parts = self._policy_batch(count)
            else:
                roll, parts = self._value_batch(count)
            self.batches += 1
            g = self.grouping
            msgs = hgx.message_count(hgx.build_hypergraph(g))
            for j in range(count):
                yield {
                    "episode": self.episode, "steps": int(roll.steps[j]),
                    "reward": float(roll.rewards[j]), "eta": float(g.eta_last),
                    "grouping_version": g.version, "k": g.k, "silhouette": g.silhouette,
                    "message_count": msgs, **parts,
                }
                self.episode += 1

    def _check(self, value: float, what: str) -> None:
        if not np.isfinite(value):
            raise TrainingAborted(f"non-finite {what} at episode {self.episode}: {value}")

    def _apply(self, loss: Tensor) -> None:
        self._check(loss.item(), "loss")
        params = self.model.parameters()
        norm = clip_grad_norm(params, self.cfg.learn.grad_clip)
        self._check(norm, "gradient norm")
        self.opt.step()
        self.opt.zero_grad()
        self.opt_steps += 1

    def _aux_losses(self, h_rows: list[Tensor], alphas: list[Tensor], valid: np.ndarray,
                    hg: hgx.Hypergraph, labels: np.ndarray):
        """Group-consistency and attention-entropy terms over valid samples.

        ``valid`` is (steps, batch); each element of ``h_rows`` is (batch*n, d).
        """
        w = self.cfg.learn.weights
        steps, batch = valid.shape
        sample_idx = np.flatnonzero(valid.reshape(-1))
        rows = (sample_idx[:, None] * self.n + np.arange(self.n)).reshape(-1)
        h_all = losses.unit_rows(T.gather(T.concat(h_rows, axis=0), rows))
        g_loss = losses.group_loss(h_all, labels, w.beta, self.n)
        literal = losses.group_loss_literal(h_all.data, labels, w.beta)
        if alphas:
            a_all = T.gather(T.concat(alphas, axis=0), rows)
            members = np.tile(hg.incidence > 0, (steps, 1))[rows]
            a_loss = losses.att_entropy_loss(a_all, members, samples=len(sample_idx))
        else:
            a_loss = Tensor(0.0)
        return g_loss, a_loss, literal

    # -- policy-based ------------------------------------------------------------
    def _policy_batch(self, count: int):
        ec, lc = self.cfg.env, self.cfg.learn
        n, model = self.n, self.model
        grouping = self.grouping
        hg = self.hypergraph(grouping, count)
        envs = [ppenv.PredatorPrey(ec, self.env_rngs[j]) for j in range(count)]
        obs = np.stack([e.reset() for e in envs])
        hidden = model.encoder.initial_hidden(count * n)
        active = np.ones(count, dtype=bool)
        steps = np.zeros(count, dtype=int)
        ep_reward = np.zeros(count)
        logps, values, h_rows, alphas = [], [], [], []
        rewards, dones, valid, agent_masks = [], [], [], []
        onehot = np.eye(ppenv.N_ACTIONS)
        with T.GradTape():
            for _ in range(ec.max_steps):
                if not active.any():
                    break
                state = np.stack([e.global_state() for e in envs])
                emb = model.encoder(obs.reshape(count * n, -1), hidden)
                h_l, alpha = model.group(emb, hg)
                logp = T.log_softmax(model.heads.logits(emb, h_l), axis=1)
                value = critic_value(model.heads, state, h_l, n)
                actions = select_actions(np.exp(logp.data), "policy", rng=self.act_rng)
                logps.append(T.sum_(T.mul(logp, Tensor(onehot[actions])), axis=1, keepdims=True))
                values.append(value)
                h_rows.append(h_l)
                if alpha:
                    alphas.append(alpha[-1])
                captured = np.stack([e.state.captured for e in envs])
                agent_masks.append((active[:, None] & ~captured).reshape(-1))
                valid.append(active.copy())
                if active[0]:
                    self.tracker.observe(obs[0])
                r = np.zeros(count)
                d = np.ones(count, dtype=bool)
                acts = actions.reshape(count, n)
                # the taped encoder input aliases obs, so never write into it
                obs = obs.copy()
                for j in np.flatnonzero(active):
                    obs[j], r[j], d[j] = envs[j].step(acts[j])
                    steps[j] += 1
                    ep_reward[j] += r[j]
                rewards.append(r)
                dones.append(d)
                self.env_steps += int(active.sum())
                active = active & ~d
                hidden = emb

            valid_arr = np.array(valid)
            v_all = T.concat(values, axis=0)
            v_next = np.concatenate([v.data for v in values[1:]] + [np.zeros((count, 1))], axis=0)
            task, parts = losses.actor_critic_loss(
                T.concat(logps, axis=0), np.concatenate(agent_masks), v_all, v_next,
                np.concatenate(rewards), np.concatenate(dones), lc.weights.gamma,
                lc.weights.alpha_critic, step_mask=valid_arr.reshape(-1), agents_per_step=n,
                lam=lc.weights.gae_lambda, steps=len(values))
            g_loss, a_loss, literal = self._aux_losses(h_rows, alphas, valid_arr, hg, grouping.labels)
            total = losses.total_loss(task, g_loss, a_loss, lc.weights)
            T.backward(total)
        self._apply(total)
        success = np.array([e.success() for e in envs])
        return _Rollout(steps, ep_reward, success), {
            "loss_task": task.item(), "loss_group": g_loss.item(), "loss_att": a_loss.item(),
            "loss_group_literal": float(literal)}

    # -- value-based ---------------------------------------------------------------
    def epsilon(self) -> float:
        lc = self.cfg.learn
        return linear_epsilon(self.env_steps, lc.epsilon_start, lc.epsilon_end, lc.epsilon_anneal)

    def _collect(self, count: int, epsilon: float) -> tuple[_Rollout, list[Episode]]:
        ec, n, model = self.cfg.env, self.n, self.model
        grouping = self.grouping
        hg = self.hypergraph(grouping, count)
        envs = [ppenv.PredatorPrey(ec, self.env_rngs[j]) for j in range(count)]
        obs = np.stack([e.reset() for e in envs])
        hidden = model.encoder.initial_hidden(count * n)
        active = np.ones(count, dtype=bool)
        steps = np.zeros(count, dtype=int)
        ep_reward = np.zeros(count)
        trans: list[list[Transition]] = [[] for _ in range(count)]
        for _ in range(ec.max_steps):
            if not active.any():
                break
            emb = model.encoder(obs.reshape(count * n, -1), hidden)
            h_l, _ = model.group(emb, hg)
            q = q_values(model.heads, emb, h_l)
            actions = select_actions(q.data, "value", epsilon, self.act_rng).reshape(count, n)
            if active[0]:
                self.tracker.observe(obs[0])
            self.env_steps += int(active.sum())
            for j in np.flatnonzero(active):
                state = envs[j].global_state()
                prev_obs = obs[j].copy()
                obs[j], r, d = envs[j].step(actions[j])
                trans[j].append(Transition(prev_obs, state, actions[j].copy(),
                                           hidden.data[j * n:(j + 1) * n].copy(), r, obs[j].copy(),
                                           envs[j].global_state(), d, grouping.version))
                steps[j] += 1
                ep_reward[j] += r
                if d:
                    active[j] = False
            hidden = emb
        episodes = [Episode.from_transitions(t, grouping.labels, grouping.cohesion) for t in trans]
        success = np.array([e.success() for e in envs])
        return _Rollout(steps, ep_reward, success), episodes

    def _value_batch(self, count: int):
        roll, episodes = self._collect(count, self.epsilon())
        for ep in episodes:
            self.buffer.add(ep)
        parts = self._value_update()
        return roll, parts

    def _value_update(self) -> dict:
        lc, n = self.cfg.learn, self.n
        batch = self.buffer.sample(lc.value_batch, self.buf_rng)
        b, t_max = batch.size, batch.max_len
        groupings = [spectral.Grouping(e.labels, int(e.labels.max()) + 1, e.cohesion)
                     for e in batch.episodes]
        hg = hgx.batch([hgx.build_hypergraph(g) for g in groupings])
        onehot = np.eye(ppenv.N_ACTIONS)
        model, target = self.model, self.target
        with T.GradTape():
            hid = model.encoder.initial_hidden(b * n)
            thid = target.encoder.initial_hidden(b * n)
            q_online, q_target, h_rows, alphas = [], [], [], []
            for t in range(t_max + 1):
                obs_t = batch.obs[t].reshape(b * n, -1)
                emb = model.encoder(obs_t, hid)
                h_l, alpha = model.group(emb, hg)
                q_online.append(q_values(model.heads, emb, h_l))
                temb = target.encoder(obs_t, thid)
                th_l, _ = target.group(temb, hg)
                q_target.append(q_values(target.heads, temb, th_l).data)
                if t < t_max:
                    h_rows.append(h_l)
                    if alpha:
                        alphas.append(alpha[-1])
                hid, thid = emb, temb
            # the mixer is row-wise, so all time steps go through it at once
            acts = batch.actions.reshape(-1)
            chosen = T.sum_(T.mul(T.concat(q_online[:t_max], axis=0), Tensor(onehot[acts])),
                            axis=1, keepdims=True)
            states = batch.state.reshape(t_max + 1, b, -1)
            q_tot = mix(model.mixer, rows_to_matrix(chosen, t_max * b, n),
                        states[:t_max].reshape(t_max * b, -1))
            nxt_target = np.concatenate(q_target[1:])
            nxt = np.concatenate([q.data for q in q_online[1:]]) if lc.double_q else nxt_target
            best = np.argmax(nxt, axis=1)
            tq = nxt_target[np.arange(len(best)), best].reshape(t_max * b, n)
            tq_tot = mix(target.mixer, tq, states[1:].reshape(t_max * b, -1)).data
            targets = losses.td_targets(batch.reward.reshape(-1, 1), batch.done.reshape(-1, 1),
                                        tq_tot, lc.weights.gamma)
            task = losses.td_loss(q_tot, targets, batch.mask.reshape(-1, 1))
            g_loss, a_loss, literal = self._aux_losses_value(h_rows, alphas, batch.mask, hg, groupings)
            total = losses.total_loss(task, g_loss, a_loss, lc.weights)
            T.backward(total)
        self._apply(total)
        if self.opt_steps % lc.target_update == 0:
            self.target.copy_from(self.model)
        return {"loss_task": task.item(), "loss_group": g_loss.item(), "loss_att": a_loss.item(),
                "loss_group_literal": float(literal)}

    def _aux_losses_value(self, h_rows, alphas, mask, hg, groupings):
        """Per-episode groupings may differ, so episodes sharing labels are pooled."""
        w = self.cfg.learn.weights
        steps, batch = mask.shape
        n = self.n
        h_all = T.concat(h_rows, axis=0)
        a_all = T.concat(alphas, axis=0) if alphas else None
        total_valid = mask.sum()
        g_loss, literal = None, 0.0
        by_labels: dict[bytes, list[int]] = {}
        for j, g in enumerate(groupings):
            by_labels.setdefault(g.labels.tobytes(), []).append(j)
        for cols in by_labels.values():
            sub = np.zeros_like(mask)
            sub[:, cols] = mask[:, cols]
            idx = np.flatnonzero(sub.reshape(-1))
            rows = (idx[:, None] * n + np.arange(n)).reshape(-1)
            part = losses.unit_rows(T.gather(h_all, rows))
            labels = groupings[cols[0]].labels
            term = T.scale(losses.group_loss(part, labels, w.beta, n), len(idx) / total_valid)
            g_loss = term if g_loss is None else g_loss + term
            literal += losses.group_loss_literal(part.data, labels, w.beta) * len(idx) / total_valid
        if a_all is not None:
            idx = np.flatnonzero(mask.reshape(-1))
            rows = (idx[:, None] * n + np.arange(n)).reshape(-1)
            members = np.tile(hg.incidence > 0, (steps, 1))[rows]
            a_loss = losses.att_entropy_loss(T.gather(a_all, rows), members, samples=len(idx))
        else:
            a_loss = Tensor(0.0)
        return g_loss, a_loss, literal


def evaluate(model: AgentModel, grouping: spectral.Grouping, env_cfg: ppenv.PPConfig,
             episodes: int, seed: int, parallel: int = 50) -> dict:
    """Greedy rollouts (argmax utility or argmax probability)."""
    n = env_cfg.n_predators
    rngs = np.random.SeedSequence([seed, EVAL_STREAM]).spawn(episodes)
    base = hgx.build_hypergraph(grouping)
    steps_all, success_all = [], []
    for start in range(0, episodes, parallel):
        count = min(parallel, episodes - start)
        hg = hgx.batch([base] * count)
        envs = [ppenv.PredatorPrey(env_cfg, np.random.default_rng(rngs[start + j]))
                for j in range(count)]
        obs = np.stack([e.reset() for e in envs])
        hidden = model.encoder.initial_hidden(count * n)
        active = np.ones(count, dtype=bool)
        while active.any():
            emb = model.encoder(obs.reshape(count * n, -1), hidden)
            h_l, _ = model.group(emb, hg)
            if model.mode == "policy":
                scores = model.heads.logits(emb, h_l).data
            else:
                scores = q_values(model.heads, emb, h_l).data
            acts = select_actions(scores, "greedy").reshape(count, n)
            for j in np.flatnonzero(active):
                obs[j], _, d = envs[j].step(acts[j])
                if d:
                    active[j] = False
            hidden = emb
        steps_all += [e.state.step for e in envs]
        success_all += [e.success() for e in envs]
    steps_arr = np.array(steps_all, dtype=float)
    return {"episodes": episodes, "mean_steps": float(steps_arr.mean()),
            "std_steps": float(steps_arr.std()), "success_rate": float(np.mean(success_all))}


def train_run(cfg: RunConfig) -> Iterator[dict]:
    """Metrics stream of a fresh training run (see :class:`Trainer` for state access)."""
    return Trainer(cfg).run()
