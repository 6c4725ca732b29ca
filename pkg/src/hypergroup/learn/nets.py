"""Agent networks: recurrent encoder, group module, value/policy heads, mixer."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .. import hypergraph as hgx
from .. import tensor as T
from ..tensor import Tensor


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> dict[str, Tensor]:
    return {"w": T.uniform_init(rng, d_in, (d_in, d_out)),
            "b": T.uniform_init(rng, d_in, (d_out,))}


def linear(x, p: dict[str, Tensor]) -> Tensor:
    return T.add_bias(T.matmul(x, p["w"]), p["b"])


def _prefixed(prefix: str, d: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}{k}": v for k, v in d.items()}


@lru_cache(maxsize=64)
def agent_mean_matrix(batch: int, n: int) -> np.ndarray:
    """(batch, batch*n) operator averaging the n agent rows of each sample."""
    return np.kron(np.eye(batch), np.full((1, n), 1.0 / n))


def rows_to_matrix(col: Tensor, batch: int, n: int) -> Tensor:
    """Regroup a (batch*n, 1) column into (batch, n) without a reshape primitive."""
    return T.concat([T.gather(col, np.arange(batch) * n + i) for i in range(n)], axis=1)


class AgentEncoder:
    """Linear observation projection followed by a GRU cell; output = new hidden."""

    def __init__(self, rng, obs_dim: int, hidden_dim: int):
        self.hidden_dim = hidden_dim
        self.obs_proj = init_linear(rng, obs_dim, hidden_dim)
        self.gru = T.init_gru(rng, hidden_dim, hidden_dim)

    def initial_hidden(self, rows: int) -> Tensor:
        return Tensor(np.zeros((rows, self.hidden_dim)))

    def __call__(self, obs, hidden) -> Tensor:
        return T.gru_cell(linear(obs, self.obs_proj), T.as_tensor(hidden), self.gru)

    def named(self) -> dict[str, Tensor]:
        return {**_prefixed("encoder.obs_proj.", self.obs_proj), **_prefixed("encoder.gru.", self.gru)}


def encode(encoder: AgentEncoder, obs, hidden) -> tuple[Tensor, Tensor]:
    """Per-agent embeddings and the next hidden state (the same tensor for a GRU)."""
    h = encoder(obs, hidden)
    return h, h


class GroupModule:
    """Group-aware embedding: hypergraph attention convolution or the GCN ablation.

    Projection weights come from ``rng`` and attention weights from
    ``att_rng`` so that variants sharing a seed start from the same projections.
    """

    def __init__(self, rng, att_rng, d_in: int, d_out: int, layers: int = 1,
                 variant: str = "hgcn", d_att: int = 32, heads: int = 1, leaky_slope: float = 0.2):
        self.variant = variant
        dims = [d_in] + [d_out] * layers
        projs = [T.uniform_init(rng, a, (a, b)) for a, b in zip(dims[:-1], dims[1:])]
        if variant == "gcn":
            self.projs = projs
            self.net = None
        else:
            layer_params = [
                hgx.HgcnLayerParams(
                    p,
                    [T.uniform_init(att_rng, b, (b, d_att)) for _ in range(heads)],
                    [T.uniform_init(att_rng, 2 * d_att, (2 * d_att, 1)) for _ in range(heads)],
                    leaky_slope)
                for p, b in zip(projs, dims[1:])
            ]
            self.net = hgx.HgcnNetwork(layer_params)
            self.projs = projs

    def __call__(self, x, hg: hgx.Hypergraph) -> tuple[Tensor, list[Tensor]]:
        if self.net is None:
            for p in self.projs:
                x = hgx.gcn_layer_variant(x, hg, p)
            return x, []
        return hgx.forward(x, hg, self.net, return_attention=True)

    def named(self) -> dict[str, Tensor]:
        if self.net is None:
            return {f"group.{i}.proj": p for i, p in enumerate(self.projs)}
        return self.net.named("group.")


class PolicyHeads:
    def __init__(self, rng, hidden: int, group_dim: int, state_dim: int, n_actions: int,
                 critic_hidden: int = 64):
        self.actor_head = init_linear(rng, hidden + group_dim, n_actions)
        self.critic_in = init_linear(rng, state_dim + group_dim, critic_hidden)
        self.critic_out = init_linear(rng, critic_hidden, 1)

    def logits(self, emb, h_l) -> Tensor:
        return linear(T.concat([emb, h_l], axis=1), self.actor_head)

    def named(self) -> dict[str, Tensor]:
        return {**_prefixed("actor.", self.actor_head), **_prefixed("critic.in.", self.critic_in),
                **_prefixed("critic.out.", self.critic_out)}


def policy_probs(heads: PolicyHeads, emb, h_l) -> Tensor:
    return T.softmax(heads.logits(emb, h_l), axis=1)


def critic_value(heads: PolicyHeads, state, h_l, n_agents: int) -> Tensor:
    """V([s | mean_i h_i]) for each sample; ``state`` is (batch, state_dim)."""
    state = T.as_tensor(state)
    batch = state.shape[0]
    pooled = T.matmul(Tensor(agent_mean_matrix(batch, n_agents)), h_l)
    hidden = T.elu(linear(T.concat([state, pooled], axis=1), heads.critic_in))
    return linear(hidden, heads.critic_out)


class ValueHeads:
    def __init__(self, rng, hidden: int, group_dim: int, n_actions: int):
        self.q_head = init_linear(rng, hidden + group_dim, n_actions)

    def named(self) -> dict[str, Tensor]:
        return _prefixed("q_head.", self.q_head)


def q_values(heads: ValueHeads, emb, h_l) -> Tensor:
    """(rows, n_actions): one utility per action from [embedding | group embedding]."""
    return linear(T.concat([emb, h_l], axis=1), heads.q_head)


class MixingNetwork:
    """State-conditioned two-layer mixer with absolute-valued weights."""

    def __init__(self, rng, n_agents: int, state_dim: int, embed_dim: int = 32):
        self.n_agents = n_agents
        self.embed_dim = embed_dim
        self.hypernet_w1 = init_linear(rng, state_dim, n_agents * embed_dim)
        self.hypernet_b1 = init_linear(rng, state_dim, embed_dim)
        self.hypernet_w2 = init_linear(rng, state_dim, embed_dim)
        self.hypernet_b2 = {"hidden": init_linear(rng, state_dim, embed_dim),
                            "out": init_linear(rng, embed_dim, 1)}
        self._expand = np.kron(np.eye(n_agents), np.ones((1, embed_dim)))
        self._collapse = np.tile(np.eye(embed_dim), (n_agents, 1))

    def named(self) -> dict[str, Tensor]:
        return {**_prefixed("mixer.w1.", self.hypernet_w1), **_prefixed("mixer.b1.", self.hypernet_b1),
                **_prefixed("mixer.w2.", self.hypernet_w2),
                **_prefixed("mixer.b2.hidden.", self.hypernet_b2["hidden"]),
                **_prefixed("mixer.b2.out.", self.hypernet_b2["out"])}


def mix(mixer: MixingNetwork, q_chosen, state) -> Tensor:
    """Q_tot for each sample; ``q_chosen`` is (batch, n), ``state`` (batch, state_dim)."""
    q_chosen, state = T.as_tensor(q_chosen), T.as_tensor(state)
    if q_chosen.ndim != 2 or state.ndim != 2 or q_chosen.shape[0] != state.shape[0]:
        raise T.ShapeError(f"mix: expected (batch, n) utilities and (batch, d) states, "
                           f"got {q_chosen.shape} and {state.shape}")
    w1 = T.abs_(linear(state, mixer.hypernet_w1))
    spread = T.matmul(q_chosen, Tensor(mixer._expand))
    hidden = T.elu(T.matmul(T.mul(spread, w1), Tensor(mixer._collapse))
                   + linear(state, mixer.hypernet_b1))
    w2 = T.abs_(linear(state, mixer.hypernet_w2))
    b2 = linear(T.relu(linear(state, mixer.hypernet_b2["hidden"])), mixer.hypernet_b2["out"])
    return T.sum_(T.mul(hidden, w2), axis=1, keepdims=True) + b2


class AgentModel:
    """All learnable pieces for one run, addressable by dotted parameter names."""

    def __init__(self, seed_seq: np.random.SeedSequence, *, obs_dim: int, state_dim: int,
                 n_agents: int, n_actions: int, hidden: int, group_out: int, group_layers: int,
                 variant: str, mode: str, att_dim: int = 32, heads: int = 1,
                 leaky_slope: float = 0.2, critic_hidden: int = 64, mixer_embed: int = 32):
        enc_ss, grp_ss, att_ss, head_ss = seed_seq.spawn(4)
        self.n_agents = n_agents
        self.mode = mode
        self.encoder = AgentEncoder(np.random.default_rng(enc_ss), obs_dim, hidden)
        self.group = GroupModule(np.random.default_rng(grp_ss), np.random.default_rng(att_ss),
                                 hidden, group_out, group_layers,
                                 "gcn" if variant == "gcn" else "hgcn", att_dim, heads, leaky_slope)
        head_rng = np.random.default_rng(head_ss)
        if mode == "policy":
            self.heads = PolicyHeads(head_rng, hidden, group_out, state_dim, n_actions, critic_hidden)
            self.mixer = None
        else:
            self.heads = ValueHeads(head_rng, hidden, group_out, n_actions)
            self.mixer = MixingNetwork(head_rng, n_agents, state_dim, mixer_embed)

    def named(self) -> dict[str, Tensor]:
        out = {**self.encoder.named(), **self.group.named(), **self.heads.named()}
        if self.mixer is not None:
            out.update(self.mixer.named())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.named()
        missing = set(mine) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
        for name, p in mine.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: "
                                 f"{arrays[name].shape} vs {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def copy_from(self, other: "AgentModel") -> None:
        self.load({k: v.data for k, v in other.named().items()})

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
