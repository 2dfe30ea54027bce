"""Atomic splittable routing on a DAG with linear edge latencies.

State: for every agent, the mass of its commodity sitting at each node
(concatenated, agent-major). Action: one logit per edge; at each node the
logits of its outgoing edges go through a softmax to give split fractions.
Per step, agent ``i`` sends ``w_i(v) * p_i(e)`` over edge ``e = (v, u)`` and pays
``(a_e f_e + b_e) f_e^i``. Mass reaching the sink stays there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from ..game import GameSpec

LOGIT_BOUND = 5.0


@dataclass
class RoutingNet:
    nodes: list[str]
    edges: list[tuple[str, str, float, float]]  # (from, to, a, b)
    source: str
    sink: str
    n_agents: int = 2
    demands: tuple[float, ...] | None = None
    horizon: int | None = None
    order: list[str] = field(init=False, default_factory=list)

    def __post_init__(self):
        if self.demands is None:
            self.demands = tuple([1.0 / self.n_agents] * self.n_agents)
        self.demands = tuple(float(d) for d in self.demands)
        if len(self.demands) != self.n_agents or any(d <= 0 for d in self.demands):
            raise ValueError("need one positive demand per agent")
        names = set(self.nodes)
        for u, v, a, b in self.edges:
            if u not in names or v not in names:
                raise ValueError(f"edge {u}->{v} references an unknown node")
            if a < 0 or b < 0:
                raise ValueError("latency coefficients must be non-negative")
        self.order = self._topological_order()
        reach = {self.sink}
        for v in reversed(self.order):
            if any(u == v and w in reach for u, w, *_ in self.edges):
                reach.add(v)
        missing = [v for v in self.nodes if v not in reach]
        if missing:
            raise ValueError(f"nodes without a path to the sink: {missing}")
        if any(u == self.sink for u, *_ in self.edges):
            raise ValueError("the sink must not have outgoing edges")
        if self.horizon is None:
            self.horizon = self.longest_path()

    def _topological_order(self) -> list[str]:
        indeg = {v: 0 for v in self.nodes}
        for _, v, *_ in self.edges:
            indeg[v] += 1
        ready = [v for v in self.nodes if indeg[v] == 0]
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for u, w, *_ in self.edges:
                if u == v:
                    indeg[w] -= 1
                    if indeg[w] == 0:
                        ready.append(w)
        if len(order) != len(self.nodes):
            raise ValueError("network is not a DAG")
        return order

    def longest_path(self) -> int:
        dist = {v: 0 for v in self.nodes}
        for v in reversed(self.order):
            for u, w, *_ in self.edges:
                if u == v:
                    dist[v] = max(dist[v], dist[w] + 1)
        return max(dist[self.source], 1)

    def paths(self) -> list[list[int]]:
        """All source-to-sink paths as lists of edge indices."""
        out = []

        def walk(v, acc):
            if v == self.sink:
                out.append(list(acc))
                return
            for k, (u, w, *_) in enumerate(self.edges):
                if u == v:
                    walk(w, acc + [k])

        walk(self.source, [])
        return out

    def without_edge(self, u: str, v: str) -> "RoutingNet":
        edges = [e for e in self.edges if not (e[0] == u and e[1] == v)]
        return RoutingNet(list(self.nodes), edges, self.source, self.sink, self.n_agents, self.demands)

    def with_agents(self, n_agents: int, demands=None) -> "RoutingNet":
        return RoutingNet(list(self.nodes), list(self.edges), self.source, self.sink, n_agents, demands, self.horizon)

    def to_json(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [{"from": u, "to": v, "a": a, "b": b} for u, v, a, b in self.edges],
            "source": self.source,
            "sink": self.sink,
            "n_agents": self.n_agents,
            "demands": list(self.demands),
        }

    @classmethod
    def from_json(cls, d: dict, n_agents: int | None = None, demands=None) -> "RoutingNet":
        edges = [(str(e["from"]), str(e["to"]), float(e["a"]), float(e["b"])) for e in d["edges"]]
        n = n_agents if n_agents is not None else int(d.get("n_agents", 2))
        dem = demands if demands is not None else (d.get("demands") if n_agents is None else None)
        return cls([str(v) for v in d["nodes"]], edges, str(d["source"]), str(d["sink"]), n, dem, d.get("horizon"))


def load_network(path: str | Path, n_agents: int | None = None, demands=None) -> RoutingNet:
    return RoutingNet.from_json(json.loads(Path(path).read_text()), n_agents, demands)


def braess_network(n_agents: int = 2, demands=None) -> RoutingNet:
    text = resources.files("potential_marl.envs").joinpath("data/braess.json").read_text()
    return RoutingNet.from_json(json.loads(text), n_agents, demands)


def random_layered_network(layers: int, width: int, seed: int, n_agents: int = 2, demands=None) -> RoutingNet:
    """Source layer, ``layers - 2`` hidden layers of ``width`` nodes, sink layer."""
    if layers < 2:
        raise ValueError("need at least 2 layers")
    rng = np.random.default_rng(seed)
    lay = [["s"]] + [[f"n{k}_{j}" for j in range(width)] for k in range(1, layers - 1)] + [["t"]]
    edges = []
    for k in range(len(lay) - 1):
        cur, nxt = lay[k], lay[k + 1]
        pairs = set()
        for u in cur:  # every node gets an outgoing edge
            pairs.add((u, nxt[rng.integers(len(nxt))]))
        for v in nxt:  # and every next-layer node an incoming one
            if not any(p[1] == v for p in pairs):
                pairs.add((cur[rng.integers(len(cur))], v))
        for u in cur:  # a few extra edges for route choice
            for v in nxt:
                if (u, v) not in pairs and rng.random() < 0.3:
                    pairs.add((u, v))
        for u, v in sorted(pairs):
            edges.append((u, v, float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.0, 1.0))))
    nodes = [v for layer in lay for v in layer]
    return RoutingNet(nodes, edges, "s", "t", n_agents, demands)


class _Layout:
    def __init__(self, net: RoutingNet):
        self.net = net
        self.V = len(net.nodes)
        self.E = len(net.edges)
        self.N = net.n_agents
        idx = {v: k for k, v in enumerate(net.nodes)}
        self.src = np.array([idx[u] for u, *_ in net.edges])
        self.dst = np.array([idx[v] for _, v, *_ in net.edges])
        self.a = np.array([e[2] for e in net.edges])
        self.b = np.array([e[3] for e in net.edges])
        self.sink = idx[net.sink]
        self.source = idx[net.source]
        # node-by-edge incidence of outgoing edges
        self.out = np.zeros((self.V, self.E))
        self.out[self.src, np.arange(self.E)] = 1.0
        self.demands = np.asarray(net.demands)

    def split(self, logits: np.ndarray) -> np.ndarray:
        """Per-node softmax over outgoing edges. logits (..., E) -> fractions (..., E)."""
        z = logits - np.max(logits, axis=-1, keepdims=True)
        ez = np.exp(z)
        denom = ez @ self.out.T  # (..., V)
        return ez / denom[..., self.src]

    def unpack(self, s, a):
        B = s.shape[0]
        w = s.reshape(B, self.N, self.V)
        logits = a.reshape(B, self.N, self.E)
        p = self.split(logits)
        flows = w[:, :, self.src] * p  # (B, N, E)
        # mass already at the sink is not routed
        flows = np.where(self.src[None, None, :] == self.sink, 0.0, flows)
        return w, p, flows


def routing_game(net: RoutingNet, discount: float = 0.99) -> GameSpec:
    L = _Layout(net)
    N, V, E = L.N, L.V, L.E

    def rewards(s, a):
        _, _, f = L.unpack(s, a)
        tot = f.sum(axis=1, keepdims=True)
        return -((L.a * tot + L.b) * f).sum(axis=2)

    def potential(s, a):
        _, _, f = L.unpack(s, a)
        tot = f.sum(axis=1)
        sq = (f * f).sum(axis=1)
        pair = 0.5 * (tot * tot - sq)
        return -(L.a * (sq + pair) + L.b * tot).sum(axis=1)

    def _chain(s, a, dval_df):
        """Map d(value)/d(flows) of shape (B, K, N, E) to grads w.r.t. logits and state."""
        w, p, _ = L.unpack(s, a)
        B = s.shape[0]
        wsrc = w[:, :, L.src]  # (B, N, E)
        # d f_j,e / d logit_j,e' = w_j(v) p_e (delta - p_e') for e, e' out of the same node
        same = (L.src[:, None] == L.src[None, :]).astype(float)  # (E, E)
        active = (L.src != L.sink).astype(float)
        g = dval_df * wsrc[:, None] * active  # (B, K, N, E)
        gp = g * p[:, None]
        da = gp - p[:, None] * np.einsum("bkne,ef->bknf", gp, same)
        # d f_j,e / d w_j(v) = p_j,e for v = src(e)
        ds_nodes = np.einsum("bkne,ve->bknv", dval_df * p[:, None] * active, L.out)
        K = dval_df.shape[1]
        return da.reshape(B, K, N * E), ds_nodes.reshape(B, K, N * V)

    def reward_grads(s, a):
        _, _, f = L.unpack(s, a)
        tot = f.sum(axis=1)  # (B, E)
        B = s.shape[0]
        # dR_i/df_j,e = -a_e f_i,e for j != i, plus -(a_e f_e + b_e) extra for j == i
        d = -L.a * f[:, :, None, :] * np.ones((1, 1, N, 1))  # (B, i, j, E)
        own = -(L.a * tot + L.b)[:, None, :]
        d[:, np.arange(N), np.arange(N), :] += own
        return _chain(s, a, d)

    def potential_grad(s, a):
        _, _, f = L.unpack(s, a)
        tot = f.sum(axis=1)
        d = -(L.a * (f + tot[:, None, :]) + L.b)  # dphi/df_j,e
        da, ds = _chain(s, a, d[:, None])
        return da[:, 0], ds[:, 0]

    def transition(s, a, rng):
        w, _, f = L.unpack(s, a)
        nxt = np.zeros_like(w)
        np.add.at(nxt, (slice(None), slice(None), L.dst), f)
        nxt[:, :, L.sink] += w[:, :, L.sink]
        # mass at nodes with outgoing edges has left; mass at the sink stays
        return nxt.reshape(s.shape[0], N * V)

    def initial(rng):
        w = np.zeros((N, V))
        w[:, L.source] = L.demands
        return w.ravel()

    def done(s):
        w = s.reshape(s.shape[0], N, V)
        return w[:, :, L.sink].sum(axis=1) >= (1.0 - 1e-6) * L.demands.sum()

    def state_sampler(rng, n):
        # random placement of each agent's demand over the nodes
        mix = rng.dirichlet(np.ones(V), size=(n, N))
        return (mix * L.demands[None, :, None]).reshape(n, N * V)

    low = np.full(N * E, -LOGIT_BOUND)
    high = np.full(N * E, LOGIT_BOUND)

    return GameSpec(
        name="routing",
        n_agents=N,
        state_dim=N * V,
        action_dims=[E] * N,
        horizon=int(net.horizon),
        discount=discount,
        reward_oracle=rewards,
        transition_sampler=transition,
        initial_state_sampler=initial,
        action_low=low,
        action_high=high,
        state_low=np.zeros(N * V),
        state_high=np.repeat(L.demands, V),
        reward_grad_oracle=reward_grads,
        analytic_potential=potential,
        potential_grad=potential_grad,
        done_fn=done,
        state_sampler=state_sampler,
        meta={"net": net, "layout": L},
    )


def edge_flows(game: GameSpec, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Per-agent edge flows (N, E) for a single state/action."""
    L = game.meta["layout"]
    return L.unpack(np.asarray(s)[None], np.asarray(a)[None])[2][0]


def step_splits(game: GameSpec, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Per-agent split fractions (N, E) chosen at a single state/action."""
    L = game.meta["layout"]
    return L.unpack(np.asarray(s)[None], np.asarray(a)[None])[1][0]


def path_shares(net: RoutingNet, splits: list[np.ndarray]) -> np.ndarray:
    """Fraction of total demand sent along each path of ``net.paths()``.

    ``splits[t]`` holds the (N, E) split fractions used on step ``t``; mass
    moves one hop per step, so hop ``t`` of a path uses the step-``t`` split.
    """
    shares = []
    for path in net.paths():
        tot = 0.0
        for i, d in enumerate(net.demands):
            frac = d
            for t, e in enumerate(path):
                frac *= splits[t][i][e] if t < len(splits) else 0.0
            tot += frac
        shares.append(tot / sum(net.demands))
    return np.asarray(shares)


# equilibrium oracle on the path-flow game


def _resource_keys(net: RoutingNet, time_expanded: bool):
    paths = net.paths()
    keys = sorted({(e, t if time_expanded else 0) for p in paths for t, e in enumerate(p)})
    pos = {k: n for n, k in enumerate(keys)}
    inc = np.zeros((len(paths), len(keys)))
    for q, p in enumerate(paths):
        for t, e in enumerate(p):
            inc[q, pos[(e, t if time_expanded else 0)]] = 1.0
    a = np.array([net.edges[e][2] for e, _ in keys])
    b = np.array([net.edges[e][3] for e, _ in keys])
    return paths, inc, a, b


def _project_simplex(v: np.ndarray, total: float) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass
class FlowEquilibrium:
    paths: list[list[int]]
    path_flows: np.ndarray  # (N, P)
    agent_costs: np.ndarray  # (N,)
    path_latency: np.ndarray  # (P,) latency of each path at equilibrium (nonatomic sense)
    iterations: int

    def shares(self) -> np.ndarray:
        tot = self.path_flows.sum()
        return self.path_flows.sum(axis=0) / tot


def flow_equilibrium(
    net: RoutingNet,
    mode: str = "atomic",
    time_expanded: bool = False,
    iters: int = 20_000,
    tol: float = 1e-12,
) -> FlowEquilibrium:
    """Best-response dynamics on path flows.

    ``mode="atomic"``: each agent minimises its own cost sum_e l_e(f_e) f_e^i
    (marginal cost l_e + a_e f_e^i). ``mode="wardrop"``: each agent's commodity
    is a nonatomic population, so path costs are plain latencies.
    ``time_expanded`` treats edge ``e`` used on hop ``t`` as its own resource,
    matching the multi-step routing game where mass moves one hop per step.
    """
    if mode not in ("atomic", "wardrop"):
        raise ValueError("mode must be 'atomic' or 'wardrop'")
    paths, inc, a, b = _resource_keys(net, time_expanded)
    N, P = net.n_agents, len(paths)
    x = np.array([np.full(P, d / P) for d in net.demands])
    step = 0.5 / (max(a.max(), 1e-9) * max(len(k) for k in paths))
    it = 0
    for it in range(1, iters + 1):
        prev = x.copy()
        for i in range(N):
            for _ in range(20):
                f_i = x[i] @ inc
                f = x.sum(axis=0) @ inc
                marg = a * f + b + (a * f_i if mode == "atomic" else 0.0)
                x[i] = _project_simplex(x[i] - step * (inc @ marg), net.demands[i])
        if np.max(np.abs(x - prev)) < tol:
            break
    f = x.sum(axis=0) @ inc
    lat = a * f + b
    costs = np.array([(x[i] @ inc) @ lat for i in range(N)])
    return FlowEquilibrium(paths, x, costs, inc @ lat, it)



def policy_path_shares(game: GameSpec, act: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Path shares produced by the deterministic joint policy ``act(s) -> a``."""
    net = game.meta["net"]
    s = game.initial_state_sampler(np.random.default_rng(0))
    splits = []
    for _ in range(game.horizon):
        a = act(s)
        splits.append(step_splits(game, s, a))
        s = game.step(s, a, np.random.default_rng(0))
        if game.is_done(s):
            break
    return path_shares(net, splits)
