"""Parameter containers and forward passes.

An agent owns an encoder (four stride-2 convolutions plus a linear map), a
GRU, an observation decoder and a fire decoder with one head per forecast
horizon.  The exchange layer owns an actor and a critic.  Agent forward
functions accept a single sample, a batch, or a stacked (agent, batch)
layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .errors import ShapeError
from .numerics import Parameter, Tensor

ENC_K, ENC_STRIDE, ENC_PAD = 3, 2, 1
DEC_K, DEC_STRIDE, DEC_PAD = 2, 2, 0
# decoder outputs are kept strictly inside (0, 1), even when saturated
OUT_BOUND = 1e-12
GRU_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


@dataclass(frozen=True)
class NetConfig:
    n_agents: int = 3
    channels: int = 11
    grid: int = 16
    d_enc: int = 64
    d_h: int = 64
    widths: tuple[int, ...] = (8, 16, 32, 64)
    horizons: tuple[int, ...] = (1, 2, 3, 4)
    rl_hidden: int = 128
    self_weight: float = 0.8
    leak: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "horizons", tuple(self.horizons))
        if len(self.widths) != 4:
            raise ShapeError(f"encoder needs four conv widths, got {self.widths}")
        if self.grid % 16:
            raise ShapeError(f"grid size must be a multiple of 16, got {self.grid}")
        if not 0.0 < self.self_weight < 1.0:
            raise ValueError(f"self_weight must lie in (0, 1), got {self.self_weight}")

    @property
    def seed_grid(self) -> int:
        return self.grid // 16

    @property
    def n_horizons(self) -> int:
        return len(self.horizons)


class ParamSet:
    """Ordered name -> Parameter mapping with attribute access."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value)
        self._params[name] = p
        return p

    def __getattr__(self, name: str) -> Parameter:
        try:
            return self.__dict__["_params"][name]
        except KeyError:
            raise AttributeError(name) from None

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def size(self) -> int:
        return sum(p.size for p in self)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- agent network
GROUPS = ("encoder", "gru", "obs_decoder", "fire_decoder", "static_proj")


def _init_agent(cfg: NetConfig, rng: np.random.Generator, static: bool) -> dict[str, dict[str, np.ndarray]]:
    """Initial arrays of a single agent, drawn in a fixed order from ``rng``."""
    c = cfg
    out: dict[str, dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    enc = out["encoder"]
    chans = (c.channels,) + c.widths
    for i in range(4):
        fan = chans[i] * ENC_K * ENC_K
        enc[f"conv{i}.kernel"] = _uniform(rng, (chans[i + 1], chans[i], ENC_K, ENC_K), fan)
        enc[f"conv{i}.bias"] = _uniform(rng, (chans[i + 1],), fan)
    flat = c.widths[-1] * c.seed_grid ** 2
    enc["fc.weight"] = _uniform(rng, (c.d_enc, flat), flat)
    enc["fc.bias"] = _uniform(rng, (c.d_enc,), flat)
    for n in GRU_NAMES:
        shape = {"W": (c.d_h, c.d_enc), "U": (c.d_h, c.d_h), "b": (c.d_h,)}[n[0]]
        out["gru"][n] = _uniform(rng, shape, c.d_enc if n[0] != "U" else c.d_h)
    _init_decoder(out["obs_decoder"], c, rng, c.channels, ())
    _init_decoder(out["fire_decoder"], c, rng, 1, (c.n_horizons,))
    if static:
        out["static_proj"]["weight"] = _uniform(rng, (c.d_h, c.d_enc), c.d_enc)
        out["static_proj"]["bias"] = _uniform(rng, (c.d_h,), c.d_enc)
    return out


def _init_decoder(dst: dict, c: NetConfig, rng, out_channels: int, lead: tuple[int, ...]) -> None:
    seed = c.widths[-1] * c.seed_grid ** 2
    dst["fc.weight"] = _uniform(rng, lead + (seed, c.d_h), c.d_h)
    dst["fc.bias"] = _uniform(rng, lead + (seed,), c.d_h)
    chans = tuple(reversed(c.widths)) + (out_channels,)
    for i in range(4):
        shape = lead + (chans[i], chans[i + 1], DEC_K, DEC_K)
        if i == 3:
            # zero output layer: an untrained head emits exactly 0.5
            dst[f"deconv{i}.kernel"] = np.zeros(shape)
            dst[f"deconv{i}.bias"] = np.zeros(lead + (chans[i + 1],))
        else:
            fan = chans[i] * (DEC_K // DEC_STRIDE) ** 2
            dst[f"deconv{i}.kernel"] = _uniform(rng, shape, fan)
            dst[f"deconv{i}.bias"] = _uniform(rng, lead + (chans[i + 1],), fan)


class AgentNet:
    """Encoder, GRU and both decoders for a stack of agents.

    Every parameter carries a leading agent axis of length ``len(agent_ids)``
    so all agents advance through one set of batched array operations.  Each
    agent's slice is drawn from its own generator and no op mixes slices, so
    a stack of three agents computes exactly what three one-agent stacks do.

    theta_sys is the encoder, GRU, observation decoder (and, for the static
    baseline, the encoding-to-state projection); theta_pred is the fire
    decoder, which holds one head per horizon.
    """

    def __init__(self, cfg: NetConfig, rngs, agent_ids: Sequence[int] | None = None, static: bool = False):
        if isinstance(rngs, np.random.Generator):
            rngs = [rngs]
        rngs = list(rngs)
        self.cfg = cfg
        self.agent_ids = list(range(len(rngs))) if agent_ids is None else list(agent_ids)
        if len(self.agent_ids) != len(rngs) or not rngs:
            raise ShapeError(f"{len(rngs)} generators for agents {self.agent_ids}")
        self.static = static
        per_agent = [_init_agent(cfg, r, static) for r in rngs]
        for g in GROUPS:
            ps = ParamSet()
            for name in per_agent[0][g]:
                ps.add(name, np.stack([pa[g][name] for pa in per_agent]))
            setattr(self, g, ps)

    @property
    def n_stack(self) -> int:
        return len(self.agent_ids)

    def named_groups(self) -> dict[str, ParamSet]:
        return {g: getattr(self, g) for g in GROUPS if len(getattr(self, g))}

    def sys_params(self) -> list[Parameter]:
        return [*self.encoder, *self.gru, *self.obs_decoder, *self.static_proj]

    def pred_params(self) -> list[Parameter]:
        return list(self.fire_decoder)

    def parameters(self) -> list[Parameter]:
        return self.sys_params() + self.pred_params()

    def state(self) -> dict[str, np.ndarray]:
        """Per-agent arrays keyed ``agent<id>.<group>.<name>``."""
        out = {}
        for a, aid in enumerate(self.agent_ids):
            for g, ps in self.named_groups().items():
                for n, p in ps.items():
                    out[f"agent{aid}.{g}.{n}"] = p.data[a].copy()
        return out

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for a, aid in enumerate(self.agent_ids):
            for g, ps in self.named_groups().items():
                for n, p in ps.items():
                    key = f"agent{aid}.{g}.{n}"
                    if key not in arrays:
                        raise KeyError(f"checkpoint lacks {key}")
                    if arrays[key].shape != p.shape[1:]:
                        raise ShapeError(f"{key}: checkpoint shape {arrays[key].shape} vs model {p.shape[1:]}")
                    p.data[a] = arrays[key]


def param_count(cfg: NetConfig, static: bool = False) -> int:
    """Closed-form number of scalars of one agent."""
    chans = (cfg.channels,) + cfg.widths
    enc = sum(chans[i + 1] * chans[i] * ENC_K ** 2 + chans[i + 1] for i in range(4))
    flat = cfg.widths[-1] * cfg.seed_grid ** 2
    enc += cfg.d_enc * flat + cfg.d_enc
    gru = 3 * (cfg.d_h * cfg.d_enc + cfg.d_h * cfg.d_h + cfg.d_h)

    def dec(out):
        ch = tuple(reversed(cfg.widths)) + (out,)
        return flat * cfg.d_h + flat + sum(ch[i] * ch[i + 1] * DEC_K ** 2 + ch[i + 1] for i in range(4))
    total = enc + gru + dec(cfg.channels) + cfg.n_horizons * dec(1)
    if static:
        total += cfg.d_h * cfg.d_enc + cfg.d_h
    return total


# ---------------------------------------------------------------- forward passes
def _lift(t, base_ndim: int, net: AgentNet):
    """Bring a single sample or a batch to the stacked (A, B, ...) layout.

    Returns the lifted tensor and a function that undoes the lift on outputs
    (which then have their own trailing shape).
    """
    t = nx.as_tensor(t)
    extra = t.data.ndim - base_ndim
    if extra == 2:
        if t.shape[0] != net.n_stack:
            raise ShapeError(f"leading axis {t.shape[0]} != {net.n_stack} stacked agents")
        return t, lambda y: y
    if net.n_stack != 1 or extra not in (0, 1):
        raise ShapeError(f"input of shape {t.shape} does not fit a stack of {net.n_stack} agents")
    if extra == 1:
        return nx.reshape(t, (1,) + t.shape), lambda y: nx.reshape(y, y.shape[1:])
    return nx.reshape(t, (1, 1) + t.shape), lambda y: nx.reshape(y, y.shape[2:])


def _encode(x: Tensor, net: AgentNet) -> Tensor:
    c = net.cfg
    y = x
    e = net.encoder
    for i in range(4):
        y = nx.leaky_relu(nx.conv2d(y, e[f"conv{i}.kernel"], e[f"conv{i}.bias"], ENC_STRIDE, ENC_PAD), c.leak)
    y = nx.reshape(y, y.shape[:2] + (-1,))
    return nx.linear(y, e["fc.weight"], e["fc.bias"])


def encode(x, net: AgentNet) -> Tensor:
    """Frames (C,H,W) -> (d_enc,); also (B,C,H,W) or stacked (A,B,C,H,W)."""
    c = net.cfg
    if nx.as_tensor(x).shape[-3:] != (c.channels, c.grid, c.grid):
        raise ShapeError(f"encoder expects (..., {c.channels}, {c.grid}, {c.grid}), got {nx.as_tensor(x).shape}")
    x, unlift = _lift(x, 3, net)
    return unlift(_encode(x, net))


def _deconv_stack(y: Tensor, ps: ParamSet, cfg: NetConfig, groups: int) -> Tensor:
    for i in range(4):
        k, b = ps[f"deconv{i}.kernel"], ps[f"deconv{i}.bias"]
        if k.data.ndim > 5:
            k = nx.reshape(k, (groups,) + k.shape[2:])
            b = nx.reshape(b, (groups,) + b.shape[2:])
        y = nx.conv_transpose2d(y, k, b, DEC_STRIDE, DEC_PAD)
        if i < 3:
            y = nx.leaky_relu(y, cfg.leak)
    return nx.sigmoid(y, OUT_BOUND)


def _decode_obs(h: Tensor, net: AgentNet) -> Tensor:
    c, ps = net.cfg, net.obs_decoder
    y = nx.leaky_relu(nx.linear(h, ps["fc.weight"], ps["fc.bias"]), c.leak)
    A, B = h.shape[:2]
    y = nx.reshape(y, (A, B, c.widths[-1], c.seed_grid, c.seed_grid))
    return _deconv_stack(y, ps, c, A)


def _predict_fire(h: Tensor, net: AgentNet) -> Tensor:
    c, ps = net.cfg, net.fire_decoder
    A, B = h.shape[:2]
    L = c.n_horizons
    y = nx.linear(nx.reshape(h, (A, 1, B, c.d_h)), ps["fc.weight"], ps["fc.bias"])  # (A, L, B, F)
    y = nx.leaky_relu(y, c.leak)
    y = nx.reshape(y, (A * L, B, c.widths[-1], c.seed_grid, c.seed_grid))
    y = _deconv_stack(y, ps, c, A * L)  # (A*L, B, 1, H, W)
    y = nx.reshape(y, (A, L, B, c.grid, c.grid))
    return nx.transpose(y, (0, 2, 1, 3, 4))


def _check_state(h: Tensor, net: AgentNet) -> None:
    if h.shape[-1] != net.cfg.d_h:
        raise ShapeError(f"state dim {h.shape[-1]} != d_h {net.cfg.d_h}")


def decode_obs(h, net: AgentNet) -> Tensor:
    """Observation reconstruction: (d_h,) -> (C,H,W), batched and stacked alike."""
    h, unlift = _lift(h, 1, net)
    _check_state(h, net)
    return unlift(_decode_obs(h, net))


def predict_fire(h, net: AgentNet) -> Tensor:
    """Fire probabilities per horizon: (d_h,) -> (L,H,W), batched and stacked alike."""
    h, unlift = _lift(h, 1, net)
    _check_state(h, net)
    return unlift(_predict_fire(h, net))


def gru_step(h, x, net: AgentNet) -> Tensor:
    """h' = GRU(h, Enc(x))."""
    h, unlift = _lift(h, 1, net)
    x, _ = _lift(x, 3, net)
    _check_state(h, net)
    return unlift(nx.gru_cell(h, _encode(x, net), net.gru))


def advance_state(h, x, net: AgentNet) -> tuple[Tensor, Tensor]:
    """One recursion step: h' = GRU(h, Enc(x)) and the reconstruction Decoder0(h')."""
    h, unlift = _lift(h, 1, net)
    x, _ = _lift(x, 3, net)
    _check_state(h, net)
    h_next = nx.gru_cell(h, _encode(x, net), net.gru)
    return unlift(h_next), unlift(_decode_obs(h_next, net))


def static_state(x, net: AgentNet) -> Tensor:
    """Static baseline: linear projection of the current frame's encoding."""
    x, unlift = _lift(x, 3, net)
    p = net.static_proj
    return unlift(nx.linear(_encode(x, net), p["weight"], p["bias"]))


def rollout(h0, frames, net: AgentNet) -> Tensor:
    """Replay the recursion over stacked windows.

    ``h0`` is (A, M, d_h) and ``frames`` (A, M, T, C, H, W).  Returns the
    states (A, M, T, d_h), where entry t has consumed frames 0..t.  All
    frames are encoded in one batch because the encoder never sees the state.
    """
    frames = nx.as_tensor(frames)
    A, M, T = frames.shape[:3]
    enc = _encode(nx.reshape(frames, (A, M * T) + frames.shape[3:]), net)
    enc = nx.reshape(enc, (A, M, T, -1))
    h = nx.as_tensor(h0)
    states = []
    for t in range(T):
        h = nx.gru_cell(h, enc[:, :, t], net.gru)
        states.append(h)
    return nx.stack(states, axis=2)


def static_rollout(frames, net: AgentNet) -> Tensor:
    """Static analogue of :func:`rollout`: (A, M, T, C, H, W) -> (A, M, T, d_h)."""
    frames = nx.as_tensor(frames)
    A, M, T = frames.shape[:3]
    enc = _encode(nx.reshape(frames, (A, M * T) + frames.shape[3:]), net)
    p = net.static_proj
    return nx.reshape(nx.linear(enc, p["weight"], p["bias"]), (A, M, T, -1))


# ---------------------------------------------------------------- actor / critic
class ActorNet:
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        n_in, n_out, hid = cfg.n_agents * cfg.d_h, cfg.n_agents ** 2, cfg.rl_hidden
        self.params = ParamSet()
        self.params.add("fc0.weight", _uniform(rng, (hid, n_in), n_in))
        self.params.add("fc0.bias", _uniform(rng, (hid,), n_in))
        # zero logits at start: uniform off-diagonal sharing
        self.params.add("fc1.weight", np.zeros((n_out, hid)))
        self.params.add("fc1.bias", np.zeros(n_out))

    def parameters(self) -> list[Parameter]:
        return list(self.params)


class CriticNet:
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        n_in = cfg.n_agents * cfg.d_h + cfg.n_agents ** 2
        hid = cfg.rl_hidden
        self.params = ParamSet()
        self.params.add("fc0.weight", _uniform(rng, (hid, n_in), n_in))
        self.params.add("fc0.bias", _uniform(rng, (hid,), n_in))
        self.params.add("fc1.weight", _uniform(rng, (1, hid), hid))
        self.params.add("fc1.bias", _uniform(rng, (1,), hid))

    def parameters(self) -> list[Parameter]:
        return list(self.params)


def actor_logits(hbar, actor: ActorNet) -> Tensor:
    """(N*d_h,) -> (N,N) or (B,N*d_h) -> (B,N,N); entry [j, i] scores source j for destination i."""
    hbar = nx.as_tensor(hbar)
    n = actor.cfg.n_agents
    if hbar.shape[-1] != n * actor.cfg.d_h:
        raise ShapeError(f"actor expects {n * actor.cfg.d_h} inputs, got {hbar.shape}")
    p = actor.params
    y = nx.leaky_relu(nx.linear(hbar, p["fc0.weight"], p["fc0.bias"]), actor.cfg.leak)
    y = nx.linear(y, p["fc1.weight"], p["fc1.bias"])
    return nx.reshape(y, hbar.shape[:-1] + (n, n))


def actor_forward(hbar, actor: ActorNet, self_weight: float | None = None) -> Tensor:
    c = actor.cfg.self_weight if self_weight is None else self_weight
    return nx.action_matrix(actor_logits(hbar, actor), c)


def critic_forward(hbar, a, critic: CriticNet) -> Tensor:
    """q(h_bar, a): scalar for one pair, (B,) for a batch."""
    hbar, a = nx.as_tensor(hbar), nx.as_tensor(a)
    n = critic.cfg.n_agents
    if hbar.shape[-1] != n * critic.cfg.d_h or a.shape[-2:] != (n, n):
        raise ShapeError(f"critic inputs {hbar.shape}, {a.shape} do not match N={n}")
    flat_a = nx.reshape(a, a.shape[:-2] + (n * n,))
    p = critic.params
    y = nx.leaky_relu(nx.linear(nx.concat([hbar, flat_a], axis=-1), p["fc0.weight"], p["fc0.bias"]), critic.cfg.leak)
    q = nx.linear(y, p["fc1.weight"], p["fc1.bias"])
    return nx.reshape(q, q.shape[:-1])


def clone_params(src: ParamSet) -> ParamSet:
    out = ParamSet()
    for n, p in src.items():
        out.add(n, p.data)
    return out
