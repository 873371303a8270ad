"""Learned sample exchange between agents.

A deterministic actor maps the joint hidden state to a column-stochastic
source-selection matrix; each destination agent then draws the buffer it
trains from this tick.  A critic scores (state, matrix) pairs and both are
trained off-policy from a transition replay with slowly tracking target
copies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .buffers import InsufficientData, TransitionBuffer, stack_transitions
from .errors import MissingGroundTruth
from .metrics import iou
from .nets import ActorNet, CriticNet, NetConfig, ParamSet, actor_logits, clone_params, critic_forward
from .numerics import Tensor

REWARD_KINDS = ("mean_iou", "adversarial_max_loss")


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "mean_iou"
    gamma: float = 0.95

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"reward kind must be one of {REWARD_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")


# ---------------------------------------------------------------- sampling and reward
def sample_sources(a: np.ndarray, rng: np.random.Generator) -> list[int]:
    """Destination i draws its source from column i of ``a``."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    cdf = np.cumsum(a, axis=0)
    u = rng.random(n)
    return [min(int(np.searchsorted(cdf[:, i], u[i], side="right")), n - 1) for i in range(n)]


def compute_reward(spec: RewardSpec, preds=None, targets=None, losses=None) -> float:
    """Reward of one tick.

    ``mean_iou`` averages IOU over agents and horizons of ``preds`` /
    ``targets`` shaped (N, L, H, W).  ``adversarial_max_loss`` is the
    largest per-agent loss in ``losses``.
    """
    if spec.kind == "mean_iou":
        if targets is None or preds is None:
            raise MissingGroundTruth("no ground truth for the horizons of this tick")
        preds, targets = np.asarray(preds), np.asarray(targets)
        return float(np.mean([iou(targets[i, l], preds[i, l])
                              for i in range(preds.shape[0]) for l in range(preds.shape[1])]))
    if losses is None or len(losses) == 0:
        raise MissingGroundTruth("no losses available for this tick")
    return float(np.max(losses))


def exploration_noise(logits: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) to the off-diagonal logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if sigma < 0:
        raise ValueError("noise scale must be non-negative")
    if sigma == 0:
        return logits.copy()
    noise = sigma * rng.standard_normal(logits.shape)
    np.fill_diagonal(noise, 0.0)
    return logits + noise


def noise_scale(tick: int, sigma0: float, sigma_min: float, decay_ticks: int) -> float:
    """Linear decay from ``sigma0`` to ``sigma_min`` over ``decay_ticks``."""
    if decay_ticks <= 0:
        return sigma_min
    frac = min(tick / decay_ticks, 1.0)
    return sigma0 + (sigma_min - sigma0) * frac


# ---------------------------------------------------------------- updates
class _Frozen:
    """Read-only view of a network: same arrays, no gradient tracking."""

    def __init__(self, net):
        self.cfg = net.cfg
        self.params = {n: Tensor(p.data) for n, p in net.params.items()}


def critic_update(batch, actor_target, critic: CriticNet, critic_target, gamma: float, lr: float) -> float:
    """One TD regression step of the live critic towards r + gamma * q_target(h', mu_target(h'))."""
    if len(batch) == 0:
        raise InsufficientData("empty transition batch")
    hbar, action, reward, hbar_next = stack_transitions(batch)
    with nx.no_grad():
        a_next = nx.action_matrix(actor_logits(hbar_next, actor_target), actor_target.cfg.self_weight)
        y = reward + gamma * critic_forward(hbar_next, a_next, critic_target).data
    q = critic_forward(hbar, action, critic)
    loss = nx.mse(q, y)
    params = list(critic.params)
    nx.zero_grad(params)
    nx.backward(loss)
    nx.adam_update(params, lr)
    return loss.item()


def actor_objective(hbar: np.ndarray, actor: ActorNet, critic: CriticNet) -> Tensor:
    """J = mean_m q(h_m, mu(h_m)) with the critic's parameters held fixed."""
    a = nx.action_matrix(actor_logits(hbar, actor), actor.cfg.self_weight)
    return nx.mean(critic_forward(hbar, a, _Frozen(critic)))


def actor_update(batch, actor: ActorNet, critic: CriticNet, lr: float) -> float:
    """One ascent step on J; returns J evaluated before the step."""
    if len(batch) == 0:
        raise InsufficientData("empty transition batch")
    hbar = stack_transitions(batch)[0]
    J = actor_objective(hbar, actor, critic)
    params = list(actor.params)
    nx.zero_grad(params)
    nx.backward(nx.neg(J))
    nx.adam_update(params, lr)
    return J.item()


def polyak_update(targets: ParamSet, live: ParamSet, tau: float) -> None:
    nx.polyak_update(list(targets), list(live), tau)


# ---------------------------------------------------------------- orchestration
@dataclass(frozen=True)
class ExchangeConfig:
    reward: RewardSpec = RewardSpec()
    tau: float = 0.005
    batch: int = 32
    capacity: int = 2048
    sigma0: float = 1.0
    sigma_min: float = 0.05
    decay_ticks: int = 10_000


class _Target:
    def __init__(self, net):
        self.cfg = net.cfg
        self.params = clone_params(net.params)


class ExchangeLayer:
    """Actor, critic, their target copies, and the transition replay."""

    def __init__(self, net_cfg: NetConfig, cfg: ExchangeConfig, rng: np.random.Generator):
        self.net_cfg = net_cfg
        self.cfg = cfg
        self.rng = rng
        self.actor = ActorNet(net_cfg, rng)
        self.critic = CriticNet(net_cfg, rng)
        self.actor_target = _Target(self.actor)
        self.critic_target = _Target(self.critic)
        self.buffer = TransitionBuffer(cfg.capacity, self_weight=net_cfg.self_weight)

    def act(self, hbar: np.ndarray, tick: int) -> np.ndarray:
        """Noisy action matrix for the joint state ``hbar``."""
        with nx.no_grad():
            logits = actor_logits(hbar, self.actor).data
        sigma = noise_scale(tick, self.cfg.sigma0, self.cfg.sigma_min, self.cfg.decay_ticks)
        noisy = exploration_noise(logits, sigma, self.rng)
        return nx.action_matrix(Tensor(noisy), self.net_cfg.self_weight).data

    def learn(self, eps_critic: float, eps_actor: float) -> tuple[float, float]:
        """Critic step, then actor step, then target tracking; NaN when the replay is too short."""
        try:
            batch = self.buffer.sample_transitions(min(self.cfg.batch, len(self.buffer)) or 1, self.rng)
        except InsufficientData:
            return float("nan"), float("nan")
        c_loss = critic_update(batch, self.actor_target, self.critic, self.critic_target,
                               self.cfg.reward.gamma, eps_critic)
        J = actor_update(batch, self.actor, self.critic, eps_actor)
        polyak_update(self.actor_target.params, self.actor.params, self.cfg.tau)
        polyak_update(self.critic_target.params, self.critic.params, self.cfg.tau)
        return c_loss, J

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, ps in (("actor", self.actor.params), ("critic", self.critic.params),
                           ("actor_target", self.actor_target.params), ("critic_target", self.critic_target.params)):
            for n, p in ps.items():
                out[f"exchange.{prefix}.{n}"] = p.data.copy()
        return out

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, ps in (("actor", self.actor.params), ("critic", self.critic.params),
                           ("actor_target", self.actor_target.params), ("critic_target", self.critic_target.params)):
            for n, p in ps.items():
                p.data[...] = arrays[f"exchange.{prefix}.{n}"]
