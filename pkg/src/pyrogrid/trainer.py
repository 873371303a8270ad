"""Loss assembly, step-size schedules, the online training loop and baselines.

One optimizer tick is taken per data week.  All agents of a run live in one
parameter stack (see :class:`~pyrogrid.nets.AgentNet`), so the per-agent
work of a tick is a handful of batched array operations.  Independent runs
(for example several seeds) can share a stack as separate *groups*; agents
never exchange samples across a group boundary.
"""
from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .buffers import TrajectoryBuffer, Transition
from .environment import GridSeries
from .errors import ConfigError, InsufficientData, MissingGroundTruth, NonFiniteValue, ShapeError, SplitMismatch
from .exchange import ExchangeConfig, ExchangeLayer, RewardSpec, compute_reward, sample_sources
from .metrics import MetricTable, auroc, bce, horizon_scores, iou
from .nets import (
    AgentNet, NetConfig, decode_obs, gru_step, predict_fire, rollout, static_rollout, static_state,
)
from .numerics import Tensor

# purposes mixed into every per-agent seed sequence
INIT, SAMPLE, EXCHANGE = 0, 1, 2
RATE_KEYS = ("pred", "sys", "critic", "actor")
LOG_COLUMNS = ("tick", "agent", "split", "bce", "auroc", "iou", "reward",
               "eps_sys", "eps_pred", "eps_critic", "eps_actor", "episode", "week", "l_sys", "l_pred")
ENCODE_CHUNK = 32


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def worker_count() -> int:
    """Worker cap from ``PYROGRID_THREADS``; all cores when unset."""
    raw = os.environ.get("PYROGRID_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PYROGRID_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PYROGRID_THREADS must be a positive integer, got {raw!r}")
    return n


@contextlib.contextmanager
def thread_limit(n: int | None = None):
    """Cap the BLAS pool.  Reductions stay in a fixed order, so results do not depend on ``n``."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n or worker_count()):
        yield


# ---------------------------------------------------------------- schedules
@dataclass(frozen=True)
class StepSchedule:
    """eps_n = eps0 * (1 + n) ** -p for each of the four update streams."""

    base: tuple[float, float, float, float] = (1e-3, 5e-4, 1e-4, 5e-5)
    exponents: tuple[float, float, float, float] = (0.1, 0.2, 0.3, 0.4)

    def __post_init__(self):
        b, p = tuple(map(float, self.base)), tuple(map(float, self.exponents))
        object.__setattr__(self, "base", b)
        object.__setattr__(self, "exponents", p)
        if len(b) != 4 or len(p) != 4:
            raise ConfigError("schedule needs four base rates and four exponents (pred, sys, critic, actor)")
        if min(b) <= 0:
            raise ConfigError(f"base rates must be positive, got {b}")
        if any(b[i] < b[i + 1] for i in range(3)):
            raise ConfigError(f"base rates must not increase from pred to actor, got {b}")
        if any(p[i] >= p[i + 1] for i in range(3)) or p[0] < 0:
            raise ConfigError(f"decay exponents must be non-negative and strictly increasing, got {p}")

    def rate(self, kind: str, n: int) -> float:
        i = RATE_KEYS.index(kind)
        return self.base[i] * (1.0 + n) ** (-self.exponents[i])

    def rates(self, n: int) -> dict[str, float]:
        return {k: self.rate(k, n) for k in RATE_KEYS}


# ---------------------------------------------------------------- configuration
@dataclass(frozen=True)
class TrainConfig:
    n_agents: int = 3
    grid: int = 16
    channels: int = 11
    d_enc: int = 16
    d_h: int = 16
    widths: tuple[int, ...] = (4, 8, 8, 16)
    horizons: tuple[int, ...] = (1, 2, 3, 4)
    rl_hidden: int = 32
    self_weight: float = 0.8
    traj_capacity: int = 512
    trans_capacity: int = 2048
    batch: int = 2
    window: int = 4
    rl_batch: int = 32
    episodes: int = 50
    gamma: float = 0.95
    tau: float = 0.005
    eps0: tuple[float, float, float, float] = (1e-3, 5e-4, 1e-4, 5e-5)
    decay: tuple[float, float, float, float] = (0.1, 0.2, 0.3, 0.4)
    reward: str = "mean_iou"
    sigma0: float = 1.0
    sigma_min: float = 0.05
    decay_ticks: int = 10_000
    seed: int = 0
    use_sys_id: bool = True
    use_exchange: bool = True
    static_only: bool = False
    persist_buffers: bool = True

    def __post_init__(self):
        for name in ("widths", "horizons", "eps0", "decay"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.static_only and (self.use_sys_id or self.use_exchange):
            raise ConfigError("static_only has no recurrent state: it requires use_sys_id=false and use_exchange=false")
        if self.n_agents < 1 or self.episodes < 0 or self.batch < 1:
            raise ConfigError("n_agents and batch must be positive, episodes non-negative")
        if self.window < 2:
            raise ConfigError(f"window must be at least 2 weeks, got {self.window}")
        if sorted(self.horizons) != list(self.horizons) or min(self.horizons) < 1:
            raise ConfigError(f"horizons must be positive and increasing, got {self.horizons}")
        if tuple(self.horizons) != tuple(range(1, len(self.horizons) + 1)):
            raise ConfigError(f"horizons must be consecutive weeks 1..L, got {self.horizons}")
        try:
            RewardSpec(self.reward, self.gamma)
            self.net_config()
        except (ValueError, ShapeError) as e:
            raise ConfigError(str(e)) from None
        self.schedule()

    # -- derived objects
    def net_config(self, n_agents: int | None = None) -> NetConfig:
        return NetConfig(n_agents=n_agents or self.n_agents, channels=self.channels, grid=self.grid,
                         d_enc=self.d_enc, d_h=self.d_h, widths=self.widths, horizons=self.horizons,
                         rl_hidden=self.rl_hidden, self_weight=self.self_weight)

    def schedule(self) -> StepSchedule:
        return StepSchedule(self.eps0, self.decay)

    def exchange_config(self) -> ExchangeConfig:
        return ExchangeConfig(RewardSpec(self.reward, self.gamma), tau=self.tau, batch=self.rl_batch,
                              capacity=self.trans_capacity, sigma0=self.sigma0, sigma_min=self.sigma_min,
                              decay_ticks=self.decay_ticks)

    @property
    def horizon_max(self) -> int:
        return max(self.horizons)

    @property
    def method(self) -> str:
        if self.static_only:
            return "static"
        name = "proposed" if self.use_sys_id else "gru"
        return name + ("+exchange" if self.use_exchange else "")

    # -- JSON, field for field
    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        defaults = cls.__new__(cls)
        for name, f in known.items():
            object.__setattr__(defaults, name, f.default)
        for name, value in d.items():
            want = type(getattr(defaults, name))
            ok = (isinstance(value, list) if want is tuple
                  else isinstance(value, (int, float)) and not isinstance(value, bool) if want is float
                  else isinstance(value, want) and not (want is int and isinstance(value, bool)))
            if not ok:
                raise ConfigError(f"config field '{name}' expects {want.__name__}, got {value!r}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


METHOD_FLAGS = {
    "static": dict(static_only=True, use_sys_id=False, use_exchange=False),
    "gru": dict(static_only=False, use_sys_id=False, use_exchange=False),
    "proposed": dict(static_only=False, use_sys_id=True, use_exchange=False),
    "proposed+exchange": dict(static_only=False, use_sys_id=True, use_exchange=True),
}


def variant(cfg: TrainConfig, method: str) -> TrainConfig:
    """``cfg`` with the ablation flags of a named method."""
    if method not in METHOD_FLAGS:
        raise ConfigError(f"unknown method {method!r}; choose from {sorted(METHOD_FLAGS)}")
    return replace(cfg, **METHOD_FLAGS[method])


# ---------------------------------------------------------------- losses
def pred_loss(pred, targets, rows: bool = False) -> Tensor:
    """Mean per-pixel negated binary cross-entropy over horizons and windows.

    ``rows=True`` keeps the leading (agent) axis and returns one loss per row.
    """
    return nx.bce(nx.as_tensor(pred), np.asarray(targets, dtype=np.float64), rows=rows)


def reconstruction_loss(x_hat, x, rows: bool = False) -> Tensor:
    """Mean squared pixel difference between reconstructed and true frames."""
    return nx.mse(nx.as_tensor(x_hat), np.asarray(x, dtype=np.float64), rows=rows)


def sys_loss(h0, frames, net: AgentNet) -> Tensor:
    """Replay the recursion from ``h0`` over a window and score the next-frame reconstructions.

    ``h0`` is (M, d_h) and ``frames`` (M, T, C, H, W) for a one-agent net,
    or carry a leading agent axis for a stack (one loss per agent then).
    """
    frames = nx.as_tensor(frames)
    stacked = frames.data.ndim == 6
    if not stacked:
        frames = nx.reshape(frames, (1,) + frames.shape)
        h0 = nx.reshape(nx.as_tensor(h0), (1,) + nx.as_tensor(h0).shape)
    if frames.shape[2] < 2:
        raise InsufficientData("a window needs at least two frames for a next-frame target")
    states = rollout(h0, frames, net)
    loss = _sys_from_states(states, frames.data, net)
    return loss if stacked else nx.reshape(loss, ())


def _sys_from_states(states: Tensor, frames: np.ndarray, net: AgentNet) -> Tensor:
    A, M, T = states.shape[:3]
    recon = decode_obs(nx.reshape(states[:, :, :-1], (A, M * (T - 1), -1)), net)
    target = frames[:, :, 1:].reshape((A, M * (T - 1)) + frames.shape[3:])
    return reconstruction_loss(recon, target, rows=True)


def window_losses(net: AgentNet, obs: np.ndarray, h0: np.ndarray, targets: np.ndarray,
                  static: bool, use_sys_id: bool) -> tuple[Tensor | None, Tensor]:
    """Per-agent (sys, pred) losses for stacked windows.

    ``obs`` is (A, M, T, C, H, W), ``h0`` (A, M, d_h), ``targets``
    (A, M, T, L, H, W).
    """
    A, M, T = obs.shape[:3]
    frames = Tensor(obs)
    states = static_rollout(frames, net) if static else rollout(h0, frames, net)
    pred = predict_fire(nx.reshape(states, (A, M * T, -1)), net)
    l_pred = pred_loss(pred, targets.reshape((A, M * T) + targets.shape[3:]), rows=True)
    l_sys = _sys_from_states(states, obs, net) if use_sys_id else None
    return l_sys, l_pred


def trained_params(net: AgentNet, cfg: TrainConfig) -> tuple[list, list]:
    """(theta_sys, theta_pred) restricted to the parts the method actually uses."""
    sys = list(net.encoder) + (list(net.static_proj) if cfg.static_only else list(net.gru))
    if cfg.use_sys_id:
        sys += list(net.obs_decoder)
    return sys, net.pred_params()


# ---------------------------------------------------------------- online inference
def online_states(net: AgentNet, frames: np.ndarray, static: bool, h0: np.ndarray | None = None) -> np.ndarray:
    """States after consuming each frame of (A, T, C, H, W), with no parameter updates."""
    A, T = frames.shape[:2]
    out = np.zeros((A, T, net.cfg.d_h))
    h = np.zeros((A, 1, net.cfg.d_h)) if h0 is None else np.asarray(h0, dtype=np.float64).reshape(A, 1, -1)
    with nx.no_grad():
        for s in range(0, T, ENCODE_CHUNK):
            chunk = frames[:, s:s + ENCODE_CHUNK].astype(np.float64)
            if static:
                out[:, s:s + chunk.shape[1]] = static_state(chunk, net).data
                continue
            for j in range(chunk.shape[1]):
                h = gru_step(h, chunk[:, j:j + 1], net).data
                out[:, s + j] = h[:, 0]
    return out


def decode_states(net: AgentNet, states: np.ndarray, what: str) -> np.ndarray:
    """Apply a decoder to (A, T, d_h) states in chunks: 'fire' -> (A,T,L,H,W), 'obs' -> (A,T,C,H,W)."""
    fn = predict_fire if what == "fire" else decode_obs
    parts = []
    with nx.no_grad():
        for s in range(0, states.shape[1], ENCODE_CHUNK):
            parts.append(fn(states[:, s:s + ENCODE_CHUNK], net).data)
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------- run state
@dataclass
class TickReport:
    tick: int
    week: int
    episode: int
    l_sys: np.ndarray
    l_pred: np.ndarray
    skipped: bool
    rewards: list
    critic_loss: list
    actor_J: list
    sources: list[int]
    rates: dict[str, float]


@dataclass
class RunArtifacts:
    checkpoints: list[Path]
    episode_pred_loss: list[float]
    trainer: "Trainer"
    log_path: Path | None = None
    exchange_log_path: Path | None = None


def _check_series(cfg: TrainConfig, series: Sequence[GridSeries], what: str) -> None:
    for gs in series:
        if gs.obs.shape[1:] != (cfg.channels, cfg.grid, cfg.grid):
            raise SplitMismatch(f"{what} series has frames {gs.obs.shape[1:]}, model expects "
                                f"{(cfg.channels, cfg.grid, cfg.grid)}")


class Trainer:
    """Online training of a stack of agents over their training weeks.

    ``members`` lists one (seed, agent id) pair per stacked agent and
    ``groups`` partitions stack positions into independent runs.  By default
    the stack holds agents 0..N-1 of ``cfg.seed`` as a single group.
    Every agent draws its initial weights and its mini-batches from generators
    keyed by its own (seed, agent id), so any agent trains identically whether
    it shares a stack or runs alone, as long as samples are not exchanged.
    """

    def __init__(self, cfg: TrainConfig, series: Sequence[GridSeries],
                 members: Sequence[tuple[int, int]] | None = None,
                 groups: Sequence[Sequence[int]] | None = None):
        members = [(cfg.seed, i) for i in range(cfg.n_agents)] if members is None else [tuple(m) for m in members]
        if len(series) != len(members):
            raise SplitMismatch(f"{len(series)} series for {len(members)} agents")
        _check_series(cfg, series, "training")
        weeks = {gs.weeks for gs in series}
        if len(weeks) != 1:
            raise SplitMismatch(f"agents disagree on the number of training weeks: {sorted(weeks)}")
        self.weeks = weeks.pop()
        if self.weeks < cfg.window + cfg.horizon_max:
            raise InsufficientData(f"{self.weeks} training weeks cannot fill a window of "
                                   f"{cfg.window} plus {cfg.horizon_max} horizons")
        self.cfg = cfg
        self.members = members
        self.groups = [list(range(len(members)))] if groups is None else [list(g) for g in groups]
        if sorted(i for g in self.groups for i in g) != list(range(len(members))):
            raise ConfigError("groups must partition the stacked agents")
        self.obs = np.stack([gs.obs for gs in series])           # (A, T, C, H, W) float32
        self.fire = np.stack([gs.fire for gs in series])         # (A, T, H, W) uint8
        ids = list(range(len(members))) if len(set(m[1] for m in members)) < len(members) else [m[1] for m in members]
        self.net = AgentNet(cfg.net_config(), [stream(s, a, INIT) for s, a in members], agent_ids=ids,
                            static=cfg.static_only)
        self.sample_rngs = [stream(s, a, SAMPLE) for s, a in members]
        self.schedule = cfg.schedule()
        self.layers: list[ExchangeLayer] = []
        if cfg.use_exchange:
            for g in self.groups:
                self.layers.append(ExchangeLayer(cfg.net_config(len(g)), cfg.exchange_config(),
                                                 stream(members[g[0]][0], EXCHANGE)))
        self.sys_params, self.pred_params = trained_params(self.net, cfg)
        self.buffers = [TrajectoryBuffer(cfg.traj_capacity) for _ in members]
        self.tick_index = 0
        self.seq = 0
        self.episode = 0
        self.log_rows: list[dict] = []
        self.exchange_rows: list[dict] = []
        self.reset_episode()

    @property
    def n_stack(self) -> int:
        return len(self.members)

    def reset_episode(self) -> None:
        self.h = np.zeros((self.n_stack, 1, self.cfg.d_h))
        self.pending = [None] * len(self.groups)
        if not self.cfg.persist_buffers:
            self.buffers = [TrajectoryBuffer(self.cfg.traj_capacity) for _ in self.members]

    def state(self) -> dict[str, np.ndarray]:
        out = self.net.state()
        for k, layer in enumerate(self.layers):
            prefix = "" if len(self.layers) == 1 else f"group{k}."
            out.update({prefix + key: v for key, v in layer.state().items()})
        out["trainer.tick"] = np.array([self.tick_index], dtype=np.int64)
        return out

    # ------------------------------------------------------------ one tick
    def _online_step(self, t: int):
        cfg = self.cfg
        x = self.obs[:, t].astype(np.float64)
        with nx.no_grad():
            if cfg.static_only:
                h_prev = np.zeros_like(self.h)
                h_new = static_state(x[:, None], self.net).data
            else:
                h_prev = self.h
                h_new = gru_step(self.h, x[:, None], self.net).data
            preds = predict_fire(h_new, self.net).data[:, 0]    # (A, L, H, W)
        for a, buf in enumerate(self.buffers):
            buf.push(x[a], h_prev[a, 0], self.fire[a, t], t, self.seq)
        self.h = h_new
        L = cfg.horizon_max
        targets = self.fire[:, t + 1:t + 1 + L].astype(np.float64) if t + L < self.weeks else None
        return preds, targets

    def _update_agents(self, sources: list[int], rates: dict[str, float]):
        cfg = self.cfg
        try:
            batches = [self.buffers[src].sample_trajectory(cfg.window, cfg.batch, cfg.horizon_max, self.sample_rngs[a])
                       for a, src in enumerate(sources)]
        except InsufficientData:
            return None, None
        obs = np.stack([b.obs for b in batches]).astype(np.float64)
        h0 = np.stack([b.h0 for b in batches])
        targets = np.stack([b.targets for b in batches])
        l_sys, l_pred = window_losses(self.net, obs, h0, targets, cfg.static_only, cfg.use_sys_id)
        total = nx.sum_(l_pred) if l_sys is None else nx.add(nx.sum_(l_pred), nx.sum_(l_sys))
        if not np.isfinite(total.item()):
            raise NonFiniteValue(f"non-finite training loss at tick {self.tick_index}")
        nx.zero_grad(self.sys_params + self.pred_params)
        nx.backward(total)
        nx.adam_update(self.sys_params, rates["sys"])
        nx.adam_update(self.pred_params, rates["pred"])
        sys_vals = np.full(self.n_stack, np.nan) if l_sys is None else l_sys.data.copy()
        return sys_vals, l_pred.data.copy()

    def tick(self, t: int) -> TickReport:
        """One optimizer tick on training week ``t``."""
        cfg, n = self.cfg, self.tick_index
        rates = self.schedule.rates(n)
        # (1) online state update and storage
        preds, targets = self._online_step(t)
        # (2)-(3) action matrix and source assignment, per group
        sources = list(range(self.n_stack))
        actions = [None] * len(self.groups)
        for k, (g, layer) in enumerate(zip(self.groups, self.layers)):
            hbar = self.h[g, 0].ravel()
            if self.pending[k] is not None:
                h_prev, a_prev, r_prev = self.pending[k]
                layer.buffer.push(Transition(h_prev, a_prev, r_prev, hbar.copy()))
            actions[k] = layer.act(hbar, n)
            picks = sample_sources(actions[k], layer.rng)
            for dest, src in zip(g, picks):
                sources[dest] = g[src]
        # (4) agent updates on the assigned buffers
        l_sys, l_pred = self._update_agents(sources, rates)
        skipped = l_pred is None
        # (5)-(7) reward, transition, critic/actor and target tracking
        rewards, c_losses, Js = [], [], []
        for k, (g, layer) in enumerate(zip(self.groups, self.layers)):
            try:
                if cfg.reward == "mean_iou":
                    r = compute_reward(layer.cfg.reward, preds=preds[g], targets=None if targets is None else targets[g])
                else:
                    r = compute_reward(layer.cfg.reward,
                                       losses=None if skipped else list((np.nan_to_num(l_sys) + l_pred)[g]))
                self.pending[k] = (self.h[g, 0].ravel().copy(), actions[k], r)
            except MissingGroundTruth:
                r = float("nan")
                self.pending[k] = None
            c_loss, J = layer.learn(rates["critic"], rates["actor"])
            rewards.append(r)
            c_losses.append(c_loss)
            Js.append(J)
        report = TickReport(n, t, self.episode,
                            np.full(self.n_stack, np.nan) if skipped else l_sys,
                            np.full(self.n_stack, np.nan) if skipped else l_pred,
                            skipped, rewards, c_losses, Js, sources, rates)
        self._log(report, preds, targets, actions)
        # (8) schedules advance
        self.tick_index += 1
        self.seq += 1
        return report

    def _log(self, rep: TickReport, preds, targets, actions) -> None:
        group_of = {i: k for k, g in enumerate(self.groups) for i in g}
        for a in range(self.n_stack):
            if targets is not None:
                t_a, p_a = targets[a], preds[a]
                m = (bce(t_a, p_a), auroc(t_a, p_a), iou(t_a, p_a))
            else:
                m = (math.nan,) * 3
            k = group_of[a]
            self.log_rows.append({
                "tick": rep.tick, "agent": a, "split": "train", "bce": m[0], "auroc": m[1], "iou": m[2],
                "reward": rep.rewards[k] if self.layers else math.nan,
                "eps_sys": rep.rates["sys"], "eps_pred": rep.rates["pred"],
                "eps_critic": rep.rates["critic"], "eps_actor": rep.rates["actor"],
                "episode": rep.episode, "week": rep.week, "l_sys": rep.l_sys[a], "l_pred": rep.l_pred[a]})
        for k, g in enumerate(self.groups[:len(self.layers)]):
            for dest in g:
                self.exchange_rows.append({
                    "tick": rep.tick, "group": k, "dest": dest, "source": rep.sources[dest],
                    "self_prob": float(actions[k][g.index(dest), g.index(dest)]),
                    "reward": rep.rewards[k], "critic_loss": rep.critic_loss[k], "actor_J": rep.actor_J[k]})

    def run_episode(self) -> list[TickReport]:
        self.reset_episode()
        reports = [self.tick(t) for t in range(self.weeks)]
        self.episode += 1
        return reports


def _rows_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def train(cfg: TrainConfig, series: Sequence[GridSeries], out_dir=None, progress=None,
          members=None, groups=None) -> RunArtifacts:
    """Run ``cfg.episodes`` passes over the training weeks.

    With ``out_dir`` the resolved config, a checkpoint after initialisation
    and after every episode, the metric log and (when exchanging) the
    exchange log are written there.
    """
    with thread_limit():
        trainer = Trainer(cfg, series, members=members, groups=groups)
        out = Path(out_dir) if out_dir is not None else None
        ckpts: list[Path] = []
        if out is not None:
            (out / "checkpoints").mkdir(parents=True, exist_ok=True)
            cfg.save(out / "config.json")

        def checkpoint(tag):
            if out is not None:
                path = out / "checkpoints" / f"{tag}.pgck"
                nx.save_checkpoint(trainer.state(), path)
                ckpts.append(path)

        checkpoint("init")
        episode_loss = []
        for e in range(cfg.episodes):
            reports = trainer.run_episode()
            vals = [r.l_pred.mean() for r in reports if not r.skipped]
            episode_loss.append(float(np.mean(vals)) if vals else math.nan)
            checkpoint(f"episode{e + 1:03d}")
            if progress is not None:
                progress(e + 1, episode_loss[-1])
        log_path = ex_path = None
        if out is not None:
            log_path = out / "metrics.csv"
            log_path.write_text(_rows_csv(trainer.log_rows, LOG_COLUMNS))
            if trainer.layers:
                ex_path = out / "exchange.csv"
                ex_path.write_text(_rows_csv(trainer.exchange_rows, trainer.exchange_rows[0].keys()
                                             if trainer.exchange_rows else ("tick",)))
    return RunArtifacts(ckpts, episode_loss, trainer, log_path, ex_path)


# ---------------------------------------------------------------- evaluation
@dataclass
class EvalResult:
    table: MetricTable
    obs_mse: np.ndarray                 # per agent; NaN for the static model
    per_agent_bce: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _net_from(checkpoint, cfg: TrainConfig, n_stack: int) -> AgentNet:
    if isinstance(checkpoint, AgentNet):
        return checkpoint
    arrays = nx.load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    ids = sorted({int(k.split(".")[0][5:]) for k in arrays if k.startswith("agent")})
    if len(ids) != n_stack:
        raise SplitMismatch(f"checkpoint holds {len(ids)} agents, data has {n_stack}")
    net = AgentNet(cfg.net_config(), [np.random.default_rng(0)] * n_stack, agent_ids=ids, static=cfg.static_only)
    try:
        net.load(arrays)
    except (KeyError, ShapeError) as e:
        raise SplitMismatch(f"checkpoint does not fit the config: {e}") from None
    return net


def evaluate(checkpoint, cfg: TrainConfig, train_series: Sequence[GridSeries], val_series: Sequence[GridSeries],
             method: str | None = None) -> EvalResult:
    """Score a trained stack on the validation weeks.

    The hidden state is warmed up through the training weeks, then rolled
    through the validation weeks without updates.  For every (agent,
    horizon) the predictions made at weeks whose target still falls inside
    the validation span are pooled and scored.  ``checkpoint`` may be a
    path, a mapping of arrays or an :class:`AgentNet`.
    """
    if len(train_series) != len(val_series):
        raise SplitMismatch(f"{len(train_series)} training vs {len(val_series)} validation series")
    _check_series(cfg, train_series, "training")
    _check_series(cfg, val_series, "validation")
    V = {gs.weeks for gs in val_series}
    if len(V) != 1 or V.pop() <= cfg.horizon_max:
        raise SplitMismatch(f"validation span must exceed {cfg.horizon_max} weeks for every agent")
    net = _net_from(checkpoint, cfg, len(val_series))
    method = method or cfg.method
    with thread_limit():
        warm = np.stack([gs.obs for gs in train_series])
        frames = np.stack([gs.obs for gs in val_series])
        fire = np.stack([gs.fire for gs in val_series]).astype(np.float64)
        h0 = None if cfg.static_only or warm.shape[1] == 0 else online_states(net, warm, False)[:, -1]
        states = online_states(net, frames, cfg.static_only, h0)
        preds = decode_states(net, states, "fire")                      # (A, T, L, H, W)
        if cfg.static_only:
            obs_mse = np.full(len(val_series), np.nan)
        else:
            recon = decode_states(net, states[:, :-1], "obs")
            obs_mse = np.mean((recon - frames[:, 1:].astype(np.float64)) ** 2, axis=(1, 2, 3, 4))
    return score_predictions(preds, fire, cfg.horizons, method, obs_mse)


def score_predictions(preds: np.ndarray, fire: np.ndarray, horizons, method: str, obs_mse=None) -> EvalResult:
    """Per (agent, horizon) metrics for online predictions ``preds`` (A, T, L, H, W) against ``fire`` (A, T, H, W)."""
    A, T = fire.shape[:2]
    table = MetricTable()
    for a in range(A):
        for j, l in enumerate(horizons):
            s = horizon_scores(fire[a, l:], preds[a, :T - l, j])
            table.add(method, a, l, s["bce"], s["auroc"], s["iou"])
    per_agent = np.array([np.mean([r["bce"] for r in table.rows if r["agent"] == a]) for a in range(A)])
    return EvalResult(table, np.full(A, np.nan) if obs_mse is None else np.asarray(obs_mse), per_agent)


# ---------------------------------------------------------------- baselines
@dataclass
class LogisticBaseline:
    """One logistic model per agent over the channel values of a single pixel, one head per horizon."""

    weight: np.ndarray      # (A, L, C)
    bias: np.ndarray        # (A, L)

    def predict(self, obs: np.ndarray) -> np.ndarray:
        """(A, T, C, H, W) -> (A, T, L, H, W) probabilities."""
        z = np.einsum("atchw,alc->atlhw", obs.astype(np.float64), self.weight) + self.bias[:, None, :, None, None]
        return 1.0 / (1.0 + np.exp(-z))


def baseline_logistic(train_series: Sequence[GridSeries], horizons=(1, 2, 3, 4), steps: int = 300,
                      lr: float = 0.05) -> LogisticBaseline:
    """Full-batch Adam on pixel-wise BCE from zero weights."""
    L = len(horizons)
    Ws, bs = [], []
    for gs in train_series:
        T, C = gs.obs.shape[:2]
        n = T - max(horizons)
        x = gs.obs[:n].transpose(0, 2, 3, 1).reshape(-1, C).astype(np.float64)          # (n*H*W, C)
        y = np.stack([gs.fire[l:l + n].reshape(-1) for l in horizons], axis=1).astype(np.float64)  # (n*H*W, L)
        W = nx.Parameter(np.zeros((L, C)))
        b = nx.Parameter(np.zeros(L))
        for _ in range(steps):
            loss = nx.bce(nx.sigmoid(nx.linear(x, W, b)), y)
            nx.zero_grad([W, b])
            nx.backward(loss)
            nx.adam_update([W, b], lr)
        Ws.append(W.data.copy())
        bs.append(b.data.copy())
    return LogisticBaseline(np.stack(Ws), np.stack(bs))


def evaluate_logistic(model: LogisticBaseline, val_series: Sequence[GridSeries], horizons=(1, 2, 3, 4)) -> EvalResult:
    frames = np.stack([gs.obs for gs in val_series])
    fire = np.stack([gs.fire for gs in val_series]).astype(np.float64)
    return score_predictions(model.predict(frames), fire, horizons, "logistic")


def baseline_static(cfg: TrainConfig, series: Sequence[GridSeries], **kw) -> RunArtifacts:
    """Encoder plus a learned projection into the state space, decoded directly; no recurrence."""
    return train(variant(cfg, "static"), series, **kw)


def baseline_gru(cfg: TrainConfig, series: Sequence[GridSeries], **kw) -> RunArtifacts:
    """The recurrent agent trained on the prediction loss alone."""
    return train(variant(cfg, "gru"), series, **kw)
