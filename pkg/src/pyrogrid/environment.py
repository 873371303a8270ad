"""Synthetic coupled wildfire world, weekly preprocessing and grid-series files.

The generator simulates one square region per agent on a daily clock.  Each
region carries a hidden dryness field that follows a seasonal cycle with
spatial diffusion and noise, and a hidden fuel field that burning depletes
and that regrows slowly.  Regions sit on a chain: fire on the border column
of one region raises the ignition odds on the facing border of its
neighbour.  Only a fire-confidence channel and ten climate proxies are
emitted; fuel never is.

Raw daily frames are turned into model-ready weekly grids by
:func:`preprocess`, which can also be applied to externally exported
rasters.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic, ConfigError, DegenerateChannel, EmptyInput, EmptyTrain, RangeViolation,
    SplitOutOfRange, TruncatedFile, VersionMismatch,
)

N_CHANNELS = 11
FIRE_CHANNEL = 0
FIRE_THRESHOLD = 0.05
DAYS_PER_WEEK = 7
CHANNEL_NAMES = ("fire_confidence",) + tuple(f"climate{i}" for i in range(N_CHANNELS - 1))


# ---------------------------------------------------------------- grid series
@dataclass
class GridSeries:
    """Weekly observations (T, C, H, W) in [0, 1] and binary fire maps (T, H, W)."""

    obs: np.ndarray
    fire: np.ndarray
    channel_names: list[str] = field(default_factory=lambda: list(CHANNEL_NAMES))
    start_week: int = 0

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float32)
        self.fire = np.asarray(self.fire, dtype=np.uint8)
        if self.obs.ndim != 4 or self.fire.shape != (self.obs.shape[0],) + self.obs.shape[2:]:
            raise ValueError(f"inconsistent series shapes: obs {self.obs.shape}, fire {self.fire.shape}")
        if len(self.channel_names) != self.obs.shape[1]:
            self.channel_names = [f"channel{i}" for i in range(self.obs.shape[1])]

    @property
    def weeks(self) -> int:
        return self.obs.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.obs.shape

    def slice(self, start: int, stop: int) -> "GridSeries":
        return GridSeries(self.obs[start:stop], self.fire[start:stop], list(self.channel_names),
                          self.start_week + start)


# ---------------------------------------------------------------- WFGM files
_MAGIC = b"WFGM"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


def encode_grid_series(gs: GridSeries) -> bytes:
    T, C, H, W = gs.obs.shape
    return (_HEADER.pack(_MAGIC, _VERSION, T, C, H, W)
            + gs.obs.astype("<f4").tobytes() + gs.fire.astype(np.uint8).tobytes())


def decode_grid_series(blob: bytes) -> GridSeries:
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise BadMagic(f"expected magic {_MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFile(f"header needs {_HEADER.size} bytes, file has {len(blob)}")
    _, version, T, C, H, W = _HEADER.unpack_from(blob)
    if version != _VERSION:
        raise VersionMismatch(f"grid series version {version}, reader supports {_VERSION}")
    n_obs, n_fire = T * C * H * W, T * H * W
    need = _HEADER.size + 4 * n_obs + n_fire
    if len(blob) < need:
        raise TruncatedFile(f"payload needs {need} bytes, file has {len(blob)}")
    obs = np.frombuffer(blob, dtype="<f4", count=n_obs, offset=_HEADER.size).reshape(T, C, H, W)
    fire = np.frombuffer(blob, dtype=np.uint8, count=n_fire, offset=_HEADER.size + 4 * n_obs).reshape(T, H, W)
    if not np.all((obs >= 0.0) & (obs <= 1.0)):  # also rejects NaN
        raise RangeViolation("observation values outside [0, 1]")
    if np.any(fire > 1):
        raise RangeViolation("fire map values other than 0/1")
    names = list(CHANNEL_NAMES) if C == N_CHANNELS else None
    return GridSeries(obs.astype(np.float32), fire.copy(), names or [])


def save_grid_series(gs: GridSeries, path) -> None:
    Path(path).write_bytes(encode_grid_series(gs))


def load_grid_series(path) -> GridSeries:
    return decode_grid_series(Path(path).read_bytes())


# ---------------------------------------------------------------- preprocessing
def area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) weights averaging the input cells each output cell covers."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / (hi - lo)


def resample(grid: np.ndarray, size: int) -> np.ndarray:
    """Area-average resample of the trailing (H, W) axes to (size, size)."""
    H, W = grid.shape[-2:]
    if (H, W) == (size, size):
        return grid.astype(np.float64)
    return area_matrix(size, H) @ grid @ area_matrix(size, W).T


def weekly_aggregate(obs_daily: np.ndarray, fire_daily: np.ndarray | None = None):
    """Collapse days into weeks: climate by mean, fire confidence by max.

    ``obs_daily`` is (days, C, H, W) with channel 0 the fire confidence and
    ``fire_daily`` (days, H, W) the confidence used for targets (defaults to
    channel 0).  Trailing days that do not fill a week are dropped.
    """
    obs_daily = np.asarray(obs_daily, dtype=np.float64)
    weeks = obs_daily.shape[0] // DAYS_PER_WEEK
    if weeks == 0:
        raise EmptyInput(f"need at least {DAYS_PER_WEEK} daily frames, got {obs_daily.shape[0]}")
    days = weeks * DAYS_PER_WEEK
    obs = obs_daily[:days].reshape((weeks, DAYS_PER_WEEK) + obs_daily.shape[1:])
    weekly = obs.mean(axis=1)
    weekly[:, FIRE_CHANNEL] = obs[:, :, FIRE_CHANNEL].max(axis=1)
    src = obs_daily[:, FIRE_CHANNEL] if fire_daily is None else np.asarray(fire_daily, dtype=np.float64)
    conf = src[:days].reshape((weeks, DAYS_PER_WEEK) + src.shape[1:]).max(axis=1)
    return weekly, conf


def finalize_weekly(weekly: np.ndarray, conf: np.ndarray, grid: int, train_weeks: int | None = None,
                    channel_names=None) -> GridSeries:
    """Resample, normalise with train-window statistics, and threshold the fire target.

    The fire-confidence channel is already a probability and is only
    clipped; every other channel is min-max scaled with the statistics of
    the first ``train_weeks`` weeks (all weeks if None) and clipped to [0, 1].
    A channel that is constant over that window becomes 0.5 everywhere.
    """
    if weekly.shape[0] == 0:
        raise EmptyInput("no weeks to preprocess")
    obs = resample(weekly, grid)
    target = resample(conf, grid) > FIRE_THRESHOLD
    n_stat = obs.shape[0] if train_weeks is None else train_weeks
    if not 0 < n_stat <= obs.shape[0]:
        raise EmptyInput(f"normalisation window of {n_stat} weeks is empty or too long")
    ref = obs[:n_stat]
    out = np.empty_like(obs)
    for c in range(obs.shape[1]):
        if c == FIRE_CHANNEL:
            out[:, c] = np.clip(obs[:, c], 0.0, 1.0)
            continue
        lo, hi = ref[:, c].min(), ref[:, c].max()
        if hi - lo <= 0.0:
            warnings.warn(f"channel {c} is constant over the normalisation window", DegenerateChannel, stacklevel=2)
            out[:, c] = 0.5
        else:
            out[:, c] = np.clip((obs[:, c] - lo) / (hi - lo), 0.0, 1.0)
    return GridSeries(out, target.astype(np.uint8), list(channel_names or CHANNEL_NAMES))


def preprocess(obs_daily, fire_daily=None, grid: int = 16, train_weeks: int | None = None,
               channel_names=None) -> GridSeries:
    """Daily raw frames -> weekly, resampled, normalised :class:`GridSeries`."""
    weekly, conf = weekly_aggregate(obs_daily, fire_daily)
    return finalize_weekly(weekly, conf, grid, train_weeks, channel_names)


# ---------------------------------------------------------------- manifest and split
@dataclass
class DatasetManifest:
    agents: list[dict]
    train_weeks: int
    val_weeks: int
    seed: int = 0
    generator: dict = field(default_factory=dict)
    val_start: int | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["val_start"] is None:
            del d["val_start"]
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"manifest is not valid JSON (line {e.lineno}): {e.msg}") from None
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown manifest fields: {sorted(unknown)}")
        for key in ("agents", "train_weeks", "val_weeks"):
            if key not in d:
                raise ConfigError(f"manifest lacks field '{key}'")
        for a in d["agents"]:
            if not isinstance(a, dict) or "id" not in a or "path" not in a:
                raise ConfigError(f"manifest agent entry needs 'id' and 'path': {a!r}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def split(gs: GridSeries, manifest: DatasetManifest) -> tuple[GridSeries, GridSeries]:
    """Contiguous train slice followed by the validation slice."""
    tr, va = manifest.train_weeks, manifest.val_weeks
    start = tr if manifest.val_start is None else manifest.val_start
    if tr <= 0:
        raise EmptyTrain("training split is empty")
    if va < 0 or start < tr:
        raise SplitOutOfRange(f"validation [{start}, {start + va}) overlaps training [0, {tr})")
    if start + va > gs.weeks:
        raise SplitOutOfRange(f"split needs {start + va} weeks, series has {gs.weeks}")
    return gs.slice(0, tr), gs.slice(start, start + va)


def load_dataset(manifest_path) -> tuple[DatasetManifest, list[GridSeries]]:
    """Read a manifest and every agent's series (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    series = [load_grid_series(manifest_path.parent / a["path"]) for a in manifest.agents]
    shapes = {s.obs.shape[1:] for s in series}
    if len(shapes) > 1:
        raise SplitOutOfRange(f"agents disagree on (C, H, W): {sorted(shapes)}")
    return manifest, series


# ---------------------------------------------------------------- synthetic world
@dataclass(frozen=True)
class GeneratorConfig:
    n_agents: int = 3
    grid: int = 16
    raw_factor: int = 2
    weeks: int = 364
    train_weeks: int = 260
    # ignition logit: kappa_D * D + kappa_n * burning_neighbours + kappa_x * edge_fire - kappa_0
    kappa_D: float = 9.0
    kappa_n: float = 1.2
    kappa_x: float = 1.2
    kappa_0: float = 13.0
    # dryness: relaxation towards a seasonal target, diffusion, noise
    season_days: float = 365.0
    dry_mean: float = 0.55
    dry_amp: float = 0.35
    dry_relax: float = 0.06
    dry_diffuse: float = 0.1
    dry_noise: float = 0.02
    # fuel and burning
    fuel_regrow: float = 0.004
    fuel_burn: float = 0.35
    persist: float = 0.55
    decorrelate: bool = False

    @property
    def raw_grid(self) -> int:
        return self.grid * self.raw_factor


@dataclass
class WorldState:
    """Hidden state of one region; ``edges`` lists (neighbour agent, side) couplings."""

    dryness: np.ndarray
    fuel: np.ndarray
    active: np.ndarray
    day: int
    phase: float
    pattern: np.ndarray
    edges: list[tuple[int, str]]


def _smooth_field(rng: np.random.Generator, n: int, passes: int = 6) -> np.ndarray:
    f = rng.random((n, n))
    for _ in range(passes):
        f = (f + np.roll(f, 1, 0) + np.roll(f, -1, 0) + np.roll(f, 1, 1) + np.roll(f, -1, 1)) / 5.0
    f -= f.min()
    return f / max(f.max(), 1e-12)


def _laplacian(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * f


def _neighbour_count(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1)
    n = a.shape[0]
    return sum(p[1 + di:1 + di + n, 1 + dj:1 + dj + n]
               for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj)


def chain_edges(n_agents: int) -> list[list[tuple[int, str]]]:
    """Regions on a west-to-east chain: each couples to its immediate neighbours."""
    out = []
    for i in range(n_agents):
        e = []
        if i > 0:
            e.append((i - 1, "west"))
        if i < n_agents - 1:
            e.append((i + 1, "east"))
        out.append(e)
    return out


def init_world(cfg: GeneratorConfig, rng: np.random.Generator) -> list[WorldState]:
    n = cfg.raw_grid
    states = []
    for edges in chain_edges(cfg.n_agents):
        pattern = 0.5 + _smooth_field(rng, n)
        states.append(WorldState(
            dryness=np.clip(cfg.dry_mean + 0.1 * rng.standard_normal((n, n)), 0, 1),
            fuel=np.clip(0.6 + 0.4 * _smooth_field(rng, n), 0, 1),
            active=np.zeros((n, n), dtype=bool),
            day=0,
            phase=float(rng.uniform(0, 2 * np.pi)),
            pattern=pattern,
            edges=edges,
        ))
    return states


def _edge_fire(states: list[WorldState], i: int) -> np.ndarray:
    s = states[i]
    out = np.zeros(s.active.shape)
    for j, side in s.edges:
        if side == "west":
            out[:, 0] = np.maximum(out[:, 0], states[j].active[:, -1])
        else:
            out[:, -1] = np.maximum(out[:, -1], states[j].active[:, 0])
    return out


def _sigmoid(v):
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


class Climate:
    """Exogenous forcings and the static mixing that yields ten climate proxies."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        n, k = cfg.raw_grid, N_CHANNELS - 1
        # informativeness about dryness falls from strong to none across channels
        self.weight = np.linspace(0.9, 0.0, k)
        self.sign = rng.choice([-1.0, 1.0], size=k)
        self.scale = rng.uniform(0.5, 30.0, size=k)
        self.offset = rng.uniform(-10.0, 300.0, size=k)
        self.maps = np.stack([_smooth_field(rng, n) for _ in range(k)])
        self.forcing = np.zeros((cfg.n_agents, k))

    def frame(self, i: int, dryness: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        self.forcing[i] = 0.97 * self.forcing[i] + 0.25 * rng.standard_normal(self.forcing.shape[1])
        exo = self.forcing[i][:, None, None] * self.maps
        w = self.weight[:, None, None]
        mix = w * self.sign[:, None, None] * dryness + (1 - w) * exo
        mix = mix + 0.02 * rng.standard_normal(mix.shape)
        return self.offset[:, None, None] + self.scale[:, None, None] * mix


def synth_step(states: list[WorldState], rng: np.random.Generator, cfg: GeneratorConfig,
               climate: Climate | None = None):
    """Advance every region by one day.

    Returns the new states and one raw frame per region: (fire confidence
    (H, W), climate channels (10, H, W) or None when ``climate`` is None).
    Input states are not modified.
    """
    new_states, frames = [], []
    edge = [_edge_fire(states, i) for i in range(len(states))]
    for i, s in enumerate(states):
        t = s.day + 1
        target = cfg.dry_mean + cfg.dry_amp * np.sin(2 * np.pi * t / cfg.season_days + s.phase) * s.pattern
        d = s.dryness + cfg.dry_relax * (target - s.dryness) + cfg.dry_diffuse * _laplacian(s.dryness)
        d = np.clip(d + cfg.dry_noise * rng.standard_normal(d.shape), 0.0, 1.0)
        burning = s.active.astype(np.float64)
        logit = cfg.kappa_D * d + cfg.kappa_n * _neighbour_count(burning) + cfg.kappa_x * edge[i] - cfg.kappa_0
        p_ignite = s.fuel * _sigmoid(logit)
        ignite = rng.random(d.shape) < p_ignite
        persist = s.active & (rng.random(d.shape) < cfg.persist * s.fuel)
        active = ignite | persist
        fuel = s.fuel - cfg.fuel_burn * active
        fuel = np.clip(fuel + cfg.fuel_regrow * (1.0 - fuel), 0.0, 1.0)
        conf = active * rng.uniform(0.3, 1.0, size=d.shape)
        clim = climate.frame(i, d, rng) if climate is not None else None
        new_states.append(replace(s, dryness=d, fuel=fuel, active=active, day=t))
        frames.append((conf, clim))
    return new_states, frames


def _simulate_weekly(cfg: GeneratorConfig, rng: np.random.Generator, burn_in_days: int = 365):
    """Run the world and return per-agent weekly raw (obs, fire confidence) arrays."""
    states = init_world(cfg, rng)
    climate = Climate(cfg, rng)
    for _ in range(burn_in_days):
        states, _ = synth_step(states, rng, cfg, climate)
    n, k = cfg.raw_grid, N_CHANNELS
    obs = np.zeros((cfg.n_agents, cfg.weeks, k, n, n))
    conf = np.zeros((cfg.n_agents, cfg.weeks, n, n))
    for w in range(cfg.weeks):
        days_obs = np.zeros((cfg.n_agents, DAYS_PER_WEEK, k, n, n))
        for d in range(DAYS_PER_WEEK):
            states, frames = synth_step(states, rng, cfg, climate)
            for i, (c, clim) in enumerate(frames):
                days_obs[i, d, FIRE_CHANNEL] = c
                days_obs[i, d, 1:] = clim
        for i in range(cfg.n_agents):
            weekly, wconf = weekly_aggregate(days_obs[i])
            obs[i, w], conf[i, w] = weekly[0], wconf[0]
    return obs, conf


def _scramble(obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute (week, pixel) positions jointly per agent; the channels of a position stay together."""
    A, T, C, H, W = obs.shape
    flat = obs.transpose(0, 1, 3, 4, 2).reshape(A, T * H * W, C)
    out = np.stack([flat[a, rng.permutation(T * H * W)] for a in range(A)])
    return out.reshape(A, T, H, W, C).transpose(0, 1, 4, 2, 3)


def generate(cfg: GeneratorConfig, seed: int) -> list[GridSeries]:
    """Synthesise one preprocessed :class:`GridSeries` per agent.

    With ``decorrelate`` the observed channels come from an independent
    shadow world while the fire targets come from the primary one.  The
    shadow's (week, pixel) positions are shuffled jointly, so neither the
    shared seasonal cycle nor any chance alignment of static spatial fields
    links inputs to targets.
    """
    if cfg.weeks <= 0 or cfg.n_agents <= 0:
        raise ConfigError("generator needs positive weeks and agents")
    obs, conf = _simulate_weekly(cfg, np.random.default_rng([seed, 0]))
    if cfg.decorrelate:
        shadow, _ = _simulate_weekly(cfg, np.random.default_rng([seed, 1]))
        obs = _scramble(shadow, np.random.default_rng([seed, 2]))
    train = min(cfg.train_weeks, cfg.weeks)
    return [finalize_weekly(obs[i], conf[i], cfg.grid, train) for i in range(cfg.n_agents)]


def write_dataset(out_dir, cfg: GeneratorConfig, seed: int, val_weeks: int | None = None) -> DatasetManifest:
    """Generate, then write one WFGM file per agent plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series = generate(cfg, seed)
    agents = []
    for i, gs in enumerate(series):
        name = f"agent{i}.wfgm"
        save_grid_series(gs, out / name)
        agents.append({"id": i, "path": name})
    val = cfg.weeks - cfg.train_weeks if val_weeks is None else val_weeks
    manifest = DatasetManifest(agents=agents, train_weeks=cfg.train_weeks, val_weeks=val, seed=seed,
                               generator=asdict(cfg))
    manifest.save(out / "manifest.json")
    return manifest
