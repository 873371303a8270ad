import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import auroc_pairwise, bce_scalar, iou_sets
from pyrogrid import numerics as nx
from pyrogrid.environment import GeneratorConfig, GridSeries, generate
from pyrogrid.errors import ConfigError, InsufficientData, SplitMismatch
from pyrogrid.nets import AgentNet, advance_state, predict_fire, static_state
from pyrogrid.trainer import (
    INIT, StepSchedule, TrainConfig, Trainer, baseline_logistic, decode_states, evaluate,
    evaluate_logistic, online_states, pred_loss, reconstruction_loss, stream, sys_loss, train,
    variant, worker_count,
)

TINY = TrainConfig(n_agents=3, d_enc=4, d_h=4, widths=(2, 2, 2, 2), rl_hidden=8, rl_batch=4, episodes=1)


def toy_series(n_agents=3, weeks=24, grid=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_agents):
        fire = (rng.random((weeks, grid, grid)) > 0.8).astype(np.uint8)
        obs = rng.random((weeks, 11, grid, grid)).astype(np.float32)
        obs[:, 0] = fire
        out.append(GridSeries(obs, fire))
    return out


def states_equal(a, b, keys=None):
    keys = keys if keys is not None else a.keys()
    return all(np.array_equal(a[k], b[k]) for k in keys)


# ---------------------------------------------------------------- schedule
def test_schedule_ordering_up_to_a_million():
    s = StepSchedule()
    n = np.unique(np.r_[np.arange(1000), np.logspace(3, 6, 2000).astype(int)])
    r = {k: s.rate(k, n) for k in ("pred", "sys", "critic", "actor")}
    assert np.all(r["pred"] >= r["sys"]) and np.all(r["sys"] >= r["critic"]) and np.all(r["critic"] >= r["actor"])
    ratio = r["actor"] / r["pred"]
    assert np.all(np.diff(ratio) < 0)
    assert s.rate("pred", 0) == 1e-3


@pytest.mark.parametrize("base,exps", [
    ((1e-3, 5e-4, 1e-4, 0.0), (0.1, 0.2, 0.3, 0.4)),
    ((1e-3, 5e-4, 1e-4, 5e-5), (0.1, 0.1, 0.3, 0.4)),
    ((1e-4, 5e-4, 1e-4, 5e-5), (0.1, 0.2, 0.3, 0.4)),
])
def test_schedule_rejects_bad_orderings(base, exps):
    with pytest.raises(ConfigError):
        StepSchedule(base, exps)


# ---------------------------------------------------------------- losses
def test_pred_loss_examples():
    f = (np.random.default_rng(0).random((4, 3, 3)) > 0.5).astype(float)
    assert abs(pred_loss(np.full(f.shape, 0.5), f).item() - math.log(2)) < 1e-12
    assert pred_loss(f, f).item() < 1e-5
    t = np.array([[1.0, 0.0], [0.0, 0.0]])
    expected = (-math.log(0.25) - 3 * math.log(0.75)) / 4
    assert abs(pred_loss(np.full((2, 2), 0.25), t).item() - expected) < 1e-12
    assert abs(expected - 0.5623) < 1e-4


def test_reconstruction_examples():
    x = np.random.default_rng(0).random((3, 2, 4, 4))
    assert reconstruction_loss(x, x).item() == 0.0
    assert reconstruction_loss(np.full(x.shape, 0.5), np.ones(x.shape)).item() == 0.25


def _sys_loss_loops(h0, frames, net):
    total = 0.0
    M, T = frames.shape[:2]
    for m in range(M):
        h, sq, count = h0[m], 0.0, 0
        for t in range(T - 1):
            h, recon = advance_state(h, frames[m, t], net)
            h = h.data
            diff = recon.data - frames[m, t + 1]
            for v in diff.ravel():
                sq += v * v
                count += 1
        total += sq / count
    return total / M


def test_sys_loss_matches_scalar_loop(rng):
    cfg = TINY.net_config(1)
    net = AgentNet(cfg, rng)
    for p in net.parameters():
        if not p.data.any():
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
    h0 = rng.standard_normal((2, cfg.d_h))
    frames = rng.random((2, 3, cfg.channels, 16, 16))
    assert abs(sys_loss(h0, frames, net).item() - _sys_loss_loops(h0, frames, net)) < 1e-12
    with pytest.raises(InsufficientData):
        sys_loss(h0, frames[:, :1], net)


# ---------------------------------------------------------------- config
def test_config_json_round_trip(tmp_path):
    cfg = replace(TINY, reward="adversarial_max_loss", seed=7, persist_buffers=False)
    back = TrainConfig.from_json(cfg.to_json())
    assert back == cfg
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("text", [
    '{"n_agents": 3, "colour": 1}',
    '{"n_agents": "three"}',
    '{"use_exchange": 1}',
    '{"static_only": true}',
    '{"reward": "best"}',
    '{"n_agents": 3,\n "grid": }',
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        TrainConfig.from_json(text)


def test_method_names():
    assert [variant(TINY, m).method for m in ("static", "gru", "proposed", "proposed+exchange")] == \
        ["static", "gru", "proposed", "proposed+exchange"]
    with pytest.raises(ConfigError):
        variant(TINY, "transformer")


def test_worker_count(monkeypatch):
    monkeypatch.setenv("PYROGRID_THREADS", "2")
    assert worker_count() == 2
    monkeypatch.setenv("PYROGRID_THREADS", "zero")
    with pytest.raises(ConfigError):
        worker_count()


# ---------------------------------------------------------------- training
def test_zero_ticks_leave_initialisation():
    series = toy_series()
    trainer = Trainer(TINY, series)
    fresh = AgentNet(TINY.net_config(), [stream(0, a, INIT) for a in range(3)])
    assert states_equal(trainer.net.state(), fresh.state())


def test_episodes_zero_writes_init_checkpoint_only(tmp_path):
    art = train(replace(TINY, episodes=0), toy_series(), out_dir=tmp_path)
    assert [p.name for p in art.checkpoints] == ["init.pgck"]
    assert (tmp_path / "config.json").exists()


def test_reduction_to_isolated_agents():
    cfg = replace(TINY, use_exchange=False, episodes=2)
    series = toy_series()
    joint = train(cfg, series).trainer.state()
    for i in range(3):
        alone = train(replace(cfg, n_agents=1), [series[i]], members=[(cfg.seed, i)]).trainer.state()
        keys = [k for k in alone if k.startswith(f"agent{i}.")]
        assert keys and states_equal(joint, alone, keys)


def test_exchange_off_never_builds_rl_nets():
    trainer = Trainer(replace(TINY, use_exchange=False), toy_series())
    assert trainer.layers == []
    assert not any(k.startswith("exchange") for k in trainer.state())


def test_exchange_on_steps_rl_nets():
    trainer = Trainer(TINY, toy_series())
    before = trainer.state()
    trainer.run_episode()
    after = trainer.state()
    assert not states_equal(before, after, ["exchange.critic.fc0.weight"])
    assert not states_equal(before, after, ["exchange.actor.fc0.weight"])


@pytest.mark.parametrize("reward", ["mean_iou", "adversarial_max_loss"])
def test_both_rewards_fill_the_replay(reward):
    trainer = Trainer(replace(TINY, reward=reward), toy_series())
    trainer.run_episode()
    assert len(trainer.layers[0].buffer) > 0
    assert all(np.isfinite(t.reward) for t in trainer.layers[0].buffer)


def test_identical_runs_are_bit_identical(tmp_path, monkeypatch):
    series = toy_series()
    monkeypatch.setenv("PYROGRID_THREADS", "1")
    a = train(TINY, series, out_dir=tmp_path / "a")
    monkeypatch.setenv("PYROGRID_THREADS", "2")
    b = train(TINY, series, out_dir=tmp_path / "b")
    for pa, pb in zip(a.checkpoints, b.checkpoints):
        assert pa.read_bytes() == pb.read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_training_is_causal():
    series = toy_series(weeks=30)
    t_stop = 17
    corrupted = [GridSeries(gs.obs.copy(), gs.fire.copy()) for gs in series]
    for gs in corrupted:
        gs.obs[t_stop + 1:] = np.random.default_rng(5).random(gs.obs[t_stop + 1:].shape)
    runs = []
    for s in (series, corrupted):
        trainer = Trainer(TINY, s)
        for t in range(t_stop + 1):
            trainer.tick(t)
        runs.append(trainer)
    assert states_equal(runs[0].state(), runs[1].state())
    assert np.array_equal(runs[0].h, runs[1].h)


def test_desk_config_losses_stay_finite():
    series = [gs.slice(0, 260) for gs in generate(GeneratorConfig(weeks=270, train_weeks=260), 3)]
    trainer = Trainer(TrainConfig(), series)
    reports = []
    for episode in range(2):
        trainer.reset_episode()
        reports += [trainer.tick(t) for t in range(250)]
    assert len(reports) == 500
    assert all(np.isfinite(r.l_pred).all() and np.isfinite(r.l_sys).all() for r in reports if not r.skipped)
    assert sum(r.skipped for r in reports) == TrainConfig().window + TrainConfig().horizon_max - 1


# ---------------------------------------------------------------- evaluation
def test_untrained_evaluation_is_chance():
    series = toy_series(weeks=30)
    tr, va = [s.slice(0, 20) for s in series], [s.slice(20, 30) for s in series]
    net = Trainer(TINY, tr).net
    res = evaluate(net, TINY, tr, va)
    assert len(res.table.rows) == 3 * 4
    for r in res.table.rows:
        assert r["auroc"] == 0.5 and abs(r["bce"] - math.log(2)) < 1e-12


def test_evaluation_is_side_effect_free():
    series = toy_series(weeks=30)
    tr, va = [s.slice(0, 20) for s in series], [s.slice(20, 30) for s in series]
    trainer = Trainer(TINY, tr)
    trainer.run_episode()
    before = trainer.state()
    lens = [len(b) for b in trainer.buffers]
    first = evaluate(trainer.net, TINY, tr, va)
    second = evaluate(trainer.net, TINY, tr, va)
    assert first.table.rows == second.table.rows
    assert np.array_equal(first.obs_mse, second.obs_mse)
    assert states_equal(before, trainer.state())
    assert lens == [len(b) for b in trainer.buffers]


def test_evaluation_matches_brute_force_oracles():
    series = toy_series(weeks=30)
    tr, va = [s.slice(0, 20) for s in series], [s.slice(20, 30) for s in series]
    trainer = Trainer(TINY, tr)
    trainer.run_episode()
    net = trainer.net
    res = evaluate(net, TINY, tr, va)
    # independent recomputation: step one agent at a time through all 30 weeks
    for a in range(3):
        one = AgentNet(TINY.net_config(1), np.random.default_rng(0), agent_ids=[a])
        one.load({k: v for k, v in net.state().items()})
        h = np.zeros(TINY.d_h)
        preds = []
        with nx.no_grad():
            for t in range(30):
                h = advance_state(h, series[a].obs[t].astype(float), one)[0].data
                if t >= 20:
                    preds.append(predict_fire(h, one).data)
        preds = np.array(preds)
        for l in range(1, 5):
            p, f = preds[:10 - l, l - 1], series[a].fire[20 + l:30]
            row = next(r for r in res.table.rows if r["agent"] == a and r["horizon"] == l)
            assert abs(row["bce"] - bce_scalar(f, p)) < 1e-9
            assert abs(row["auroc"] - auroc_pairwise(f.ravel(), p.ravel())) < 1e-9
            assert abs(row["iou"] - iou_sets(f, p)) < 1e-9


def test_evaluation_rejects_mismatched_splits():
    series = toy_series(weeks=30)
    tr, va = [s.slice(0, 20) for s in series], [s.slice(20, 30) for s in series]
    net = Trainer(TINY, tr).net
    with pytest.raises(SplitMismatch):
        evaluate(net, TINY, tr, va[:2])
    with pytest.raises(SplitMismatch):
        evaluate(net, TINY, tr, [s.slice(0, 3) for s in va])
    small = toy_series(weeks=30, grid=32)
    with pytest.raises(SplitMismatch):
        evaluate(net, TINY, tr, [s.slice(20, 30) for s in small])


def test_online_predictions_are_causal(rng):
    series = toy_series(weeks=16)
    net = Trainer(TINY, series).net
    for p in net.parameters():
        if not p.data.any():
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
    frames = np.stack([s.obs for s in series]).astype(float)
    base = decode_states(net, online_states(net, frames, False), "fire")
    t = 9
    bad = frames.copy()
    bad[:, t + 1:] = rng.random(bad[:, t + 1:].shape)
    other = decode_states(net, online_states(net, bad, False), "fire")
    assert np.array_equal(base[:, :t + 1], other[:, :t + 1])
    assert not np.array_equal(base[:, t + 1:], other[:, t + 1:])


# ---------------------------------------------------------------- baselines
def test_logistic_zero_init_predicts_half():
    series = toy_series(weeks=12)
    model = baseline_logistic(series, steps=0)
    assert np.all(model.predict(np.stack([s.obs for s in series])) == 0.5)


def test_logistic_with_leaked_target_is_near_perfect():
    rng = np.random.default_rng(0)
    series = []
    for _ in range(2):
        fire = (rng.random((40, 16, 16)) > 0.7).astype(np.uint8)
        obs = rng.random((40, 11, 16, 16)).astype(np.float32)
        obs[:-1, 3] = fire[1:]          # channel 3 carries next week's fire
        series.append(GridSeries(obs, fire))
    model = baseline_logistic([s.slice(0, 30) for s in series], horizons=(1, 2, 3, 4))
    res = evaluate_logistic(model, [s.slice(30, 40) for s in series])
    assert all(r["auroc"] > 0.99 for r in res.table.rows if r["horizon"] == 1)


def test_static_baseline_shapes_and_determinism():
    cfg = variant(TINY, "static")
    series = toy_series()
    a, b = (train(cfg, series).trainer for _ in range(2))
    assert states_equal(a.state(), b.state())
    h = static_state(series[0].obs[0].astype(float), AgentNet(cfg.net_config(1), np.random.default_rng(0),
                                                                 static=True))
    one = AgentNet(cfg.net_config(1), np.random.default_rng(0), static=True)
    assert predict_fire(h, one).shape == (4, 16, 16)


def test_gru_baseline_leaves_observation_decoder_alone():
    cfg = variant(TINY, "gru")
    trainer = Trainer(cfg, toy_series())
    before = {k: v for k, v in trainer.state().items() if ".obs_decoder." in k}
    reports = trainer.run_episode()
    assert all(np.isnan(r.l_sys).all() for r in reports)
    assert all(np.isfinite(r.l_pred).all() for r in reports if not r.skipped)
    assert states_equal(before, trainer.state(), before.keys())
