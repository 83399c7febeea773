from pathlib import Path

import numpy as np
import pytest

from transnet import evalharness as ev
from transnet import gridworld as gw
from transnet import network as nw
from transnet import qmdp_expert as qe


def records(*rows):
    return [ev.EpisodeRecord(i, s, ok, c) for i, (s, ok, c) in enumerate(rows)]


# ---------------------------------------------------------------------------
# metrics


def test_half_success():
    m = ev.metrics(records((3, True, 0), (12, False, 0)))
    assert m.SR == 50.0 and m.TL == 3.0 and m.episodes == 2


def test_all_failures_have_no_tl():
    m = ev.metrics(records((5, False, 1), (5, False, 4)))
    assert m.SR == 0.0 and m.TL is None and m.CR == 50.0
    assert m.row("x") == "x,0.0,-,50.0,2"


def test_hand_enumerated_three_episodes():
    # steps 4, 6 and a 10-step failure; collisions 1, 0, 2 over 20 steps
    m = ev.metrics(records((4, True, 1), (6, True, 0), (10, False, 2)))
    assert m.SR == pytest.approx(200 / 3)
    assert m.TL == 5.0
    assert m.CR == pytest.approx(15.0)
    assert m.row("p") == "p,66.7,5.0,15.0,3"


def test_metrics_edge_cases():
    with pytest.raises(ValueError):
        ev.metrics([])
    with pytest.raises(ValueError):
        ev.EpisodeRecord(0, 2, False, 3)
    m = ev.metrics(records((0, True, 0)))
    assert m.CR == 0.0 and m.TL == 0.0


# ---------------------------------------------------------------------------
# rollouts


def grid_scenario(seed=0, size=8):
    m = gw.gen_random_grid(size, size, 0.25, seed)
    return gw.sample_task(m, np.random.default_rng(seed))


def test_zero_budget_fails_without_steps():
    sc = grid_scenario()
    rec = ev.rollout(ev.ExpertPolicy(gw.DETERMINISTIC), sc, gw.DETERMINISTIC, max_steps=0, rng=0)
    assert not rec.success and rec.steps == 0 and rec.collisions == 0


def test_start_at_goal_succeeds_immediately():
    sc = grid_scenario()
    sc = gw.Scenario(sc.map, sc.goal, sc.goal, sc.initial_belief)
    rec = ev.rollout(ev.ExpertPolicy(gw.STOCHASTIC), sc, gw.STOCHASTIC, rng=0)
    assert rec.success and rec.steps == 0


def test_rollout_is_seed_reproducible_and_traced():
    sc = grid_scenario(3)
    net = nw.TransNet(nw.NetConfig(K=6))
    pol = ev.NetworkPolicy(net, net.init_params(0))
    a = ev.rollout(pol, sc, gw.STOCHASTIC, rng=11, trace=True)
    b = ev.rollout(pol, sc, gw.STOCHASTIC, rng=11, trace=True)
    assert a == b
    assert len(a.trace) == a.steps
    assert all(e >= 0 for e, _, _ in a.trace)
    assert a.steps <= ev.default_max_steps(sc) == 64


def test_expert_rollout_succeeds_on_open_grid():
    m = gw.gen_random_grid(6, 6, 0.0, 0)
    sc = gw.Scenario(m, (0, 0), (5, 5), gw.uniform_belief(m.cells))
    rec = ev.rollout(ev.ExpertPolicy(gw.DETERMINISTIC), sc, gw.DETERMINISTIC, rng=0)
    assert rec.success and rec.steps <= ev.default_max_steps(sc)


def test_network_policy_replans_on_gate_change():
    m, _ = gw.gen_dynamic_maze(9, 9, 0)
    sc = gw.sample_task(m, np.random.default_rng(0), variant="v2")
    net = nw.TransNet(nw.NetConfig(K=4, theta_channels=3))
    pol = ev.NetworkPolicy(net, net.init_params(0))
    pol.reset(sc)
    assert net.plan_calls == 1
    pol.update(0, 0, m.gates)
    assert net.plan_calls == 1
    pol.update(0, 0, m.gates.swapped())
    assert net.plan_calls == 2


# ---------------------------------------------------------------------------
# suites and comparisons


def test_suites_are_seed_reproducible_and_disjoint_from_datasets():
    dom = qe.DomainConfig(size=6, stochastic=True)
    a, b = ev.make_suite(dom, 5, 3), ev.make_suite(dom, 5, 3)
    for x, y in zip(a.scenarios, b.scenarios):
        assert x.map == y.map and x.start == y.start and x.goal == y.goal
    ds = qe.build_dataset(dom, 5, 1, seed=3, val_fraction=0.0)
    assert not any(np.array_equal(s.map.cells, m.cells) for s in a.scenarios for m in ds.maps)


def test_compare_pairs_policies_and_adds_expert():
    dom = qe.DomainConfig(size=6, stochastic=True)
    suite = ev.make_suite(dom, 6, 0)
    net = nw.TransNet(nw.NetConfig(K=4))
    p = net.init_params(1)
    table, recs = ev.compare({"a": ev.NetworkPolicy(net, p), "b": ev.NetworkPolicy(net, p)}, suite)
    assert list(table) == ["a", "b", "expert"]
    assert table["a"] == table["b"]
    assert recs["a"] == recs["b"]
    text = ev.format_table(table)
    assert text.splitlines()[0] == "policy,SR,TL,CR,episodes"
    assert len(text.splitlines()) == 4


def test_compare_rejects_mismatched_scenarios():
    dom = qe.DomainConfig(size=6)
    suite = ev.make_suite(dom, 3, 0)
    other = records((1, True, 0), (1, True, 0), (1, True, 0))
    other[2].scenario_id = 7
    with pytest.raises(ValueError, match="does not match"):
        ev.compare({}, suite, results={"x": other})


def test_generalization_protocol():
    gmap = gw.load_map(Path(__file__).resolve().parents[1] / "maps" / "office32.pgm")
    suite = ev.generalization_suite(gmap, gw.DETERMINISTIC, trials=25, seed=0)
    assert len(suite.scenarios) == 25
    min_d = int(np.ceil(0.5 * np.hypot(32, 32)))
    for sc in suite.scenarios:
        assert abs(sc.start[0] - sc.goal[0]) + abs(sc.start[1] - sc.goal[1]) >= min_d
    net = nw.TransNet(nw.NetConfig(K=4))
    assert ev.scale_planning(net, gmap.shape).config.K == 128


def test_generalization_rerun_identical():
    m = gw.gen_random_grid(12, 12, 0.2, 1)
    net = nw.TransNet(nw.NetConfig(K=4))
    p = net.init_params(0)
    a = ev.eval_generalization(net, p, m, gw.STOCHASTIC, trials=3, seed=2, K=10)
    b = ev.eval_generalization(net, p, m, gw.STOCHASTIC, trials=3, seed=2, K=10)
    assert a == b and a[0].episodes == 3


def test_generalization_map_errors_propagate(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n2 2\n255\n\x00")
    net = nw.TransNet(nw.NetConfig(K=2))
    with pytest.raises(gw.MapFormatError):
        ev.eval_generalization(net, net.init_params(0), bad, gw.DETERMINISTIC, trials=1)


# ---------------------------------------------------------------------------
# kernel export


def test_export_kernels_writes_pgm_and_matrix(tmp_path):
    cfg = nw.NetConfig()
    p = nw.TransNetParams.init(cfg, 0)
    p.arrays["planner_kernel"][2, 1, 0, 3 * 16 + 0] = 4.0  # south tap for (south, class 0)
    m = ev.export_kernels(p, cfg, gw.SOUTH, 0, tmp_path / "k.pgm", scale=4)
    assert abs(m.sum() - 1) <= 1e-12 and np.unravel_index(m.argmax(), m.shape) == (2, 1)
    img = gw.load_map(tmp_path / "k.pgm")
    assert img.shape == (12, 12)
    assert np.allclose(np.loadtxt(tmp_path / "k.txt"), m, atol=1e-12)
    raw = (tmp_path / "k.pgm").read_bytes()
    assert raw.startswith(b"P5")


def test_kernel_slice_rejects_bad_indices():
    cfg = nw.NetConfig()
    p = nw.TransNetParams.init(cfg, 0)
    for a, c in [(5, 0), (-1, 0), (0, 16)]:
        with pytest.raises(ValueError):
            ev.kernel_slice(p, cfg, a, c)
