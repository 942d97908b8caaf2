import io
import json

import numpy as np
import pytest

from lobliq.ingestion import US, DayTrace, parse_messages, replay
from lobliq.liquidity import compute_norm, window_liquidity, window_profiles
from lobliq.lob import BookSide
from lobliq.stats import imbalance_conditionals, power_law_fit
from lobliq.synthgen import (ConfigError, CubicImbalanceRule, Episode, FeasibilityError, FlowRates,
                             GeneratorConfig, PowerLawRule, activity_factors, day_episodes, generate,
                             generate_events, load_generator_config, parse_rule, planted_events,
                             write_days)

SHORT = dict(session_length=3600, open_skip=300)


def test_zero_rates_give_empty_stream():
    cfg = GeneratorConfig(rates=FlowRates(0, 0, 0), **SHORT)
    text = generate(cfg)
    assert len(text.strip().splitlines()) <= 1
    assert generate_events(cfg) == []


def test_same_seed_same_bytes():
    cfg = GeneratorConfig(seed=42, **SHORT)
    assert generate(cfg, 3) == generate(cfg, 3)
    assert generate(cfg, 3) != generate(cfg, 4)
    assert generate(cfg, 3) != generate(GeneratorConfig(seed=43, **SHORT), 3)


def test_stream_replays_strictly():
    cfg = GeneratorConfig(seed=1, **SHORT)
    events = parse_messages(io.StringIO(generate(cfg)), cfg.session(), keep_warmup=True)
    assert events == generate_events(cfg)
    frames = replay(events, strict=True)
    assert len(frames) == len(events)


@pytest.mark.parametrize("side,sign", [("ask", 1), ("bid", -1)])
def test_episode_moves_price_and_flows(side, sign):
    ep = Episode(6000, 900, "mo_flow_imbalance", side, 5)
    cfg = GeneratorConfig(seed=7, session_length=12000, activity_sigma=0, episodes=(ep,))
    tr = DayTrace.from_events(generate_events(cfg), cfg.session())
    i0, i1 = tr.index_at([6000 * US, 6900 * US])
    assert sign * np.log(tr.mid[i1] / tr.mid[i0]) > 0.02
    before, during = tr.window_sums(np.array([3000, 6000]) * US, np.array([3900, 6900]) * US)
    mo_col = 1 if side == "ask" else 4  # market orders hitting the episode side
    assert during[mo_col] > 3 * before[mo_col]


def test_depletion_episode_thins_the_side():
    ep = Episode(1800, 600, "depletion", "bid", 5)
    cfg = GeneratorConfig(seed=2, activity_sigma=0, episodes=(ep,), **SHORT)
    tr = DayTrace.from_events(generate_events(cfg), cfg.session())
    i = tr.index_at([1700 * US, 1900 * US])
    s = tr.states_at(i)
    near = lambda snap: sum(v for _, v in snap.levels(BookSide.BID)[:10])
    assert near(s[int(i[1])]) < 0.5 * near(s[int(i[0])])


def test_episode_jitter_and_activity_are_deterministic():
    cfg = GeneratorConfig(seed=9, episode_jitter=600,
                          episodes=(Episode(6000, 900, "depletion", "ask", 2),))
    starts = {day_episodes(cfg, d)[0].start for d in range(6)}
    assert len(starts) > 1 and all(5400 <= s <= 6600 for s in starts)
    assert np.array_equal(activity_factors(cfg, 2), activity_factors(cfg, 2))
    assert np.all(activity_factors(GeneratorConfig(activity_sigma=0), 0) == 1)


@pytest.mark.parametrize("bad", [
    dict(rates=FlowRates(-1, 0, 0)),
    dict(placement_p=0),
    dict(episodes=(Episode(100, 10, "teleport", "ask", 2),)),
    dict(episodes=(Episode(100, 10, "depletion", "up", 2),)),
    dict(episodes=(Episode(100, 10, "depletion", "ask", 0),)),
    dict(session_length=1000, episodes=(Episode(900, 200, "depletion", "ask", 2),)),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        GeneratorConfig(**bad)


def test_config_files(tmp_path):
    cfg = GeneratorConfig(seed=5, rates=FlowRates(0.5, 0.1, 0.03),
                          episodes=(Episode(100, 50, "depletion", "bid", 3),))
    j = tmp_path / "g.json"
    j.write_text(json.dumps(cfg.to_dict()))
    assert load_generator_config(j) == cfg
    t = tmp_path / "g.toml"
    t.write_text('seed = 5\n[rates]\nlo = 0.5\nmo = 0.1\nc = 0.03\n'
                 '[[episodes]]\nstart = 100\nduration = 50\nkind = "depletion"\nside = "bid"\nintensity = 3\n')
    assert load_generator_config(t) == cfg
    t.write_text("sede = 5\n")
    with pytest.raises(ConfigError):
        load_generator_config(t)


def test_write_days(tmp_path):
    cfg = GeneratorConfig(seed=1, **SHORT)
    paths = write_days(cfg, 2, tmp_path)
    assert [p.name for p in paths] == ["day_000.csv", "day_001.csv"]
    assert paths[1].read_text() == generate(cfg, 1)


def test_parse_rule():
    assert parse_rule("cubic:c=0.002") == CubicImbalanceRule(0.002)
    assert parse_rule("powerlaw:K=0.002,alpha=0.3,delta=4") == PowerLawRule(0.002, 0.3, delta=4.0)
    with pytest.raises(ConfigError):
        parse_rule("quartic:c=1")


def test_subtick_cubic_infeasible():
    with pytest.raises(FeasibilityError):
        planted_events(GeneratorConfig(**SHORT), CubicImbalanceRule(1e-5))


def test_subtick_power_law_infeasible():
    with pytest.raises(FeasibilityError):
        planted_events(GeneratorConfig(**SHORT), PowerLawRule(1e-5, 0.5))


def planted_windows(cfg, rule, days):
    traces = [DayTrace.from_events(planted_events(cfg, rule, d), cfg.session(), day=d) for d in range(days)]
    return window_profiles(traces, cfg.plant_window, cfg.plant_depth)


def test_zero_rule_gives_flat_curve():
    cfg = GeneratorConfig(seed=4, plant_jitter=0.3, session_length=4 * 3600, open_skip=600)
    w = planted_windows(cfg, CubicImbalanceRule(0.0), 1)
    _, _, li = window_liquidity(w, 5, 1.0)
    c, _ = imbalance_conditionals(li, w.log_return, 6)
    # only the symmetric jitter remains
    assert np.all(np.abs(c.means) < 3 * c.se + 1e-12)


def test_planted_cubic_recovered():
    rule = CubicImbalanceRule(0.004)
    cfg = GeneratorConfig(seed=5, session_length=6 * 3600, open_skip=600)
    w = planted_windows(cfg, rule, 1)
    la, lb, li = window_liquidity(w, rule.delta, 1.0)
    c, _ = imbalance_conditionals(li, w.log_return, 8)
    which = np.clip(np.floor((li + 1) / 2 * 8).astype(int), 0, 7)
    truth = np.array([np.mean(rule.c * li[which == k] ** 3) for k in np.unique(which)])
    assert len(truth) == len(c.means)
    assert np.all(np.abs(c.means - truth) < 3 * c.se + 1e-12)


def test_planted_power_law_recovered():
    rule = PowerLawRule(0.0017, 0.5)
    cfg = GeneratorConfig(seed=6, plant_jitter=0, session_length=6 * 3600, open_skip=600)
    w = planted_windows(cfg, rule, 1)
    norm = compute_norm([DayTrace.from_events(planted_events(cfg, rule, 0), cfg.session())],
                        cfg.norm_depth)
    la, lb, _ = window_liquidity(w, rule.delta, norm)
    up = w.log_return > 0
    L = np.where(up, la, lb)
    keep = w.log_return != 0
    fit = power_law_fit(L[keep], np.abs(w.log_return[keep]))
    assert abs(fit.alpha - 0.5) < max(3 * fit.se_alpha, 0.05)
