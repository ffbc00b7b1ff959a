import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstdp import nn
from mstdp.graph import HeteroGraph, FlowEdges, NodeFeatures, build_graph
from mstdp.model import (
    MSTDP,
    ModelConfig,
    collate,
    make_sample,
    mstdp_loss,
    predict_next_day,
    predict_next_week,
    repair_durations,
)
from mstdp.nn import Tensor
from mstdp.synth import generate_city
from mstdp.trajectory import DailyTrajectory, UserHistory, decouple


def empty_flow():
    return FlowEdges(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 24), np.int64))


def bare_graph(n_cells=3, n_admins=1):
    g = HeteroGraph(n_cells, n_admins, empty_flow(), empty_flow(), np.zeros((0, 2), np.int64),
                    np.zeros((0, 2), np.int64), np.zeros((0, 2), np.int64))
    occ = np.arange((n_cells + n_admins) * 24).reshape(-1, 24)
    return g, NodeFeatures(np.arange(n_cells + n_admins), occ)


def tiny_world(T=8, days=10):
    city = generate_city(0, 2, 1, 1)
    hist = UserHistory(0, T)
    for d in range(days):
        cut = 2 + d % 3
        hist.add(DailyTrajectory(0, d, d % 7, [0] * cut + [1] * (T - cut - 1) + [0]))
    g, f = build_graph(hist.sorted_days(), city)
    return city, hist, g, f


def test_graph_embed_without_edges_is_self_transform():
    g, f = bare_graph()
    cfg = ModelConfig.micro(3, 1, n_gnn_layers=2)
    m = MSTDP(cfg, g, f)
    ge = m.graph_embed
    x = ge.initial_features().data
    for P in ge.layers:
        z = x @ (P["W1"].data + P["W_self"].data)
        x = np.where(z > 0, z, cfg.leaky_slope * z)
    assert np.allclose(ge().data, x[:3], atol=1e-12)
    assert np.all(ge.last_alpha == 1.0)


def test_flow_attention_normalized_with_self_term():
    _, _, g, f = tiny_world()
    m = MSTDP(ModelConfig.micro(2, 1), g, f)
    ge = m.graph_embed
    ge()
    sums = np.zeros(ge.n_nodes)
    np.add.at(sums, ge.att_seg, ge.last_alpha)
    assert np.all(np.abs(sums - 1.0) < 1e-9)
    # each cell has exactly one flow in-neighbour, so alpha_pp + alpha_pq = 1 with both terms present
    for cell in (0, 1):
        terms = ge.last_alpha[ge.att_seg == cell]
        assert len(terms) == 2 and 0 < terms.min()


def test_attention_normalized_on_default_graph(graph_and_features):
    g, f = graph_and_features
    m = MSTDP(ModelConfig.desk(g.n_cells, g.n_admins), g, f)
    with nn.no_grad():
        m.graph_embed()
    sums = np.zeros(g.n_nodes)
    np.add.at(sums, m.graph_embed.att_seg, m.graph_embed.last_alpha)
    assert np.max(np.abs(sums - 1.0)) < 1e-9


@pytest.fixture
def model():
    g, f = bare_graph(n_cells=6, n_admins=1)
    return MSTDP(ModelConfig.micro(6, 1, T=8, d_hl=4, d_ht=6, d_zl=8, d_zt=6), g, f)


def _daily(model, loc, dur):
    table = model.token_table()
    H_loc = nn.take(table, np.array([loc]))
    H_dur = nn.take(model.dur_emb, np.array([dur]))
    valid = np.ones((1, len(loc)), bool)
    return model.daily_loc(H_loc, valid), model.daily_dur(H_dur, valid)


def test_daily_encoder_shapes_and_order(model):
    h_loc, h_dur = _daily(model, [1, 2, 3], [2, 3, 3])
    assert h_loc.shape == (1, 4) and h_dur.shape == (1, 6)
    r_loc, _ = _daily(model, [3, 2, 1], [2, 3, 3])
    assert not np.allclose(h_loc.data, r_loc.data)


def test_daily_encoder_single_position_pooling(model):
    table = model.token_table()
    x = nn.take(table, np.array([[4]]))
    enc = model.daily_loc
    h = enc.proj(x) + nn.sinusoidal_positions(1, enc.d_model)[None]
    per_pos = enc.enc(h, nn.key_padding_mask(np.ones((1, 1), bool)))
    pooled = enc(x, np.ones((1, 1), bool))
    assert np.array_equal(pooled.data, per_pos.data[:, 0])


def _sample(days, target=None, weekday=3):
    from mstdp.model import Sample
    return Sample(0, 7, weekday, days, target)


def test_weekly_encoder_mask_and_shapes(model):
    rng = np.random.default_rng(0)
    days = [((1, 2), (3, 5)), None, ((2,), (8,)), None, None, ((3, 1, 3), (2, 2, 4)), ((1,), (8,))]
    b = collate([_sample(days)], 6)
    table = model.token_table()
    h_loc, h_dur = model.encode_days(table, b)
    z_loc, z_dur = model.encode_week(h_loc, h_dur, b)
    assert z_loc.shape == (1, 8) and z_dur.shape == (1, 6)
    # changing the content of masked days leaves z unchanged
    wl = Tensor(np.concatenate([np.zeros((1, 4)), h_loc.data]))
    slots = b.day_slot.copy()
    slots[0, ~b.week_mask[0]] = 1  # point masked positions at a real day vector
    x1 = nn.take(wl, slots)
    x2 = Tensor(x1.data.copy())
    x2.data[0, ~b.week_mask[0]] += rng.normal(size=(3, 4)) * 10
    wk = nn.take(model.weekday_loc, b.weekdays)
    a = model.weekly_loc(x1, b.week_mask, wk).data
    c = model.weekly_loc(x2, b.week_mask, wk).data
    assert np.array_equal(a, c)
    assert np.array_equal(a, z_loc.data)


def test_weekly_single_unmasked_day_equals_its_output(model):
    x = Tensor(np.random.default_rng(1).normal(size=(1, 7, 4)))
    mask = np.zeros((1, 7), bool)
    mask[0, 6] = True
    enc = model.weekly_loc
    z = enc(x, mask)
    h = enc.proj(x) + nn.sinusoidal_positions(7, enc.d_model)[None]
    only = enc.enc(h[:, 6:7], None)
    assert np.allclose(z.data, only.data[:, 0], atol=1e-12)


def test_spatial_decoder_rows_and_causality(model):
    target = ((1, 4, 2), (2, 3, 3))
    b = collate([_sample([((1,), (8,))] * 7, target)], 6)
    table, z_loc, _ = model.encode(b)
    logits = model.spatial_logits(table, z_loc, b.dec_in, b.target_weekday)
    assert logits.shape == (1, 4, 7)  # m + 1 rows over 6 cells + EOS
    alt = b.dec_in.copy()
    alt[0, 2:] = [5, 0]
    logits2 = model.spatial_logits(table, z_loc, alt, b.target_weekday)
    assert np.array_equal(logits.data[:, :2], logits2.data[:, :2])
    assert not np.allclose(logits.data[:, 2:], logits2.data[:, 2:])


def test_temporal_decoder_lengths_and_padding(model):
    b = collate([_sample([((1,), (8,))] * 7)], 6)
    table, _, z_dur = model.encode(b)
    one = model.temporal_durations(table, z_dur, np.array([[3]]), np.ones((1, 1), bool))
    assert one.shape == (1, 1)
    ids = np.array([[3, 1, 4]])
    base = model.temporal_durations(table, z_dur, ids, np.ones((1, 3), bool)).data
    assert base.shape == (1, 3)
    padded_ids = np.array([[3, 1, 4, model.pad, model.pad]])
    valid = padded_ids != model.pad
    padded = model.temporal_durations(table, z_dur, padded_ids, valid).data
    assert np.allclose(padded[:, :3], base, atol=1e-12)


@pytest.mark.parametrize("raw,T,expected", [
    ([3.0, 21.0], 24, (3, 21)),
    ([0.2, 0.2], 24, (12, 12)),
    ([5.4], 24, (24,)),
    ([1.0, 1.0, 2.0], 4, (1, 1, 2)),
    ([2.0, 2.0, 2.0], 4, (2, 1, 1)),
])
def test_repair_durations_examples(raw, T, expected):
    assert repair_durations(raw, T) == expected


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-50, 80, allow_nan=False), min_size=1, max_size=24), st.sampled_from([24, 48]))
def test_repair_durations_always_valid(raw, T):
    d = repair_durations(raw, T)
    assert sum(d) == T and min(d) >= 1 and len(d) == len(raw)


def test_repair_rejects_overlong_chain():
    with pytest.raises(ValueError):
        repair_durations([1.0] * 5, 4)


def test_loss_examples():
    dec_out = np.array([[2, 0, 3]])
    valid = np.ones((1, 3), bool)
    logits = np.full((1, 3, 4), -1e3)
    logits[0, [0, 1, 2], [2, 0, 3]] = 1e3
    durs = Tensor([[3.0, 5.0]])
    tgt = np.array([[3.0, 5.0]])
    tv = np.ones((1, 2), bool)
    assert mstdp_loss(Tensor(logits), dec_out, valid, durs, tgt, tv, 1.0).item() == pytest.approx(0.0, abs=1e-12)
    half = mstdp_loss(Tensor(logits), dec_out, valid, Tensor([[3.5, 5.0]]), tgt, tv, 1.0).item()
    assert half == pytest.approx(0.25 / 2)
    two = mstdp_loss(Tensor(logits), dec_out, valid, Tensor([[5.0, 3.0]]), tgt, tv, 1.0).item()
    assert two == pytest.approx(1.5)
    rnd = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4)))
    ce = mstdp_loss(rnd, dec_out, valid, Tensor([[9.0, 0.0]]), tgt, tv, 0.0).item()
    logp = rnd.data - np.log(np.exp(rnd.data).sum(-1, keepdims=True))
    assert ce == pytest.approx(-np.mean(logp[0, [0, 1, 2], [2, 0, 3]]))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_cells=4, n_admins=1, d_hl=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig.desk(4, 1, lam=-1)
    with pytest.raises(ValueError):
        ModelConfig.desk(4, 1, T=24, max_chain_len=30)
    c = ModelConfig(n_cells=4, n_admins=1)
    assert (c.d_el, c.d_et, c.d_hl, c.d_ht, c.d_zl, c.d_zt, c.n_heads, c.lam) == (512, 512, 1024, 512, 1024, 512, 8, 1.0)
    assert c.max_chain_len == 24


def test_predictions_are_valid_and_deterministic():
    _, hist, g, f = tiny_world()
    m = MSTDP(ModelConfig.micro(2, 1), g, f)
    a = predict_next_day(m, hist, 8)
    b = predict_next_day(m, hist, 8)
    assert a == b
    assert a.T == 8 and a.day == 9 and a.weekday == 9 % 7
    loc, dur = decouple(a)
    assert sum(dur) == 8
    week = predict_next_week(m, hist, 5)
    assert [t.day for t in week] == list(range(6, 13))
    assert all(t.T == 8 for t in week)


def test_make_sample_weekday_inference():
    _, hist, _, _ = tiny_world()
    s = make_sample(hist, 9)
    assert s.target_day == 10 and s.target_weekday == 10 % 7
    assert s.mask.all()
    with pytest.raises(ValueError):
        make_sample(UserHistory(0, 8), 3)
