"""The multi-scale spatial-temporal decoupled predictor.

Pipeline for one sample (a 7-day history window and, in training, the
target day):

1. graph embedder: GraphSAGE-style mean aggregation on adjacency and
   inclusion edges plus edge-aware graph attention on flow edges, summed and
   passed through LeakyReLU, repeated ``n_gnn_layers`` times; cell rows form
   the location embedding table
2. daily encoders: transformer encoders over each day's location chain and
   duration chain, mean-pooled to one vector per day
3. weekly encoders: masked transformer encoders over the 7 day vectors
   (duration stream sees ``h_dur ++ h_loc``), mean-pooled to ``z_loc``, ``z_dur``
4. spatial decoder: causal transformer decoder over ``[SOS, l_1, ...]`` with
   ``z_loc`` as a length-1 memory, logits over cells + EOS
5. temporal decoder: transformer encoder over ``FNN(s_i) ++ z_dur`` giving
   one real-valued duration per predicted location
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .graph import HOURS, HeteroGraph, NodeFeatures
from .nn import tensor as tn
from .trajectory import WINDOW, DailyTrajectory, decouple, history_window, recouple


@dataclass
class ModelConfig:
    n_cells: int
    n_admins: int
    T: int = 24
    d_el: int = 512
    d_et: int = 512
    d_hl: int = 1024
    d_ht: int = 512
    d_zl: Optional[int] = None
    d_zt: Optional[int] = None
    n_heads: int = 8
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_gnn_layers: int = 2
    lam: float = 1.0
    max_chain_len: Optional[int] = None
    ffn_mult: int = 2
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.d_zl is None:
            self.d_zl = self.d_hl
        if self.d_zt is None:
            self.d_zt = self.d_ht
        if self.max_chain_len is None:
            self.max_chain_len = self.T
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 1 <= self.max_chain_len <= self.T:
            raise ValueError(f"max_chain_len must be in [1, T={self.T}]")
        for name in ("d_hl", "d_ht", "d_zl", "d_zt"):
            if getattr(self, name) % self.n_heads:
                raise ValueError(f"{name}={getattr(self, name)} not divisible by n_heads={self.n_heads}")

    @classmethod
    def desk(cls, n_cells, n_admins, T=24, **kw):
        """Small dimensions for CPU-scale training."""
        base = dict(d_el=32, d_et=16, d_hl=64, d_ht=32, n_heads=4)
        base.update(kw)
        return cls(n_cells=n_cells, n_admins=n_admins, T=T, **base)

    @classmethod
    def micro(cls, n_cells, n_admins, T=8, **kw):
        """Tiny dimensions for gradient checking."""
        base = dict(d_el=4, d_et=4, d_hl=4, d_ht=4, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                    n_gnn_layers=2, ffn_mult=1)
        base.update(kw)
        return cls(n_cells=n_cells, n_admins=n_admins, T=T, **base)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# samples and batching

@dataclass
class Sample:
    """A 7-day history window (decoupled) and, optionally, the decoupled target day."""
    user: int
    target_day: int
    target_weekday: int
    days: list  # 7 x Optional[(locations, durations)], oldest first
    target: Optional[tuple] = None

    @property
    def mask(self) -> np.ndarray:
        return np.array([d is not None for d in self.days], dtype=bool)


def make_sample(history, k: int, target: Optional[DailyTrajectory] = None, weekday: int = None) -> Sample:
    """Window over days ``k-6 .. k`` of ``history`` predicting day ``k+1``."""
    window, mask = history_window(history, k)
    if weekday is None:
        if target is not None:
            weekday = target.weekday
        elif mask.any():
            i = int(np.flatnonzero(mask)[-1])
            weekday = (window[i].weekday + WINDOW - i) % 7
        else:
            raise ValueError(f"user {history.user}: empty history window ending at day {k}")
    return Sample(
        user=history.user,
        target_day=k + 1,
        target_weekday=weekday,
        days=[decouple(t) if t is not None else None for t in window],
        target=decouple(target) if target is not None else None,
    )


@dataclass
class Batch:
    day_loc: np.ndarray  # (P, L) cell ids of present days, PAD padded
    day_dur: np.ndarray  # (P, L) durations, 0 padded
    day_valid: np.ndarray  # (P, L)
    day_slot: np.ndarray  # (B, 7) 1 + row in day_* arrays, 0 when missing
    week_mask: np.ndarray  # (B, 7)
    weekdays: np.ndarray  # (B, 7)
    target_weekday: np.ndarray  # (B,)
    dec_in: Optional[np.ndarray] = None  # (B, M+1) SOS + target locations
    dec_out: Optional[np.ndarray] = None  # (B, M+1) target locations + EOS
    dec_valid: Optional[np.ndarray] = None
    tgt_loc: Optional[np.ndarray] = None  # (B, M)
    tgt_dur: Optional[np.ndarray] = None
    tgt_valid: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.week_mask)


def collate(samples, n_cells: int) -> Batch:
    eos, sos, pad = n_cells, n_cells + 1, n_cells + 2
    present = [d for s in samples for d in s.days if d is not None]
    L = max([len(d[0]) for d in present], default=1)
    P = len(present)
    day_loc = np.full((P, L), pad, np.int64)
    day_dur = np.zeros((P, L), np.int64)
    for i, (loc, dur) in enumerate(present):
        day_loc[i, :len(loc)] = loc
        day_dur[i, :len(dur)] = dur
    day_slot = np.zeros((len(samples), WINDOW), np.int64)
    row = 0
    for b, s in enumerate(samples):
        for j, d in enumerate(s.days):
            if d is not None:
                row += 1
                day_slot[b, j] = row
    tw = np.array([s.target_weekday for s in samples], np.int64)
    batch = Batch(
        day_loc=day_loc,
        day_dur=day_dur,
        day_valid=day_dur > 0,
        day_slot=day_slot,
        week_mask=day_slot > 0,
        weekdays=(tw[:, None] - WINDOW + np.arange(WINDOW)[None, :]) % 7,
        target_weekday=tw,
    )
    if all(s.target is not None for s in samples) and samples:
        M = max(len(s.target[0]) for s in samples)
        B = len(samples)
        dec_in = np.full((B, M + 1), pad, np.int64)
        dec_out = np.full((B, M + 1), pad, np.int64)
        tgt_loc = np.full((B, M), pad, np.int64)
        tgt_dur = np.zeros((B, M))
        for b, s in enumerate(samples):
            loc, dur = s.target
            m = len(loc)
            dec_in[b, 0] = sos
            dec_in[b, 1:m + 1] = loc
            dec_out[b, :m] = loc
            dec_out[b, m] = eos
            tgt_loc[b, :m] = loc
            tgt_dur[b, :m] = dur
        batch.dec_in, batch.dec_out, batch.dec_valid = dec_in, dec_out, dec_out != pad
        batch.tgt_loc, batch.tgt_dur, batch.tgt_valid = tgt_loc, tgt_dur, tgt_loc != pad
    return batch


# ---------------------------------------------------------------------------
# graph embedder

class GraphEmbedder:
    def __init__(self, store, cfg: ModelConfig, graph: HeteroGraph, features: NodeFeatures):
        d = cfg.d_el
        self.cfg = cfg
        self.graph = graph
        self.n_nodes = graph.n_nodes
        self.region_emb = store.normal("gnn.region_emb", (self.n_nodes, d), 1.0 / np.sqrt(d))
        self.occ_proj = nn.Linear(store, "gnn.occ", HOURS, d)
        self.layers = []
        for n in range(cfg.n_gnn_layers):
            p = f"gnn.{n}"
            self.layers.append(dict(
                W1=store.glorot(f"{p}.sage.W1", (d, d)),
                W2=store.glorot(f"{p}.sage.W2", (d, d)),
                W_self=store.glorot(f"{p}.gat.W_self", (d, d)),
                W_nbr=store.glorot(f"{p}.gat.W_nbr", (d, d)),
                W_edge=store.glorot(f"{p}.gat.W_edge", (HOURS, d)),
                a=store.normal(f"{p}.gat.a", (3 * d, 1), 1.0 / np.sqrt(3 * d)),
            ))
        self.set_graph(graph, features)
        self.last_alpha = None

    def set_graph(self, graph: HeteroGraph, features: NodeFeatures):
        self.graph = graph
        occ = np.log1p(features.occupancy.astype(float))
        self.occ = occ / max(occ.max(), 1.0)
        self.region_ids = features.region_ids
        self.sage_src, self.sage_dst = graph.sage_edges()
        deg = np.bincount(self.sage_dst, minlength=self.n_nodes).astype(float)
        self.inv_deg = (1.0 / np.maximum(deg, 1.0))[:, None]
        src, dst, counts, self_counts = graph.flow_edges()
        scale = max(np.log1p(counts).max(initial=0.0), np.log1p(self_counts).max(initial=0.0), 1.0)
        self.flow_src, self.flow_dst = src, dst
        self.flow_feat = np.log1p(counts) / scale
        self.self_feat = np.log1p(self_counts) / scale
        self.att_seg = np.concatenate([dst, np.arange(self.n_nodes)])

    def initial_features(self):
        return nn.take(self.region_emb, self.region_ids) + self.occ_proj(self.occ)

    def layer(self, x, P):
        d = self.cfg.d_el
        # mean aggregation over adjacency + inclusion neighbours
        nbr_mean = tn.segment_sum(nn.take(x, self.sage_src), self.sage_dst, self.n_nodes) * self.inv_deg
        sage = x @ P["W1"] + nbr_mean @ P["W2"]
        # edge-aware attention over flow in-neighbours plus the node itself
        hs = x @ P["W_self"]
        hn = x @ P["W_nbr"]
        a_self, a_nbr, a_edge = P["a"][:d], P["a"][d:2 * d], P["a"][2 * d:]
        s_self = (hs @ a_self).reshape(-1)
        s_nbr = (hn @ a_nbr).reshape(-1)
        e_edge = (tn.as_tensor(self.flow_feat) @ P["W_edge"] @ a_edge).reshape(-1)
        e_self = (tn.as_tensor(self.self_feat) @ P["W_edge"] @ a_edge).reshape(-1)
        logits = tn.concat([
            nn.take(s_self, self.flow_dst) + nn.take(s_nbr, self.flow_src) + e_edge,
            s_self + s_nbr + e_self,
        ], axis=0)
        alpha = tn.segment_softmax(tn.leaky_relu(logits, self.cfg.leaky_slope), self.att_seg, self.n_nodes)
        self.last_alpha = alpha.data
        msgs = tn.concat([nn.take(hn, self.flow_src), hs], axis=0) * alpha.reshape(-1, 1)
        gat = tn.segment_sum(msgs, self.att_seg, self.n_nodes)
        return tn.leaky_relu(sage + gat, self.cfg.leaky_slope)

    def __call__(self):
        """Cell embedding table ``(n_cells, d_el)``."""
        x = self.initial_features()
        for P in self.layers:
            x = self.layer(x, P)
        return x[: self.graph.n_cells]


# ---------------------------------------------------------------------------
# encoders and decoders

class ChainEncoder:
    """Project, add positions, run a transformer encoder, mean-pool valid positions."""

    def __init__(self, store, name, d_in, d_model, n_heads, n_layers, ffn_mult):
        self.proj = nn.Linear(store, f"{name}.proj", d_in, d_model)
        self.enc = nn.TransformerEncoder(store, f"{name}.enc", d_model, n_heads, n_layers, ffn_mult * d_model)
        self.d_model = d_model

    def __call__(self, x, valid, extra_pos=None):
        L = x.shape[1]
        h = self.proj(x) + nn.sinusoidal_positions(L, self.d_model)[None]
        if extra_pos is not None:
            h = h + extra_pos
        h = self.enc(h, nn.key_padding_mask(valid))
        return nn.masked_mean(h, valid)


class MSTDP:
    def __init__(self, cfg: ModelConfig, graph: HeteroGraph, features: NodeFeatures, store=None):
        if graph.n_cells != cfg.n_cells or graph.n_admins != cfg.n_admins:
            raise ValueError("graph size does not match model config")
        self.cfg = cfg
        self.store = store = store if store is not None else nn.ParameterStore(cfg.seed)
        c = cfg
        self.eos, self.sos, self.pad = c.n_cells, c.n_cells + 1, c.n_cells + 2
        self.graph_embed = GraphEmbedder(store, c, graph, features)
        self.special = store.normal("tok.special", (3, c.d_el), 1.0 / np.sqrt(c.d_el))
        self.dur_emb = store.normal("tok.duration", (c.T + 1, c.d_et), 1.0 / np.sqrt(c.d_et))
        self.daily_loc = ChainEncoder(store, "daily_loc", c.d_el, c.d_hl, c.n_heads, c.n_enc_layers, c.ffn_mult)
        self.daily_dur = ChainEncoder(store, "daily_dur", c.d_et, c.d_ht, c.n_heads, c.n_enc_layers, c.ffn_mult)
        self.weekly_loc = ChainEncoder(store, "weekly_loc", c.d_hl, c.d_zl, c.n_heads, c.n_enc_layers, c.ffn_mult)
        self.weekly_dur = ChainEncoder(store, "weekly_dur", c.d_ht + c.d_hl, c.d_zt, c.n_heads, c.n_enc_layers,
                                       c.ffn_mult)
        self.weekday_loc = store.normal("weekly_loc.weekday", (7, c.d_zl), 0.1)
        self.weekday_dur = store.normal("weekly_dur.weekday", (7, c.d_zt), 0.1)
        self.target_day_loc = store.normal("spatial.target_weekday", (7, c.d_zl), 0.1)
        # spatial decoder
        self.sd_in = nn.Linear(store, "spatial.in", c.d_el, c.d_zl)
        self.sd_layers = [nn.DecoderLayer(store, f"spatial.dec.{i}", c.d_zl, c.n_heads, c.ffn_mult * c.d_zl)
                          for i in range(c.n_dec_layers)]
        self.sd_out = nn.Linear(store, "spatial.out", c.d_zl, c.d_el)
        self.sd_bias = store.zeros("spatial.logit_bias", (c.n_cells + 1,))
        # temporal decoder
        self.td_fnn1 = nn.Linear(store, "temporal.fnn1", c.d_el, c.d_et)
        self.td_fnn2 = nn.Linear(store, "temporal.fnn2", c.d_et, c.d_et)
        self.td_in = nn.Linear(store, "temporal.in", c.d_et + c.d_zt, c.d_ht)
        self.td_enc = nn.TransformerEncoder(store, "temporal.enc", c.d_ht, c.n_heads, c.n_enc_layers,
                                            c.ffn_mult * c.d_ht)
        self.td_head1 = nn.Linear(store, "temporal.head1", c.d_ht, c.d_ht)
        self.td_head2 = nn.Linear(store, "temporal.head2", c.d_ht, 1)
        self.dur_scale = c.T / 8.0
        self.dur_offset = c.T / 4.0
        self._frozen_table = None

    # token table -------------------------------------------------------------

    def token_table(self):
        """Rows ``0..n_cells-1`` are graph embeddings; then EOS, SOS, PAD."""
        if self._frozen_table is not None:
            return self._frozen_table
        return tn.concat([self.graph_embed(), self.special], axis=0)

    def freeze(self):
        """Cache the graph embedding for inference with fixed parameters."""
        with nn.no_grad():
            self._frozen_table = self.token_table()
        return self

    def unfreeze(self):
        self._frozen_table = None
        return self

    # encoding ----------------------------------------------------------------

    def encode_days(self, table, batch: Batch):
        H_loc = nn.take(table, batch.day_loc)
        H_dur = nn.take(self.dur_emb, batch.day_dur)
        return self.daily_loc(H_loc, batch.day_valid), self.daily_dur(H_dur, batch.day_valid)

    def encode_week(self, h_loc, h_dur, batch: Batch):
        zero_loc = tn.Tensor(np.zeros((1, self.cfg.d_hl)))
        zero_dur = tn.Tensor(np.zeros((1, self.cfg.d_ht)))
        wl = nn.take(tn.concat([zero_loc, h_loc], axis=0), batch.day_slot)  # (B, 7, d_hl)
        wd = nn.take(tn.concat([zero_dur, h_dur], axis=0), batch.day_slot)
        z_loc = self.weekly_loc(wl, batch.week_mask, nn.take(self.weekday_loc, batch.weekdays))
        z_dur = self.weekly_dur(tn.concat([wd, wl], axis=-1), batch.week_mask,
                                nn.take(self.weekday_dur, batch.weekdays))
        return z_loc, z_dur

    def encode(self, batch: Batch, table=None):
        table = self.token_table() if table is None else table
        h_loc, h_dur = self.encode_days(table, batch)
        z_loc, z_dur = self.encode_week(h_loc, h_dur, batch)
        return table, z_loc, z_dur

    # decoding ----------------------------------------------------------------

    def spatial_logits(self, table, z_loc, dec_in, target_weekday):
        """Logits ``(B, len, n_cells+1)`` for the token after each prefix position."""
        B, L = dec_in.shape
        x = self.sd_in(nn.take(table, dec_in)) + nn.sinusoidal_positions(L, self.cfg.d_zl)[None]
        memory = (z_loc + nn.take(self.target_day_loc, target_weekday)).reshape(B, 1, self.cfg.d_zl)
        valid = dec_in != self.pad
        self_mask = nn.causal_mask(L)[None, None] & valid[:, None, None, :]
        for layer in self.sd_layers:
            x = layer(x, memory, self_mask)
        out_table = table[: self.cfg.n_cells + 1]
        return tn.matmul(self.sd_out(x), out_table.transpose()) + self.sd_bias

    def temporal_durations(self, table, z_dur, loc_ids, valid):
        """Real-valued durations ``(B, m)`` for location chains ``loc_ids``."""
        B, m = loc_ids.shape
        s = nn.take(table, loc_ids)
        s2 = self.td_fnn2(tn.relu(self.td_fnn1(s)))
        zz = tn.mul(z_dur.reshape(B, 1, self.cfg.d_zt), np.ones((1, m, 1)))
        x = self.td_in(tn.concat([s2, zz], axis=-1)) + nn.sinusoidal_positions(m, self.cfg.d_ht)[None]
        x = self.td_enc(x, nn.key_padding_mask(valid))
        raw = self.td_head2(tn.relu(self.td_head1(x))).reshape(B, m)
        return raw * self.dur_scale + self.dur_offset

    def forward(self, batch: Batch):
        table, z_loc, z_dur = self.encode(batch)
        logits = self.spatial_logits(table, z_loc, batch.dec_in, batch.target_weekday)
        durs = self.temporal_durations(table, z_dur, batch.tgt_loc, batch.tgt_valid)
        return logits, durs

    def loss(self, batch: Batch, lam: float = None):
        logits, durs = self.forward(batch)
        lam = self.cfg.lam if lam is None else lam
        return mstdp_loss(logits, batch.dec_out, batch.dec_valid, durs, batch.tgt_dur, batch.tgt_valid, lam)

    # inference ---------------------------------------------------------------

    def decode_locations(self, table, z_loc, target_weekday):
        """Greedy decoding; returns per-sample chains and a truncation flag per sample.

        The previous location is excluded at each step (chains have no
        consecutive repeats) and EOS is excluded at the first step.
        """
        B = z_loc.shape[0]
        seqs = np.full((B, 1), self.sos, np.int64)
        done = np.zeros(B, bool)
        for step in range(self.cfg.max_chain_len):
            logits = self.spatial_logits(table, z_loc, seqs, target_weekday).data[:, -1]
            if step == 0:
                logits[:, self.eos] = -np.inf
            else:
                prev = seqs[:, -1]
                ok = prev < self.cfg.n_cells
                logits[np.flatnonzero(ok), prev[ok]] = -np.inf
            nxt = logits.argmax(axis=1)
            nxt[done] = self.pad
            done |= nxt == self.eos
            nxt[nxt == self.eos] = self.pad
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            if done.all():
                break
        chains, truncated = [], []
        for b in range(B):
            row = seqs[b, 1:]
            chains.append([int(c) for c in row if c < self.cfg.n_cells])
            truncated.append(not done[b])
        return chains, truncated

    def predict_chains(self, samples):
        """Greedy next-day chains for a list of samples: ``[(locations, raw_durations, truncated)]``."""
        batch = collate(samples, self.cfg.n_cells)
        with nn.no_grad():
            table, z_loc, z_dur = self.encode(batch)
            chains, truncated = self.decode_locations(table, z_loc, batch.target_weekday)
            m = max(len(c) for c in chains)
            ids = np.full((len(chains), m), self.pad, np.int64)
            for b, c in enumerate(chains):
                ids[b, :len(c)] = c
            durs = self.temporal_durations(table, z_dur, ids, ids != self.pad).data
        return [(chains[b], durs[b, :len(chains[b])], truncated[b]) for b in range(len(chains))]

    def predict_samples(self, samples) -> list:
        """Recoupled slot tuples for each sample."""
        out = []
        for locs, raw, _ in self.predict_chains(samples):
            out.append(recouple(locs, repair_durations(raw, self.cfg.T), self.cfg.T))
        return out


def mstdp_loss(logits, dec_out, dec_valid, durs, tgt_dur, tgt_valid, lam: float):
    """Token-mean cross-entropy over locations (incl. EOS) plus ``lam`` times mean Huber over durations."""
    logp = tn.log_softmax(logits, axis=-1)
    n_cls = logits.shape[-1]
    onehot = np.zeros(logits.shape)
    b, t = np.nonzero(dec_valid)
    onehot[b, t, dec_out[b, t]] = 1.0
    ce = -(logp * onehot).sum() * (1.0 / max(dec_valid.sum(), 1))
    if lam == 0:
        return ce
    hub = tn.huber(durs, tgt_dur) * tgt_valid.astype(float)
    return ce + hub.sum() * (lam / max(tgt_valid.sum(), 1))


def repair_durations(raw, T: int) -> tuple:
    """Integer durations ``>= 1`` summing to ``T``.

    Clamp to at least 1 and round; if that does not sum to ``T``, give every
    position one slot and share the remaining ``T - m`` in proportion to the
    clamped values by largest remainder (ties to the earlier position).
    """
    x = np.maximum(np.asarray(raw, dtype=float), 1.0)
    m = len(x)
    if m == 0 or m > T:
        raise ValueError(f"cannot fit {m} stays into {T} slots")
    r = np.rint(x).astype(np.int64)
    if r.sum() == T:
        return tuple(int(v) for v in r)
    quota = (T - m) * x / x.sum()
    base = np.floor(quota).astype(np.int64)
    left = (T - m) - base.sum()
    order = sorted(range(m), key=lambda i: (-(quota[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return tuple(int(v) + 1 for v in base)


# ---------------------------------------------------------------------------
# day / week prediction

def predict_next_day(model: MSTDP, history, k: int) -> DailyTrajectory:
    sample = make_sample(history, k)
    slots = model.predict_samples([sample])[0]
    return DailyTrajectory(history.user, k + 1, sample.target_weekday, slots)


def predict_next_week(model: MSTDP, history, k: int, days: int = 7) -> list:
    return predict_iterative(model, [history], k, days)[0]


def predict_iterative(model: MSTDP, histories, k: int, days: int = 7) -> list:
    """Forecast days ``k+1 .. k+days`` for each history, feeding predictions back as observed days."""
    from .trajectory import UserHistory

    work = []
    for h in histories:
        w = UserHistory(h.user, h.T, {d: t for d, t in h.days.items() if d <= k})
        work.append(w)
    out = [[] for _ in work]
    for i in range(days):
        samples = [make_sample(w, k + i) for w in work]
        preds = model.predict_samples(samples)
        for j, (w, s, slots) in enumerate(zip(work, samples, preds)):
            traj = DailyTrajectory(w.user, k + i + 1, s.target_weekday, slots)
            w.add(traj)
            out[j].append(traj)
    return out
