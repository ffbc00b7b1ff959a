"""Admin-level SEIR metapopulation simulation driven by mobility.

One simulation step is one timeslot. Within a step the SEIR update runs
first and then people move according to that window's transition matrix.
Cumulative new cases count E -> I transitions, so they only start to rise
once the first seeded exposures have incubated (seed infections are not
counted as new cases).
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

S, E, I, R = range(4)


@dataclass(frozen=True)
class SeirParams:
    alpha: float = 0.4  # contacts per step
    beta: float = 0.1  # infection probability per contact
    incubation_steps: float = 3 * 24
    infectious_steps: float = 7 * 24

    def __post_init__(self):
        if self.alpha < 0 or not 0 <= self.beta <= 1:
            raise ValueError("alpha must be >= 0 and beta a probability")
        if self.incubation_steps < 1 or self.infectious_steps < 1:
            raise ValueError("incubation and infectious periods must be at least one step")

    @property
    def p_inf(self) -> float:
        return 1.0 / self.incubation_steps

    @property
    def p_rem(self) -> float:
        return 1.0 / self.infectious_steps

    @property
    def r0(self) -> float:
        # exact decimal arithmetic: 0.4 * 0.1 * 168 is 6.720000000000001 in floats
        f = Fraction(repr(self.alpha)) * Fraction(repr(self.beta)) * Fraction(repr(self.infectious_steps))
        return float(f)


def _admin_slots(traj, cell_admin) -> np.ndarray:
    return cell_admin[np.asarray(traj.slots, dtype=np.int64)]


def build_transition_matrices(trajs, cell_admin, n_admins: int) -> np.ndarray:
    """Row-stochastic admin transition matrices, shape ``(n_days, T, A, A)``.

    Window ``t`` of a day counts users in admin ``i`` at slot ``t`` and admin
    ``j`` at slot ``t + 1``. The last window wraps to slot 0 of the same user's
    next day when that day is in the corpus, otherwise to slot 0 of the same
    day. Days are the distinct day indices of ``trajs`` in sorted order. Rows
    with no users become identity rows.
    """
    trajs = list(trajs)
    if not trajs:
        raise ValueError("need at least one trajectory")
    cell_admin = np.asarray(cell_admin, dtype=np.int64)
    T = trajs[0].T
    days = sorted({t.day for t in trajs})
    day_idx = {d: k for k, d in enumerate(days)}
    by_key = {(t.user, t.day): t for t in trajs}
    counts = np.zeros((len(days), T, n_admins, n_admins))
    steps = np.arange(T)
    for t in trajs:
        if t.T != T:
            raise ValueError("trajectories disagree on T")
        a = _admin_slots(t, cell_admin)
        nxt = by_key.get((t.user, t.day + 1), t)
        b = np.append(a[1:], cell_admin[nxt.slots[0]])
        np.add.at(counts[day_idx[t.day]], (steps, a, b), 1.0)
    rows = counts.sum(-1, keepdims=True)
    empty = rows[..., 0] == 0
    out = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    eye = np.broadcast_to(np.eye(n_admins), out.shape)
    out[empty] = eye[empty]
    return out


def seir_step(state: np.ndarray, params: SeirParams, rng) -> tuple:
    """One SEIR update on a ``(4, A)`` count array. Returns (new state, new E->I per region)."""
    s, e, i, r = state
    n = state.sum(0)
    p_exp = np.zeros(len(n))
    live = n > 0
    p_exp[live] = np.minimum(1.0, params.alpha * params.beta * i[live] / n[live])
    new_e = rng.binomial(s, p_exp)
    new_i = rng.binomial(e, params.p_inf)
    new_r = rng.binomial(i, params.p_rem)
    out = np.stack([s - new_e, e + new_e - new_i, i + new_i - new_r, r + new_r])
    return out, new_i


def move_population(state: np.ndarray, matrix: np.ndarray, rng) -> np.ndarray:
    """Every person independently draws a next region from their region's row."""
    # multinomial rejects rows whose float sum drifts just above 1
    p = matrix / matrix.sum(-1, keepdims=True)
    moved = rng.multinomial(state, p)  # (4, A, A): compartment, from, to
    return moved.sum(1)


def _seir_step_agents(region, comp, params, n_admins, rng):
    n = np.bincount(region, minlength=n_admins)
    inf = np.bincount(region[comp == I], minlength=n_admins)
    p_exp = np.zeros(n_admins)
    live = n > 0
    p_exp[live] = np.minimum(1.0, params.alpha * params.beta * inf[live] / n[live])
    u = rng.random(len(comp))
    to_e = (comp == S) & (u < p_exp[region])
    to_i = (comp == E) & (u < params.p_inf)
    to_r = (comp == I) & (u < params.p_rem)
    comp = comp.copy()
    comp[to_e], comp[to_i], comp[to_r] = E, I, R
    return comp, int(to_i.sum())


def _move_agents(region, matrix, rng):
    cdf = np.cumsum(matrix, axis=1)
    u = rng.random(len(region))
    nxt = (u[:, None] > cdf[region]).sum(1)
    return np.minimum(nxt, matrix.shape[0] - 1)


@dataclass
class EpiSeries:
    infectious: np.ndarray  # total I at t = 0..steps
    cumulative: np.ndarray  # total E->I transitions up to t
    final_state: np.ndarray

    def __len__(self):
        return len(self.infectious)


def _window(matrices: np.ndarray, step: int) -> np.ndarray:
    n_days, T = matrices.shape[:2]
    return matrices[(step // T) % n_days, step % T]


def run_simulation(matrices: np.ndarray, population, params: SeirParams = SeirParams(),
                   n_seed_infected: int = 1000, steps: int = None, rng=None, agent_mode: bool = False,
                   callback=None) -> EpiSeries:
    """Simulate ``steps`` timeslots (default a week) from a census ``population``.

    ``matrices`` has shape ``(n_days, T, A, A)``; day matrices repeat cyclically.
    Seed infections are drawn uniformly without replacement from the population.
    ``callback(step, state)`` is called after every step with the ``(4, A)`` counts.
    """
    matrices = np.asarray(matrices, dtype=float)
    if matrices.ndim == 3:
        matrices = matrices[None]
    n_admins = matrices.shape[-1]
    population = np.asarray(population, dtype=np.int64)
    if population.shape != (n_admins,):
        raise ValueError(f"population has shape {population.shape}, expected ({n_admins},)")
    if n_seed_infected > population.sum():
        raise ValueError("more seed infections than people")
    rng = np.random.default_rng(rng)
    steps = 7 * matrices.shape[1] if steps is None else steps
    seeds = rng.multivariate_hypergeometric(population, n_seed_infected)
    infectious = np.zeros(steps + 1, np.int64)
    cumulative = np.zeros(steps + 1, np.int64)
    infectious[0] = n_seed_infected

    if agent_mode:
        region = np.repeat(np.arange(n_admins), population)
        comp = np.full(len(region), S)
        start = np.concatenate([[0], np.cumsum(population)[:-1]])
        for a in range(n_admins):
            comp[start[a]: start[a] + seeds[a]] = I
        for k in range(steps):
            comp, new = _seir_step_agents(region, comp, params, n_admins, rng)
            region = _move_agents(region, _window(matrices, k), rng)
            infectious[k + 1] = int((comp == I).sum())
            cumulative[k + 1] = cumulative[k] + new
            if callback is not None:
                callback(k + 1, np.stack([np.bincount(region[comp == c], minlength=n_admins) for c in range(4)]))
        state = np.stack([np.bincount(region[comp == c], minlength=n_admins) for c in range(4)])
        return EpiSeries(infectious, cumulative, state)

    state = np.zeros((4, n_admins), np.int64)
    state[S] = population - seeds
    state[I] = seeds
    for k in range(steps):
        state, new = seir_step(state, params, rng)
        state = move_population(state, _window(matrices, k), rng)
        infectious[k + 1] = state[I].sum()
        cumulative[k + 1] = cumulative[k] + new.sum()
        if callback is not None:
            callback(k + 1, state)
    return EpiSeries(infectious, cumulative, state)


@dataclass
class EnsembleResult:
    mae_infectious: np.ndarray
    mae_cumulative: np.ndarray
    steps_per_day: int
    runs_actual: list
    runs_pred: list

    def day_mean(self, day: int) -> tuple:
        """Mean MAE over the steps of simulated day ``day`` (1-based)."""
        sl = slice(1 + (day - 1) * self.steps_per_day, 1 + day * self.steps_per_day)
        return float(self.mae_infectious[sl].mean()), float(self.mae_cumulative[sl].mean())

    def final_day_mean(self) -> tuple:
        n_days = (len(self.mae_infectious) - 1) // self.steps_per_day
        return self.day_mean(n_days)


def ensemble_mae(matrices_actual, matrices_pred, population, params: SeirParams = SeirParams(),
                 n_runs: int = 100, seed: int = 0, n_seed_infected: int = 1000, steps: int = None) -> EnsembleResult:
    """MAE between actual- and predicted-mobility epidemics over paired runs.

    Run ``r`` of both sides uses the same random stream, so identical matrices
    give identical trajectories and zero error.
    """
    T = np.asarray(matrices_actual).shape[-3]
    runs_a, runs_p = [], []
    for r in range(n_runs):
        ss = np.random.SeedSequence([seed, r])
        runs_a.append(run_simulation(matrices_actual, population, params, n_seed_infected, steps,
                                     np.random.default_rng(ss)))
        runs_p.append(run_simulation(matrices_pred, population, params, n_seed_infected, steps,
                                     np.random.default_rng(ss)))
    ia = np.stack([x.infectious for x in runs_a])
    ip = np.stack([x.infectious for x in runs_p])
    ca = np.stack([x.cumulative for x in runs_a])
    cp = np.stack([x.cumulative for x in runs_p])
    return EnsembleResult(np.abs(ia - ip).mean(0), np.abs(ca - cp).mean(0), T, runs_a, runs_p)
