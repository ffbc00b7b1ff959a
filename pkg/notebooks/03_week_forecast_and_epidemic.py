# %% [markdown]
# # Week-ahead forecasts and their epidemic footprint
#
# Predictions for days 2..7 are fed back in as if observed, so errors
# compound. The admin-level SEIR simulation then runs on mobility from the
# actual and the forecast week with paired random streams; differences in
# cumulative cases are pure mobility error.
#
# Run ``02_next_day_model.py`` first (it writes the checkpoint).

# %%
import numpy as np

from mstdp.epidemic import SeirParams, build_transition_matrices, ensemble_mae
from mstdp.graph import build_graph
from mstdp.metrics import seven_day_curves
from mstdp.model import predict_iterative
from mstdp.synth import census, generate_city, generate_population, generate_trajectories, select_days, split_dataset
from mstdp.train import load_model

city = generate_city(seed=3)
agents = generate_population(city, 60, seed=3)
corpus = generate_trajectories(city, agents, n_days=28, seed=3)
split = split_dataset(corpus)
graph, feats = build_graph([t for h in select_days(corpus, split.train).values() for t in h.sorted_days()], city)
model, meta = load_model("/tmp/mstdp_notebook.ckpt", graph, feats)

# %%
start = split.test[0]
users = sorted(corpus)
weeks = predict_iterative(model, [corpus[u] for u in users], start - 1, 7)
actual = [[corpus[u].days[start + i] for i in range(7)] for u in users]
curves = seven_day_curves(weeks, actual, city.centroids_km)
for d, a, dev in zip(curves["day"], curves["acc"], curves["dev_dist_km"]):
    print(f"day {d}: Acc {a:.3f}  DevDist {dev:.2f} km")

# %% [markdown]
# The first test day is a Sunday, so horizons 1 and 7 both land on a
# weekend, and synthetic weekends are easy. Averaging over start days that
# cover every weekday separates the horizon effect from the weekday effect.

# %%
params = SeirParams()
print("R0 =", params.r0)
Ma = build_transition_matrices([t for w in actual for t in w], city.cell_admin, city.n_admins)
Mp = build_transition_matrices([t for w in weeks for t in w], city.cell_admin, city.n_admins)
res = ensemble_mae(Ma, Mp, census(city, agents), params, n_runs=30)
for d in range(1, 8):
    mi, mc = res.day_mean(d)
    print(f"day {d}: MAE(I) {mi:7.1f}  MAE(cum) {mc:7.1f}")
print("actual cumulative cases at t=168:", np.mean([r.cumulative[-1] for r in res.runs_actual]))
