# %% [markdown]
# # Synthetic city, decoupled days and the heterogeneous graph
#
# A 20x20 km grid is split into 16 admin regions and populated with
# agents whose days follow a few templates (home all day, commute,
# commute with an evening stop, midday errand). This script walks from raw
# slots to the location/duration chains the model consumes and to the graph
# built from the training days.

# %%
import numpy as np

from mstdp.graph import build_graph
from mstdp.motifs import motif_distribution
from mstdp.synth import generate_city, generate_population, generate_trajectories, select_days, split_dataset
from mstdp.trajectory import decouple, recouple

city = generate_city(seed=1)
agents = generate_population(city, 200, seed=1)
corpus = generate_trajectories(city, agents, n_days=28, T=24, seed=1)
split = split_dataset(corpus)
print(f"{city.n_cells} cells, {city.n_admins} admins, {len(corpus)} users, split {split}")

# %% [markdown]
# ## One day, two chains
# Runs of identical slots collapse into a location chain with no
# consecutive repeats and a duration chain summing to T.

# %%
day = corpus[0].days[2]
loc, dur = decouple(day)
print("slots     ", day.slots)
print("locations ", loc)
print("durations ", dur, "sum", sum(dur))
assert recouple(loc, dur, 24) == day.slots

lengths = [len(decouple(t)[0]) for h in corpus.values() for t in h.days.values()]
print("chain length: mean %.2f, max %d (vs 24 slots)" % (np.mean(lengths), max(lengths)))

# %% [markdown]
# ## Regularity
# Same weekday one week apart, and yesterday, as naive predictors.

# %%
same_wd = np.mean([np.mean(np.array(h.days[d].slots) == h.days[d - 7].slots)
                   for h in corpus.values() for d in range(7, 28)])
yday = np.mean([np.mean(np.array(h.days[d].slots) == h.days[d - 1].slots)
                for h in corpus.values() for d in range(1, 28)])
print(f"slot agreement with same weekday last week {same_wd:.3f}, with yesterday {yday:.3f}")

# %%
for motif, count, frac in motif_distribution([t for h in corpus.values() for t in h.days.values()], top=6):
    print(f"{str(motif):28s} {count:5d} {frac:.3f}")

# %% [markdown]
# ## Graph from the training days only

# %%
train_trajs = [t for h in select_days(corpus, split.train).values() for t in h.sorted_days()]
graph, feats = build_graph(train_trajs, city)
print("cell adjacency edges", len(graph.adj_cell), "admin adjacency", len(graph.adj_adm))
print("cell flow edges", len(graph.flow_cell), "trips", graph.flow_cell.total())
print("admin flow edges", len(graph.flow_adm), "of which self loops",
      int(np.sum(graph.flow_adm.src == graph.flow_adm.dst)))
busiest = feats.occupancy[: city.n_cells].sum(1).argsort()[::-1][:5]
print("busiest cells", busiest.tolist())
