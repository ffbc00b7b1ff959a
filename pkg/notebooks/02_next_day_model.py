# %% [markdown]
# # Training a desk-scale model for next-day prediction
#
# Smaller than the acceptance run (60 agents, a handful of epochs) so it
# finishes in a couple of minutes. The persistence baseline copies the same
# weekday from the week before.

# %%
import logging
import time

from mstdp.graph import build_graph
from mstdp.metrics import accuracy
from mstdp.model import MSTDP, ModelConfig, predict_next_day
from mstdp.synth import generate_city, generate_population, generate_trajectories, select_days, split_dataset
from mstdp.train import TrainConfig, make_samples, save_model, train
from mstdp.trajectory import recouple

logging.basicConfig(level=logging.INFO, format="%(message)s")

city = generate_city(seed=3)
corpus = generate_trajectories(city, generate_population(city, 60, seed=3), n_days=28, seed=3)
split = split_dataset(corpus)
graph, feats = build_graph([t for h in select_days(corpus, split.train).values() for t in h.sorted_days()], city)

train_s = make_samples(select_days(corpus, (0, split.train[1])), split.train)
val_s = make_samples(select_days(corpus, (0, split.validation[1])), split.validation)
print(len(train_s), "training samples,", len(val_s), "validation samples")

# %%
model = MSTDP(ModelConfig.desk(city.n_cells, city.n_admins), graph, feats)
print(model.store.n_values(), "parameters")
t0 = time.time()
res = train(model, train_s, val_s, TrainConfig(lr=1e-3, epochs=12, batch_size=16, schedule="cosine", lr_min=1e-4))
print(f"best epoch {res.best_epoch}, val Acc {res.best_val_acc:.4f}, {time.time() - t0:.0f}s")

# %%
truth = [recouple(*s.target, 24) for s in val_s]
persist = accuracy([corpus[s.user].days[s.target_day - 7].slots for s in val_s], truth)
print(f"persistence {persist:.4f}")

# %% [markdown]
# Twelve epochs on 60 agents is not enough to catch persistence (about 0.83
# against 0.88 here). The acceptance run trains the same preset for 40
# epochs on 200 agents, and only then edges past it.

# %% [markdown]
# ## One forecast, side by side

# %%
u = 5
k = split.validation[0] - 1
pred = predict_next_day(model, corpus[u], k)
print("actual   ", corpus[u].days[k + 1].slots)
print("predicted", pred.slots)
save_model("/tmp/mstdp_notebook.ckpt", model, {"T": 24, "best_epoch": res.best_epoch})
