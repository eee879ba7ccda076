# %% [markdown]
# # DAgger on the second room set
#
# The second catalog shuffles the obstacle order per room. The expert flies
# five rooms once; each DAgger iteration lets the student fly, has the expert
# label every visited frame, and retrains on everything collected so far.

# %%
import numpy as np

from roomcross import nn
from roomcross.evaluation import collect_expert, room_two_start
from roomcross.training import DaggerConfig, TrainConfig, dagger_iterate, train
from roomcross.world import room_two_catalog

catalog = room_two_catalog()
initial = [room for role, room in catalog if role == "train-initial"]
for role, room in catalog:
    print(role, room.id, [o.kind for o in room.obstacles])

# %%
data = collect_expert([(room, room_two_start(room)) for room in initial])
spec = nn.NetworkSpec("LSTM", (1, 24, 32), (32, 32))
tcfg = TrainConfig(window=20, epochs=2, lr=1e-3)
params = train(spec, data, tcfg, log=None).params

# %% [markdown]
# Two iterations with fine-tuning. The step-0 losses show how much a warm
# start helps on the grown dataset compared with a fresh initialization.

# %%
dcfg = DaggerConfig(iterations=2, finetune=True)
for k in (1, 2):
    params, data, record = dagger_iterate(spec, params, catalog, data, dcfg, tcfg, k, log=None)
    print(f"iteration {k}: {record.episodes_added} new episodes, dataset {record.dataset_size},",
          f"step-0 loss warm {record.step0_finetune:.3f} vs fresh {record.step0_fresh:.3f}")
print(data.provenance_counts())
