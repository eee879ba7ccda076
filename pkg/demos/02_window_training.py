# %% [markdown]
# # Training an LSTM student with windowed truncated BPTT
#
# Windows of w frames are drawn at random positions in the recorded flights.
# The LSTM state at each window start is rebuilt by running the network over
# the frames before it without keeping gradients; backpropagation then runs
# through the window only.
#
# To keep this quick we collect from three rooms and train a small network for
# a few epochs. The full-size run lives in the acceptance suite.

# %%
import numpy as np

from roomcross import nn
from roomcross.evaluation import StudentController, TEST_START, collect_expert, evaluate_suite, room_one_starts
from roomcross.expert import ExpertConfig
from roomcross.training import SequenceData, TrainConfig, augment_recovery, replay_state, train
from roomcross.world import make_room_one

rooms = [make_room_one(i) for i in (0, 1, 7)]
expert_cfg = ExpertConfig()
data = collect_expert(room_one_starts(rooms)[::3], expert_cfg=expert_cfg)
data = augment_recovery(data, {r.id: r for r in rooms})
print(len(data), "episodes,", data.total_frames, "frames", data.provenance_counts())

# %% [markdown]
# Replay gives exactly the state a continuous pass would have reached.

# %%
spec = nn.NetworkSpec("LSTM", (1, 24, 32), (32, 32))
params = nn.init_params(spec, 0, np.float64)
seq = SequenceData(data, spec, np.float64)
x = seq.inputs(0, 0, int(seq.lengths[0]))
full, _ = nn.forward_window(spec, params, x)
tail, _ = nn.forward_window(spec, params, x[100:120], replay_state(spec, params, x, 100))
print("max deviation after replay:", np.abs(tail - full[100:120]).max())

# %%
cfg = TrainConfig(scheme="window", window=20, epochs=4, lr=1e-3)
result = train(spec, data, cfg)

# %% [markdown]
# Closed-loop check from the fixed test start. A student this small, trained
# this briefly, is not expected to fly every room.

# %%
metrics = evaluate_suite(StudentController(spec, result.params), rooms)
print(metrics.success_text, "imitation loss", round(metrics.imitation_loss, 3))
