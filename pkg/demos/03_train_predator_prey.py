# %% [markdown]
# # Training on a small predator-prey grid
#
# Two predators on a 6x6 grid, value-based learning with a monotonic mixer.
# A few thousand episodes take a few minutes on one core.  Set EPISODES
# lower for a quick look.

# %%
import os
import tempfile
from pathlib import Path

import numpy as np

from hypergroup import cli
from hypergroup.config import parse_text
from hypergroup.env import random_baseline

EPISODES = int(os.environ.get("EPISODES", 4000))
out = Path(tempfile.mkdtemp(prefix="hygma-demo-"))
cfg = parse_text(f"""
[env]
grid = 6
n_predators = 2
[spectral]
k_max = 2
[model]
hidden = 32
hgcn_out = 32
att_dim = 16
mixer_embed = 16
[learn]
mode = value
episodes = {EPISODES}
value_batch = 8
target_update = 50
epsilon_anneal = 20000
[run]
out_dir = {out}
""")

# %%
status = cli.run_train(cfg)
rows = cli.read_csv(out / "metrics.csv")
steps = np.array([float(r["steps"]) for r in rows])
td = np.array([float(r["loss_task"]) for r in rows])
print("exit status", status)
for lo in range(0, len(steps), max(1, len(steps) // 8)):
    print(f"episodes {lo:>5}+  mean steps {steps[lo:lo + len(steps) // 8].mean():6.2f}")
print("TD loss, last/first 100 episodes: %.3f" % (td[-100:].mean() / td[:100].mean()))

# %% [markdown]
# Greedy evaluation of the checkpoint against uniformly random predators:

# %%
summary = cli.run_eval(cfg, out / cli.CHECKPOINT_NAME, episodes=200)
baseline = random_baseline(cfg.env, 1000, 0)
print(f"greedy {summary['mean_steps']:.2f} steps, random {baseline:.2f} steps")

# %% [markdown]
# The grouping timeline records every adopted partition:

# %%
print((out / "groups_timeline.csv").read_text())
