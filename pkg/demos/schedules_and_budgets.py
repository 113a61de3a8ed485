# %% [markdown]
# # Multi-stage KD schedules
#
# One-stage KD uses every loss term for the whole run. Two- and three-stage
# runs first match intermediate layers, then switch to the logit loss. Each
# stage gets its own warmup and linear decay; the first stage of a multi-stage
# run peaks 2.5x higher.

# %%
from xtc.schedule import LRSchedule, budget_preset, stage_at, total_steps

T_total = 30
for kind in ("one_stage", "two_stage", "three_stage"):
    sched = LRSchedule(1e-4, T_total, kind)
    stages = "".join(str(stage_at(t, T_total, kind)[2]) for t in range(T_total))
    print(f"{kind:>11}: {stages}")

# %%
sched = LRSchedule(1e-4, 20, "two_stage")
for t in range(20):
    gamma, beta, stage = stage_at(t, 20, "two_stage")
    print(f"t={t:2d} stage={stage} gamma={gamma} beta={beta} lr={sched(t):.2e}")

# %% [markdown]
# ## Budgets
#
# Budgets A/B/C are epoch presets per task class. For a QNLI-sized task with
# augmentation the epochs count passes over the augmented set.

# %%
for label in "ABC":
    cell = budget_preset(label, "qnli_like")
    print(label, cell, "steps on 25k examples @32:", total_steps(cell.epochs, 25_000, 32))
print("C, longer:", budget_preset("C", "qnli_like", longer=True))
