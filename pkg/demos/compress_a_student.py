# %% [markdown]
# # Compressing a small encoder end to end
#
# Train a teacher on a synthetic classification task, keep every other layer,
# binarize the student and distil. Sizes are kept tiny so this runs in a few
# seconds; the acceptance benchmark uses the default config.

# %%
import numpy as np

from xtc.config import ExperimentSpec
from xtc.experiment import build_task, run_experiment, train_teacher
from xtc.model import checkpoint_bytes, skip_indices

spec = ExperimentSpec(seed=0).replace(**{
    "task.n_train": 1000, "task.n_val": 300, "task.seq_len": 16, "task.vocab_size": 64,
    "task.num_groups": 8, "task.num_classes": 4,
    "model.hidden": 32, "model.heads": 2, "model.ffn_dim": 64, "model.teacher_layers": 4,
    "teacher.epochs": 4, "augment.k": 3,
})
task = build_task(spec)
print("train/val:", len(task.train), len(task.val), " classes:", np.bincount(task.train.labels))

# %%
teacher, tlog = train_teacher(spec, task)
print("teacher val accuracy:", tlog.best_accuracy)
print("student keeps teacher layers", skip_indices(4, 2))

# %%
result = run_experiment(spec, teacher=teacher, task=task)
print("1-bit student val accuracy:", result.best_accuracy)
for rec in result.run.log.steps[::50]:
    print(f"step {rec.step:4d}  lr {rec.lr:.2e}  hidden {rec.loss_hidden:.4f}  att {rec.loss_att:.4f}  "
          f"logit {rec.loss_logit:.4f}")

# %%
fp = len(checkpoint_bytes(teacher))
q = len(checkpoint_bytes(result.run.model))
print(f"teacher checkpoint {fp} bytes, 1-bit student {q} bytes ({fp / q:.1f}x smaller)")
