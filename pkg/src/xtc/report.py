"""Markdown comparison tables computed from run logs alone.

A comparison directory holds ``index.csv`` (one row per run: ``run, seed,
budget, kd, lr``) and one sub-directory per run with its ``*evals.csv``
files.  Nothing here touches a model or re-runs training.
"""

from __future__ import annotations

import csv
import statistics
from collections import defaultdict
from pathlib import Path

INDEX_COLUMNS = ("run", "seed", "budget", "kd", "lr", "variant")


def write_index(root, rows):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "index.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, INDEX_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in INDEX_COLUMNS})


def read_index(root):
    with open(Path(root) / "index.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def best_accuracy(run_dir):
    """Highest per-epoch validation accuracy over every round logged in ``run_dir``."""
    best = float("-inf")
    for path in sorted(Path(run_dir).glob("*evals.csv")):
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                best = max(best, float(row["accuracy"]))
    if best == float("-inf"):
        raise FileNotFoundError(f"no evaluation log under {run_dir}")
    return best


def mean_sd(values):
    m = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return m, sd


def _fmt(values):
    m, sd = mean_sd(values)
    return f"{100 * m:.2f} ± {100 * sd:.2f} (n={len(values)})"


def _table(rows, cols, cells, corner):
    head = f"| {corner} | " + " | ".join(cols) + " |"
    sep = "|" + "---|" * (len(cols) + 1)
    body = [f"| {r} | " + " | ".join(cells.get((r, c), "–") for c in cols) + " |" for r in rows]
    return "\n".join([head, sep, *body])


def collect(root):
    """``[(index row, best accuracy)]`` for every indexed run."""
    root = Path(root)
    return [(row, best_accuracy(root / row["run"])) for row in read_index(root)]


def build_report(root):
    root = Path(root)
    runs = collect(root)
    kds = sorted({r["kd"] for r, _ in runs})
    lines = [f"# Compression report: `{root.name}`", ""]

    by_budget = defaultdict(list)
    for r, acc in runs:
        by_budget[(r["budget"], r["kd"])].append(acc)
    budgets = sorted({b for b, _ in by_budget})
    lines += ["## Accuracy by budget and KD schedule", "",
              _table(budgets, kds, {k: _fmt(v) for k, v in by_budget.items()}, "budget"), ""]

    lrs = sorted({r["lr"] for r, _ in runs if r["lr"]}, key=float)
    if len(lrs) > 1:
        by_lr = defaultdict(list)
        for r, acc in runs:
            by_lr[(r["lr"], r["kd"])].append(acc)
        cells = {k: _fmt(v) for k, v in by_lr.items()}
        for kd in kds:
            means = [mean_sd(by_lr[(lr, kd)])[0] for lr in lrs if by_lr.get((lr, kd))]
            if means:
                cells[("best (above)", kd)] = f"{100 * max(means):.2f}"
        lines += ["## Accuracy by peak learning rate", "",
                  _table([*lrs, "best (above)"], kds, cells, "peak lr"), ""]

    variants = sorted({r["variant"] for r, _ in runs if r.get("variant")})
    if variants:
        by_var = defaultdict(list)
        for r, acc in runs:
            by_var[(r.get("variant") or "default", r["kd"])].append(acc)
        names = sorted({v for v, _ in by_var})
        lines += ["## Accuracy by variant", "",
                  _table(names, kds, {k: _fmt(v) for k, v in by_var.items()}, "variant"), ""]

    lines += ["## Logs", ""]
    for r, _ in runs:
        for path in sorted((root / r["run"]).glob("*.csv")):
            lines.append(f"- `{path.relative_to(root)}`")
    return "\n".join(lines) + "\n"


def write_report(root):
    text = build_report(root)
    path = Path(root) / "report.md"
    path.write_text(text)
    return path
