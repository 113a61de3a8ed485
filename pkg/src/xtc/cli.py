"""``xtc`` command line: train-teacher, reduce, compress, grid, compare-budgets, report.

Exit status is 0 on success, 2 for configuration problems and 1 for any
other failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import config as cfgmod
from .errors import ConfigurationError
from .experiment import build_task, get_teacher, quantize_student, reduce, training_set
from .model import load_checkpoint, save_checkpoint
from .quantization import ParamInventory, model_size
from .report import write_index, write_report
from .trainer import continue_train, lr_grid_search, train

log = logging.getLogger("xtc")


def _parse_set(items):
    changes = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError("expected KEY=VALUE", path=item)
        key, value = item.split("=", 1)
        changes[key] = yaml.safe_load(value)
    return changes


def _spec(args, **overrides):
    spec = cfgmod.load(args.config) if args.config else cfgmod.ExperimentSpec()
    changes = _parse_set(args.set)
    changes.update({k: v for k, v in overrides.items() if v is not None})
    return spec.replace(**changes) if changes else spec


def _out(args, name):
    out = Path(args.out) if args.out else Path(cfgmod.output_root()) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(spec, out):
    cfgmod.save(spec, out / "config.yaml")


def _size_summary(model):
    inv = ParamInventory()
    specs = model.matrix_specs()
    for name, p in model.named_parameters().items():
        spec = specs.get(name)
        if spec is None or spec.bits == 32:
            inv.add(name, p.size, 32)
        else:
            inv.add(name, p.size, spec.bits, p.shape[0] if spec.granularity == "per_row" else 1)
    report = model_size(inv)
    return {"model_megabytes": report.megabytes, "size_ratio": report.ratio,
            "weight_bit_ratio": report.quantized_ratio}


# -- commands -----------------------------------------------------------------

def cmd_train_teacher(args):
    spec = _spec(args)
    out = _out(args, "teacher")
    _write_config(spec, out)
    task = build_task(spec)
    teacher, tlog = get_teacher(spec.replace(**{"teacher.path": None}), task)
    save_checkpoint(teacher, out / "teacher.xtc")
    summary = tlog.write(out, spec_hash=spec.spec_hash())
    print(f"teacher: best val accuracy {summary['best_accuracy']:.4f} -> {out / 'teacher.xtc'}")


def cmd_reduce(args):
    spec = _spec(args, **{"student.layers": args.layers, "student.init": args.strategy,
                          "teacher.path": args.teacher})
    if not spec.teacher.path:
        raise ConfigurationError("reduce needs a teacher checkpoint", path="teacher.path")
    out = _out(args, "student")
    _write_config(spec, out)
    teacher = load_checkpoint(spec.teacher.path)
    student = reduce(spec, teacher)
    save_checkpoint(student, out / "student.xtc")
    (out / "selection.yaml").write_text(yaml.safe_dump(
        {"strategy": spec.student.init, "teacher_layers": teacher.config.num_layers,
         "indices": student.source_layers}))
    print(f"student: {len(student.layers)} layers from teacher layers {student.source_layers}")


def _kd_kind(text):
    return None if text is None else text.replace("-", "_")


def _compress_spec(args):
    return _spec(args, **{"quant.weight_bits": args.bits, "kd.kind": _kd_kind(args.kd),
                          "budget.label": args.budget, "teacher.path": args.teacher})


def _prepare(spec, student_path=None):
    task = build_task(spec)
    teacher, _ = get_teacher(spec, task)
    student = load_checkpoint(student_path) if student_path else reduce(spec, teacher)
    return task, teacher, quantize_student(spec, student)


def cmd_compress(args):
    spec = _compress_spec(args)
    out = _out(args, "compressed")
    _write_config(spec, out)
    task, teacher, student = _prepare(spec, args.student)
    train_set = training_set(spec, task)
    run = train(spec, teacher, student, train_set, task.val)
    if spec.continue_rounds:
        run = continue_train(spec, teacher, run, train_set, task.val)
    for r, extra in enumerate(run.extra_logs, 1):
        extra.write(out, prefix=f"round{r}_", spec_hash=spec.spec_hash())
    sizes = _size_summary(run.model)
    nbytes = save_checkpoint(run.model, out / "student.xtc")
    summary = run.log.write(out, spec_hash=spec.spec_hash(), checkpoint_bytes=nbytes, **sizes)
    print(f"compressed: best val accuracy {run.best_accuracy:.4f}, "
          f"{sizes['model_megabytes']:.4f} MiB, weight-bit ratio x{sizes['weight_bit_ratio']:.1f}")
    return summary


def cmd_grid(args):
    spec = _compress_spec(args)
    out = _out(args, "grid")
    _write_config(spec, out)
    task, teacher, student = _prepare(spec, args.student)
    train_set = training_set(spec, task)
    rows = []

    def runner(lr):
        run = train(spec, teacher, student.copy(), train_set, task.val, peak_lr=lr * spec.optim.lr_scale)
        name = f"lr{lr:g}"
        run.log.write(out / name, spec_hash=spec.spec_hash(), peak_lr=lr)
        rows.append({"run": name, "seed": spec.seed, "budget": spec.budget.label, "kd": spec.kd.kind, "lr": lr})
        return run

    best_lr, best = lr_grid_search(spec, runner=runner)
    save_checkpoint(best.model, out / "best.xtc")
    write_index(out, rows)
    write_report(out)
    print(f"grid: best peak lr {best_lr:g} with val accuracy {best.best_accuracy:.4f}")


def cmd_compare_budgets(args):
    spec = _spec(args, **{"kd.kind": _kd_kind(args.kd)})
    out = _out(args, "compare-budgets")
    _write_config(spec, out)
    budgets = [b.strip() for b in args.budgets.split(",") if b.strip()]
    rows = []
    for seed in range(spec.seed, spec.seed + args.seeds):
        seeded = spec.replace(seed=seed)
        task, teacher, base = _prepare(seeded)
        train_set = training_set(seeded, task)
        for b in budgets:
            run_spec = seeded.replace(**{"budget.label": b})
            run = train(run_spec, teacher, base.copy(), train_set, task.val)
            name = f"{b}_seed{seed}"
            _write_config(run_spec, _out_dir(out / name))
            run.log.write(out / name, spec_hash=run_spec.spec_hash())
            rows.append({"run": name, "seed": seed, "budget": b, "kd": run_spec.kd.kind, "lr": run_spec.optim.peak_lr})
            print(f"budget {b} seed {seed}: {run.best_accuracy:.4f}")
    write_index(out, rows)
    print(f"report: {write_report(out)}")


def _out_dir(path):
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_report(args):
    print(write_report(args.root))


# -- entry point --------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="xtc", description="Extreme compression of small transformer encoders.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment file (defaults apply to missing keys)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a field, e.g. optim.peak_lr=1e-4")
        sp.add_argument("--out", help="output directory (default: $XTC_OUT/<command>)")
        return sp

    common(sub.add_parser("train-teacher", help="fit a full-precision teacher")).set_defaults(fn=cmd_train_teacher)

    sp = common(sub.add_parser("reduce", help="Step I: initialise a shallower student from teacher layers"))
    sp.add_argument("--teacher", help="teacher checkpoint")
    sp.add_argument("--layers", type=int, help="student depth (student.layers)")
    sp.add_argument("--strategy", choices=["skip", "top", "bottom", "random"], help="teacher layers to keep")
    sp.set_defaults(fn=cmd_reduce)

    for name, fn, text in (("compress", cmd_compress, "Step II: quantization-aware distillation"),
                           ("grid", cmd_grid, "peak learning-rate grid search")):
        sp = common(sub.add_parser(name, help=text))
        sp.add_argument("--teacher", help="teacher checkpoint (trained from scratch when absent)")
        sp.add_argument("--student", help="student checkpoint from `reduce` (reduced on the fly when absent)")
        sp.add_argument("--bits", type=int, choices=[1, 2, 32], help="weight bits (quant.weight_bits)")
        sp.add_argument("--kd", choices=["one-stage", "two-stage", "three-stage"], help="KD schedule (kd.kind)")
        sp.add_argument("--budget", choices=["A", "B", "C"], help="epoch preset (budget.label)")
        sp.set_defaults(fn=fn)

    sp = common(sub.add_parser("compare-budgets", help="train one student per budget and seed, then report"))
    sp.add_argument("--budgets", default="A,C", help="comma-separated budget labels")
    sp.add_argument("--seeds", type=int, default=3, help="seeds 0..N-1 per budget")
    sp.add_argument("--kd", choices=["one-stage", "two-stage", "three-stage"], help="KD schedule (kd.kind)")
    sp.set_defaults(fn=cmd_compare_budgets)

    sp = sub.add_parser("report", help="rebuild report.md from the CSV logs under ROOT")
    sp.add_argument("root", help="directory written by grid or compare-budgets")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
