import numpy as np
import pytest

from conftest import tiny_spec
from xtc.data import Dataset
from xtc.errors import TrainingDiverged
from xtc.experiment import (build_task, model_config, quantize_student, reduce, run_experiment, train_teacher,
                            training_set)
from xtc.model import EncoderModel
from xtc.schedule import stage_at
from xtc.trainer import AdamW, MetricsLog, RunResult, continue_train, evaluate, lr_grid_search, train


@pytest.fixture(scope="module")
def setup():
    spec = tiny_spec()
    task = build_task(spec)
    teacher, _ = train_teacher(spec, task)
    return spec, task, teacher


def student_for(spec, teacher):
    return quantize_student(spec, reduce(spec, teacher))


@pytest.mark.parametrize("kind", ["one_stage", "two_stage", "three_stage"])
def test_log_follows_stage_machine(setup, kind):
    spec, task, teacher = setup
    spec = spec.replace(**{"kd.kind": kind, "budget.epochs": 2})
    run = train(spec, teacher, student_for(spec, teacher), training_set(spec, task), task.val)
    T = len(run.log.steps)
    for rec in run.log.steps:
        assert (rec.gamma, rec.beta, rec.stage) == stage_at(rec.step, T, kind)


def test_determinism_bit_identical_logs(setup):
    spec, task, teacher = setup
    runs = [train(spec, teacher, student_for(spec, teacher), training_set(spec, task), task.val) for _ in range(2)]
    assert runs[0].log.steps_csv() == runs[1].log.steps_csv()
    assert runs[0].log.evals_csv() == runs[1].log.evals_csv()


def test_end_to_end_determinism():
    spec = tiny_spec(**{"teacher.epochs": 1})
    a, b = run_experiment(spec), run_experiment(spec)
    assert a.run.log.steps_csv() == b.run.log.steps_csv()


def test_teacher_untouched_and_latent_weights_continuous(setup):
    spec, task, teacher = setup
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    run = train(spec.replace(**{"budget.epochs": 2}), teacher, student_for(spec, teacher),
                training_set(spec, task), task.val)
    for k, v in teacher.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    w = run.model.layers[0].up.weight.data
    assert len(np.unique(w)) > w.size // 2  # latent, not the two-valued forward view


def test_best_so_far_is_running_max(setup):
    spec, task, teacher = setup
    spec = spec.replace(**{"budget.epochs": 4})
    run = train(spec, teacher, student_for(spec, teacher), training_set(spec, task), task.val)
    accs = [e.accuracy for e in run.log.evals]
    assert [e.best for e in run.log.evals] == list(np.maximum.accumulate(accs))
    assert evaluate(run.model, task.val) == max(accs)


def test_overfit_probe():
    spec = tiny_spec(**{"task.n_train": 32, "kd.objective": "labels", "quant.weight_bits": 32,
                        "budget.epochs": 200, "optim.peak_lr": 1e-2, "optim.lr_scale": 1.0})
    task = build_task(spec)
    student = EncoderModel(model_config(spec, 1), seed=0)
    run = train(spec, None, student, task.train, task.val)
    assert run.log.steps[-1].total < 1e-2


@pytest.mark.parametrize("mode", ["kd_fp32", "labels"])
def test_degenerate_modes_decrease_loss(setup, mode):
    spec, task, teacher = setup
    changes = {"quant.weight_bits": 32, "budget.epochs": 7} if mode == "kd_fp32" else \
        {"kd.objective": "labels", "budget.epochs": 7}
    spec = spec.replace(**changes)
    run = train(spec, teacher if mode == "kd_fp32" else None, student_for(spec, teacher),
                training_set(spec, task), task.val)
    total = run.log.column("total")[:50]
    assert len(total) == 50
    assert total[-10:].mean() < total[:10].mean()


def test_non_finite_loss_aborts(setup):
    spec, task, teacher = setup
    student = student_for(spec, teacher)
    student.classifier.weight.data[:] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        train(spec, teacher, student, training_set(spec, task), task.val)
    assert exc.value.record.step == 0


class Fake:
    def __init__(self, acc):
        self.best_accuracy = acc


def test_grid_search_picks_best_and_breaks_ties_low(setup):
    spec = setup[0]
    table = {2e-5: 80.33, 1e-4: 82.16, 5e-4: 81.04}
    lr, run = lr_grid_search(spec, list(table), runner=lambda lr: Fake(table[lr]))
    assert lr == 1e-4 and run.best_accuracy == 82.16
    lr, _ = lr_grid_search(spec, [5e-4, 1e-4], runner=lambda lr: Fake(0.5))
    assert lr == 1e-4
    lr, _ = lr_grid_search(spec, [3e-4], runner=lambda lr: Fake(0.1))
    assert lr == 3e-4


def test_grid_search_trains_each_value(setup):
    spec, task, teacher = setup
    lr, run = lr_grid_search(spec, [1e-4, 5e-4], teacher=teacher, student=student_for(spec, teacher),
                             train_set=training_set(spec, task), val_set=task.val)
    assert lr in (1e-4, 5e-4) and run.peak_lr == lr * spec.optim.lr_scale


def test_continue_training(setup):
    spec, task, teacher = setup
    ts = training_set(spec, task)
    run = train(spec, teacher, student_for(spec, teacher), ts, task.val)
    assert continue_train(spec, teacher, run, ts, task.val, rounds=0) is run
    cont = continue_train(spec, teacher, run, ts, task.val, rounds=2)
    assert len(cont.extra_logs) == 2
    for log in cont.extra_logs:
        assert log.steps[0].lr == 0.0 and log.steps[0].step == 0
    assert cont.best_accuracy >= run.best_accuracy


def test_constant_model_accuracy_near_half():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 500)
    ds = Dataset(rng.integers(0, 32, size=(1000, 8)), labels, 2)

    class Constant:
        def predict(self, tokens, batch_size=256):
            return np.zeros(len(tokens), dtype=int)

    assert evaluate(Constant(), ds) == 0.5


def test_adamw_skips_decay_on_bias_and_layernorm():
    from xtc.tensor import Tensor

    params = {"a.weight": Tensor(np.ones(3), True), "a.bias": Tensor(np.ones(3), True),
              "layers.0.ln1.gain": Tensor(np.ones(3), True), "embeddings.ln.gain": Tensor(np.ones(3), True)}
    opt = AdamW(params, weight_decay=0.5)
    for p in params.values():
        p.grad = np.zeros(3, np.float32)
    opt.step(0.1)
    assert params["a.weight"].data[0] == pytest.approx(0.95)
    for name in ("a.bias", "layers.0.ln1.gain", "embeddings.ln.gain"):
        assert params[name].data[0] == 1.0


def test_metrics_round_trip(tmp_path, setup):
    spec, task, teacher = setup
    run = train(spec, teacher, student_for(spec, teacher), training_set(spec, task), task.val)
    summary = run.log.write(tmp_path, spec_hash=spec.spec_hash())
    header = (tmp_path / "steps.csv").read_text().splitlines()[0]
    assert header == "step,stage,gamma,beta,lr,loss_logit,loss_hidden,loss_att,total"
    back = MetricsLog.read(tmp_path)
    assert back.steps_csv() == run.log.steps_csv()
    assert summary["best_accuracy"] == run.best_accuracy and summary["spec_hash"] == spec.spec_hash()


def test_log_rejects_non_increasing_steps():
    from xtc.trainer import StepRecord

    log = MetricsLog()
    log.add_step(StepRecord(0, 0, 1, 1, 0.0, 1.0, 1.0, 1.0, 3.0))
    with pytest.raises(ValueError):
        log.add_step(StepRecord(0, 0, 1, 1, 0.0, 1.0, 1.0, 1.0, 3.0))


def test_run_result_best_over_rounds():
    a, b = MetricsLog(), MetricsLog()
    a.add_eval(1, 10, 0.5)
    b.add_eval(1, 10, 0.7)
    assert RunResult(None, a, extra_logs=[b]).best_accuracy == 0.7
