"""Training, evaluation, inference, callbacks, and checkpointing."""

import hashlib
import math

import numpy as np
import pytest

import support

from semaflow import errors
from semaflow.graph import Graph
from semaflow.runtime import (
    ActionConfig,
    Callback,
    Optimizer,
    OptimizerConfig,
    action_config_from_doc,
    adopt_parameters,
    apply_checkpoint,
    attach_arrays,
    evaluate,
    infer,
    parameter_hash,
    read_checkpoint,
    read_dump,
    run_callbacks,
    train,
    write_checkpoint,
)


@pytest.fixture
def reg():
    return support.make_registry()


def blob_arrays(n=128, seed=7, features=2, spread=0.6):
    rng = np.random.default_rng(seed)
    half = n // 2
    x0 = rng.normal(-1.0, spread, size=(half, features))
    x1 = rng.normal(+1.0, spread, size=(n - half, features))
    x = np.concatenate([x0, x1]).astype(np.float32)
    y = np.concatenate([np.zeros(half), np.ones(n - half)]).astype(np.float32)
    idx = rng.permutation(n)
    return x[idx], y[idx].reshape(-1, 1)


def build_classifier(reg, seed=0, hidden=16, zero_final=False):
    g = Graph(reg, seed=seed)
    g.add("ArraySource", "data", {"features": 2})
    g.add("MLPBlock", "mlp", {"in_features": 2, "hidden": hidden, "out_features": 2})
    g.add("LogSoftmax", "sm", {"features": 2})
    g.add("NllLoss", "loss", {"num_classes": 2})
    g.connect("data.x", "mlp", "x")
    g.connect("mlp.y", "sm", "x")
    g.connect("sm.y", "loss", "log_probs")
    g.connect("data.labels", "loss", "labels")
    g.add_sink("loss.loss")
    g.validate()
    if zero_final:
        for name in ("W", "b"):
            g.instances["mlp"].children["l1"].state[name].value[:] = 0.0
    return g


def sgd(lr, momentum=0.0):
    return OptimizerConfig("sgd", lr, momentum=momentum)


def adam(lr):
    return OptimizerConfig("adam", lr)


class TestTrain:
    def test_loss_decreases_on_blobs(self, reg):
        g = build_classifier(reg, seed=3)
        x, y = blob_arrays()
        attach_arrays(g.instances["data"], {"x": x, "labels": y})
        cfg = ActionConfig("train", max_steps=200, batch_size=32, optimizer=sgd(0.1))
        report = train(g, cfg)
        assert report.steps == 200
        assert report.losses[-1] < 0.2
        assert report.losses[-1] < report.losses[0]

    def test_zero_steps_keeps_parameters(self, reg):
        g = build_classifier(reg)
        x, y = blob_arrays(32)
        attach_arrays(g.instances["data"], {"x": x, "labels": y})
        before = parameter_hash(g.parameters())
        report = train(g, ActionConfig("train", max_steps=0, batch_size=8,
                                       optimizer=sgd(0.1)))
        assert report.losses == [] and report.steps == 0
        assert parameter_hash(g.parameters()) == before

    def test_requires_scalar_loss(self, reg):
        g = Graph(reg)
        g.add("ArraySource", "data", {"features": 2})
        g.add("Linear", "lin", {"in_features": 2, "out_features": 2})
        g.connect("data.x", "lin", "x")
        g.add_sink("lin.y")
        g.validate()
        attach_arrays(g.instances["data"], {"x": np.zeros((8, 2), np.float32),
                                            "labels": np.zeros((8, 1), np.float32)})
        with pytest.raises(errors.NoScalarLossError):
            train(g, ActionConfig("train", max_steps=1, batch_size=4, optimizer=sgd(0.1)))

    def test_data_exhausted_when_not_repeating(self, reg):
        g = Graph(reg)
        g.add("ArraySource", "data", {"features": 2, "repeats": False})
        g.add("MLPBlock", "mlp", {"in_features": 2, "hidden": 4, "out_features": 2})
        g.add("LogSoftmax", "sm", {"features": 2})
        g.add("NllLoss", "loss", {"num_classes": 2})
        g.connect("data.x", "mlp", "x")
        g.connect("mlp.y", "sm", "x")
        g.connect("sm.y", "loss", "log_probs")
        g.connect("data.labels", "loss", "labels")
        g.add_sink("loss.loss")
        g.validate()
        x, y = blob_arrays(16)
        attach_arrays(g.instances["data"], {"x": x, "labels": y})
        with pytest.raises(errors.DataExhaustedError):
            train(g, ActionConfig("train", max_steps=5, batch_size=8, optimizer=sgd(0.1)))


class TestAccumulationEquivalence:
    @pytest.mark.parametrize("opt", [sgd(0.01), adam(0.005)], ids=["sgd", "adam"])
    def test_micro_batches_match_large_batch(self, reg, opt):
        x, y = blob_arrays(64, seed=11)

        def run(batch_size, accum):
            g = build_classifier(reg, seed=5)
            attach_arrays(g.instances["data"], {"x": x, "labels": y})
            cfg = ActionConfig("train", max_steps=40, batch_size=batch_size,
                               optimizer=opt, accumulation_steps=accum, seed=21)
            report = train(g, cfg)
            return report, g

        small, g_small = run(8, 4)
        large, g_large = run(32, 1)
        for ls, ll in zip(small.losses, large.losses):
            assert abs(ls - ll) <= 1e-6
        for ps, pl in zip(g_small.parameters(), g_large.parameters()):
            assert ps.key == pl.key
            assert np.max(np.abs(ps.value - pl.value)) <= 1e-6


class TestEvaluate:
    def build_eval(self, reg, with_accuracy=False, zero_final=True, classes=4):
        g = Graph(reg)
        g.add("ArraySource", "data", {"features": 3})
        g.add("Linear", "lin", {"in_features": 3, "out_features": classes,
                                "init": "zeros" if zero_final else "glorot"})
        g.add("LogSoftmax", "sm", {"features": classes})
        g.add("NllLoss", "loss", {"num_classes": classes})
        g.connect("data.x", "lin", "x")
        g.connect("lin.y", "sm", "x")
        g.connect("sm.y", "loss", "log_probs")
        g.connect("data.labels", "loss", "labels")
        g.add_sink("loss.loss")
        if with_accuracy:
            g.add("Accuracy", "acc", {"num_classes": classes})
            g.connect("sm.y", "acc", "log_probs")
            g.connect("data.labels", "acc", "labels")
            g.add_sink("acc.accuracy")
        g.validate()
        return g

    def test_untrained_uniform_model_gives_ln_k(self, reg):
        g = self.build_eval(reg, classes=4)
        rng = np.random.default_rng(0)
        attach_arrays(g.instances["data"], {
            "x": rng.normal(size=(10, 3)).astype(np.float32),
            "labels": rng.integers(0, 4, size=(10, 1)).astype(np.float32)})
        metrics = evaluate(g, ActionConfig("eval", batch_size=4))
        assert abs(metrics["loss"] - math.log(4.0)) < 1e-5

    def test_eval_is_pure_and_deterministic(self, reg):
        g = self.build_eval(reg, zero_final=False)
        rng = np.random.default_rng(1)
        attach_arrays(g.instances["data"], {
            "x": rng.normal(size=(9, 3)).astype(np.float32),
            "labels": rng.integers(0, 4, size=(9, 1)).astype(np.float32)})
        before = parameter_hash(g.parameters())
        one = evaluate(g, ActionConfig("eval", batch_size=4))
        two = evaluate(g, ActionConfig("eval", batch_size=4))
        assert one == two
        assert parameter_hash(g.parameters()) == before

    def test_partial_batch_weighting(self, reg):
        g = self.build_eval(reg, zero_final=False)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(10, 3)).astype(np.float32)
        y = rng.integers(0, 4, size=(10, 1)).astype(np.float32)
        attach_arrays(g.instances["data"], {"x": x, "labels": y})
        split = evaluate(g, ActionConfig("eval", batch_size=4))
        whole = evaluate(g, ActionConfig("eval", batch_size=10))
        assert abs(split["loss"] - whole["loss"]) < 1e-6

    def test_accuracy_reaches_one_on_separable_data(self, reg):
        g = build_classifier(reg, seed=1)
        x, y = blob_arrays(64, seed=3, spread=0.2)  # well separated
        attach_arrays(g.instances["data"], {"x": x, "labels": y})
        train(g, ActionConfig("train", max_steps=300, batch_size=32, optimizer=sgd(0.2)))

        e = Graph(reg)
        e.add("ArraySource", "data", {"features": 2})
        for iid in ("mlp", "sm"):
            e.attach(g.instances[iid])
        e.add("Accuracy", "acc", {"num_classes": 2})
        e.add("NllLoss", "loss", {"num_classes": 2})
        e.connect("data.x", "mlp", "x")
        e.connect("mlp.y", "sm", "x")
        e.connect("sm.y", "acc", "log_probs")
        e.connect("data.labels", "acc", "labels")
        e.connect("sm.y", "loss", "log_probs")
        e.connect("data.labels", "loss", "labels")
        e.add_sink("acc.accuracy")
        e.add_sink("loss.loss")
        e.validate()
        attach_arrays(e.instances["data"], {"x": x, "labels": y})
        metrics = evaluate(e, ActionConfig("eval", batch_size=16))
        assert metrics["accuracy"] == 1.0

    def test_empty_data_exhausts(self, reg):
        g = self.build_eval(reg)
        attach_arrays(g.instances["data"], {"x": np.zeros((0, 3), np.float32),
                                            "labels": np.zeros((0, 1), np.float32)})
        with pytest.raises(errors.DataExhaustedError):
            evaluate(g, ActionConfig("eval", batch_size=4))


class TestInfer:
    def build(self, reg, rows=10):
        g = Graph(reg)
        g.add("ArraySource", "data", {"features": 2})
        g.add("MLPBlock", "mlp", {"in_features": 2, "hidden": 4, "out_features": 3})
        g.connect("data.x", "mlp", "x")
        g.add_sink("mlp.y")
        g.validate()
        rng = np.random.default_rng(4)
        attach_arrays(g.instances["data"], {
            "x": rng.normal(size=(rows, 2)).astype(np.float32),
            "labels": np.zeros((rows, 1), np.float32)})
        return g

    def test_dump_round_trips_bitwise(self, reg, tmp_path):
        g = self.build(reg)
        out = tmp_path / "dump.bin"
        infer(g, ActionConfig("infer", batch_size=4), out)
        entries = read_dump(out)
        assert set(entries) == {"mlp.y/00000", "mlp.y/00001", "mlp.y/00002"}
        from semaflow.backend import forward
        batch = {"data.x": g.instances["data"].source_arrays["x"][:4],
                 "data.labels": g.instances["data"].source_arrays["labels"][:4]}
        sinks, _ = forward(g, batch)
        assert entries["mlp.y/00000"].tobytes() == sinks[("mlp", "y")].data.tobytes()

    def test_empty_dump_has_valid_header(self, reg, tmp_path):
        g = self.build(reg, rows=0)
        out = tmp_path / "empty.bin"
        infer(g, ActionConfig("infer", batch_size=4), out)
        assert out.read_bytes()[:4] == b"NMTD"
        assert read_dump(out) == {}

    def test_repeat_runs_byte_identical(self, reg, tmp_path):
        g = self.build(reg)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        infer(g, ActionConfig("infer", batch_size=4), a)
        infer(g, ActionConfig("infer", batch_size=4), b)
        assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()


class TestCheckpoint:
    def test_save_load_save_bitwise(self, reg, tmp_path):
        g = build_classifier(reg, seed=9)
        opt = Optimizer(adam(0.01), g.parameters())
        p1, p2 = tmp_path / "one.ck", tmp_path / "two.ck"
        write_checkpoint(p1, g, opt, step=17)
        ckpt = read_checkpoint(p1)
        assert ckpt.step == 17 and ckpt.seed == 9
        g2 = build_classifier(reg, seed=9)
        opt2 = Optimizer(adam(0.01), g2.parameters())
        apply_checkpoint(g2, opt2, ckpt)
        write_checkpoint(p2, g2, opt2, step=17)
        assert p1.read_bytes() == p2.read_bytes()

    def test_seed_mismatch_rejected(self, reg, tmp_path):
        g = build_classifier(reg, seed=9)
        path = tmp_path / "x.ck"
        write_checkpoint(path, g, None, step=0)
        other = build_classifier(reg, seed=10)
        with pytest.raises(errors.CheckpointFormatError):
            apply_checkpoint(other, None, read_checkpoint(path))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ck"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(errors.CheckpointFormatError):
            read_checkpoint(path)

    @pytest.mark.parametrize("opt", [sgd(0.05, momentum=0.9), adam(0.01)],
                             ids=["sgd_momentum", "adam"])
    def test_resume_matches_uninterrupted(self, reg, tmp_path, opt):
        x, y = blob_arrays(64, seed=13)
        ckpt_path = tmp_path / "resume_60.ck"

        g_full = build_classifier(reg, seed=4)
        attach_arrays(g_full.instances["data"], {"x": x, "labels": y})
        cb = Callback("checkpoint", interval_steps=60,
                      target=str(tmp_path / "resume_{step}.ck"))
        full = train(g_full, ActionConfig("train", max_steps=120, batch_size=16,
                                          optimizer=opt, seed=2), callbacks=[cb])

        g_resume = build_classifier(reg, seed=4)
        attach_arrays(g_resume.instances["data"], {"x": x, "labels": y})
        resumed = train(g_resume, ActionConfig("train", max_steps=120, batch_size=16,
                                               optimizer=opt, seed=2),
                        resume_from=ckpt_path)
        assert resumed.steps == 60
        for a, b in zip(full.losses[60:], resumed.losses):
            assert abs(a - b) <= 1e-6
        assert full.param_hash == resumed.param_hash


class TestCallbacks:
    def test_loss_log_fires_on_interval(self, reg):
        ctx = {"last_loss": 0.5, "graph": None, "eval_cfg": None}
        cbs = [Callback("loss_log", interval_steps=10)]
        assert run_callbacks(30, cbs, ctx)[0].payload == "step=30 loss=0.500000"
        assert run_callbacks(7, cbs, ctx) == []

    def test_checkpoint_io_failure_is_event_not_crash(self, reg, tmp_path):
        g = build_classifier(reg)
        x, y = blob_arrays(32)
        attach_arrays(g.instances["data"], {"x": x, "labels": y})
        bad = Callback("checkpoint", interval_steps=1,
                       target=str(tmp_path / "missing_dir" / "x.ck"))
        report = train(g, ActionConfig("train", max_steps=2, batch_size=8,
                                       optimizer=sgd(0.1)), callbacks=[bad])
        assert report.steps == 2
        assert all(e.kind == "error" for e in report.events)

    def test_evaluator_callback_is_pure(self, reg):
        g = build_classifier(reg, seed=6)
        x, y = blob_arrays(32)
        attach_arrays(g.instances["data"], {"x": x, "labels": y})

        e = Graph(reg)
        e.add("ArraySource", "data", {"features": 2})
        for iid in ("mlp", "sm", "loss"):
            e.attach(g.instances[iid])
        e.connect("data.x", "mlp", "x")
        e.connect("mlp.y", "sm", "x")
        e.connect("sm.y", "loss", "log_probs")
        e.connect("data.labels", "loss", "labels")
        e.add_sink("loss.loss")
        e.validate()
        attach_arrays(e.instances["data"], {"x": x, "labels": y})

        cb = Callback("evaluator", interval_steps=3, target=e)
        report = train(g, ActionConfig("train", max_steps=6, batch_size=8,
                                       optimizer=sgd(0.05)), callbacks=[cb])
        evals = [ev for ev in report.events if ev.kind == "evaluator"]
        assert len(evals) == 2
        assert all("loss" in ev.payload for ev in evals)

    def test_adopt_parameters_shares_tensors(self, reg):
        g = build_classifier(reg, seed=8)
        e = build_classifier(reg, seed=8)
        n = adopt_parameters(e, g)
        assert n > 0
        w_train = g.instances["mlp"].children["l0"].state["W"]
        w_eval = e.instances["mlp"].children["l0"].state["W"]
        assert w_train is w_eval


class TestActionConfigParsing:
    def test_round_trip(self):
        cfg = action_config_from_doc({
            "action": "train", "max_steps": 10, "batch_size": 4,
            "optimizer": {"kind": "adam", "lr": 0.01}, "accumulation_steps": 2,
            "seed": 5})
        assert cfg.optimizer.kind == "adam" and cfg.accumulation_steps == 2

    def test_unknown_key_rejected(self):
        with pytest.raises(errors.SchemaError):
            action_config_from_doc({"action": "train", "nonsense": 1})

    def test_bad_optimizer_rejected(self):
        with pytest.raises(errors.SchemaError):
            action_config_from_doc({"action": "train", "optimizer": {"kind": "lbfgs"}})

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(errors.SchemaError):
            ActionConfig("train", optimizer=OptimizerConfig("sgd", 0.0))
