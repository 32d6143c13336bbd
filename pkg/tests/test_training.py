"""Training loop, evaluation and late-fusion weight tuning."""

import hashlib
from dataclasses import replace

import numpy as np
import pytest

from lczlab import ops
from lczlab.data import LabelSpace, generate_synthetic
from lczlab.errors import ConfigurationError, DataError, DivergenceError
from lczlab.models import ModelSpec, build
from lczlab.tensor import Tensor
from lczlab.training import (
    DEFAULT_ALPHA_GRID,
    TrainConfig,
    TrainLog,
    evaluate,
    train,
    tune_alpha,
)

SPACE4 = LabelSpace.original(4)


@pytest.fixture(scope="module")
def splits():
    return generate_synthetic(num_classes=4, per_class=10, seed=5)


def fm1(seed=0, variant="FM1"):
    return build(ModelSpec(variant, label_space=SPACE4), seed=seed)


def checksum(net):
    h = hashlib.sha256()
    for p in net.parameters():
        h.update(p.data.tobytes())
    for _, b in net.named_buffers():
        h.update(b.tobytes())
    return h.hexdigest()


class FixedBranches:
    """Stand-in for an FM4 network whose branch probabilities are given."""

    def __init__(self, net, p, q):
        self.net, self.p, self.q = net, p, q
        self.calls = 0
        original = net.combine

        def counting(p, q, alpha=None):
            self.calls += 1
            return original(p, q, alpha)

        net.branch_probs = lambda sar, msi: (Tensor(self.p[: len(sar)]), Tensor(self.q[: len(sar)]))
        net.combine = counting


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.optimizer, c.learning_rate, c.epochs, c.dropout_rate) == ("adam", 0.0001, 100, 0.2)
        assert c.loss == "categorical_crossentropy" and c.batch_size == 32

    @pytest.mark.parametrize(
        "kwargs",
        [{"optimizer": "sgd"}, {"learning_rate": 0}, {"epochs": -1}, {"batch_size": 0}, {"dropout_rate": 1.0}, {"loss": "mse"}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)


class TestTrain:
    def test_zero_epochs_unchanged(self, splits):
        net = fm1()
        before = checksum(net)
        out, log = train(net, splits, TrainConfig(epochs=0))
        assert out is net and len(log) == 0 and checksum(net) == before

    def test_empty_train_split(self, splits):
        with pytest.raises(DataError):
            train(fm1(), replace(splits, train=splits.train[:0]), TrainConfig(epochs=1))

    def test_one_entry_per_epoch(self, splits):
        _, log = train(fm1(), splits, TrainConfig(epochs=3, batch_size=8))
        assert log.column("epoch") == [1, 2, 3]
        assert all(0 <= a <= 1 for a in log.column("val_acc"))
        assert log.best_epoch in (1, 2, 3)

    def test_deterministic(self, splits):
        cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
        (a, la), (b, lb) = train(fm1(), splits, cfg), train(fm1(), splits, cfg)
        assert checksum(a) == checksum(b)
        strip = lambda log: [replace(e, seconds=0.0) for e in log.entries]  # noqa: E731
        assert strip(la) == strip(lb)

    def test_loss_mostly_decreasing(self, splits):
        _, log = train(fm1(1), splits, TrainConfig(epochs=6, batch_size=8, learning_rate=1e-3))
        losses = log.column("train_loss")
        assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 4

    def test_on_epoch_stops(self, splits):
        _, log = train(fm1(), splits, TrainConfig(epochs=10, batch_size=8), on_epoch=lambda r: r.epoch == 2)
        assert len(log) == 2

    def test_early_stopping(self, splits):
        _, log = train(fm1(), splits, TrainConfig(epochs=50, batch_size=8, early_stop_patience=1))
        assert len(log) < 50

    def test_best_validation_weights_restored(self, splits):
        net, log = train(fm1(2), splits, TrainConfig(epochs=4, batch_size=8, learning_rate=1e-3))
        best = max(log.column("val_acc"))
        cm = evaluate(net, splits.val, stats=splits.stats)
        assert np.trace(cm.counts) / cm.total == pytest.approx(best)

    def test_divergence_reports_epoch_and_batch(self, splits):
        net = fm1()
        net.head.out.weight.data[...] = np.nan
        with pytest.raises(DivergenceError, match="epoch 1.*batch 1"):
            train(net, splits, TrainConfig(epochs=1, batch_size=8))

    def test_labels_outside_model_space(self):
        ds = generate_synthetic(num_classes=6, per_class=4, seed=0)
        with pytest.raises(ConfigurationError):
            train(fm1(), ds, TrainConfig(epochs=1))

    def test_log_csv(self, splits, tmp_path):
        _, log = train(fm1(), splits, TrainConfig(epochs=2, batch_size=8))
        log.to_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc,seconds" and len(lines) == 3
        log.to_csv(tmp_path / "nosec.csv", include_seconds=False)
        assert not (tmp_path / "nosec.csv").read_text().splitlines()[0].endswith("seconds")
        assert len(TrainLog()) == 0


class TestEvaluate:
    def _constant(self, net, cls):
        def forward(sar, msi):
            out = np.zeros((len(sar), net.num_classes), np.float32)
            out[:, cls] = 1
            return Tensor(out)

        net.forward = forward
        return net

    def test_constant_predictor(self, splits):
        cm = evaluate(self._constant(fm1(), 0), splits.test)
        assert cm.counts[:, 1:].sum() == 0 and cm.counts[:, 0].sum() == len(splits.test)

    def test_perfect_predictor(self, splits):
        net = fm1()
        labels = iter([np.asarray(splits.test.labels)])

        def forward(sar, msi):
            return Tensor(ops.one_hot(next(labels)[: len(sar)], 4))

        net.forward = forward
        cm = evaluate(net, splits.test, batch_size=len(splits.test))
        assert not (cm.counts - np.diag(np.diag(cm.counts))).any()
        assert np.diag(cm.counts).tolist() == np.bincount(splits.test.labels, minlength=4).tolist()

    def test_total_and_no_mutation(self, splits):
        net = fm1()
        before = checksum(net)
        cm = evaluate(net, splits.test, stats=splits.stats)
        assert cm.total == len(splits.test) and checksum(net) == before and net.mode == "infer"

    def test_merged_space_from_original_model(self):
        ds = generate_synthetic(num_classes=17, per_class=7, seed=0)
        net = build(ModelSpec("FM1a"))
        cm = evaluate(net, ds.test, LabelSpace.merged(), ds.stats)
        assert cm.counts.shape == (8, 8) and cm.total == len(ds.test)

    def test_incompatible_space(self, splits):
        net = build(ModelSpec("FM1a", label_space=LabelSpace.merged()))
        with pytest.raises(ConfigurationError):
            evaluate(net, splits.test, LabelSpace())

    def test_empty_split(self, splits):
        with pytest.raises(DataError):
            evaluate(fm1(), splits.test[:0])


class TestTuneAlpha:
    def setup_method(self):
        self.ds = generate_synthetic(num_classes=4, per_class=10, seed=1)
        self.y = np.asarray(self.ds.val.labels)
        self.net = build(ModelSpec("FM4", label_space=SPACE4))

    def test_unet_dominates(self):
        # U-Net barely right, CNN confidently wrong: any weight on the CNN costs accuracy
        p = np.full((len(self.y), 4), 0.24)
        p[np.arange(len(self.y)), self.y] = 0.28
        q = ops.one_hot((self.y + 1) % 4, 4)
        FixedBranches(self.net, p, q)
        assert tune_alpha(self.net, self.ds.val, grid=[0, 1]) == 1.0
        assert tune_alpha(self.net, self.ds.val) == 1.0

    def test_ties_go_to_smaller_alpha(self):
        # a confident U-Net already wins at alpha 0.6, so larger values tie
        p = ops.one_hot(self.y, 4) * 0.7 + 0.075
        q = ops.one_hot((self.y + 1) % 4, 4) * 0.7 + 0.075
        FixedBranches(self.net, p, q)
        assert tune_alpha(self.net, self.ds.val) == 0.6

    def test_identical_branches_tie_to_minimum(self):
        p = np.random.default_rng(1).dirichlet(np.ones(4), size=len(self.y))
        FixedBranches(self.net, p, p.copy())
        assert tune_alpha(self.net, self.ds.val, grid=[0.7, 0.3, 0.9]) == 0.3

    def test_default_grid_evaluated_once_each(self):
        p = np.random.default_rng(2).dirichlet(np.ones(4), size=len(self.y))
        stub = FixedBranches(self.net, p, p[::-1].copy())
        tune_alpha(self.net, self.ds.val)
        assert len(DEFAULT_ALPHA_GRID) == 11 and stub.calls == 11
        assert DEFAULT_ALPHA_GRID == (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

    @pytest.mark.parametrize("grid", [[], [1.2], [-0.1, 0.5]])
    def test_bad_grid(self, grid):
        with pytest.raises(ConfigurationError):
            tune_alpha(self.net, self.ds.val, grid=grid)

    def test_requires_late_fusion(self):
        with pytest.raises(ConfigurationError):
            tune_alpha(fm1(), self.ds.val)
