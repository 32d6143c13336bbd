"""Network construction, forward semantics, checkpoints and gradient flow."""

import json

import numpy as np
import pytest

from gradcheck import check_network
from lczlab import ops
from lczlab.data import LabelSpace
from lczlab.errors import ConfigurationError, DataError
from lczlab.models import (
    VARIANTS,
    LateFusionNet,
    ModelSpec,
    build,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from lczlab.optim import adam_step
from lczlab.preprocess import ScaleSpec
from lczlab.tensor import Tape, Tensor

ATTENTION = ("sar_self_attn", "msi_self_attn", "sar_cross_attn", "msi_cross_attn")


def batch(seed, n=2, size=32, classes=17):
    rng = np.random.default_rng(seed)
    sar = rng.normal(size=(n, 8, size, size)).astype(np.float32)
    msi = rng.normal(size=(n, 10, size, size)).astype(np.float32)
    return sar, msi, ops.one_hot(rng.integers(0, classes, n), classes)


def shapes(net):
    return {n: p.shape for n, p in net.named_parameters()}


class TestSpec:
    def test_heads_divisibility(self):
        assert ModelSpec("FM2", attention_heads=8).per_head_dim == 4
        with pytest.raises(ConfigurationError):
            ModelSpec("FM2", attention_heads=5)

    def test_default_heads(self):
        assert ModelSpec("FM2b").attention_heads == 8
        assert ModelSpec("FM1").per_head_dim is None

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"variant": "FM5"},
            {"variant": "FM1", "attention_heads": 4},
            {"variant": "FM2", "scale_spec": ScaleSpec()},
            {"variant": "FM1", "alpha": 0.3},
            {"variant": "FM4", "alpha": 1.5},
            {"variant": "FM1", "num_classes": 8},
        ],
    )
    def test_inconsistent(self, kwargs):
        with pytest.raises(ConfigurationError):
            ModelSpec(**kwargs)

    def test_variant_case_insensitive(self):
        assert ModelSpec("fm3b").variant == "FM3b"

    def test_json_round_trip(self):
        for spec in (ModelSpec("FM3", True, LabelSpace.merged()), ModelSpec("FM4", alpha=0.7), ModelSpec("FM2", attention_heads=4)):
            assert ModelSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("grouping", [False, True])
    def test_output_rows_are_distributions(self, variant, grouping):
        net = build(ModelSpec(variant, band_grouping=grouping), seed=0).eval()
        sar, msi, _ = batch(0, n=3)
        out = net(sar, msi).data
        assert out.shape == (3, 17)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert (out >= 0).all()

    def test_merged_output_width(self):
        net = build(ModelSpec("FM1", label_space=LabelSpace.merged())).eval()
        assert net(*batch(1)[:2]).shape == (2, 8)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_infer_deterministic(self, variant):
        net = build(ModelSpec(variant), seed=1).eval()
        sar, msi, _ = batch(2)
        assert np.array_equal(net(sar, msi).data, net(sar, msi).data)

    def test_train_mode_uses_dropout(self):
        net = build(ModelSpec("FM1"), seed=1).train()
        sar, msi, _ = batch(2)
        assert not np.array_equal(net(sar, msi).data, net(sar, msi).data)

    def test_zero_sar_is_finite(self):
        for mode in ("train", "infer"):
            net = build(ModelSpec("FM1"), seed=3)
            net.mode = mode
            sar, msi, _ = batch(3)
            assert np.isfinite(net(np.zeros_like(sar), msi).data).all()

    @pytest.mark.parametrize("bad", [np.nan, np.inf, 2e3])
    def test_unnormalised_input(self, bad):
        net = build(ModelSpec("FM1")).eval()
        sar, msi, _ = batch(4)
        sar[0, 0, 0, 0] = bad
        with pytest.raises(DataError):
            net(sar, msi)

    def test_wrong_band_count(self):
        net = build(ModelSpec("FM1")).eval()
        sar, msi, _ = batch(4)
        with pytest.raises(DataError):
            net(sar[:, :7], msi)


class TestLateFusion:
    def setup_method(self):
        self.sar, self.msi, _ = batch(5, n=4)

    def test_alpha_one_is_unet(self):
        net = build(ModelSpec("FM4", alpha=1.0), seed=2).eval()
        p, _ = net.branch_probs(self.sar, self.msi)
        assert np.array_equal(net(self.sar, self.msi).data, p.data)

    def test_alpha_half_is_mean(self):
        net = build(ModelSpec("FM4", alpha=0.5), seed=2).eval()
        p, q = net.branch_probs(self.sar, self.msi)
        np.testing.assert_allclose(net(self.sar, self.msi).data, (p.data + q.data) / 2, rtol=0, atol=1e-7)

    def test_convex_combination(self):
        net = build(ModelSpec("FM4"), seed=3).eval()
        p, q = net.branch_probs(self.sar, self.msi)
        lo, hi = np.minimum(p.data, q.data), np.maximum(p.data, q.data)
        for alpha in np.linspace(0, 1, 11):
            out = net.combine(p, q, alpha).data
            assert (out >= lo - 1e-7).all() and (out <= hi + 1e-7).all()

    def test_input_size_fixed_at_build(self):
        net = build(ModelSpec("FM4"), input_size=32).eval()
        with pytest.raises(DataError):
            net(*batch(0, size=16)[:2])
        with pytest.raises(ConfigurationError):
            build(ModelSpec("FM4"), input_size=30)


class TestPredict:
    def test_examples(self):
        assert predict(np.array([[0.1, 0.8, 0.1]])).tolist() == [1]
        assert predict(np.array([[0.5, 0.5]])).tolist() == [0]

    def test_monotone_logit_rescaling(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(50, 17))
        base = predict(ops.softmax(Tensor(z, dtype=np.float64), axis=-1))
        for f in (lambda v: 3 * v + 1, np.exp, lambda v: v**3):
            assert np.array_equal(predict(ops.softmax(Tensor(f(z), dtype=np.float64), axis=-1)), base)


class TestTopology:
    def test_single_branch_variants_are_subsets(self):
        full = shapes(build(ModelSpec("FM1")))
        for v, prefix in (("FM1a", "pixel."), ("FM1b", None)):
            sub = shapes(build(ModelSpec(v)))
            assert set(sub) < set(full)
            for name, shape in sub.items():
                if not name.startswith("head."):
                    assert full[name] == shape
        assert not any(n.startswith(("sar_branch", "msi_branch", "fusion")) for n in shapes(build(ModelSpec("FM1a"))))
        assert not any(n.startswith("pixel") for n in shapes(build(ModelSpec("FM1b"))))

    @pytest.mark.parametrize("pair", [("FM2", "FM1"), ("FM2b", "FM1b")])
    def test_attention_added_on_top(self, pair):
        with_attn, base = (shapes(build(ModelSpec(v))) for v in pair)
        stripped = {n: s for n, s in with_attn.items() if not n.startswith(ATTENTION)}
        assert stripped == base
        assert len(with_attn) - len(stripped) == 4 * 8

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_grouping_changes_parameter_count_only(self, variant):
        a, b = build(ModelSpec(variant)).eval(), build(ModelSpec(variant, band_grouping=True)).eval()
        assert a.num_parameters() != b.num_parameters()
        sar, msi, _ = batch(6)
        oa, ob = a(sar, msi).data, b(sar, msi).data
        assert oa.shape == ob.shape
        np.testing.assert_allclose(ob.sum(axis=1), 1.0, atol=1e-6)

    def test_multiscale_widens_inputs(self):
        fm1, fm3 = shapes(build(ModelSpec("FM1"))), shapes(build(ModelSpec("FM3")))
        assert fm3["pixel.blocks.0.conv.weight"][1] == len(ScaleSpec().kernel_sizes) * fm1["pixel.blocks.0.conv.weight"][1]

    def test_seed_controls_initialisation(self):
        a, b, c = (build(ModelSpec("FM1"), seed=s) for s in (0, 0, 1))
        pa, pb, pc = (np.concatenate([p.data.ravel() for p in n.parameters()]) for n in (a, b, c))
        assert np.array_equal(pa, pb) and not np.array_equal(pa, pc)


class TestGradientFlow:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_every_parameter_receives_gradient(self, variant):
        for seed in range(5):
            net = build(ModelSpec(variant), seed=seed)
            sar, msi, y = batch(seed)
            with Tape() as tape:
                loss = net.loss(sar, msi, y)
            tape.backward(loss)
            for name, p in net.named_parameters():
                assert p.grad is not None and np.any(p.grad), f"{variant} seed {seed}: {name}"

    def test_key_bias_gradient_is_rounding_noise(self):
        # softmax ignores a constant shift of the scores, so the key bias has a true gradient of zero
        net = build(ModelSpec("FM2"), seed=0)
        sar, msi, y = batch(0)
        with Tape() as tape:
            loss = net.loss(sar, msi, y)
        tape.backward(loss)
        grads = dict(net.named_parameters())
        for block in ATTENTION:
            bk = np.abs(grads[f"{block}.params.bk"].grad).max()
            bq = np.abs(grads[f"{block}.params.bq"].grad).max()
            assert bk < 1e-3 * bq

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_single_step_descent(self, variant):
        net = build(ModelSpec(variant), seed=7).train()
        net.dropout_rate = 0.2
        sar, msi, y = batch(7, n=1)

        def loss_value():
            net.reseed(7)  # same dropout masks before and after the step
            return net.loss(sar, msi, y)

        with Tape() as tape:
            before = loss_value()
        tape.backward(before)
        adam_step(net.parameters(), lr=1e-4)
        assert loss_value().item() < before.item()

    @pytest.mark.parametrize("variant", ["FM1", "FM2", "FM3b", "FM4"])
    def test_finite_difference_sweep(self, variant):
        for seed in range(2):
            err, _ = check_network(variant, seed, coords=12)
            assert err <= 1e-4


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["FM1", "FM2b", "FM3a", "FM4"])
    def test_round_trip(self, tmp_path, variant):
        net = build(ModelSpec(variant, band_grouping=True, label_space=LabelSpace.merged()), seed=4).eval()
        save_checkpoint(net, tmp_path / "ck")
        back = load_checkpoint(tmp_path / "ck")
        assert back.spec == net.spec and back.mode == "infer"
        sar, msi, _ = batch(8)
        assert np.array_equal(back(sar, msi).data, net(sar, msi).data)

    def test_alpha_persisted(self, tmp_path):
        net = build(ModelSpec("FM4", alpha=0.3))
        save_checkpoint(net, tmp_path)
        back = load_checkpoint(tmp_path)
        assert isinstance(back, LateFusionNet) and back.alpha == 0.3

    def test_truncated_params(self, tmp_path):
        save_checkpoint(build(ModelSpec("FM1a")), tmp_path)
        blob = (tmp_path / "params.bin").read_bytes()
        (tmp_path / "params.bin").write_bytes(blob[:-8])
        with pytest.raises(ConfigurationError):
            load_checkpoint(tmp_path)

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(build(ModelSpec("FM1")), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["spec"]["band_grouping"] = True
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ConfigurationError):
            load_checkpoint(tmp_path)
