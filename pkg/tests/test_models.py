"""Architecture forwards, the MoE head, and checkpoint round-trips."""

import numpy as np
import pytest

from poolforge import Tensor, grad_check
from poolforge.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from poolforge.errors import ConfigError, DataError
from poolforge.models import (
    ARCHITECTURES,
    ModelConfig,
    build_params,
    forward,
    init_moe,
    moe_head,
    multilabel_loss,
    top_k_predictions,
)
from poolforge.tensor import reduce_sum


def _toy_config(architecture, **overrides):
    base = dict(
        architecture=architecture,
        labels=5,
        feature_video=8,
        feature_audio=4,
        clusters=2,
        hidden=16,
        heads=2,
        projected_size=3,
        experts=2,
        frames=6,
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestModelConfig:
    def test_rejects_unknown_architecture(self):
        with pytest.raises(ConfigError):
            _toy_config("netboW")

    def test_rejects_nonpositive_extent(self):
        with pytest.raises(ConfigError):
            _toy_config("baseline_netvlad", labels=0)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            _toy_config("attention_enhanced", feature_video=9)

    def test_rejects_wide_projection(self):
        with pytest.raises(ConfigError):
            _toy_config("second_order_fa", projected_size=4)

    def test_dict_round_trip(self):
        config = _toy_config("attention_netvlad")
        assert ModelConfig.from_dict(config.to_dict()) == config

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"architecture": "baseline_netvlad",
                                   "labels": 3, "dropout": 0.5})


class TestMoeHead:
    def test_suppressed_dummy_equals_plain_sigmoid(self):
        rng = np.random.default_rng(0)
        params = init_moe(rng, width=8, labels=4, experts=1)
        params.gate_weight.data[...] = 0.0
        bias = params.gate_bias.data.reshape(4, 2)
        bias[:, 0] = 0.0
        bias[:, 1] = -1000.0  # dummy slot effectively silenced
        v = Tensor(rng.standard_normal(8))
        got = moe_head(v, params, experts=1, labels=4).data
        logits = v.data @ params.expert_weight.data + params.expert_bias.data
        want = 1.0 / (1.0 + np.exp(-logits))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_outputs_are_probabilities(self):
        rng = np.random.default_rng(1)
        params = init_moe(rng, width=6, labels=7, experts=3)
        for _ in range(10_000):
            out = moe_head(Tensor(rng.standard_normal(6) * 5.0), params,
                           experts=3, labels=7).data
            assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_grad_check(self):
        rng = np.random.default_rng(2)
        params = init_moe(rng, width=8, labels=5, experts=2)
        v = Tensor(rng.standard_normal(8))
        weights = Tensor(rng.standard_normal(5))

        def loss(t):
            return reduce_sum(moe_head(t, params, experts=2, labels=5) * weights)

        assert grad_check(loss, v, tol=1e-4).passed


class TestForward:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_output_is_label_probabilities(self, arch):
        rng = np.random.default_rng(3)
        config = _toy_config(arch)
        params = build_params(config, rng)
        frames = Tensor(rng.standard_normal((6, 12)))
        out = forward(params, frames)
        assert out.shape == (5,)
        assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_permutation_invariance(self, arch):
        rng = np.random.default_rng(4)
        params = build_params(_toy_config(arch), rng)
        frames = rng.standard_normal((7, 12))
        base = forward(params, Tensor(frames)).data
        for _ in range(5):
            got = forward(params, Tensor(frames[rng.permutation(7)])).data
            assert np.max(np.abs(got - base)) < 1e-9

    def test_permutation_invariance_in_training_mode(self):
        # Training mutates running statistics, so compare runs launched from
        # identical buffer state.
        rng = np.random.default_rng(5)
        params = build_params(_toy_config("attention_enhanced"), rng)
        frames = rng.standard_normal((6, 12))
        snapshot = {k: v.copy() for k, v in params.named_buffers().items()}
        base = forward(params, Tensor(frames), training=True).data
        for name, arr in params.named_buffers().items():
            arr[...] = snapshot[name]
        got = forward(params, Tensor(frames[rng.permutation(6)]),
                      training=True).data
        assert np.max(np.abs(got - base)) < 1e-9

    def test_identity_encoders_reduce_to_baseline(self):
        # Zeroing the attention output projection and the feed-forward output
        # layer makes both encoder blocks exact identities via their residual
        # connections, collapsing attention_enhanced onto the baseline.
        rng = np.random.default_rng(6)
        config = _toy_config("attention_enhanced")
        att = build_params(config, rng)
        for stack in (att.video, att.audio):
            for enc in (stack.frame_encoder, stack.cluster_encoder):
                enc.wo.data[...] = 0.0
                enc.ff_w2.data[...] = 0.0
                enc.ff_b2.data[...] = 0.0

        base = build_params(_toy_config("baseline_netvlad"),
                            np.random.default_rng(99))
        for src_stack, dst_stack in ((att.video, base.video),
                                     (att.audio, base.audio)):
            for name, tensor in src_stack.vlad.tensors().items():
                dst_stack.vlad.tensors()[name].data[...] = tensor.data
        base.projection_weight.data[...] = att.projection_weight.data
        base.projection_bias.data[...] = att.projection_bias.data
        for name, tensor in att.gating.tensors().items():
            base.gating.tensors()[name].data[...] = tensor.data
        for name, tensor in att.moe.tensors().items():
            base.moe.tensors()[name].data[...] = tensor.data

        frames = Tensor(rng.standard_normal((6, 12)))
        out_att = forward(att, frames).data
        out_base = forward(base, frames).data
        assert np.array_equal(out_att, out_base)

    def test_second_order_pooled_width(self):
        config = _toy_config("second_order_fa")
        params = build_params(config, np.random.default_rng(7))
        c, fp = config.clusters, config.projected_size
        want = sum(
            c * f + c * (1 + f + fp * fp)
            for f in (config.feature_video, config.feature_audio)
        )
        assert params.projection_weight.shape[0] == want

    def test_loss_is_finite_and_positive(self):
        rng = np.random.default_rng(8)
        params = build_params(_toy_config("baseline_netvlad"), rng)
        probs = forward(params, Tensor(rng.standard_normal((6, 12))))
        targets = np.zeros(5)
        targets[[1, 3]] = 1.0
        loss = multilabel_loss(probs, targets)
        assert np.isfinite(loss.item()) and loss.item() > 0.0

    def test_wrong_width_rejected(self):
        params = build_params(_toy_config("baseline_netvlad"),
                              np.random.default_rng(9))
        from poolforge.errors import DimensionError
        with pytest.raises(DimensionError):
            forward(params, Tensor(np.ones((4, 13))))


class TestCheckpoint:
    def _checkpoint_of(self, params, step=0, rng_state=None):
        return Checkpoint(
            config=params.config.to_dict(),
            step=step,
            rng_state=rng_state,
            params={k: v.data for k, v in params.named_tensors().items()},
            buffers=params.named_buffers(),
        )

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_save_load_forward_is_bit_identical(self, arch, tmp_path):
        rng = np.random.default_rng(10)
        config = _toy_config(arch)
        params = build_params(config, rng)
        frames = Tensor(rng.standard_normal((6, 12)))
        # Touch the mutable statistics so they are not at init values.
        forward(params, frames, training=True)
        before = forward(params, frames).data

        path = tmp_path / "model.ckpt"
        save_checkpoint(path, self._checkpoint_of(params, step=17))

        fresh = build_params(config, np.random.default_rng(999))
        loaded = load_checkpoint(path)
        assert loaded.step == 17
        fresh.load_arrays(loaded.params, loaded.buffers)
        after = forward(fresh, frames).data
        assert np.array_equal(before, after)

    def test_identical_state_serializes_to_identical_bytes(self, tmp_path):
        params = build_params(_toy_config("attention_netvlad"),
                              np.random.default_rng(11))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, self._checkpoint_of(params))
        save_checkpoint(b, self._checkpoint_of(params))
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        params = build_params(_toy_config("baseline_netvlad"),
                              np.random.default_rng(12))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, self._checkpoint_of(params))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        params = build_params(_toy_config("baseline_netvlad"),
                              np.random.default_rng(13))
        ckpt = self._checkpoint_of(params)
        ckpt.params["moe/gate_bias"] = np.zeros(3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, ckpt)
        fresh = build_params(_toy_config("baseline_netvlad"),
                             np.random.default_rng(14))
        loaded = load_checkpoint(path)
        with pytest.raises(ConfigError, match="shape"):
            fresh.load_arrays(loaded.params, loaded.buffers)


class TestTopK:
    def test_orders_by_confidence(self):
        probs = np.array([0.1, 0.9, 0.5, 0.9])
        pairs = top_k_predictions(probs, k=3)
        assert [label for label, _ in pairs] == [1, 3, 2]  # stable on the tie

    def test_truncates(self):
        assert len(top_k_predictions(np.linspace(0, 1, 30), k=20)) == 20
