import numpy as np
import pytest

from clopasim.autodiff import ShapeError, Tensor
from clopasim.model import (
    CheckpointError,
    ModelConfig,
    ModelConfigError,
    ParamGroup,
    ParamGroupMode,
    ParamStore,
    build_model,
    forward,
    group_for,
    set_trainable,
    trainable_fraction,
)
from tests.conftest import TINY_MODEL


class TestParamGroupMode:
    @pytest.mark.parametrize("raw, mode", [
        ("frozen", ParamGroupMode.FROZEN),
        ("zero_shot", ParamGroupMode.FROZEN),
        ("CLoPA-I.N", ParamGroupMode.INSTANCE_NORM_ONLY),
        ("clopa-cn", ParamGroupMode.INSTANCE_NORM_PLUS_SHALLOW_CONV),
        ("All", ParamGroupMode.ALL),
    ])
    def test_parse(self, raw, mode):
        assert ParamGroupMode.parse(raw) is mode

    def test_parse_unknown(self):
        with pytest.raises(ValueError):
            ParamGroupMode.parse("lora")

    def test_groups_nest(self):
        frozen, norm, shallow, full = (m.trainable_groups for m in ParamGroupMode)
        assert frozen < norm < shallow < full


class TestGroupFor:
    def test_norms(self):
        assert group_for("enc.1.block.0.norm.scale") is ParamGroup.INSTANCE_NORM
        assert group_for("dec.0.block.1.norm.bias") is ParamGroup.INSTANCE_NORM

    def test_shallow_convs(self):
        assert group_for("enc.0.block.1.conv.weight") is ParamGroup.ENCODER_STAGE0_CONV
        assert group_for("dec.0.block.0.conv.bias") is ParamGroup.DECODER_LAST_STAGE_CONV
        assert group_for("head.weight") is ParamGroup.DECODER_LAST_STAGE_CONV
        assert group_for("dec.0.up.weight") is ParamGroup.DECODER_LAST_STAGE_CONV
        assert group_for("dec.0.up.bias") is ParamGroup.DECODER_LAST_STAGE_CONV

    def test_other(self):
        assert group_for("enc.1.block.0.conv.weight") is ParamGroup.OTHER
        assert group_for("dec.1.up.weight") is ParamGroup.OTHER
        assert group_for("dec.1.block.0.conv.weight") is ParamGroup.OTHER


class TestModelConfig:
    def test_divisor(self):
        assert ModelConfig(num_stages=3).divisor == 4

    def test_rejects_single_stage(self):
        with pytest.raises(ModelConfigError):
            ModelConfig(num_stages=1).validate()

    def test_rejects_even_kernel(self):
        with pytest.raises(ModelConfigError):
            ModelConfig(kernel_size=2).validate()


class TestBuildModel:
    def test_deterministic(self):
        assert build_model(TINY_MODEL, 7).fingerprint() == build_model(TINY_MODEL, 7).fingerprint()

    def test_seed_matters(self):
        assert build_model(TINY_MODEL, 7).fingerprint() != build_model(TINY_MODEL, 8).fingerprint()

    def test_every_param_grouped(self, tiny_store):
        assert set(tiny_store.groups) == set(tiny_store.entries)
        assert set(tiny_store.groups.values()) == set(ParamGroup)

    def test_default_size(self):
        store = build_model(ModelConfig(num_stages=3, base_channels=8), 0)
        assert store.parameter_count() == 81298
        set_trainable(store, ParamGroupMode.INSTANCE_NORM_ONLY)
        assert store.parameter_count(store.trainable_names()) == 320
        assert trainable_fraction(store) == pytest.approx(0.00394, abs=5e-6)

    def test_norms_start_as_identity(self, tiny_store):
        np.testing.assert_array_equal(tiny_store["enc.0.block.0.norm.scale"].data, 1.0)
        np.testing.assert_array_equal(tiny_store["enc.0.block.0.norm.bias"].data, 0.0)


class TestForward:
    def test_output_is_probability(self, tiny_store):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 8, 8, 8)))
        probs = forward(tiny_store, x).data
        assert probs.shape == (2, 8, 8, 8)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)

    def test_zero_head_is_undecided(self, tiny_store):
        tiny_store["head.weight"].data[...] = 0.0
        tiny_store["head.bias"].data[...] = 0.0
        x = Tensor(np.random.default_rng(2).normal(size=(3, 8, 8, 8)))
        np.testing.assert_allclose(forward(tiny_store, x).data, 0.5, atol=1e-6)

    def test_extent_must_divide(self, tiny_store):
        with pytest.raises(ShapeError):
            forward(tiny_store, Tensor(np.zeros((3, 7, 8, 8))))

    def test_input_channels_checked(self, tiny_store):
        with pytest.raises(ShapeError):
            forward(tiny_store, Tensor(np.zeros((2, 8, 8, 8))))


class TestFreezeMasks:
    def test_frozen_trains_nothing(self, tiny_store):
        set_trainable(tiny_store, ParamGroupMode.FROZEN)
        assert tiny_store.trainable_names() == []
        assert trainable_fraction(tiny_store) == 0.0

    def test_instance_norm_only(self, tiny_store):
        set_trainable(tiny_store, ParamGroupMode.INSTANCE_NORM_ONLY)
        names = tiny_store.trainable_names()
        assert names and all(".norm." in n for n in names)

    def test_fractions_grow(self, tiny_store):
        fractions = []
        for mode in ParamGroupMode:
            set_trainable(tiny_store, mode)
            fractions.append(trainable_fraction(tiny_store))
        assert fractions == sorted(fractions)
        assert fractions[-1] == 1.0


class TestCheckpoint:
    def test_file_roundtrip(self, tiny_store, tmp_path):
        path = tmp_path / "nested" / "model.clpa"
        tiny_store.save(path)
        loaded = ParamStore.load(path)
        assert loaded.fingerprint() == tiny_store.fingerprint()
        assert loaded.cfg == tiny_store.cfg
        assert loaded.groups == tiny_store.groups

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            ParamStore.from_bytes(b"XXXX\x01\x00\x00\x00")

    def test_truncated(self, tiny_store):
        with pytest.raises(CheckpointError):
            ParamStore.from_bytes(tiny_store.to_bytes()[:-5])

    def test_copy_is_independent(self, tiny_store):
        clone = tiny_store.copy()
        clone["head.bias"].data += 1.0
        assert clone.fingerprint() != tiny_store.fingerprint()
