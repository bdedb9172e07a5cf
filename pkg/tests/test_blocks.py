#!/usr/bin/env python3
"""
Test for the parameterized building blocks
"""

import numpy as np
import pytest

from core import tensor as T
from core.blocks import (
    RFB,
    RRDB,
    RRFDB,
    ConvLayer,
    DenseBlock,
    Initializer,
    Module,
    PlainUnit,
    Sequential,
    StageSpec,
    UpsampleKind,
    UpsampleStage,
    audit_normalization_free,
    rfb_unit_factory,
)
from core.errors import ShapeError
from core.tensor import Tensor


def _zero(module: Module) -> Module:
    for p in module.parameters():
        p.assign(np.zeros(p.shape))
    return module


@pytest.fixture
def init():
    return Initializer(np.random.default_rng(7), 0.1, np.dtype(np.float32))


@pytest.fixture
def x8(rng):
    return Tensor(rng.standard_normal((2, 8, 6, 6)))


class TestModule:
    """Test cases for Module bookkeeping"""

    def test_names_follow_construction_order(self, init):
        block = DenseBlock(8, 4, init)
        names = [name for name, _ in block.named_parameters()]
        assert names[:4] == ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"]
        assert names[-1] == "conv5.bias"

    def test_assign_names_stamps_parameters(self, init):
        seq = Sequential([("a", ConvLayer(3, 4, init)), ("b", ConvLayer(4, 3, init))])
        seq.assign_names("net.")
        assert [p.name for p in seq.parameters()] == ["net.a.weight", "net.a.bias", "net.b.weight", "net.b.bias"]

    def test_duplicate_member_rejected(self, init):
        module = Module()
        module.add_module("conv", ConvLayer(3, 3, init))
        with pytest.raises(ValueError):
            module.add_module("conv", ConvLayer(3, 3, init))

    def test_count_parameters(self, init):
        conv = ConvLayer(3, 4, init)
        assert conv.count_parameters() == 4 * 3 * 3 * 3 + 4

    def test_sequential_applies_in_order(self, init, rng):
        seq = Sequential([("a", ConvLayer(3, 5, init)), ("b", ConvLayer(5, 2, init))])
        x = Tensor(rng.standard_normal((1, 3, 4, 4)))
        np.testing.assert_allclose(seq(x).data, seq[1](seq[0](x)).data)
        assert len(seq) == 2


class TestDenseBlocks:
    """Test cases for DenseBlock and RRDB"""

    def test_dense_block_input_channels(self, init):
        block = DenseBlock(8, 4, init)
        assert [conv.c_in for conv in block.convs] == [8, 12, 16, 20, 24]
        assert [conv.c_out for conv in block.convs] == [4, 4, 4, 4, 8]

    def test_dense_block_preserves_shape(self, init, x8):
        assert DenseBlock(8, 4, init)(x8).shape == x8.shape

    def test_zero_dense_block_is_identity(self, init, x8):
        block = _zero(DenseBlock(8, 4, init))
        np.testing.assert_allclose(block(x8).data, x8.data)

    def test_zero_rrdb_scales_by_outer_residual(self, init, x8):
        block = _zero(RRDB(8, 4, init, residual_scale=0.2))
        np.testing.assert_allclose(block(x8).data, 1.2 * x8.data, rtol=1e-6)

    def test_wrong_channels(self, init, rng):
        with pytest.raises(ShapeError):
            RRDB(8, 4, init)(Tensor(rng.standard_normal((1, 4, 6, 6))))


class TestRFB:
    """Test cases for the receptive field block"""

    def test_kernels_at_most_three(self, init):
        block = RFB(8, 8, init)
        for name, p in block.named_parameters():
            if name.endswith("weight"):
                assert max(p.shape[2:]) <= 3, name

    def test_large_kernel_rejected(self, init):
        with pytest.raises(ValueError):
            RFB(8, 8, init, branches=(((5, 5, 1),),))

    def test_shortcut_only_when_channels_change(self, init):
        assert RFB(8, 8, init).shortcut is None
        assert RFB(8, 4, init).shortcut is not None

    def test_output_channels(self, init, x8):
        assert RFB(8, 4, init)(x8).shape == (2, 4, 6, 6)

    def test_zero_branches_leave_activated_input(self, init, x8):
        block = _zero(RFB(8, 8, init))
        np.testing.assert_allclose(block(x8).data, T.leaky_relu(x8).data)

    def test_plain_unit_ablation(self, init, x8):
        unit = rfb_unit_factory(use_rfb=False)(8, 4, init)
        assert isinstance(unit, PlainUnit)
        assert unit(x8).shape == (2, 4, 6, 6)

    def test_fewer_parameters_than_a_5x5_conv(self, init):
        assert RFB(64, 64, init).count_parameters() < ConvLayer(64, 64, init, (5, 5)).count_parameters()

    def test_dilated_branch_impulse_support(self):
        init64 = Initializer(np.random.default_rng(3), 0.1, np.dtype(np.float64))
        branch = RFB(4, 4, init64).branches[3]
        for name, p in branch.named_parameters():
            p.assign(np.zeros(p.shape) if name.endswith("bias") else np.abs(p.value.data) + 0.01)
        x = np.zeros((1, 4, 31, 31))
        x[:, :, 15, 15] = 1.0
        out = branch(Tensor(x, dtype=np.float64)).data[0, 0]
        rows, cols = np.nonzero(out)
        assert (rows.max() - rows.min() + 1, cols.max() - cols.min() + 1) == (13, 13)
        taps = [-6, -5, -4, -1, 0, 1, 4, 5, 6]
        assert sorted(set(rows - 15)) == taps
        assert sorted(set(cols - 15)) == taps


class TestRRFDB:
    """Test cases for the receptive field dense block"""

    def test_unit_channels(self, init):
        block = RRFDB(8, 4, init, n_units=5)
        assert [(u.c_in, u.c_out) for u in block.units] == [(8, 4), (12, 4), (16, 4), (20, 4), (24, 8)]

    def test_preserves_shape(self, init, x8):
        assert RRFDB(8, 4, init, n_units=3)(x8).shape == x8.shape

    def test_zero_block_is_identity(self, init, x8):
        block = _zero(RRFDB(8, 4, init, n_units=2, unit_factory=rfb_unit_factory(use_rfb=False)))
        np.testing.assert_allclose(block(x8).data, x8.data)


class TestUpsampleStage:
    """Test cases for the x2 upsampling stages"""

    @pytest.mark.parametrize("kind", [UpsampleKind.NNI, UpsampleKind.SPC])
    def test_doubles_resolution(self, init, x8, kind):
        stage = UpsampleStage(StageSpec(kind), 8, init)
        assert stage(x8).shape == (2, 8, 12, 12)

    def test_nni_without_rfb_is_nearest(self, init, x8):
        stage = UpsampleStage(StageSpec(UpsampleKind.NNI, rfb=False), 8, init)
        assert stage.parameters() == []
        np.testing.assert_array_equal(stage(x8).data, T.nearest_upsample(x8, 2).data)

    def test_spc_expands_channels(self, init):
        stage = UpsampleStage(StageSpec(UpsampleKind.SPC, rfb=False), 8, init)
        assert stage.expand.c_out == 32

    def test_stage_spec_dict(self):
        assert StageSpec(UpsampleKind.SPC, rfb=False).to_dict() == {"kind": "spc", "rfb": False}


class TestNormalizationAudit:
    """Test cases for the normalization-free audit"""

    def test_blocks_are_clean(self, init):
        block = Sequential([("rrdb", RRDB(8, 4, init)), ("rrfdb", RRFDB(8, 4, init, n_units=2))])
        assert audit_normalization_free(block) == []

    def test_flags_norm_names(self, init):
        module = Module()
        module.add_module("bn", ConvLayer(3, 3, init))
        assert audit_normalization_free(module) == ["bn.weight", "bn.bias"]
