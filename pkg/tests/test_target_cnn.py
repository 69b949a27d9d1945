"""Tests for the generated target CNN."""

import json

import numpy as np
import pytest
import torch

from target_cnn import (
    Arch,
    ShapeError,
    WeightBundle,
    assemble_layer,
    batch_norm,
    forward_embed,
    init_weights,
    layer_specs,
    load_weight_bundle,
    parameter_count,
    save_weight_bundle,
    shape_table,
    weight_slices,
    zero_weights,
)
from verifiers import GRADIENT_TOLERANCE, finite_difference_report

OMNIGLOT = Arch(input_shape=(28, 28, 1), num_blocks=4, channels=8, embed_dim=20)
TIERED = Arch(input_shape=(84, 84, 3), num_blocks=4, channels=64, embed_dim=40)


class TestShapeTable:

    def test_omniglot_layout(self):
        table = dict(shape_table(OMNIGLOT))
        assert table["block0.kernel"] == (3, 3, 1, 8)
        for index in (1, 2, 3):
            assert table[f"block{index}.kernel"] == (3, 3, 8, 8)
        # 28 -> 14 -> 7 -> 3 -> 1
        assert table["dense.w"] == (8, 20)
        assert table["dense.b"] == (20,)

    def test_ordering_blocks_then_dense(self):
        names = [name for name, _ in shape_table(OMNIGLOT)]
        assert names[:3] == ["block0.kernel", "block0.bn_scale", "block0.bn_offset"]
        assert names[-2:] == ["dense.w", "dense.b"]

    def test_parameter_count(self):
        assert parameter_count(OMNIGLOT) == 88 + 3 * 592 + 180

    def test_tiered_embedding_width(self):
        table = dict(shape_table(TIERED))
        assert table["dense.w"] == (64 * 5 * 5, 40)

    def test_smallest_table(self):
        arch = Arch(input_shape=(2, 2, 1), num_blocks=1, channels=1, embed_dim=1)
        assert shape_table(arch) == [
            ("block0.kernel", (3, 3, 1, 1)),
            ("block0.bn_scale", (1,)),
            ("block0.bn_offset", (1,)),
            ("dense.w", (1, 1)),
            ("dense.b", (1,)),
        ]

    def test_spatial_collapse_rejected(self):
        with pytest.raises(ShapeError):
            shape_table(Arch(input_shape=(8, 8, 1), num_blocks=4, channels=2, embed_dim=3))

    def test_dense_bias_flag(self):
        arch = Arch(input_shape=(8, 8, 1), num_blocks=2, channels=2, embed_dim=3, dense_bias=False)
        assert "dense.b" not in dict(shape_table(arch))

    def test_final_channels(self):
        arch = Arch(input_shape=(8, 8, 1), num_blocks=2, channels=2, embed_dim=3, final_channels=5)
        table = dict(shape_table(arch))
        assert table["block1.kernel"] == (3, 3, 2, 5)
        assert table["dense.w"] == (5 * 2 * 2, 3)


class TestZeroWeights:

    def test_all_zero(self, tiny_arch):
        bundle = zero_weights(tiny_arch)
        assert float(bundle.flatten().abs().sum()) == 0.0

    def test_shapes_follow_table(self, tiny_arch):
        bundle = zero_weights(tiny_arch)
        assert [(name, tuple(t.shape)) for name, t in bundle] == shape_table(tiny_arch)

    def test_forward_is_finite_and_constant(self, tiny_arch):
        images = torch.rand(5, 8, 8, 1)
        embeddings = forward_embed(zero_weights(tiny_arch), images)
        assert torch.isfinite(embeddings).all()
        torch.testing.assert_close(embeddings, embeddings[:1].expand_as(embeddings))


class TestForwardEmbed:

    def test_output_shape(self, tiny_arch):
        embeddings = forward_embed(init_weights(tiny_arch, 0), torch.rand(6, 8, 8, 1))
        assert embeddings.shape == (6, tiny_arch.embed_dim)

    def test_duplicated_inputs_give_identical_rows(self, tiny_arch):
        image = torch.rand(1, 8, 8, 1)
        embeddings = forward_embed(init_weights(tiny_arch, 1), image.repeat(2, 1, 1, 1))
        torch.testing.assert_close(embeddings[0], embeddings[1])

    def test_rejects_misshaped_bundle(self, tiny_arch):
        bundle = init_weights(tiny_arch, 0)
        bundle.tensors["dense.w"] = torch.zeros(3, 3)
        with pytest.raises(ShapeError):
            forward_embed(bundle, torch.rand(2, 8, 8, 1))

    def test_rejects_missing_tensor(self, tiny_arch):
        bundle = init_weights(tiny_arch, 0)
        del bundle.tensors["block0.bn_scale"]
        with pytest.raises(ShapeError):
            forward_embed(bundle, torch.rand(2, 8, 8, 1))

    def test_rejects_wrong_image_shape(self, tiny_arch):
        with pytest.raises(ShapeError):
            forward_embed(init_weights(tiny_arch, 0), torch.rand(2, 8, 8, 3))

    def test_batch_norm_normalizes_per_channel(self):
        x = torch.randn(7, 3, 5, 5, dtype=torch.float64) * 3.0 + 2.0
        out = batch_norm(x, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
        var, mean = torch.var_mean(out, dim=(0, 2, 3), unbiased=False)
        np.testing.assert_allclose(mean.numpy(), 0.0, atol=1e-4)
        np.testing.assert_allclose(var.numpy(), 1.0, atol=1e-4)

    def test_gradients_match_finite_differences(self, tiny_arch):
        bundle = init_weights(tiny_arch, 3, dtype=torch.float64)
        for _, tensor in bundle:
            tensor.requires_grad_(True)
        images = torch.rand(6, 8, 8, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
        report = finite_difference_report(lambda: forward_embed(bundle, images).mean(), bundle.tensors)
        assert set(report) == {name for name, _ in shape_table(tiny_arch)}
        assert max(report.values()) <= GRADIENT_TOLERANCE


class TestSlices:

    def test_assemble_inverts_slices(self, tiny_arch):
        bundle = init_weights(tiny_arch, 5)
        for index, spec in enumerate(layer_specs(tiny_arch)):
            rows = weight_slices(bundle, index)
            assert rows.shape == (spec.num_slices, spec.slice_len)
            for name, tensor in assemble_layer(tiny_arch, index, rows).items():
                torch.testing.assert_close(tensor, bundle[name])

    def test_wrong_slice_shape(self, tiny_arch):
        with pytest.raises(ShapeError):
            assemble_layer(tiny_arch, 0, torch.zeros(1, 1))


class TestSerialization:

    def test_save_and_load(self, tiny_arch, tmp_path):
        bundle = init_weights(tiny_arch, 2)
        save_weight_bundle(bundle, tmp_path / "theta_0")
        loaded = load_weight_bundle(tmp_path / "theta_0")
        assert loaded.arch == tiny_arch
        torch.testing.assert_close(loaded.flatten(), bundle.flatten())

    def test_manifest_lists_tensors(self, tiny_arch, tmp_path):
        save_weight_bundle(init_weights(tiny_arch, 2), tmp_path / "theta_0")
        manifest = json.loads((tmp_path / "theta_0" / "manifest.json").read_text())
        assert [entry["name"] for entry in manifest["tensors"]] == [name for name, _ in shape_table(tiny_arch)]
        assert manifest["count"] == parameter_count(tiny_arch)

    def test_load_rejects_bad_bundle(self, tiny_arch):
        with pytest.raises(ShapeError):
            WeightBundle(tiny_arch, {"dense.w": torch.zeros(1)}).validate()
