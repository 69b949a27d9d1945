"""Generated target CNN: architecture, weight bundles and functional forward pass."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import torch
import torch.nn.functional as F

from checkpoints import read_flat, write_flat

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
KERNEL_SIZE = 3
POOL_SIZE = 2


class ShapeError(ValueError):
    """Raised when a weight bundle or an input batch does not fit the architecture."""


@dataclass(frozen=True)
class Arch:
    """Target CNN architecture.

    Each block is conv3x3 -> batch norm -> ReLU -> 2x2 max-pool, followed by a
    single dense layer producing the embedding.
    """

    input_shape: Tuple[int, int, int] = (28, 28, 1)  # H, W, C
    num_blocks: int = 4
    channels: int = 8
    embed_dim: int = 20
    final_channels: Optional[int] = None  # width of the last block, defaults to channels
    dense_bias: bool = True

    def validate(self) -> None:
        """Validate the architecture.

        Raises:
            ShapeError: If the spatial size collapses or a dimension is non-positive
        """
        if self.num_blocks < 1:
            raise ShapeError("num_blocks must be >= 1")
        if self.channels < 1 or self.embed_dim < 1:
            raise ShapeError("channels and embed_dim must be >= 1")
        if self.final_channels is not None and self.final_channels < 1:
            raise ShapeError("final_channels must be >= 1")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be H x W x C, got {self.input_shape}")
        height, width = self.spatial_size()
        if height < 1 or width < 1:
            raise ShapeError(
                f"input {self.input_shape[:2]} collapses to {height}x{width} "
                f"after {self.num_blocks} poolings"
            )

    def block_channels(self, index: int) -> Tuple[int, int]:
        """Return (c_in, c_out) of conv block ``index``."""
        c_in = self.input_shape[2] if index == 0 else self.channels
        c_out = self.channels
        if index == self.num_blocks - 1 and self.final_channels is not None:
            c_out = self.final_channels
        return c_in, c_out

    def spatial_size(self) -> Tuple[int, int]:
        """Spatial size after all poolings (floor division each time)."""
        height, width = self.input_shape[0], self.input_shape[1]
        for _ in range(self.num_blocks):
            height, width = height // POOL_SIZE, width // POOL_SIZE
        return height, width

    @property
    def flat_dim(self) -> int:
        height, width = self.spatial_size()
        return self.block_channels(self.num_blocks - 1)[1] * height * width


@dataclass(frozen=True)
class LayerSpec:
    """One generated layer, described as rows of weight slices."""

    name: str
    kind: str  # "conv" or "dense"
    num_slices: int
    slice_len: int
    c_in: int
    c_out: int


def shape_table(arch: Arch) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) list of every generated tensor.

    Args:
        arch: Target architecture

    Returns:
        Tensor names and shapes, blocks first then the dense layer
    """
    arch.validate()
    table: List[Tuple[str, Tuple[int, ...]]] = []
    for index in range(arch.num_blocks):
        c_in, c_out = arch.block_channels(index)
        table.append((f"block{index}.kernel", (KERNEL_SIZE, KERNEL_SIZE, c_in, c_out)))
        table.append((f"block{index}.bn_scale", (c_out,)))
        table.append((f"block{index}.bn_offset", (c_out,)))
    table.append(("dense.w", (arch.flat_dim, arch.embed_dim)))
    if arch.dense_bias:
        table.append(("dense.b", (arch.embed_dim,)))
    return table


def parameter_count(arch: Arch) -> int:
    return sum(math.prod(shape) for _, shape in shape_table(arch))


def layer_specs(arch: Arch) -> List[LayerSpec]:
    """Describe the generated layers in generation order.

    A conv layer contributes one slice per output channel holding its 3x3xc_in
    kernel plus bn scale and offset; the dense layer contributes one slice per
    embedding unit holding a weight column plus its bias.
    """
    arch.validate()
    specs = []
    for index in range(arch.num_blocks):
        c_in, c_out = arch.block_channels(index)
        specs.append(LayerSpec(
            name=f"block{index}",
            kind="conv",
            num_slices=c_out,
            slice_len=KERNEL_SIZE * KERNEL_SIZE * c_in + 2,
            c_in=c_in,
            c_out=c_out,
        ))
    specs.append(LayerSpec(
        name="dense",
        kind="dense",
        num_slices=arch.embed_dim,
        slice_len=arch.flat_dim + (1 if arch.dense_bias else 0),
        c_in=arch.flat_dim,
        c_out=arch.embed_dim,
    ))
    return specs


@dataclass
class WeightBundle:
    """Generated target-CNN parameters, keyed by the names of ``shape_table``."""

    arch: Arch
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tuple[str, torch.Tensor]]:
        for name, _ in shape_table(self.arch):
            yield name, self.tensors[name]

    def validate(self) -> None:
        """Check names and shapes against the shape table.

        Raises:
            ShapeError: On a missing, extra or mis-shaped tensor
        """
        expected = dict(shape_table(self.arch))
        extra = set(self.tensors) - set(expected)
        if extra:
            raise ShapeError(f"Unexpected tensors in bundle: {sorted(extra)}")
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ShapeError(f"Missing tensor {name}")
            actual = tuple(self.tensors[name].shape)
            if actual != shape:
                raise ShapeError(f"Tensor {name} has shape {actual}, expected {shape}")

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors.values())

    def detach(self) -> "WeightBundle":
        return WeightBundle(self.arch, {k: v.detach().clone() for k, v in self.tensors.items()})

    def flatten(self) -> torch.Tensor:
        """Concatenate all tensors in shape-table order."""
        return torch.cat([tensor.reshape(-1) for _, tensor in self])

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype


def zero_weights(arch: Arch, dtype: torch.dtype = torch.float32) -> WeightBundle:
    """All-zero bundle, the starting point before the first task."""
    return WeightBundle(arch, {name: torch.zeros(shape, dtype=dtype) for name, shape in shape_table(arch)})


def init_weights(arch: Arch, seed: int, dtype: torch.dtype = torch.float32) -> WeightBundle:
    """Conventionally initialized bundle (He-normal kernels, unit bn scale)."""
    generator = torch.Generator().manual_seed(seed)
    tensors = {}
    for name, shape in shape_table(arch):
        if name.endswith(".kernel"):
            fan_in = shape[0] * shape[1] * shape[2]
            tensors[name] = torch.randn(shape, generator=generator, dtype=dtype) * math.sqrt(2.0 / fan_in)
        elif name.endswith(".bn_scale"):
            tensors[name] = torch.ones(shape, dtype=dtype)
        elif name == "dense.w":
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound
        else:
            tensors[name] = torch.zeros(shape, dtype=dtype)
    return WeightBundle(arch, tensors)


def weight_slices(bundle: WeightBundle, layer_index: int) -> torch.Tensor:
    """Rows of per-slice values for one layer, shape [num_slices, slice_len]."""
    spec = layer_specs(bundle.arch)[layer_index]
    if spec.kind == "conv":
        kernel = bundle[f"{spec.name}.kernel"]
        rows = kernel.permute(3, 0, 1, 2).reshape(spec.c_out, -1)
        return torch.cat([
            rows,
            bundle[f"{spec.name}.bn_scale"].unsqueeze(1),
            bundle[f"{spec.name}.bn_offset"].unsqueeze(1),
        ], dim=1)
    columns = bundle["dense.w"].t()
    if bundle.arch.dense_bias:
        columns = torch.cat([columns, bundle["dense.b"].unsqueeze(1)], dim=1)
    return columns


def assemble_layer(arch: Arch, layer_index: int, slices: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Inverse of ``weight_slices``: turn slice rows into named bundle tensors."""
    spec = layer_specs(arch)[layer_index]
    if tuple(slices.shape) != (spec.num_slices, spec.slice_len):
        raise ShapeError(
            f"Layer {spec.name} expects slices {(spec.num_slices, spec.slice_len)}, "
            f"got {tuple(slices.shape)}"
        )
    if spec.kind == "conv":
        kernel_len = KERNEL_SIZE * KERNEL_SIZE * spec.c_in
        kernel = slices[:, :kernel_len].reshape(spec.c_out, KERNEL_SIZE, KERNEL_SIZE, spec.c_in)
        return {
            f"{spec.name}.kernel": kernel.permute(1, 2, 3, 0),
            f"{spec.name}.bn_scale": slices[:, kernel_len],
            f"{spec.name}.bn_offset": slices[:, kernel_len + 1],
        }
    tensors = {"dense.w": slices[:, :spec.c_in].t()}
    if arch.dense_bias:
        tensors["dense.b"] = slices[:, spec.c_in]
    return tensors


def to_nchw(images: torch.Tensor, arch: Arch) -> torch.Tensor:
    """Check an NHWC batch against the architecture and move channels first."""
    if images.dim() != 4 or tuple(images.shape[1:]) != tuple(arch.input_shape):
        raise ShapeError(f"Images of shape {tuple(images.shape)} do not match input {arch.input_shape}")
    if images.shape[0] < 1:
        raise ShapeError("Empty image batch")
    return images.permute(0, 3, 1, 2)


def batch_norm(x: torch.Tensor, scale: torch.Tensor, offset: torch.Tensor) -> torch.Tensor:
    # current-batch statistics only, no running averages
    var, mean = torch.var_mean(x, dim=(0, 2, 3), unbiased=False, keepdim=True)
    normalized = (x - mean) / torch.sqrt(var + BN_EPSILON)
    return normalized * scale.view(1, -1, 1, 1) + offset.view(1, -1, 1, 1)


def apply_block(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bn_scale: torch.Tensor,
    bn_offset: torch.Tensor,
) -> torch.Tensor:
    """conv3x3 -> bn -> ReLU -> 2x2 max-pool on an NCHW batch."""
    h = F.conv2d(x, kernel.permute(3, 2, 0, 1), padding=KERNEL_SIZE // 2)
    h = F.relu(batch_norm(h, bn_scale, bn_offset))
    return F.max_pool2d(h, POOL_SIZE)


def block_activations(weights: WeightBundle, images: torch.Tensor) -> List[torch.Tensor]:
    """NCHW outputs of every conv block."""
    h = to_nchw(images, weights.arch).to(weights.dtype)
    outputs = []
    for index in range(weights.arch.num_blocks):
        h = apply_block(
            h,
            weights[f"block{index}.kernel"],
            weights[f"block{index}.bn_scale"],
            weights[f"block{index}.bn_offset"],
        )
        outputs.append(h)
    return outputs


def dense_head(weights: WeightBundle, features: torch.Tensor) -> torch.Tensor:
    embeddings = features.flatten(1) @ weights["dense.w"]
    if weights.arch.dense_bias:
        embeddings = embeddings + weights["dense.b"]
    return embeddings


def forward_embed(weights: WeightBundle, images: torch.Tensor) -> torch.Tensor:
    """Embed an NHWC image batch with the given weights.

    Args:
        weights: Generated (or trained) weight bundle
        images: Tensor [batch, H, W, C]

    Returns:
        Embeddings [batch, embed_dim], the raw dense output
    """
    weights.validate()
    features = block_activations(weights, images)[-1]
    return dense_head(weights, features)


def save_weight_bundle(bundle: WeightBundle, path: Path) -> None:
    """Write a bundle as flat float32 data plus a JSON manifest."""
    bundle.validate()
    write_flat(Path(path), list(bundle), extra={"kind": "weight_bundle", "arch": arch_to_dict(bundle.arch)})
    logger.debug(f"Saved weight bundle to {path}")


def load_weight_bundle(path: Path) -> WeightBundle:
    """Read a bundle written by ``save_weight_bundle``."""
    tensors, extra = read_flat(Path(path))
    bundle = WeightBundle(arch_from_dict(extra["arch"]), tensors)
    bundle.validate()
    return bundle


def arch_to_dict(arch: Arch) -> dict:
    return {
        "input_shape": list(arch.input_shape),
        "num_blocks": arch.num_blocks,
        "channels": arch.channels,
        "embed_dim": arch.embed_dim,
        "final_channels": arch.final_channels,
        "dense_bias": arch.dense_bias,
    }


def arch_from_dict(data: dict) -> Arch:
    return Arch(
        input_shape=tuple(data["input_shape"]),
        num_blocks=data["num_blocks"],
        channels=data["channels"],
        embed_dim=data["embed_dim"],
        final_channels=data.get("final_channels"),
        dense_bias=data.get("dense_bias", True),
    )
