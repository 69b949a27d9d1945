"""Transformer weight generator: support set + previous weights -> new target-CNN weights."""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from checkpoints import RunStore, check_fingerprint, fingerprint, load_checkpoint
from episodes import LabeledBatch, TaskSequence
from target_cnn import (
    Arch,
    WeightBundle,
    apply_block,
    arch_from_dict,
    arch_to_dict,
    assemble_layer,
    layer_specs,
    to_nchw,
    weight_slices,
    zero_weights,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class GenerationError(RuntimeError):
    """Raised when a generated layer contains non-finite values."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class GeneratorConfig:
    """Weight generator configuration."""

    feat_channels: int = 32  # 4-layer conv image feature extractor
    act_channels: int = 16  # 2-layer conv activation-feature net
    num_layers: int = 3
    num_heads: int = 2
    model_dim: int = 64
    ff_dim: int = 128
    label_embed_dim: int = 16
    weight_slice_dim: int = 0  # hidden width of the read-out, 0 = linear
    max_way: int = 128

    def validate(self) -> None:
        """Validate configuration.

        Raises:
            ValueError: On an inconsistent dimension
        """
        for name in ("feat_channels", "act_channels", "num_layers", "num_heads", "model_dim",
                     "ff_dim", "label_embed_dim", "max_way"):
            if getattr(self, name) < 1:
                raise ValueError(f"generator.{name} must be >= 1")
        if self.weight_slice_dim < 0:
            raise ValueError("generator.weight_slice_dim must be >= 0")
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"generator.model_dim ({self.model_dim}) must be divisible by "
                f"generator.num_heads ({self.num_heads})"
            )


@dataclass
class TokenBatch:
    """Transformer input for one generated layer."""

    sample_tokens: torch.Tensor  # [K*N, model_dim]
    weight_tokens: torch.Tensor  # [num_slices, model_dim]

    @property
    def provenance(self) -> Tuple[str, ...]:
        return ("sample",) * self.sample_tokens.shape[0] + ("placeholder",) * self.weight_tokens.shape[0]

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.sample_tokens, self.weight_tokens], dim=0)

    def __len__(self) -> int:
        return self.sample_tokens.shape[0] + self.weight_tokens.shape[0]


class SupportBatchNorm(nn.BatchNorm2d):
    """Batch norm over the support set.

    A single value per channel (one image at 1x1) has no statistics; only the
    affine part is applied then.
    """

    def __init__(self, channels: int):
        super().__init__(channels, track_running_stats=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[0] * x.shape[2] * x.shape[3] > 1:
            return super().forward(x)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


def _conv_stack(in_channels: int, channels: int, depth: int, normalize: bool) -> List[nn.Module]:
    layers: List[nn.Module] = []
    for index in range(depth):
        layers.append(nn.Conv2d(in_channels if index == 0 else channels, channels, 3, padding=1))
        if normalize:
            layers.append(SupportBatchNorm(channels))
        layers.append(nn.ReLU())
        if normalize:
            layers.append(nn.MaxPool2d(2, ceil_mode=True))
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return layers


class HyperTransformer(nn.Module):
    """Generates target-CNN weights layer by layer.

    Per generated layer, the tokens are one per support sample (image features,
    activation features of the partially generated CNN, label embedding) and one
    per output weight slice (projection of the previous weights' slice plus a
    learned placeholder). A separate transformer encoder per layer maps them to
    outputs; the slice tokens are read out as the new weights.
    """

    def __init__(self, cfg: GeneratorConfig, arch: Arch):
        super().__init__()
        cfg.validate()
        arch.validate()
        self.cfg = cfg
        self.arch = arch
        self.specs = layer_specs(arch)

        self.feature_extractor = nn.Sequential(*_conv_stack(arch.input_shape[2], cfg.feat_channels, 4, True))
        # activation features for every layer but the first
        self.activation_nets = nn.ModuleList([
            nn.Sequential(*_conv_stack(arch.block_channels(index - 1)[1], cfg.act_channels, 2, False))
            for index in range(1, len(self.specs))
        ])
        self.label_embedding = nn.Embedding(cfg.max_way, cfg.label_embed_dim)

        sample_dim = cfg.feat_channels + cfg.act_channels + cfg.label_embed_dim
        self.sample_proj = nn.ModuleList([nn.Linear(sample_dim, cfg.model_dim) for _ in self.specs])
        self.weight_proj = nn.ModuleList([nn.Linear(spec.slice_len, cfg.model_dim) for spec in self.specs])
        self.placeholders = nn.ParameterList([
            nn.Parameter(torch.zeros(spec.num_slices, cfg.model_dim)) for spec in self.specs
        ])
        self.transformers = nn.ModuleList([self._encoder() for _ in self.specs])
        self.readouts = nn.ModuleList([self._readout(spec.slice_len) for spec in self.specs])
        self._init_parameters()

    def _encoder(self) -> nn.TransformerEncoder:
        layer = nn.TransformerEncoderLayer(
            d_model=self.cfg.model_dim,
            nhead=self.cfg.num_heads,
            dim_feedforward=self.cfg.ff_dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        return nn.TransformerEncoder(
            layer,
            num_layers=self.cfg.num_layers,
            norm=nn.LayerNorm(self.cfg.model_dim),
            enable_nested_tensor=False,
        )

    def _readout(self, slice_len: int) -> nn.Module:
        if self.cfg.weight_slice_dim == 0:
            return nn.Linear(self.cfg.model_dim, slice_len)
        return nn.Sequential(
            nn.Linear(self.cfg.model_dim, self.cfg.weight_slice_dim),
            nn.GELU(),
            nn.Linear(self.cfg.weight_slice_dim, slice_len),
        )

    def _init_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.MultiheadAttention):
                nn.init.trunc_normal_(module.in_proj_weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
                nn.init.zeros_(module.in_proj_bias)
            elif isinstance(module, nn.Embedding):
                nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        for placeholder in self.placeholders:
            nn.init.trunc_normal_(placeholder, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        # unit batch-norm scale before any training
        for spec, readout in zip(self.specs, self.readouts):
            if spec.kind == "conv":
                last = readout if isinstance(readout, nn.Linear) else readout[-1]
                with torch.no_grad():
                    last.bias[spec.slice_len - 2] = 1.0

    @property
    def dtype(self) -> torch.dtype:
        return self.label_embedding.weight.dtype

    def image_features(self, support: LabeledBatch) -> torch.Tensor:
        x = to_nchw(support.images, self.arch).to(self.dtype)
        return self.feature_extractor(x)

    def encode(
        self,
        layer_index: int,
        image_feats: Optional[torch.Tensor],
        labels: torch.Tensor,
        activations: Optional[torch.Tensor],
        prev_weights: WeightBundle,
        include_support: bool = True,
    ) -> TokenBatch:
        """Build the tokens of one layer.

        Args:
            layer_index: Generated layer index
            image_feats: Support image features [n, feat_channels]
            labels: Support labels [n]
            activations: NCHW input activations of this layer, None for the first layer
            prev_weights: Previously generated weights
            include_support: False drops the sample tokens

        Returns:
            Token batch for the layer's transformer
        """
        spec = self.specs[layer_index]
        prev = weight_slices(prev_weights, layer_index).to(self.dtype)
        weight_tokens = self.weight_proj[layer_index](prev) + self.placeholders[layer_index]
        if not include_support:
            return TokenBatch(weight_tokens.new_zeros(0, self.cfg.model_dim), weight_tokens)

        if labels.numel() and int(labels.max()) >= self.cfg.max_way:
            raise GenerationError(spec.name, f"label {int(labels.max())} exceeds max_way {self.cfg.max_way}")
        if activations is None:
            act_feats = image_feats.new_zeros(image_feats.shape[0], self.cfg.act_channels)
        else:
            act_feats = self.activation_nets[layer_index - 1](activations)
        sample_input = torch.cat([image_feats, act_feats, self.label_embedding(labels)], dim=1)
        return TokenBatch(self.sample_proj[layer_index](sample_input), weight_tokens)

    def forward(
        self,
        support: LabeledBatch,
        prev_weights: WeightBundle,
        include_support: bool = True,
    ) -> WeightBundle:
        prev_weights.validate()
        if include_support and support.labels.numel() == 0:
            raise GenerationError(self.specs[0].name, "empty support set")
        image_feats = self.image_features(support) if include_support else None
        h = to_nchw(support.images, self.arch).to(self.dtype) if include_support else None
        labels = support.labels

        generated: Dict[str, torch.Tensor] = {}
        for layer_index, spec in enumerate(self.specs):
            tokens = self.encode(
                layer_index,
                image_feats,
                labels,
                h if layer_index > 0 else None,
                prev_weights,
                include_support,
            )
            outputs = self.transformers[layer_index](tokens.stacked().unsqueeze(0)).squeeze(0)
            slices = self.readouts[layer_index](outputs[tokens.sample_tokens.shape[0]:])
            if not torch.isfinite(slices).all():
                raise GenerationError(spec.name, "non-finite generated weights")
            layer = assemble_layer(self.arch, layer_index, slices)
            generated.update(layer)
            if spec.kind == "conv" and include_support:
                h = apply_block(
                    h,
                    layer[f"{spec.name}.kernel"],
                    layer[f"{spec.name}.bn_scale"],
                    layer[f"{spec.name}.bn_offset"],
                )
                if not torch.isfinite(h).all():
                    raise GenerationError(spec.name, "non-finite activations")
        return WeightBundle(self.arch, generated)


@dataclass
class GeneratorState:
    """Trainable generator parameters plus optimizer and step counter."""

    model: HyperTransformer
    optimizer: Optional[torch.optim.Optimizer] = None
    step: int = 0

    @property
    def arch(self) -> Arch:
        return self.model.arch

    @property
    def cfg(self) -> GeneratorConfig:
        return self.model.cfg

    def named_tensors(self) -> List[Tuple[str, torch.Tensor]]:
        return list(self.model.state_dict().items())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())


def init_generator(cfg: GeneratorConfig, arch: Arch, seed: int) -> GeneratorState:
    """Construct a generator deterministically from a seed.

    Args:
        cfg: Generator configuration
        arch: Target architecture
        seed: Initialization seed

    Returns:
        Fresh generator state (no optimizer yet)
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HyperTransformer(cfg, arch)
    state = GeneratorState(model)
    logger.info(f"Initialized generator with {state.parameter_count()} parameters (seed={seed})")
    return state


def _activations_before(state: GeneratorState, support: LabeledBatch, weights: WeightBundle, layer_index: int):
    if layer_index == 0:
        return None
    h = to_nchw(support.images, state.arch).to(state.model.dtype)
    for index in range(layer_index):
        h = apply_block(
            h,
            weights[f"block{index}.kernel"],
            weights[f"block{index}.bn_scale"],
            weights[f"block{index}.bn_offset"],
        )
    return h


def encode_support(
    state: GeneratorState,
    support: LabeledBatch,
    prev_weights: WeightBundle,
    layer_index: int,
    partial_weights: Optional[WeightBundle] = None,
) -> TokenBatch:
    """Tokens the generator sees for one layer.

    Args:
        state: Generator state
        support: Support batch
        prev_weights: Previously generated weights (zero_weights for the first task)
        layer_index: Generated layer index
        partial_weights: Weights of the already generated layers used for the
            activation features; defaults to ``prev_weights``

    Returns:
        Token batch
    """
    if not 0 <= layer_index < len(state.model.specs):
        raise IndexError(f"layer_index {layer_index} outside 0..{len(state.model.specs) - 1}")
    activations = _activations_before(state, support, partial_weights or prev_weights, layer_index)
    return state.model.encode(
        layer_index,
        state.model.image_features(support),
        support.labels,
        activations,
        prev_weights,
    )


def generate_weights(
    state: GeneratorState,
    support: LabeledBatch,
    prev_weights: WeightBundle,
    include_support: bool = True,
) -> WeightBundle:
    """theta_t = a_psi(S_t, theta_{t-1})."""
    return state.model(support, prev_weights, include_support=include_support)


def unroll(state: GeneratorState, tasks: TaskSequence) -> List[WeightBundle]:
    """Generate theta_0..theta_{T-1}, reading only task t's support at step t."""
    if len(tasks) < 1:
        raise ValueError("unroll needs at least one task")
    weights = []
    prev = zero_weights(state.arch, dtype=state.model.dtype)
    for episode in tasks:
        prev = generate_weights(state, episode.support, prev)
        weights.append(prev)
    return weights


def generator_fingerprint(cfg: GeneratorConfig, arch: Arch) -> str:
    """Fingerprint of everything that fixes the parameter layout."""
    return fingerprint({"arch": arch_to_dict(arch), "generator": asdict(cfg)})


def save_generator(store: RunStore, state: GeneratorState, extra: Optional[dict] = None) -> Path:
    """Write ``ckpt_<step>`` for the generator."""
    manifest = {
        "kind": "generator",
        "arch": arch_to_dict(state.arch),
        "generator": asdict(state.cfg),
    }
    manifest.update(extra or {})
    return store.save_checkpoint(
        state.step,
        state.named_tensors(),
        generator_fingerprint(state.cfg, state.arch),
        manifest,
    )


def load_generator(
    path: Path,
    cfg: Optional[GeneratorConfig] = None,
    arch: Optional[Arch] = None,
) -> GeneratorState:
    """Restore a generator checkpoint.

    Args:
        path: ``ckpt_<step>`` directory
        cfg: Expected generator config, read from the manifest when omitted
        arch: Expected target architecture, read from the manifest when omitted

    Returns:
        Generator state at the stored step (optimizer not restored; plain SGD
        has no slots)
    """
    tensors, manifest = load_checkpoint(Path(path))
    cfg = cfg or GeneratorConfig(**manifest["generator"])
    arch = arch or arch_from_dict(manifest["arch"])
    check_fingerprint(path, manifest, generator_fingerprint(cfg, arch))
    state = init_generator(cfg, arch, seed=0)
    state.model.load_state_dict(tensors)
    state.step = int(manifest["step"])
    logger.info(f"Loaded generator checkpoint {Path(path).name} at step {state.step}")
    return state
