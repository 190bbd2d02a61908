"""Network definitions and bridges between torch modules and ParameterSets.

The shared encoder is fully convolutional (3x3 kernels, one 2x max-pool per
stage) so the same weights serve whole images and jigsaw patches. Decoders
mirror it with nearest-neighbor upsampling; transposed convolutions are
avoided for determinism and checkerboard-free output.

Numpy arrays are the interchange format (ParameterSet); torch modules are the
working representation. Weight init draws from a numpy generator so identical
seeds give identical weights regardless of torch build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .params import AlignmentError, ParameterSet


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    in_channels: int = 3

    def __post_init__(self):
        if not self.widths:
            raise ValueError("widths must be non-empty")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")

    @property
    def arch_id(self) -> str:
        return f"enc{self.in_channels}x" + "-".join(str(w) for w in self.widths)

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.widths)

    @property
    def latent_channels(self) -> int:
        return self.widths[-1]

    def latent_shape(self, image_size: int) -> tuple[int, int, int]:
        if image_size % self.downsampling:
            raise ValueError(f"image size {image_size} not divisible by "
                             f"downsampling factor {self.downsampling}")
        side = image_size // self.downsampling
        return (self.latent_channels, side, side)


def encoder_config_from_arch_id(arch_id: str) -> EncoderConfig:
    if not arch_id.startswith("enc") or "x" not in arch_id:
        raise ValueError(f"unparseable encoder arch id {arch_id!r}")
    head, _, tail = arch_id.partition("x")
    try:
        in_channels = int(head[3:])
        widths = tuple(int(w) for w in tail.split("-"))
    except ValueError as exc:
        raise ValueError(f"unparseable encoder arch id {arch_id!r}") from exc
    return EncoderConfig(widths=widths, in_channels=in_channels)


class Encoder(nn.Module):
    """Shared convolutional trunk: per stage, 3x3 conv + relu + 2x max pool."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        prev = cfg.in_channels
        for i, width in enumerate(cfg.widths, start=1):
            self.add_module(f"conv{i}", nn.Conv2d(prev, width, 3, padding=1))
            self.add_module(f"pool{i}", nn.MaxPool2d(2))
            prev = width

    @property
    def arch_id(self) -> str:
        return self.cfg.arch_id

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i in range(1, len(self.cfg.widths) + 1):
            x = torch.relu(getattr(self, f"conv{i}")(x))
            x = getattr(self, f"pool{i}")(x)
        return x

    def stage_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Post-pool feature maps of every stage, shallow to deep."""
        maps = []
        for i in range(1, len(self.cfg.widths) + 1):
            x = torch.relu(getattr(self, f"conv{i}")(x))
            x = getattr(self, f"pool{i}")(x)
            maps.append(x)
        return maps

    def layer_sequence(self) -> list[tuple[str, str]]:
        """Ordered (name, kind) pairs describing the trunk."""
        seq = []
        for i in range(1, len(self.cfg.widths) + 1):
            seq.append((f"conv{i}", "conv"))
            seq.append((f"pool{i}", "pool"))
        return seq


class ConvDecoder(nn.Module):
    """Upsampling mirror of the encoder; one 2x stage per encoder stage."""

    def __init__(self, in_channels: int, widths: tuple[int, ...],
                 out_channels: int, final: str | None):
        super().__init__()
        if final not in (None, "sigmoid", "tanh"):
            raise ValueError(f"unknown final activation {final!r}")
        self.final = final
        self.stage_count = len(widths)
        prev = in_channels
        for i, width in enumerate(widths, start=1):
            self.add_module(f"conv{i}", nn.Conv2d(prev, width, 3, padding=1))
            prev = width
        self.head = nn.Conv2d(prev, out_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        for i in range(1, self.stage_count + 1):
            z = nn.functional.interpolate(z, scale_factor=2, mode="nearest")
            z = torch.relu(getattr(self, f"conv{i}")(z))
        y = self.head(z)
        if self.final == "sigmoid":
            return torch.sigmoid(y)
        if self.final == "tanh":
            return torch.tanh(y)
        return y


def _decoder_widths(enc: EncoderConfig) -> tuple[int, ...]:
    rev = tuple(reversed(enc.widths))
    return rev[1:] + (enc.widths[0],)


class ReconstructionHead(nn.Module):
    """Decodes the latent back to the RGB input, values in (0,1)."""

    def __init__(self, enc: EncoderConfig):
        super().__init__()
        self.decoder = ConvDecoder(enc.latent_channels, _decoder_widths(enc), 3, "sigmoid")

    def forward(self, z):
        return self.decoder(z)


class ColorizationHead(nn.Module):
    """Decodes the latent to two chroma planes, values in (-1,1)."""

    def __init__(self, enc: EncoderConfig):
        super().__init__()
        self.decoder = ConvDecoder(enc.latent_channels, _decoder_widths(enc), 2, "tanh")

    def forward(self, z):
        return self.decoder(z)


class SegmentationHead(nn.Module):
    """Soft region map bottleneck followed by a reconstructor.

    The decoder emits a per-pixel softmax over region classes; a small conv
    stack must rebuild the image from that map alone, forcing the regions to
    carry the image content.
    """

    def __init__(self, enc: EncoderConfig, region_classes: int = 8):
        super().__init__()
        if region_classes < 2:
            raise ValueError("region_classes must be >= 2")
        self.region_classes = region_classes
        self.mask_decoder = ConvDecoder(enc.latent_channels, _decoder_widths(enc),
                                        region_classes, final=None)
        self.rebuild1 = nn.Conv2d(region_classes, 16, 3, padding=1)
        self.rebuild2 = nn.Conv2d(16, 3, 3, padding=1)

    def region_map(self, z):
        return torch.softmax(self.mask_decoder(z), dim=1)

    def forward(self, z):
        m = self.region_map(z)
        return torch.sigmoid(self.rebuild2(torch.relu(self.rebuild1(m))))


class JigsawHead(nn.Module):
    """Classifies which permutation scrambled the patch stack.

    Consumes the concatenated per-patch latents through two fully-connected
    stages and returns a probability vector over permutation indices.
    """

    def __init__(self, per_patch_features: int, patch_count: int,
                 classes: int, hidden: int = 256):
        super().__init__()
        self.patch_count = patch_count
        self.fc1 = nn.Linear(per_patch_features * patch_count, hidden)
        self.fc2 = nn.Linear(hidden, classes)

    def forward(self, patch_latents: torch.Tensor) -> torch.Tensor:
        # patch_latents: [B, P, C, h, w]
        if patch_latents.shape[1] != self.patch_count:
            raise ValueError(f"expected {self.patch_count} patches, "
                             f"got {patch_latents.shape[1]}")
        flat = patch_latents.reshape(patch_latents.shape[0], -1)
        return torch.softmax(self.fc2(torch.relu(self.fc1(flat))), dim=1)


@dataclass
class TaskHeader:
    """A task-specific head plus the encoder identity it expects."""

    task: str
    module: nn.Module
    expects_arch: str

    def weights(self) -> ParameterSet:
        return parameter_set(self.module, f"head-{self.task}:{self.expects_arch}")


def make_header(task: str, enc: EncoderConfig, image_size: int = 32,
                region_classes: int = 8, patch_grid: tuple[int, int] = (2, 2),
                permutation_count: int = 12, hidden: int = 256) -> TaskHeader:
    if task == "r":
        module: nn.Module = ReconstructionHead(enc)
    elif task == "s":
        module = SegmentationHead(enc, region_classes)
    elif task == "c":
        module = ColorizationHead(enc)
    elif task == "j":
        rows, cols = patch_grid
        if image_size % rows or image_size % cols:
            raise ValueError(f"image size {image_size} not divisible by grid {patch_grid}")
        if rows != cols:
            raise ValueError("patch grid must be square so patches stay square")
        c, h, w = enc.latent_shape(image_size // rows)
        module = JigsawHead(c * h * w, rows * cols, permutation_count, hidden)
    else:
        raise ValueError(f"unknown task {task!r}")
    return TaskHeader(task=task, module=module, expects_arch=enc.arch_id)


class AdapterNetwork(nn.Module):
    """Small fully-connected stack mapping flattened latents to class logits."""

    def __init__(self, in_features: int, dims: tuple[int, ...] = (128, 256, 10)):
        super().__init__()
        if len(dims) < 1:
            raise ValueError("dims must list at least the output size")
        self.dims = tuple(dims)
        prev = in_features
        for i, d in enumerate(dims, start=1):
            self.add_module(f"fc{i}", nn.Linear(prev, d))
            prev = d

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        x = latent.reshape(latent.shape[0], -1)
        n = len(self.dims)
        for i in range(1, n):
            x = torch.relu(getattr(self, f"fc{i}")(x))
        return getattr(self, f"fc{n}")(x)


class TargetNetwork(nn.Module):
    """Compact five-conv/three-fc classifier used as the transfer student."""

    def __init__(self, classes: int = 10, image_size: int = 32,
                 conv_widths: tuple[int, ...] = (16, 48, 96, 64, 64),
                 fc_widths: tuple[int, ...] = (256, 128)):
        super().__init__()
        if len(conv_widths) != 5:
            raise ValueError("expected five conv widths")
        self.conv_widths = tuple(conv_widths)
        c1, c2, c3, c4, c5 = conv_widths
        self.conv1 = nn.Conv2d(3, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, padding=1)
        self.conv4 = nn.Conv2d(c3, c4, 3, padding=1)
        self.conv5 = nn.Conv2d(c4, c5, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        side = image_size // 8  # three pools
        self.fc1 = nn.Linear(c5 * side * side, fc_widths[0])
        self.fc2 = nn.Linear(fc_widths[0], fc_widths[1])
        self.fc3 = nn.Linear(fc_widths[1], classes)

    def stage_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Post-activation conv outputs, shallow to deep (before pooling)."""
        maps = []
        x = torch.relu(self.conv1(x)); maps.append(x); x = self.pool(x)
        x = torch.relu(self.conv2(x)); maps.append(x); x = self.pool(x)
        x = torch.relu(self.conv3(x)); maps.append(x)
        x = torch.relu(self.conv4(x)); maps.append(x)
        x = torch.relu(self.conv5(x)); maps.append(x)
        return maps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        x = torch.relu(self.conv3(x))
        x = torch.relu(self.conv4(x))
        x = self.pool(torch.relu(self.conv5(x)))
        x = x.reshape(x.shape[0], -1)
        x = torch.relu(self.fc1(x))
        x = torch.relu(self.fc2(x))
        return self.fc3(x)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded He-normal init for weights, zeros for biases.

    Values come from numpy so the bits depend only on the seed.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for _, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.ndim >= 2:
                fan_in = p[0].numel()
                vals = rng.normal(0.0, (2.0 / fan_in) ** 0.5, size=tuple(p.shape))
            else:
                vals = np.zeros(tuple(p.shape))
            p.copy_(torch.as_tensor(vals, dtype=p.dtype))


def parameter_set(module: nn.Module, arch_id: str) -> ParameterSet:
    """Snapshot the module's parameters as numpy copies."""
    entries = {name: p.detach().cpu().numpy().copy()
               for name, p in module.named_parameters()}
    return ParameterSet(entries, arch_id)


def load_parameter_set(module: nn.Module, params: ParameterSet) -> None:
    """Copy a ParameterSet into the module in place."""
    named = dict(module.named_parameters())
    if set(named) != set(params.entries):
        missing = set(named) ^ set(params.entries)
        raise AlignmentError(f"parameter names do not match module: {sorted(missing)}")
    with torch.no_grad():
        for name, arr in params.entries.items():
            if tuple(named[name].shape) != arr.shape:
                raise AlignmentError(f"shape mismatch for {name!r}: module "
                                     f"{tuple(named[name].shape)} vs stored {arr.shape}")
            named[name].copy_(torch.as_tensor(arr, dtype=named[name].dtype))


def encoder_from_parameter_set(params: ParameterSet) -> Encoder:
    enc = Encoder(encoder_config_from_arch_id(params.arch_id))
    load_parameter_set(enc, params)
    return enc


def to_chw(images) -> torch.Tensor:
    """[..., H, W, C] numpy/torch, float in [0,1] -> float32 torch [..., C, H, W]."""
    t = images if isinstance(images, torch.Tensor) else torch.as_tensor(np.asarray(images))
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.movedim(-1, -3).to(torch.float32).contiguous()


def to_hwc(t: torch.Tensor) -> torch.Tensor:
    """Inverse of to_chw for batched maps: [..., C, H, W] -> [..., H, W, C]."""
    return t.movedim(-3, -1).contiguous()
