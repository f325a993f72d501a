"""U-Net generator and PatchGAN discriminator."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .layers import (BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, LeakyReLU,
                     Module, ReLU, Sequential, Tanh01)

PAPER_GEN_CHANNELS = (64, 128, 256, 512, 512, 512, 512, 512)
PAPER_DISC_CHANNELS = (64, 128, 256, 512)


@dataclass(frozen=True)
class ArchSpec:
    """Everything needed to rebuild a :class:`GanModel` with matching shapes."""

    gen_channels: tuple[int, ...] = PAPER_GEN_CHANNELS
    disc_channels: tuple[int, ...] = PAPER_DISC_CHANNELS
    dropout_blocks: int = 3
    dropout_rate: float = 0.5
    leaky_slope: float = 0.2

    @property
    def image_size(self) -> int:
        return 2 ** len(self.gen_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            gen_channels=tuple(int(c) for c in d["gen_channels"]),
            disc_channels=tuple(int(c) for c in d["disc_channels"]),
            dropout_blocks=int(d["dropout_blocks"]),
            dropout_rate=float(d["dropout_rate"]),
            leaky_slope=float(d["leaky_slope"]),
        )


class GeneratorNet(Module):
    """Encoder-decoder with skip concatenations; output squashed to (0, 1).

    With ``n = len(channels)`` encoder blocks the input side must be ``2**n``
    (each block halves it with a 4x4 stride-2 conv).  Decoder block ``j``
    output is concatenated with encoder block ``n - 2 - j`` output.
    """

    def __init__(self, channels=PAPER_GEN_CHANNELS, in_channels=1, out_channels=1,
                 dropout_blocks=3, dropout_rate=0.5, leaky_slope=0.2,
                 rng=None, dtype=np.float32):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("generator needs at least two encoder blocks")
        rng = rng or np.random.default_rng(0)
        self.channels = tuple(channels)
        self.image_size = 2 ** len(channels)
        n = len(channels)

        self.enc = []
        prev = in_channels
        for i, c in enumerate(channels):
            layers = [Conv2d(prev, c, rng=rng, dtype=dtype)]
            # no norm on the outermost block or on the 1x1 bottleneck
            if 0 < i < n - 1:
                layers.append(BatchNorm2d(c, dtype=dtype))
            layers.append(LeakyReLU(leaky_slope))
            self.enc.append(Sequential(*layers))
            prev = c

        self.dec = []
        self.dropouts = []
        for j in range(n - 1):
            c_out = channels[n - 2 - j]
            c_in = channels[n - 1] if j == 0 else 2 * channels[n - 1 - j]
            layers = [ConvTranspose2d(c_in, c_out, rng=rng, dtype=dtype), BatchNorm2d(c_out, dtype=dtype)]
            if j < dropout_blocks:
                drop = Dropout(dropout_rate)
                self.dropouts.append(drop)
                layers.append(drop)
            layers.append(ReLU())
            self.dec.append(Sequential(*layers))

        self.head = Sequential(ConvTranspose2d(2 * channels[0], out_channels, rng=rng, dtype=dtype), Tanh01())
        self._split = []

    def children(self):
        for i, blk in enumerate(self.enc):
            yield f"enc{i}", blk
        for j, blk in enumerate(self.dec):
            yield f"dec{j}", blk
        yield "head", self.head

    def set_rng(self, rng: np.random.Generator | None) -> None:
        for d in self.dropouts:
            d.rng = rng

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[2:] != (self.image_size, self.image_size):
            raise ValueError(f"generator expects N x C x {self.image_size} x {self.image_size}, got {x.shape}")
        skips = []
        h = x
        for blk in self.enc:
            h = blk.forward(h, train)
            skips.append(h)
        n = len(self.enc)
        self._split = []
        for j, blk in enumerate(self.dec):
            h = blk.forward(h, train)
            self._split.append(h.shape[1])
            h = np.concatenate([h, skips[n - 2 - j]], axis=1)
        return self.head.forward(h, train)

    def backward(self, grad):
        n = len(self.enc)
        grad = self.head.backward(grad)
        skip_grads = [None] * n
        for j in reversed(range(len(self.dec))):
            c = self._split[j]
            skip_grads[n - 2 - j] = grad[:, c:]
            grad = self.dec[j].backward(np.ascontiguousarray(grad[:, :c]))
        for i in reversed(range(n)):
            if skip_grads[i] is not None:
                grad = grad + skip_grads[i]
            grad = self.enc[i].backward(grad)
        return grad


class DiscriminatorNet(Module):
    """Patch classifier over the channel-concatenated (image, mask) pair.

    All blocks but the last use stride 2; the last block and the logit layer
    use stride 1, which gives a 30x30 logit grid for 256x256 input with the
    default channels.
    """

    def __init__(self, channels=PAPER_DISC_CHANNELS, in_channels=2, leaky_slope=0.2,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channels = tuple(channels)
        blocks = []
        prev = in_channels
        for i, c in enumerate(channels):
            stride = 1 if i == len(channels) - 1 else 2
            layers = [Conv2d(prev, c, stride=stride, rng=rng, dtype=dtype)]
            if i > 0:
                layers.append(BatchNorm2d(c, dtype=dtype))
            layers.append(LeakyReLU(leaky_slope))
            blocks.append(Sequential(*layers))
            prev = c
        blocks.append(Sequential(Conv2d(prev, 1, stride=1, rng=rng, dtype=dtype)))
        self.blocks = blocks

    def children(self):
        for i, blk in enumerate(self.blocks):
            yield f"block{i}", blk

    def forward_pair(self, image, mask, train=False):
        if image.shape != mask.shape:
            raise ValueError(f"image {image.shape} and mask {mask.shape} differ in shape")
        return self.forward(np.concatenate([image, mask], axis=1), train)

    def forward(self, x, train=False):
        for blk in self.blocks:
            x = blk.forward(x, train)
        return x

    def backward(self, grad):
        for blk in reversed(self.blocks):
            grad = blk.backward(grad)
        return grad

    def backward_mask(self, grad, image_channels=1):
        """Gradient w.r.t. the candidate-mask half of the input pair."""
        return self.backward(grad)[:, image_channels:]


@dataclass
class GanModel:
    arch: ArchSpec
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, arch: ArchSpec = ArchSpec(), seed: int = 0, dtype=np.float32) -> "GanModel":
        g_rng, d_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
        gen = GeneratorNet(arch.gen_channels, dropout_blocks=arch.dropout_blocks,
                           dropout_rate=arch.dropout_rate, leaky_slope=arch.leaky_slope,
                           rng=g_rng, dtype=dtype)
        disc = DiscriminatorNet(arch.disc_channels, leaky_slope=arch.leaky_slope,
                                rng=d_rng, dtype=dtype)
        return cls(arch, gen, disc)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"G.{k}": v for k, v in self.generator.state_arrays().items()}
        out.update({f"D.{k}": v for k, v in self.discriminator.state_arrays().items()})
        return out

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Eval-mode generator output for one 2-D frame-space image."""
        x = image.astype(self.generator.enc[0].layers[0].params["weight"].dtype)[None, None]
        return self.generator.forward(x, train=False)[0, 0]
