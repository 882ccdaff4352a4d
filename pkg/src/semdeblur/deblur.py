"""GAN deblurring branch: generator with tree-feature coupling, WGAN-GP critic,
and the adversarial / perceptual losses."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import autograd, nn

from .errors import CheckpointError, ShapeError
from .torchutil import init_module, seeded_dropout


def _in(channels):
    return nn.InstanceNorm2d(channels)


class ResBlock(nn.Module):
    """conv-IN-ReLU-dropout-conv-IN with an identity skip."""

    def __init__(self, channels: int, dropout: float = 0.0):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _in(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _in(channels)
        self.dropout = dropout

    def forward(self, x, rng=None):
        y = F.relu(self.norm1(self.conv1(x)))
        y = seeded_dropout(y, self.dropout, rng)
        y = self.norm2(self.conv2(y))
        return x + y


class CouplingBlock(nn.Module):
    """Inject concatenated tree node maps into a generator feature map.

    The tree map (7*c' channels) is resized bilinearly to the feature map's
    resolution, convolved down to c'' channels with a ReLU, and concatenated
    channel-wise, doubling the channel count.
    """

    def __init__(self, tree_channels: int, layer_channels: int):
        super().__init__()
        self.tree_channels = tree_channels
        self.layer_channels = layer_channels
        self.conv = nn.Conv2d(tree_channels, layer_channels, 3, padding=1)

    def forward(self, layer_feats: torch.Tensor, coupled: torch.Tensor) -> torch.Tensor:
        if coupled.shape[1] != self.tree_channels:
            raise ShapeError(
                f"coupled map has {coupled.shape[1]} channels, expected {self.tree_channels}")
        if layer_feats.shape[1] != self.layer_channels:
            raise ShapeError(
                f"layer map has {layer_feats.shape[1]} channels, expected {self.layer_channels}")
        if coupled.shape[-2:] != layer_feats.shape[-2:]:
            coupled = F.interpolate(coupled, size=layer_feats.shape[-2:],
                                    mode="bilinear", align_corners=False)
        return torch.cat([layer_feats, F.relu(self.conv(coupled))], dim=1)


class Generator(nn.Module):
    """Encoder / nine-ResBlock / decoder restorer with a global residual skip.

    The decoder concatenates mirror-resolution encoder features, and the
    tree coupling happens right before the final output convolution, so the
    last conv consumes 2*c'' channels where c'' = 2*ngf.
    """

    def __init__(self, ngf: int = 32, tree_channels: int = 224,
                 n_res_blocks: int = 9, dropout: float = 0.0, seed: int = 0):
        super().__init__()
        self.ngf = ngf
        self.tree_channels = tree_channels
        self.enc0 = nn.Sequential(
            nn.Conv2d(3, ngf, 7, padding=3, padding_mode="reflect"),
            _in(ngf), nn.ReLU())
        self.enc1 = nn.Sequential(
            nn.Conv2d(ngf, 2 * ngf, 3, stride=2, padding=1),
            _in(2 * ngf), nn.ReLU())
        self.enc2 = nn.Sequential(
            nn.Conv2d(2 * ngf, 4 * ngf, 3, stride=2, padding=1),
            _in(4 * ngf), nn.ReLU())
        self.res_blocks = nn.ModuleList(
            [ResBlock(4 * ngf, dropout) for _ in range(n_res_blocks)])
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(4 * ngf, 2 * ngf, 3, stride=2, padding=1, output_padding=1),
            _in(2 * ngf), nn.ReLU())
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(4 * ngf, ngf, 3, stride=2, padding=1, output_padding=1),
            _in(ngf), nn.ReLU())
        self.coupling = CouplingBlock(tree_channels, self.coupling_channels)
        self.out_conv = nn.Conv2d(2 * self.coupling_channels, 3, 7,
                                  padding=3, padding_mode="reflect")
        init_module(self, seed)

    @property
    def coupling_channels(self) -> int:
        """c'': channels of the feature map entering the coupling block."""
        return 2 * self.ngf

    def forward(self, image: torch.Tensor, coupled: torch.Tensor | None = None,
                rng: torch.Generator | None = None) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        if image.shape[-2] % 4 or image.shape[-1] % 4:
            raise ShapeError("image height and width must be divisible by 4")
        e0 = self.enc0(image)
        e1 = self.enc1(e0)
        x = self.enc2(e1)
        for block in self.res_blocks:
            x = block(x, rng)
        x = self.up1(x)
        x = self.up2(torch.cat([x, e1], dim=1))
        feats = torch.cat([x, e0], dim=1)  # (B, c'', H, W)
        if coupled is None:
            coupled = feats.new_zeros(
                (feats.shape[0], self.tree_channels, *feats.shape[-2:]))
        residual = self.out_conv(self.coupling(feats, coupled))
        return torch.clamp(image + residual, 0.0, 1.0)


class Critic(nn.Module):
    """Patch critic: four stride-2 convs (no norm on the first) and a score map."""

    def __init__(self, ndf: int = 32, seed: int = 0):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(ndf, 2 * ndf, 4, stride=2, padding=1), _in(2 * ndf), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * ndf, 4 * ndf, 4, stride=2, padding=1), _in(4 * ndf), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * ndf, 8 * ndf, 4, stride=2, padding=1), _in(8 * ndf), nn.LeakyReLU(0.2),
        )
        self.score = nn.Conv2d(8 * ndf, 1, 3, padding=1)
        init_module(self, seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-sample scalar: mean of the patch score map."""
        return self.score(self.features(x)).mean(dim=(1, 2, 3))


class PerceptualExtractor(nn.Module):
    """Frozen three-conv feature network used by the content loss.

    Defaults to seeded random weights (a fixed random projection is still a
    valid overfitting metric); `load_weights` accepts a state-dict file
    exported from a pretrained network with matching layer shapes.
    """

    def __init__(self, channels: int = 32, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(3, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1)
        init_module(self, seed)
        self.requires_grad_(False)

    def load_weights(self, path) -> None:
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError) as exc:
            raise CheckpointError(f"cannot load perceptual weights from {path}: {exc}") from exc
        self.load_state_dict(state)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.conv3(x)


def critic_score(critic: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Scalar critic score: per-sample patch-map means, averaged over the batch."""
    return critic(images).mean()


def generator_gan_loss(image: torch.Tensor, coupled: torch.Tensor | None,
                       generator: Generator, critic: nn.Module,
                       rng: torch.Generator | None = None) -> torch.Tensor:
    """Adversarial generator loss: negated critic score of the restoration."""
    return -critic_score(critic, generator(image, coupled, rng))


def critic_wgan_gp_loss(critic: nn.Module, real: torch.Tensor, fake: torch.Tensor,
                        gp_weight: float = 10.0,
                        rng: torch.Generator | None = None) -> torch.Tensor:
    """Wasserstein critic loss with the unit-gradient-norm penalty.

    Interpolates eps*real + (1-eps)*fake with per-sample uniform eps and
    penalizes squared deviation of the interpolant gradient norm from 1.
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real/fake batch shapes differ: "
                         f"{tuple(real.shape)} vs {tuple(fake.shape)}")
    fake = fake.detach()
    real = real.detach()
    wasserstein = critic(fake).mean() - critic(real).mean()
    if gp_weight == 0.0:
        return wasserstein
    eps_shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    eps = torch.rand(eps_shape, generator=rng, dtype=real.dtype, device=real.device)
    x_hat = (eps * real + (1.0 - eps) * fake).requires_grad_(True)
    scores = critic(x_hat)
    grads, = autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    penalty = ((norms - 1.0) ** 2).mean()
    return wasserstein + gp_weight * penalty


def perceptual_loss(extractor: nn.Module, target: torch.Tensor,
                    restored: torch.Tensor) -> torch.Tensor:
    """Squared feature distance, summed over channels, divided by w_o * h_o."""
    if target.shape != restored.shape:
        raise ShapeError(f"image shapes differ: "
                         f"{tuple(target.shape)} vs {tuple(restored.shape)}")
    fa = extractor(target)
    fb = extractor(restored)
    area = fa.shape[-1] * fa.shape[-2]
    per_sample = ((fa - fb) ** 2).flatten(1).sum(dim=1) / area
    return per_sample.mean()


def imd_loss(sharp: torch.Tensor, blurry: torch.Tensor,
             coupled: torch.Tensor | None, generator: Generator,
             critic: nn.Module, extractor: nn.Module, content_weight: float = 100.0,
             rng: torch.Generator | None = None) -> torch.Tensor:
    """Combined deblurring loss: adversarial + content_weight * perceptual."""
    total, _, _ = imd_loss_parts(sharp, blurry, coupled, generator, critic,
                                 extractor, content_weight, rng)
    return total


def imd_loss_parts(sharp, blurry, coupled, generator, critic, extractor,
                   content_weight=100.0, rng=None):
    """(total, adversarial, content) with a single generator forward."""
    restored = generator(blurry, coupled, rng)
    gan = -critic_score(critic, restored)
    content = perceptual_loss(extractor, sharp, restored)
    return gan + content_weight * content, gan, content
