"""Training objectives and the pluggable perceptual feature extractor."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

CX_BANDWIDTH = 0.5
CX_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    vgg: float = 0.5
    cx: float = 0.1
    cadv: float = 0.01
    kl: float = 10.0

    def __post_init__(self):
        for k in ("vgg", "cx", "cadv", "kl"):
            if not getattr(self, k) >= 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


def _same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l_sil(pred, gt):
    _same(pred, gt)
    return (pred - gt).abs().mean()


def l_gar(probs, onehot):
    """Mean L1 between the class-probability stack and the one-hot target."""
    _same(probs, onehot)
    return (probs - onehot).abs().mean()


def l_rec(pred, gt):
    _same(pred, gt)
    return (pred - gt).abs().mean()


# ---------------------------------------------------------------- extractors


class PerceptualExtractor(nn.Module):
    """Four stride-2 conv stages; stage i returns the second conv's activation.

    Trained as an autoencoder on synthetic renders (see ``fit_autoencoder``)
    and frozen afterwards.  Each stage's output is divided by a calibration
    scale so its mean magnitude matches the mean pixel magnitude of the
    fitting images, keeping feature losses on the same scale as pixel L1.
    """

    n_stages = 4

    def __init__(self, width: int = 16, slope: float = 0.2):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width, 4 * width]
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv2d(a, b, 3, 2, 1), nn.LeakyReLU(slope),
                          nn.Conv2d(b, b, 3, 1, 1), nn.LeakyReLU(slope))
            for a, b in zip(chans, chans[1:]))
        self.register_buffer("scale", torch.ones(4))
        self.width = width

    def _raw(self, x):
        x = x - 0.5
        out = []
        for s in self.stages:
            x = s(x)
            out.append(x)
        return out

    def forward(self, x) -> list[torch.Tensor]:
        return [f / s for f, s in zip(self._raw(x), self.scale)]

    @torch.no_grad()
    def calibrate(self, images: torch.Tensor, chunk: int = 64) -> None:
        sums = torch.zeros(4, dtype=torch.float64)
        for i in range(0, len(images), chunk):
            feats = self._raw(images[i:i + chunk])
            sums += torch.stack([f.abs().mean(dim=(1, 2, 3)).sum() for f in feats]).double()
        self.scale.copy_((sums / len(images) / images.abs().mean().double()).float())

    def freeze(self) -> "PerceptualExtractor":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def fit_autoencoder(self, images: torch.Tensor, steps: int = 1500, batch: int = 16,
                        lr: float = 2e-3, seed: int = 0) -> list[float]:
        """Train the stages jointly with a throwaway decoder; returns the loss curve."""
        gen = torch.Generator().manual_seed(seed)
        chans = [4 * self.width, 2 * self.width, self.width, self.width // 2, self.width // 2]
        dec = nn.Sequential(*[m for a, b in zip(chans, chans[1:]) for m in
                              (nn.ConvTranspose2d(a, b, 4, 2, 1), nn.LeakyReLU(0.2))],
                            nn.Conv2d(chans[-1], 3, 3, 1, 1))
        params = list(self.parameters()) + list(dec.parameters())
        opt = torch.optim.Adam(params, lr=lr)
        curve = []
        for _ in range(steps):
            idx = torch.randint(len(images), (batch,), generator=gen)
            x = images[idx]
            rec = torch.sigmoid(dec(self._raw(x)[-1]))
            loss = (rec - x).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(loss.item())
        self.calibrate(images)
        return curve


class AffineExtractor(nn.Module):
    """Linear stand-in: stage i is a fixed 1x1 projection of a 2^i average pool."""

    n_stages = 4

    def __init__(self, channels: int = 4, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.mats = [torch.randn(channels, 3, generator=g) for _ in range(4)]

    def forward(self, x):
        out = []
        for i, m in enumerate(self.mats):
            p = F.avg_pool2d(x, 2 ** (i + 1))
            out.append(torch.einsum("oc,nchw->nohw", m.to(x.dtype), p))
        return out


class Vgg16Extractor(nn.Module):
    """Adapter for a published 16-layer classifier (conv-i-2 activations).

    Needs torchvision and a local state-dict file; nothing in the test suite
    depends on it.
    """

    n_stages = 4
    _cut = (3, 8, 13, 20)  # relu after conv1_2, conv2_2, conv3_2, conv4_2

    def __init__(self, weights_path: str):
        super().__init__()
        from torchvision.models import vgg16

        net = vgg16(weights=None)
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.features = net.features[: self._cut[-1] + 1].eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x - self.mean) / self.std
        out = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self._cut:
                out.append(x)
        return out


def l_vgg(pred, gt, extractor):
    _same(pred, gt)
    fa, fb = extractor(pred), extractor(gt)
    if len(fa) != 4:
        raise ValueError("extractor must expose 4 stages")
    return sum((a - b).abs().mean() for a, b in zip(fa, fb))


# ---------------------------------------------------------------- contextual loss


def _dedup(y: torch.Tensor):
    """Unique rows of y (sorted) with multiplicities; differentiable in y."""
    uniq, inv, counts = torch.unique(y.detach(), dim=0, return_inverse=True, return_counts=True)
    first = torch.full((len(uniq),), len(y), dtype=torch.long)
    first = first.scatter_reduce(0, inv, torch.arange(len(y)), reduce="amin")
    return y[first], counts.to(y.dtype)


def contextual_similarity_features(x: torch.Tensor, y: torch.Tensor, h: float = CX_BANDWIDTH,
                                   eps: float = CX_EPS) -> torch.Tensor:
    """Contextual similarity g in [0, 1] between feature sets x (N, C) and y (M, C).

    Identical target features are merged before normalisation and weighted
    by multiplicity in the final average, so duplicates in flat regions do
    not split affinity and the result depends on y only as a multiset.
    """
    yu, cnt = _dedup(y)
    mu = (cnt[:, None] * yu).sum(0) / cnt.sum()
    xn = F.normalize(x - mu, dim=1, eps=1e-12)
    yn = F.normalize(yu - mu, dim=1, eps=1e-12)
    d = (1 - xn @ yn.T).clamp_min(0)  # (N, U)
    d_rel = d / (d.min(1, keepdim=True).values + eps)
    w = torch.exp((1 - d_rel) / h)
    cx = w / w.sum(1, keepdim=True)
    return (cnt * cx.max(0).values).sum() / cnt.sum()


def _grid_to_set(f):
    return f.flatten(1).T


def l_cx(pred, gt, extractor, stage: int = 3, h: float = CX_BANDWIDTH, eps: float = CX_EPS):
    _same(pred, gt)
    fa = extractor(pred)[stage - 1].double()
    fb = extractor(gt)[stage - 1].double()
    if fa.shape[-1] * fa.shape[-2] == 0:
        raise ValueError("empty feature grid")
    losses = []
    for a, b in zip(fa, fb):
        g = contextual_similarity_features(_grid_to_set(a), _grid_to_set(b), h, eps)
        losses.append(-torch.log(g.clamp_min(eps)))
    return torch.stack(losses).mean().to(pred.dtype)


# ---------------------------------------------------------------- adversarial / KL


def l_cadv(disc, fake, real, g_onehot):
    """Least-squares adversarial terms over the patch grid: (generator, discriminator)."""
    _same(fake, real)
    d_real = disc(real, g_onehot)
    d_fake = disc(fake.detach(), g_onehot)
    d_term = 0.5 * ((d_real - 1) ** 2).mean() + 0.5 * (d_fake ** 2).mean()
    g_term = ((disc(fake, g_onehot) - 1) ** 2).mean()
    return g_term, d_term


def l_kl(mu, sigma):
    """KL of N(mu, sigma^2) from N(0, 1), averaged over latent dims and batch."""
    if (sigma <= 0).any():
        raise ValueError("sigma must be positive")
    d = mu.shape[-1]
    per = 0.5 * (mu ** 2 + sigma ** 2 - torch.log(sigma ** 2) - 1).sum(-1) / d
    return per.mean()


def l_kl_logvar(mu, logvar):
    return l_kl(mu, torch.exp(0.5 * logvar))


RENDER_TERMS = ("l_rec", "l_vgg", "l_cx", "l_cadv", "l_kl")


class LossDivergence(FloatingPointError):
    pass


def l_render_total(terms: dict, weights: LossWeights = LossWeights()):
    for k in RENDER_TERMS:
        v = float(terms[k].detach()) if torch.is_tensor(terms[k]) else float(terms[k])
        if not math.isfinite(v):
            raise LossDivergence(f"{k} is not finite ({v})")
    return (terms["l_rec"] + weights.vgg * terms["l_vgg"] + weights.cx * terms["l_cx"]
            + weights.cadv * terms["l_cadv"] + weights.kl * terms["l_kl"])
