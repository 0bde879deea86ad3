"""SilNet, GarNet, RenderNet and the label-conditioned patch discriminator.

All networks are encoder/decoder stacks of stride-2 4x4 convolutions
(C-BLK) and transposed convolutions (D-BLK) with leaky rectification.
Inputs are one-hot label planes and [0, 1] images in NCHW layout.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .core import N_GARMENT_CLASSES, N_POSE_CLASSES

BG_LOGIT_GAP = 1e4


@dataclass(frozen=True)
class NetConfig:
    width: int = 32
    depth: int = 4
    latent: int = 128
    slope: float = 0.2
    disc_depth: int = 3
    norm: str = "instance"  # "instance", "batch" or "none" inside C-BLK / D-BLK

    def channels(self, i: int) -> int:
        return self.width * min(2 ** i, 8)

    def check_input(self, h: int, w: int) -> None:
        k = 2 ** max(self.depth, self.disc_depth)
        if h % k or w % k:
            raise ValueError(f"input {h}x{w} not divisible by {k}")

    def to_json(self) -> dict:
        return asdict(self)


def _norm(kind, ch):
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    if kind == "instance":
        return nn.InstanceNorm2d(ch, affine=True)
    return nn.Identity()


def c_blk(cin, cout, slope, norm="none"):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1), _norm(norm, cout), nn.LeakyReLU(slope))


def d_blk(cin, cout, slope, norm="none"):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), _norm(norm, cout), nn.LeakyReLU(slope))


class Encoder(nn.Module):
    def __init__(self, cin: int, cfg: NetConfig):
        super().__init__()
        chans = [cin] + [cfg.channels(i) for i in range(cfg.depth)]
        self.blocks = nn.ModuleList(c_blk(a, b, cfg.slope, cfg.norm if i else "none")
                                    for i, (a, b) in enumerate(zip(chans, chans[1:])))

    def forward(self, x):
        feats = []
        for b in self.blocks:
            x = b(x)
            feats.append(x)
        return feats


class UDecoder(nn.Module):
    """Transposed-conv decoder taking skips from one encoder."""

    def __init__(self, cfg: NetConfig, cout: int):
        super().__init__()
        d = cfg.depth
        ups = []
        for i in range(d - 1, 0, -1):
            cin = cfg.channels(i) * (1 if i == d - 1 else 2)
            ups.append(d_blk(cin, cfg.channels(i - 1), cfg.slope, cfg.norm))
        self.ups = nn.ModuleList(ups)
        last_in = cfg.channels(0) * (2 if d > 1 else 1)
        self.last = d_blk(last_in, cfg.width, cfg.slope, cfg.norm)
        self.head = nn.Conv2d(cfg.width, cout, 3, 1, 1)

    def forward(self, x, skips):
        for up, skip in zip(self.ups, reversed(skips[:-1])):
            x = torch.cat([up(x), skip], 1)
        return self.head(self.last(x))


def _shape_check(*tensors):
    hw = {t.shape[-2:] for t in tensors}
    if len(hw) != 1:
        raise ValueError(f"spatial shape mismatch: {sorted(tuple(s) for s in hw)}")
    n = {t.shape[0] for t in tensors}
    if len(n) != 1:
        raise ValueError("batch size mismatch")


class SilNet(nn.Module):
    """Target-pose encoder with skips, source encoder mixed at the bottleneck."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        top = cfg.channels(cfg.depth - 1)
        self.enc_t = Encoder(N_POSE_CLASSES, cfg)
        self.enc_s = Encoder(N_POSE_CLASSES + 1 + N_GARMENT_CLASSES, cfg)
        self.fuse = nn.Conv2d(2 * top, top, 1)
        self.dec = UDecoder(cfg, 1)

    def forward(self, p_t, p_s, s_s, g_s):
        _shape_check(p_t, p_s, s_s, g_s)
        self.cfg.check_input(*p_t.shape[-2:])
        ft = self.enc_t(p_t)
        fs = self.enc_s(torch.cat([p_s, s_s, g_s], 1))
        x = F.leaky_relu(self.fuse(torch.cat([ft[-1], fs[-1]], 1)), self.cfg.slope)
        return torch.sigmoid(self.dec(x, ft))


class GarNet(nn.Module):
    """Siamese encoder (one weight set for target and source) and a decoder.

    Branch input: pose one-hot, silhouette, garment one-hot, validity plane.
    Logits outside the target silhouette are pinned to background.
    """

    IN_CH = N_POSE_CLASSES + 1 + N_GARMENT_CLASSES + 1

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        top = cfg.channels(cfg.depth - 1)
        self.enc = Encoder(self.IN_CH, cfg)
        self.fuse = nn.Conv2d(2 * top, top, 1)
        self.dec = UDecoder(cfg, N_GARMENT_CLASSES)

    def logits(self, g_pseudo, valid_t, p_t, s_t, p_s, s_s, g_s):
        _shape_check(g_pseudo, valid_t, p_t, s_t, p_s, s_s, g_s)
        self.cfg.check_input(*p_t.shape[-2:])
        ft = self.enc(torch.cat([p_t, s_t, g_pseudo, valid_t], 1))
        fs = self.enc(torch.cat([p_s, s_s, g_s, s_s], 1))
        x = F.leaky_relu(self.fuse(torch.cat([ft[-1], fs[-1]], 1)), self.cfg.slope)
        raw = self.dec(x, ft)
        bg = torch.full_like(raw, -BG_LOGIT_GAP)
        bg[:, 0] = 0.0
        inside = s_t > 0.5
        return torch.where(inside, raw, bg)

    def forward(self, *args):
        return torch.softmax(self.logits(*args), 1)


class Spade(nn.Module):
    """Parameter-free instance norm, then per-site scale and shift from a conv head."""

    def __init__(self, ch: int, cond_ch: int, hidden: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(ch, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(cond_ch, hidden, 3, 1, 1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, ch, 3, 1, 1)
        self.beta = nn.Conv2d(hidden, ch, 3, 1, 1)

    def forward(self, x, cond):
        cond = F.interpolate(cond, size=x.shape[-2:], mode="nearest")
        h = self.shared(cond)
        return self.norm(x) * (1 + self.gamma(h)) + self.beta(h)


class MultiSpadeBlock(nn.Module):
    """Residual block modulated by the garment stream then the pseudo-image stream."""

    def __init__(self, ch: int, cond_a: int, cond_b: int, hidden: int, slope: float):
        super().__init__()
        self.a1, self.b1 = Spade(ch, cond_a, hidden), Spade(ch, cond_b, hidden)
        self.a2, self.b2 = Spade(ch, cond_a, hidden), Spade(ch, cond_b, hidden)
        self.c1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.c2 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.slope = slope

    def forward(self, x, ca, cb):
        h = self.c1(F.leaky_relu(self.b1(self.a1(x, ca), cb), self.slope))
        h = self.c2(F.leaky_relu(self.b2(self.a2(h, ca), cb), self.slope))
        return x + h


class RenderNet(nn.Module):
    """Source VAE encoder + two target encoders + Multi-SPADE decoder."""

    COND_A = N_GARMENT_CLASSES + 1  # garment one-hot + silhouette
    COND_B = 3 + 1  # pseudo image + its coverage

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        d, top = cfg.depth, cfg.channels(cfg.depth - 1)
        self.enc_s = Encoder(3 + 1 + N_GARMENT_CLASSES, cfg)
        self.mu = nn.Linear(top, cfg.latent)
        self.logvar = nn.Linear(top, cfg.latent)
        self.z_proj = nn.Linear(cfg.latent, top)
        self.enc_a = Encoder(self.COND_A, cfg)
        self.enc_b = Encoder(self.COND_B, cfg)
        self.fuse = nn.Conv2d(3 * top, top, 1)
        hidden = cfg.width
        chans = [cfg.channels(i) for i in range(d - 1, -1, -1)] + [cfg.width]
        self.blocks = nn.ModuleList(MultiSpadeBlock(c, self.COND_A, self.COND_B, hidden, cfg.slope)
                                    for c in chans)
        self.ups = nn.ModuleList(d_blk(a, b, cfg.slope) for a, b in zip(chans, chans[1:]))
        # full-resolution skip: the head also sees the raw conditioning planes
        self.out = nn.Sequential(
            nn.Conv2d(cfg.width + self.COND_A + self.COND_B, cfg.width, 3, 1, 1),
            nn.LeakyReLU(cfg.slope), nn.Conv2d(cfg.width, 3, 3, 1, 1))

    def encode_source(self, i_s, s_s, g_s):
        h = self.enc_s(torch.cat([i_s, s_s, g_s], 1))[-1].mean((2, 3))
        return self.mu(h), self.logvar(h)

    def forward(self, i_pseudo, cov, s_t, g_t, i_s, s_s, g_s, noise=None, z_override=None):
        """Returns (image, mu, logvar).  ``noise`` enables reparameterised sampling."""
        _shape_check(i_pseudo, cov, s_t, g_t, i_s, s_s, g_s)
        self.cfg.check_input(*s_t.shape[-2:])
        mu, logvar = self.encode_source(i_s, s_s, g_s)
        if z_override is not None:
            z = z_override
        elif noise is not None:
            z = mu + torch.exp(0.5 * logvar) * noise
        else:
            z = mu
        ca = torch.cat([g_t, s_t], 1)
        cb = torch.cat([i_pseudo, cov], 1)
        fa, fb = self.enc_a(ca)[-1], self.enc_b(cb)[-1]
        zt = self.z_proj(z)[:, :, None, None].expand_as(fa)
        x = F.leaky_relu(self.fuse(torch.cat([fa, fb, zt], 1)), self.cfg.slope)
        for i, blk in enumerate(self.blocks):
            x = blk(x, ca, cb)
            if i < len(self.ups):
                x = self.ups[i](x)
        return torch.sigmoid(self.out(torch.cat([x, ca, cb], 1))), mu, logvar


class Discriminator(nn.Module):
    """Patch discriminator over image concatenated with one-hot garment labels."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        chans = [3 + N_GARMENT_CLASSES] + [cfg.channels(i) for i in range(cfg.disc_depth)]
        self.body = nn.Sequential(*(c_blk(a, b, cfg.slope) for a, b in zip(chans, chans[1:])))
        self.head = nn.Conv2d(chans[-1], 1, 3, 1, 1)

    def forward(self, image, g):
        _shape_check(image, g)
        return self.head(self.body(torch.cat([image, g], 1)))


NETS = {"sil": SilNet, "gar": GarNet, "render": RenderNet, "disc": Discriminator}


def build(kind: str, cfg: NetConfig, seed: int) -> nn.Module:
    """Deterministic construction from (config, seed)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = NETS[kind](cfg)
    return net


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
