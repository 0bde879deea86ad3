"""Supervised trainers for SilNet, GarNet and RenderNet (+ discriminator).

Each network trains separately on ground-truth upstream inputs (teacher
forcing).  Batches are drawn from a ``PairBank`` of uint8 arrays, so
in-memory generation and datasets read back from disk train identically.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import synthdata as sd
from .core import N_GARMENT_CLASSES, N_POSE_CLASSES, GarmentMap, PoseMap, RgbImage, SilhouetteMask, UvAtlas
from .losses import (LossDivergence, LossWeights, PerceptualExtractor, RENDER_TERMS, l_cadv, l_cx,
                     l_gar, l_kl_logvar, l_rec, l_render_total, l_sil, l_vgg)
from .networks import NetConfig, build

log = logging.getLogger(__name__)

CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    batch: int = 8
    steps: int = 5000
    seed: int = 0
    ckpt_every: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    teacher_forcing: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass(frozen=True)
class DataConfig:
    n_figures: int = 20
    pairs_per_figure: int = 50
    size: int = 128
    uv_shape: tuple[int, int] = (256, 384)
    master_seed: int = 0
    figure_offset: int = 0
    same_pose: bool = False


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: Path | None):
        super().__init__(msg)
        self.last_good = last_good


# ---------------------------------------------------------------- data


class PairBank:
    """Source/target scenes of many pairs as stacked uint8 arrays."""

    KEYS = ("img", "pose", "sil", "gar")

    def __init__(self, arrays: dict[str, np.ndarray], meta: list[dict] | None = None):
        self.a = arrays
        self.meta = meta or []

    def __len__(self):
        return len(self.a["src_img"])

    @property
    def size(self) -> int:
        return self.a["src_img"].shape[1]

    @classmethod
    def from_pairs(cls, pairs, meta=None) -> "PairBank":
        cols = {f"{t}_{k}": [] for t in ("src", "tgt") for k in cls.KEYS}
        for src, tgt in pairs:
            for t, sc in (("src", src), ("tgt", tgt)):
                cols[f"{t}_img"].append(np.round(sc.image.data * 255).astype(np.uint8))
                cols[f"{t}_pose"].append(sc.pose.data)
                cols[f"{t}_sil"].append(sc.sil.data)
                cols[f"{t}_gar"].append(sc.gar.data)
        return cls({k: np.stack(v) for k, v in cols.items()}, meta)

    @classmethod
    def generate(cls, dc: DataConfig) -> "PairBank":
        atlas = UvAtlas.grid(*dc.uv_shape)
        pairs, meta = [], []
        for i in range(dc.figure_offset, dc.figure_offset + dc.n_figures):
            spec = sd.generate_figure(sd.figure_seed(dc.master_seed, i))
            for j in range(dc.pairs_per_figure):
                ps = sd.pair_seed(dc.master_seed, i, j)
                pairs.append(sd.make_pair(spec, ps, dc.size, atlas, same_pose=dc.same_pose))
                meta.append({"figure": spec.figure_id, "pair": j, "seed": ps})
        return cls.from_pairs(pairs, meta)

    @classmethod
    def load(cls, root) -> "PairBank":
        from . import io as pio

        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        cols = {f"{t}_{k}": [] for t in ("src", "tgt") for k in cls.KEYS}
        meta = []
        for fig in manifest["figures"]:
            for p in fig["pairs"]:
                pdir = root / p["path"]
                for t in ("src", "tgt"):
                    sc = pio.read_scene(pdir, t)
                    cols[f"{t}_img"].append(np.round(sc["image"].data * 255).astype(np.uint8))
                    cols[f"{t}_pose"].append(sc["pose"].data)
                    cols[f"{t}_sil"].append(sc["sil"].data)
                    cols[f"{t}_gar"].append(sc["gar"].data)
                meta.append({"figure": fig["id"], "pair": p["id"], "seed": p["seed"]})
        return cls({k: np.stack(v) for k, v in cols.items()}, meta)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.a):
            h.update(self.a[k].tobytes())
        return h.hexdigest()


def onehot(labels, n: int) -> torch.Tensor:
    t = torch.as_tensor(np.array(labels), dtype=torch.long)
    return F.one_hot(t, n).permute(0, 3, 1, 2).float()


def plane(mask) -> torch.Tensor:
    return torch.as_tensor(np.array(mask), dtype=torch.float32)[:, None]


def image_t(img_u8_or_f) -> torch.Tensor:
    a = np.asarray(img_u8_or_f)
    t = torch.as_tensor(a, dtype=torch.float32)
    if a.dtype == np.uint8:
        t = t / 255.0
    return t.permute(0, 3, 1, 2)


def degrade_batch(bank: PairBank, idx, seed: int, step: int, n_patches=None):
    """Per-sample degraded pseudo inputs with RNG keyed by (seed, step, slot)."""
    g_t, valid, i_t, cov = [], [], [], []
    for slot, k in enumerate(idx):
        rng = np.random.default_rng([seed, step, slot, 0xDE])
        pose = PoseMap(bank.a["tgt_pose"][k])
        gar = GarmentMap(bank.a["tgt_gar"][k])
        sil = SilhouetteMask(bank.a["tgt_sil"][k])
        img = RgbImage(bank.a["tgt_img"][k].astype(np.float32) / 255)
        gp = sd.degrade_garment(gar, pose, rng, n_patches)
        ip, sp = sd.degrade_image(img, sil, pose, rng, n_patches)
        g_t.append(gp.data)
        valid.append(gp.data != 0)
        i_t.append(ip.data)
        cov.append(sp.data)
    return (onehot(np.stack(g_t), N_GARMENT_CLASSES), plane(np.stack(valid)),
            image_t(np.stack(i_t)), plane(np.stack(cov)))


def batch_tensors(bank: PairBank, idx) -> dict[str, torch.Tensor]:
    a = bank.a
    return {
        "p_s": onehot(a["src_pose"][idx], N_POSE_CLASSES), "s_s": plane(a["src_sil"][idx]),
        "g_s": onehot(a["src_gar"][idx], N_GARMENT_CLASSES), "i_s": image_t(a["src_img"][idx]),
        "p_t": onehot(a["tgt_pose"][idx], N_POSE_CLASSES), "s_t": plane(a["tgt_sil"][idx]),
        "g_t": onehot(a["tgt_gar"][idx], N_GARMENT_CLASSES), "i_t": image_t(a["tgt_img"][idx]),
    }


# ---------------------------------------------------------------- checkpoints


def _tensor_digest(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k]).tobytes())
    return h.hexdigest()


def save_checkpoint(path, net: torch.nn.Module, kind: str, seed: int, teacher_forcing: bool = True,
                    extra: dict | None = None) -> Path:
    """``.npz`` of named tensors plus a ``__meta__`` JSON record (version, config, hash)."""
    state = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    cfg = net.cfg.to_json() if hasattr(net, "cfg") else {"width": getattr(net, "width", None)}
    meta = {"version": CKPT_VERSION, "kind": kind, "net_config": cfg, "seed": seed,
            "teacher_forcing": teacher_forcing, "shapes": {k: list(v.shape) for k, v in state.items()},
            "sha256": _tensor_digest(state), "extra": extra or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8), **state)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    z = np.load(path)
    meta = json.loads(z["__meta__"].tobytes().decode())
    if meta.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    state = {k: z[k] for k in z.files if k != "__meta__"}
    if _tensor_digest(state) != meta["sha256"]:
        raise ValueError(f"{path}: content hash mismatch")
    for k, shp in meta["shapes"].items():
        if list(state[k].shape) != shp:
            raise ValueError(f"{path}: tensor {k} has wrong shape")
    return meta, state


def load_checkpoint(path, expect_kind: str | None = None, require_teacher_forcing: bool | None = None):
    meta, state = read_checkpoint(path)
    kind = meta["kind"]
    if expect_kind and kind != expect_kind:
        raise ValueError(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    if require_teacher_forcing is not None and meta["teacher_forcing"] != require_teacher_forcing:
        raise ValueError(f"{path}: teacher-forcing flag mismatch")
    if kind == "extractor":
        net = PerceptualExtractor(meta["net_config"]["width"])
    else:
        net = build(kind, NetConfig(**meta["net_config"]), meta["seed"])
    net.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    net.eval()
    if kind == "extractor":
        net.freeze()
    return net, meta


# ---------------------------------------------------------------- loops


def _adam(params, tc: TrainConfig):
    return torch.optim.Adam(params, lr=tc.lr, betas=(tc.beta1, tc.beta2))


def _sampler(tc: TrainConfig, n: int):
    gen = torch.Generator().manual_seed(tc.seed)
    while True:
        yield torch.randint(n, (min(tc.batch, n),), generator=gen).numpy()


class _Run:
    """Checkpoint cadence, last-good snapshot and CSV history for one trainer."""

    def __init__(self, kind, net, tc: TrainConfig, out_dir, columns):
        self.kind, self.net, self.tc = kind, net, tc
        self.out = Path(out_dir) if out_dir else None
        self.columns = columns
        self.rows: list[dict] = []
        self.good = copy.deepcopy(net.state_dict())
        self.extra_nets: dict[str, torch.nn.Module] = {}

    def record(self, step, values: dict):
        for k, v in values.items():
            if not math.isfinite(v):
                self.abort(f"{self.kind}: {k} diverged at step {step}")
        self.rows.append({"step": step, **values})
        if (step + 1) % self.tc.ckpt_every == 0:
            self.good = copy.deepcopy(self.net.state_dict())
            self.save("last")

    def save(self, tag):
        if self.out is None:
            return None
        p = save_checkpoint(self.out / f"{self.kind}_{tag}.npz", self.net, self.kind, self.tc.seed,
                            self.tc.teacher_forcing)
        for name, n in self.extra_nets.items():
            save_checkpoint(self.out / f"{name}_{tag}.npz", n, name, self.tc.seed, self.tc.teacher_forcing)
        return p

    def abort(self, msg):
        self.net.load_state_dict(self.good)
        path = self.save("last_good")
        self.finish()
        raise TrainingDiverged(msg, path)

    def finish(self):
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / f"{self.kind}_loss.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["step"] + self.columns)
            w.writeheader()
            w.writerows(self.rows)


def train_silnet(tc: TrainConfig, bank: PairBank, nc: NetConfig = NetConfig(), out_dir=None):
    torch.manual_seed(tc.seed)
    net = build("sil", nc, tc.seed).train()
    opt = _adam(net.parameters(), tc)
    run = _Run("sil", net, tc, out_dir, ["l_sil"])
    batches = _sampler(tc, len(bank))
    for step in range(tc.steps):
        b = batch_tensors(bank, next(batches))
        loss = l_sil(net(b["p_t"], b["p_s"], b["s_s"], b["g_s"]), b["s_t"])
        opt.zero_grad()
        loss.backward()
        opt.step()
        run.record(step, {"l_sil": loss.item()})
    run.save("final")
    run.finish()
    return net.eval(), run.rows


def train_garnet(tc: TrainConfig, bank: PairBank, nc: NetConfig = NetConfig(), out_dir=None):
    torch.manual_seed(tc.seed)
    net = build("gar", nc, tc.seed).train()
    opt = _adam(net.parameters(), tc)
    run = _Run("gar", net, tc, out_dir, ["l_gar"])
    batches = _sampler(tc, len(bank))
    for step in range(tc.steps):
        idx = next(batches)
        b = batch_tensors(bank, idx)
        g_p, valid, _, _ = degrade_batch(bank, idx, tc.seed, step)
        probs = net(g_p, valid, b["p_t"], b["s_t"], b["p_s"], b["s_s"], b["g_s"])
        loss = l_gar(probs, b["g_t"])
        opt.zero_grad()
        loss.backward()
        opt.step()
        run.record(step, {"l_gar": loss.item()})
    run.save("final")
    run.finish()
    return net.eval(), run.rows


def render_forward(net, b, i_p, cov, noise=None, z_override=None):
    out, mu, logvar = net(i_p, cov, b["s_t"], b["g_t"], b["i_s"], b["s_s"], b["g_s"],
                          noise=noise, z_override=z_override)
    return out * b["s_t"], mu, logvar


def train_rendernet(tc: TrainConfig, bank: PairBank, extractor, nc: NetConfig = NetConfig(),
                    out_dir=None, collapse_var: float = 1e-4):
    torch.manual_seed(tc.seed)
    net = build("render", nc, tc.seed).train()
    disc = build("disc", nc, tc.seed + 1).train()
    opt_g = _adam(net.parameters(), tc)
    opt_d = _adam(disc.parameters(), tc)
    run = _Run("render", net, tc, out_dir, list(RENDER_TERMS) + ["total", "l_disc"])
    run.extra_nets["disc"] = disc
    batches = _sampler(tc, len(bank))
    noise_gen = torch.Generator().manual_seed(tc.seed + 7)
    w = tc.weights
    for step in range(tc.steps):
        idx = next(batches)
        b = batch_tensors(bank, idx)
        _, _, i_p, cov = degrade_batch(bank, idx, tc.seed, step)
        noise = torch.randn(len(idx), nc.latent, generator=noise_gen)
        pred, mu, logvar = render_forward(net, b, i_p, cov, noise)
        if len(idx) > 1 and pred.var(0).mean() < collapse_var:
            warnings.warn(f"render: batch output variance collapsed at step {step}")
        terms = {"l_rec": l_rec(pred, b["i_t"]),
                 "l_vgg": l_vgg(pred, b["i_t"], extractor) if w.vgg else pred.new_zeros(()),
                 "l_cx": l_cx(pred, b["i_t"], extractor) if w.cx else pred.new_zeros(()),
                 "l_kl": l_kl_logvar(mu, logvar)}
        if w.cadv:
            g_adv, d_loss = l_cadv(disc, pred, b["i_t"], b["g_t"])
        else:
            g_adv, d_loss = pred.new_zeros(()), pred.new_zeros(())
        terms["l_cadv"] = g_adv
        try:
            total = l_render_total(terms, w)
        except LossDivergence as e:
            run.abort(f"render: {e} at step {step}")
        opt_g.zero_grad()
        total.backward()
        opt_g.step()
        if w.cadv:
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
        run.record(step, {**{k: v.item() for k, v in terms.items()}, "total": total.item(),
                          "l_disc": d_loss.item()})
    run.save("final")
    run.finish()
    return net.eval(), disc.eval(), run.rows


def train_extractor(bank: PairBank, width: int = 16, steps: int = 1500, seed: int = 0,
                    out_dir=None) -> PerceptualExtractor:
    torch.manual_seed(seed)
    ex = PerceptualExtractor(width)
    images = torch.cat([image_t(bank.a["src_img"]), image_t(bank.a["tgt_img"])])
    curve = ex.fit_autoencoder(images, steps=steps, seed=seed)
    ex.freeze()
    if out_dir:
        save_checkpoint(Path(out_dir) / "extractor.npz", ex, "extractor", seed, extra={"final_loss": curve[-1]})
    return ex


# ---------------------------------------------------------------- desk suite


@dataclass(frozen=True)
class DeskConfig:
    """Everything needed to reproduce the desk-scale trained model set."""
    data: DataConfig = DataConfig(size=64, uv_shape=(128, 192))
    net: NetConfig = NetConfig(width=16)
    train: TrainConfig = TrainConfig()
    extractor_width: int = 16
    extractor_steps: int = 1500
    render_weights: LossWeights = field(default_factory=LossWeights)

    def to_json(self) -> dict:
        return asdict(self)

    def key(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelSet:
    sil: torch.nn.Module
    gar: torch.nn.Module
    render: torch.nn.Module
    disc: torch.nn.Module
    extractor: PerceptualExtractor
    config: DeskConfig
    root: Path | None = None
    render_nokl: torch.nn.Module | None = None  # only for the no-KL ablation


def train_suite(dc: DeskConfig = DeskConfig(), cache_root=None, bank: PairBank | None = None) -> ModelSet:
    """Train (or load from ``cache_root/<config key>``) extractor, SilNet, GarNet, RenderNet."""
    root = Path(cache_root) / dc.key() if cache_root else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.json").write_text(json.dumps(dc.to_json(), indent=1, sort_keys=True))

    def cached(name):
        return root is not None and (root / f"{name}.npz").exists()

    need = [n for n in ("extractor", "sil_final", "gar_final", "render_final", "disc_final") if not cached(n)]
    if need and bank is None:
        bank = PairBank.generate(dc.data)
    tc = dc.train
    if cached("extractor"):
        ex, _ = load_checkpoint(root / "extractor.npz", "extractor")
    else:
        log.info("fitting perceptual extractor")
        ex = train_extractor(bank, dc.extractor_width, dc.extractor_steps, tc.seed, root)
    if cached("sil_final"):
        sil, _ = load_checkpoint(root / "sil_final.npz", "sil")
    else:
        log.info("training SilNet")
        sil, _ = train_silnet(tc, bank, dc.net, root)
    if cached("gar_final"):
        gar, _ = load_checkpoint(root / "gar_final.npz", "gar")
    else:
        log.info("training GarNet")
        gar, _ = train_garnet(tc, bank, dc.net, root)
    if cached("render_final") and cached("disc_final"):
        ren, _ = load_checkpoint(root / "render_final.npz", "render")
        disc, _ = load_checkpoint(root / "disc_final.npz", "disc")
    else:
        log.info("training RenderNet")
        rtc = TrainConfig(**{**asdict(tc), "weights": dc.render_weights})
        ren, disc, _ = train_rendernet(rtc, bank, ex, dc.net, root)
    return ModelSet(sil.eval(), gar.eval(), ren.eval(), disc.eval(), ex, dc, root)


def load_model_set(root) -> ModelSet:
    """Read ``*_final.npz`` checkpoints (and ``config.json`` when present) from one directory."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"checkpoint directory {root} not found")

    def need(name, kind):
        p = root / f"{name}.npz"
        if not p.exists():
            raise FileNotFoundError(f"missing checkpoint {p}")
        return load_checkpoint(p, kind, require_teacher_forcing=True if kind != "extractor" else None)[0]

    dc = DeskConfig()
    if (root / "config.json").exists():
        d = json.loads((root / "config.json").read_text())
        dc = DeskConfig(DataConfig(**{**d["data"], "uv_shape": tuple(d["data"]["uv_shape"])}),
                        NetConfig(**d["net"]), TrainConfig.from_json(d["train"]),
                        d["extractor_width"], d["extractor_steps"], LossWeights(**d["render_weights"]))
    nokl = need("render_nokl_final", "render") if (root / "render_nokl_final.npz").exists() else None
    disc = need("disc_final", "disc") if (root / "disc_final.npz").exists() else None
    return ModelSet(need("sil_final", "sil"), need("gar_final", "gar"), need("render_final", "render"), disc,
                    need("extractor", "extractor"), dc, root, nokl)
