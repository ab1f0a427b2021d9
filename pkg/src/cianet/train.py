"""Training loop: AdamW with decoupled decay, cosine annealing with warm
restarts, deterministic batching/augmentation, checkpointing, and
checkpoint evaluation (with tiled inference for oversized images).
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import losses as L
from . import model as M
from . import postproc as P
from . import tensor as T
from .errors import ContractError, DataError, NumericError
from .metrics import MetricsReport
from .util import spawn_rng


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass
class LRSchedule:
    eta_max: float = 1e-3
    eta_min: float = 1e-5
    t0: int = 100  # steps in the first cycle
    t_mult: int = 2

    def __post_init__(self):
        if not self.eta_min < self.eta_max:
            raise ContractError("eta_min must be < eta_max")
        if self.t0 < 1 or self.t_mult < 1:
            raise ContractError("t0 and t_mult must be >= 1")


def cosine_lr(t_cur, t_i, eta_max, eta_min):
    """Cosine decay inside one cycle; defined on the closed [0, t_i]."""
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


def lr_at(step, sched: LRSchedule):
    """Learning rate at a (possibly fractional) global step.

    Cycle i spans t0 * t_mult**i steps; the rate restarts at eta_max at
    every cycle boundary and approaches eta_min at the cycle's end.
    """
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if sched.t_mult == 1:
        t_cur = step % sched.t0
        return cosine_lr(t_cur, sched.t0, sched.eta_max, sched.eta_min)
    start, length = 0.0, float(sched.t0)
    while step >= start + length:
        start += length
        length *= sched.t_mult
    return cosine_lr(step - start, length, sched.eta_max, sched.eta_min)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


def adamw_step(params, grads, state: OptimizerState, lr):
    """One decoupled-weight-decay Adam update, in place.

    Returns (applied, grad_norm). A non-finite total gradient aborts the
    step: parameters and moments are left untouched.
    """
    sq = 0.0
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        sq += float((g.astype(np.float64) ** 2).sum())
    grad_norm = math.sqrt(sq)
    if not math.isfinite(grad_norm):
        return False, grad_norm

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        delta = lr * update
        if state.weight_decay:
            delta = delta + (lr * state.weight_decay) * p.data  # decay on the old value
        p.data -= delta.astype(p.data.dtype)
    return True, grad_norm


# ---------------------------------------------------------------------------
# training configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 3
    epochs: int = 14
    seed: int = 0
    deterministic: bool = True
    grad_clip: float = 0.0
    checkpoint_every_epochs: int = 0  # 0: only the final checkpoint
    eval_every_epochs: int = 0  # 0: no in-training validation
    val_split: str = "test-seen"
    train_split: str = "train"
    stain_norm: bool = False
    contour_radius: int = 2
    tile_size: int = 64
    tile_stride: int = 32
    model: M.CIANetConfig = field(default_factory=M.toy_config)
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    noise: D.NoiseConfig = field(default_factory=D.NoiseConfig)
    augment: D.AugmentConfig = field(default_factory=D.AugmentConfig)
    schedule: LRSchedule = None
    t0_epochs: float = 3.0
    t_mult: int = 2
    eta_max: float = 1e-3
    eta_min: float = 1e-5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")

    def to_dict(self):
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "grad_clip": self.grad_clip,
            "checkpoint_every_epochs": self.checkpoint_every_epochs,
            "eval_every_epochs": self.eval_every_epochs,
            "val_split": self.val_split,
            "train_split": self.train_split,
            "stain_norm": self.stain_norm,
            "contour_radius": self.contour_radius,
            "tile_size": self.tile_size,
            "tile_stride": self.tile_stride,
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "noise": self.noise.to_dict(),
            "augment": self.augment.to_dict(),
            "t0_epochs": self.t0_epochs,
            "t_mult": self.t_mult,
            "eta_max": self.eta_max,
            "eta_min": self.eta_min,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "model" in d:
            d["model"] = M.CIANetConfig.from_dict(d["model"])
        if "loss" in d:
            d["loss"] = L.LossConfig.from_dict(d["loss"])
        if "noise" in d:
            d["noise"] = D.NoiseConfig.from_dict(d["noise"])
        if "augment" in d:
            d["augment"] = D.AugmentConfig.from_dict(d["augment"])
        return cls(**d)


EXPERIMENT_PRESETS = {
    # architecture comparison
    "cianet": {},
    "cianet_no_iam": {"model.use_iam": False},
    # loss comparison
    "loss_bce": {"loss.nuclei_loss": "bce"},
    "loss_bst": {"loss.nuclei_loss": "bootstrapped"},
    "loss_t": {"loss.nuclei_loss": "truncated"},
    "loss_st": {"loss.nuclei_loss": "smooth_truncated"},
}


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in EXPERIMENT_PRESETS:
        raise ContractError(f"unknown experiment preset {name!r}; have {sorted(EXPERIMENT_PRESETS)}")
    d = cfg.to_dict()
    for dotted, value in EXPERIMENT_PRESETS[name].items():
        section, key = dotted.split(".")
        d[section][key] = value
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def image_to_input(image):
    """uint8 HWC -> float32 CHW in [-1, 1]."""
    x = image.astype(np.float32) / 127.5 - 1.0
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def _prepare_train_set(cfg: TrainConfig, corpus_dir, manifest):
    """Load the train split, apply (seeded) label noise, extract targets."""
    items = []
    reference = D.StainReference.default() if cfg.stain_norm else None
    for idx, (entry, rec) in enumerate(D.iter_split(corpus_dir, manifest, cfg.train_split)):
        if reference is not None:
            rec.image, _ = D.macenko_normalize(rec.image, reference)
        inst = rec.instances
        if not cfg.noise.is_identity:
            inst = D.inject_label_noise(inst, cfg.noise, seed=int(spawn_rng(cfg.seed, "noise", idx).integers(2**62)))
        targets = D.extract_targets(inst, cfg.contour_radius) if inst.max() > 0 else D.TargetPair(
            nuclei_mask=np.zeros(inst.shape, bool), contour_mask=np.zeros(inst.shape, bool)
        )
        items.append((rec, targets))
    if not items:
        raise DataError(f"corpus has no samples in split {cfg.train_split!r}")
    return items


def _batch_tensors(batch_items, cfg: TrainConfig, epoch, rng_tag):
    """Augment and stack a list of (sample, targets) into net inputs."""
    xs, nucs, cons = [], [], []
    for j, (rec, tgt) in enumerate(batch_items):
        seed = int(spawn_rng(cfg.seed, "aug", epoch, rng_tag, j).integers(2**62))
        rec_a, tgt_a = D.augment(rec, tgt, cfg.augment, seed)
        xs.append(image_to_input(rec_a.image))
        nucs.append(tgt_a.nuclei_mask.astype(np.float32))
        cons.append(tgt_a.contour_mask.astype(np.float32))
    x = T.Tensor(np.stack(xs))
    nuc_pyr = [np.stack([D.target_pyramid(m, 3)[lvl] for m in nucs])[:, None] for lvl in range(3)]
    con_pyr = [np.stack([D.target_pyramid(m, 3)[lvl] for m in cons])[:, None] for lvl in range(3)]
    return x, nuc_pyr, con_pyr


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    losses: list
    aborted_steps: int
    best_val_aji: float = float("nan")
    numeric_failure: bool = False


def run_training(cfg: TrainConfig, corpus_dir, out_dir, log_every=0) -> TrainResult:
    """Train a model on a corpus; write checkpoints and a CSV loss trace.

    In deterministic mode (the default and only mode implemented) the
    whole loss trace is a pure function of (config, corpus): batching,
    augmentation and label noise all derive from cfg.seed.
    """
    manifest = D.load_manifest(corpus_dir)
    items = _prepare_train_set(cfg, corpus_dir, manifest)
    os.makedirs(str(out_dir), exist_ok=True)
    log_path = os.path.join(str(out_dir), "train_log.csv")
    ckpt_path = os.path.join(str(out_dir), "checkpoint_final.ckpt")

    net = M.build(cfg.model, seed=cfg.seed)
    opt = OptimizerState(weight_decay=1e-4)
    steps_per_epoch = max(1, math.ceil(len(items) / cfg.batch_size))
    sched = cfg.schedule or LRSchedule(
        eta_max=cfg.eta_max, eta_min=cfg.eta_min,
        t0=max(1, int(round(cfg.t0_epochs * steps_per_epoch))), t_mult=cfg.t_mult,
    )

    losses = []
    aborted = 0
    best_val = float("nan")
    step = 0
    with open(log_path, "w") as log:
        log.write("step,lr,loss,grad_norm\n")
        for epoch in range(cfg.epochs):
            order = spawn_rng(cfg.seed, "perm", epoch).permutation(len(items))
            for b0 in range(0, len(items), cfg.batch_size):
                batch_idx = order[b0 : b0 + cfg.batch_size]
                batch_items = [items[i] for i in batch_idx]
                x, nuc_pyr, con_pyr = _batch_tensors(batch_items, cfg, epoch, b0)

                outputs = M.forward(net, x, mode="train")
                n_maps = [lvl[0] for lvl in outputs.levels]
                c_maps = [lvl[1] for lvl in outputs.levels]
                tl = L.total_loss(
                    [t.data for t in n_maps], [t.data for t in c_maps], nuc_pyr, con_pyr, cfg.loss
                )
                seeds = list(tl.nuclei_seeds) + list(tl.contour_seeds)
                grads_map = T.backward_from(n_maps + c_maps, seeds)
                grads = {name: grads_map.get(id(p)) for name, p in net.params.items()}

                if cfg.grad_clip > 0:
                    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                          for g in grads.values() if g is not None))
                    if math.isfinite(total) and total > cfg.grad_clip:
                        scale = cfg.grad_clip / total
                        grads = {k: (None if g is None else g * scale) for k, g in grads.items()}

                lr = lr_at(step, sched)
                applied, grad_norm = adamw_step(net.params, grads, opt, lr)
                if not applied:
                    aborted += 1
                loss_val = tl.value if math.isfinite(tl.value) else float("nan")
                losses.append(loss_val)
                log.write(f"{step},{lr:.10g},{tl.value:.10g},{grad_norm:.10g}\n")
                if log_every and step % log_every == 0:
                    print(f"[train] step {step} lr {lr:.2e} loss {tl.value:.4f}")
                step += 1

            if cfg.checkpoint_every_epochs and (epoch + 1) % cfg.checkpoint_every_epochs == 0:
                M.save_checkpoint(os.path.join(str(out_dir), f"checkpoint_epoch{epoch + 1:04d}.ckpt"), net)
            if cfg.eval_every_epochs and (epoch + 1) % cfg.eval_every_epochs == 0:
                report = evaluate_model(net, corpus_dir, cfg.val_split, P.PostConfig(),
                                        tile_size=cfg.tile_size, tile_stride=cfg.tile_stride,
                                        stain_norm=cfg.stain_norm)
                val = report.overall()["aji"]
                if not math.isfinite(best_val) or val > best_val:
                    best_val = val
                    M.save_checkpoint(os.path.join(str(out_dir), "checkpoint_best.ckpt"), net)

    M.save_checkpoint(ckpt_path, net)
    finite = [v for v in losses if math.isfinite(v)]
    failure = (not finite) or (not math.isfinite(losses[-1]))
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path, losses=losses,
                       aborted_steps=aborted, best_val_aji=best_val, numeric_failure=failure)


# ---------------------------------------------------------------------------
# inference / evaluation
# ---------------------------------------------------------------------------


def _forward_probs(net, x_chw):
    """Eval-mode forward of one image (CHW float32), padded to /16."""
    c, h, w = x_chw.shape
    ph = (16 - h % 16) % 16
    pw = (16 - w % 16) % 16
    if ph or pw:
        x_chw = np.pad(x_chw, ((0, 0), (0, ph), (0, pw)), mode="edge")
    with T.no_grad():
        out = M.forward(net, T.Tensor(x_chw[None]), mode="eval")
    pn = out.final_nuclei.data[0, 0, :h, :w]
    pc = out.final_contour.data[0, 0, :h, :w]
    return pn, pc


def predict_probs(net, image, tile_size=0, tile_stride=0, forward_fn=None):
    """Nuclei/contour probability maps for an arbitrary-size uint8 image.

    Images larger than ``tile_size`` are processed as overlapping tiles
    whose probabilities are averaged per pixel (uniform weights); the
    tile grid always includes border-flush tiles so everything is
    covered.
    """
    forward_fn = forward_fn or (lambda tile: _forward_probs(net, tile))
    x = image_to_input(image)
    _, h, w = x.shape
    if not tile_size or (h <= tile_size and w <= tile_size):
        return forward_fn(x)
    stride = tile_stride or tile_size // 2
    acc_n = np.zeros((h, w), dtype=np.float64)
    acc_c = np.zeros((h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.float64)

    def starts(total):
        if total <= tile_size:
            return [0]
        s = list(range(0, total - tile_size + 1, stride))
        if s[-1] != total - tile_size:
            s.append(total - tile_size)
        return s

    for ty in starts(h):
        for tx in starts(w):
            tile = x[:, ty : ty + min(tile_size, h), tx : tx + min(tile_size, w)]
            pn, pc = forward_fn(tile)
            acc_n[ty : ty + tile.shape[1], tx : tx + tile.shape[2]] += pn
            acc_c[ty : ty + tile.shape[1], tx : tx + tile.shape[2]] += pc
            cnt[ty : ty + tile.shape[1], tx : tx + tile.shape[2]] += 1.0
    return (acc_n / cnt).astype(np.float32), (acc_c / cnt).astype(np.float32)


def evaluate_model(net, corpus_dir, split, post_cfg, tile_size=0, tile_stride=0,
                   stain_norm=False, save_pred_dir=None) -> MetricsReport:
    """Eval-mode forward + post-processing + metrics over one split."""
    manifest = D.load_manifest(corpus_dir)
    entries = [e for e in manifest["samples"] if e["split"] == split]
    if not entries:
        raise DataError(f"corpus has no samples in split {split!r}")
    reference = D.StainReference.default() if stain_norm else None
    report = MetricsReport()
    if save_pred_dir:
        os.makedirs(str(save_pred_dir), exist_ok=True)
    for entry, rec in D.iter_split(corpus_dir, manifest, split):
        image = rec.image
        if reference is not None:
            image, _ = D.macenko_normalize(image, reference)
        pn, pc = predict_probs(net, image, tile_size=tile_size, tile_stride=tile_stride)
        pred = P.extract_instances(pn, pc, post_cfg)
        name = os.path.splitext(os.path.basename(entry["labels"]))[0]
        if save_pred_dir:
            D.write_labels_png(os.path.join(str(save_pred_dir), f"{name}.png"), pred)
            T.write_nmap(os.path.join(str(save_pred_dir), f"{name}_nuclei.nmap"), pn[None, None])
            T.write_nmap(os.path.join(str(save_pred_dir), f"{name}_contour.nmap"), pc[None, None])
        report.add(name, split, rec.instances, pred)
    return report


def evaluate_checkpoint(ckpt_path, corpus_dir, split, post_cfg, **kwargs) -> MetricsReport:
    if not os.path.exists(str(ckpt_path)):
        raise DataError(f"checkpoint not found: {ckpt_path}")
    net = M.load_checkpoint(str(ckpt_path))
    return evaluate_model(net, corpus_dir, split, post_cfg, **kwargs)


def analyze_loss_cdf(net, corpus_dir, split, loss_cfg: L.LossConfig, region="foreground",
                     stain_norm=False):
    """Per-pixel nuclei-loss values over a split, as a sorted CDF.

    Mirrors the cumulative-loss-share analysis: losses are computed from
    the full-resolution nuclei map against the contour-subtracted target,
    restricted to instance-support pixels by default.
    """
    manifest = D.load_manifest(corpus_dir)
    contour_radius = manifest.get("config", {}).get("contour_radius", 2)
    reference = D.StainReference.default() if stain_norm else None
    all_losses = []
    for _entry, rec in D.iter_split(corpus_dir, manifest, split):
        image = rec.image
        if reference is not None:
            image, _ = D.macenko_normalize(image, reference)
        pn, _pc = predict_probs(net, image)
        tgt = D.extract_targets(rec.instances, contour_radius)
        loss_px, _ = L.nuclei_loss(pn.astype(np.float64), tgt.nuclei_mask.astype(np.float64), loss_cfg)
        if region == "foreground":
            sel = rec.instances > 0
            loss_px = loss_px[sel]
        elif region != "all":
            raise ContractError(f"unknown region {region!r}")
        all_losses.append(np.asarray(loss_px).reshape(-1))
    if not all_losses:
        raise DataError(f"no samples in split {split!r}")
    flat = np.concatenate(all_losses)
    points, degenerate = L.loss_cdf(flat)
    return points, degenerate
