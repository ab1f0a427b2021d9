"""Contour-aware dual-decoder segmentation network.

A densely connected encoder (four dense modules separated by 1x1-conv +
average-pool transitions) feeds two task-specific decoders, one for
nuclei bodies and one for contours. Decoders refine top-down through
lateral 1x1 connections at the 1/8, 1/4 and 1/2 scales; at each level an
aggregation module smooths both branches, predicts per-branch score
maps, and (when enabled) mixes the two branches through parallel 3x3
convolutions to build the next level's features.

The stem is a single 7x7 stride-2 convolution. Its input is zero-padded
asymmetrically (2 before, 3 after) so the output size is exactly half
the input and the conv op's integral-shape contract holds.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, ParseError, ShapeError
from .util import canonical_json

BRANCHES = ("nuclei", "contour")
LEVEL_SCALES = (8, 4, 2)  # denominator of each decoder level's resolution
CLS_BIAS_INIT = -2.0  # sigmoid(-2) ~ 0.12, roughly the foreground rate


@dataclass
class CIANetConfig:
    growth_rate: int = 8
    block_sizes: tuple = (2, 2, 2, 2)
    stem_channels: int = 16
    compression: float = 0.5
    decoder_width: int = 32
    use_iam: bool = True
    input_channels: int = 3

    def __post_init__(self):
        self.block_sizes = tuple(int(b) for b in self.block_sizes)
        if len(self.block_sizes) != 4:
            raise ContractError(f"block_sizes must have exactly 4 entries, got {len(self.block_sizes)}")
        if any(b < 1 for b in self.block_sizes):
            raise ContractError("block_sizes entries must be >= 1")
        if self.growth_rate < 1 or self.stem_channels < 1 or self.decoder_width < 1:
            raise ContractError("growth_rate, stem_channels and decoder_width must be >= 1")
        if not 0.0 < self.compression <= 1.0:
            raise ContractError(f"compression must be in (0, 1], got {self.compression}")

    def to_dict(self):
        return {
            "growth_rate": self.growth_rate,
            "block_sizes": list(self.block_sizes),
            "stem_channels": self.stem_channels,
            "compression": self.compression,
            "decoder_width": self.decoder_width,
            "use_iam": self.use_iam,
            "input_channels": self.input_channels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["block_sizes"] = tuple(d["block_sizes"])
        return cls(**d)


def toy_config(use_iam=True):
    return CIANetConfig(growth_rate=8, block_sizes=(2, 2, 2, 2), stem_channels=16,
                        decoder_width=32, use_iam=use_iam)


def paper_scale_config(use_iam=True):
    return CIANetConfig(growth_rate=32, block_sizes=(6, 12, 24, 16), stem_channels=64,
                        decoder_width=128, use_iam=use_iam)


def encoder_channels(cfg: CIANetConfig):
    """Channel count after each dense module and each transition.

    Returns (dm_out, tm_out) where dm_out[i] is the i-th dense module's
    output width and tm_out[i] the width after the following transition.
    """
    dm_out, tm_out = [], []
    c = cfg.stem_channels
    for i, n in enumerate(cfg.block_sizes):
        c = c + n * cfg.growth_rate
        dm_out.append(c)
        if i < 3:
            c = int(cfg.compression * c)
            tm_out.append(c)
    return dm_out, tm_out


@dataclass
class CIANetParams:
    config: CIANetConfig
    params: dict  # name -> Tensor (trainable)
    state: dict = field(default_factory=dict)  # name -> np.ndarray (BN running stats)

    def param_count(self):
        return sum(p.data.size for p in self.params.values())


@dataclass
class ForwardOutputs:
    levels: list  # [(p_nuclei, p_contour)] coarse -> fine, scales 1/8, 1/4, 1/2
    final_nuclei: T.Tensor
    final_contour: T.Tensor
    scales: tuple = LEVEL_SCALES


def _he_conv(rng, out_c, in_c, k, dtype, gain=2.0):
    """Fan-in-scaled normal init: gain 2 (He) before ReLUs, gain 1 for
    the decoder's purely linear convs (a 2x gain there doubles variance
    per layer and saturates the classifier sigmoids at init)."""
    fan_in = in_c * k * k
    w = rng.standard_normal((out_c, in_c, k, k)) * np.sqrt(gain / fan_in)
    return T.Tensor(w.astype(dtype), requires_grad=True)


def _zeros_vec(c, dtype):
    return T.Tensor(np.zeros((1, c, 1, 1), dtype=dtype), requires_grad=True)


def _ones_vec(c, dtype):
    return T.Tensor(np.ones((1, c, 1, 1), dtype=dtype), requires_grad=True)


def build(cfg: CIANetConfig, seed: int, dtype=np.float32) -> CIANetParams:
    """Allocate and initialize all parameters, deterministically in seed.

    Conv weights are He-normal, biases zero, batch-norm scale/shift 1/0.
    Encoder convs carry no bias (a batch norm follows); decoder convs do.
    """
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    k = cfg.growth_rate
    p, s = {}, {}

    def bn(prefix, c):
        p[f"{prefix}.scale"] = _ones_vec(c, dtype)
        p[f"{prefix}.shift"] = _zeros_vec(c, dtype)
        s[f"{prefix}.mean"] = np.zeros(c, dtype=dtype)
        s[f"{prefix}.var"] = np.ones(c, dtype=dtype)

    p["stem.weight"] = _he_conv(rng, cfg.stem_channels, cfg.input_channels, 7, dtype)

    dm_out, tm_out = encoder_channels(cfg)
    c = cfg.stem_channels
    for d, n in enumerate(cfg.block_sizes):
        for i in range(n):
            cin = c + i * k
            pre = f"enc.dm{d}.l{i}"
            bn(f"{pre}.bn1", cin)
            p[f"{pre}.conv1.weight"] = _he_conv(rng, 4 * k, cin, 1, dtype)
            bn(f"{pre}.bn2", 4 * k)
            p[f"{pre}.conv2.weight"] = _he_conv(rng, k, 4 * k, 3, dtype)
        c = dm_out[d]
        if d < 3:
            p[f"enc.tm{d}.conv.weight"] = _he_conv(rng, tm_out[d], c, 1, dtype)
            c = tm_out[d]

    width = cfg.decoder_width
    enc_lateral = [dm_out[2], dm_out[1], dm_out[0]]  # coarse -> fine levels
    for t in BRANCHES:
        p[f"dec.{t}.top.weight"] = _he_conv(rng, width, dm_out[3], 3, dtype, gain=1.0)
        p[f"dec.{t}.top.bias"] = _zeros_vec(width, dtype)
        for lvl in range(3):
            p[f"dec.{t}.lat{lvl}.weight"] = _he_conv(rng, width, enc_lateral[lvl], 1, dtype, gain=1.0)
            p[f"dec.{t}.lat{lvl}.bias"] = _zeros_vec(width, dtype)
            p[f"dec.{t}.smooth{lvl}.weight"] = _he_conv(rng, width, width, 3, dtype, gain=1.0)
            p[f"dec.{t}.smooth{lvl}.bias"] = _zeros_vec(width, dtype)
            p[f"dec.{t}.cls{lvl}.weight"] = _he_conv(rng, 1, width, 1, dtype, gain=1.0)
            # prior-probability bias: start score maps near the background
            # rate so thin foreground grows from evidence instead of the
            # heads having to un-learn an all-foreground plateau
            bias = _zeros_vec(1, dtype)
            bias.data[...] = CLS_BIAS_INIT
            p[f"dec.{t}.cls{lvl}.bias"] = bias
    if cfg.use_iam:
        # Parallel mixing convs exist only where a next level consumes them.
        for t in BRANCHES:
            for lvl in range(2):
                p[f"iam.{t}.parallel{lvl}.weight"] = _he_conv(rng, width, 2 * width, 3, dtype, gain=1.0)
                p[f"iam.{t}.parallel{lvl}.bias"] = _zeros_vec(width, dtype)

    return CIANetParams(config=cfg, params=p, state=s)


# ---------------------------------------------------------------------------
# building-block forwards (exposed for direct testing)
# ---------------------------------------------------------------------------


def _bn_vec(params, state, prefix, x, mode):
    return T.batch_norm(
        x,
        params[f"{prefix}.scale"],
        params[f"{prefix}.shift"],
        state[f"{prefix}.mean"],
        state[f"{prefix}.var"],
        mode,
    )


def bottleneck_forward(params, state, prefix, x, mode):
    """BN-ReLU-1x1conv (4k wide) then BN-ReLU-3x3conv (k wide)."""
    h = T.relu(_bn_vec(params, state, f"{prefix}.bn1", x, mode))
    h = T.conv2d(h, params[f"{prefix}.conv1.weight"], stride=1, padding=0)
    h = T.relu(_bn_vec(params, state, f"{prefix}.bn2", h, mode))
    return T.conv2d(h, params[f"{prefix}.conv2.weight"], stride=1, padding=1)


def dense_module_forward(params, state, prefix, x, n_layers, mode):
    """Each layer sees the concatenation of everything before it."""
    for i in range(n_layers):
        y = bottleneck_forward(params, state, f"{prefix}.l{i}", x, mode)
        x = T.concat_channels([x, y])
    return x


def transition_forward(x, weight):
    """1x1 conv to the compressed width, then 2x2 stride-2 mean pool."""
    return T.avg_pool2d(T.conv2d(x, weight, stride=1, padding=0))


def lateral_merge(encoder_feat, upper_decoder_feat, lat_weight, lat_bias):
    """Upsampled deeper features plus 1x1-projected encoder features."""
    up = T.bilinear_upsample2x(upper_decoder_feat)
    lat = T.conv2d(encoder_feat, lat_weight, lat_bias, stride=1, padding=0)
    if up.shape != lat.shape:
        raise ShapeError("height", f"lateral merge mismatch {up.shape} vs {lat.shape}")
    return T.add(up, lat)


def iam_forward(d_nuclei, d_contour, smooth_n, smooth_c, parallel_n=None, parallel_c=None):
    """Smooth both branches; optionally cross-aggregate them.

    ``smooth_*`` and ``parallel_*`` are (weight, bias) pairs. With
    parallel convs given, each branch's next-level features come from a
    3x3 conv over the channel-concatenated smooth features of both
    branches; without them the module degenerates to two independent
    branches (M_t = F_t).
    """
    if d_nuclei.shape != d_contour.shape:
        raise ShapeError("channels", f"IAM inputs differ: {d_nuclei.shape} vs {d_contour.shape}")
    f_n = T.conv2d(d_nuclei, smooth_n[0], smooth_n[1], stride=1, padding=1)
    f_c = T.conv2d(d_contour, smooth_c[0], smooth_c[1], stride=1, padding=1)
    if parallel_n is None:
        return f_n, f_c, f_n, f_c
    cat = T.concat_channels([f_n, f_c])
    m_n = T.conv2d(cat, parallel_n[0], parallel_n[1], stride=1, padding=1)
    m_c = T.conv2d(cat, parallel_c[0], parallel_c[1], stride=1, padding=1)
    return f_n, f_c, m_n, m_c


def classifier_forward(f, weight, bias):
    return T.sigmoid(T.conv2d(f, weight, bias, stride=1, padding=0))


def forward(net: CIANetParams, batch: T.Tensor, mode="train") -> ForwardOutputs:
    """Full network forward pass.

    ``batch`` is N x input_channels x H x W with H and W divisible by 16.
    Returns per-level probability maps at 1/8, 1/4 and 1/2 resolution
    plus full-resolution maps obtained by upsampling the finest level.
    """
    cfg = net.config
    p, s = net.params, net.state
    n, c, h, w = batch.shape
    if c != cfg.input_channels:
        raise ShapeError("channels", f"expected {cfg.input_channels} input channels, got {c}")
    if h % 16 != 0:
        raise ShapeError("height", f"input height must be divisible by 16, got {h}")
    if w % 16 != 0:
        raise ShapeError("width", f"input width must be divisible by 16, got {w}")

    x = T.pad2d(batch, 2, 3, 2, 3)
    x = T.conv2d(x, p["stem.weight"], stride=2, padding=0)

    enc_feats = []
    for d, n_layers in enumerate(cfg.block_sizes):
        x = dense_module_forward(p, s, f"enc.dm{d}", x, n_layers, mode)
        if d < 3:
            enc_feats.append(x)
            x = transition_forward(x, p[f"enc.tm{d}.conv.weight"])

    laterals = [enc_feats[2], enc_feats[1], enc_feats[0]]  # coarse -> fine
    m = {
        t: T.conv2d(x, p[f"dec.{t}.top.weight"], p[f"dec.{t}.top.bias"], stride=1, padding=1)
        for t in BRANCHES
    }

    levels = []
    for lvl in range(3):
        d_feat = {
            t: lateral_merge(laterals[lvl], m[t], p[f"dec.{t}.lat{lvl}.weight"], p[f"dec.{t}.lat{lvl}.bias"])
            for t in BRANCHES
        }
        if cfg.use_iam and lvl < 2:
            par_n = (p[f"iam.nuclei.parallel{lvl}.weight"], p[f"iam.nuclei.parallel{lvl}.bias"])
            par_c = (p[f"iam.contour.parallel{lvl}.weight"], p[f"iam.contour.parallel{lvl}.bias"])
        else:
            par_n = par_c = None
        f_n, f_c, m_n, m_c = iam_forward(
            d_feat["nuclei"],
            d_feat["contour"],
            (p[f"dec.nuclei.smooth{lvl}.weight"], p[f"dec.nuclei.smooth{lvl}.bias"]),
            (p[f"dec.contour.smooth{lvl}.weight"], p[f"dec.contour.smooth{lvl}.bias"]),
            par_n,
            par_c,
        )
        m = {"nuclei": m_n, "contour": m_c}
        levels.append(
            (
                classifier_forward(f_n, p["dec.nuclei.cls%d.weight" % lvl], p["dec.nuclei.cls%d.bias" % lvl]),
                classifier_forward(f_c, p["dec.contour.cls%d.weight" % lvl], p["dec.contour.cls%d.bias" % lvl]),
            )
        )

    final_n = T.bilinear_upsample2x(levels[-1][0])
    final_c = T.bilinear_upsample2x(levels[-1][1])
    return ForwardOutputs(levels=levels, final_nuclei=final_n, final_contour=final_c)


# ---------------------------------------------------------------------------
# checkpoints: magic | u32 manifest_len | manifest JSON | u32 count |
#              count * (u32 name_len | name) | count * NMAP blobs
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CIA1"


def save_checkpoint(path, net: CIANetParams):
    manifest = canonical_json({"config": net.config.to_dict(), "format": 1}).encode("utf-8")
    names, blobs = [], []
    for name, t in net.params.items():
        names.append("p/" + name)
        blobs.append(T.nmap_bytes(t.data))
    for name, arr in net.state.items():
        names.append("s/" + name)
        blobs.append(T.nmap_bytes(arr.reshape(1, arr.size, 1, 1)))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> CIANetParams:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    off = 0

    def take(nbytes, what):
        nonlocal off
        if off + nbytes > len(buf):
            raise ParseError(path, off, f"truncated checkpoint while reading {what}")
        chunk = buf[off : off + nbytes]
        off += nbytes
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise ParseError(path, 0, "bad checkpoint magic")
    (mlen,) = struct.unpack("<I", take(4, "manifest length"))
    try:
        manifest = json.loads(take(mlen, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(path, 8, f"bad manifest: {e}") from e
    cfg = CIANetConfig.from_dict(manifest["config"])
    (count,) = struct.unpack("<I", take(4, "name count"))
    names = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        names.append(take(nlen, "name").decode("utf-8"))
    tensors = {}
    for name in names:
        header = take(20, f"NMAP header for {name}")
        n, c, hh, ww = struct.unpack("<4I", header[4:20])
        payload = take(4 * n * c * hh * ww, f"NMAP payload for {name}")
        tensors[name] = T.nmap_from_bytes(header + payload, path=path)

    ref = build(cfg, seed=0)
    expected = set("p/" + k for k in ref.params) | set("s/" + k for k in ref.state)
    got = set(names)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise DataError(
            f"checkpoint {path} does not match config: missing {missing}, unexpected {extra}"
        )
    for name, t in ref.params.items():
        arr = tensors["p/" + name]
        if arr.shape != t.data.shape:
            raise DataError(f"checkpoint {path}: {name} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.copy()
        t.grad = None
    for name, arr in ref.state.items():
        ref.state[name] = tensors["s/" + name].reshape(arr.shape).copy()
    return ref
