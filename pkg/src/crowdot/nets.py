"""Toy-scale estimation branches with hand-written reverse mode.

Arrays are float64 and batched: feature maps are ``(N, C, H, W)`` and token
sequences ``(N, n_tokens, d_model)``.  Every ``*_forward`` returns
``(output, cache)`` and the matching ``*_backward`` takes the upstream
gradient plus that cache.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import asm as asm_mod
from .grid import bilinear_upsample, bilinear_upsample_adjoint

LN_EPS = 1e-5
SUPPORTED_LAYERS = (0, 2, 4, 6, 8)
FULL_RATES = (1, 6, 12, 18)
TOY_RATES = (1, 2, 3, 4)
FUSIONS = ("asm", "cnn_only", "transformer_only", "concat")


class MissingCache(ValueError):
    pass


def _need(cache):
    if cache is None:
        raise MissingCache("backward pass needs the cache from the matching forward pass")
    return cache


# ---------------------------------------------------------------- convolution

def _out_size(n, k, stride, pad, dil):
    return (n + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _pad(x, pad, mode):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge" if mode == "edge" else "constant")


def conv2d_forward(x, w, b, stride=1, pad=0, dil=1, pad_mode="zero"):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv expects {ci} input channels, got {c}")
    ho, wo = _out_size(h, kh, stride, pad, dil), _out_size(wd, kw, stride, pad, dil)
    if ho < 1 or wo < 1:
        raise ValueError("convolution output would be empty")
    xp = _pad(x, pad, pad_mode)
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * dil:i * dil + stride * (ho - 1) + 1:stride,
                                  j * dil:j * dil + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(co, -1), cols) + b[None, :, None]
    return out.reshape(n, co, ho, wo), (x.shape, w, cols, stride, pad, dil, pad_mode)


def conv2d_backward(dout, cache):
    xshape, w, cols, stride, pad, dil, pad_mode = _need(cache)
    n, c, h, wd = xshape
    co, _, kh, kw = w.shape
    ho, wo = dout.shape[2:]
    d2 = dout.reshape(n, co, ho * wo)
    dw = np.einsum("nop,nkp->ok", d2, cols).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(co, -1).T, d2).reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i * dil:i * dil + stride * (ho - 1) + 1:stride,
                j * dil:j * dil + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
    if pad == 0:
        return dxp, dw, db
    dx = dxp[:, :, pad:pad + h, pad:pad + wd].copy()
    if pad_mode == "edge":
        # fold padded border gradients back onto the replicated edge pixels
        top, bottom = dxp[:, :, :pad, :], dxp[:, :, pad + h:, :]
        rows = dxp[:, :, pad:pad + h, :].copy()
        rows[:, :, 0, :] += top.sum(axis=2)
        rows[:, :, -1, :] += bottom.sum(axis=2)
        dx = rows[:, :, :, pad:pad + wd].copy()
        dx[:, :, :, 0] += rows[:, :, :, :pad].sum(axis=3)
        dx[:, :, :, -1] += rows[:, :, :, pad + wd:].sum(axis=3)
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * _need(mask)


def softplus_forward(x):
    return np.logaddexp(0.0, x), x


def softplus_backward(dout, x):
    return dout * expit(_need(x))


# ---------------------------------------------------------------- transformer

def _he(rng, shape, fan_in, gain=math.sqrt(2.0)):
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=shape)


def init_encoder_layer(rng, d: int, heads: int) -> dict:
    if d % heads:
        raise ValueError(f"d_model {d} not divisible by {heads} heads")
    s = 1.0 / math.sqrt(d)
    return {
        "wq": rng.normal(0, s, (d, d)), "wk": rng.normal(0, s, (d, d)), "wv": rng.normal(0, s, (d, d)),
        "w1": _he(rng, (d, 4 * d), d), "b1": np.zeros(4 * d),
        "w2": rng.normal(0, 1.0 / math.sqrt(4 * d), (4 * d, d)), "b2": np.zeros(d),
        "ln1_g": np.ones(d), "ln1_b": np.zeros(d), "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
    }


def check_encoder_layer(p: dict, heads: int):
    d = p["wq"].shape[0]
    if d % heads:
        raise ValueError(f"d_model {d} not divisible by {heads} heads")
    if p["w1"].shape != (d, 4 * d) or p["w2"].shape != (4 * d, d):
        raise ValueError("FFN hidden width must be exactly 4 * d_model")
    for name in ("wq", "wk", "wv"):
        if p[name].shape != (d, d):
            raise ValueError(f"{name} must be {d}x{d}")


def mha_forward(z, wq, wk, wv, heads: int):
    """softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated (no output projection)."""
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 2
    if squeeze:
        z = z[None]
    n, t, d = z.shape
    if wq.shape != (d, d) or wk.shape != (d, d) or wv.shape != (d, d):
        raise ValueError(f"projection matrices must be {d}x{d}")
    if d % heads:
        raise ValueError(f"d_model {d} not divisible by {heads} heads")
    dh = d // heads

    def split(a):
        return a.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(z @ wq), split(z @ wk), split(z @ wv)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    scores = scores - scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    cache = (z, wq, wk, wv, heads, q, k, v, attn, squeeze)
    return (out[0] if squeeze else out), cache


def mha_backward(dout, cache):
    z, wq, wk, wv, heads, q, k, v, attn, squeeze = _need(cache)
    n, t, d = z.shape
    dh = d // heads
    dout = dout[None] if squeeze else dout
    do = dout.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(n, t, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    zf = z.reshape(-1, d)
    grads = {"wq": zf.T @ dq.reshape(-1, d), "wk": zf.T @ dk.reshape(-1, d), "wv": zf.T @ dv.reshape(-1, d)}
    dz = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return (dz[0] if squeeze else dz), grads


def mha(z, wq, wk, wv, heads: int = 4):
    return mha_forward(z, wq, wk, wv, heads)[0]


def attention_weights(z, wq, wk, heads: int = 4):
    """Per-head attention matrices, shape (N, heads, n_tokens, n_tokens)."""
    d = wq.shape[0]
    return mha_forward(z, wq, wk, np.zeros((d, d)), heads)[1][8]


def layer_norm_forward(z, gain, bias):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("layer norm needs at least 2 features")
    mean = z.mean(axis=-1, keepdims=True)
    xc = z - mean
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    xhat, inv, gain = _need(cache)
    red = tuple(range(dout.ndim - 1))
    dgain = np.sum(dout * xhat, axis=red)
    dbias = np.sum(dout, axis=red)
    dx_hat = dout * gain
    dx = inv * (dx_hat - dx_hat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dx_hat * xhat, axis=-1, keepdims=True))
    return dx, dgain, dbias


def layer_norm(z, gain=None, bias=None):
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    gain = np.ones(d) if gain is None else gain
    bias = np.zeros(d) if bias is None else bias
    return layer_norm_forward(z, gain, bias)[0]


def encoder_layer_forward(z, p: dict, heads: int):
    """Z' = MHA(Z) + Z;  out = LN2(FFN(LN1(Z')) + LN1(Z'))."""
    check_encoder_layer(p, heads)
    a, c_mha = mha_forward(z, p["wq"], p["wk"], p["wv"], heads)
    zp = a + z
    y, c_ln1 = layer_norm_forward(zp, p["ln1_g"], p["ln1_b"])
    h_pre = y @ p["w1"] + p["b1"]
    h, m = relu_forward(h_pre)
    f = h @ p["w2"] + p["b2"]
    out, c_ln2 = layer_norm_forward(f + y, p["ln2_g"], p["ln2_b"])
    return out, (c_mha, c_ln1, y, h, m, c_ln2, p)


def encoder_layer_backward(dout, cache):
    c_mha, c_ln1, y, h, m, c_ln2, p = _need(cache)
    d = y.shape[-1]
    g = {}
    ds, g["ln2_g"], g["ln2_b"] = layer_norm_backward(dout, c_ln2)
    g["w2"] = h.reshape(-1, 4 * d).T @ ds.reshape(-1, d)
    g["b2"] = ds.reshape(-1, d).sum(axis=0)
    dh = relu_backward(ds @ p["w2"].T, m)
    g["w1"] = y.reshape(-1, d).T @ dh.reshape(-1, 4 * d)
    g["b1"] = dh.reshape(-1, 4 * d).sum(axis=0)
    dy = ds + dh @ p["w1"].T
    dzp, g["ln1_g"], g["ln1_b"] = layer_norm_backward(dy, c_ln1)
    dz, gm = mha_backward(dzp, c_mha)
    g.update(gm)
    return dz + dzp, g


def encoder_layer(z, p: dict, heads: int = 4):
    return encoder_layer_forward(z, p, heads)[0]


def encoder_stack(z, layers: list, heads: int = 4):
    for p in layers:
        z = encoder_layer(z, p, heads)
    return z


# ---------------------------------------------------------------- ASPP

def aspp_rates(height: int, width: int, full: bool = False) -> tuple:
    """Rates (1, 6, 12, 18) behind ``full``; otherwise (1, 2, 3, 4) on maps under 36 pixels a side."""
    if full or min(height, width) >= 2 * max(FULL_RATES):
        return FULL_RATES
    return TOY_RATES


def init_aspp(rng, channels: int, n_rates: int = 4) -> dict:
    cb = max(channels // n_rates, 1)
    p = {}
    for r in range(n_rates):
        p[f"r{r}.w"] = _he(rng, (cb, channels, 3, 3), channels * 9)
        p[f"r{r}.b"] = np.zeros(cb)
    p["proj.w"] = _he(rng, (channels, cb * n_rates, 1, 1), cb * n_rates)
    p["proj.b"] = np.zeros(channels)
    return p


def aspp_forward(f5, p: dict, rates=TOY_RATES):
    """Parallel dilated 3x3 convolutions, concatenated and mixed back by a 1x1 convolution."""
    f5 = np.asarray(f5, dtype=np.float64)
    h, w = f5.shape[2:]
    for r in rates:
        if r > max(h, w):
            raise ValueError(f"dilation {r} exceeds the {h}x{w} feature map")
    outs, caches = [], []
    for i, r in enumerate(rates):
        y, cc = conv2d_forward(f5, p[f"r{i}.w"], p[f"r{i}.b"], pad=r, dil=r)
        y, m = relu_forward(y)
        outs.append(y)
        caches.append((cc, m))
    cat = np.concatenate(outs, axis=1)
    y, cp = conv2d_forward(cat, p["proj.w"], p["proj.b"])
    y, mp = relu_forward(y)
    return y, (caches, [o.shape[1] for o in outs], cp, mp)


def aspp_backward(dout, cache):
    caches, widths, cp, mp = _need(cache)
    g = {}
    dcat, g["proj.w"], g["proj.b"] = conv2d_backward(relu_backward(dout, mp), cp)
    dx = 0.0
    start = 0
    for i, ((cc, m), wdt) in enumerate(zip(caches, widths)):
        part = relu_backward(dcat[:, start:start + wdt], m)
        start += wdt
        dxi, g[f"r{i}.w"], g[f"r{i}.b"] = conv2d_backward(part, cc)
        dx = dx + dxi
    return dx, g


def aspp(f5, p: dict, rates=TOY_RATES):
    return aspp_forward(f5, p, rates)[0]


# ---------------------------------------------------------------- model

@dataclass
class ModelConfig:
    image_size: int = 64
    c4: int = 16
    d_model: int = 32
    heads: int = 4
    n_layers: int = 4
    t_decoder: tuple = (16, 16)
    c_decoder: tuple = (256, 64, 32)
    fusion: str = "asm"
    full_rates: bool = False
    head: str = "softplus"
    asm_k: int = asm_mod.DEFAULT_K
    seed: int = 0

    def __post_init__(self):
        self.t_decoder = tuple(self.t_decoder)
        self.c_decoder = tuple(self.c_decoder)
        if self.n_layers not in SUPPORTED_LAYERS:
            raise ValueError(f"n_layers must be one of {SUPPORTED_LAYERS}, got {self.n_layers}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.image_size % 16:
            raise ValueError("image size must be a multiple of 16")
        if self.head not in ("softplus", "relu"):
            raise ValueError("head must be softplus or relu")

    @property
    def density_size(self) -> int:
        return self.image_size // 8

    def to_json(self) -> dict:
        return asdict(self)


def init_backbone(seed: int, c4: int, c5: int) -> dict:
    """Fixed strided stand-in for a pretrained backbone: strides 4, 2, 2."""
    rng = np.random.default_rng([seed, 7919])
    return {
        "conv1.w": np.abs(_he(rng, (8, 1, 4, 4), 16)), "conv1.b": np.zeros(8),
        "conv2.w": _he(rng, (c4, 8, 2, 2), 32), "conv2.b": np.full(c4, 0.05),
        "conv3.w": _he(rng, (c5, c4, 2, 2), 4 * c4), "conv3.b": np.full(c5, 0.05),
    }


def backbone_forward(images, bb: dict):
    """Images (N, 1, H, W) -> F4 at stride 8 and F5 at stride 16."""
    x, _ = conv2d_forward(images, bb["conv1.w"], bb["conv1.b"], stride=4)
    x = np.maximum(x, 0.0)
    f4, _ = conv2d_forward(x, bb["conv2.w"], bb["conv2.b"], stride=2)
    f4 = np.maximum(f4, 0.0)
    f5, _ = conv2d_forward(f4, bb["conv3.w"], bb["conv3.b"], stride=2)
    return f4, np.maximum(f5, 0.0)


def init_params(cfg: ModelConfig) -> dict:
    """Trainable parameters as a flat name -> array dict."""
    rng = np.random.default_rng([cfg.seed, 1])
    d = cfg.d_model
    p = {}
    for layer in range(cfg.n_layers):
        for k, v in init_encoder_layer(rng, d, cfg.heads).items():
            p[f"enc{layer}.{k}"] = v
    chans = (d,) + cfg.t_decoder
    for i in range(len(cfg.t_decoder)):
        p[f"tdec{i}.w"] = _he(rng, (chans[i + 1], chans[i], 3, 3), chans[i] * 9)
        p[f"tdec{i}.b"] = np.zeros(chans[i + 1])
    p["thead.w"] = _he(rng, (1, chans[-1], 1, 1), chans[-1], gain=0.1)
    p["thead.b"] = np.zeros(1)
    for k, v in init_aspp(rng, d).items():
        p[f"aspp.{k}"] = v
    chans = (d + cfg.c4,) + cfg.c_decoder
    for i in range(len(cfg.c_decoder)):
        p[f"cdec{i}.w"] = _he(rng, (chans[i + 1], chans[i], 3, 3), chans[i] * 9)
        p[f"cdec{i}.b"] = np.zeros(chans[i + 1])
    p["chead.w"] = _he(rng, (1, chans[-1], 1, 1), chans[-1], gain=0.1)
    p["chead.b"] = np.zeros(1)
    for br in ("t", "c"):
        for name, val in (("w1", 1.0), ("b1", 0.0), ("w2", 1.0), ("b2", 0.0)):
            p[f"asm.{br}.{name}"] = np.array(val)
    return p


def _head_forward(x, w, b, kind):
    y, cc = conv2d_forward(x, w, b)
    if kind == "relu":
        out, m = relu_forward(y)
    else:
        out, m = softplus_forward(y)
    return out[:, 0], (cc, m, kind)


def _head_backward(dout, cache):
    cc, m, kind = cache
    dy = relu_backward(dout[:, None], m) if kind == "relu" else softplus_backward(dout[:, None], m)
    return conv2d_backward(dy, cc)


def transformer_branch_forward(f5, p: dict, cfg: ModelConfig, out_size: int):
    """Flatten F5 to tokens, run the encoder stack, decode to D_t at ``out_size``."""
    n, d, h, w = f5.shape
    z = f5.reshape(n, d, h * w).transpose(0, 2, 1)
    enc = []
    for layer in range(cfg.n_layers):
        lp = {k.split(".", 1)[1]: v for k, v in p.items() if k.startswith(f"enc{layer}.")}
        z, c = encoder_layer_forward(z, lp, cfg.heads)
        enc.append(c)
    x = z.transpose(0, 2, 1).reshape(n, d, h, w)
    x = bilinear_upsample(x, out_size, out_size)
    dec = []
    for i in range(len(cfg.t_decoder)):
        x, cc = conv2d_forward(x, p[f"tdec{i}.w"], p[f"tdec{i}.b"], pad=1, pad_mode="edge")
        x, m = relu_forward(x)
        dec.append((cc, m))
    out, hc = _head_forward(x, p["thead.w"], p["thead.b"], cfg.head)
    return out, (enc, dec, hc, (n, d, h, w))


def transformer_branch_backward(dout, cache, cfg: ModelConfig):
    enc, dec, hc, (n, d, h, w) = _need(cache)
    g = {}
    dx, g["thead.w"], g["thead.b"] = _head_backward(dout, hc)
    for i in reversed(range(len(dec))):
        cc, m = dec[i]
        dx, g[f"tdec{i}.w"], g[f"tdec{i}.b"] = conv2d_backward(relu_backward(dx, m), cc)
    dx = bilinear_upsample_adjoint(dx, w, h)
    dz = dx.reshape(n, d, h * w).transpose(0, 2, 1)
    for layer in reversed(range(len(enc))):
        dz, gl = encoder_layer_backward(dz, enc[layer])
        g.update({f"enc{layer}.{k}": v for k, v in gl.items()})
    return dz.transpose(0, 2, 1).reshape(n, d, h, w), g


def cnn_branch_forward(f4, f5, p: dict, cfg: ModelConfig):
    """ASPP on F5, upsample to F4 resolution, concatenate, decode to D_c."""
    n, _, h4, w4 = f4.shape
    h5, w5 = f5.shape[2:]
    if (h4, w4) != (2 * h5, 2 * w5):
        raise ValueError(f"F4 {h4}x{w4} must be twice F5 {h5}x{w5}")
    rates = aspp_rates(h5, w5, cfg.full_rates)
    ap = {k[5:]: v for k, v in p.items() if k.startswith("aspp.")}
    y, ca = aspp_forward(f5, ap, rates)
    up = bilinear_upsample(y, w4, h4)
    x = np.concatenate([up, f4], axis=1)
    dec = []
    for i in range(len(cfg.c_decoder)):
        x, cc = conv2d_forward(x, p[f"cdec{i}.w"], p[f"cdec{i}.b"], pad=1)
        x, m = relu_forward(x)
        dec.append((cc, m))
    out, hc = _head_forward(x, p["chead.w"], p["chead.b"], cfg.head)
    return out, (ca, dec, hc, y.shape[1], (h5, w5))


def cnn_branch_backward(dout, cache, cfg: ModelConfig):
    ca, dec, hc, cy, (h5, w5) = _need(cache)
    g = {}
    dx, g["chead.w"], g["chead.b"] = _head_backward(dout, hc)
    for i in reversed(range(len(dec))):
        cc, m = dec[i]
        dx, g[f"cdec{i}.w"], g[f"cdec{i}.b"] = conv2d_backward(relu_backward(dx, m), cc)
    dup, df4 = dx[:, :cy], dx[:, cy:]
    dy = bilinear_upsample_adjoint(dup, w5, h5)
    df5, ga = aspp_backward(dy, ca)
    g.update({f"aspp.{k}": v for k, v in ga.items()})
    return df4, df5, g


def _asm_params(p: dict, k: int) -> asm_mod.AsmParams:
    def branch(br):
        return asm_mod.BranchParams(*(float(p[f"asm.{br}.{n}"]) for n in asm_mod.PARAM_NAMES), k=k)
    return asm_mod.AsmParams(t=branch("t"), c=branch("c"))


@dataclass
class ForwardCache:
    f4: np.ndarray
    f5: np.ndarray
    d_t: np.ndarray = None
    d_c: np.ndarray = None
    t_cache: tuple = None
    c_cache: tuple = None
    asm_caches: list = field(default_factory=list)


class ToyModel:
    """Fixed backbone stub, transformer and CNN branches, and the selected fusion."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None, backbone: dict | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        self.backbone = init_backbone(cfg.seed, cfg.c4, cfg.d_model) if backbone is None else backbone
        for layer in range(cfg.n_layers):
            lp = {k.split(".", 1)[1]: v for k, v in self.params.items() if k.startswith(f"enc{layer}.")}
            check_encoder_layer(lp, cfg.heads)

    def features(self, images):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[:, None]
        return backbone_forward(images, self.backbone)

    def forward(self, images, params: dict | None = None):
        """Fused density maps (N, H/8, W/8) and a cache for :meth:`backward`."""
        p = self.params if params is None else params
        f4, f5 = self.features(images)
        cache = ForwardCache(f4, f5)
        size = f4.shape[2]
        fusion = self.cfg.fusion
        if fusion != "cnn_only":
            cache.d_t, cache.t_cache = transformer_branch_forward(f5, p, self.cfg, size)
        if fusion != "transformer_only":
            cache.d_c, cache.c_cache = cnn_branch_forward(f4, f5, p, self.cfg)
        if fusion == "cnn_only":
            return cache.d_c, cache
        if fusion == "transformer_only":
            return cache.d_t, cache
        if fusion == "concat":
            return asm_mod.concat_fuse(cache.d_t, cache.d_c), cache
        ap = _asm_params(p, self.cfg.asm_k)
        out = np.empty_like(cache.d_t)
        for i in range(len(out)):
            out[i], c = asm_mod.asm_forward(cache.d_t[i], cache.d_c[i], ap)
            cache.asm_caches.append(c)
        return out, cache

    def backward(self, grad_out, cache: ForwardCache, params: dict | None = None) -> dict:
        """Gradients of sum(grad_out * output) for every trainable parameter."""
        _need(cache)
        p = self.params if params is None else params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grad_out = np.asarray(grad_out, dtype=np.float64)
        fusion = self.cfg.fusion
        g_t = g_c = None
        if fusion == "cnn_only":
            g_c = grad_out
        elif fusion == "transformer_only":
            g_t = grad_out
        elif fusion == "concat":
            g_t = g_c = 0.5 * grad_out
        else:
            g_t = np.empty_like(grad_out)
            g_c = np.empty_like(grad_out)
            for i, c in enumerate(cache.asm_caches):
                g_t[i], g_c[i], ga = asm_mod.asm_backward(grad_out[i], c)
                for br in ("t", "c"):
                    for name, val in ga[br].items():
                        grads[f"asm.{br}.{name}"] += val
        if g_t is not None:
            _, gt = transformer_branch_backward(g_t, cache.t_cache, self.cfg)
            for k, v in gt.items():
                grads[k] += v
        if g_c is not None:
            _, _, gc = cnn_branch_backward(g_c, cache.c_cache, self.cfg)
            for k, v in gc.items():
                grads[k] += v
        return grads


def transformer_branch(f5, params: dict, n_layers: int, cfg: ModelConfig | None = None):
    """D_t from F5 features (N, d, h, w); output at twice the F5 resolution."""
    if n_layers not in SUPPORTED_LAYERS:
        raise ValueError(f"n_layers must be one of {SUPPORTED_LAYERS}, got {n_layers}")
    cfg = cfg or ModelConfig(d_model=f5.shape[1], n_layers=n_layers)
    if cfg.n_layers != n_layers:
        cfg = ModelConfig(**{**asdict(cfg), "n_layers": n_layers})
    return transformer_branch_forward(np.asarray(f5, dtype=np.float64), params, cfg, 2 * f5.shape[2])[0]


def cnn_branch(f4, f5, params: dict, cfg: ModelConfig | None = None):
    cfg = cfg or ModelConfig(d_model=f5.shape[1], c4=f4.shape[1])
    return cnn_branch_forward(np.asarray(f4, dtype=np.float64), np.asarray(f5, dtype=np.float64), params, cfg)[0]


def net_backward(model: ToyModel, grad_out, cache: ForwardCache) -> dict:
    return model.backward(grad_out, cache)
