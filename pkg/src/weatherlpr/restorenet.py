"""Toy-scale trainable restoration network for weather-corrupted range images.

Three-layer encoder/decoder of WaveTransformer blocks around a bottleneck
transformer, with ContextGuide blocks in the decoder and skip connections.
Every layer implements its own backward rule; no autodiff framework is used.
The network operates on a single (H, W, 2) range image at a time and predicts
a residual added to the input, clamped to [0, 1].
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensorops as ops
from . import wavelet
from .pointcloud import RangeImage

_CKPT_MAGIC = b"WLCK"
_CKPT_VERSION = 1

RESTORED_MASK_FLOOR = 0.01  # restored pixels with d below this read as empty


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 8
    n_contexts: int = 3          # one context embedding per weather type
    attn_token_cap: int = 512    # keys/values are strided-pooled past this
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 2:
            raise ValueError("base_channels must be >= 2")
        if self.n_contexts < 1:
            raise ValueError("n_contexts must be >= 1")


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def _init(rng, shape, fan_in):
    return rng.normal(0.0, 0.5 / math.sqrt(fan_in), size=shape)


class Conv2d:
    """Same-size convolution layer with reflect padding."""

    def __init__(self, rng, cin, cout, k=3, groups=1, name="conv", w_init=None):
        fan = k * k * (cin // groups)
        w = w_init if w_init is not None else _init(rng, (k, k, cin // groups, cout), fan)
        self.groups = groups
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(cout))

    def forward(self, x):
        y, self._cache = ops.conv2d(x, self.w.value, self.b.value, self.groups)
        return y

    def backward(self, gy):
        gx, gw, gb = ops.conv2d_backward(self._cache, gy)
        self.w.grad += gw
        self.b.grad += gb
        return gx

    def params(self):
        return [self.w, self.b]


class ConvTranspose2x2:
    """Stride-2 transposed convolution; optionally initialized to the exact
    wavelet synthesis filters (cin = 4 * cout)."""

    def __init__(self, rng, cin, cout, name="up", synthesis_init=False):
        if synthesis_init:
            if cin != 4 * cout:
                raise ValueError("synthesis init needs cin == 4 * cout")
            w = wavelet.synthesis_kernel(cout)
        else:
            w = _init(rng, (2, 2, cin, cout), cin)
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(cout))

    def forward(self, x):
        y, self._cache = ops.conv_transpose2x2(x, self.w.value, self.b.value)
        return y

    def backward(self, gy):
        gx, gw, gb = ops.conv_transpose2x2_backward(self._cache, gy)
        self.w.grad += gw
        self.b.grad += gb
        return gx

    def params(self):
        return [self.w, self.b]


class Linear:
    def __init__(self, rng, cin, cout, name="fc"):
        self.w = Param(f"{name}.w", _init(rng, (cin, cout), cin))
        self.b = Param(f"{name}.b", np.zeros(cout))

    def forward(self, x):
        y, self._cache = ops.linear(x, self.w.value, self.b.value)
        return y

    def backward(self, gy):
        gx, gw, gb = ops.linear_backward(self._cache, gy)
        self.w.grad += gw
        self.b.grad += gb
        return gx

    def params(self):
        return [self.w, self.b]


class Norm:
    """Per-channel affine normalization over the given axes."""

    def __init__(self, channels, axes, name="norm"):
        self.axes = axes
        self.g = Param(f"{name}.g", np.ones(channels))
        self.b = Param(f"{name}.b", np.zeros(channels))

    def forward(self, x):
        y, self._cache = ops.moment_norm(x, self.g.value, self.b.value, self.axes)
        return y

    def backward(self, gy):
        gx, gg, gb = ops.moment_norm_backward(self._cache, gy)
        self.g.grad += gg
        self.b.grad += gb
        return gx

    def params(self):
        return [self.g, self.b]


def _pool_stride(n_tokens: int, cap: int) -> int:
    return max(1, -(-n_tokens // cap))  # ceil division


class FeatureMix:
    """Spatial mixing (parameter-free self-attention over positions) followed
    by channel mixing (grouped conv, normalization, channel FC)."""

    def __init__(self, rng, channels, token_cap, name="mix"):
        if channels % 2:
            raise ValueError("channel mixing with group size 2 needs even channels")
        self.c = channels
        self.cap = token_cap
        self.gconv = Conv2d(rng, channels, channels, k=3, groups=channels // 2,
                            name=f"{name}.gconv")
        self.norm = Norm(channels, axes=(0, 1), name=f"{name}.bn")
        self.fc = Linear(rng, channels, channels, name=f"{name}.fc")

    def forward(self, x):
        h, w, c = x.shape
        t = x.reshape(-1, c)
        stride = _pool_stride(t.shape[0], self.cap)
        tk = t[::stride]
        logits, _ = ops.matmul(t, tk.T / math.sqrt(c))
        p, pcache = ops.softmax(logits)
        s = p @ tk
        self._attn_cache = (t, tk, p, pcache, stride, (h, w, c))
        fs = s.reshape(h, w, c)
        out = self.fc.forward(self.norm.forward(self.gconv.forward(fs)))
        return out

    def backward(self, gy):
        gfs = self.gconv.backward(self.norm.backward(self.fc.backward(gy)))
        t, tk, p, pcache, stride, (h, w, c) = self._attn_cache
        gs = gfs.reshape(-1, c)
        gtk = p.T @ gs
        gp = gs @ tk.T
        glog = ops.softmax_backward(pcache, gp)
        gt = glog @ tk / math.sqrt(c)
        gtk += glog.T @ t / math.sqrt(c)
        gt[::stride] += gtk
        return gt.reshape(h, w, c)

    def params(self):
        return self.gconv.params() + self.norm.params() + self.fc.params()


class TransformerFuse:
    """Cross-attention fusion: Q from F_w, K/V from F_c, then layer norm and
    a two-layer FFN with residual connections."""

    def __init__(self, rng, channels, token_cap, name="fuse"):
        c = channels
        self.c = c
        self.cap = token_cap
        self.wq = Linear(rng, c, c, name=f"{name}.wq")
        self.wk = Linear(rng, c, c, name=f"{name}.wk")
        self.wv = Linear(rng, c, c, name=f"{name}.wv")
        self.norm = Norm(c, axes=(-1,), name=f"{name}.ln")
        self.ff1 = Linear(rng, c, 2 * c, name=f"{name}.ff1")
        self.ff2 = Linear(rng, 2 * c, c, name=f"{name}.ff2")

    def forward(self, fw, fc):
        if fw.shape != fc.shape:
            raise ValueError(f"fuse inputs differ: {fw.shape} vs {fc.shape}")
        h, w, c = fw.shape
        q = self.wq.forward(fw).reshape(-1, c)
        k = self.wk.forward(fc).reshape(-1, c)
        v = self.wv.forward(fc).reshape(-1, c)
        stride = _pool_stride(k.shape[0], self.cap)
        kp, vp = k[::stride], v[::stride]
        logits = q @ kp.T / math.sqrt(c)
        p, pcache = ops.softmax(logits)
        attn = (p @ vp).reshape(h, w, c)
        fatt = self.norm.forward(fw + attn)
        hmid = self.ff1.forward(fatt)
        hact, gcache = ops.gelu(hmid)
        out = fatt + self.ff2.forward(hact)
        self._cache = (q, kp, vp, p, pcache, stride, gcache, (h, w, c))
        return out

    def backward(self, gy):
        q, kp, vp, p, pcache, stride, gcache, (h, w, c) = self._cache
        gfatt = gy + self.ff1.backward(ops.gelu_backward(gcache, self.ff2.backward(gy)))
        gsum = self.norm.backward(gfatt)
        gfw = gsum.copy()
        gattn = gsum.reshape(-1, c)
        gvp = p.T @ gattn
        gp = gattn @ vp.T
        glog = ops.softmax_backward(pcache, gp)
        gq = glog @ kp / math.sqrt(c)
        gkp = glog.T @ q / math.sqrt(c)
        gk = np.zeros((h * w, c))
        gv = np.zeros((h * w, c))
        gk[::stride] = gkp
        gv[::stride] = gvp
        gfw += self.wq.backward(gq.reshape(h, w, c))
        gfc = self.wk.backward(gk.reshape(h, w, c))
        gfc += self.wv.backward(gv.reshape(h, w, c))
        return gfw, gfc

    def params(self):
        return (self.wq.params() + self.wk.params() + self.wv.params()
                + self.norm.params() + self.ff1.params() + self.ff2.params())


class ContextGuide:
    """Learnable context-embedding mixture added to decoder features."""

    def __init__(self, rng, channels, n_contexts, name="ctg"):
        self.c = channels
        self.k = n_contexts
        self.fc = Linear(rng, channels, n_contexts, name=f"{name}.fc")
        self.ce = Param(f"{name}.ce", _init(rng, (n_contexts, channels), channels))
        self.mlp = Linear(rng, channels, channels, name=f"{name}.mlp")

    def forward(self, x):
        pooled, self._gap_cache = ops.gap(x)
        logits = self.fc.forward(pooled)
        w, self._sm_cache = ops.softmax(logits)
        ctx = w @ self.ce.value            # (c,)
        fcb = self.mlp.forward(ctx)
        self._w = w
        return x + fcb[None, None, :]

    def weights(self, x):
        """Softmax mixture weights for an input (diagnostic)."""
        pooled, _ = ops.gap(x)
        w, _ = ops.softmax(self.fc.forward(pooled))
        return w

    def backward(self, gy):
        gfcb = gy.sum(axis=(0, 1))
        gctx = self.mlp.backward(gfcb)
        self.ce.grad += np.outer(self._w, gctx)
        gw = self.ce.value @ gctx
        glog = ops.softmax_backward(self._sm_cache, gw)
        gpooled = self.fc.backward(glog)
        gx = gy + ops.gap_backward(self._gap_cache, gpooled)
        return gx

    def params(self):
        return self.fc.params() + [self.ce] + self.mlp.params()


class WatEncodeBlock:
    """DWT -> sub-band concat -> feature mixing -> transformer fuse ->
    channel-growth projection; halves spatial dims, doubles channels."""

    def __init__(self, rng, cin, token_cap, name="enc"):
        self.cin = cin
        self.mix = FeatureMix(rng, 4 * cin, token_cap, name=f"{name}.mix")
        self.fuse = TransformerFuse(rng, 4 * cin, token_cap, name=f"{name}.fuse")
        self.proj = Conv2d(rng, 4 * cin, 2 * cin, k=1, name=f"{name}.proj")

    def subbands(self, x):
        """Concatenated [LL, LH, HL, HH] sub-bands of the input."""
        sb = wavelet.dwt2(x)
        return np.concatenate([sb.ll, sb.lh, sb.hl, sb.hh], axis=-1)

    def forward(self, x):
        h, w, _ = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"encoder block needs even spatial dims, got {h}x{w}")
        fws = self.subbands(x)
        fc = self.mix.forward(fws)
        fwb = self.fuse.forward(fws, fc)
        return self.proj.forward(fwb)

    def backward(self, gy):
        gfwb = self.proj.backward(gy)
        gfws, gfc = self.fuse.backward(gfwb)
        gfws += self.mix.backward(gfc)
        c = self.cin
        gsb = wavelet.WaveletSubbands(
            ll=gfws[..., 0 * c:1 * c], lh=gfws[..., 1 * c:2 * c],
            hl=gfws[..., 2 * c:3 * c], hh=gfws[..., 3 * c:4 * c])
        # orthonormal transform: the adjoint of dwt2 is idwt2
        return wavelet.idwt2(gsb)

    def params(self):
        return self.mix.params() + self.fuse.params() + self.proj.params()


class WatDecodeBlock:
    """Synthesis-initialized transposed-conv upsampling -> channel projection
    -> skip add -> feature mixing -> transformer fuse; doubles spatial dims,
    halves channels."""

    def __init__(self, rng, cin, token_cap, name="dec"):
        if cin % 4:
            raise ValueError("decoder input channels must be divisible by 4")
        cout = cin // 2
        self.upsample = ConvTranspose2x2(rng, cin, cin // 4, name=f"{name}.up",
                                         synthesis_init=True)
        self.proj = Conv2d(rng, cin // 4, cout, k=1, name=f"{name}.proj")
        self.mix = FeatureMix(rng, cout, token_cap, name=f"{name}.mix")
        self.fuse = TransformerFuse(rng, cout, token_cap, name=f"{name}.fuse")

    def forward(self, x, skip):
        up = self.proj.forward(self.upsample.forward(x))
        if up.shape != skip.shape:
            raise ValueError(f"skip shape {skip.shape} != decoder path {up.shape}")
        merged = up + skip
        fc = self.mix.forward(merged)
        return self.fuse.forward(merged, fc)

    def backward(self, gy):
        gmerged, gfc = self.fuse.backward(gy)
        gmerged += self.mix.backward(gfc)
        gskip = gmerged.copy()
        gx = self.upsample.backward(self.proj.backward(gmerged))
        return gx, gskip

    def params(self):
        return (self.upsample.params() + self.proj.params()
                + self.mix.params() + self.fuse.params())


class ResLPRNet:
    """Hierarchical encoder-decoder restoration network, toy scale."""

    def __init__(self, config: NetConfig = NetConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c, cap = config.base_channels, config.attn_token_cap
        self.embed = Conv2d(rng, 2, c, k=3, name="embed")
        self.encoders = [
            WatEncodeBlock(rng, c, cap, name="enc0"),
            WatEncodeBlock(rng, 2 * c, cap, name="enc1"),
            WatEncodeBlock(rng, 4 * c, cap, name="enc2"),
        ]
        self.bottleneck = TransformerFuse(rng, 8 * c, cap, name="bottleneck")
        self.decoders = [
            WatDecodeBlock(rng, 8 * c, cap, name="dec0"),
            WatDecodeBlock(rng, 4 * c, cap, name="dec1"),
            WatDecodeBlock(rng, 2 * c, cap, name="dec2"),
        ]
        self.guides = [
            ContextGuide(rng, 4 * c, config.n_contexts, name="ctg0"),
            ContextGuide(rng, 2 * c, config.n_contexts, name="ctg1"),
            ContextGuide(rng, c, config.n_contexts, name="ctg2"),
        ]
        # identity-initialized residual path: the untrained net is a no-op
        self.outconv = Conv2d(rng, c, 2, k=3, name="out",
                              w_init=np.zeros((3, 3, c, 2)))

    def params(self):
        out = self.embed.params()
        for m in self.encoders:
            out += m.params()
        out += self.bottleneck.params()
        for d, g in zip(self.decoders, self.guides):
            out += d.params() + g.params()
        out += self.outconv.params()
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def encode(self, f0):
        """Encoder + bottleneck; returns (bottleneck features, skip list)."""
        skips = [f0]
        x = f0
        for enc in self.encoders:
            x = enc.forward(x)
            skips.append(x)
        return self.bottleneck.forward(x, x), skips

    def forward_array(self, img: np.ndarray) -> np.ndarray:
        """(H, W, 2) -> (H, W, 2); H, W must be divisible by 8 (the public
        forward() pads and crops transparently)."""
        h, w, _ = img.shape
        if h % 8 or w % 8:
            raise ValueError(f"spatial dims must be divisible by 8, got {h}x{w}")
        if h < 16 or w < 16:
            raise ValueError(f"spatial dims must be at least 16, got {h}x{w}")
        f0 = self.embed.forward(img)
        x, skips = self.encode(f0)
        for k, (dec, ctg) in enumerate(zip(self.decoders, self.guides)):
            x = dec.forward(x, skips[2 - k])
            x = ctg.forward(x)
        delta = self.outconv.forward(x)
        pre = img + delta
        self._clip_mask = (pre >= 0.0) & (pre <= 1.0)
        return np.clip(pre, 0.0, 1.0)

    def backward_input(self, gy: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads for the last forward_array call;
        returns the gradient with respect to the input image."""
        g = gy * self._clip_mask
        gimg = g.copy()  # residual path
        gx = self.outconv.backward(g)
        # decoder k consumed skip e[2 - k]; collect skip grads by skip index
        gskips = [None, None, None]
        for k in (2, 1, 0):
            gx = self.guides[k].backward(gx)
            gx, gskip = self.decoders[k].backward(gx)
            gskips[2 - k] = gskip
        ga, gb = self.bottleneck.backward(gx)
        gx = ga + gb
        for k in (2, 1):
            gx = self.encoders[k].backward(gx) + gskips[k]
        gx = self.encoders[0].backward(gx) + gskips[0]
        gimg += self.embed.backward(gx)
        return gimg

    def forward(self, img: RangeImage) -> RangeImage:
        """Restore a range image; pads to /8-divisible extents and crops."""
        arr = img.channels()
        h, w, _ = arr.shape
        ph, pw = (-h) % 8, (-w) % 8
        if ph or pw:
            arr = np.pad(arr, [(0, ph), (0, pw), (0, 0)], mode="reflect")
        out = self.forward_array(arr)[:h, :w]
        dist, inten = out[..., 0], out[..., 1]
        # restoration can drop returns (floor) but never invent them: pixels
        # empty in the input stay empty
        mask = img.mask & (dist >= RESTORED_MASK_FLOOR)
        return RangeImage(dist=np.where(mask, dist, 0.0),
                          inten=np.where(mask, inten, 0.0),
                          mask=mask, spec=img.spec)


def loss_l1(pred: np.ndarray, clean: np.ndarray):
    """Mean absolute error over pixels: (1/N) sum(|d - d^| + |i - i^|).

    N is the pixel count; both channels contribute per pixel. Returns
    (loss, gradient wrt pred).
    """
    if pred.shape != clean.shape:
        raise ValueError(f"loss shapes differ: {pred.shape} vs {clean.shape}")
    n_px = pred.shape[0] * pred.shape[1]
    diff = pred - clean
    value = float(np.abs(diff).sum() / n_px)
    grad = np.sign(diff) / n_px
    return value, grad


def loss_images(pred: RangeImage, clean: RangeImage) -> float:
    value, _ = loss_l1(pred.channels(), clean.channels())
    return value


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self):
        self.t += 1
        for k, p in enumerate(self.params):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad ** 2
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True)
class TrainOptions:
    lr: float = 1e-4
    epochs: int = 10
    patch: tuple = (32, 480)
    flips: bool = True
    seed: int = 0


def _crop_flip(rng, corrupt, clean, patch, flips):
    h, w, _ = corrupt.shape
    ph, pw = min(patch[0], h), min(patch[1], w)
    ph -= ph % 8
    pw -= pw % 8
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    a = corrupt[top:top + ph, left:left + pw]
    b = clean[top:top + ph, left:left + pw]
    if flips:
        if rng.random() < 0.5:
            a, b = a[::-1], b[::-1]
        if rng.random() < 0.5:
            a, b = a[:, ::-1], b[:, ::-1]
    return np.ascontiguousarray(a), np.ascontiguousarray(b)


def train(net: ResLPRNet, pairs, opts: TrainOptions = TrainOptions()):
    """Adam training over (corrupt, clean) range-image pairs.

    Deterministic under a fixed seed. Raises on non-finite loss, naming
    the failing step. Returns the per-step loss curve.
    """
    if not pairs:
        raise ValueError("training requires a non-empty dataset")
    arrays = [(c.channels(), g.channels()) for c, g in pairs]
    rng = np.random.default_rng(opts.seed)
    optimizer = Adam(net.params(), lr=opts.lr)
    curve = []
    step = 0
    for _ in range(opts.epochs):
        order = rng.permutation(len(arrays))
        for idx in order:
            corrupt, clean = arrays[idx]
            a, b = _crop_flip(rng, corrupt, clean, opts.patch, opts.flips)
            pred = net.forward_array(a)
            value, grad = loss_l1(pred, b)
            if not math.isfinite(value):
                raise RuntimeError(f"non-finite loss at step {step}")
            net.zero_grad()
            net.backward_input(grad)
            optimizer.step()
            curve.append(value)
            step += 1
    return curve


def save_checkpoint(net: ResLPRNet, path) -> None:
    """Flat binary: magic, version, tensor count, then per tensor a
    length-prefixed name, rank, dims, and float32 little-endian data."""
    params = net.params()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        cfg = net.config
        fh.write(struct.pack("<III", cfg.base_channels, cfg.n_contexts,
                             cfg.attn_token_cap))
        for p in params:
            name = p.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            fh.write(p.value.astype("<f4").tobytes())


def load_checkpoint(path) -> ResLPRNet:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        base_c, n_ctx, cap = struct.unpack("<III", fh.read(12))
        net = ResLPRNet(NetConfig(base_channels=base_c, n_contexts=n_ctx,
                                  attn_token_cap=cap))
        table = {p.name: p for p in net.params()}
        if len(table) != count:
            raise ValueError(f"{path}: tensor count {count} != expected {len(table)}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            data = np.frombuffer(fh.read(4 * int(np.prod(shape))),
                                 dtype="<f4").reshape(shape).astype(float)
            if name not in table or table[name].value.shape != tuple(shape):
                raise ValueError(f"{path}: unexpected tensor {name} {shape}")
            table[name].value[...] = data
    return net
