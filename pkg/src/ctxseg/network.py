"""The five subnetworks and their wiring.

Backbone -> contextual module -> (enhanced features, per-pixel latent
distribution); a per-pixel MLP generator consumes (latent code, category
embedding); classifier and discriminator share their first 1x1 conv.
Ablation variants rewire the contextual module per the named presets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError, DimensionError, ParseError
from .rng import RngState

LEAKY_SLOPE = 0.2
DROPOUT_RATE = 0.5
SIGMA_FLOOR = 1e-6


class Conv2dLayer:
    def __init__(self, cin, cout, k, rng, stride=1, dilation=1):
        self.stride = stride
        self.dilation = dilation
        self.padding = ad.same_padding(k, dilation)
        fan_in = cin * k * k
        self.kernel = Parameter(ad.fan_in_uniform((cout, cin, k, k), fan_in, rng))
        self.bias = Parameter(ad.fan_in_uniform((cout,), fan_in, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.kernel.value, self.bias.value,
                         stride=self.stride, dilation=self.dilation,
                         padding=self.padding)

    def params(self, prefix):
        return [(f"{prefix}.kernel", self.kernel), (f"{prefix}.bias", self.bias)]


class AffineLayer:
    def __init__(self, din, dout, rng):
        self.weight = Parameter(ad.fan_in_uniform((dout, din), din, rng))
        self.bias = Parameter(ad.fan_in_uniform((dout,), din, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.weight.value, self.bias.value)

    def params(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


@dataclass(frozen=True)
class VariantConfig:
    """Wiring flags for the contextual module and module ablations."""
    use_cm: bool = True
    use_generator: bool = True
    use_discriminator: bool = True
    arrangement: str = "serial"  # serial | parallel
    residual: bool = True
    masked_center: bool = False
    selector: str = "per_pixel"  # per_pixel | global | off
    multiscale: bool = True
    dilated: bool = True
    context_kernel: int = 3
    eps_per_channel: bool = False

    def dilations(self):
        if not self.dilated:
            return (1, 1, 1)
        return (1, 2, 6) if self.arrangement == "parallel" else (1, 2, 5)

    def validate(self):
        if self.arrangement not in ("serial", "parallel"):
            raise ConfigError(f"unknown arrangement '{self.arrangement}'")
        if self.selector not in ("per_pixel", "global", "off"):
            raise ConfigError(f"unknown selector mode '{self.selector}'")
        if self.context_kernel not in (1, 3):
            raise ConfigError(f"context_kernel must be 1 or 3, got {self.context_kernel}")


VARIANTS = {
    "full": VariantConfig(),
    # module ablations
    "baseline": VariantConfig(use_cm=False, use_generator=False, use_discriminator=False),
    "cm_only": VariantConfig(use_generator=False, use_discriminator=False),
    "gen_no_d": VariantConfig(use_cm=False, use_discriminator=False),
    "no_cm": VariantConfig(use_cm=False),
    # contextual-module variants
    "conv1x1": VariantConfig(dilated=False, multiscale=False, selector="off",
                             context_kernel=1),
    "conv_stack": VariantConfig(dilated=False, multiscale=False, selector="off"),
    "dilated_only": VariantConfig(multiscale=False, selector="off"),
    "no_selector": VariantConfig(selector="off"),
    "masked_center": VariantConfig(masked_center=True),
    "global_selector": VariantConfig(selector="global"),
    "no_residual": VariantConfig(residual=False),
    "parallel": VariantConfig(arrangement="parallel"),
}


def variant_config(name: str) -> VariantConfig:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(
            f"unknown variant '{name}'; valid: {', '.join(sorted(VARIANTS))}") from None


@dataclass
class LatentCodeMap:
    z: Tensor
    mu: Tensor | None
    sigma: Tensor | None


def sample_latent(mu: Tensor, sigma: Tensor, rng: RngState,
                  per_channel: bool = False) -> Tensor:
    """z = mu + eps * sigma; eps is one N(0,1) scalar per pixel by default."""
    if np.any(sigma.data <= 0):
        raise ContractError("sample_latent requires sigma > 0")
    n, l, h, w = mu.shape
    shape = (n, l, h, w) if per_channel else (n, 1, h, w)
    eps = Tensor(rng.normal(shape))
    return ad.add(mu, ad.mul(eps, sigma))


class Backbone:
    """Small trainable conv stack; output stride 4, channels ramp up to l."""

    def __init__(self, feat, rng):
        self.feat = feat
        c1, c2 = max(feat // 4, 2), max(feat // 2, 2)
        specs = [(3, c1, 1), (c1, c2, 2), (c2, feat, 1), (feat, feat, 2)]
        self.convs = [Conv2dLayer(cin, cout, 3, rng.spawn(f"backbone{i}"), stride=s)
                      for i, (cin, cout, s) in enumerate(specs)]

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h % 4 or w % 4:
            raise DimensionError(f"backbone input {h}x{w} must be divisible by 4")
        for conv in self.convs:
            x = ad.leaky_relu(conv(x), LEAKY_SLOPE)
        return x

    def params(self):
        out = []
        for i, conv in enumerate(self.convs):
            out += conv.params(f"backbone.conv{i}")
        return out


class ContextModule:
    """Multi-scale context maps -> per-pixel latent distribution (mu, sigma)."""

    def __init__(self, feat, rng, variant: VariantConfig):
        self.feat = feat
        self.variant = variant
        k = variant.context_kernel
        dil = variant.dilations()
        self.ctx = [Conv2dLayer(feat, feat, k, rng.spawn(f"cm.ctx{i}"), dilation=d)
                    for i, d in enumerate(dil)]
        self.selector_conv = None
        self.selector_fc = None
        if variant.selector == "per_pixel":
            self.selector_conv = Conv2dLayer(3 * feat, 3, 3, rng.spawn("cm.selector"))
        elif variant.selector == "global":
            self.selector_fc = AffineLayer(3 * feat, 3, rng.spawn("cm.selector"))
        head_in = 3 * feat if variant.multiscale else feat
        self.head = Conv2dLayer(head_in, 2 * feat, 1, rng.spawn("cm.head"))
        self.apply_center_mask()

    def apply_center_mask(self):
        """Zero the center tap of the first context conv (masked variant)."""
        if self.variant.masked_center and self.variant.context_kernel > 1:
            c = self.variant.context_kernel // 2
            self.ctx[0].kernel.value.data[:, :, c, c] = 0.0

    def context_maps(self, f: Tensor):
        maps = []
        if self.variant.arrangement == "serial":
            cur = f
            for conv in self.ctx:
                cur = ad.leaky_relu(conv(cur), LEAKY_SLOPE)
                maps.append(cur)
        else:  # parallel: each conv reads the backbone features directly
            maps = [ad.leaky_relu(conv(f), LEAKY_SLOPE) for conv in self.ctx]
        return maps

    def scale_weights(self, maps):
        """Per-pixel (or global) 3-way softmax over scales; None if selector off."""
        cat = ad.concat(maps, axis=1)
        if self.variant.selector == "per_pixel":
            return ad.softmax_channels(self.selector_conv(cat))
        if self.variant.selector == "global":
            pooled = ad.mean(cat, axis=(2, 3))  # [N, 3l]
            logits = self.selector_fc(pooled)  # [N, 3]
            n = logits.shape[0]
            return ad.softmax_channels(ad.reshape(logits, (n, 3, 1, 1)))
        return None

    def forward(self, f: Tensor, rng: RngState, train: bool):
        """Returns (X, LatentCodeMap, A)."""
        maps = self.context_maps(f)
        a = self.scale_weights(maps)
        if self.variant.multiscale:
            if a is not None:
                weighted = [ad.mul(m, ad.slice_channels(a, k, k + 1))
                            for k, m in enumerate(maps)]
            else:
                weighted = maps
            head_in = ad.concat(weighted, axis=1)
        else:
            head_in = maps[-1]
        stats = self.head(head_in)
        mu = ad.slice_channels(stats, 0, self.feat)
        logvar = ad.slice_channels(stats, self.feat, 2 * self.feat)
        sigma = ad.clip_min(ad.exp(ad.mul(logvar, Tensor(0.5))), SIGMA_FLOOR)
        if train:
            z = sample_latent(mu, sigma, rng, self.variant.eps_per_channel)
        else:
            z = mu
        if self.variant.residual:
            x = ad.add(f, ad.mul(f, ad.sigmoid(z)))
        else:
            x = f
        return x, LatentCodeMap(z=z, mu=mu, sigma=sigma), a

    def params(self):
        out = []
        for i, conv in enumerate(self.ctx):
            out += conv.params(f"cm.ctx{i}")
        if self.selector_conv is not None:
            out += self.selector_conv.params("cm.selector")
        if self.selector_fc is not None:
            out += self.selector_fc.params("cm.selector")
        out += self.head.params("cm.head")
        return out


class Generator:
    """Per-pixel MLP: (latent code, embedding) -> feature vector."""

    def __init__(self, feat, embed_dim, hidden, rng):
        self.feat = feat
        self.embed_dim = embed_dim
        self.fc = [
            AffineLayer(embed_dim + feat, hidden, rng.spawn("gen.fc0")),
            AffineLayer(hidden, hidden, rng.spawn("gen.fc1")),
            AffineLayer(hidden, feat, rng.spawn("gen.fc2")),
        ]

    def forward_rows(self, rows: Tensor, rng: RngState, train: bool) -> Tensor:
        h = rows
        for fc in self.fc[:-1]:
            h = ad.dropout(ad.leaky_relu(fc(h), LEAKY_SLOPE), DROPOUT_RATE, rng, train)
        return self.fc[-1](h)

    def forward(self, z: Tensor, w: Tensor, rng: RngState, train: bool) -> Tensor:
        """Maps [N,l,h,w] + [N,d,h,w] -> [N,l,h,w]; or rows [M,l] + [M,d] -> [M,l]."""
        if z.ndim == 2:
            return self.forward_rows(ad.concat([z, w], axis=1), rng, train)
        if z.shape[1] != self.feat or w.shape[1] != self.embed_dim:
            raise DimensionError(
                f"generator expects l={self.feat}, d={self.embed_dim}; "
                f"got z {z.shape}, w {w.shape}")
        n, _, h, wd = z.shape
        rows = ad.concat([z, w], axis=1)
        rows = ad.reshape(ad.transpose(rows, (0, 2, 3, 1)), (n * h * wd, -1))
        out = self.forward_rows(rows, rng, train)
        return ad.transpose(ad.reshape(out, (n, h, wd, self.feat)), (0, 3, 1, 2))

    def params(self):
        out = []
        for i, fc in enumerate(self.fc):
            out += fc.params(f"gen.fc{i}")
        return out


class SharedHead:
    """Classifier and discriminator sharing their first 1x1 conv layer."""

    def __init__(self, feat, num_classes, rng):
        self.shared = Conv2dLayer(feat, feat, 1, rng.spawn("heads.shared"))
        self.cls = Conv2dLayer(feat, num_classes, 1, rng.spawn("heads.cls"))
        self.dis = Conv2dLayer(feat, 1, 1, rng.spawn("heads.dis"))

    def _stem(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(self.shared(x), LEAKY_SLOPE)

    def classify(self, x: Tensor) -> Tensor:
        return self.cls(self._stem(x))

    def discriminate(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.dis(self._stem(x)))

    def shared_params(self):
        return self.shared.params("heads.shared")

    def cls_params(self):
        return self.cls.params("heads.cls")

    def dis_params(self):
        return self.dis.params("heads.dis")


class Model:
    """Assembled network state plus parameter-group bookkeeping."""

    def __init__(self, num_classes, embed_dim, feat=64, hidden=512,
                 variant: VariantConfig | str = "full", seed: int = 0):
        if isinstance(variant, str):
            variant = variant_config(variant)
        variant.validate()
        self.variant = variant
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.feat = feat
        self.hidden = hidden
        self.seed = seed
        rng = RngState(seed).spawn("init")
        self.backbone = Backbone(feat, rng)
        self.cm = ContextModule(feat, rng, variant) if variant.use_cm else None
        self.generator = (Generator(feat, embed_dim, hidden, rng)
                          if variant.use_generator else None)
        self.heads = SharedHead(feat, num_classes, rng)

    # ---- parameter groups -------------------------------------------------
    def e_params(self):
        return [p for _, p in self.backbone.params()]

    def cm_params(self):
        return [p for _, p in self.cm.params()] if self.cm else []

    def g_params(self):
        return [p for _, p in self.generator.params()] if self.generator else []

    def shared_params(self):
        return [p for _, p in self.heads.shared_params()]

    def c_own_params(self):
        return [p for _, p in self.heads.cls_params()]

    def d_own_params(self):
        return [p for _, p in self.heads.dis_params()]

    def joint_params(self):
        """Everything the minimization step updates (D's own layer excluded)."""
        return (self.e_params() + self.cm_params() + self.g_params()
                + self.shared_params() + self.c_own_params())

    def finetune_params(self):
        return self.g_params() + self.shared_params() + self.c_own_params()

    def all_params(self):
        return [p for _, p in self.named_params()]

    def named_params(self):
        out = list(self.backbone.params())
        if self.cm:
            out += self.cm.params()
        if self.generator:
            out += self.generator.params()
        out += self.heads.shared_params() + self.heads.cls_params() + self.heads.dis_params()
        return out

    def zero_all_grads(self):
        for p in self.all_params():
            p.zero_grad()

    def apply_constraints(self):
        if self.cm:
            self.cm.apply_center_mask()

    def param_checksum(self, params=None) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in self.named_params():
            if params is None or any(p is q for q in params):
                h.update(name.encode())
                h.update(p.data.tobytes())
        return h.hexdigest()

    # ---- forward paths ----------------------------------------------------
    def features(self, images: Tensor, rng: RngState = None, train: bool = False):
        """E -> CM. Returns (F, X, LatentCodeMap|None, A|None)."""
        f = self.backbone(images)
        if self.cm is None:
            return f, f, None, None
        x, latent, a = self.cm.forward(f, rng, train)
        return f, x, latent, a

    def segment(self, image: np.ndarray) -> np.ndarray:
        """Deterministic label map at feature resolution (argmax over classes)."""
        logits = self.segment_logits(image)
        return np.argmax(logits, axis=0).astype(np.uint8)

    def segment_logits(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None]
        _, x, _, _ = self.features(Tensor(arr), rng=None, train=False)
        logits = self.heads.classify(x).data
        return logits[0] if squeeze else logits


# ---------------------------------------------------------------------------
# checkpoint I/O: documented little-endian binary
#
#   magic   8 bytes  b"CSEGCKP1"
#   meta    u32 length + UTF-8 key=value lines (dims, variant flags)
#   count   u32 number of parameters
#   per parameter:
#       u16 name length, name UTF-8
#       u8 ndim, ndim * u32 dims
#       raw float64 little-endian values (row-major)
# ---------------------------------------------------------------------------

_MAGIC = b"CSEGCKP1"


def _meta_text(model: Model) -> str:
    lines = [f"num_classes={model.num_classes}", f"embed_dim={model.embed_dim}",
             f"feat={model.feat}", f"hidden={model.hidden}", f"seed={model.seed}"]
    for f in fields(VariantConfig):
        lines.append(f"variant.{f.name}={getattr(model.variant, f.name)}")
    return "\n".join(lines)


def _parse_meta(text: str):
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    def as_bool(v):
        return v == "True"
    vkw = {}
    for f in fields(VariantConfig):
        raw = kv[f"variant.{f.name}"]
        vkw[f.name] = as_bool(raw) if f.type == "bool" else (
            int(raw) if f.type == "int" else raw)
    return (int(kv["num_classes"]), int(kv["embed_dim"]), int(kv["feat"]),
            int(kv["hidden"]), int(kv["seed"]), VariantConfig(**vkw))


def save_checkpoint(model: Model, path) -> None:
    """Atomic write (tmp + rename); exact float64 round-trip."""
    import os
    meta = _meta_text(model).encode("utf-8")
    named = model.named_params()
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", len(meta)) + meta
    blob += struct.pack("<I", len(named))
    for name, p in named:
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        arr = p.data
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic at byte 0")
    pos = 8
    try:
        (mlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = data[pos: pos + mlen].decode("utf-8")
        pos += mlen
        num_classes, embed_dim, feat, hidden, seed, variant = _parse_meta(meta)
        model = Model(num_classes, embed_dim, feat=feat, hidden=hidden,
                      variant=variant, seed=seed)
        lookup = dict(model.named_params())
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos: pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            nval = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=nval, offset=pos)
            pos += 8 * nval
            if name not in lookup:
                raise ParseError(f"{path}: unexpected parameter '{name}'")
            if tuple(dims) != lookup[name].data.shape:
                raise ParseError(
                    f"{path}: parameter '{name}' has shape {tuple(dims)}, "
                    f"model expects {lookup[name].data.shape}")
            lookup[name].value.data = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError):
        raise ParseError(f"{path}: checkpoint truncated at byte {pos}") from None
    return model
