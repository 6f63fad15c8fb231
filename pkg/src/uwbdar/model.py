"""Toy-scale ViT encoder, lightweight frequency extractor and fusion classifier.

Parameters live in flat ``{name: array}`` dicts so that forward/backward,
the optimizer, serialization and gradient checks all share one layout:

``b{i}.embed.w`` (P, d), ``b{i}.embed.b`` (d,), ``b{i}.pev`` (N, d),
``b{i}.pev_cls`` (d,), ``b{i}.cls`` (d,), ``b{i}.enc.{l}.*`` encoder blocks,
``b{i}.conv{j}.w/b`` frequency extractor layers, ``beta`` (1,),
``head.{j}.w/b`` classifier layers.

The encoder is pre-norm without a final LayerNorm, so zeroed attention and
MLP weights make every block an exact identity.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .adapt import GRID, K_ORIGINAL, InputAdapter, PevGrid, TokenSequence, compute_patch_plan
from .adapt import adapt_kernel, average_kernel_channels, extend_and_resize, patch_embed
from .domainmaps import FREQUENCY_TIME, DomainMap
from .resample import resize_bilinear

__all__ = [
    "EncoderConfig",
    "PretrainedBundle",
    "FusionHead",
    "BranchSpec",
    "ModelSpec",
    "DarModel",
    "FREQ_LAYERS",
    "HEAD_HIDDEN",
    "init_encoder",
    "random_bundle",
    "encoder_forward",
    "encoder_backward",
    "encode",
    "freq_feature",
    "fuse",
    "classify",
    "forward_isavit_fusion",
    "forward_earlyfusion_vit",
    "build_model",
    "model_from_fusion_head",
    "early_fusion_tokens",
    "encoder_macs",
]

FREQ_LAYERS: tuple[tuple[int, int, int], ...] = ((1, 4, 16), (4, 4, 32), (2, 2, 32))  # (kh, kw, channels_out)
HEAD_HIDDEN: tuple[int, int] = (64, 32)


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.layers < 1 or self.heads < 1:
            raise ValueError("d, layers and heads must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def hidden(self) -> int:
        return int(round(self.d * self.mlp_ratio))


# ---------------------------------------------------------------------------
# encoder


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64, prefix="enc") -> dict:
    d, h = cfg.d, cfg.hidden
    p = {}
    for layer in range(cfg.layers):
        n = f"{prefix}.{layer}."
        p[n + "ln1.g"] = np.ones(d, dtype)
        p[n + "ln1.b"] = np.zeros(d, dtype)
        p[n + "attn.wqkv"] = (rng.standard_normal((d, 3 * d)) / math.sqrt(d)).astype(dtype)
        p[n + "attn.bqkv"] = np.zeros(3 * d, dtype)
        p[n + "attn.wo"] = (rng.standard_normal((d, d)) * 0.5 / math.sqrt(d)).astype(dtype)
        p[n + "attn.bo"] = np.zeros(d, dtype)
        p[n + "ln2.g"] = np.ones(d, dtype)
        p[n + "ln2.b"] = np.zeros(d, dtype)
        p[n + "mlp.w1"] = (rng.standard_normal((d, h)) / math.sqrt(d)).astype(dtype)
        p[n + "mlp.b1"] = np.zeros(h, dtype)
        p[n + "mlp.w2"] = (rng.standard_normal((h, d)) * 0.5 / math.sqrt(h)).astype(dtype)
        p[n + "mlp.b2"] = np.zeros(d, dtype)
    return p


def encoder_forward(params: dict, x: np.ndarray, cfg: EncoderConfig, prefix="enc"):
    """Run the blocks over ``x`` ``(B, T, d)``; returns the final token states and a cache."""
    caches = []
    for layer in range(cfg.layers):
        n = f"{prefix}.{layer}."
        a_in, c_ln1 = nn.layernorm(x, params[n + "ln1.g"], params[n + "ln1.b"])
        a_out, c_att = nn.attention(
            a_in, params[n + "attn.wqkv"], params[n + "attn.bqkv"], params[n + "attn.wo"], params[n + "attn.bo"], cfg.heads
        )
        h = x + a_out
        m_in, c_ln2 = nn.layernorm(h, params[n + "ln2.g"], params[n + "ln2.b"])
        u, _ = nn.linear(m_in, params[n + "mlp.w1"], params[n + "mlp.b1"])
        g, c_gelu = nn.gelu(u)
        m_out, _ = nn.linear(g, params[n + "mlp.w2"], params[n + "mlp.b2"])
        x = h + m_out
        caches.append((c_ln1, c_att, c_ln2, m_in, c_gelu, g))
    return x, caches


def encoder_backward(dx: np.ndarray, caches, params: dict, cfg: EncoderConfig, prefix="enc"):
    grads = {}
    for layer in reversed(range(cfg.layers)):
        n = f"{prefix}.{layer}."
        c_ln1, c_att, c_ln2, m_in, c_gelu, g = caches[layer]
        dg, grads[n + "mlp.w2"], grads[n + "mlp.b2"] = nn.linear_backward(dx, g, params[n + "mlp.w2"])
        du = nn.gelu_backward(dg, c_gelu)
        dm_in, grads[n + "mlp.w1"], grads[n + "mlp.b1"] = nn.linear_backward(du, m_in, params[n + "mlp.w1"])
        dh_ln, grads[n + "ln2.g"], grads[n + "ln2.b"] = nn.layernorm_backward(dm_in, c_ln2)
        dh = dx + dh_ln
        da_in, grads[n + "attn.wqkv"], grads[n + "attn.bqkv"], grads[n + "attn.wo"], grads[n + "attn.bo"] = (
            nn.attention_backward(dh, c_att, params[n + "attn.wqkv"], params[n + "attn.wo"])
        )
        dx_ln, grads[n + "ln1.g"], grads[n + "ln1.b"] = nn.layernorm_backward(da_in, c_ln1)
        dx = dh + dx_ln
    return dx, grads


# ---------------------------------------------------------------------------
# pre-trained bundle


@dataclass
class PretrainedBundle:
    """RGB 16x16 projection kernel, 14x14 PEV grid, class token and encoder weights."""

    config: EncoderConfig
    kernel: np.ndarray  # (d, 3, 16, 16)
    kernel_bias: np.ndarray  # (d,)
    pev: PevGrid
    class_token: np.ndarray  # (d,)
    encoder: dict  # "enc.{l}.*"
    provenance: str = "random"
    notes: dict = field(default_factory=dict)

    PROVENANCES = ("toy-pretrained", "external", "random")

    def __post_init__(self):
        d = self.config.d
        if self.provenance not in self.PROVENANCES:
            raise ValueError(f"provenance must be one of {self.PROVENANCES}, got {self.provenance!r}")
        if self.kernel.shape != (d, 3, K_ORIGINAL, K_ORIGINAL):
            raise ValueError(f"kernel must be ({d}, 3, 16, 16), got {self.kernel.shape}")
        if self.kernel_bias.shape != (d,) or self.class_token.shape != (d,):
            raise ValueError("kernel bias and class token must have shape (d,)")
        if self.pev.grid.shape != (GRID, GRID, d):
            raise ValueError(f"PEV grid must be (14, 14, {d}), got {self.pev.grid.shape}")
        ref = init_encoder(self.config, np.random.default_rng(0))
        if set(ref) != set(self.encoder):
            raise ValueError("encoder weights do not match the configuration")
        for name, arr in ref.items():
            if self.encoder[name].shape != arr.shape:
                raise ValueError(f"{name}: expected shape {arr.shape}, got {self.encoder[name].shape}")

    def kernel16(self) -> np.ndarray:
        """Channel-averaged single-channel kernels ``(d, 16, 16)``."""
        return average_kernel_channels(self.kernel)[:, 0]


def random_bundle(cfg: EncoderConfig = EncoderConfig(), seed: int | None = None, dtype=np.float64) -> PretrainedBundle:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d = cfg.d
    fan_in = 3 * K_ORIGINAL * K_ORIGINAL
    return PretrainedBundle(
        config=cfg,
        kernel=(rng.standard_normal((d, 3, K_ORIGINAL, K_ORIGINAL)) / math.sqrt(fan_in)).astype(dtype),
        kernel_bias=np.zeros(d, dtype),
        pev=PevGrid(rng.standard_normal((GRID, GRID, d)) * 0.02, rng.standard_normal(d) * 0.02),
        class_token=np.zeros(d, dtype),
        encoder=init_encoder(cfg, rng, dtype),
        provenance="random",
    )


def _encoder_weights(weights):
    if isinstance(weights, PretrainedBundle):
        return weights.encoder, weights.config
    raise TypeError("pass a PretrainedBundle (or use encoder_forward with an explicit config)")


def encode(tokens, weights, cfg: EncoderConfig | None = None) -> np.ndarray:
    """Class-token representation after the encoder blocks.

    ``tokens`` is a :class:`TokenSequence` or an array ``(T, d)`` / ``(B, T, d)``;
    ``weights`` a :class:`PretrainedBundle` or an ``enc.*`` dict with ``cfg``.
    """
    x = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.float64)
    if cfg is None:
        enc, cfg = _encoder_weights(weights)
    else:
        enc = weights
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[-1] != cfg.d:
        raise ValueError(f"token dim {x.shape[-1]} does not match encoder d={cfg.d}")
    h, _ = encoder_forward(enc, x, cfg)
    out = h[:, 0]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# frequency extractor


def _blocks(x, kh, kw):
    """(B, H, W, C) -> (B, H//kh, W//kw, kh*kw*C), dropping the ragged border."""
    b, h, w, c = x.shape
    ho, wo = h // kh, w // kw
    y = x[:, : ho * kh, : wo * kw].reshape(b, ho, kh, wo, kw, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b, ho, wo, kh * kw * c)


def _unblocks(dy, shape, kh, kw):
    b, h, w, c = shape
    ho, wo = h // kh, w // kw
    d = dy.reshape(b, ho, wo, kh, kw, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, ho * kh, wo * kw, c)
    out = np.zeros(shape, dtype=dy.dtype)
    out[:, : ho * kh, : wo * kw] = d
    return out


def freq_min_shape(layers=FREQ_LAYERS) -> tuple[int, int]:
    return math.prod(l[0] for l in layers), math.prod(l[1] for l in layers)


def init_freq_extractor(rng, layers=FREQ_LAYERS, in_channels=1, dtype=np.float64, prefix="freq") -> dict:
    p = {}
    cin = in_channels
    for j, (kh, kw, cout) in enumerate(layers):
        fan = kh * kw * cin
        p[f"{prefix}.conv{j}.w"] = (rng.standard_normal((fan, cout)) * math.sqrt(2.0 / fan)).astype(dtype)
        p[f"{prefix}.conv{j}.b"] = np.zeros(cout, dtype)
        cin = cout
    return p


def freq_extractor_forward(params, x, layers=FREQ_LAYERS, prefix="freq"):
    """``x`` ``(B, H, W)`` -> features ``(B, channels_out)``.

    Each map is centred on its own mean, then passed through non-overlapping
    ``kh x kw`` block convolutions with GELU and averaged globally.
    """
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    mh, mw = freq_min_shape(layers)
    if x.shape[1] < mh or x.shape[2] < mw:
        raise ValueError(f"frequency input {x.shape[1:]} smaller than the receptive minimum {mh}x{mw}")
    h = (x - x.mean(axis=(1, 2), keepdims=True))[..., None]
    caches = []
    for j, (kh, kw, _) in enumerate(layers):
        blk = _blocks(h, kh, kw)
        u, _ = nn.linear(blk, params[f"{prefix}.conv{j}.w"], params[f"{prefix}.conv{j}.b"])
        g, cg = nn.gelu(u)
        caches.append((h.shape, blk, cg))
        h = g
    feat = h.mean(axis=(1, 2))
    return feat, (caches, h.shape)


def freq_extractor_backward(dfeat, cache, params, layers=FREQ_LAYERS, prefix="freq"):
    caches, last = cache
    b, ho, wo, c = last
    dh = np.broadcast_to(dfeat[:, None, None, :] / (ho * wo), last)
    grads = {}
    for j in reversed(range(len(layers))):
        kh, kw, _ = layers[j]
        shape, blk, cg = caches[j]
        du = nn.gelu_backward(dh, cg)
        dblk, grads[f"{prefix}.conv{j}.w"], grads[f"{prefix}.conv{j}.b"] = nn.linear_backward(
            du, blk, params[f"{prefix}.conv{j}.w"]
        )
        if j:
            dh = _unblocks(dblk, shape, kh, kw)
    return grads


# ---------------------------------------------------------------------------
# head


def init_head(rng, d_in, n_classes, hidden=HEAD_HIDDEN, dtype=np.float64, prefix="head") -> dict:
    dims = (d_in, *hidden, n_classes)
    p = {}
    for j in range(len(dims) - 1):
        p[f"{prefix}.{j}.w"] = (rng.standard_normal((dims[j], dims[j + 1])) * math.sqrt(1.0 / dims[j])).astype(dtype)
        p[f"{prefix}.{j}.b"] = np.zeros(dims[j + 1], dtype)
    return p


def _head_layers(params, prefix="head"):
    n = 0
    while f"{prefix}.{n}.w" in params:
        n += 1
    return n


def head_forward(params, z, prefix="head"):
    n = _head_layers(params, prefix)
    caches = []
    h = z
    for j in range(n):
        u, _ = nn.linear(h, params[f"{prefix}.{j}.w"], params[f"{prefix}.{j}.b"])
        if j < n - 1:
            g, cg = nn.gelu(u)
        else:
            g, cg = u, None
        caches.append((h, cg))
        h = g
    return h, caches


def head_backward(dout, caches, params, prefix="head"):
    grads = {}
    d = dout
    for j in reversed(range(len(caches))):
        h, cg = caches[j]
        if cg is not None:
            d = nn.gelu_backward(d, cg)
        d, grads[f"{prefix}.{j}.w"], grads[f"{prefix}.{j}.b"] = nn.linear_backward(d, h, params[f"{prefix}.{j}.w"])
    return d, grads


def fuse(feat_range: np.ndarray, feat_freq: np.ndarray, beta) -> np.ndarray:
    """``[feat_range ; beta * feat_freq]`` along the last axis."""
    a = np.asarray(feat_range)
    b = np.asarray(feat_freq)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(beta))):
        raise ValueError("fusion inputs must be finite")
    return np.concatenate([a, np.asarray(beta).reshape(()) * b], axis=-1)


# ---------------------------------------------------------------------------
# functional single-sample pipelines


@dataclass
class FusionHead:
    """Frequency extractor, beta and the three-layer classifier of a fusion model."""

    beta: float
    classifier: dict  # head.{j}.w / head.{j}.b
    freq: dict  # freq.conv{j}.w / .b
    freq_layers: tuple = FREQ_LAYERS
    # per-branch feature LayerNorm: range.g/b and freq.g/b (identity-affine when absent)
    norms: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        n = _head_layers(self.classifier)
        return self.classifier[f"head.{n - 1}.w"].shape[1]

    @classmethod
    def init(cls, d_range, n_classes=7, seed=0, freq_layers=FREQ_LAYERS, dtype=np.float64) -> "FusionHead":
        rng = np.random.default_rng(seed)
        freq = init_freq_extractor(rng, freq_layers, dtype=dtype)
        d_freq = freq_layers[-1][2]
        norms = {"range.g": np.ones(d_range, dtype), "range.b": np.zeros(d_range, dtype),
                 "freq.g": np.ones(d_freq, dtype), "freq.b": np.zeros(d_freq, dtype)}
        return cls(1.0, init_head(rng, d_range + d_freq, n_classes, dtype=dtype), freq, tuple(freq_layers), norms)


def _norm(f, norms, key):
    g = norms.get(f"{key}.g", np.ones(f.shape[-1]))
    b = norms.get(f"{key}.b", np.zeros(f.shape[-1]))
    return nn.layernorm(f, g, b)[0]


def freq_feature(m, weights, layers=None) -> np.ndarray:
    """Lightweight extractor applied to a frequency-time map at its native size."""
    if isinstance(m, DomainMap):
        if m.kind != FREQUENCY_TIME:
            raise ValueError(f"freq_feature needs a {FREQUENCY_TIME} map, got {m.kind}")
        x = m.data
    else:
        x = np.asarray(m)
    if isinstance(weights, FusionHead):
        layers, weights = weights.freq_layers, weights.freq
    layers = FREQ_LAYERS if layers is None else layers
    single = x.ndim == 2
    feat, _ = freq_extractor_forward(weights, np.asarray(x, dtype=np.float64), layers)
    return feat[0] if single else feat


def classify(z: np.ndarray, head: FusionHead | dict) -> np.ndarray:
    params = head.classifier if isinstance(head, FusionHead) else head
    out, _ = head_forward(params, np.asarray(z, dtype=np.float64))
    return out


def _isa_tokens(x: np.ndarray, bundle: PretrainedBundle) -> TokenSequence:
    plan = compute_patch_plan(*x.shape)
    kern = adapt_kernel(bundle.kernel16(), plan.k, bias=bundle.kernel_bias)
    return patch_embed(extend_and_resize(x, plan), kern, bundle.pev, class_token=bundle.class_token)


def forward_isavit_fusion(range_map, freq_map, bundle: PretrainedBundle, head: FusionHead) -> np.ndarray:
    """ISA-adapted ViT on the range map, lightweight extractor on the frequency map, fused and classified."""
    r = range_map.data if isinstance(range_map, DomainMap) else np.asarray(range_map)
    f_r = encode(_isa_tokens(np.asarray(r, dtype=np.float64), bundle), bundle)
    f_f = freq_feature(freq_map, head)
    z = fuse(_norm(f_r, head.norms, "range"), _norm(f_f, head.norms, "freq"), head.beta)
    return classify(z, head)


def early_fusion_tokens(range_map, freq_map, bundle: PretrainedBundle) -> np.ndarray:
    """Two-channel 224x224 image, 16x16 patches, channel-duplicated kernel (summed)."""
    r = range_map.data if isinstance(range_map, DomainMap) else range_map
    f = freq_map.data if isinstance(freq_map, DomainMap) else freq_map
    img = np.stack([resize_bilinear(np.asarray(r, np.float64), (224, 224)),
                    resize_bilinear(np.asarray(f, np.float64), (224, 224))])
    ad = InputAdapter("simple", (224, 224), channels=2)
    w, pev = ad.init_projection(bundle.kernel, bundle.pev)
    tok = nn.matmul(ad.patches(img), w.T) + bundle.kernel_bias + pev
    cls = bundle.class_token + bundle.pev.class_token_pev
    return np.vstack([cls, tok])


def forward_earlyfusion_vit(range_map, freq_map, bundle: PretrainedBundle, head: dict | FusionHead) -> np.ndarray:
    """Transformer baseline: both maps resized to 224x224 and stacked as channels of one image.

    ``head`` is a classifier dict (optionally with ``norm.g``/``norm.b``) or a
    :class:`FusionHead`, whose range norm is used.
    """
    feat = encode(early_fusion_tokens(range_map, freq_map, bundle), bundle)
    if isinstance(head, FusionHead):
        feat = _norm(feat, head.norms, "range")
    else:
        feat = _norm(feat, head, "norm")
    return classify(feat, head)


# ---------------------------------------------------------------------------
# batched trainable model


@dataclass(frozen=True)
class BranchSpec:
    """One feature extractor: ``kind="vit"`` (with an input adapter) or ``kind="light"``."""

    kind: str
    source: str  # which prepared input feeds it: "range", "freq", "early", ...
    adapter: InputAdapter | None = None
    input_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("vit", "light"):
            raise ValueError(f"branch kind must be vit or light, got {self.kind!r}")
        if self.kind == "vit" and self.adapter is None:
            raise ValueError("a vit branch needs an input adapter")


@dataclass(frozen=True)
class ModelSpec:
    branches: tuple[BranchSpec, ...]
    encoder: EncoderConfig = EncoderConfig()
    n_classes: int = 7
    beta_trainable: bool = True
    freq_layers: tuple = FREQ_LAYERS
    head_hidden: tuple = HEAD_HIDDEN

    def __post_init__(self):
        if not 1 <= len(self.branches) <= 2:
            raise ValueError("a model has one or two branches")

    @property
    def fused(self) -> bool:
        return len(self.branches) == 2

    def branch_dim(self, i) -> int:
        return self.encoder.d if self.branches[i].kind == "vit" else self.freq_layers[-1][2]


class DarModel:
    """Batched forward/backward over a flat parameter dict.

    Inputs are a list with one array per branch: ViT branches take patch
    matrices ``(B, N, P)`` produced by their adapter, light branches take raw
    maps ``(B, H, W)``.  With two branches the second feature is scaled by
    ``beta`` before concatenation.
    """

    def __init__(self, spec: ModelSpec, params: dict):
        self.spec = spec
        self.params = params

    # -- parameters -------------------------------------------------------
    def copy(self) -> "DarModel":
        return DarModel(self.spec, {k: v.copy() for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["head.0.w"].dtype

    def trainable(self) -> list[str]:
        names = list(self.params)
        if not self.spec.beta_trainable and "beta" in names:
            names.remove("beta")
        return names

    def pretrained_names(self) -> list[str]:
        """Parameters initialized from the bundle (projection, PEVs, class token, encoder)."""
        out = []
        for i, br in enumerate(self.spec.branches):
            if br.kind == "vit":
                pre = f"b{i}."
                out += [k for k in self.params
                        if k.startswith(pre) and k[len(pre):].split(".")[0] in ("embed", "pev", "pev_cls", "cls", "enc")]
        return out

    def features(self, inputs) -> list[np.ndarray]:
        """Raw per-branch features (before the branch norm and the head)."""
        out = []
        for i, br in enumerate(self.spec.branches):
            if br.kind == "vit":
                out.append(self._vit_forward(i, inputs[i])[0])
            else:
                out.append(freq_extractor_forward(self.params, inputs[i], self.spec.freq_layers, prefix=f"b{i}.freq")[0])
        return out

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward/backward -------------------------------------------------
    def _vit_forward(self, i, x):
        p = self.params
        pre = f"b{i}."
        b = x.shape[0]
        tok, _ = nn.linear(x, p[pre + "embed.w"], p[pre + "embed.b"])
        tok = tok + p[pre + "pev"]
        cls = np.broadcast_to(p[pre + "cls"] + p[pre + "pev_cls"], (b, 1, tok.shape[-1]))
        seq = np.concatenate([cls, tok], axis=1)
        h, caches = encoder_forward(p, seq, self.spec.encoder, prefix=pre + "enc")
        return h[:, 0], (x, caches, h.shape)

    def _vit_backward(self, i, dfeat, cache):
        p = self.params
        pre = f"b{i}."
        x, caches, hshape = cache
        dh = np.zeros(hshape, dtype=dfeat.dtype)
        dh[:, 0] = dfeat
        dseq, grads = encoder_backward(dh, caches, p, self.spec.encoder, prefix=pre + "enc")
        dcls = dseq[:, 0].sum(axis=0)
        dtok = dseq[:, 1:]
        grads[pre + "cls"] = dcls
        grads[pre + "pev_cls"] = dcls.copy()
        grads[pre + "pev"] = dtok.sum(axis=0)
        x2 = x.reshape(-1, x.shape[-1])
        grads[pre + "embed.w"] = nn.matmul(x2.T.astype(dtok.dtype, copy=False), dtok.reshape(-1, dtok.shape[-1]))
        grads[pre + "embed.b"] = dtok.sum(axis=(0, 1))
        return grads

    def forward(self, inputs):
        feats, caches = [], []
        for i, br in enumerate(self.spec.branches):
            x = inputs[i]
            if br.kind == "vit":
                f, c = self._vit_forward(i, x)
            else:
                f, c = freq_extractor_forward(self.params, x, self.spec.freq_layers, prefix=f"b{i}.freq")
            f, cn = nn.layernorm(f, self.params[f"b{i}.norm.g"], self.params[f"b{i}.norm.b"])
            feats.append(f)
            caches.append((c, cn))
        if self.spec.fused:
            z = fuse(feats[0], feats[1], self.params["beta"])
        else:
            z = feats[0]
        logits, hc = head_forward(self.params, z)
        return logits, (feats, caches, hc)

    def backward(self, dlogits, cache) -> dict:
        feats, caches, hc = cache
        dz, grads = head_backward(dlogits, hc, self.params)
        if self.spec.fused:
            d0 = feats[0].shape[-1]
            tail = dz[:, d0:]
            grads["beta"] = np.array([(tail * feats[1]).sum()], dtype=dz.dtype)
            dfeats = [dz[:, :d0], tail * self.params["beta"][0]]
        else:
            dfeats = [dz]
        for i, br in enumerate(self.spec.branches):
            c, cn = caches[i]
            df, grads[f"b{i}.norm.g"], grads[f"b{i}.norm.b"] = nn.layernorm_backward(dfeats[i], cn)
            if br.kind == "vit":
                grads.update(self._vit_backward(i, df, c))
            else:
                grads.update(freq_extractor_backward(df, c, self.params, self.spec.freq_layers, prefix=f"b{i}.freq"))
        if not self.spec.beta_trainable:
            grads.pop("beta", None)
        return grads

    def loss_and_grads(self, inputs, labels):
        logits, cache = self.forward(inputs)
        loss, dlogits = nn.softmax_xent(logits, labels)
        return loss, self.backward(dlogits.astype(logits.dtype, copy=False), cache)

    def logits(self, inputs, batch: int = 25) -> np.ndarray:
        n = len(inputs[0])
        out = [self.forward([x[s : s + batch] for x in inputs])[0] for s in range(0, n, batch)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.n_classes))

    def predict(self, inputs, batch: int = 25) -> np.ndarray:
        # argmax picks the lowest index on ties
        return self.logits(inputs, batch).argmax(axis=1)


def build_model(spec: ModelSpec, bundle: PretrainedBundle, seed: int = 0, dtype=np.float64) -> DarModel:
    """Initialize a model: ViT branches from the bundle, extractor/head/beta fresh."""
    if bundle.config.d != spec.encoder.d or bundle.config.layers != spec.encoder.layers:
        raise ValueError(f"bundle encoder {bundle.config} does not match model encoder {spec.encoder}")
    rng = np.random.default_rng(seed)
    p = {}
    for i, br in enumerate(spec.branches):
        pre = f"b{i}."
        if br.kind == "vit":
            w, pev = br.adapter.init_projection(bundle.kernel, bundle.pev)
            p[pre + "embed.w"] = w.T.astype(dtype)
            p[pre + "embed.b"] = bundle.kernel_bias.astype(dtype)
            p[pre + "pev"] = pev.astype(dtype)
            p[pre + "pev_cls"] = bundle.pev.class_token_pev.astype(dtype)
            p[pre + "cls"] = bundle.class_token.astype(dtype)
            for name, arr in bundle.encoder.items():
                p[pre + name] = arr.astype(dtype)
        else:
            p.update(init_freq_extractor(rng, spec.freq_layers, dtype=dtype, prefix=pre + "freq"))
        p[pre + "norm.g"] = np.ones(spec.branch_dim(i), dtype)
        p[pre + "norm.b"] = np.zeros(spec.branch_dim(i), dtype)
    d_in = sum(spec.branch_dim(i) for i in range(len(spec.branches)))
    p.update(init_head(rng, d_in, spec.n_classes, spec.head_hidden, dtype=dtype))
    if spec.fused:
        p["beta"] = np.ones(1, dtype)
    return DarModel(spec, p)


def model_from_fusion_head(bundle: PretrainedBundle, head: FusionHead, range_shape, freq_shape) -> DarModel:
    """Batched equivalent of :func:`forward_isavit_fusion` for given input shapes."""
    spec = ModelSpec(
        branches=(
            BranchSpec("vit", "range", InputAdapter("isa", tuple(range_shape))),
            BranchSpec("light", "freq", input_shape=tuple(freq_shape)),
        ),
        encoder=bundle.config,
        n_classes=head.n_classes,
        freq_layers=head.freq_layers,
        head_hidden=tuple(head.classifier[f"head.{j}.w"].shape[1] for j in range(_head_layers(head.classifier) - 1)),
    )
    m = build_model(spec, bundle)
    for name, arr in head.freq.items():
        m.params["b1." + name] = arr.copy()
    m.params.update({k: v.copy() for k, v in head.classifier.items()})
    m.params["beta"] = np.array([head.beta], dtype=np.float64)
    for i, key in enumerate(("range", "freq")):
        for part in ("g", "b"):
            if f"{key}.{part}" in head.norms:
                m.params[f"b{i}.norm.{part}"] = np.asarray(head.norms[f"{key}.{part}"], np.float64).copy()
    return m


# ---------------------------------------------------------------------------
# cost model


def encoder_macs(n_tokens: int, cfg: EncoderConfig, patch_dim: int = 0) -> int:
    """Analytic multiply-accumulate count of one forward pass (projection + blocks)."""
    t, d, h = n_tokens, cfg.d, cfg.hidden
    per_layer = t * d * 3 * d + 2 * t * t * d + t * d * d + 2 * t * d * h
    return (n_tokens - 1) * patch_dim * d + cfg.layers * per_layer
