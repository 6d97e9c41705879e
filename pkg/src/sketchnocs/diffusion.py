"""Multi-view conditional diffusion over NOCS rasters.

Diffusion runs directly in pixel space: rasters are scaled to [-1,1] and the
visible and occluded layers travel together as one 6-channel image per view,
so the two layers stay aligned by construction.

The denoiser is a small U-Net (two downsamples, a bottleneck, two upsamples)
applied per view with shared weights. A cross-view mixing layer sits after
every resolution change: subtract the mean over views, convolve, apply a
nonlinearity, and add the result back, so permuting input views permutes
outputs and a single view degrades to a plain U-Net plus a fixed offset.

Sketch conditioning follows the trainable-copy pattern: a duplicate of the
encoder consumes the sketch and feeds zero-initialized remap convolutions
into the skip connections and bottleneck, so at initialization the sketch
has exactly zero effect. The fused viewpoint+shape vector and the prompt
embedding are projected and added at the end of each decoder layer; the
fused-vector projections are also zero-initialized because both halves
derive from the sketch.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tz
from .errors import CheckpointError, InvalidInputError
from .geometry import DEFAULT_MASK_THRESHOLD, NocsFrame, NocsMap
from .tensor import Tape, Tensor, backpropagate, no_recording
from .viewpoint import SveWeights, encode_viewpoint, fuse_condition

OUT_CHANNELS = 6  # visible + occluded NOCS layers


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal fraction at step t; t=0 means clean data."""
        if not (0 <= t <= self.timesteps):
            raise InvalidInputError(f"step {t} outside [0, {self.timesteps}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def make_schedule(timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if timesteps < 2:
        raise InvalidInputError(f"need at least 2 steps, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidInputError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(timesteps, beta, alpha_bar)


def forward_diffuse(x0: Tensor, t: int, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with x0 scaled to [-1,1]."""
    if not (1 <= t <= s.timesteps):
        raise InvalidInputError(f"step {t} outside [1, {s.timesteps}]")
    if x0.shape != eps.shape:
        raise InvalidInputError(f"x0/eps shape mismatch: {x0.shape} vs {eps.shape}")
    ab = s.alpha_bar_at(t)
    return tz.add(tz.mul_scalar(x0, math.sqrt(ab)), tz.mul_scalar(eps, math.sqrt(1.0 - ab)))


def clamp_unit(x: Tensor) -> Tensor:
    """Clamp to [-1,1] using catalog primitives so gradients pass through."""
    ones = Tensor(np.ones(x.shape, dtype=x.dtype))
    over = tz.relu(tz.add(x, tz.mul_scalar(ones, -1.0)))
    under = tz.relu(tz.add(tz.mul_scalar(x, -1.0), tz.mul_scalar(ones, -1.0)))
    return tz.add(tz.add(x, tz.mul_scalar(over, -1.0)), under)


def predict_x0(z_t: Tensor, eps_hat: Tensor, t: int, s: NoiseSchedule, clamp: bool = True) -> Tensor:
    """Invert the forward process given a noise estimate."""
    if not (1 <= t <= s.timesteps):
        raise InvalidInputError(f"step {t} outside [1, {s.timesteps}]")
    ab = s.alpha_bar_at(t)
    x0 = tz.add(
        tz.mul_scalar(z_t, 1.0 / math.sqrt(ab)),
        tz.mul_scalar(eps_hat, -math.sqrt(1.0 - ab) / math.sqrt(ab)),
    )
    return clamp_unit(x0) if clamp else x0


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of an integer step."""
    if dim % 2 != 0:
        raise InvalidInputError(f"time embedding width must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


# ---------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class DenoiserSpec:
    base_width: int = 16
    time_dim: int = 32
    viewpoint_dim: int = 32
    shape_dim: int = 64
    prompt_dim: int = 32
    prompt_vocab: int = 256
    pe_mode: str = "residual"

    def __post_init__(self):
        if self.pe_mode not in ("residual", "pure"):
            raise InvalidInputError(f"pe_mode must be residual|pure, got {self.pe_mode!r}")

    @classmethod
    def from_config(cls, cfg) -> "DenoiserSpec":
        return cls(
            base_width=cfg.base_width,
            time_dim=cfg.time_dim,
            viewpoint_dim=cfg.sve_feature_dim,
            shape_dim=cfg.shape_dim,
            prompt_dim=cfg.prompt_dim,
            prompt_vocab=cfg.prompt_vocab,
            pe_mode=cfg.pe_mode,
        )


_BASE_PREFIXES = ("enc0.", "enc1.", "enc2.", "mid.", "dec1.", "dec2.", "out.",
                  "pe1.", "pe2.", "pe3.", "pe4.", "tproj.")
_CONTROL_PREFIXES = ("ctrl0.", "ctrl1.", "ctrl2.", "zremap0.", "zremap1.", "zremap2.",
                     "fsproj.", "condproj.", "promptproj.", "prompt_table")
_FIXED_PREFIXES = ("phi.",)


@dataclass(frozen=True)
class DenoiserWeights:
    tensors: dict[str, Tensor]
    spec: DenoiserSpec
    arch_hash: str

    def base_names(self) -> list[str]:
        return sorted(n for n in self.tensors if n.startswith(_BASE_PREFIXES))

    def control_names(self) -> list[str]:
        return sorted(n for n in self.tensors if n.startswith(_CONTROL_PREFIXES))

    def trainable_names(self) -> list[str]:
        return self.base_names() + self.control_names()

    def group(self, names) -> dict[str, Tensor]:
        return {n: self.tensors[n] for n in names}

    def replaced(self, updates: dict[str, Tensor]) -> "DenoiserWeights":
        merged = dict(self.tensors)
        merged.update(updates)
        return replace(self, tensors=merged)


def init_denoiser(spec: DenoiserSpec, arch_hash: str, seed: int) -> DenoiserWeights:
    rng = np.random.default_rng([seed, 0xD1F0])

    def he(shape, fan_in, scale=1.0):
        return Tensor((rng.standard_normal(shape) * scale * math.sqrt(2.0 / fan_in)).astype(np.float32),
                      requires_grad=True)

    def zeros(shape, requires_grad=True):
        return Tensor(np.zeros(shape, np.float32), requires_grad=requires_grad)

    b = spec.base_width
    dt = spec.time_dim
    dc = spec.viewpoint_dim + spec.shape_dim
    dp = spec.prompt_dim
    t: dict[str, Tensor] = {}

    def conv(name, cout, cin, zero=False, scale=1.0):
        t[f"{name}.w"] = zeros((cout, cin, 3, 3)) if zero else he((cout, cin, 3, 3), cin * 9, scale)
        t[f"{name}.b"] = zeros((cout,))

    def dense_(name, din, dout, zero=False):
        t[f"{name}.w"] = zeros((din, dout)) if zero else he((din, dout), din)
        t[f"{name}.b"] = zeros((dout,))

    conv("enc0", b, OUT_CHANNELS)
    conv("enc1", 2 * b, b)
    conv("enc2", 4 * b, 2 * b)
    conv("mid", 4 * b, 4 * b)
    conv("dec1", 2 * b, 6 * b)
    conv("dec2", b, 3 * b)
    # near-zero output init: the first prediction is almost zero noise, so
    # early optimization does not fight a random initial output, while
    # gradients still reach every upstream layer from the first step
    conv("out", OUT_CHANNELS, b, scale=0.02)
    # zero-init mixing convs: cross-view layers start as identity
    conv("pe1", b, b, zero=True)
    conv("pe2", 2 * b, 2 * b, zero=True)
    conv("pe3", 4 * b, 4 * b, zero=True)
    conv("pe4", 2 * b, 2 * b, zero=True)
    # fused information lands at the end of every layer: the timestep, the
    # fused viewpoint+shape vector (zero-gated, sketch-derived) and the
    # prompt embedding each get one projection per layer
    for name, width in (("enc0", b), ("enc1", 2 * b), ("enc2", 4 * b),
                        ("mid", 4 * b), ("dec1", 2 * b), ("dec2", b)):
        dense_(f"tproj.{name}", dt, width)
        dense_(f"condproj.{name}", dc, width, zero=True)
        dense_(f"promptproj.{name}", dp, width)

    conv("ctrl0", b, 1)
    conv("ctrl1", 2 * b, b)
    conv("ctrl2", 4 * b, 2 * b)
    conv("zremap0", b, b, zero=True)
    conv("zremap1", 2 * b, 2 * b, zero=True)
    conv("zremap2", 4 * b, 4 * b, zero=True)
    dense_("fsproj", 4 * b, spec.shape_dim)
    # unit-ish rows: the embedding must be loud enough at initialization for
    # the prompt pathway to compete with the raster signal
    t["prompt_table"] = Tensor(
        (rng.standard_normal((spec.prompt_vocab + 1, dp)) * 0.5).astype(np.float32),
        requires_grad=True,
    )

    # fixed random conv stack standing in for a pretrained feature extractor
    phi_rng = np.random.default_rng([seed, 0xFEE7])
    for i, (cout, cin) in enumerate(((8, OUT_CHANNELS), (8, 8), (8, 8)), start=1):
        t[f"phi.c{i}.w"] = Tensor(
            (phi_rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9))).astype(np.float32)
        )
        t[f"phi.c{i}.b"] = Tensor(np.zeros(cout, np.float32))
    return DenoiserWeights(t, spec, arch_hash)


# ---------------------------------------------------------------------------
# conditioning


@dataclass(frozen=True)
class ConditionBundle:
    """Per-view conditioning: sketches, fused features, prompt rows.

    The prompt embedding is replicated per view so every per-view field has
    length V. ``ctrl`` caches the control-encoder activations for the
    weights the bundle was built against.
    """

    sketches: Tensor
    c_f: Tensor
    prompt_embedding: Tensor
    n_views: int
    ctrl: tuple[Tensor, Tensor, Tensor] | None = None

    def __post_init__(self):
        if self.n_views < 1:
            raise InvalidInputError("need at least one view")
        for name, field in (("sketches", self.sketches), ("c_f", self.c_f),
                            ("prompt_embedding", self.prompt_embedding)):
            if field.shape[0] != self.n_views:
                raise InvalidInputError(
                    f"{name} has {field.shape[0]} rows for {self.n_views} views"
                )


def _hash_token(token: str, vocab: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % vocab


def _prompt_selection(text: str, vocab: int, n_views: int) -> np.ndarray:
    """[V, vocab+1] averaging matrix; the last column is the null slot."""
    sel = np.zeros((n_views, vocab + 1), np.float32)
    tokens = text.lower().split()
    if not tokens:
        sel[:, vocab] = 1.0
    else:
        for tok in tokens:
            sel[:, _hash_token(tok, vocab)] += 1.0 / len(tokens)
    return sel


def embed_prompt(text: str, w: DenoiserWeights, dropout: float = 0.0,
                 rng: np.random.Generator | None = None, n_views: int = 1) -> Tensor:
    """Hash words into the embedding table and mean-pool, one row per view.

    With probability ``dropout`` (training only) the prompt is replaced by
    the empty string, which maps to the dedicated learned null embedding.
    """
    if not (0.0 <= dropout <= 1.0):
        raise InvalidInputError(f"dropout must be in [0,1], got {dropout}")
    if dropout > 0.0:
        if rng is None:
            raise InvalidInputError("dropout requires an rng")
        if rng.random() < dropout:
            text = ""
    sel = _prompt_selection(text, w.spec.prompt_vocab, n_views)
    return tz.dense(Tensor(sel), w.tensors["prompt_table"])


def control_features(sketches: Tensor, w: DenoiserWeights):
    """Duplicate-encoder activations of the sketch at each resolution."""
    t = w.tensors
    c0 = tz.silu(tz.conv2d(sketches, t["ctrl0.w"], t["ctrl0.b"]))
    c1 = tz.silu(tz.conv2d(tz.layer_norm(tz.downsample2x(c0)), t["ctrl1.w"], t["ctrl1.b"]))
    c2 = tz.silu(tz.conv2d(tz.layer_norm(tz.downsample2x(c1)), t["ctrl2.w"], t["ctrl2.b"]))
    return c0, c1, c2


def shape_feature(c2: Tensor, w: DenoiserWeights) -> Tensor:
    """Pool the control bottleneck into the per-view shape feature f_s."""
    pooled = tz.mean_axis(tz.mean_axis(c2, 3), 2)
    return tz.dense(pooled, w.tensors["fsproj.w"], w.tensors["fsproj.b"])


def build_condition(
    sketches: np.ndarray,
    w: DenoiserWeights,
    prompt: str,
    *,
    f_v: np.ndarray | None = None,
    sve: SveWeights | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    zero_viewpoint: bool = False,
) -> ConditionBundle:
    """Assemble the conditioning bundle for one object's views.

    ``sketches`` is [V,H,W] or [V,1,H,W]. The viewpoint feature comes either
    precomputed (``f_v``, [V,D_v]) or from a viewpoint encoder; gradients
    never flow into the encoder. The shape feature is recorded, so training
    reaches the control branch through the fused vector as well.
    """
    sk = np.asarray(sketches, np.float32)
    if sk.ndim == 3:
        sk = sk[:, None, :, :]
    if sk.ndim != 4 or sk.shape[1] != 1:
        raise InvalidInputError(f"sketches must be [V,H,W] or [V,1,H,W], got {sk.shape}")
    n_views = sk.shape[0]
    if zero_viewpoint:
        f_v = np.zeros((n_views, w.spec.viewpoint_dim), np.float32)
    elif f_v is None:
        if sve is None:
            raise InvalidInputError("need either f_v or a viewpoint encoder")
        f_v = np.stack([encode_viewpoint(sk[i, 0], sve) for i in range(n_views)])
    f_v = np.asarray(f_v, np.float32)
    if f_v.shape != (n_views, w.spec.viewpoint_dim):
        raise InvalidInputError(
            f"f_v shape {f_v.shape} != ({n_views}, {w.spec.viewpoint_dim})"
        )
    sk_t = Tensor(sk)
    c0, c1, c2 = control_features(sk_t, w)
    f_s = shape_feature(c2, w)
    c_f = fuse_condition(Tensor(f_v), f_s, d_v=w.spec.viewpoint_dim, d_s=w.spec.shape_dim)
    prompt_rows = embed_prompt(prompt, w, dropout=dropout, rng=rng, n_views=n_views)
    return ConditionBundle(sk_t, c_f, prompt_rows, n_views, ctrl=(c0, c1, c2))


# ---------------------------------------------------------------------------
# denoiser forward


def perm_equivariant_layer(x: Tensor, w: Tensor, b: Tensor, mode: str = "residual") -> Tensor:
    """Cross-view mixing: convolve the mean-subtracted stack, then either add
    it back (residual) or return it directly (pure)."""
    mixed = tz.silu(tz.conv2d(tz.group_mean_subtract(x), w, b))
    if mode == "pure":
        return mixed
    return tz.add(x, mixed)


def _pe(name: str, x: Tensor, w: DenoiserWeights) -> Tensor:
    return perm_equivariant_layer(x, w.tensors[f"{name}.w"], w.tensors[f"{name}.b"], w.spec.pe_mode)


def _tproj(name: str, temb_rows: Tensor, w: DenoiserWeights) -> Tensor:
    return tz.dense(temb_rows, w.tensors[f"tproj.{name}.w"], w.tensors[f"tproj.{name}.b"])


def _fuse_layer_end(name: str, h: Tensor, cond: ConditionBundle, w: DenoiserWeights) -> Tensor:
    """End-of-layer information fusion: add the projected fused vector and
    prompt embedding, broadcast over the spatial axes."""
    t = w.tensors
    h = tz.add(h, tz.dense(cond.c_f, t[f"condproj.{name}.w"], t[f"condproj.{name}.b"]))
    return tz.add(h, tz.dense(cond.prompt_embedding,
                              t[f"promptproj.{name}.w"], t[f"promptproj.{name}.b"]))


def predict_noise(z: Tensor, t: int, cond: ConditionBundle, w: DenoiserWeights) -> Tensor:
    """Noise estimate for a stack of per-view rasters [V,6,H,W]."""
    if z.ndim != 4 or z.shape[1] != OUT_CHANNELS:
        raise InvalidInputError(f"z must be [V,{OUT_CHANNELS},H,W], got {z.shape}")
    if z.shape[0] != cond.n_views:
        raise InvalidInputError(f"{z.shape[0]} views vs bundle with {cond.n_views}")
    if z.shape[2] % 4 or z.shape[3] % 4:
        raise InvalidInputError(f"raster sides must be divisible by 4, got {z.shape[2:]}")
    if z.shape[2:] != cond.sketches.shape[2:]:
        raise InvalidInputError(
            f"raster {z.shape[2:]} vs sketch {cond.sketches.shape[2:]} resolution mismatch"
        )
    if t < 1:
        raise InvalidInputError(f"step must be >= 1, got {t}")
    ten = w.tensors
    v = cond.n_views
    temb = Tensor(np.tile(time_embedding(t, w.spec.time_dim), (v, 1)))

    ctrl = cond.ctrl if cond.ctrl is not None else control_features(cond.sketches, w)
    c0, c1, c2 = ctrl

    h0 = tz.silu(tz.add(tz.conv2d(z, ten["enc0.w"], ten["enc0.b"]), _tproj("enc0", temb, w)))
    h0 = _fuse_layer_end("enc0", h0, cond, w)
    d1 = _pe("pe1", tz.downsample2x(h0), w)
    h1 = tz.silu(tz.add(tz.conv2d(tz.layer_norm(d1), ten["enc1.w"], ten["enc1.b"]),
                        _tproj("enc1", temb, w)))
    h1 = _fuse_layer_end("enc1", h1, cond, w)
    d2 = _pe("pe2", tz.downsample2x(h1), w)
    h2 = tz.silu(tz.add(tz.conv2d(tz.layer_norm(d2), ten["enc2.w"], ten["enc2.b"]),
                        _tproj("enc2", temb, w)))
    h2 = _fuse_layer_end("enc2", h2, cond, w)

    mid_in = tz.add(h2, tz.conv2d(c2, ten["zremap2.w"], ten["zremap2.b"]))
    m = tz.silu(tz.add(tz.conv2d(tz.layer_norm(mid_in), ten["mid.w"], ten["mid.b"]),
                       _tproj("mid", temb, w)))
    m = _fuse_layer_end("mid", m, cond, w)

    u1 = _pe("pe3", tz.upsample2x(m), w)
    skip1 = tz.add(h1, tz.conv2d(c1, ten["zremap1.w"], ten["zremap1.b"]))
    g1 = tz.silu(tz.add(tz.conv2d(tz.layer_norm(tz.concat([u1, skip1])), ten["dec1.w"], ten["dec1.b"]),
                        _tproj("dec1", temb, w)))
    g1 = _fuse_layer_end("dec1", g1, cond, w)

    u2 = _pe("pe4", tz.upsample2x(g1), w)
    skip0 = tz.add(h0, tz.conv2d(c0, ten["zremap0.w"], ten["zremap0.b"]))
    g2 = tz.silu(tz.add(tz.conv2d(tz.layer_norm(tz.concat([u2, skip0])), ten["dec2.w"], ten["dec2.b"]),
                        _tproj("dec2", temb, w)))
    g2 = _fuse_layer_end("dec2", g2, cond, w)

    return tz.conv2d(tz.layer_norm(g2), ten["out.w"], ten["out.b"])


def phi_features(x: Tensor, w: DenoiserWeights) -> list[Tensor]:
    """Activations of the fixed random conv stack, one per layer."""
    t = w.tensors
    f1 = tz.relu(tz.conv2d(x, t["phi.c1.w"], t["phi.c1.b"]))
    f2 = tz.relu(tz.conv2d(f1, t["phi.c2.w"], t["phi.c2.b"]))
    f3 = tz.relu(tz.conv2d(f2, t["phi.c3.w"], t["phi.c3.b"]))
    return [f1, f2, f3]


# ---------------------------------------------------------------------------
# losses and training


@dataclass(frozen=True)
class LossWeights:
    mvldm: float = 1.0
    l1: float = 1.0
    perc: float = 0.1

    def __post_init__(self):
        if min(self.mvldm, self.l1, self.perc) < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if max(self.mvldm, self.l1, self.perc) <= 0:
            raise InvalidInputError("at least one loss weight must be positive")

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(mvldm=cfg.loss_mvldm, l1=cfg.loss_l1, perc=cfg.loss_perc)


@dataclass(frozen=True)
class TrainItem:
    """One object's training views: rasters scaled to [-1,1], sketches, prompt."""

    x0: np.ndarray        # [V,6,H,W] in [-1,1]
    sketches: np.ndarray  # [V,1,H,W]
    prompt: str
    f_v: np.ndarray       # [V,D_v]


def loss_components(eps: Tensor, eps_hat: Tensor, x0: Tensor, z_t: Tensor, t: int,
                    s: NoiseSchedule, w: DenoiserWeights, lw: LossWeights):
    """Assemble the three loss components from a noise estimate.

    Denoising term: mean squared noise error (averaged over views). Pixel
    term: L1 between the ground truth and the recovered raster. Perceptual
    term: per-layer mean squared feature distance under the fixed conv
    stack, summed over its three layers.
    """
    l_mv = tz.mse(eps_hat, eps)
    x0_hat = predict_x0(z_t, eps_hat, t, s, clamp=True)
    l_l1 = tz.l1(x0_hat, x0)
    ref = phi_features(x0, w)
    got = phi_features(x0_hat, w)
    l_perc = tz.mse(got[0], ref[0])
    for fr, fg in zip(ref[1:], got[1:]):
        l_perc = tz.add(l_perc, tz.mse(fg, fr))
    total = tz.add(
        tz.add(tz.mul_scalar(l_mv, lw.mvldm), tz.mul_scalar(l_l1, lw.l1)),
        tz.mul_scalar(l_perc, lw.perc),
    )
    return total, l_mv, l_l1, l_perc


def total_loss(
    items: list[TrainItem],
    w: DenoiserWeights,
    lw: LossWeights,
    s: NoiseSchedule,
    *,
    rng: np.random.Generator,
    prompt_dropout: float = 0.0,
    zero_viewpoint: bool = False,
):
    """Weighted training loss over a batch; returns (scalar Tensor, components)."""
    if not items:
        raise InvalidInputError("empty batch")
    totals = None
    comps = {"mvldm": 0.0, "l1": 0.0, "perc": 0.0}
    for item in items:
        # extra coverage of the high-step half: with heavy noise the raster
        # can only be recovered through the conditioning, so these draws are
        # what teach the network to use sketch, viewpoint and prompt
        if rng.random() < 0.5:
            t = int(rng.integers(1, s.timesteps + 1))
        else:
            t = int(rng.integers(s.timesteps // 2 + 1, s.timesteps + 1))
        eps = rng.standard_normal(item.x0.shape).astype(np.float32)
        x0 = Tensor(np.asarray(item.x0, np.float32))
        z_t = forward_diffuse(x0, t, Tensor(eps), s)
        cond = build_condition(
            item.sketches, w, item.prompt,
            f_v=item.f_v, dropout=prompt_dropout, rng=rng, zero_viewpoint=zero_viewpoint,
        )
        eps_hat = predict_noise(z_t, t, cond, w)
        item_total, l_mv, l_l1, l_perc = loss_components(Tensor(eps), eps_hat, x0, z_t, t, s, w, lw)
        comps["mvldm"] += l_mv.item()
        comps["l1"] += l_l1.item()
        comps["perc"] += l_perc.item()
        totals = item_total if totals is None else tz.add(totals, item_total)
    loss = tz.mul_scalar(totals, 1.0 / len(items))
    comps = {k: v / len(items) for k, v in comps.items()}
    comps["total"] = loss.item()
    return loss, comps


def _step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x7EA1, stage, step])


@dataclass
class ObjectSamples:
    """All rendered views of one object, loaded and scaled for training."""

    object_id: str
    category: str
    prompt: str
    x0_views: np.ndarray       # [n,6,H,W] in [-1,1]
    sketch_views: np.ndarray   # [n,1,H,W]
    f_v_views: np.ndarray      # [n,D_v]


def train_stage(
    objects: list[ObjectSamples],
    cfg,
    w: DenoiserWeights,
    stage: int,
    steps: int,
    seed: int,
    *,
    start_step: int = 0,
    stop_step: int | None = None,
    opt: tz.Adam | None = None,
    zero_viewpoint: bool = False,
    on_step=None,
):
    """Run one training stage; stage 1 updates only the conditioning branch.

    ``steps`` is the stage budget; ``start_step``/``stop_step`` bound the
    slice actually executed. Step randomness and the learning rate derive
    only from (seed, stage, step, steps), so training can resume from a
    checkpointed (weights, optimizer, step) triple and replay the exact
    trajectory of an uninterrupted run.
    """
    if not objects:
        raise InvalidInputError("empty training set")
    group_names = w.control_names() if stage == 1 else w.trainable_names()
    opt = opt or tz.Adam(lr=cfg.lr)
    lw = LossWeights.from_config(cfg)
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    curve = []
    for step in range(start_step, steps if stop_step is None else min(stop_step, steps)):
        # linear decay to 30% of the base rate; a pure function of the step
        # index so resumed runs replay the same trajectory
        opt.lr = cfg.lr * (1.0 - 0.7 * step / max(steps, 1))
        rng = _step_rng(seed, stage, step)
        batch = min(cfg.batch_size, len(objects))
        picks = rng.choice(len(objects), size=batch, replace=False)
        items = []
        for i in picks:
            obj = objects[int(i)]
            n_views = obj.x0_views.shape[0]
            k = min(cfg.train_views, n_views)
            sel = rng.choice(n_views, size=k, replace=False)
            items.append(TrainItem(obj.x0_views[sel], obj.sketch_views[sel],
                                   obj.prompt, obj.f_v_views[sel]))
        tape = Tape()
        with tape:
            loss, comps = total_loss(
                items, w, lw, schedule,
                rng=rng, prompt_dropout=cfg.prompt_dropout, zero_viewpoint=zero_viewpoint,
            )
        grads = backpropagate(tape, loss)
        w = w.replaced(opt.step(w.group(group_names), grads))
        row = {"stage": stage, "step": step, **comps}
        curve.append(row)
        if on_step is not None:
            on_step(w, opt, row)
    return w, opt, curve


def train_two_stage(
    objects: list[ObjectSamples],
    cfg,
    *,
    seed: int | None = None,
    init: DenoiserWeights | None = None,
    arch_hash: str = "",
    zero_viewpoint: bool = False,
    on_step=None,
):
    """Conditioning branch first with the base frozen, then joint fine-tuning."""
    if not objects:
        raise InvalidInputError("empty training set")
    seed = cfg.seed if seed is None else seed
    w = init if init is not None else init_denoiser(DenoiserSpec.from_config(cfg), arch_hash, seed)
    w, _, curve1 = train_stage(objects, cfg, w, stage=1, steps=cfg.stage1_steps, seed=seed,
                               zero_viewpoint=zero_viewpoint, on_step=on_step)
    w, _, curve2 = train_stage(objects, cfg, w, stage=2, steps=cfg.stage2_steps, seed=seed,
                               zero_viewpoint=zero_viewpoint, on_step=on_step)
    return w, curve1 + curve2


# ---------------------------------------------------------------------------
# sampling


def ddim_timesteps(timesteps: int, steps: int) -> list[int]:
    """Evenly strided descending subsequence of [T..1]."""
    if not (1 <= steps <= timesteps):
        raise InvalidInputError(f"steps must be in [1, {timesteps}], got {steps}")
    taus = np.round(np.linspace(timesteps, 1, steps)).astype(int)
    return [int(t) for t in taus]


def ddim_sample(
    w: DenoiserWeights,
    cond: ConditionBundle,
    steps: int,
    seed: int,
    s: NoiseSchedule,
    resolution: int | None = None,
    mask_threshold: float = DEFAULT_MASK_THRESHOLD,
) -> list[NocsFrame]:
    """Deterministic (eta=0) sampling; returns one NOCS frame per view.

    Output channels are rescaled from [-1,1] to [0,1]; a pixel is foreground
    when any channel clears ``mask_threshold``, and background pixels are
    zeroed exactly.
    """
    res = resolution if resolution is not None else cond.sketches.shape[2]
    taus = ddim_timesteps(s.timesteps, steps)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((cond.n_views, OUT_CHANNELS, res, res)).astype(np.float32)
    with no_recording():
        for i, t in enumerate(taus):
            t_prev = taus[i + 1] if i + 1 < len(taus) else 0
            eps_hat = predict_noise(Tensor(z), t, cond, w).data
            ab = s.alpha_bar_at(t)
            x0_hat = np.clip((z - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab), -1.0, 1.0)
            # redo the noise estimate from the clamped raster: keeping the raw
            # estimate alongside a clamped x0 breaks the z decomposition and
            # pumps saturated pixels further out every step
            eps_used = (z - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
            ab_prev = s.alpha_bar_at(t_prev)
            z = (math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_used).astype(np.float32)
    raw = np.clip((z + 1.0) / 2.0, 0.0, 1.0)
    frames = []
    for v in range(cond.n_views):
        channels = raw[v]
        mask = channels.max(axis=0) >= mask_threshold
        vis = np.where(mask[None], channels[:3], 0.0).transpose(1, 2, 0).astype(np.float32)
        occ = np.where(mask[None], channels[3:], 0.0).transpose(1, 2, 0).astype(np.float32)
        frames.append(NocsFrame(NocsMap(vis, mask), NocsMap(occ, mask)))
    return frames


# ---------------------------------------------------------------------------
# checkpoints

_SPEC_FIELDS = ("base_width", "time_dim", "viewpoint_dim", "shape_dim",
                "prompt_dim", "prompt_vocab")


def denoiser_to_table(w: DenoiserWeights) -> dict[str, np.ndarray]:
    table = {name: t.data for name, t in w.tensors.items()}
    for field in _SPEC_FIELDS:
        table[f"meta.{field}"] = np.asarray([getattr(w.spec, field)], np.float32)
    table["meta.pe_mode"] = np.asarray([0.0 if w.spec.pe_mode == "residual" else 1.0], np.float32)
    table["meta.arch_hash"] = np.frombuffer(bytes.fromhex(w.arch_hash or "00" * 16),
                                            dtype=np.uint8).astype(np.float32)
    return table


def denoiser_from_table(table: dict[str, np.ndarray], expect_arch_hash: str | None = None,
                        source: str = "checkpoint") -> DenoiserWeights:
    table = dict(table)
    try:
        kwargs = {field: int(table.pop(f"meta.{field}")[0]) for field in _SPEC_FIELDS}
        pe_mode = "residual" if table.pop("meta.pe_mode")[0] == 0.0 else "pure"
        arch_hash = bytes(table.pop("meta.arch_hash").astype(np.uint8)).hex()
    except KeyError as exc:
        raise CheckpointError(f"{source}: missing metadata entry {exc}") from None
    if expect_arch_hash is not None and arch_hash != expect_arch_hash:
        raise CheckpointError(
            f"{source}: checkpoint architecture {arch_hash[:8]}... does not match "
            f"configuration {expect_arch_hash[:8]}..."
        )
    spec = DenoiserSpec(pe_mode=pe_mode, **kwargs)
    tensors = {}
    for name, arr in table.items():
        if name.startswith("opt.") or name.startswith("train."):
            continue
        tensors[name] = Tensor(arr, requires_grad=not name.startswith(_FIXED_PREFIXES))
    return DenoiserWeights(tensors, spec, arch_hash)
