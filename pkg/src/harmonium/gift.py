"""Globally guided feature transformation and relation distillation at toy scale.

Feature maps are batched ``(B, C, H, W)`` arrays.  Convolution weights are
stored ``(out, in, k, k)``; the input-channel axis is the one scaled by the
predicted scale vector.  All functions accept numpy arrays or
:class:`~harmonium.tape.Tensor` objects and return tensors, so the same code
serves plain evaluation and gradient computation.

The network is a four-block encoder / three-block decoder UNet whose input
is the RGB image with the foreground mask as a fourth channel.  GIFT sites
are named ``E1``..``E4`` (encoder block outputs) and ``D1``..``D3`` (decoder
block outputs).  Encoder sites are applied after the whole encoder has run:
the global feature comes from the untransformed bottleneck, and the
transformed encoder maps feed the skip connections and the decoder.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tape
from .errors import ConfigError, PreconditionError, ShapeError, TrainingError
from .tape import Tensor

SITES = ("E1", "E2", "E3", "E4", "D1", "D2", "D3")
CHECKPOINT_FORMAT = "gift-checkpoint/1"

_ACTIVATIONS = {
    "elu": tape.elu,
    "relu": tape.relu,
    "leaky_relu": tape.leaky_relu,
    "tanh": tape.tanh,
}


@dataclass(frozen=True)
class GiftConfig:
    widths: tuple[int, ...] = (8, 16, 32, 64)
    sites: tuple[str, ...] = ("E1", "E2", "E3", "E4", "D2", "D3")
    gift_kernel: int = 1
    mlp_hidden: int = 32
    activation: str = "elu"
    gamma: float = 0.01
    lam: float = 0.001
    eps: float = 1e-8
    zero_background_input: bool = False
    relation_scope: str = "all"
    padding: str = "zeros"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "sites", tuple(self.sites))
        if len(self.widths) != 4:
            raise ConfigError("widths must list four encoder widths")
        unknown = set(self.sites) - set(SITES)
        if unknown:
            raise ConfigError(f"unknown GIFT site(s): {sorted(unknown)}")
        if self.gift_kernel % 2 != 1:
            raise ConfigError("GIFT kernel size must be odd")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not self.lam >= 0:
            raise ConfigError("lambda must be nonnegative")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.relation_scope not in ("all", "background"):
            raise ConfigError("relation_scope must be 'all' or 'background'")
        if self.padding not in ("zeros", "circular"):
            raise ConfigError("padding must be 'zeros' or 'circular'")

    def site_channels(self, site: str) -> int:
        w = self.widths
        return {"E1": w[0], "E2": w[1], "E3": w[2], "E4": w[3], "D1": w[2], "D2": w[1], "D3": w[0]}[site]

    @staticmethod
    def site_factor(site: str) -> int:
        return {"E1": 1, "E2": 2, "E3": 4, "E4": 8, "D1": 4, "D2": 2, "D3": 1}[site]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GiftConfig":
        return cls(**{**d, "widths": tuple(d["widths"]), "sites": tuple(d["sites"])})


# -- GIFT building blocks ----------------------------------------------------

def global_pool(bottleneck) -> Tensor:
    """Channelwise spatial mean: (B, C, H, W) -> (B, C)."""
    return tape.mean(bottleneck, axis=(2, 3))


def _linear(x, w, b):
    x, w = tape.as_tensor(x), tape.as_tensor(w)
    if w.ndim == 2:
        y = x @ w
    else:  # per-sample weights (P, in, out)
        y = tape.reshape(tape.reshape(x, (x.shape[0], 1, x.shape[1])) @ w, (-1, w.shape[-1]))
    return y + b


def predict_scales(fe, params: dict, site: str) -> Tensor:
    """Shared three-layer rectifier trunk followed by the site-specific linear head."""
    if f"mlp.head.{site}.w" not in params:
        raise ConfigError(f"no MLP head for site {site!r}")
    h = fe
    for i in (1, 2, 3):
        h = tape.relu(_linear(h, params[f"mlp.trunk{i}.w"], params[f"mlp.trunk{i}.b"]))
    return _linear(h, params[f"mlp.head.{site}.w"], params[f"mlp.head.{site}.b"])


def modulate(w, s) -> Tensor:
    """Scale base weights by input-channel scales: W'(n, m, p) = W(n, m, p) * s(m).

    ``w`` is (N, M, k, k) or batched (P, N, M, k, k); ``s`` is (M,) or (B, M).
    A batched ``s`` yields per-sample weights (B, N, M, k, k).
    """
    w, s = tape.as_tensor(w), tape.as_tensor(s)
    m = w.shape[-3]
    if s.shape[-1] != m:
        raise ShapeError(f"scale vector has length {s.shape[-1]}, weights have {m} input channels")
    if s.ndim == 1:
        return w * tape.reshape(s, (1, m, 1, 1))
    return w * tape.reshape(s, (s.shape[0], 1, m, 1, 1))


def demodulate(wp, eps: float = 1e-8) -> Tensor:
    """Normalize each output channel: W'' = W' / sqrt(sum_{m,p} W'^2 + eps)."""
    wp = tape.as_tensor(wp)
    ss = tape.sum(tape.square(wp), axis=(-3, -2, -1), keepdims=True)
    return wp / tape.sqrt(ss + eps)


def gift_apply(f, mask_ds, w2, *, zero_background_input: bool = False, padding: str = "zeros") -> Tensor:
    """Convolve with the demodulated weights and keep the result only on the foreground.

    ``mask_ds`` is a boolean (B, H, W) or (H, W) mask at the resolution of
    ``f``; background positions of the output are the input values, bit for bit.
    """
    f = tape.as_tensor(f)
    m = np.asarray(mask_ds, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    if m.shape[-2:] != f.shape[-2:]:
        raise ShapeError(f"mask {m.shape[-2:]} does not match feature map {f.shape[-2:]}")
    m4 = m[:, None]
    src = tape.where(m4, f, 0.0) if zero_background_input else f
    conv = tape.conv2d(src, w2, padding=padding)
    return tape.where(m4, conv, f)


def modulated_gift(f, mask_ds, w, s, eps: float = 1e-8, *, zero_background_input: bool = False,
                   padding: str = "zeros") -> Tensor:
    """GIFT with per-sample scales, computed without materializing per-sample kernels.

    Scaling the input channels by ``s``, convolving with the base weights and
    multiplying output channel n by ``1 / sqrt(sum_m s_m^2 sum_p W(n,m,p)^2 + eps)``
    equals convolving with ``demodulate(modulate(w, s))``.
    """
    f, w, s = tape.as_tensor(f), tape.as_tensor(w), tape.as_tensor(s)
    m = np.asarray(mask_ds, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    if m.shape[-2:] != f.shape[-2:]:
        raise ShapeError(f"mask {m.shape[-2:]} does not match feature map {f.shape[-2:]}")
    m4 = m[:, None]
    src = tape.where(m4, f, 0.0) if zero_background_input else f
    x = src * tape.reshape(s, (s.shape[0], -1, 1, 1))
    y = tape.conv2d(x, w, padding=padding)
    wsq = tape.sum(tape.square(w), axis=(-2, -1))  # (N, M) or (P, N, M)
    s2 = tape.square(s)
    energy = tape.sum(tape.reshape(s2, (s2.shape[0], 1, -1)) * wsq, axis=-1)  # (B', N)
    scale = 1.0 / tape.sqrt(energy + eps)
    y = y * tape.reshape(scale, (scale.shape[0], -1, 1, 1))
    return tape.where(m4, y, f)


def downsample_mask(mask, factor: int) -> np.ndarray:
    """Max-pool a boolean mask (..., H, W) by ``factor``."""
    if factor not in (1, 2, 4, 8):
        raise ConfigError(f"mask factor must be 1, 2, 4 or 8, got {factor}")
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"mask size {(h, w)} not divisible by {factor}")
    if factor == 1:
        return m.copy()
    m = m.reshape(m.shape[:-2] + (h // factor, factor, w // factor, factor))
    return m.any(axis=(-3, -1))


def relation_map(f, mask_ds, gamma: float = 0.01, scope: str = "all") -> Tensor:
    """Softmax over pixels of -gamma * ||mean foreground feature - pixel feature||^2.

    Returns (B, H*W).  With ``scope="background"`` the normalization runs over
    background pixels only and foreground entries are zero.
    """
    f = tape.as_tensor(f)
    m = np.asarray(mask_ds, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    if m.shape[-2:] != f.shape[-2:]:
        raise ShapeError(f"mask {m.shape[-2:]} does not match feature map {f.shape[-2:]}")
    if not gamma > 0:
        raise PreconditionError("gamma must be positive")
    counts = m.reshape(m.shape[0], -1).sum(axis=1)
    if np.any(counts == 0):
        raise PreconditionError("relation map needs at least one foreground pixel")
    c = f.shape[1]
    flat = tape.reshape(f, (f.shape[0], c, -1))
    mflat = m.reshape(m.shape[0], 1, -1).astype(np.float64)
    fg_mean = tape.sum(flat * mflat, axis=2, keepdims=True) / counts.reshape(-1, 1, 1)
    d2 = tape.sum(tape.square(flat - fg_mean), axis=1)
    logits = d2 * (-gamma)
    if scope == "background":
        bg = ~m.reshape(m.shape[0], -1)
        if not np.all(bg.any(axis=1)):
            raise PreconditionError("background-scoped relation map needs a background pixel")
        logits = tape.where(bg, logits, -np.inf)
    return tape.softmax(logits, axis=-1)


def distill_loss(r_harm, r_real) -> Tensor:
    """Squared L2 distance between flattened relation maps, per sample."""
    a, b = tape.as_tensor(r_harm), tape.as_tensor(r_real)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"relation maps have {a.shape[-1]} and {b.shape[-1]} pixels")
    return tape.sum(tape.square(a - b), axis=-1)


def total_loss(pred, gt, distill_terms, lam: float = 0.001) -> Tensor:
    """Mean absolute error plus ``lam`` times the summed distillation losses, per sample."""
    pred = tape.as_tensor(pred)
    axes = tuple(range(1, pred.ndim))
    l1 = tape.mean(tape.abs(pred - gt), axis=axes)
    if not distill_terms:
        return l1
    dsum = distill_terms[0]
    for t in distill_terms[1:]:
        dsum = dsum + t
    return l1 + dsum * lam


# -- network -----------------------------------------------------------------

def init_params(config: GiftConfig, in_channels: int = 4) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, bound sqrt(6 / fan_in), from a seeded generator.

    Biases start at zero except the MLP heads (1, so initial scales are near
    one) and the output layer (mid-gray).
    """
    rng = np.random.default_rng(config.seed)
    p: dict[str, np.ndarray] = {}

    def uni(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    w = config.widths
    prev = in_channels
    for l in range(4):
        p[f"enc{l + 1}.w"] = uni((w[l], prev, 3, 3), prev * 9)
        p[f"enc{l + 1}.b"] = np.zeros(w[l])
        prev = w[l]
    for l, (cin, skip, cout) in enumerate(((w[3], w[2], w[2]), (w[2], w[1], w[1]), (w[1], w[0], w[0]))):
        p[f"dec{l + 1}.w"] = uni((cout, cin + skip, 3, 3), (cin + skip) * 9)
        p[f"dec{l + 1}.b"] = np.zeros(cout)
    p["out.w"] = uni((3, w[0], 1, 1), w[0])
    # mid-gray start keeps the clamped output away from its bounds
    p["out.b"] = np.full(3, 0.5)
    if config.sites:
        k = config.gift_kernel
        hid = config.mlp_hidden
        prev = w[3]
        for i in (1, 2, 3):
            p[f"mlp.trunk{i}.w"] = uni((prev, hid), prev)
            p[f"mlp.trunk{i}.b"] = np.zeros(hid)
            prev = hid
        for site in SITES:
            if site not in config.sites:
                continue
            c = config.site_channels(site)
            p[f"gift.{site}.w"] = uni((c, c, k, k), c * k * k)
            p[f"mlp.head.{site}.w"] = uni((hid, c), hid)
            p[f"mlp.head.{site}.b"] = np.ones(c)
    return p


def _bias(b):
    b = tape.as_tensor(b)
    if b.ndim == 1:
        return tape.reshape(b, (1, -1, 1, 1))
    return tape.reshape(b, (b.shape[0], -1, 1, 1))


@dataclass
class ForwardResult:
    output: Tensor
    encoder_raw: list
    encoder: list  # after GIFT where enabled; these are distilled
    decoder: list
    global_feature: Tensor
    masks: dict


def as_batch(image, mask):
    """Accept HxWx3 / HxW or batched (B,3,H,W) / (B,H,W) and return the batched forms."""
    img = np.asarray(image, dtype=np.float64) if not isinstance(image, Tensor) else image
    m = np.asarray(mask, dtype=bool)
    if not isinstance(img, Tensor) and img.ndim == 3 and img.shape[-1] == 3:
        img = img.transpose(2, 0, 1)[None]
    if m.ndim == 2:
        m = m[None]
    return img, m


def forward(params: dict, config: GiftConfig, image, mask) -> ForwardResult:
    img, m = as_batch(image, mask)
    img = tape.as_tensor(img)
    h, w = img.shape[-2:]
    if h % 8 or w % 8:
        raise ShapeError(f"image size {(h, w)} must be divisible by 8")
    if m.shape[-2:] != (h, w):
        raise ShapeError(f"mask {m.shape[-2:]} does not match image {(h, w)}")
    act = _ACTIVATIONS[config.activation]
    pad = config.padding
    masks = {f: downsample_mask(m, f) for f in (1, 2, 4, 8)}

    x = tape.concat([img, m[:, None].astype(np.float64)], axis=1)
    raw = []
    for l in range(1, 5):
        if l > 1:
            x = tape.avg_pool2(x)
        x = act(tape.conv2d(x, params[f"enc{l}.w"], pad) + _bias(params[f"enc{l}.b"]))
        raw.append(x)
    fe = global_pool(raw[3])

    def site(name, fmap):
        if name not in config.sites:
            return fmap
        s = predict_scales(fe, params, name)
        return modulated_gift(fmap, masks[config.site_factor(name)], params[f"gift.{name}.w"], s, config.eps,
                              zero_background_input=config.zero_background_input, padding=pad)

    enc = [site(f"E{l + 1}", f) for l, f in enumerate(raw)]
    d = enc[3]
    dec = []
    for l, skip in zip((1, 2, 3), (enc[2], enc[1], enc[0])):
        d = tape.concat([tape.upsample2(d), skip], axis=1)
        d = act(tape.conv2d(d, params[f"dec{l}.w"], pad) + _bias(params[f"dec{l}.b"]))
        d = site(f"D{l}", d)
        dec.append(d)
    out = tape.clamp(tape.conv2d(d, params["out.w"], pad) + _bias(params["out.b"]), 0.0, 1.0)
    return ForwardResult(out, raw, enc, dec, fe, masks)


def encoder_relations(result: ForwardResult, config: GiftConfig, transformed: bool = True) -> list:
    """Relation maps of the four encoder outputs (B, H_l*W_l each)."""
    maps = result.encoder if transformed else result.encoder_raw
    return [relation_map(f, result.masks[2**l], config.gamma, config.relation_scope)
            for l, f in enumerate(maps)]


@dataclass
class LossTerms:
    total: Tensor
    harmonization: Tensor
    distill: list
    output: Tensor


def loss_terms(params, config, composite, mask, gt, recon_relations) -> LossTerms:
    """Per-sample total loss; ``recon_relations`` are the frozen reconstruction maps."""
    res = forward(params, config, composite, mask)
    gt_b, _ = as_batch(gt, mask)
    rel = encoder_relations(res, config)
    distill = [distill_loss(r, np.asarray(rr)) for r, rr in zip(rel, recon_relations)]
    l_har = total_loss(res.output, gt_b, [], 0.0)
    total = total_loss(res.output, gt_b, distill, config.lam)
    return LossTerms(total, l_har, distill, res.output)


class GiftNetwork:
    """Parameters plus configuration; ``sites=()`` gives the plain reconstruction UNet."""

    def __init__(self, config: GiftConfig | None = None, params: dict | None = None):
        self.config = config or GiftConfig()
        self.params = params if params is not None else init_params(self.config)

    def copy(self) -> "GiftNetwork":
        return GiftNetwork(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, image, mask) -> ForwardResult:
        return forward(self.params, self.config, image, mask)

    def predict(self, image, mask) -> np.ndarray:
        return self.forward(image, mask).output.data

    def relations(self, image, mask) -> list[np.ndarray]:
        return [r.data for r in encoder_relations(self.forward(image, mask), self.config)]

    def loss(self, composite, mask, gt, recon_relations) -> LossTerms:
        return loss_terms(self.params, self.config, composite, mask, gt, recon_relations)

    def backward(self, composite, mask, gt, recon_relations) -> tuple[float, dict[str, np.ndarray]]:
        """Batch-mean total loss and its exact gradient w.r.t. every parameter."""
        leaves = {k: tape.parameter(v) for k, v in self.params.items()}
        terms = loss_terms(leaves, self.config, composite, mask, gt, recon_relations)
        objective = tape.mean(terms.total)
        objective.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
        return float(objective.data), grads

    def save(self, path) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }
        Path(path).write_text(json.dumps(doc) + "\n")

    @classmethod
    def load(cls, path) -> "GiftNetwork":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {doc.get('format')!r}")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
        return cls(GiftConfig.from_dict(doc["config"]), params)


def reconstruction_config(config: GiftConfig) -> GiftConfig:
    return replace(config, sites=())


# -- toy training ------------------------------------------------------------

@dataclass
class ToyData:
    composites: np.ndarray  # (B, 3, H, W)
    reals: np.ndarray
    masks: np.ndarray  # (B, H, W) bool


def synthetic_pairs(n: int = 16, size: int = 8, seed: int = 0) -> ToyData:
    """Smooth random scenes with a rectangular foreground whose colors get a global gain/offset shift."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    comps, reals, masks = [], [], []
    for _ in range(n):
        base = rng.uniform(0.2, 0.8, 3)
        grad = rng.uniform(-0.15, 0.15, (3, 2))
        img = base[:, None, None] + grad[:, 0, None, None] * yy + grad[:, 1, None, None] * xx
        h0, w0 = rng.integers(1, size // 2, 2)
        hh, ww = rng.integers(2, size // 2 + 1, 2)
        mask = np.zeros((size, size), dtype=bool)
        mask[h0:h0 + hh, w0:w0 + ww] = True
        obj = rng.uniform(0.2, 0.8, 3)
        img[:, mask] = 0.5 * img[:, mask] + 0.5 * obj[:, None]
        img = np.clip(img, 0.0, 1.0)
        gain = rng.uniform(0.6, 1.4, 3)
        offset = rng.uniform(-0.15, 0.15, 3)
        comp = img.copy()
        comp[:, mask] = np.clip(img[:, mask] * gain[:, None] + offset[:, None], 0.0, 1.0)
        comps.append(comp)
        reals.append(img)
        masks.append(mask)
    return ToyData(np.stack(comps), np.stack(reals), np.stack(masks))


@dataclass
class TrainHistory:
    total: list = field(default_factory=list)
    harmonization: list = field(default_factory=list)


def _gd(net: GiftNetwork, objective, steps: int, lr: float, hist: TrainHistory) -> TrainHistory:
    for step in range(steps):
        leaves = {k: tape.parameter(v) for k, v in net.params.items()}
        total, l_har = objective(leaves)
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}")
        hist.total.append(value)
        hist.harmonization.append(float(l_har.data))
        total.backward()
        for k, t in leaves.items():
            if t.grad is not None:
                net.params[k] = net.params[k] - lr * t.grad
    return hist


def train_reconstruction(data: ToyData, config: GiftConfig, steps: int = 200, lr: float = 0.1) -> tuple[GiftNetwork, TrainHistory]:
    """Plain gradient descent on the L1 reconstruction of the real images."""
    net = GiftNetwork(reconstruction_config(config))

    def objective(leaves):
        res = forward(leaves, net.config, data.reals, data.masks)
        l1 = tape.mean(total_loss(res.output, data.reals, [], 0.0))
        return l1, l1

    return net, _gd(net, objective, steps, lr, TrainHistory())


def toy_train(net: GiftNetwork, recon: GiftNetwork, data: ToyData, steps: int = 200, lr: float = 0.1) -> TrainHistory:
    """Train the harmonization branch against a frozen reconstruction branch.

    The reconstruction relation maps are computed once from the real images and
    held fixed.  Returns per-step batch-mean total and harmonization losses
    (values before each update).
    """
    recon_rel = recon.relations(data.reals, data.masks)

    def objective(leaves):
        terms = loss_terms(leaves, net.config, data.composites, data.masks, data.reals, recon_rel)
        return tape.mean(terms.total), tape.mean(terms.harmonization)

    return _gd(net, objective, steps, lr, TrainHistory())


@dataclass
class ToyRun:
    config: GiftConfig
    recon_history: TrainHistory
    history: TrainHistory
    network: GiftNetwork
    recon: GiftNetwork

    @property
    def reduction(self) -> float:
        return self.history.harmonization[-1] / self.history.harmonization[0]


def run_toy_experiment(config: GiftConfig | None = None, n_pairs: int = 16, size: int = 8, steps: int = 200,
                       lr: float = 0.1, recon_steps: int = 200, recon_lr: float = 0.1, data_seed: int = 0) -> ToyRun:
    config = config or GiftConfig()
    data = synthetic_pairs(n_pairs, size, data_seed)
    recon, recon_hist = train_reconstruction(data, config, recon_steps, recon_lr)
    net = GiftNetwork(config)
    hist = toy_train(net, recon, data, steps, lr)
    return ToyRun(config, recon_hist, hist, net, recon)


def check_gradients(net: GiftNetwork, composite, mask, gt, recon_relations, h: float = 1e-4,
                    floor: float = 1e-8, names=None):
    """Compare reverse-mode gradients of the batch-mean total loss with central differences.

    Finite differences run one sample at a time (perturbed parameter copies
    occupy the batch axis) and are averaged over the batch.
    """
    from .gradcheck import compare, fd_gradients

    _, analytic = net.backward(composite, mask, gt, recon_relations)
    img, m = as_batch(composite, mask)
    gt_b, _ = as_batch(gt, mask)
    act = int(np.prod(m.shape[-2:])) * (sum(net.config.widths) + 3 * max(net.config.widths))
    numeric = None
    for b in range(m.shape[0]):
        rel_b = [np.asarray(r)[b:b + 1] for r in recon_relations]

        def per_copy(params, b=b, rel_b=rel_b):
            return loss_terms(params, net.config, img[b:b + 1], m[b:b + 1], gt_b[b:b + 1], rel_b).total.data

        g = fd_gradients(per_copy, net.params, h, names=names, activation_size=act)
        numeric = g if numeric is None else {k: numeric[k] + g[k] for k in g}
    numeric = {k: v / m.shape[0] for k, v in numeric.items()}
    return compare(analytic, numeric, floor, h), analytic, numeric
