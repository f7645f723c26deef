"""Keypoint-regression models: encoders, graph decoder, EF heads, losses.

Three configurations share one code path:

- single_frame: CNN encoder -> compressed feature -> ring-graph decoder.
- multi_frame_known: clip encoder -> EF regressor + two-frame decoder;
  the caller guarantees frame 0 is ED and the last frame is ES.
- multi_frame_classifier: adds an ED/ES frame classifier whose
  likelihood arrays are concatenated with the feature vector before
  decoding.

The decoder tiles the compressed feature vector identically to every
node and adds a learned per-node embedding before the spiral layers.
The embedding is what gives nodes distinct identities: with shared
spiral weights and identical inputs, every node of the ring would
otherwise compute the same output at every layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateContourError,
    DegenerateVolumeError,
    DimensionError,
    LabelError,
)
from .geometry import KeypointSet, ef_from_keypoints
from .graph import (
    build_ring_graph,
    build_spatiotemporal_graph,
    ring_spirals,
    spirals_to_matrix,
    st_spirals,
)
from .ioutil import atomic_write_bytes
from .layers import (
    Conv2d,
    Dense,
    Elu,
    GlobalAvgPool,
    LayerNorm,
    MaxPool2x2,
    Parameter,
    Relu,
    SpiralConv,
    glorot_uniform,
)

MODES = ("single_frame", "multi_frame_known", "multi_frame_classifier")
DECODER_SPIRAL_LAYERS = 4
KEYPOINT_DIMS = 2
CHECKPOINT_MAGIC = b"EGRF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "single_frame"
    n_keypoints: int = 42
    spiral_len: int = 5
    feature_width: int = 128
    decoder_width: int = 64
    gamma_hidden: int | None = None
    clip_len: int = 16
    image_size: tuple[int, int] = (112, 112)
    encoder_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    ef_hidden: tuple[int, int, int] = (64, 32, 16)
    classifier_hidden: tuple[int, int, int] = (64, 64, 64)
    n_disks: int = 20
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_keypoints < 3:
            raise ConfigError(f"n_keypoints must be >= 3, got {self.n_keypoints}")
        if not (1 <= self.spiral_len <= self.n_keypoints):
            raise ConfigError(f"spiral_len {self.spiral_len} not in [1, {self.n_keypoints}]")
        if self.is_multi_frame and self.clip_len < 2:
            raise ConfigError(f"multi-frame modes need clip_len >= 2, got {self.clip_len}")
        h, w = self.image_size
        # four stride-2 pools halve each dimension four times
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise ConfigError(f"image size must be a multiple of 16, got {h}x{w}")
        for name, tup, want in (
            ("encoder_channels", self.encoder_channels, 4),
            ("ef_hidden", self.ef_hidden, 3),
            ("classifier_hidden", self.classifier_hidden, 3),
        ):
            if len(tup) != want or any(v < 1 for v in tup):
                raise ConfigError(f"{name} must be {want} positive ints, got {tup}")
        if self.feature_width < 1 or self.decoder_width < 2:
            raise ConfigError("feature_width and decoder_width must be positive")
        if self.gamma_hidden is not None and self.gamma_hidden < 1:
            raise ConfigError(f"gamma_hidden must be positive, got {self.gamma_hidden}")
        if self.n_disks < 1:
            raise ConfigError(f"n_disks must be >= 1, got {self.n_disks}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def is_multi_frame(self) -> bool:
        return self.mode != "single_frame"

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def apex_index(self) -> int:
        return self.n_keypoints // 2

    @property
    def basal_indices(self) -> tuple[int, int]:
        return (0, self.n_keypoints - 1)

    @property
    def resolved_gamma_hidden(self) -> int:
        return self.decoder_width if self.gamma_hidden is None else self.gamma_hidden


def clamp_fraction(x: float) -> float:
    """Clamp an EF estimate into [0, 1]."""
    return float(min(max(x, 0.0), 1.0))


@dataclass(frozen=True)
class EfPrediction:
    """Output of a multi-frame forward pass.

    ``ef_from_keypoints`` is NaN when the predicted contours are too
    degenerate for a volume (typical for untrained models whose nodes
    all sit at the image center).
    """

    ef_regressed: float
    ef_from_keypoints: float
    ed_keypoints: KeypointSet
    es_keypoints: KeypointSet
    ed_likelihood: np.ndarray | None = None
    es_likelihood: np.ndarray | None = None


class _Softmax:
    """Softmax over the last axis with cached backward."""

    def __init__(self):
        self._p = None

    def forward(self, x, train=False):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        if train:
            self._p = p
        return p

    def backward(self, grad):
        p = self._p
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


class _FrameTrunk:
    """Four conv blocks (3x3 + ELU + 2x2 max pool) and a global pool."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        chans = (1,) + cfg.encoder_channels
        self.convs = [
            Conv2d(chans[i], chans[i + 1], 3, rng, padding=1, name=f"enc.block{i}.conv", dtype=dtype)
            for i in range(4)
        ]
        self.acts = [Elu() for _ in range(4)]
        self.pools = [MaxPool2x2() for _ in range(4)]
        self.gap = GlobalAvgPool()

    def params(self):
        return [p for c in self.convs for p in c.params()]

    def forward(self, x, train=False):
        for conv, act, pool in zip(self.convs, self.acts, self.pools):
            x = pool.forward(act.forward(conv.forward(x, train), train), train)
        return self.gap.forward(x, train)

    def backward(self, grad):
        g = self.gap.backward(grad)
        for conv, act, pool in zip(reversed(self.convs), reversed(self.acts), reversed(self.pools)):
            g = conv.backward(act.backward(pool.backward(g)))
        return g


class _FeatureHead:
    """Dense + ELU mapping pooled channels to the encoder feature vector."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.fc = Dense(cfg.encoder_channels[-1], cfg.feature_width, rng, "enc.feature", dtype)
        self.act = Elu()

    def params(self):
        return self.fc.params()

    def forward(self, x, train=False):
        return self.act.forward(self.fc.forward(x, train), train)

    def backward(self, grad):
        return self.fc.backward(self.act.backward(grad))


class GraphDecoder:
    """Compress, tile to nodes plus per-node embedding, spiral-conv, emit (x, y)."""

    def __init__(self, cfg: ModelConfig, rng, dtype, two_frame: bool, extra_in: int = 0):
        n = cfg.n_keypoints
        if two_frame:
            graph = build_spatiotemporal_graph(n)
            seqs = st_spirals(graph, cfg.spiral_len)
        else:
            graph = build_ring_graph(n)
            seqs = ring_spirals(graph, cfg.spiral_len)
        self.spirals = spirals_to_matrix(seqs, n)
        self.total_nodes = graph.total_nodes
        gather_len = self.spirals.shape[1]
        w = cfg.decoder_width
        self.compress = Dense(cfg.feature_width + extra_in, w, rng, "dec.compress", dtype)
        self.compress_act = Elu()
        self.embed = Parameter(
            "dec.embed", glorot_uniform(rng, (self.total_nodes, w), w, w, dtype)
        )
        self.layers = [
            SpiralConv(w, w, gather_len, rng, hidden=cfg.resolved_gamma_hidden,
                       name=f"dec.spiral{i}", dtype=dtype)
            for i in range(DECODER_SPIRAL_LAYERS)
        ]
        self.acts = [Elu() for _ in range(DECODER_SPIRAL_LAYERS)]
        self.head = Dense(w, KEYPOINT_DIMS, rng, "dec.head", dtype)
        # start with every node at the image center so an untrained model
        # emits a valid (if useless) contour
        self.head.weight.value[...] = 0.0
        self.head.bias.value[...] = 0.5

    def params(self):
        out = self.compress.params() + [self.embed]
        for layer in self.layers:
            out += layer.params()
        return out + self.head.params()

    def forward(self, feat, train=False):
        z = self.compress_act.forward(self.compress.forward(feat, train), train)
        nodes = z[:, None, :] + self.embed.value
        for layer, act in zip(self.layers, self.acts):
            nodes = act.forward(layer.forward(nodes, self.spirals, train), train)
        return self.head.forward(nodes, train)

    def backward(self, grad):
        g = self.head.backward(grad)
        for layer, act in zip(reversed(self.layers), reversed(self.acts)):
            g = layer.backward(act.backward(g))
        self.embed.grad += g.sum(axis=0)
        return self.compress.backward(self.compress_act.backward(g.sum(axis=1)))


class EfRegressor:
    """Four dense layers with ELUs, squashed to (0, 1)."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        widths = (cfg.feature_width,) + cfg.ef_hidden + (1,)
        self.fcs = [
            Dense(widths[i], widths[i + 1], rng, f"ef.fc{i}", dtype) for i in range(4)
        ]
        self.acts = [Elu() for _ in range(3)]
        self._sig = None

    def params(self):
        return [p for fc in self.fcs for p in fc.params()]

    def forward(self, feat, train=False):
        x = feat
        for i, fc in enumerate(self.fcs):
            x = fc.forward(x, train)
            if i < 3:
                x = self.acts[i].forward(x, train)
        s = expit(x[..., 0])
        if train:
            self._sig = s
        return s

    def backward(self, grad):
        g = (grad * self._sig * (1.0 - self._sig))[..., None]
        for i in (3, 2, 1, 0):
            g = self.fcs[i].backward(g)
            if i > 0:
                g = self.acts[i - 1].backward(g)
        return g


class EdEsClassifier:
    """Four dense layers; layer norm + ReLU after the first three.

    Emits 2F logits read as two F-length arrays (ED first, then ES).
    """

    def __init__(self, cfg: ModelConfig, rng, dtype):
        widths = (cfg.feature_width,) + cfg.classifier_hidden
        self.fcs, self.norms, self.acts = [], [], []
        for i in range(3):
            self.fcs.append(Dense(widths[i], widths[i + 1], rng, f"cls.fc{i}", dtype))
            self.norms.append(LayerNorm(widths[i + 1], f"cls.ln{i}", dtype))
            self.acts.append(Relu())
        self.out = Dense(widths[3], 2 * cfg.clip_len, rng, "cls.out", dtype)

    def params(self):
        out = []
        for fc, norm in zip(self.fcs, self.norms):
            out += fc.params() + norm.params()
        return out + self.out.params()

    def forward(self, feat, train=False):
        x = feat
        for fc, norm, act in zip(self.fcs, self.norms, self.acts):
            x = act.forward(norm.forward(fc.forward(x, train), train), train)
        return self.out.forward(x, train)

    def backward(self, grad):
        g = self.out.backward(grad)
        for fc, norm, act in zip(reversed(self.fcs), reversed(self.norms), reversed(self.acts)):
            g = fc.backward(norm.backward(act.backward(g)))
        return g


class SingleFrameModel:
    """Image in, ring-contour keypoints out."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.mode != "single_frame":
            raise ConfigError(f"SingleFrameModel needs single_frame mode, got {config.mode}")
        self.config = config
        self.step_counter = 0
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype
        self.trunk = _FrameTrunk(config, rng, dtype)
        self.feature = _FeatureHead(config, rng, dtype)
        self.decoder = GraphDecoder(config, rng, dtype, two_frame=False)

    def parameters(self):
        return self.trunk.params() + self.feature.params() + self.decoder.params()

    def _check_images(self, images):
        h, w = self.config.image_size
        x = np.asarray(images, dtype=self.config.np_dtype)
        if x.ndim != 3 or x.shape[1:] != (h, w):
            raise DimensionError(f"expected (B, {h}, {w}) images, got {x.shape}")
        return x[..., None]

    def forward(self, images, train=False):
        """(B, H, W) grayscale -> (B, N, 2) normalized keypoints."""
        x = self._check_images(images)
        feat = self.feature.forward(self.trunk.forward(x, train), train)
        return self.decoder.forward(feat, train)

    def backward(self, grad_kp):
        grad_kp = np.asarray(grad_kp, dtype=self.config.np_dtype)
        gfeat = self.decoder.backward(grad_kp)
        self.trunk.backward(self.feature.backward(gfeat))


@dataclass
class ClipOutputs:
    """Raw batched outputs of MultiFrameModel.forward."""

    keypoints: np.ndarray  # (B, 2, N, 2): ED then ES
    ef: np.ndarray  # (B,)
    ed_logits: np.ndarray | None = None  # (B, F)
    es_logits: np.ndarray | None = None
    ed_probs: np.ndarray | None = None
    es_probs: np.ndarray | None = None


class MultiFrameModel:
    """Clip in; EF, two keypoint frames, and (optionally) ED/ES likelihoods out."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        if not config.is_multi_frame:
            raise ConfigError(f"MultiFrameModel needs a multi-frame mode, got {config.mode}")
        self.config = config
        self.step_counter = 0
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype
        self.trunk = _FrameTrunk(config, rng, dtype)
        self.feature = _FeatureHead(config, rng, dtype)
        self.regressor = EfRegressor(config, rng, dtype)
        self.with_classifier = config.mode == "multi_frame_classifier"
        if self.with_classifier:
            self.classifier = EdEsClassifier(config, rng, dtype)
            self._softmax_ed = _Softmax()
            self._softmax_es = _Softmax()
            extra = 2 * config.clip_len
        else:
            self.classifier = None
            extra = 0
        self.decoder = GraphDecoder(config, rng, dtype, two_frame=True, extra_in=extra)

    def parameters(self):
        out = self.trunk.params() + self.feature.params() + self.regressor.params()
        if self.with_classifier:
            out += self.classifier.params()
        return out + self.decoder.params()

    def _check_clips(self, clips):
        f = self.config.clip_len
        h, w = self.config.image_size
        x = np.asarray(clips, dtype=self.config.np_dtype)
        if x.ndim != 4 or x.shape[1:] != (f, h, w):
            raise DimensionError(f"expected (B, {f}, {h}, {w}) clips, got {x.shape}")
        return x

    def forward(self, clips, train=False) -> ClipOutputs:
        x = self._check_clips(clips)
        b, f, h, w = x.shape
        frame_feats = self.trunk.forward(x.reshape(b * f, h, w, 1), train)
        pooled = frame_feats.reshape(b, f, -1).mean(axis=1)
        feat = self.feature.forward(pooled, train)
        ef = self.regressor.forward(feat, train)
        if self.with_classifier:
            logits = self.classifier.forward(feat, train)
            ed_logits, es_logits = logits[:, :f], logits[:, f:]
            ed_probs = self._softmax_ed.forward(ed_logits, train)
            es_probs = self._softmax_es.forward(es_logits, train)
            dec_in = np.concatenate([feat, ed_probs, es_probs], axis=-1)
        else:
            ed_logits = es_logits = ed_probs = es_probs = None
            dec_in = feat
        kp = self.decoder.forward(dec_in, train)
        n = self.config.n_keypoints
        return ClipOutputs(
            keypoints=kp.reshape(b, 2, n, KEYPOINT_DIMS),
            ef=ef,
            ed_logits=ed_logits,
            es_logits=es_logits,
            ed_probs=ed_probs,
            es_probs=es_probs,
        )

    def backward(self, grad_kp, grad_ef, grad_ed_logits=None, grad_es_logits=None):
        """Accumulate parameter gradients; grads mirror ClipOutputs fields."""
        dt = self.config.np_dtype
        grad_kp = np.asarray(grad_kp, dtype=dt)
        grad_ef = np.asarray(grad_ef, dtype=dt)
        b = grad_kp.shape[0]
        n = self.config.n_keypoints
        f = self.config.clip_len
        gdec = self.decoder.backward(grad_kp.reshape(b, 2 * n, KEYPOINT_DIMS))
        fw = self.config.feature_width
        gfeat = gdec[:, :fw].copy()
        if self.with_classifier:
            g_ed = self._softmax_ed.backward(gdec[:, fw : fw + f])
            g_es = self._softmax_es.backward(gdec[:, fw + f :])
            if grad_ed_logits is not None:
                g_ed = g_ed + grad_ed_logits
            if grad_es_logits is not None:
                g_es = g_es + grad_es_logits
            gfeat += self.classifier.backward(np.concatenate([g_ed, g_es], axis=-1))
        gfeat += self.regressor.backward(grad_ef)
        gpooled = self.feature.backward(gfeat)
        gframes = np.repeat(gpooled[:, None, :] / f, f, axis=1)
        self.trunk.backward(gframes.reshape(b * f, -1))


def _as_keypoint_set(points: np.ndarray, cfg: ModelConfig) -> KeypointSet:
    return KeypointSet(
        np.asarray(points, dtype=np.float64),
        apex_index=cfg.apex_index,
        basal_indices=cfg.basal_indices,
    )


def single_frame_forward(model: SingleFrameModel, image) -> KeypointSet:
    """One image -> one contour."""
    kp = model.forward(np.asarray(image)[None])[0]
    return _as_keypoint_set(kp, model.config)


def multi_frame_forward(model: MultiFrameModel, clip) -> EfPrediction:
    """One clip -> EF estimates plus ED and ES contours."""
    out = model.forward(np.asarray(clip)[None])
    cfg = model.config
    ed = _as_keypoint_set(out.keypoints[0, 0], cfg)
    es = _as_keypoint_set(out.keypoints[0, 1], cfg)
    try:
        ef_kp = ef_from_keypoints(ed, es, cfg.n_disks)
    except (DegenerateContourError, DegenerateVolumeError):
        ef_kp = float("nan")
    return EfPrediction(
        ef_regressed=clamp_fraction(float(out.ef[0])),
        ef_from_keypoints=ef_kp,
        ed_keypoints=ed,
        es_keypoints=es,
        ed_likelihood=None if out.ed_probs is None else out.ed_probs[0].astype(np.float64),
        es_likelihood=None if out.es_probs is None else out.es_probs[0].astype(np.float64),
    )


def build_model(config: ModelConfig, seed: int = 0):
    if config.mode == "single_frame":
        return SingleFrameModel(config, seed)
    return MultiFrameModel(config, seed)


# ---------------------------------------------------------------------------
# losses


def keypoint_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute coordinate error; returns (loss, grad wrt pred).

    Accepts (..., N, 2) stacks; a multi-frame batch (B, 2, N, 2) therefore
    averages the ED and ES terms with equal weight.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"keypoint shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, grad


def ef_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared EF error; returns (loss, grad wrt pred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"ef shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float((diff**2).mean())
    grad = 2.0 * diff / diff.size
    return loss, grad


def frame_weights(clip_len: int, gt_index: int, gt_weight: float = 5.0) -> np.ndarray:
    """Per-frame cross-entropy weights: the true frame counts gt_weight, others 1."""
    if not (0 <= gt_index < clip_len):
        raise LabelError(f"frame index {gt_index} outside clip of {clip_len}")
    w = np.ones(clip_len)
    w[gt_index] = gt_weight
    return w


def _weighted_ce(logits: np.ndarray, gt_index: np.ndarray, gt_weight: float):
    b, f = logits.shape
    gt_index = np.asarray(gt_index)
    if gt_index.shape != (b,):
        raise DimensionError(f"need {b} indices, got shape {gt_index.shape}")
    if gt_index.min() < 0 or gt_index.max() >= f:
        raise LabelError(f"frame index outside clip of length {f}")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(b)
    w = np.full(b, gt_weight)  # the scored term is always the true frame's
    per = -w * logp[rows, gt_index]
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[rows, gt_index] = 1.0
    grad = (w[:, None] * (p - onehot)) / b
    return float(per.mean()), grad


def edes_classifier_loss(ed_logits, es_logits, ed_index, es_index, gt_weight: float = 5.0):
    """Weighted cross-entropy on both likelihood arrays, summed.

    Returns (loss, grad_ed_logits, grad_es_logits). Each array is scored
    against its ground-truth frame; the true frame's term carries
    ``gt_weight`` while all other frames implicitly weigh 1 (they only
    enter through the softmax normalization).
    """
    ed_logits = np.asarray(ed_logits, dtype=np.float64)
    es_logits = np.asarray(es_logits, dtype=np.float64)
    if ed_logits.ndim == 1:
        loss, g_ed, g_es = edes_classifier_loss(
            ed_logits[None], es_logits[None], [ed_index], [es_index], gt_weight
        )
        return loss, g_ed[0], g_es[0]
    led, g_ed = _weighted_ce(ed_logits, ed_index, gt_weight)
    les, g_es = _weighted_ce(es_logits, es_index, gt_weight)
    return led + les, g_ed, g_es


# ---------------------------------------------------------------------------
# checkpoints

_MODE_CODES = {m: i for i, m in enumerate(MODES)}


def _config_ints(model) -> list[tuple[str, int]]:
    cfg = model.config
    items = [
        ("mode", _MODE_CODES[cfg.mode]),
        ("n_keypoints", cfg.n_keypoints),
        ("spiral_len", cfg.spiral_len),
        ("feature_width", cfg.feature_width),
        ("decoder_width", cfg.decoder_width),
        ("gamma_hidden", -1 if cfg.gamma_hidden is None else cfg.gamma_hidden),
        ("clip_len", cfg.clip_len),
        ("image_h", cfg.image_size[0]),
        ("image_w", cfg.image_size[1]),
        ("n_disks", cfg.n_disks),
        ("dtype64", 1 if cfg.dtype == "float64" else 0),
        ("step_counter", model.step_counter),
    ]
    items += [(f"enc_ch_{i}", c) for i, c in enumerate(cfg.encoder_channels)]
    items += [(f"ef_h_{i}", c) for i, c in enumerate(cfg.ef_hidden)]
    items += [(f"cls_h_{i}", c) for i, c in enumerate(cfg.classifier_hidden)]
    return items


def _config_from_ints(ints: dict) -> tuple[ModelConfig, int]:
    codes = {v: k for k, v in _MODE_CODES.items()}
    try:
        gamma = ints["gamma_hidden"]
        cfg = ModelConfig(
            mode=codes[ints["mode"]],
            n_keypoints=ints["n_keypoints"],
            spiral_len=ints["spiral_len"],
            feature_width=ints["feature_width"],
            decoder_width=ints["decoder_width"],
            gamma_hidden=None if gamma == -1 else gamma,
            clip_len=ints["clip_len"],
            image_size=(ints["image_h"], ints["image_w"]),
            encoder_channels=tuple(ints[f"enc_ch_{i}"] for i in range(4)),
            ef_hidden=tuple(ints[f"ef_h_{i}"] for i in range(3)),
            classifier_hidden=tuple(ints[f"cls_h_{i}"] for i in range(3)),
            n_disks=ints["n_disks"],
            dtype="float64" if ints["dtype64"] else "float32",
        )
    except KeyError as e:
        raise CheckpointError(f"checkpoint config missing entry {e}") from None
    except ConfigError as e:
        raise CheckpointError(f"checkpoint config invalid: {e}") from None
    return cfg, ints.get("step_counter", 0)


def serialize_checkpoint(model) -> bytes:
    """EGRF container: magic, version, named int config, named f32 tensors."""
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    items = _config_ints(model)
    out.append(struct.pack("<H", len(items)))
    for key, value in items:
        kb = key.encode("utf-8")
        out.append(struct.pack("<H", len(kb)) + kb + struct.pack("<q", int(value)))
    params = model.parameters()
    out.append(struct.pack("<I", len(params)))
    for p in params:
        nb = p.name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", p.value.ndim))
        out.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        out.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(model, path) -> None:
    atomic_write_bytes(path, serialize_checkpoint(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"checkpoint truncated at byte {self.pos} (wanted {n} more)"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_checkpoint(data: bytes):
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_items,) = r.unpack("<H")
    ints = {}
    for _ in range(n_items):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode("utf-8")
        (ints[key],) = r.unpack("<q")
    cfg, step = _config_from_ints(ints)
    model = build_model(cfg, seed=0)
    model.step_counter = step
    params = {p.name: p for p in model.parameters()}
    (n_tensors,) = r.unpack("<I")
    seen = set()
    for _ in range(n_tensors):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        raw = r.take(4 * int(np.prod(shape, dtype=np.int64)))
        if name not in params:
            raise CheckpointError(f"checkpoint tensor {name!r} not in this architecture")
        p = params[name]
        if shape != p.value.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {shape}, model expects {p.value.shape}"
            )
        values = np.frombuffer(raw, dtype="<f4").reshape(shape)
        p.value[...] = values.astype(cfg.np_dtype)
        seen.add(name)
    if len(seen) != len(params):
        missing = sorted(set(params) - seen)
        raise CheckpointError(f"checkpoint missing tensors: {missing[:3]}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    return model


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable-parameter count for a configuration."""
    chans = (1,) + config.encoder_channels
    total = sum(9 * chans[i] * chans[i + 1] + chans[i + 1] for i in range(4))
    total += config.encoder_channels[-1] * config.feature_width + config.feature_width
    dec_in = config.feature_width
    gather = config.spiral_len
    if config.is_multi_frame:
        gather += 1
        widths = (config.feature_width,) + config.ef_hidden + (1,)
        total += sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(4))
    if config.mode == "multi_frame_classifier":
        dec_in += 2 * config.clip_len
        w = (config.feature_width,) + config.classifier_hidden
        for i in range(3):
            total += w[i] * w[i + 1] + w[i + 1]  # dense
            total += 2 * w[i + 1]  # layer norm gain + shift
        total += w[3] * 2 * config.clip_len + 2 * config.clip_len
    d = config.decoder_width
    hid = config.resolved_gamma_hidden
    nodes = config.n_keypoints * (2 if config.is_multi_frame else 1)
    total += dec_in * d + d
    total += nodes * d  # per-node embedding
    total += DECODER_SPIRAL_LAYERS * ((gather * d) * hid + hid + hid * d + d)
    total += d * KEYPOINT_DIMS + KEYPOINT_DIMS
    return total


def has_same_parameters(a, b) -> bool:
    pa, pb = a.parameters(), b.parameters()
    if len(pa) != len(pb):
        return False
    return all(
        x.name == y.name and np.array_equal(x.value, y.value) for x, y in zip(pa, pb)
    )
