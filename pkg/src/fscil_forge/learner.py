"""Losses, optimizer, exemplar memory and the session training loop.

Training batch layout: depth features ``(B, 1 + A, N, C)`` and point features
``(B, 1 + A, D3)`` where copy 0 is the clean render and copies 1..A are the
augmented renders used by the contrastive term.
"""

from __future__ import annotations

import logging
import os
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .benchmark import SessionSchedule
from .config import RunConfig
from .encoders import build_prototype_bank, encode_depth_toy, encode_points_toy
from .errors import DataError, FormatError, ProtocolError, ShapeError
from .geometry import PointCloud, augment, normalize_unit_sphere
from .heads import GradientBundle, Heads, decode_hds1, encode_hds1
from .metrics import PredictionLog, PredictionRow
from .projection import default_camera_set, render_views
from .rfe import PrincipalBasis, fit_basis, predict_probs, similarity_backward, similarity_logits
from .rng import SplitMix64, derive_seed, stream

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
OPT_MAGIC = b"OPT1"
WARNINGS: Counter = Counter()


def worker_count() -> int:
    raw = os.environ.get("FSCIL_FORGE_THREADS", "")
    if raw.strip():
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer FSCIL_FORGE_THREADS=%r", raw)
    return os.cpu_count() or 1


# --- losses ------------------------------------------------------------------


def ce_loss(probs, true_index: int) -> float:
    """Negative log-probability of the true class, floored at 1e-12."""
    p = np.asarray(probs, dtype=float)
    if not 0 <= true_index < p.shape[-1]:
        raise ShapeError(f"true index {true_index} outside 0..{p.shape[-1] - 1}")
    pt = float(p[true_index])
    if pt < PROB_FLOOR:
        WARNINGS["ce_clamp"] += 1
        pt = PROB_FLOOR
    return -float(np.log(pt))


def softmax_ce(logits, labels):
    """Mean CE over rows and its gradient w.r.t. the logits."""
    z = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.asarray(labels, dtype=int)
    probs = predict_probs(z)
    rows = np.arange(z.shape[0])
    pt = probs[rows, labels]
    low = pt < PROB_FLOOR
    if low.any():
        WARNINGS["ce_clamp"] += int(low.sum())
    loss = float(-np.log(np.maximum(pt, PROB_FLOOR)).mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / z.shape[0]


def infonce_loss(fg, pos, negs, tau: float) -> float:
    """InfoNCE with cosine similarities between ``fg`` and each prototype."""
    if tau <= 0:
        raise DataError("tau must be positive")
    negs = np.atleast_2d(np.asarray(negs, dtype=float))
    if negs.shape[0] < 1 or negs.size == 0:
        raise DataError("InfoNCE needs at least one negative")
    protos = np.vstack([np.asarray(pos, dtype=float)[None], negs])
    sims, _ = similarity_logits(fg, protos)
    z = sims[0] / tau
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[0])


def total_loss(l_cls: float, l_cont: float, alpha: float) -> float:
    return l_cls + alpha * l_cont


# --- optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_config(cls, cfg: RunConfig) -> "OptimizerState":
        return cls(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)


def adamw_step(params: dict, grads, state: OptimizerState, cfg: RunConfig) -> dict:
    """One decoupled-weight-decay Adam step. Returns new arrays; inputs are untouched."""
    gdict = grads.params if isinstance(grads, GradientBundle) else grads
    missing = set(gdict) - set(params)
    if missing:
        raise ShapeError(f"gradients for unknown parameters: {sorted(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = gdict.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        decayed = p * (1 - cfg.lr * cfg.weight_decay)
        out[name] = decayed - cfg.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


# --- sampling and memory -------------------------------------------------------


def sample_shots(pool, shots: int, seed: int, warn: bool = True) -> list:
    """``min(shots, len(pool))`` items without replacement via partial Fisher-Yates."""
    pool = list(pool)
    if not pool:
        raise DataError("cannot sample shots from an empty pool")
    if shots < 1:
        raise DataError("shots must be >= 1")
    if len(pool) < shots:
        if warn:
            WARNINGS["shot_shortage"] += 1
            log.warning("pool has %d samples, fewer than %d shots; taking all", len(pool), shots)
        shots = len(pool)
    rng = SplitMix64(seed)
    n = len(pool)
    for i in range(shots):
        j = i + rng.below(n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:shots]


@dataclass
class ExemplarMemory:
    slots: dict = field(default_factory=dict)  # class -> [sample_id, ...]

    def add(self, class_name: str, sample_ids, limit: int) -> None:
        if class_name in self.slots:
            raise ProtocolError(f"memory already holds class {class_name!r}")
        self.slots[class_name] = list(sample_ids)[:limit]

    def sample_ids(self) -> list:
        return [s for ids in self.slots.values() for s in ids]

    @property
    def classes(self) -> list:
        return list(self.slots)


# --- feature extraction ---------------------------------------------------------


CloudSource = Mapping[str, PointCloud] | Callable[[str], PointCloud]


class FeatureExtractor:
    """Normalize, render and encode a sample; cached per sample id.

    Augmented copies use fixed seeds per (sample, copy), so the cache holds for
    the whole experiment.
    """

    def __init__(self, cfg: RunConfig, clouds: CloudSource, workers: int | None = None):
        self.cfg = cfg
        self._clouds = clouds
        self.workers = workers or worker_count()
        self.cameras = default_camera_set(cfg.n_views, cfg.view_distance, (cfg.resolution, cfg.resolution),
                                          cfg.fov_deg)
        self._aug = cfg.augmentation()
        self._cache: dict = {}

    def cloud(self, sid: str) -> PointCloud:
        src = self._clouds
        try:
            return src(sid) if callable(src) else src[sid]
        except KeyError as exc:
            raise DataError(f"no point cloud for sample {sid!r}") from exc

    def _encode(self, pc: PointCloud, distance_scale: float):
        cfg = self.cfg
        maps = render_views(pc, self.cameras, cfg.point_radius_px, distance_scale)
        return encode_depth_toy(maps, cfg.dim, cfg.encoder_seed), encode_points_toy(pc, cfg.point_dim, cfg.encoder_seed)

    def _compute(self, sid: str):
        pc = normalize_unit_sphere(self.cloud(sid))
        f2, f3 = [], []
        d, p = self._encode(pc, 1.0)
        f2.append(d)
        f3.append(p)
        for j in range(1, self.cfg.n_aug + 1):
            apc, rec = augment(pc, derive_seed(self.cfg.master_seed, "aug", sid, j), self._aug)
            d, p = self._encode(apc, rec.view_distance_scale)
            f2.append(d)
            f3.append(p)
        return np.stack(f2), np.stack(f3)

    def prepare(self, sids) -> None:
        todo = [s for s in dict.fromkeys(sids) if s not in self._cache]
        if self.workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as ex:
                results = list(ex.map(self._compute, todo))
        else:
            results = [self._compute(s) for s in todo]
        self._cache.update(zip(todo, results))

    def features(self, sids, clean_only: bool = False):
        """Stacked ``(F2D, f3D)`` of shapes ``(B, 1+A, N, C)`` and ``(B, 1+A, D3)``."""
        sids = list(sids)
        self.prepare(sids)
        f2 = np.stack([self._cache[s][0] for s in sids])
        f3 = np.stack([self._cache[s][1] for s in sids])
        if clean_only:
            return f2[:, :1], f3[:, :1]
        return f2, f3


# --- loss and gradients ------------------------------------------------------


@dataclass
class LossParts:
    total: float
    cls: float
    cont: float
    grads: GradientBundle
    logits: np.ndarray


def compute_loss(heads: Heads, F2D, f3D, labels, protos, basis: PrincipalBasis | None,
                 cfg: RunConfig) -> LossParts:
    """L = CE(clean logits) + alpha * InfoNCE(augmented copies), with gradients.

    ``labels`` index rows of ``protos`` (the visible classes). RCS logits are
    used when ``cfg.rfe_enabled``, applied to f_g or f_d per ``cfg.rfe_target``.
    """
    F2D = np.asarray(F2D, dtype=float)
    b, copies, n, c = F2D.shape
    labels = np.asarray(labels, dtype=int)
    flat2 = F2D.reshape(b * copies, n, c)
    use_snc = cfg.snc_enabled
    if use_snc:
        f3 = np.asarray(f3D, dtype=float)
        fg, cache = heads.forward(flat2, f3.reshape(b * copies, f3.shape[-1]))
    else:
        fg, cache = heads.forward(flat2)
    fg3 = fg.reshape(b, copies, c)
    fd3 = cache.fd.reshape(b, copies, c)
    rfe_basis = basis if cfg.rfe_enabled else None
    if cfg.rfe_enabled and basis is None:
        raise DataError("rfe_enabled requires a fitted basis")

    grad_fg = np.zeros((b, copies, c))
    grad_fd = np.zeros((b, copies, c))
    on_fd = use_snc and cfg.rfe_target == "fd"
    cls_in = fd3[:, 0] if on_fd else fg3[:, 0]
    logits, ctx = similarity_logits(cls_in, protos, rfe_basis)
    l_cls, g_logits = softmax_ce(logits, labels)
    (grad_fd if on_fd else grad_fg)[:, 0] = similarity_backward(g_logits, ctx)

    l_cont = 0.0
    if cfg.cl_enabled and copies > 1:
        aug = fg3[:, 1:].reshape(b * (copies - 1), c)
        aug_labels = np.repeat(labels, copies - 1)
        sims, sctx = similarity_logits(aug, protos, rfe_basis if cfg.cont_use_rcs else None)
        mean_ce, g_sims = softmax_ce(sims / cfg.tau, aug_labels)
        # sum over copies, mean over the batch
        scale = (copies - 1)
        l_cont = mean_ce * scale
        grad_fg[:, 1:] = cfg.alpha * (similarity_backward(g_sims * scale / cfg.tau, sctx)
                                      .reshape(b, copies - 1, c))
    total = total_loss(l_cls, l_cont, cfg.alpha) if cfg.cl_enabled else l_cls
    grads = heads.backward(grad_fg.reshape(b * copies, c), cache,
                           grad_fd.reshape(b * copies, c) if on_fd else None)
    return LossParts(total, l_cls, l_cont, grads, logits)


# --- model state and sessions -----------------------------------------------------


@dataclass
class ModelState:
    heads: Heads
    opt: OptimizerState
    basis: PrincipalBasis | None = None
    session: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: RunConfig) -> "ModelState":
        rng = stream(cfg.master_seed, "init")
        heads = Heads.init(cfg.n_views, cfg.dim, cfg.hidden_dim, cfg.point_dim, cfg.point_hidden_dim, rng,
                           with_adapter=cfg.snc_enabled)
        return cls(heads, OptimizerState.for_config(cfg))


def embed_for_prediction(heads: Heads, F2D, f3D, cfg: RunConfig) -> np.ndarray:
    """Clean-copy feature used for classification (f_g, or f_d under rfe_target='fd')."""
    F2D = np.asarray(F2D, dtype=float)
    if F2D.ndim == 4:
        F2D, f3D = F2D[:, 0], np.asarray(f3D)[:, 0]
    if cfg.snc_enabled:
        fg, cache = heads.forward(F2D, f3D)
        return cache.fd if cfg.rfe_target == "fd" else fg
    fd, _ = heads.forward(F2D)
    return fd


def predict(state: ModelState, sids, extractor: FeatureExtractor, classes, cfg: RunConfig) -> list:
    """Argmax label over ``classes`` for each sample; ties go to the lowest class index."""
    sids = list(sids)
    if not sids:
        return []
    protos = build_prototype_bank(classes, cfg.dim).rows
    basis = state.basis if cfg.rfe_enabled else None
    out = []
    for i in range(0, len(sids), cfg.batch_size):
        chunk = sids[i:i + cfg.batch_size]
        F2D, f3D = extractor.features(chunk, clean_only=True)
        z = embed_for_prediction(state.heads, F2D, f3D, cfg)
        logits, _ = similarity_logits(z, protos, basis)
        out.extend(classes[k] for k in np.argmax(logits, axis=1))
    return out


def session_training_ids(b: int, schedule: SessionSchedule, cfg: RunConfig) -> list:
    """All base training samples at b=1; ``shots`` seeded picks per class afterwards."""
    sess = schedule.session(b)
    by_class: dict = {c: [] for c in sess.classes}
    for sid in sess.train:
        c = schedule.class_of(sid)
        if c not in by_class:
            raise ProtocolError(f"training sample {sid!r} of class {c!r} is not in session {b}")
        by_class[c].append(sid)
    if b == 1:
        return list(sess.train)
    picked = []
    for c in sess.classes:
        if not by_class[c]:
            raise ProtocolError(f"session {b}: class {c!r} has no training samples")
        picked.extend(sample_shots(by_class[c], cfg.shots, derive_seed(cfg.master_seed, "shots", b, c)))
    return picked


def _labels(sids, schedule, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[schedule.class_of(s)] for s in sids], dtype=int)
    except KeyError as exc:
        raise ProtocolError(f"sample of unseen class {exc.args[0]!r}") from exc


def run_session(b: int, schedule: SessionSchedule, state: ModelState, memory: ExemplarMemory,
                extractor: FeatureExtractor, cfg: RunConfig):
    """Train on session ``b`` then evaluate on every test sample seen so far."""
    if state.session != b - 1:
        raise ProtocolError(f"session {b} requested after session {state.session}")
    sess = schedule.session(b)
    visible = schedule.visible_classes(b)
    stale = [c for c in memory.classes if c in sess.classes]
    if stale:
        raise ProtocolError(f"memory holds current-session class {stale[0]!r}")
    own = session_training_ids(b, schedule, cfg)
    train_ids = own + memory.sample_ids()
    labels = _labels(train_ids, schedule, visible)
    protos = build_prototype_bank(visible, cfg.dim).rows

    if b == 1 and cfg.rfe_enabled:
        F2D, _ = extractor.features(own, clean_only=True)
        state.basis = fit_basis(F2D.reshape(-1, cfg.dim), cfg.energy_fraction)

    extractor.prepare(train_ids)
    epochs = cfg.base_epochs if b == 1 else cfg.inc_epochs
    epoch_losses = []
    for epoch in range(epochs):
        order = stream(cfg.master_seed, "shuffle", b, epoch).permutation(len(train_ids))
        total, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            F2D, f3D = extractor.features([train_ids[k] for k in idx])
            parts = compute_loss(state.heads, F2D, f3D, labels[idx], protos, state.basis, cfg)
            active = state.heads.named_params(include_adapter=cfg.snc_enabled)
            for name, value in adamw_step(active, parts.grads, state.opt, cfg).items():
                state.heads.set_param(name, value)
            state.heads.touch()
            total += parts.total * len(idx)
            seen += len(idx)
        epoch_losses.append(total / seen)

    train_pred = predict(state, train_ids, extractor, visible, cfg)
    train_acc = float(np.mean([p == visible[k] for p, k in zip(train_pred, labels)]))

    rows = []
    intro = schedule.intro_session()
    test_ids = [s for k in range(1, b + 1) for s in schedule.session(k).test]
    for sid, pred in zip(test_ids, predict(state, test_ids, extractor, visible, cfg)):
        true = schedule.class_of(sid)
        if true not in intro or intro[true] > b:
            raise ProtocolError(f"test sample {sid!r} has unseen class {true!r}")
        rows.append(PredictionRow(b, sid, true, pred, intro[true]))

    if cfg.memory_per_class > 0:
        for c in sess.classes:
            pool = [s for s in own if schedule.class_of(s) == c]
            chosen = sample_shots(pool, cfg.memory_per_class, derive_seed(cfg.master_seed, "memory", c), warn=False)
            memory.add(c, chosen, cfg.memory_per_class)

    state.session = b
    state.history.append({"session": b, "n_train": len(train_ids), "epoch_losses": epoch_losses,
                          "train_accuracy": train_acc})
    return state, memory, PredictionLog(rows)


def run_experiment(schedule: SessionSchedule, clouds: CloudSource, cfg: RunConfig, sessions: int | None = None,
                   workers: int | None = None, on_session=None):
    """Sessions 1..B (or 1..``sessions``); returns ``(state, memory, log)``."""
    state = ModelState.init(cfg)
    memory = ExemplarMemory()
    extractor = FeatureExtractor(cfg, clouds, workers)
    full = PredictionLog()
    last = sessions or schedule.n_sessions
    for b in range(1, last + 1):
        state, memory, rows = run_session(b, schedule, state, memory, extractor, cfg)
        full.extend(rows)
        if on_session is not None:
            on_session(b, state, memory, rows)
    return state, memory, full


# --- checkpoints ---------------------------------------------------------------


def encode_checkpoint(state: ModelState) -> bytes:
    """HDS1 heads followed by an OPT1 block with Adam moments."""
    opt = state.opt
    names = [n for n in state.heads.named_params() if n in opt.m]
    parts = [encode_hds1(state.heads), OPT_MAGIC,
             struct.pack("<QIddd", opt.step, state.session, opt.beta1, opt.beta2, opt.eps),
             struct.pack("<I", len(names))]
    for n in names:
        raw = n.encode("ascii")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(np.ascontiguousarray(opt.m[n], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(opt.v[n], dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> ModelState:
    heads, pos = decode_hds1(raw)
    if raw[pos:pos + 4] != OPT_MAGIC:
        raise FormatError("checkpoint is missing its OPT1 block")
    pos += 4
    step, session, b1, b2, eps = struct.unpack_from("<QIddd", raw, pos)
    pos += struct.calcsize("<QIddd")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = heads.named_params()
    opt = OptimizerState(step=step, beta1=b1, beta2=b2, eps=eps)
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + ln].decode("ascii")
        pos += 2 + ln
        if name not in params:
            raise FormatError(f"OPT1 block names unknown parameter {name!r}")
        shape, size = params[name].shape, params[name].size * 8
        if pos + 2 * size > len(raw):
            raise FormatError("truncated OPT1 block")
        opt.m[name] = np.frombuffer(raw[pos:pos + size], dtype="<f8").astype(float).reshape(shape)
        opt.v[name] = np.frombuffer(raw[pos + size:pos + 2 * size], dtype="<f8").astype(float).reshape(shape)
        pos += 2 * size
    if pos != len(raw):
        raise FormatError("trailing bytes after OPT1 block")
    return ModelState(heads, opt, session=session)


def save_checkpoint(path, state: ModelState) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(state))


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
