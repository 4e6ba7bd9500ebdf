"""Optimization loop: AdamW with warmup + cosine schedule, clamps, teacher
wiring for distillation, and the masking / loss ablation modes."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import engine as E
from . import lorentz as L
from . import losses as Ls
from .data import Corpus, GENERIC_POOL, MID_CAPTIONS, tokenize_batch
from .encoders import (EncoderConfig, ModelParams, encode_image, encode_text, init_params,
                       load_checkpoint, project_to_hyperbolic, save_checkpoint)
from .evaluation import image_tangents, mean_recall_at_1, retrieval_recall, text_tangents
from .lorentz import LorentzPoint
from .masking import patchify, random_mask

log = logging.getLogger(__name__)

MODES = ("hmid", "meru", "clip")
ENCODER_KEYS = ("embed_dim", "depth", "heads", "patch_size", "max_text_len", "image_size",
                "width", "mlp_ratio")


class ConfigError(ValueError):
    """Bad configuration value; ``line`` is set when it came from a config file."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_iters: int = 5000
    base_lr: float = 5e-4
    weight_decay: float = 0.2
    warmup_frac: float = 0.1
    mask_ratio: float = 0.5
    tau_init: float = 0.7
    tau_min: float = Ls.TAU_MIN
    c_init: float = 1.0
    c_min: float = 0.1
    c_max: float = L.C_MAX
    K: float = L.DEFAULT_K
    lambda_distill: float = 1.0
    lambda_entail: float = 0.2
    seed: int = 0
    unmasked_tuning_frac: float = 0.0
    mode: str = "hmid"
    # caption-level cones: generic -> mid -> specific, added to the entailment term
    lambda_hierarchy: float = 0.0
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    log_every: int = 50
    eval_every: int = 500
    # encoder shape
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    patch_size: int = 8
    max_text_len: int = 16
    image_size: int = 32
    width: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.tau_min <= 0 or self.c_max <= 0 or self.c_init <= 0 or self.tau_init <= 0:
            raise ConfigError("tau_min, tau_init, c_init and c_max must be positive")
        if not L.C_MIN <= self.c_min <= self.c_init <= self.c_max:
            raise ConfigError(f"need {L.C_MIN} <= c_min <= c_init <= c_max, got "
                              f"{self.c_min}, {self.c_init}, {self.c_max}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.unmasked_tuning_frac <= 1.0:
            raise ConfigError("unmasked_tuning_frac must be in [0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.lambda_distill, self.lambda_entail, self.lambda_hierarchy) < 0:
            raise ConfigError("loss weights must be non-negative")

    def encoder_config(self, width_mult: int = 1) -> EncoderConfig:
        kw = {k: getattr(self, k) for k in ENCODER_KEYS}
        kw["width"] = (self.width or self.embed_dim) * width_mult
        return EncoderConfig(**kw)

    def weights(self) -> Ls.LossWeights:
        return Ls.LossWeights(self.lambda_distill, self.lambda_entail, self.lambda_hierarchy)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(name: str, raw: str, kind, line: int | None):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}", line) from None


_FIELD_TYPES = {f.name: {"int": int, "float": float, "str": str, "bool": bool}[f.type]
                for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected key = value, got {body!r}", lineno)
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", lineno)
        values[key] = _coerce(key, raw, _FIELD_TYPES[key], lineno)
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then the config file, then ``overrides`` (None values ignored)."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        values.update(parse_config_text(text))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**values)


def format_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(config).items())


# -- schedule and optimizer -------------------------------------------------------------

def lr_at(step: int, max_iters: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over ``warmup_frac * max_iters`` steps, then cosine decay to 0."""
    if not 0 <= step <= max_iters:
        raise ValueError(f"step {step} outside [0, {max_iters}]")
    warm = warmup_frac * max_iters
    if step < warm:
        return base_lr * step / warm
    progress = (step - warm) / (max_iters - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optimizer(params: ModelParams) -> OptimizerState:
    state = OptimizerState()
    for name, t in params.trainable():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def decays(name: str, t) -> bool:
    """Weight decay applies to matrices only: never to scalars, gains or biases."""
    return t.data.ndim >= 2


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return total


def adamw_update(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
                 lr: float, config: TrainConfig) -> None:
    if params.frozen:
        raise TrainingError("refusing to update a frozen parameter set")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1, bc2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, t in params.trainable():
        g = grads.get(name)
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        update = (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        if decays(name, t):
            update = update + config.weight_decay * t.data
        t.data = (t.data - lr * update).astype(t.data.dtype)


def apply_clamps(params: ModelParams, config: TrainConfig) -> None:
    tau, c = params.tau, params.curv
    tau.data = np.maximum(tau.data, np.asarray(config.tau_min, dtype=tau.dtype))
    c.data = np.clip(c.data, np.asarray(config.c_min, dtype=c.dtype),
                     np.asarray(config.c_max, dtype=c.dtype))


# -- batches --------------------------------------------------------------------------

@dataclass
class Batch:
    index: int
    rows: np.ndarray
    patches: object
    token_ids: np.ndarray
    mask_ratio: float


class TeacherCache:
    """Frozen-teacher tangent vectors for every training pair.

    The teacher sees full images and never changes, so its tower outputs
    are computed once; only the exp map (which depends on the shared
    curvature) runs per step.
    """

    def __init__(self, teacher: ModelParams, corpus: Corpus):
        if not teacher.frozen:
            raise TrainingError("teacher parameters must be frozen")
        self.checksum = teacher.checksum()
        self.image = image_tangents(teacher, corpus.images) * float(teacher["alpha_img"].data)
        self.text = text_tangents(teacher, corpus.specific) * float(teacher["alpha_txt"].data)
        self.curvature = float(teacher.curv.data)

    def batch(self, rows: np.ndarray, c) -> Ls.EmbeddingBatch:
        image = L.exp_map_origin(self.image[rows], c)
        text = L.exp_map_origin(self.text[rows], c)
        return Ls.EmbeddingBatch(image, text, source="teacher")


def mask_ratio_at(step: int, config: TrainConfig) -> float:
    tuning = int(round(config.unmasked_tuning_frac * config.max_iters))
    return 0.0 if step >= config.max_iters - tuning else config.mask_ratio


def batch_stream(corpus: Corpus, config: TrainConfig, start: int = 0):
    """Deterministic batches: shuffled epochs of row indices plus per-step masks."""
    rng = np.random.default_rng([config.seed, 1])
    ids = tokenize_batch(corpus.specific, config.max_text_len)
    n = len(corpus)
    size = min(config.batch_size, n)
    order, pos = rng.permutation(n), 0
    for step in range(config.max_iters):
        if pos + size > n:
            order, pos = rng.permutation(n), 0
        rows = np.sort(order[pos:pos + size])
        pos += size
        ratio = mask_ratio_at(step, config)
        seq = patchify(corpus.images[rows], config.patch_size)
        seq = random_mask(seq, ratio, rng) if ratio > 0 else seq
        if step >= start:
            yield Batch(step, rows, seq, ids[rows], ratio)


def prefetch(iterable, capacity: int = 2):
    """Run ``iterable`` on a worker thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for item in iterable:
                if stop.is_set():
                    return
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while thread.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                thread.join(0.01)


# -- one step --------------------------------------------------------------------------

def _hierarchy_pairs(params: ModelParams, batch: Batch, corpus: Corpus, config: TrainConfig,
                     student: Ls.EmbeddingBatch):
    """(parent, child) cones for the batch rows: generic -> mid -> specific, and
    the mid and generic captions as further parents of the image."""
    levels = list(MID_CAPTIONS.values()) + list(GENERIC_POOL)
    ids = tokenize_batch(levels, config.max_text_len)
    vecs = encode_text(params, ids)
    pts = project_to_hyperbolic(vecs, params["alpha_txt"], params.curv)
    where = {cap: i for i, cap in enumerate(levels)}
    mid_idx = np.array([where[corpus.mid[r]] for r in batch.rows])
    gen_idx = np.array([where[corpus.generic[r]] for r in batch.rows])
    take = lambda idx: LorentzPoint(pts.time[idx], pts.space[idx])
    mid, gen = take(mid_idx), take(gen_idx)
    return [(gen, mid), (mid, student.text), (mid, student.image), (gen, student.image)]


def compute_loss(params: ModelParams, batch: Batch, config: TrainConfig,
                 teacher: TeacherCache | None = None, corpus: Corpus | None = None) -> Ls.LossReport:
    vi = encode_image(params, batch.patches)
    vt = encode_text(params, batch.token_ids)
    if config.mode == "clip":
        loss = Ls.euclidean_clip_loss(vi, vt, params.tau)
        return Ls.LossReport(loss, loss, 0.0, 0.0, weights=Ls.LossWeights(0.0, 0.0))
    c = params.curv
    student = Ls.EmbeddingBatch(project_to_hyperbolic(vi, params["alpha_img"], c),
                                project_to_hyperbolic(vt, params["alpha_txt"], c))
    weights = config.weights()
    if teacher is None or config.mode == "meru":
        weights = Ls.LossWeights(0.0, weights.entailment, weights.hierarchy)
    teacher_batch = teacher.batch(batch.rows, c) if weights.distillation > 0 else None
    hierarchy = None
    if weights.hierarchy > 0 and corpus is not None:
        hierarchy = _hierarchy_pairs(params, batch, corpus, config, student)
    return Ls.total_loss(student, teacher_batch, params.tau, c, config.K, weights, hierarchy)


def train_step(params: ModelParams, teacher: TeacherCache | None, batch: Batch,
               config: TrainConfig, opt_state: OptimizerState, lr: float | None = None,
               corpus: Corpus | None = None):
    """One AdamW update; returns ``(params, opt_state, report, grad_norm)``.

    ``lr`` defaults to the schedule value at ``opt_state.step``.
    """
    if lr is None:
        lr = lr_at(min(opt_state.step, config.max_iters), config.max_iters, config.base_lr,
                   config.warmup_frac)
    if params.frozen:
        raise TrainingError("refusing to update a frozen parameter set")
    try:
        with E.Tape() as tape:
            report = compute_loss(params, batch, config, teacher, corpus)
    except L.GeometryError as exc:  # non-finite encoder output
        raise TrainingError(f"{exc} at batch index {batch.index}") from exc
    total = float(E.as_array(report.total))
    if not math.isfinite(total):
        raise TrainingError(f"non-finite loss {total} at batch index {batch.index}")
    by_id = tape.backward(report.total)
    grads = {}
    for name, t in params.trainable():
        t.grad = None
        if id(t) in by_id:
            grads[name] = by_id[id(t)]
    norm = clip_global_norm(grads, config.grad_clip)
    adamw_update(params, grads, opt_state, lr, config)
    apply_clamps(params, config)
    return params, opt_state, report, norm


# -- loops -------------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    final_checkpoint: Path | None
    best_checkpoint: Path | None
    best_recall: float
    config_hash: str


def _dump_failure(out_dir: Path | None, batch: Batch, error: Exception) -> None:
    if out_dir is None:
        return
    dump = {"batch_index": batch.index, "rows": batch.rows.tolist(),
            "mask_ratio": batch.mask_ratio, "error": str(error)}
    (out_dir / "failure.json").write_text(json.dumps(dump, indent=2), encoding="utf-8")


def train_loop(config: TrainConfig, corpus: Corpus, teacher: ModelParams | None = None,
               out_dir=None, val: Corpus | None = None, width_mult: int = 1,
               params: ModelParams | None = None) -> TrainResult:
    """Train a student (or, with ``width_mult=2`` and no teacher, a teacher).

    ``corpus`` is the training split. With ``val`` set, recall@1 is measured
    every ``eval_every`` steps and the best parameters are checkpointed.
    """
    if len(corpus) == 0:
        raise TrainingError("training corpus is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise TrainingError(f"{out}: {exc.strerror}") from exc
    cache = None
    c_init = config.c_init
    if teacher is not None and config.mode == "hmid" and config.lambda_distill > 0:
        cache = TeacherCache(teacher, corpus)
        c_init = cache.curvature  # teacher and student start from one shared c
    if params is None:
        params = init_params(config.encoder_config(width_mult), config.seed,
                             config.tau_init, c_init)
    opt = init_optimizer(params)
    chash = config_hash(config)
    metrics: list[dict] = []
    best, best_path = -1.0, None
    metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8") if out is not None else None
    try:
        for batch in prefetch(batch_stream(corpus, config)):
            t0 = time.perf_counter()
            lr = lr_at(batch.index, config.max_iters, config.base_lr, config.warmup_frac)
            try:
                _, _, report, _ = train_step(params, cache, batch, config, opt, lr, corpus)
            except TrainingError as exc:
                _dump_failure(out, batch, exc)
                raise
            step = batch.index + 1
            if step % config.log_every == 0 or step == config.max_iters:
                rec = {"step": step, "lr": lr, **report.as_floats(),
                       "tau": float(params.tau.data), "c": float(params.curv.data),
                       "wall_ms": round(1e3 * (time.perf_counter() - t0), 3)}
                rec.pop("distill_i2t"), rec.pop("distill_t2i")
                metrics.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    metrics_fh.flush()
                log.info("step %d loss %.4f tau %.4f c %.4f", step, rec["total"],
                         rec["tau"], rec["c"])
            if val is not None and config.mode != "clip" and (
                    step % config.eval_every == 0 or step == config.max_iters):
                score = mean_recall_at_1(retrieval_recall(params, val.images, val.specific))
                log.info("step %d val recall@1 %.4f", step, score)
                if score > best:
                    best = score
                    if out is not None:
                        best_path = out / "best.ckpt"
                        save_checkpoint(best_path, params, {"step": step, "recall_at_1": score,
                                                            "config_hash": chash})
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    final_path = None
    if out is not None:
        final_path = out / "final.ckpt"
        save_checkpoint(final_path, params, {"step": config.max_iters, "config_hash": chash,
                                             "config": asdict(config)})
        (out / "config.txt").write_text(format_config(config), encoding="utf-8")
    if cache is not None and cache.checksum != teacher.checksum():
        raise TrainingError("teacher parameters changed during student training")
    return TrainResult(params, metrics, final_path, best_path, best, chash)


TEACHER_GATE = 0.9


def train_teacher(config: TrainConfig, corpus: Corpus, out_dir=None, val: Corpus | None = None,
                  gate: float | None = TEACHER_GATE) -> TrainResult:
    """2x-width tower trained with contrastive + entailment only, then frozen.

    Unmasked so the teacher sees what it will later be shown. When ``val``
    is given and ``gate`` is set, a recall@1 below the gate raises.
    """
    tconf = config.replace(mode="meru", lambda_distill=0.0, mask_ratio=0.0,
                           unmasked_tuning_frac=0.0)
    result = train_loop(tconf, corpus, None, out_dir=None, val=None, width_mult=2)
    params = result.params.freeze()
    recall = None
    if val is not None:
        recall = mean_recall_at_1(retrieval_recall(params, val.images, val.specific))
        result.best_recall = recall
    final = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        final = out / "teacher.ckpt"
        save_checkpoint(final, params, {"role": "teacher", "recall_at_1": recall,
                                        "config_hash": result.config_hash})
        with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for rec in result.metrics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if gate is not None and recall is not None and recall < gate:
        raise TrainingError(f"teacher recall@1 {recall:.3f} below the {gate} gate")
    return TrainResult(params, result.metrics, final, final, recall or -1.0, result.config_hash)


def load_teacher(path) -> ModelParams:
    params, _ = load_checkpoint(path)
    if not params.frozen:
        raise TrainingError(f"{path}: checkpoint is not marked frozen")
    return params
