"""Zero-shot classification, retrieval and geodesic traversal in hyperbolic space.

Everything here is read-only over a parameter set and runs without a tape.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from . import lorentz as L
from .data import GENERIC_POOL, MID_CAPTIONS, Corpus, tokenize_batch
from .encoders import ModelParams, encode_image, encode_text, project_to_hyperbolic
from .lorentz import LorentzPoint
from .masking import patchify, random_mask

TRAVERSAL_STEPS = 50
TRAVERSAL_KEEP = 5


class EvalConfigError(ValueError):
    pass


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def image_tangents(params: ModelParams, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Unmasked image-tower outputs ``[N, embed_dim]`` (before alpha and the exp map)."""
    cfg = params.config
    images = np.asarray(images, dtype=np.float32)
    out = [E.as_array(encode_image(params, patchify(images[s], cfg.patch_size)))
           for s in _chunks(len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0, cfg.embed_dim), np.float32)


def text_tangents(params: ModelParams, captions, batch: int = 256) -> np.ndarray:
    cfg = params.config
    ids = tokenize_batch(list(captions), cfg.max_text_len)
    out = [E.as_array(encode_text(params, ids[s])) for s in _chunks(len(ids), batch)]
    return np.concatenate(out) if out else np.zeros((0, cfg.embed_dim), np.float32)


def _to_point(params: ModelParams, v: np.ndarray, alpha: str) -> LorentzPoint:
    c = float(params.curv.data)
    p = project_to_hyperbolic(v.astype(np.float64), float(params[alpha].data), c)
    return LorentzPoint(np.asarray(p.time), np.asarray(p.space))


def embed_images(params: ModelParams, images: np.ndarray) -> LorentzPoint:
    """Hyperboloid points (float64) for a stack of ``[N, H, W, 3]`` images."""
    return _to_point(params, image_tangents(params, images), "alpha_img")


def embed_texts(params: ModelParams, captions) -> LorentzPoint:
    return _to_point(params, text_tangents(params, captions), "alpha_txt")


# -- classification ------------------------------------------------------------------

@dataclass
class ClassifyResult:
    accuracy: float
    predictions: np.ndarray
    per_class: dict[str, float]


def argmax_first(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the lowest index on ties."""
    return np.argmax(scores, axis=1)


def classify_points(images: LorentzPoint, prompts: LorentzPoint, c: float) -> np.ndarray:
    """Index of the nearest prompt (by Lorentz distance) for every image."""
    return argmax_first(-np.asarray(L.pairwise_distance(images, prompts, c)))


def zero_shot_classify(params: ModelParams, images: np.ndarray, labels, class_prompts) -> ClassifyResult:
    """Predict the prompt with the smallest distance; ``labels`` index ``class_prompts``."""
    prompts = list(class_prompts)
    if len(prompts) < 2:
        raise EvalConfigError("zero-shot classification needs at least 2 class prompts")
    labels = np.asarray(labels)
    pred = classify_points(embed_images(params, images), embed_texts(params, prompts),
                           float(params.curv.data))
    correct = pred == labels
    per_class = {}
    for k, name in enumerate(prompts):
        sel = labels == k
        if sel.any():
            per_class[name] = float(correct[sel].mean())
    return ClassifyResult(float(correct.mean()) if len(labels) else 0.0, pred, per_class)


# -- retrieval -------------------------------------------------------------------------

def ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row of a square score matrix.

    A candidate outranks the true partner when its score is strictly
    higher, or equal with a lower column index.
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    own = scores[np.arange(n), np.arange(n)][:, None]
    higher = (scores > own).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    ties_before = ((scores == own) & (cols < np.arange(n)[:, None])).sum(axis=1)
    return higher + ties_before


def recall_from_ranks(ranks: np.ndarray, ks=(1, 5, 10)) -> dict[int, float]:
    return {k: float(np.mean(ranks < k)) if len(ranks) else 0.0 for k in ks}


def retrieval_scores(images: LorentzPoint, texts: LorentzPoint, c: float) -> np.ndarray:
    """``-d_L`` between every image (rows) and caption (columns)."""
    return -np.asarray(L.pairwise_distance(images, texts, c))


def retrieval_recall_points(images: LorentzPoint, texts: LorentzPoint, c: float,
                            ks=(1, 5, 10)) -> dict[str, dict[int, float]]:
    n_img, n_txt = np.shape(images.time)[0], np.shape(texts.time)[0]
    if n_img != n_txt:
        raise EvalConfigError(f"{n_img} images but {n_txt} captions")
    scores = retrieval_scores(images, texts, c)
    return {"image_to_text": recall_from_ranks(ranks_from_scores(scores), ks),
            "text_to_image": recall_from_ranks(ranks_from_scores(scores.T), ks)}


def retrieval_recall(params: ModelParams, images: np.ndarray, captions,
                     ks=(1, 5, 10)) -> dict[str, dict[int, float]]:
    """Recall@k in both directions for paired ``images[i]`` and ``captions[i]``."""
    return retrieval_recall_points(embed_images(params, images), embed_texts(params, captions),
                                   float(params.curv.data), ks)


def mean_recall_at_1(table: dict[str, dict[int, float]]) -> float:
    return 0.5 * (table["image_to_text"][1] + table["text_to_image"][1])


# -- traversal ---------------------------------------------------------------------------

def traversal_times(steps: int = TRAVERSAL_STEPS) -> np.ndarray:
    """``t = 0, 1/steps, ..., (steps-1)/steps``; the root itself is excluded."""
    return np.arange(steps) / steps


def traverse_point(image: LorentzPoint, pool: LorentzPoint, c: float,
                   steps: int = TRAVERSAL_STEPS, keep: int = TRAVERSAL_KEEP) -> list[int]:
    """Pool indices met while walking from one image point toward the root."""
    n = np.shape(image.space)[-1]
    root = L.origin(n, c)
    t = traversal_times(steps)
    path = L.geodesic_interpolate(
        LorentzPoint(np.broadcast_to(image.time, t.shape), np.broadcast_to(image.space, (steps, n))),
        LorentzPoint(np.broadcast_to(root.time, t.shape), np.broadcast_to(root.space, (steps, n))),
        t, c)
    best = argmax_first(np.asarray(L.pairwise_inner(path, pool)))
    order: list[int] = []
    for idx in best:
        if int(idx) not in order:
            order.append(int(idx))
    return order[:keep]


def geodesic_traversal(params: ModelParams, image: np.ndarray, caption_pool,
                       steps: int = TRAVERSAL_STEPS) -> list[str]:
    pool = list(caption_pool)
    if not pool:
        raise EvalConfigError("caption pool is empty")
    point = embed_images(params, np.asarray(image)[None])
    found = traverse_point(point[0], embed_texts(params, pool), float(params.curv.data), steps)
    return [pool[i] for i in found]


SPECIFIC, MID, GENERIC = 0, 1, 2


def caption_level(caption: str) -> int:
    """Ground-truth level of a caption string from the synthetic grammar."""
    if caption in GENERIC_POOL:
        return GENERIC
    if caption in MID_CAPTIONS.values():
        return MID
    return SPECIFIC


def traversal_follows_hierarchy(found: list[str]) -> bool:
    """True when the walk's caption levels run specific, then mid, then
    generic: all three present and never stepping back toward specific."""
    levels = [caption_level(c) for c in found]
    return levels == sorted(levels) and set(levels) == {SPECIFIC, MID, GENERIC}


def traversal_recovers_own(found: list[str], specific: str, mid: str) -> bool:
    """Stricter reading: the level order holds, the walk starts at the image's
    own specific caption and passes its own mid caption."""
    return traversal_follows_hierarchy(found) and found[0] == specific and mid in found


@dataclass
class TraversalReport:
    fraction_ordered: float
    fraction_own: float
    paths: list[list[str]]
    ordered: np.ndarray


def traversal_report(params: ModelParams, corpus: Corpus, steps: int = TRAVERSAL_STEPS) -> TraversalReport:
    """Walk every image of ``corpus`` toward the root over a pool holding all
    of the corpus' specific captions plus every mid and generic caption."""
    pool = list(dict.fromkeys(list(corpus.specific) + list(MID_CAPTIONS.values())
                              + list(GENERIC_POOL)))
    c = float(params.curv.data)
    pool_pts = embed_texts(params, pool)
    img_pts = embed_images(params, corpus.images)
    paths, ok, own = [], [], []
    for i in range(len(corpus)):
        found = [pool[j] for j in traverse_point(img_pts[i], pool_pts, c, steps)]
        paths.append(found)
        ok.append(traversal_follows_hierarchy(found))
        own.append(traversal_recovers_own(found, corpus.specific[i], corpus.mid[i]))
    ok = np.asarray(ok, dtype=bool)
    frac = lambda v: float(np.mean(v)) if len(v) else 0.0
    return TraversalReport(frac(ok), frac(own), paths, ok)


# -- hierarchy radii ------------------------------------------------------------------------

def hierarchy_radius_report(params: ModelParams, corpus: Corpus) -> dict[str, float]:
    """Mean space-part norm of the embeddings of each role."""
    def mean_norm(p: LorentzPoint) -> float:
        return float(np.linalg.norm(p.space, axis=-1).mean())

    return {
        "image": mean_norm(embed_images(params, corpus.images)),
        "specific": mean_norm(embed_texts(params, corpus.specific)),
        "mid": mean_norm(embed_texts(params, corpus.mid)),
        "generic": mean_norm(embed_texts(params, corpus.generic)),
    }


def hierarchy_ordered(radii: dict[str, float]) -> bool:
    return radii["generic"] < radii["mid"] < radii["specific"] < radii["image"]


# -- result files ------------------------------------------------------------------------------

def image_throughput(params, images: np.ndarray, ratio: float, repeats: int = 3,
                     seed: int = 0) -> float:
    """Images per second of the image tower forward pass (no tape)."""
    seq = patchify(images, params.config.patch_size)
    seq = random_mask(seq, ratio, seed) if ratio > 0 else seq
    encode_image(params, seq)  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        encode_image(params, seq)
        best = min(best, time.perf_counter() - t0)
    return len(images) / best


def write_result(path, task: str, metrics: dict, config_hash: str, checkpoint_path: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"task": task, "metrics": metrics, "config_hash": config_hash,
               "checkpoint_path": str(checkpoint_path)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
