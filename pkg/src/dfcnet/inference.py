"""Sliding-window, multi-scale and multi-checkpoint prediction.

A predictor is any object with ``predict_proba(images) -> (N, K, H/s, W/s)``,
an integer ``stride`` s, and an ``input_factor`` that input sizes must be a
multiple of.  Images are normalized float arrays of shape (3, H, W).
"""
import numpy as np

from .tensor import resize_bilinear


def window_origins(size, tile, overlap):
    """Window start positions along one axis; the last window is clamped to the edge."""
    if tile >= size:
        return [0]
    step = tile - overlap
    origins = list(range(0, size - tile + 1, step))
    if origins[-1] + tile < size:
        origins.append(size - tile)
    return origins


def _pad_to(image, h, w):
    ph, pw = h - image.shape[1], w - image.shape[2]
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")


def _round_up(v, f):
    return -(-v // f) * f


def predict_window(model, window):
    """Probabilities for one (3, h, w) window at full window resolution."""
    _, h, w = window.shape
    f = getattr(model, "input_factor", 1)
    ph, pw = _round_up(h, f), _round_up(w, f)
    probs = model.predict_proba(_pad_to(window, ph, pw)[None])[0]
    s = model.stride
    if s > 1:
        probs = resize_bilinear(probs, ph, pw)
    return probs[:, :h, :w]


def tiled_predict(model, image, tile, overlap=None):
    """Full-resolution class probabilities; overlapping windows are averaged."""
    if overlap is None:
        overlap = tile // 2
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap {overlap} must be in [0, tile={tile})")
    _, h, w = image.shape
    ys, xs = window_origins(h, tile, overlap), window_origins(w, tile, overlap)
    acc = None
    hits = np.zeros((h, w), dtype=np.float64)
    for y in ys:
        for x in xs:
            p = predict_window(model, image[:, y:y + tile, x:x + tile])
            if acc is None:
                acc = np.zeros((p.shape[0], h, w), dtype=np.float64)
            acc[:, y:y + p.shape[1], x:x + p.shape[2]] += p
            hits[y:y + p.shape[1], x:x + p.shape[2]] += 1
    return (acc / hits).astype(np.float32)


def multiscale_fuse(model, image, scales=(1.0,), tile=64, overlap=None):
    """Uniform average of per-scale probability maps, resized back to the base resolution."""
    scales = list(scales)
    if not scales or any(s <= 0 for s in scales):
        raise ValueError(f"scales must be non-empty and positive, got {scales}")
    _, h, w = image.shape
    acc = None
    for s in scales:
        sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        scaled = resize_bilinear(image, sh, sw) if (sh, sw) != (h, w) else image
        p = tiled_predict(model, scaled, tile, overlap)
        if p.shape[1:] != (h, w):
            p = resize_bilinear(p, h, w)
        acc = p.astype(np.float64) if acc is None else acc + p
    return (acc / len(scales)).astype(np.float32)


def ensemble_fuse(models, image, scales=(1.0,), tile=64, overlap=None):
    """Average multiscale_fuse outputs over models that share one spec hash."""
    models = list(models)
    if not models:
        raise ValueError("ensemble needs at least one model")
    hashes = {getattr(m, "spec_hash", None) for m in models}
    if len(hashes) > 1:
        raise ValueError(f"ensemble members have different model spec hashes: {sorted(map(str, hashes))}")
    acc = None
    for m in models:
        p = multiscale_fuse(m, image, scales, tile, overlap).astype(np.float64)
        acc = p if acc is None else acc + p
    return (acc / len(models)).astype(np.float32)
