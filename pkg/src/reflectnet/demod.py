"""Symbol recovery from an I/Q capture.

Pipeline: resample to an integer number of samples per symbol, locate the two
constellation hotspots with a Gaussian KDE, turn each sample into a
normalized distance in [0, 1], find the symbol boundary offset, then decide
one symbol per window either by median-threshold voting or with a linear
classifier trained on a known IDLE capture.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.exceptions import ConvergenceWarning
from sklearn.svm import LinearSVC

from .backscatter_sim import IqCapture
from .phy_codec import sidecar_path


class DegenerateConstellation(ValueError):
    """Fewer than two density peaks in the constellation."""


class AlignmentError(ValueError):
    pass


@dataclass
class Hotspots:
    h0: complex
    h1: complex
    densities: tuple[float, float]
    method: str = "kde"

    def __post_init__(self):
        if self.h0 == self.h1:
            raise DegenerateConstellation("hotspots coincide")


@dataclass
class LabeledSamples:
    d: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if not np.all(np.isfinite(self.d)) or np.any(self.d < 0) or np.any(self.d > 1):
            raise ValueError("normalized distances must be finite and within [0, 1]")


@dataclass
class ConfidentSymbols:
    symbols: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.uint8)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.symbols.shape != self.confidence.shape:
            raise ValueError("symbols and confidence lengths differ")
        if not np.all(np.isfinite(self.confidence)):
            raise ValueError("non-finite confidence")

    def __len__(self):
        return len(self.symbols)


# --------------------------------------------------------------------------
# resampling


def resample_integer_sps(capture: IqCapture) -> tuple[IqCapture, int]:
    """Linear interpolation onto the largest integer sps not above the native ratio."""
    native = capture.samples_per_symbol
    target = int(math.floor(native + 1e-9))
    if target < 2:
        raise ValueError(f"capture has {native:.3f} samples per symbol, need >= 2")
    if abs(native - target) < 1e-9:
        return capture, target
    ratio = native / target
    n_new = int(math.floor((len(capture) - 1) / ratio)) + 1
    pos = np.arange(n_new) * ratio
    grid = np.arange(len(capture))
    x = capture.samples
    y = np.interp(pos, grid, x.real) + 1j * np.interp(pos, grid, x.imag)
    meta = dict(capture.meta, resampled_from_sps=native)
    meta["sample_rate_hz"] = target * capture.meta.get("symbols_per_second", capture.sample_rate_hz / native)
    if "symbol_offset_samples" in meta:
        meta["symbol_offset_samples"] = meta["symbol_offset_samples"] / ratio
    return IqCapture(y, meta["sample_rate_hz"], meta), target


# --------------------------------------------------------------------------
# hotspots


def _stride_subsample(x: np.ndarray, max_points: int) -> np.ndarray:
    if len(x) <= max_points:
        return x
    return x[:: int(math.ceil(len(x) / max_points))]


def _mean_shift(pts: np.ndarray, start: np.ndarray, bw: np.ndarray, iters: int = 100) -> tuple[np.ndarray, float]:
    c = start.astype(np.float64)
    for _ in range(iters):
        w = np.exp(-0.5 * np.sum(((pts - c) / bw) ** 2, axis=1))
        tot = w.sum()
        if tot == 0:
            break
        nc = w @ pts / tot
        done = np.all(np.abs(nc - c) <= 1e-12 * (1 + np.abs(c)))
        c = nc
        if done:
            break
    w = np.exp(-0.5 * np.sum(((pts - c) / bw) ** 2, axis=1))
    density = float(w.sum() / (len(pts) * 2 * np.pi * bw[0] * bw[1]))
    return c, density


def _has_saddle(dens: np.ndarray, a: np.ndarray, b: np.ndarray, dip: float) -> bool:
    """True when the density between two grid peaks sinks below ``dip`` times the lower peak."""
    n = int(np.max(np.abs(b - a))) * 2 + 1
    t = np.linspace(0, 1, n)
    ix = np.rint(a[0] + t * (b[0] - a[0])).astype(int)
    iy = np.rint(a[1] + t * (b[1] - a[1])).astype(int)
    path = dens[ix, iy]
    return path.min() < dip * min(path[0], path[-1])


def find_hotspots(capture, grid: int = 256, bandwidth: float | tuple | None = None,
                  max_points: int = 200_000, dip: float = 0.9, min_ratio: float = 0.1,
                  min_axis_cos: float = 0.8) -> Hotspots:
    """Two highest local maxima of a Gaussian KDE of the constellation.

    The KDE is binned on a ``grid x grid`` lattice spanning +-3 standard
    deviations around the mean; peaks are then refined by mean shift on the
    samples themselves.  ``bandwidth`` defaults to Silverman's rule per axis.
    A second peak only counts if the density between it and the first drops
    below ``dip`` times the lower of the two, and peaks under ``min_ratio``
    of the highest are ignored; bumps on a flat top or in a tail do not count.
    When the scatter is clearly elongated, the line through the hotspots must
    also lie within ``acos(min_axis_cos)`` of its long axis.
    """
    x = capture.samples if isinstance(capture, IqCapture) else np.asarray(capture, dtype=np.complex128)
    if len(x) < 1000:
        raise ValueError("need at least 1000 samples for hotspot detection")
    x = _stride_subsample(x, max_points)
    pts = np.column_stack([x.real, x.imag])
    mu = pts.mean(axis=0)
    sd = pts.std(axis=0)
    if sd.max() == 0:
        raise DegenerateConstellation("all samples identical")
    sd = np.maximum(sd, 1e-3 * sd.max())
    n = len(pts)
    if bandwidth is None:
        bw = sd * n ** (-1 / 6)
    else:
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (2,)).copy()
    lo, hi = mu - 3 * sd, mu + 3 * sd
    hist, ex, ey = np.histogram2d(pts[:, 0], pts[:, 1], bins=grid, range=[[lo[0], hi[0]], [lo[1], hi[1]]])
    cell = np.array([ex[1] - ex[0], ey[1] - ey[0]])
    dens = ndimage.gaussian_filter(hist, sigma=bw / cell, mode="constant", truncate=4.0)

    is_peak = (dens == ndimage.maximum_filter(dens, size=3, mode="constant")) & (dens > min_ratio * dens.max())
    ix, iy = np.nonzero(is_peak)
    order = np.argsort(-dens[ix, iy], kind="stable")
    peaks = [(ix[i], iy[i]) for i in order]
    if not peaks:
        raise DegenerateConstellation("no density peak found")
    first = np.array(peaks[0])
    second = None
    for p in peaks[1:]:
        p = np.array(p)
        if np.max(np.abs(p - first)) > 2 and _has_saddle(dens, first, p, dip):
            second = p
            break
    if second is None:
        raise DegenerateConstellation("constellation has a single resolvable density peak")

    ms_pts = pts[:: max(1, len(pts) // 50_000)]
    centers = []
    for p in (first, second):
        start = np.array([ex[p[0]] + cell[0] / 2, ey[p[1]] + cell[1] / 2])
        centers.append(_mean_shift(ms_pts, start, bw))
    (c0, d0), (c1, d1) = centers
    if np.allclose(c0, c1, rtol=0, atol=1e-3 * float(np.max(bw))):
        raise DegenerateConstellation("peaks merged after refinement")
    ev, evec = np.linalg.eigh(np.cov((pts - mu).T))
    if ev[1] > 1.05 * ev[0]:
        sep = (c1 - c0) / np.linalg.norm(c1 - c0)
        if abs(sep @ evec[:, 1]) < min_axis_cos:
            raise DegenerateConstellation("hotspot pair is not aligned with the constellation's long axis")
    if d1 > d0:
        (c0, d0), (c1, d1) = (c1, d1), (c0, d0)
    return Hotspots(complex(*c0), complex(*c1), (d0, d1))


def two_means_hotspots(capture, max_points: int = 200_000, iters: int = 50) -> Hotspots:
    """Fallback for a merged constellation: 2-means along the axis of largest variance.

    Noise is circular, so the extra variance of a two-state signal lies along
    the line through both states even when the KDE shows one blob.
    """
    x = capture.samples if isinstance(capture, IqCapture) else np.asarray(capture, dtype=np.complex128)
    x = _stride_subsample(x, max_points)
    pts = np.column_stack([x.real, x.imag])
    z = pts - pts.mean(axis=0)
    w, v = np.linalg.eigh(np.cov(z.T))
    proj = z @ v[:, np.argmax(w)]
    lo, hi = np.percentile(proj, [25, 75])
    if hi <= lo:
        raise DegenerateConstellation("no spread along the principal axis")
    for _ in range(iters):
        side = np.abs(proj - hi) < np.abs(proj - lo)
        nlo, nhi = proj[~side].mean(), proj[side].mean()
        if nlo == lo and nhi == hi:
            break
        lo, hi = nlo, nhi
    c0, c1 = pts[~side].mean(axis=0), pts[side].mean(axis=0)
    n0, n1 = int((~side).sum()), int(side.sum())
    if n1 > n0:
        (c0, n0), (c1, n1) = (c1, n1), (c0, n0)
    return Hotspots(complex(*c0), complex(*c1), (n0 / len(pts), n1 / len(pts)), "two-means")


def label_samples(capture, h: Hotspots) -> LabeledSamples:
    """Normalized distance: 0 on ``h0``, 1 on ``h1``."""
    x = capture.samples if isinstance(capture, IqCapture) else np.asarray(capture, dtype=np.complex128)
    a = np.abs(x - h.h0)
    b = np.abs(x - h.h1)
    rate = capture.sample_rate_hz if isinstance(capture, IqCapture) else 1.0
    return LabeledSamples(a / (a + b), rate)


# --------------------------------------------------------------------------
# alignment and median-threshold symbols


def lower_median(d: np.ndarray) -> float:
    d = np.asarray(d)
    k = (len(d) - 1) // 2
    return float(np.partition(d, k)[k])


def window_matrix(d: np.ndarray, offset: int, sps: int, n_windows: int | None = None) -> np.ndarray:
    d = np.asarray(d)
    avail = (len(d) - offset) // sps
    n = avail if n_windows is None else min(n_windows, avail)
    return d[offset : offset + n * sps].reshape(n, sps)


def offset_coherence(ls: LabeledSamples, sps: int, threshold: float | None = None) -> np.ndarray:
    """Mean |sum of +-1 labels| per window, for every offset in [0, sps)."""
    thr = lower_median(ls.d) if threshold is None else threshold
    pm = np.where(ls.d > thr, 1.0, -1.0)
    n_win = (len(pm) - (sps - 1)) // sps
    return np.array([np.abs(window_matrix(pm, o, sps, n_win).sum(axis=1)).mean() for o in range(sps)])


def find_symbol_offset(ls: LabeledSamples, sps: int, threshold: float | None = None) -> int:
    if sps < 2:
        raise ValueError("sps must be >= 2")
    if len(ls.d) < 100 * sps:
        raise ValueError("need at least 100 symbols worth of samples")
    thr = lower_median(ls.d) if threshold is None else threshold
    if np.all(ls.d > thr) or not np.any(ls.d > thr):
        raise AlignmentError("labels are constant; symbol alignment undefined")
    coh = offset_coherence(ls, sps, thr)
    return int(np.argmax(coh))  # first maximum: smallest offset wins ties


def median_confidence(win: np.ndarray, threshold: float, scale: float | None = None):
    """Per-window majority vote and confidence for a ``(n, sps)`` distance matrix.

    confidence = vote margin |2f - 1| times the mean distance from the
    threshold on the winning side, the latter normalized so the 95th
    percentile over windows maps to 1.  Returns (symbols, confidence, scale).
    """
    over = win > threshold
    f1 = over.mean(axis=1)
    excess = (win - threshold).mean(axis=1)
    sym = np.where(f1 == 0.5, excess > 0, f1 > 0.5)
    vote = np.abs(2 * f1 - 1)
    if scale is None:
        scale = float(np.percentile(np.abs(excess), 95)) if len(excess) else 1.0
        if scale <= 0:
            scale = 1.0
    dist = np.clip(np.where(sym, excess, -excess) / scale, 0.0, 1.0)
    return sym.astype(np.uint8), vote * dist, scale


def extract_symbols_median(ls: LabeledSamples, offset: int, sps: int,
                           threshold: float | None = None) -> ConfidentSymbols:
    thr = lower_median(ls.d) if threshold is None else threshold
    sym, conf, _ = median_confidence(window_matrix(ls.d, offset, sps), thr)
    return ConfidentSymbols(sym, conf)


# --------------------------------------------------------------------------
# linear classifier


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    scale: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def n_features(self) -> int:
        return len(self.weights)

    @property
    def sps(self) -> int:
        return int(self.meta.get("sps", self.n_features))

    def decision(self, windows) -> np.ndarray:
        windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
        if windows.shape[1] != self.n_features:
            raise ValueError(f"window length {windows.shape[1]} does not match model ({self.n_features})")
        return windows @ self.weights + self.bias


def sample_features(samples: np.ndarray, h: Hotspots, offset: int, sps: int,
                    n_windows: int | None = None) -> np.ndarray:
    """Per-window classifier input: every sample's position along the hotspot axis.

    Samples are shifted by the hotspot midpoint and divided by ``h1 - h0``; the
    real part puts ``h0`` at -0.5 and ``h1`` at +0.5.  Unlike the clipped
    distance ``d`` this stays linear in the sample, so a weighted sum over the
    window behaves like a matched filter.
    """
    z = (np.asarray(samples) - (h.h0 + h.h1) / 2) / (h.h1 - h.h0)
    return window_matrix(z.real, offset, sps, n_windows)


def train_classifier(windows, labels, c: float = 1.0, max_iter: int = 50_000,
                     tol: float = 1e-4) -> LinearModel:
    """Hinge-loss, L2-regularized linear separator on per-sample features."""
    X = np.asarray(windows, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("windows must be (n, sps) with one label per window")
    if len(np.unique(y)) < 2:
        raise ValueError("training set contains a single class")
    svc = LinearSVC(C=c, loss="hinge", dual=True, max_iter=max_iter, tol=tol, random_state=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        svc.fit(X, y)
    w = svc.coef_.ravel().copy()
    b = float(svc.intercept_[0])
    if not np.any(w):
        raise ValueError("training produced an all-zero weight vector")
    dec = X @ w + b
    scale = float(np.percentile(np.abs(dec), 95)) or 1.0
    return LinearModel(w, b, scale, {"c": c, "n_train": int(len(y))})


def classify(model: LinearModel, windows) -> ConfidentSymbols:
    dec = model.decision(windows)
    return ConfidentSymbols((dec > 0).astype(np.uint8), np.clip(np.abs(dec) / model.scale, 0.0, 1.0))


def save_model(path, model: LinearModel) -> None:
    obj = {"weights": model.weights.tolist(), "bias": model.bias, "scale": model.scale,
           "n_features": model.n_features, "trained_on": model.meta}
    Path(path).write_text(json.dumps(obj, indent=2))


def load_model(path) -> LinearModel:
    obj = json.loads(Path(path).read_text())
    model = LinearModel(obj["weights"], float(obj["bias"]), float(obj["scale"]), obj.get("trained_on", {}))
    if "n_features" in obj and obj["n_features"] != model.n_features:
        raise ValueError(f"{path}: n_features does not match weight count")
    return model


_RECORD = np.dtype([("symbol", "u1"), ("confidence", "<f4")])


def write_confident_symbols(path, cs: ConfidentSymbols, meta: dict | None = None) -> None:
    rec = np.empty(len(cs), dtype=_RECORD)
    rec["symbol"] = cs.symbols
    rec["confidence"] = cs.confidence
    Path(path).write_bytes(rec.tobytes())
    sidecar_path(path).write_text(json.dumps({"record": "u8 symbol, f32le confidence", **(meta or {})}, indent=2))


def read_confident_symbols(path) -> ConfidentSymbols:
    rec = np.frombuffer(Path(path).read_bytes(), dtype=_RECORD)
    return ConfidentSymbols(rec["symbol"].copy(), rec["confidence"].astype(np.float64))


# --------------------------------------------------------------------------
# convenience front end


@dataclass
class DemodResult:
    symbols: ConfidentSymbols
    hotspots: Hotspots
    labeled: LabeledSamples
    offset: int
    sps: int
    threshold: float
    first_symbol: int | None  # simulator symbol index of window 0, when known
    samples: np.ndarray        # resampled capture

    def features(self) -> np.ndarray:
        return sample_features(self.samples, self.hotspots, self.offset, self.sps)


def _consistent(kde: Hotspots, ref: Hotspots, min_sep: float = 0.5, min_cos: float = 0.8) -> bool:
    """KDE pair roughly as far apart as, and parallel to, the 2-means pair."""
    dk, dr = kde.h1 - kde.h0, ref.h1 - ref.h0
    cos = abs((dk * dr.conjugate()).real) / (abs(dk) * abs(dr))
    return abs(dk) >= min_sep * abs(dr) and cos >= min_cos


def estimate_hotspots(cap: IqCapture, bandwidth_scales=(1.0, 0.5, 0.25), fallback: bool = True) -> Hotspots:
    """KDE hotspots, shrinking the bandwidth along ``bandwidth_scales`` if it
    smooths the two clusters into one; then, unless ``fallback`` is off, the
    principal-axis 2-means estimate.

    With ``fallback`` the 2-means pair also vets a KDE result: once noise
    merges the two clouds the KDE peaks are bumps on a flat top, much closer
    together than the 2-means centroids or off their axis, and 2-means wins.
    """
    err = None
    for s in bandwidth_scales:
        try:
            bw = None
            if s != 1.0:
                pts = _stride_subsample(cap.samples, 200_000)
                sd = np.array([pts.real.std(), pts.imag.std()])
                bw = s * np.maximum(sd, 1e-3 * sd.max()) * len(pts) ** (-1 / 6)
            h = find_hotspots(cap, bandwidth=bw)
        except DegenerateConstellation as exc:
            err = exc
            continue
        if not fallback:
            return h
        try:
            ref = two_means_hotspots(cap)
        except DegenerateConstellation:
            return h
        return h if _consistent(h, ref) else ref
    if not fallback:
        raise err
    return two_means_hotspots(cap)


def model_constellation(model: LinearModel) -> tuple[Hotspots, float] | None:
    """Hotspots and threshold a model was trained with, if it carries them."""
    m = model.meta
    if "hotspots" not in m or "threshold" not in m:
        return None
    (a, b), (c, d) = m["hotspots"]
    return Hotspots(complex(a, b), complex(c, d), (1.0, 1.0), "model"), float(m["threshold"])


def demodulate(capture: IqCapture, model: LinearModel | None = None,
               bandwidth_scales=(1.0, 0.5, 0.25), fallback: bool = True) -> DemodResult:
    """Capture to confident symbols.  Uses ``model`` when given, else median voting.

    A model trained on this channel brings its own hotspots and threshold so
    its features mean the same thing as during training; otherwise they are
    estimated from the capture.  A model without them cannot be placed in a
    capture's frame and is rejected.
    """
    cap, sps = resample_integer_sps(capture)
    known = model_constellation(model) if model is not None else None
    if model is not None and known is None:
        raise ValueError("model carries no hotspots/threshold; train it with train_from_idle")
    if known is not None:
        hs, thr = known
        ls = label_samples(cap, hs)
    else:
        hs = estimate_hotspots(cap, bandwidth_scales, fallback)
        ls = label_samples(cap, hs)
        thr = lower_median(ls.d)
    off = find_symbol_offset(ls, sps, thr)
    if model is not None:
        if model.sps != sps:
            raise ValueError(f"model expects {model.sps} samples per symbol, capture has {sps}")
        cs = classify(model, sample_features(cap.samples, hs, off, sps))
    else:
        cs = extract_symbols_median(ls, off, sps, thr)
    first = None
    if "symbol_offset_samples" in cap.meta:
        first = int(round((off - cap.meta["symbol_offset_samples"]) / sps))
    return DemodResult(cs, hs, ls, off, sps, thr, first, cap.samples)
