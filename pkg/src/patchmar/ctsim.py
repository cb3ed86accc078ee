"""Desk-scale CT pipeline: parallel-beam projector, filtered backprojection,
metal-trace corruption, the per-view linear-interpolation baseline, procedural
phantom/dataset synthesis, and PSNR/SSIM metrics.

Corruption model: the clean sinogram is modified only inside the metal trace
(the forward projection of the metal mask) with a monotone concave
nonlinearity v -> v + severity * v^2 / (1 + v) plus noise proportional to
severity and the local value. Zero severity therefore reproduces the clean
reconstruction bit for bit, so each synthesized artifact image differs from
its clean partner only through this pipeline.
"""

import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .autodiff import ShapeError
from .tensorio import dump_array, load_array


@dataclass(frozen=True)
class ScanGeometry:
    n_views: int = 180
    n_detectors: int = 128
    detector_spacing: float = 0.75
    angular_range: float = math.pi

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError(f"need at least one view, got {self.n_views}")
        if self.n_detectors < 2:
            raise ValueError(f"need at least two detectors, got {self.n_detectors}")
        if self.detector_spacing <= 0:
            raise ValueError("detector spacing must be positive")
        if self.angular_range <= 0:
            raise ValueError("angular range must be positive")

    @property
    def angles(self):
        return np.arange(self.n_views) * (self.angular_range / self.n_views)

    @property
    def detector_offsets(self):
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0) \
            * self.detector_spacing


@dataclass
class Sinogram:
    data: np.ndarray
    metal_trace: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.metal_trace is None:
            self.metal_trace = np.zeros(self.data.shape, dtype=bool)
        self.metal_trace = np.asarray(self.metal_trace, dtype=bool)
        if self.metal_trace.shape != self.data.shape:
            raise ShapeError(
                f"metal trace shape {self.metal_trace.shape} != data {self.data.shape}")


@dataclass
class PhantomImage:
    pixels: np.ndarray
    metal_mask: np.ndarray = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.metal_mask is None:
            self.metal_mask = np.zeros(self.pixels.shape, dtype=bool)
        self.metal_mask = np.asarray(self.metal_mask, dtype=bool)
        if self.metal_mask.shape != self.pixels.shape:
            raise ShapeError("metal mask shape does not match pixels")


_RAY_STEP = 0.5  # pixels along each ray


def _line_integrals(img, geom):
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h != w:
        raise ShapeError(f"projector expects a square image, got {h}x{w}")
    c = (h - 1) / 2.0
    half = h / math.sqrt(2.0)
    n_samples = int(math.ceil(2 * half / _RAY_STEP)) + 1
    ts = np.linspace(-half, half, n_samples)
    offs = geom.detector_offsets
    sino = np.empty((geom.n_views, geom.n_detectors), dtype=np.float64)
    for vi, phi in enumerate(geom.angles):
        ux, uy = math.cos(phi), math.sin(phi)
        vx, vy = -math.sin(phi), math.cos(phi)
        xs = c + offs[:, None] * ux + ts[None, :] * vx
        ys = c + offs[:, None] * uy + ts[None, :] * vy
        vals = ndimage.map_coordinates(img, [ys.ravel(), xs.ravel()],
                                       order=1, mode="constant", cval=0.0)
        sino[vi] = vals.reshape(geom.n_detectors, n_samples).sum(axis=1)
    return sino * (ts[1] - ts[0])


def radon_forward(img, geom):
    """Parallel-beam line integrals; linear in the image.

    Accepts a PhantomImage (its metal mask is forward projected into the
    trace) or a plain array (empty trace).
    """
    if isinstance(img, PhantomImage):
        data = _line_integrals(img.pixels, geom)
        if img.metal_mask.any():
            trace = _line_integrals(img.metal_mask.astype(np.float64), geom) > 0.0
        else:
            trace = np.zeros(data.shape, dtype=bool)
        return Sinogram(data=data, metal_trace=trace)
    return Sinogram(data=_line_integrals(img, geom), metal_trace=None)


def _ramp_kernel(n, spacing):
    # discrete ramp filter kernel (band-limited |nu|), circularly wrapped
    h = np.zeros(n, dtype=np.float64)
    h[0] = 1.0 / (4.0 * spacing * spacing)
    ks = np.arange(1, n // 2 + 1)
    odd = ks[ks % 2 == 1]
    vals = -1.0 / (math.pi * odd * spacing) ** 2
    h[odd] = vals
    h[-odd] = vals
    return h


def fbp(sino, geom, image_size=None, clamp_negative=True):
    """Ramp-filtered backprojection onto an image_size x image_size grid.

    The reconstruction is linear in the sinogram before the final
    non-negativity clamp; pass clamp_negative=False for the raw values.
    """
    data = sino.data if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)
    if data.shape != (geom.n_views, geom.n_detectors):
        raise ShapeError(f"sinogram shape {data.shape} does not match geometry "
                         f"({geom.n_views}, {geom.n_detectors})")
    if image_size is None:
        image_size = int(math.floor(geom.n_detectors * geom.detector_spacing / math.sqrt(2.0)))

    npad = 1
    while npad < 2 * geom.n_detectors:
        npad *= 2
    kern = np.fft.rfft(_ramp_kernel(npad, geom.detector_spacing))
    padded = np.zeros((geom.n_views, npad), dtype=np.float64)
    padded[:, :geom.n_detectors] = data
    filtered = np.fft.irfft(np.fft.rfft(padded, axis=1) * kern[None, :], axis=1)
    filtered = filtered[:, :geom.n_detectors] * geom.detector_spacing

    c = (image_size - 1) / 2.0
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    xs = xs - c
    ys = ys - c
    det_idx = np.arange(geom.n_detectors, dtype=np.float64)
    recon = np.zeros((image_size, image_size), dtype=np.float64)
    half = (geom.n_detectors - 1) / 2.0
    for vi, phi in enumerate(geom.angles):
        s = (xs * math.cos(phi) + ys * math.sin(phi)) / geom.detector_spacing + half
        recon += np.interp(s.ravel(), det_idx, filtered[vi], left=0.0, right=0.0) \
            .reshape(image_size, image_size)
    recon *= geom.angular_range / geom.n_views
    if clamp_negative:
        np.maximum(recon, 0.0, out=recon)
    return recon


def corrupt_metal(sino, severity, rng=None, noise_scale=0.02):
    """Beam-hardening surrogate inside the metal trace; identity outside.

    Trace values get v + severity * v^2/(1+v) plus zero-mean noise with
    standard deviation severity * noise_scale * v.
    """
    if severity < 0:
        raise ValueError(f"severity must be non-negative, got {severity}")
    data = sino.data.copy()
    tr = sino.metal_trace
    if severity > 0 and tr.any():
        v = data[tr]
        bump = severity * v * v / (1.0 + np.abs(v))
        if rng is not None and noise_scale > 0:
            bump = bump + severity * noise_scale * np.abs(v) * rng.standard_normal(v.size)
        data[tr] = v + bump
    return Sinogram(data=data, metal_trace=tr.copy())


def li_correct(sino):
    """Replace trace detectors per view by linear interpolation from the
    nearest untraced neighbors; views fully inside the trace fall back to
    the average of the nearest correctable neighbor views, with a warning.
    Untraced bins are returned bit for bit unchanged."""
    data = sino.data.copy()
    tr = sino.metal_trace
    n_views, n_det = data.shape
    idx = np.arange(n_det)
    full = []
    for vi in range(n_views):
        row_tr = tr[vi]
        if not row_tr.any():
            continue
        if row_tr.all():
            full.append(vi)
            continue
        data[vi, row_tr] = np.interp(idx[row_tr], idx[~row_tr], data[vi, ~row_tr])
    if full:
        warnings.warn(f"{len(full)} view(s) fully inside the metal trace; "
                      f"using neighbor-view averages", RuntimeWarning)
        ok = np.setdiff1d(np.arange(n_views), np.asarray(full))
        if ok.size == 0:
            raise ValueError("every view lies fully inside the metal trace")
        for vi in full:
            below = ok[ok < vi]
            above = ok[ok > vi]
            picks = [p for p in (below[-1] if below.size else None,
                                 above[0] if above.size else None) if p is not None]
            data[vi] = np.mean([data[p] for p in picks], axis=0)
    return Sinogram(data=data, metal_trace=tr.copy())


# ---------------------------------------------------------------------------
# metrics

def psnr(a, b, peak):
    """10*log10(peak^2 / MSE); +inf when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"psnr peak must be positive, got {peak}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, data_range=None, k1=0.01, k2=0.03, window=8):
    """Mean structural similarity over all sliding window x window patches.

    Uniform window, population statistics, C1 = (k1*L)^2, C2 = (k2*L)^2
    with L = data_range (max minus min of both images when not given).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"ssim: image smaller than {window}x{window} window")
    if data_range is None:
        data_range = float(max(a.max(), b.max()) - min(a.min(), b.min()))
        if data_range == 0.0:
            data_range = 1.0
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def win_mean(x):
        view = np.lib.stride_tricks.sliding_window_view(x, (window, window))
        return view.mean(axis=(2, 3))

    mu_a = win_mean(a)
    mu_b = win_mean(b)
    var_a = win_mean(a * a) - mu_a * mu_a
    var_b = win_mean(b * b) - mu_b * mu_b
    cov = win_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# procedural phantoms

def _ellipse_mask(n, cy, cx, ry, rx, angle):
    ys, xs = np.mgrid[0:n, 0:n]
    ys = ys - cy
    xs = xs - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * xs + sa * ys
    v = -sa * xs + ca * ys
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def random_phantom(rng, n):
    """Soft-tissue background ellipse with random internal ellipses and bars."""
    img = np.zeros((n, n), dtype=np.float64)
    cy, cx = n / 2 + rng.uniform(-2, 2), n / 2 + rng.uniform(-2, 2)
    ry, rx = rng.uniform(0.33, 0.42) * n, rng.uniform(0.33, 0.42) * n
    body = _ellipse_mask(n, cy, cx, ry, rx, rng.uniform(0, math.pi))
    img[body] = rng.uniform(0.18, 0.25)
    for _ in range(int(rng.integers(2, 6))):
        ecy = cy + rng.uniform(-0.5, 0.5) * ry
        ecx = cx + rng.uniform(-0.5, 0.5) * rx
        er = rng.uniform(0.05, 0.22) * n
        m = _ellipse_mask(n, ecy, ecx, er, er * rng.uniform(0.5, 1.5),
                          rng.uniform(0, math.pi)) & body
        img[m] += rng.uniform(-0.12, 0.25)
    for _ in range(int(rng.integers(0, 3))):
        bcy = cy + rng.uniform(-0.4, 0.4) * ry
        bcx = cx + rng.uniform(-0.4, 0.4) * rx
        m = _ellipse_mask(n, bcy, bcx, rng.uniform(0.02, 0.05) * n,
                          rng.uniform(0.15, 0.3) * n, rng.uniform(0, math.pi)) & body
        img[m] += rng.uniform(0.05, 0.2)
    np.clip(img, 0.0, 0.7, out=img)
    return img, body


def random_metal_mask(rng, n, body):
    """1 to 3 small high-attenuation blobs inside the body region."""
    mask = np.zeros((n, n), dtype=bool)
    rows, cols = np.nonzero(body)
    k = int(rng.integers(1, 4))
    for _ in range(k):
        pick = int(rng.integers(rows.size))
        r = rng.uniform(1.5, 3.5)
        mask |= _ellipse_mask(n, rows[pick], cols[pick], r,
                              r * rng.uniform(0.7, 1.4), rng.uniform(0, math.pi))
    return mask & body


def smooth_phantom(rng, n):
    """Sum of random Gaussian bumps, scaled into [0, 1]."""
    ys, xs = np.mgrid[0:n, 0:n]
    img = np.zeros((n, n), dtype=np.float64)
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0.2, 0.8, 2) * n
        sig = rng.uniform(0.08, 0.25) * n
        img += rng.uniform(0.3, 1.0) * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2)
                                              / (2 * sig * sig))
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return img


# ---------------------------------------------------------------------------
# dataset synthesis

@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    severity: float = 0.2
    noise_scale: float = 0.02
    ratio: float = 0.15
    metal_attenuation: float = 4.0
    metal_threshold: float = 2.0
    amax: float = 1.0
    seed: int = 0
    test_pairs: int = 8


@dataclass
class SynthPair:
    index: int
    artifact: np.ndarray
    clean: np.ndarray
    metal_pixels: int


@dataclass
class DatasetBundle:
    train: list
    test: list
    artifact_pool: list
    clean_pool: list
    geom: ScanGeometry
    cfg: SynthConfig


def _make_pair(index, rng, geom, cfg):
    n = cfg.image_size
    clean_px, body = random_phantom(rng, n)
    mask = random_metal_mask(rng, n, body)
    phantom = clean_px.copy()
    phantom[mask] = cfg.metal_attenuation
    metal = PhantomImage(pixels=phantom, metal_mask=mask)

    sino_clean = radon_forward(clean_px, geom)
    trace = radon_forward(metal, geom).metal_trace
    sino = Sinogram(data=sino_clean.data, metal_trace=trace)
    corrupted = corrupt_metal(sino, cfg.severity, rng=rng, noise_scale=cfg.noise_scale)

    size = n
    clean_img = fbp(sino_clean, geom, image_size=size)
    artifact_img = fbp(corrupted, geom, image_size=size)
    return SynthPair(index=index,
                     artifact=artifact_img.astype(np.float32),
                     clean=clean_img.astype(np.float32),
                     metal_pixels=int(mask.sum()))


def synthesize_dataset(n_pairs, geom, cfg):
    """Paired pool plus disjoint unpaired pools at the configured ratio.

    The unpaired artifact pool takes the artifact images of the first
    round(ratio * n_pairs) training pairs; the clean pool takes the clean
    images of the remaining pairs, so provenance never overlaps.
    """
    if n_pairs < 1:
        raise ValueError(f"need at least one pair, got {n_pairs}")
    if not 0.0 < cfg.ratio < 1.0:
        raise ValueError(f"ratio must lie strictly between 0 and 1, got {cfg.ratio}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    train = [_make_pair(i, rng, geom, cfg) for i in range(n_pairs)]
    test = [_make_pair(n_pairs + i, rng, geom, cfg) for i in range(cfg.test_pairs)]
    n_art = int(round(cfg.ratio * n_pairs))
    n_art = min(max(n_art, 1), n_pairs - 1) if n_pairs > 1 else n_pairs
    artifact_pool = list(range(0, n_art))
    clean_pool = list(range(n_art, n_pairs))
    return DatasetBundle(train=train, test=test, artifact_pool=artifact_pool,
                         clean_pool=clean_pool, geom=geom, cfg=cfg)


def write_pgm(path, img, lo=None, hi=None):
    img = np.asarray(img, dtype=np.float64)
    lo = img.min() if lo is None else lo
    hi = img.max() if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    quant = np.clip((img - lo) / span * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(quant.tobytes())


def save_dataset(bundle, directory):
    os.makedirs(directory, exist_ok=True)
    cfg, geom = bundle.cfg, bundle.geom
    lines = [
        f"seed = {cfg.seed}",
        f"pairs = {len(bundle.train)}",
        f"test_pairs = {len(bundle.test)}",
        f"ratio = {cfg.ratio}",
        f"severity = {cfg.severity}",
        f"noise_scale = {cfg.noise_scale}",
        f"amax = {cfg.amax}",
        f"image_size = {cfg.image_size}",
        f"metal_attenuation = {cfg.metal_attenuation}",
        f"metal_threshold = {cfg.metal_threshold}",
        f"n_views = {geom.n_views}",
        f"n_detectors = {geom.n_detectors}",
        f"detector_spacing = {geom.detector_spacing}",
        f"angular_range = {geom.angular_range!r}",
        "artifact_pool = " + " ".join(str(i) for i in bundle.artifact_pool),
        "clean_pool = " + " ".join(str(i) for i in bundle.clean_pool),
    ]
    for split, pairs in (("train", bundle.train), ("test", bundle.test)):
        sub = os.path.join(directory, split)
        os.makedirs(sub, exist_ok=True)
        for p in pairs:
            stem = f"pair{p.index:04d}"
            dump_array(os.path.join(sub, stem + "_artifact.f32"), p.artifact)
            dump_array(os.path.join(sub, stem + "_clean.f32"), p.clean)
            write_pgm(os.path.join(sub, stem + "_artifact.pgm"), p.artifact, 0.0, cfg.amax)
            write_pgm(os.path.join(sub, stem + "_clean.pgm"), p.clean, 0.0, cfg.amax)
            lines.append(f"{split} {stem} metal_pixels = {p.metal_pixels}")
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(directory):
    manifest = os.path.join(directory, "manifest.txt")
    meta = {}
    pair_meta = {"train": {}, "test": {}}
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(" = ")
            if key.startswith("train ") or key.startswith("test "):
                split, stem, _ = key.split(" ", 2)
                pair_meta[split][stem] = int(value)
            else:
                meta[key] = value

    geom = ScanGeometry(n_views=int(meta["n_views"]),
                        n_detectors=int(meta["n_detectors"]),
                        detector_spacing=float(meta["detector_spacing"]),
                        angular_range=float(meta["angular_range"]))
    cfg = SynthConfig(image_size=int(meta["image_size"]),
                      severity=float(meta["severity"]),
                      noise_scale=float(meta["noise_scale"]),
                      ratio=float(meta["ratio"]),
                      metal_attenuation=float(meta["metal_attenuation"]),
                      metal_threshold=float(meta["metal_threshold"]),
                      amax=float(meta["amax"]),
                      seed=int(meta["seed"]),
                      test_pairs=int(meta["test_pairs"]))

    def read_split(split):
        pairs = []
        for stem in sorted(pair_meta[split]):
            index = int(stem[4:])
            sub = os.path.join(directory, split)
            pairs.append(SynthPair(
                index=index,
                artifact=load_array(os.path.join(sub, stem + "_artifact.f32")),
                clean=load_array(os.path.join(sub, stem + "_clean.f32")),
                metal_pixels=pair_meta[split][stem]))
        return pairs

    art_pool = [int(i) for i in meta["artifact_pool"].split()]
    clean_pool = [int(i) for i in meta["clean_pool"].split()]
    return DatasetBundle(train=read_split("train"), test=read_split("test"),
                         artifact_pool=art_pool, clean_pool=clean_pool,
                         geom=geom, cfg=cfg)


def normalize_image(img, amax):
    """Attenuation units -> [-1, 1] for the tanh-output networks."""
    return (2.0 * np.clip(np.asarray(img, dtype=np.float64) / amax, 0.0, 1.0) - 1.0) \
        .astype(np.float32)


def denormalize_image(img, amax):
    return ((np.asarray(img, dtype=np.float64) + 1.0) * 0.5 * amax).astype(np.float64)
