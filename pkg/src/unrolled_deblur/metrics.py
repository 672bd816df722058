"""Image and kernel quality metrics plus the evaluation harness.

PSNR uses peak 1.0 and returns +inf on an exact match. SSIM follows the
standard single-scale form: 11x11 gaussian window (sigma 1.5), K1 = 0.01,
K2 = 0.03, dynamic range 1, averaged over valid window positions only.
Kernel RMSE pads both kernels to a common support and searches circular
shifts exhaustively, because the estimate lives on a torus and its absolute
phase is unobservable. The same search aligns reconstructed images to their
references before the image metrics; the shift found is reported alongside.

Shift-search sums are computed with math.fsum, which is exact, so MSE ties
resolve identically regardless of how the inputs were rolled.
"""

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import signal

from . import imaging, kernelgen, training, unroll
from .errors import ImageTooSmall, ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

EVAL_FIELDS = ["record", "psnr_db", "isnr_db", "ssim",
               "kernel_rmse", "shift_dy", "shift_dx"]


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch("images %s vs %s" % (a.shape, b.shape))
    return a, b


def psnr(estimate, reference):
    """10 log10(1 / mse) with peak 1.0; +inf when the images match exactly."""
    estimate, reference = _check_pair(estimate, reference)
    mse = float(np.mean((estimate - reference) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def isnr(estimate, blurred, reference):
    """Improvement over the blurred input, in dB."""
    return psnr(estimate, reference) - psnr(blurred, reference)


def _gaussian_window():
    half = (SSIM_WINDOW - 1) / 2.0
    ax = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def ssim(estimate, reference):
    """Mean structural similarity over fully interior 11x11 windows."""
    estimate, reference = _check_pair(estimate, reference)
    if min(estimate.shape) < SSIM_WINDOW:
        raise ImageTooSmall("image %s smaller than %dx%d window"
                            % (estimate.shape, SSIM_WINDOW, SSIM_WINDOW))
    window = _gaussian_window()

    def filt(img):
        return signal.fftconvolve(img, window, mode="valid")

    mu1 = filt(estimate)
    mu2 = filt(reference)
    s11 = filt(estimate * estimate) - mu1 * mu1
    s22 = filt(reference * reference) - mu2 * mu2
    s12 = filt(estimate * reference) - mu1 * mu2
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def _mse_exact(a, b):
    diff = (a - b).ravel()
    return math.fsum(diff * diff) / diff.size


def align_shift(estimate, reference, max_shift):
    """Circular shift (dy, dx) of the estimate minimizing exact MSE.

    Candidates run over [-max_shift, max_shift]^2; ties break toward the
    smallest |dy| + |dx|, then lexicographically on (dy, dx).
    """
    estimate, reference = _check_pair(estimate, reference)
    candidates = sorted(
        ((dy, dx)
         for dy in range(-max_shift, max_shift + 1)
         for dx in range(-max_shift, max_shift + 1)),
        key=lambda s: (abs(s[0]) + abs(s[1]), s))
    best = None
    best_mse = math.inf
    for dy, dx in candidates:
        mse = _mse_exact(np.roll(estimate, (dy, dx), axis=(0, 1)), reference)
        if mse < best_mse:
            best_mse = mse
            best = (dy, dx)
    return best


def kernel_rmse(estimate, truth):
    """RMSE between kernels after centered padding and circular alignment."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    size = max(estimate.shape[0], truth.shape[0])

    def pad(k):
        if k.shape[0] == size:
            return k
        margin = (size - k.shape[0]) // 2
        out = np.zeros((size, size))
        out[margin:margin + k.shape[0], margin:margin + k.shape[0]] = k
        return out

    a = pad(estimate)
    b = pad(truth)
    dy, dx = align_shift(a, b, size // 2)
    return math.sqrt(_mse_exact(np.roll(a, (dy, dx), axis=(0, 1)), b))


@dataclass
class EvalRow:
    record: str
    psnr_db: float
    isnr_db: float
    ssim: float
    kernel_rmse: float
    shift_dy: int
    shift_dx: int


@dataclass
class EvalReport:
    rows: list
    mean: EvalRow


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def evaluate(manifest_path, checkpoint, out_csv, forward_fn=None, threads=1):
    """Score a model over every manifest record and write a CSV report.

    `checkpoint` is a checkpoint path or a ModelParams; `forward_fn`
    (blurred -> (kernel, x_hat)) overrides the model, which keeps the
    harness testable against an oracle. Reconstructions are aligned to the
    reference by circular shift before the image metrics; the blurred
    baseline inside ISNR is never shifted.
    """
    records = kernelgen.load_manifest(manifest_path)
    if forward_fn is None:
        if isinstance(checkpoint, (str, os.PathLike)):
            params = training.load_checkpoint(checkpoint).params
        else:
            params = checkpoint

        def forward_fn(blurred):
            kernel, _, x_hat, _ = unroll.forward(blurred, params)
            return kernel, x_hat

    def score(record):
        kernel, x_hat = forward_fn(record.blurred)
        max_shift = kernel.shape[0] // 2
        dy, dx = align_shift(x_hat, record.sharp, max_shift)
        aligned = np.roll(x_hat, (dy, dx), axis=(0, 1))
        return EvalRow(
            record=record.blurred_path,
            psnr_db=psnr(aligned, record.sharp),
            isnr_db=psnr(aligned, record.sharp) - psnr(record.blurred,
                                                       record.sharp),
            ssim=ssim(aligned, record.sharp),
            kernel_rmse=kernel_rmse(kernel, record.kernel),
            shift_dy=dy, shift_dx=dx)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(score, records))
    else:
        rows = [score(r) for r in records]

    n = len(rows)
    mean = EvalRow(
        record="MEAN",
        psnr_db=sum(r.psnr_db for r in rows) / n,
        isnr_db=sum(r.isnr_db for r in rows) / n,
        ssim=sum(r.ssim for r in rows) / n,
        kernel_rmse=sum(r.kernel_rmse for r in rows) / n,
        shift_dy=0, shift_dx=0)

    if out_csv is not None:
        with open(out_csv, "w", encoding="ascii", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(EVAL_FIELDS)
            for r in rows + [mean]:
                writer.writerow([r.record, _fmt(r.psnr_db), _fmt(r.isnr_db),
                                 _fmt(r.ssim), _fmt(r.kernel_rmse),
                                 r.shift_dy, r.shift_dx])
    return EvalReport(rows=rows, mean=mean)
