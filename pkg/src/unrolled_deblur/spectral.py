"""2-D DFT helpers and circular convolution on image-sized grids.

All frequency-domain work in this package happens on grids that match the
image exactly. A blur kernel is embedded onto the image grid with its center
at index (0, 0) and negative offsets wrapped to the opposite border, which
makes spatial circular convolution and per-frequency spectrum products
interchangeable.

Convention: the forward transform is unnormalized and the inverse carries
the 1/(H*W) factor (numpy's default).
"""

import numpy as np

from .errors import DimensionMismatch, EvenSize, ImaginaryResidue, KernelTooLarge

# fraction of total energy the discarded imaginary part may hold before
# ifft2 refuses; anything above this level is an upstream algebra bug,
# never legitimate data
IMAG_ENERGY_TOL = 1e-6


def fft2(plane):
    """Unnormalized forward 2-D DFT."""
    return np.fft.fft2(np.asarray(plane))


def ifft2(spectrum):
    """Inverse 2-D DFT (with the 1/(H*W) factor), returning the real part.

    Raises ImaginaryResidue when the discarded imaginary energy exceeds
    IMAG_ENERGY_TOL of the total energy.
    """
    out = np.fft.ifft2(np.asarray(spectrum, dtype=np.complex128))
    imag_energy = float(np.sum(out.imag * out.imag))
    total = float(np.sum(out.real * out.real)) + imag_energy
    if total > 0.0 and imag_energy > IMAG_ENERGY_TOL * total:
        raise ImaginaryResidue(
            "imaginary energy %.3e exceeds %g of total %.3e"
            % (imag_energy, IMAG_ENERGY_TOL, total))
    return out.real.copy()


def spectrum_combine(a, b, conjugate_a=False):
    """Elementwise product of two equally shaped spectra.

    With conjugate_a=True the first operand is conjugated, which is the
    correlation rather than convolution pairing.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch("spectra %s vs %s" % (a.shape, b.shape))
    return (np.conj(a) if conjugate_a else a) * b


def embed_kernel(kernel, height, width):
    """Place an odd square kernel on a (height, width) grid, center at (0, 0).

    Coefficients at negative offsets wrap to the opposite border, so
    circular convolution with the embedded plane acts exactly like the
    original kernel. Mass and nonnegativity are preserved verbatim.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionMismatch("kernel must be square, got %s" % (kernel.shape,))
    k = kernel.shape[0]
    if k % 2 == 0:
        raise EvenSize("kernel size %d is even" % k)
    if k > min(height, width):
        raise KernelTooLarge("kernel %d exceeds grid %dx%d" % (k, height, width))
    r = (k - 1) // 2
    plane = np.zeros((height, width))
    plane[:k, :k] = kernel
    return np.roll(plane, (-r, -r), axis=(0, 1))


def wrap_window(plane, size):
    """Extract the odd `size` window around the wrapped origin of a plane.

    Exact inverse of embed_kernel on its range.
    """
    plane = np.asarray(plane)
    h, w = plane.shape
    if size % 2 == 0:
        raise EvenSize("window size %d is even" % size)
    if size > min(h, w):
        raise KernelTooLarge("window %d exceeds grid %dx%d" % (size, h, w))
    r = (size - 1) // 2
    return np.roll(plane, (r, r), axis=(0, 1))[:size, :size].copy()


def circ_conv(a, b):
    """Circular convolution of two equally shaped real planes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch("planes %s vs %s" % (a.shape, b.shape))
    return ifft2(spectrum_combine(fft2(a), fft2(b)))
