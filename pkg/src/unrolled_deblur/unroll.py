"""Unrolled half-quadratic splitting solver for blind deconvolution.

The observation model is y = k * x + n with circular convolution. Each of
the L layers refines C filtered copies of the blurred image through three
closed-form frequency-domain updates:

  feature   g_i <- F^-1{ (b_i conj(K) Y_i + lam_i Z_i) / (b_i |K|^2 + lam_i) }
  sparsify  z_i <- soft_threshold(g_i, b_i)
  kernel    k   <- project( F^-1{ sum_i conj(Z_i) Y_i / (sum_i |Z_i|^2 + eps) } )

where Y_i is the spectrum of f_i * y for a per-layer filter bank f, and
project clamps to nonnegative and renormalizes to unit mass. The weights
b_i, lam_i (the penalty reparametrized so lam_i = 0 is well defined), the
filter mixing weights, and the reconstruction weights eta_i are trainable;
eps is fixed.

Filter banks grow by cascading 3x3 generations: the last layer uses C raw
3x3 filters and every earlier layer mixes the following layer's bank
through full convolution, adding two pixels of support per step, so layer 1
sees kernels up to (2L+1) pixels wide.

The final estimate combines the data term with the learned feature planes:

  x = F^-1{ (conj(K) Y + sum_i eta_i conj(F_i) G_i)
            / (|K|^2 + sum_i eta_i |F_i|^2) }

using the last layer's 3x3 bank. All updates are written against the
autodiff primitives, so the same code runs plain (inference) or recorded on
a tape (training).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import imaging, spectral
from .errors import DimensionMismatch, SingularDenominator

# smallest magnitude a frequency-domain denominator may take; anything
# below raises instead of producing Inf/NaN
DENOM_FLOOR = 1e-15

PREWITT_X = np.array([[-1.0, 0.0, 1.0],
                      [-1.0, 0.0, 1.0],
                      [-1.0, 0.0, 1.0]])
PREWITT_Y = PREWITT_X.T.copy()


@dataclass
class ModelParams:
    """Everything the solver needs for a forward pass.

    w_top holds the last layer's C raw 3x3 filters, w_mix the (L-1, C, C)
    grid of 3x3 mixing filters for the cascade. Fixed-filter variants (the
    classical preset) set fixed_banks instead and leave the weights None.
    """

    b: np.ndarray                 # (L, C) data weights, >= 0
    lam: np.ndarray               # (L, C) prior weights, >= 0
    eta: np.ndarray               # (C,) reconstruction weights, >= 0
    w_top: np.ndarray | None = None   # (C, 3, 3)
    w_mix: np.ndarray | None = None   # (L-1, C, C, 3, 3)
    eps: float = 1.0
    kernel_support: int = 31
    fixed_banks: list | None = None   # per-layer list of C filters

    @property
    def layers(self):
        return self.b.shape[0]

    @property
    def channels(self):
        return self.b.shape[1]

    def validate(self):
        L, C = self.b.shape
        if self.lam.shape != (L, C) or self.eta.shape != (C,):
            raise DimensionMismatch("b %s, lam %s, eta %s disagree"
                                    % (self.b.shape, self.lam.shape, self.eta.shape))
        if self.fixed_banks is None:
            if self.w_top is None or self.w_top.shape != (C, 3, 3):
                raise DimensionMismatch("w_top must be (C, 3, 3)")
            expect = (L - 1, C, C, 3, 3)
            if L > 1 and (self.w_mix is None or self.w_mix.shape != expect):
                raise DimensionMismatch("w_mix must be %s" % (expect,))
        else:
            if len(self.fixed_banks) != L:
                raise DimensionMismatch("fixed_banks has %d layers, expected %d"
                                        % (len(self.fixed_banks), L))
        if np.any(self.b < 0) or np.any(self.lam < 0) or np.any(self.eta < 0):
            raise ValueError("b, lam, eta must be nonnegative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.kernel_support % 2 == 0:
            raise ValueError("kernel support must be odd")
        return self


@dataclass
class GradientSet:
    """Gradients matching the trainable arrays of ModelParams."""

    w_top: np.ndarray
    w_mix: np.ndarray
    b: np.ndarray
    lam: np.ndarray
    eta: np.ndarray

    def arrays(self):
        return {"w_top": self.w_top, "w_mix": self.w_mix,
                "b": self.b, "lam": self.lam, "eta": self.eta}


@dataclass
class ForwardState:
    """Everything a completed forward pass leaves behind.

    kernel_plane / x_hat / g hold tape Vars when the pass was recorded and
    plain arrays otherwise; kernel_planes collects the post-projection
    kernel values per layer for invariant checks.
    """

    x_hat: object
    kernel_plane: object
    g: list
    kernel_planes: list
    tape: object = None
    param_vars: dict | None = None
    kink_signature: bytes | None = None


def tv_prewitt_params(layers=30, kernel_support=31):
    """Classical total-variation mode: fixed Prewitt pair, hand schedule.

    One layer's worth of parameters reused L times with a geometric
    continuation: b_l = 2 * 0.9^l and lam_l = 2e-3 * 0.9^l for l = 1..L,
    eps = 1, eta = 20 per channel.
    """
    ll = np.arange(1, layers + 1, dtype=np.float64)
    sched = 0.9 ** ll
    b = np.repeat((2.0 * sched)[:, None], 2, axis=1)
    lam = np.repeat((2e-3 * sched)[:, None], 2, axis=1)
    eta = np.array([20.0, 20.0])
    banks = [[PREWITT_X, PREWITT_Y] for _ in range(layers)]
    return ModelParams(b=b, lam=lam, eta=eta, eps=1.0,
                       kernel_support=kernel_support, fixed_banks=banks)


def build_filters(w_top, w_mix):
    """Compose the per-layer filter banks from 3x3 generations.

    w_top is a sequence of C filters for the last layer; w_mix is a
    sequence of L-1 CxC filter grids, ordered from layer 1 to layer L-1.
    Returns banks[l] for l = 0..L-1 where banks[-1] is w_top itself and
    banks[l][i] = sum_j w_mix[l][i][j] (*) banks[l+1][j] with full
    zero-padded convolution. Accepts arrays or tape Vars.
    """
    banks = [list(w_top)]
    for mix in reversed(list(w_mix)):
        above = banks[0]
        bank = []
        for row in mix:
            acc = ad.conv_full(row[0], above[0])
            for j in range(1, len(above)):
                acc = ad.add(acc, ad.conv_full(row[j], above[j]))
            bank.append(acc)
        banks.insert(0, bank)
    return banks


def apply_filter_bank(image, bank):
    """Circularly convolve an image with each filter of a bank."""
    h, w = np.shape(ad.value(image))
    out = []
    for f in bank:
        plane = ad.embed_plane(f, h, w)
        out.append(ad.ifft2(ad.mul(ad.fft2(plane), ad.fft2(image))))
    return out


def g_update(y_spec, z, k_spec, b, lam, z_spec=None):
    """Closed-form feature update in the frequency domain.

    Minimizes (b/2)|y_i - k * g|^2 + (lam/2)|g - z|^2 per frequency. The
    parametrization keeps lam = 0 well defined (pure data term) as long as
    the denominator b |K|^2 + lam stays above DENOM_FLOOR.
    """
    if z_spec is None:
        z_spec = ad.fft2(z)
    num = ad.add(ad.mul(b, ad.mul(ad.conj(k_spec), y_spec)),
                 ad.mul(lam, z_spec))
    den = ad.add(ad.mul(b, ad.abs2(k_spec)), lam)
    if float(np.min(ad.value(den))) < DENOM_FLOOR:
        raise SingularDenominator(
            "feature update denominator floor %.3e" % float(np.min(ad.value(den))))
    return ad.ifft2(ad.div(num, den))


def z_update(g, b):
    """Sparsifying shrinkage of a feature plane."""
    return ad.soft_threshold(g, b)


def k_update(z_specs, y_specs, eps):
    """Least-squares kernel plane from all channels, ridge eps > 0."""
    num = ad.mul(ad.conj(z_specs[0]), y_specs[0])
    den = ad.abs2(z_specs[0])
    for zs, ys in zip(z_specs[1:], y_specs[1:]):
        num = ad.add(num, ad.mul(ad.conj(zs), ys))
        den = ad.add(den, ad.abs2(zs))
    return ad.ifft2(ad.div(num, ad.add(den, eps)))


def k_project(plane):
    """Clamp to nonnegative and renormalize to unit mass.

    An all-zero clamped plane degrades to the impulse at the origin.
    """
    return ad.l1_normalize(ad.relu(plane))


def reconstruct(y, k_plane, g, bank, eta, y_spec=None, f_specs=None):
    """Final image estimate from the kernel plane and feature planes."""
    h, w = np.shape(ad.value(y))
    if y_spec is None:
        y_spec = ad.fft2(y)
    k_spec = ad.fft2(k_plane)
    num = ad.mul(ad.conj(k_spec), y_spec)
    den = ad.abs2(k_spec)
    for i, (gi, fi) in enumerate(zip(g, bank)):
        fs = f_specs[i] if f_specs is not None else ad.fft2(ad.embed_plane(fi, h, w))
        gs = ad.fft2(gi)
        num = ad.add(num, ad.mul(eta[i], ad.mul(ad.conj(fs), gs)))
        den = ad.add(den, ad.mul(eta[i], ad.abs2(fs)))
    if float(np.min(ad.value(den))) < DENOM_FLOOR:
        raise SingularDenominator(
            "reconstruction denominator floor %.3e" % float(np.min(ad.value(den))))
    return ad.ifft2(ad.div(num, den))


def _leaf_params(params, tape):
    """Wrap every trainable scalar/filter in its own tape leaf."""
    L, C = params.b.shape
    pv = {"b": [[ad.leaf(tape, params.b[l, i]) for i in range(C)] for l in range(L)],
          "lam": [[ad.leaf(tape, params.lam[l, i]) for i in range(C)] for l in range(L)],
          "eta": [ad.leaf(tape, params.eta[i]) for i in range(C)]}
    if params.fixed_banks is None:
        pv["w_top"] = [ad.leaf(tape, params.w_top[i]) for i in range(C)]
        pv["w_mix"] = [[[ad.leaf(tape, params.w_mix[l, i, j]) for j in range(C)]
                        for i in range(C)] for l in range(L - 1)]
    return pv


def forward(y, params, tape=None, restrict_support=False, track_kinks=False):
    """Run the unrolled solver on a blurred image.

    Returns (kernel, g, x_hat, state): the cropped kernel estimate, the
    final feature planes and the full-precision reconstruction as plain
    arrays, plus a ForwardState carrying the tape ends when recorded.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise DimensionMismatch("image must be 2-D, got %s" % (y.shape,))
    params.validate()
    h, w = y.shape
    L, C = params.b.shape

    pv = _leaf_params(params, tape) if tape is not None else None
    if params.fixed_banks is not None:
        banks = params.fixed_banks
    elif tape is not None:
        banks = build_filters(pv["w_top"], pv["w_mix"])
    else:
        banks = build_filters(params.w_top, params.w_mix if L > 1 else [])

    def par(name, *idx):
        if pv is not None and name in pv:
            node = pv[name]
            for k in idx:
                node = node[k]
            return node
        arr = getattr(params, name)
        for k in idx:
            arr = arr[k]
        return arr

    y_spec = spectral.fft2(y)
    k_plane = spectral.embed_kernel(np.array([[1.0]]), h, w)  # identity init
    z = [np.zeros((h, w)) for _ in range(C)]
    z_specs = [np.zeros((h, w), dtype=np.complex128) for _ in range(C)]
    g = list(z)
    kernel_planes = []
    kinks = [] if track_kinks else None
    f_specs_last = None

    for l in range(L):
        k_spec = ad.fft2(k_plane)
        f_specs = []
        y_specs = []
        for f in banks[l]:
            fs = ad.fft2(ad.embed_plane(f, h, w))
            f_specs.append(fs)
            y_specs.append(ad.mul(fs, y_spec))
        for i in range(C):
            b_li = par("b", l, i)
            gi = g_update(y_specs[i], z[i], k_spec, b_li, par("lam", l, i),
                          z_spec=z_specs[i])
            zi = z_update(gi, b_li)
            if kinks is not None:
                kinks.append(np.packbits(
                    np.abs(ad.value(gi)) > ad.value(b_li)).tobytes())
            g[i] = gi
            z[i] = zi
            z_specs[i] = ad.fft2(zi)
        k_raw = k_update(z_specs, y_specs, params.eps)
        if kinks is not None:
            kinks.append(np.packbits(ad.value(k_raw) > 0).tobytes())
        k_plane = k_project(k_raw)
        if restrict_support:
            window = ad.origin_window(k_plane, params.kernel_support)
            k_plane = ad.l1_normalize(ad.embed_plane(window, h, w))
        kernel_planes.append(np.array(ad.value(k_plane)))
        f_specs_last = f_specs

    x_hat = reconstruct(y, k_plane, g, banks[-1], [par("eta", i) for i in range(C)],
                        y_spec=y_spec, f_specs=f_specs_last)

    kernel = imaging.crop_kernel(ad.value(k_plane), params.kernel_support)
    state = ForwardState(
        x_hat=x_hat, kernel_plane=k_plane, g=g, kernel_planes=kernel_planes,
        tape=tape, param_vars=pv,
        kink_signature=b"".join(kinks) if kinks is not None else None)
    return kernel, [np.array(ad.value(gi)) for gi in g], np.array(ad.value(x_hat)), state


def collect_gradients(loss_var, state, params):
    """Run backward and pack the leaf adjoints into a GradientSet."""
    pv = state.param_vars
    L, C = params.b.shape
    order = []
    if "w_top" in pv:
        order.extend(pv["w_top"])
        for l in range(L - 1):
            for i in range(C):
                order.extend(pv["w_mix"][l][i])
    for l in range(L):
        for i in range(C):
            order.append(pv["b"][l][i])
    for l in range(L):
        for i in range(C):
            order.append(pv["lam"][l][i])
    for i in range(C):
        order.append(pv["eta"][i])

    grads = ad.backward(loss_var, order)

    pos = 0
    if "w_top" in pv:
        w_top = np.stack(grads[pos:pos + C]).reshape(C, 3, 3)
        pos += C
        n_mix = (L - 1) * C * C
        if n_mix:
            w_mix = np.stack(grads[pos:pos + n_mix]).reshape(L - 1, C, C, 3, 3)
        else:
            w_mix = np.zeros((0, C, C, 3, 3))
        pos += n_mix
    else:
        w_top = np.zeros((C, 3, 3))
        w_mix = np.zeros((max(L - 1, 0), C, C, 3, 3))
    b = np.array(grads[pos:pos + L * C]).reshape(L, C)
    pos += L * C
    lam = np.array(grads[pos:pos + L * C]).reshape(L, C)
    pos += L * C
    eta = np.array(grads[pos:pos + C]).reshape(C)
    return GradientSet(w_top=w_top, w_mix=w_mix, b=b, lam=lam, eta=eta)
