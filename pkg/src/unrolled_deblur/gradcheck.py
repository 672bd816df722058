"""Central-difference verification of the analytic parameter gradients.

For every sampled scalar parameter, compares the tape gradient against
(L(p+h) - L(p-h)) / 2h on the full forward-plus-loss computation. Kinked
primitives make finite differences locally meaningless, so a sample is
skipped (and reported) when the two perturbed forwards disagree on any
threshold/clamp activation pattern, or when the parameter is itself a
threshold sitting within 2h of one of its inputs.

Two error figures are reported per sample: the raw relative error
|a - n| / max(|a|, |n|, 1e-8), and an effective error whose denominator is
floored at 1e-3 so that parameters with near-zero gradients are judged by
the absolute criterion |a - n| < 1e-7 instead of a meaningless ratio.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import spectral, training
from .unroll import ModelParams, collect_gradients, forward

REL_FLOOR = 1e-8
EFFECTIVE_FLOOR = 1e-3


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float
    effective_err: float


@dataclass
class GradCheckResult:
    entries: list
    skipped: list          # (name, index, reason)
    max_rel_err: float
    max_effective_err: float

    @property
    def checked(self):
        return len(self.entries)


@dataclass
class CheckInstance:
    """A randomized small problem for gradient verification."""

    blurred: np.ndarray
    sharp: np.ndarray
    kernel_plane: np.ndarray
    params: ModelParams
    kappa: float


def make_check_instance(size=8, layers=2, channels=2, seed=0, kappa=1e5,
                        kernel_support=None):
    """Random image/target/params away from init-time degeneracies.

    b, lam, eta are drawn strictly positive so no parameter starts on the
    projection boundary, and the image is plain uniform noise so threshold
    activations are generic.
    """
    if kernel_support is None:
        kernel_support = min(size - 1 if size % 2 == 0 else size, 5)
    rng = np.random.default_rng([seed, layers, channels, size])
    cfg = training.TrainConfig(layers=layers, channels=channels,
                               kernel_support=kernel_support, kappa=kappa)
    params = training.init_params(cfg, seed=seed)
    params.b = rng.uniform(0.5, 1.5, (layers, channels))
    params.lam = rng.uniform(0.1, 0.5, (layers, channels))
    params.eta = rng.uniform(10.0, 30.0, channels)
    blurred = rng.random((size, size))
    sharp = rng.random((size, size))
    kernel = rng.random((kernel_support, kernel_support))
    kernel /= kernel.sum()
    return CheckInstance(
        blurred=blurred, sharp=sharp,
        kernel_plane=spectral.embed_kernel(kernel, size, size),
        params=params.validate(), kappa=kappa)


def _loss_at(inst, params, track_kinks=False):
    _, _, _, state = forward(inst.blurred, params, track_kinks=track_kinks)
    total = training.loss(state.x_hat, state.kernel_plane, inst.sharp,
                          inst.kernel_plane, inst.kappa)
    return float(ad.value(total)), state


def _param_slots(params):
    slots = [("b", params.b), ("lam", params.lam), ("eta", params.eta)]
    if params.w_top is not None:
        slots = [("w_top", params.w_top), ("w_mix", params.w_mix)] + slots
    return [(name, arr) for name, arr in slots if arr.size]


def _clone_params(params):
    return ModelParams(
        b=params.b.copy(), lam=params.lam.copy(), eta=params.eta.copy(),
        w_top=None if params.w_top is None else params.w_top.copy(),
        w_mix=None if params.w_mix is None else params.w_mix.copy(),
        eps=params.eps, kernel_support=params.kernel_support,
        fixed_banks=params.fixed_banks)


def finite_diff_check(inst, h=1e-5, samples=200, seed=0):
    """Check up to `samples` distinct scalar parameters of the instance."""
    params = inst.params
    tape = ad.Tape()
    _, _, _, state = forward(inst.blurred, params, tape=tape,
                             track_kinks=True)
    total = training.loss(state.x_hat, state.kernel_plane, inst.sharp,
                          inst.kernel_plane, inst.kappa)
    grads = collect_gradients(total, state, params).arrays()
    nominal_kinks = state.kink_signature

    slots = _param_slots(params)
    coords = [(name, i) for name, arr in slots for i in range(arr.size)]
    rng = np.random.default_rng(seed)
    if samples < len(coords):
        chosen = [coords[i] for i in
                  sorted(rng.choice(len(coords), size=samples, replace=False))]
    else:
        chosen = coords

    entries = []
    skipped = []
    for name, flat in chosen:
        analytic = float(grads[name].flat[flat])
        work = _clone_params(params)
        arr = getattr(work, name)
        base = arr.flat[flat]
        arr.flat[flat] = base + h
        loss_hi, state_hi = _loss_at(inst, work, track_kinks=True)
        arr.flat[flat] = base - h
        loss_lo, state_lo = _loss_at(inst, work, track_kinks=True)
        arr.flat[flat] = base
        if state_hi.kink_signature != state_lo.kink_signature \
                or state_hi.kink_signature != nominal_kinks:
            skipped.append((name, flat, "activation pattern changes within h"))
            continue
        numeric = (loss_hi - loss_lo) / (2.0 * h)
        diff = abs(analytic - numeric)
        rel = diff / max(abs(analytic), abs(numeric), REL_FLOOR)
        eff = diff / max(abs(analytic), abs(numeric), EFFECTIVE_FLOOR)
        entries.append(GradCheckEntry(name=name, index=flat,
                                      analytic=analytic, numeric=numeric,
                                      rel_err=rel, effective_err=eff))
    max_rel = max((e.rel_err for e in entries), default=0.0)
    max_eff = max((e.effective_err for e in entries), default=0.0)
    return GradCheckResult(entries=entries, skipped=skipped,
                           max_rel_err=max_rel, max_effective_err=max_eff)
