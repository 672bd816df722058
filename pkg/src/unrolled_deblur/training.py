"""End-to-end training of the unrolled solver's parameters.

The loss on one record is

    mse(x_hat, x) + kappa * mse(kernel_plane, embed(true kernel))

with the kernel term measured on the full image grid so the comparison
needs no cropping inside the differentiated path. Optimization is Adam
with bias correction, a per-epoch geometric learning-rate decay, and a
nonnegativity projection on b, lam and eta after every step. Record order
reshuffles each epoch from (seed, epoch), so a run resumed from any
checkpoint reproduces the uninterrupted trajectory bit for bit.

Checkpoints are little-endian binary: an 8-byte magic, a u32 format
version, a length-prefixed JSON config echo, the step/epoch/learning-rate
scalars, then the parameter and Adam moment arrays, each length-prefixed,
in a fixed documented order.
"""

import json
import os
import struct
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import kernelgen, spectral
from .errors import (ConfigMismatch, CorruptCheckpoint, NonFiniteLoss,
                     VersionMismatch)
from .unroll import GradientSet, ModelParams, collect_gradients, forward

CHECKPOINT_MAGIC = b"DAUCKPT1"
CHECKPOINT_VERSION = 1

# serialization order of the float64 arrays in a checkpoint
_ARRAY_ORDER = ["w_top", "w_mix", "b", "lam", "eta", "eps",
                "m_w_top", "m_w_mix", "m_b", "m_lam", "m_eta",
                "v_w_top", "v_w_mix", "v_b", "v_lam", "v_eta"]

# parameter arrays in update order; the flag marks nonnegative projection
_PARAM_FIELDS = [("w_top", False), ("w_mix", False),
                 ("b", True), ("lam", True), ("eta", True)]


@dataclass
class TrainConfig:
    layers: int = 10
    channels: int = 16
    kernel_support: int = 31
    kappa: float = 1e5
    lr: float = 1e-3
    decay: float = 0.9
    epochs: int = 20
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


@dataclass
class AdamState:
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params):
        shapes = _param_shapes(params)
        return cls(m={k: np.zeros(s) for k, s in shapes.items()},
                   v={k: np.zeros(s) for k, s in shapes.items()})


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    step: int
    epoch: int
    lr: float
    config: TrainConfig


def _param_shapes(params):
    L, C = params.b.shape
    return {"w_top": (C, 3, 3), "w_mix": (max(L - 1, 0), C, C, 3, 3),
            "b": (L, C), "lam": (L, C), "eta": (C,)}


def glorot_bound(channels):
    """Uniform init half-width with fan counted over a 3x3, C-channel filter."""
    fan = 9 * channels
    return float(np.sqrt(6.0 / (fan + fan)))


def init_params(config, seed=None):
    """Default init: lam = 0, b = 1, eta = 20, eps = 1, Glorot filters."""
    if seed is None:
        seed = config.seed
    L, C = config.layers, config.channels
    rng = np.random.default_rng(seed)
    bound = glorot_bound(C)
    w_top = rng.uniform(-bound, bound, (C, 3, 3))
    w_mix = rng.uniform(-bound, bound, (max(L - 1, 0), C, C, 3, 3))
    return ModelParams(
        b=np.ones((L, C)), lam=np.zeros((L, C)), eta=np.full(C, 20.0),
        w_top=w_top, w_mix=w_mix, eps=1.0,
        kernel_support=config.kernel_support).validate()


def loss_terms(x_hat, kernel_plane, x_target, kernel_target_plane, kappa):
    """(total, image mse, kernel mse); total stays on the tape if inputs do."""
    image_term = ad.mse(x_hat, x_target)
    kernel_term = ad.mse(kernel_plane, kernel_target_plane)
    total = ad.add(image_term, ad.mul(kappa, kernel_term))
    return total, float(ad.value(image_term)), float(ad.value(kernel_term))


def loss(x_hat, kernel_plane, x_target, kernel_target_plane, kappa):
    """Scalar training loss for one record."""
    return loss_terms(x_hat, kernel_plane, x_target, kernel_target_plane, kappa)[0]


def adam_step(params, grads, adam, step, lr, config):
    """One in-place Adam update (step counts from 1) plus projection."""
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    names = {"w_top": params.w_top, "w_mix": params.w_mix,
             "b": params.b, "lam": params.lam, "eta": params.eta}
    gvals = grads.arrays()
    for name, project in _PARAM_FIELDS:
        p = names[name]
        if p is None or p.size == 0:
            continue
        g = gvals[name]
        m = adam.m[name]
        v = adam.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if project:
            np.maximum(p, 0.0, out=p)
    return params, adam


# ---------------------------------------------------------------------------
# checkpoints


def _write_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.astype("<f8").tobytes())


def save_checkpoint(path, params, adam, step, epoch, lr, config):
    cfg = json.dumps(asdict(config), sort_keys=True,
                     separators=(",", ":")).encode("ascii")
    arrays = {
        "w_top": params.w_top, "w_mix": params.w_mix, "b": params.b,
        "lam": params.lam, "eta": params.eta, "eps": np.array([params.eps]),
    }
    for key in ("m", "v"):
        store = getattr(adam, key)
        for name in ("w_top", "w_mix", "b", "lam", "eta"):
            arrays["%s_%s" % (key, name)] = store[name]
    # write-temp-then-rename so a crash never leaves a truncated checkpoint
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<IQ", epoch, step))
        fh.write(struct.pack("<d", lr))
        for name in _ARRAY_ORDER:
            _write_array(fh, arrays[name])
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpoint("%s: bad magic" % path)
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CorruptCheckpoint("%s: truncated at byte %d" % (path, pos))
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch("%s: format version %d, expected %d"
                              % (path, version, CHECKPOINT_VERSION))
    (cfg_len,) = take("<I")
    if pos + cfg_len > len(data):
        raise CorruptCheckpoint("%s: truncated config block" % path)
    try:
        cfg_dict = json.loads(data[pos:pos + cfg_len].decode("ascii"))
        config = TrainConfig(**cfg_dict)
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpoint("%s: bad config block (%s)" % (path, exc))
    pos += cfg_len
    epoch, step = take("<IQ")
    (lr,) = take("<d")

    shapes = {"w_top": (config.channels, 3, 3),
              "w_mix": (max(config.layers - 1, 0), config.channels,
                        config.channels, 3, 3),
              "b": (config.layers, config.channels),
              "lam": (config.layers, config.channels),
              "eta": (config.channels,), "eps": (1,)}
    arrays = {}
    for name in _ARRAY_ORDER:
        base = name.split("_", 1)[1] if name[:2] in ("m_", "v_") else name
        shape = shapes[base]
        (count,) = take("<Q")
        expected = int(np.prod(shape)) if shape else 1
        if count != expected:
            raise CorruptCheckpoint("%s: array %s has %d values, expected %d"
                                    % (path, name, count, expected))
        nbytes = count * 8
        if pos + nbytes > len(data):
            raise CorruptCheckpoint("%s: truncated array %s" % (path, name))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count,
                                     offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise CorruptCheckpoint("%s: %d trailing bytes" % (path, len(data) - pos))

    params = ModelParams(
        b=arrays["b"], lam=arrays["lam"], eta=arrays["eta"],
        w_top=arrays["w_top"], w_mix=arrays["w_mix"],
        eps=float(arrays["eps"][0]),
        kernel_support=config.kernel_support).validate()
    adam = AdamState(
        m={n: arrays["m_" + n] for n in ("w_top", "w_mix", "b", "lam", "eta")},
        v={n: arrays["v_" + n] for n in ("w_top", "w_mix", "b", "lam", "eta")})
    return Checkpoint(params=params, adam=adam, step=step, epoch=epoch,
                      lr=lr, config=config)


# ---------------------------------------------------------------------------
# training loop


def _record_loss(record, params, kappa, want_grads):
    """Forward one record; returns (total, image mse, kernel mse, grads)."""
    h, w = record.blurred.shape
    target_plane = spectral.embed_kernel(record.kernel, h, w)
    tape = ad.Tape() if want_grads else None
    _, _, _, state = forward(record.blurred, params, tape=tape)
    total, image_mse, kernel_mse = loss_terms(
        state.x_hat, state.kernel_plane, record.sharp, target_plane, kappa)
    total_value = float(ad.value(total))
    if not np.isfinite(total_value):
        raise NonFiniteLoss("record %s: loss %r" % (record.blurred_path, total_value))
    grads = collect_gradients(total, state, params) if want_grads else None
    return total_value, image_mse, kernel_mse, grads


def _sum_grads(acc, grads):
    if acc is None:
        return grads
    return GradientSet(**{k: acc.arrays()[k] + v
                          for k, v in grads.arrays().items()})


def train(manifest_path, config, out_dir, resume=None, initial_params=None,
          log=None):
    """Train on a manifest; writes per-epoch checkpoints and loss_log.csv.

    Returns the final Checkpoint. `resume` restores params, moments, step
    count and learning rate from an earlier checkpoint of the same config
    and continues from its epoch.
    """
    records = kernelgen.load_manifest(manifest_path)
    os.makedirs(out_dir, exist_ok=True)
    if log is None:
        log = sys.stderr

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config != config:
            raise ConfigMismatch("resume config %s != %s" % (ckpt.config, config))
        params, adam = ckpt.params, ckpt.adam
        step, start_epoch, lr = ckpt.step, ckpt.epoch, ckpt.lr
    else:
        params = initial_params if initial_params is not None \
            else init_params(config)
        params.validate()
        adam = AdamState.zeros(params)
        step, start_epoch, lr = 0, 0, config.lr

    log_path = os.path.join(out_dir, "loss_log.csv")
    mode = "a" if resume is not None and os.path.exists(log_path) else "w"
    last = None
    with open(log_path, mode, encoding="ascii", newline="\n") as logf:
        if mode == "w":
            logf.write("epoch,step,loss,image_mse,kernel_mse,lr\n")
        for epoch in range(start_epoch, config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(
                len(records))
            batch_grads = None
            batch_losses = []
            for n, idx in enumerate(order):
                total, image_mse, kernel_mse, grads = _record_loss(
                    records[idx], params, config.kappa, want_grads=True)
                batch_grads = _sum_grads(batch_grads, grads)
                batch_losses.append((total, image_mse, kernel_mse))
                if len(batch_losses) == config.batch_size or n == len(order) - 1:
                    step += 1
                    adam_step(params, batch_grads, adam, step, lr, config)
                    mean = [sum(c) / len(batch_losses)
                            for c in zip(*batch_losses)]
                    logf.write("%d,%d,%r,%r,%r,%r\n"
                               % (epoch, step, mean[0], mean[1], mean[2], lr))
                    batch_grads = None
                    batch_losses = []
            logf.flush()
            lr = lr * config.decay
            ckpt_path = os.path.join(out_dir,
                                     "checkpoint_epoch_%04d.ckpt" % (epoch + 1))
            save_checkpoint(ckpt_path, params, adam, step, epoch + 1, lr, config)
            print("epoch %d done, step %d, checkpoint %s"
                  % (epoch + 1, step, ckpt_path), file=log)
            last = Checkpoint(params=params, adam=adam, step=step,
                              epoch=epoch + 1, lr=lr, config=config)
    if last is None:  # resumed at or past the final epoch
        last = Checkpoint(params=params, adam=adam, step=step,
                          epoch=start_epoch, lr=lr, config=config)
    return last
