"""Shared-parameter convolution/deconvolution pair encoder with manual backprop.

Both networks run through the same convolution stack and the same
transposed-convolution stack. Only the fully connected maps between the
flattened feature maps and the embedding space are network-specific, since
flatten sizes depend on each network's node count.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import LossWeights, PROB_CLAMP, cosine_rows, loss_total

SIDES = ("a", "b")
PAIR_FEATURES = ("interaction", "concat")


@dataclass(frozen=True)
class Architecture:
    n_a: int
    n_b: int
    dim: int = 56
    channels: tuple = (4, 8)
    kernel: int = 5
    stride: int = 2
    padding: int = 2
    pair_features: str = "interaction"
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.pair_features not in PAIR_FEATURES:
            raise ValueError(f"pair_features must be one of {PAIR_FEATURES}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {tuple(ACTIVATIONS)}")
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def depth(self) -> int:
        return len(self.channels)

    def lengths(self, side: str) -> list[int]:
        """Sequence length at the input of each conv layer plus the final output."""
        n = self.n_a if side == "a" else self.n_b
        out = [n]
        for _ in self.channels:
            out.append((out[-1] + 2 * self.padding - self.kernel) // self.stride + 1)
        return out

    def flat_size(self, side: str) -> int:
        return self.channels[-1] * self.lengths(side)[-1]

    def shapes(self) -> dict[str, tuple]:
        k, shapes = self.kernel, {}
        ins = (1,) + self.channels[:-1]
        for l, (ci, co) in enumerate(zip(ins, self.channels)):
            shapes[f"conv{l}.w"] = (co, ci, k)
            shapes[f"conv{l}.b"] = (co,)
        for s in SIDES:
            shapes[f"fc_{s}.w"] = (self.dim, self.flat_size(s))
            shapes[f"fc_{s}.b"] = (self.dim,)
        for s in SIDES:
            shapes[f"dec_{s}.w"] = (self.flat_size(s), self.dim)
            shapes[f"dec_{s}.b"] = (self.flat_size(s),)
        # deconv j undoes conv (depth-1-j); weights are (in, out, kernel)
        for j in range(self.depth):
            l = self.depth - 1 - j
            shapes[f"deconv{j}.w"] = (self.channels[l], ins[l], k)
            shapes[f"deconv{j}.b"] = (ins[l],)
        shapes["clf.w"] = (2, 2 * self.dim)
        shapes["clf.b"] = (2,)
        return shapes

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ModelParams:
    """Named float64 tensors for one architecture; also used as a gradient buffer."""

    def __init__(self, arch: Architecture, tensors: dict[str, np.ndarray]):
        self.arch = arch
        self.tensors = tensors
        expected = arch.shapes()
        if set(tensors) != set(expected):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if value.shape != self.tensors[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self.tensors[name].shape}")
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.arch.shapes())

    def items(self):
        return ((name, self.tensors[name]) for name in self)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.arch, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


GradientBuffer = ModelParams


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    tensors = {}
    for name, shape in arch.shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
            continue
        if len(shape) == 3:
            fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
            if name.startswith("deconv"):
                fan_in, fan_out = fan_out, fan_in
        else:
            fan_out, fan_in = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(arch, tensors)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_grad(a):
    return a * (1.0 - a)


def _tanh_grad(a):
    return 1.0 - a * a


# activation and its derivative expressed through the activation's output
ACTIVATIONS = {"sigmoid": (sigmoid, _sigmoid_grad), "tanh": (np.tanh, _tanh_grad)}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- primitive layers ---------------------------------------------------------

def conv1d(x, w, b, stride, pad):
    """Cross-correlation of (B, C, L) with (O, C, K); returns output and im2col."""
    B, C, L = x.shape
    O, _, K = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    Lout = win.shape[2]
    cols = win.transpose(0, 2, 1, 3).reshape(B * Lout, C * K)
    y = (cols @ w.reshape(O, C * K).T).reshape(B, Lout, O).transpose(0, 2, 1)
    return y + b[None, :, None], cols


def conv1d_backward(dy, cols, x_shape, w, stride, pad):
    B, C, L = x_shape
    O, _, K = w.shape
    Lout = dy.shape[2]
    dyr = dy.transpose(0, 2, 1).reshape(B * Lout, O)
    dw = (dyr.T @ cols).reshape(O, C, K)
    db = dy.sum(axis=(0, 2))
    dcols = (dyr @ w.reshape(O, C * K)).reshape(B, Lout, C, K)
    dxp = np.zeros((B, C, L + 2 * pad))
    span = stride * (Lout - 1) + 1
    for k in range(K):
        dxp[:, :, k:k + span:stride] += dcols[:, :, :, k].transpose(0, 2, 1)
    return dxp[:, :, pad:pad + L], dw, db


def conv_transpose1d(x, w, b, stride, pad, out_len):
    """Adjoint of conv1d for (B, I, L) input and (I, O, K) weights, cropped to out_len."""
    B, I, L = x.shape
    _, O, K = w.shape
    full_len = pad + out_len
    full_len = max(full_len, (L - 1) * stride + K)
    contrib = (x.transpose(0, 2, 1).reshape(B * L, I) @ w.reshape(I, O * K)).reshape(B, L, O, K)
    full = np.zeros((B, O, full_len))
    span = stride * (L - 1) + 1
    for k in range(K):
        full[:, :, k:k + span:stride] += contrib[:, :, :, k].transpose(0, 2, 1)
    return full[:, :, pad:pad + out_len] + b[None, :, None], full_len


def conv_transpose1d_backward(dy, x, w, stride, pad, full_len):
    B, I, L = x.shape
    _, O, K = w.shape
    out_len = dy.shape[2]
    dfull = np.zeros((B, O, full_len))
    dfull[:, :, pad:pad + out_len] = dy
    win = sliding_window_view(dfull, K, axis=2)[:, :, ::stride, :][:, :, :L, :]
    g = win.transpose(0, 2, 1, 3).reshape(B * L, O * K)
    xr = x.transpose(0, 2, 1).reshape(B * L, I)
    dx = (g @ w.reshape(I, O * K).T).reshape(B, L, I).transpose(0, 2, 1)
    dw = (xr.T @ g).reshape(I, O, K)
    return dx, dw, dy.sum(axis=(0, 2))


# -- encoder / decoder ---------------------------------------------------------

def _check_side(side: str) -> str:
    side = side.lower()
    if side not in SIDES:
        raise ValueError(f"side must be 'a' or 'b', got {side!r}")
    return side


def _encode(x: np.ndarray, side: str, params: ModelParams):
    arch = params.arch
    n = arch.n_a if side == "a" else arch.n_b
    if x.shape[-1] != n:
        raise ValueError(f"context length {x.shape[-1]} does not match network {side} size {n}")
    act = ACTIVATIONS[arch.activation][0]
    h = x[:, None, :]
    cache = []
    for l in range(arch.depth):
        z, cols = conv1d(h, params[f"conv{l}.w"], params[f"conv{l}.b"], arch.stride, arch.padding)
        a = act(z)
        cache.append((h.shape, cols, a))
        h = a
    flat = h.reshape(len(x), -1)
    v = flat @ params[f"fc_{side}.w"].T + params[f"fc_{side}.b"]
    return v, (cache, flat)


def _encode_backward(dv, side, params, enc_cache, grads):
    arch = params.arch
    cache, flat = enc_cache
    grads[f"fc_{side}.w"] += dv.T @ flat
    grads[f"fc_{side}.b"] += dv.sum(axis=0)
    dact = ACTIVATIONS[arch.activation][1]
    dh = (dv @ params[f"fc_{side}.w"]).reshape(cache[-1][2].shape)
    for l in reversed(range(arch.depth)):
        x_shape, cols, a = cache[l]
        dz = dh * dact(a)
        dh, dw, db = conv1d_backward(dz, cols, x_shape, params[f"conv{l}.w"], arch.stride, arch.padding)
        grads[f"conv{l}.w"] += dw
        grads[f"conv{l}.b"] += db


def _decode(v: np.ndarray, side: str, params: ModelParams):
    arch = params.arch
    if v.shape[-1] != arch.dim:
        raise ValueError(f"embedding length {v.shape[-1]} != {arch.dim}")
    lengths = arch.lengths(side)
    h = (v @ params[f"dec_{side}.w"].T + params[f"dec_{side}.b"]).reshape(
        len(v), arch.channels[-1], lengths[-1])
    act = ACTIVATIONS[arch.activation][0]
    cache = []
    for j in range(arch.depth):
        out_len = lengths[arch.depth - 1 - j]
        y, full_len = conv_transpose1d(h, params[f"deconv{j}.w"], params[f"deconv{j}.b"],
                                       arch.stride, arch.padding, out_len)
        last = j == arch.depth - 1
        a = y if last else act(y)
        cache.append((h, full_len, None if last else a))
        h = a
    return h[:, 0, :], cache


def _decode_backward(drecon, side, params, v, dec_cache, grads):
    arch = params.arch
    dact = ACTIVATIONS[arch.activation][1]
    dh = drecon[:, None, :]
    for j in reversed(range(arch.depth)):
        x, full_len, a = dec_cache[j]
        if a is not None:
            dh = dh * dact(a)
        dh, dw, db = conv_transpose1d_backward(dh, x, params[f"deconv{j}.w"], arch.stride,
                                               arch.padding, full_len)
        grads[f"deconv{j}.w"] += dw
        grads[f"deconv{j}.b"] += db
    dflat = dh.reshape(len(v), -1)
    grads[f"dec_{side}.w"] += dflat.T @ v
    grads[f"dec_{side}.b"] += dflat.sum(axis=0)
    return dflat @ params[f"dec_{side}.w"]


def encode(context, side: str, params: ModelParams) -> np.ndarray:
    """Embed one context row (1-D) or a stack of rows (2-D)."""
    side = _check_side(side)
    x = np.asarray(context, dtype=np.float64)
    v, _ = _encode(np.atleast_2d(x), side, params)
    return v[0] if x.ndim == 1 else v


def decode(embedding, side: str, params: ModelParams) -> np.ndarray:
    side = _check_side(side)
    v = np.asarray(embedding, dtype=np.float64)
    out, _ = _decode(np.atleast_2d(v), side, params)
    return out[0] if v.ndim == 1 else out


def encode_all(contexts: np.ndarray, side: str, params: ModelParams, chunk: int = 1024) -> np.ndarray:
    side = _check_side(side)
    parts = [_encode(contexts[s:s + chunk], side, params)[0] for s in range(0, len(contexts), chunk)]
    return np.vstack(parts) if parts else np.zeros((0, params.arch.dim))


def pair_features(va, vb, mode: str) -> np.ndarray:
    if mode == "concat":
        return np.concatenate([va, vb], axis=-1)
    diff = va - vb
    return np.concatenate([va * vb, diff * diff], axis=-1)


def pair_features_backward(dz, va, vb, mode: str):
    d = va.shape[-1]
    if mode == "concat":
        return dz[..., :d], dz[..., d:]
    dprod, dsq = dz[..., :d], dz[..., d:]
    g = 2.0 * (va - vb) * dsq
    return dprod * vb + g, dprod * va - g


def head_probs(va, vb, params: ModelParams) -> np.ndarray:
    """Class probabilities (p0, p1) for embedding pairs; broadcasts over leading axes."""
    z = pair_features(va, vb, params.arch.pair_features)
    return softmax(z @ params["clf.w"].T + params["clf.b"])


@dataclass
class BatchForward:
    ctx_a: np.ndarray
    ctx_b: np.ndarray
    v_a: np.ndarray
    v_b: np.ndarray
    recon_a: np.ndarray
    recon_b: np.ndarray
    features: np.ndarray
    probs: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)

    def __len__(self):
        return len(self.probs)


@dataclass(frozen=True)
class PairForward:
    v_a: np.ndarray
    v_b: np.ndarray
    recon_a: np.ndarray
    recon_b: np.ndarray
    probs: np.ndarray


def forward_batch(ctx_a: np.ndarray, ctx_b: np.ndarray, params: ModelParams,
                  rows_a=None, rows_b=None) -> BatchForward:
    """Forward pass over pairs.

    With ``rows_a``/``rows_b`` given, ``ctx_a``/``ctx_b`` hold distinct user
    contexts and pair ``j`` is ``(ctx_a[rows_a[j]], ctx_b[rows_b[j]])``; each
    user is then encoded once however many pairs it appears in.
    """
    ctx_a = np.atleast_2d(np.asarray(ctx_a, dtype=np.float64))
    ctx_b = np.atleast_2d(np.asarray(ctx_b, dtype=np.float64))
    if rows_a is None:
        if len(ctx_a) != len(ctx_b):
            raise ValueError("ctx_a and ctx_b must hold the same number of rows")
        rows_a = rows_b = np.arange(len(ctx_a))
    rows_a, rows_b = np.asarray(rows_a), np.asarray(rows_b)
    if len(rows_a) != len(rows_b):
        raise ValueError("row index arrays differ in length")
    ua, enc_a = _encode(ctx_a, "a", params)
    ub, enc_b = _encode(ctx_b, "b", params)
    ra, dec_a = _decode(ua, "a", params)
    rb, dec_b = _decode(ub, "b", params)
    va, vb = ua[rows_a], ub[rows_b]
    z = pair_features(va, vb, params.arch.pair_features)
    probs = softmax(z @ params["clf.w"].T + params["clf.b"])
    cache = dict(enc_a=enc_a, enc_b=enc_b, dec_a=dec_a, dec_b=dec_b, rows_a=rows_a, rows_b=rows_b,
                 users_a=ua, users_b=ub)
    return BatchForward(ctx_a[rows_a], ctx_b[rows_b], va, vb, ra[rows_a], rb[rows_b], z, probs, cache)


def forward_pair(ctx_a, ctx_b, params: ModelParams) -> PairForward:
    f = forward_batch(ctx_a, ctx_b, params)
    return PairForward(f.v_a[0], f.v_b[0], f.recon_a[0], f.recon_b[0], f.probs[0])


def backward(fwd: BatchForward, labels, params: ModelParams,
             weights: LossWeights = LossWeights()) -> tuple[ModelParams, float]:
    """Gradient of the full objective over the batch, plus its value."""
    labels = np.asarray(labels, dtype=np.int64)
    B = len(labels)
    if B == 0:
        raise ValueError("empty batch")
    if B != len(fwd):
        raise ValueError("labels do not match the batch")
    loss = loss_total(fwd, labels, weights)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss; reduce the step size")

    grads = params.zeros_like()
    va, vb = fwd.v_a, fwd.v_b

    # classification head
    onehot = np.eye(2)[labels]
    dlogits = weights.classify * (fwd.probs - onehot) / B
    grads["clf.w"] += dlogits.T @ fwd.features
    grads["clf.b"] += dlogits.sum(axis=0)
    dva, dvb = pair_features_backward(dlogits @ params["clf.w"], va, vb, params.arch.pair_features)

    # cross-network cosine terms
    cos, na, nb = cosine_rows(va, vb)
    pos, neg = labels == 1, labels == 0
    dcos = np.zeros(B)
    if pos.any():
        dcos[pos] = -weights.cross / pos.sum()
    if neg.any():
        active = neg & (cos - weights.margin > 0)
        dcos[active] = weights.cross / neg.sum()
    ok = (na > 0) & (nb > 0)
    if ok.any():
        inv = np.zeros(B)
        inv[ok] = 1.0 / (na[ok] * nb[ok])
        ca = np.zeros(B)
        cb = np.zeros(B)
        ca[ok] = cos[ok] / na[ok] ** 2
        cb[ok] = cos[ok] / nb[ok] ** 2
        dva = dva + dcos[:, None] * (vb * inv[:, None] - va * ca[:, None])
        dvb = dvb + dcos[:, None] * (va * inv[:, None] - vb * cb[:, None])

    # regularizer
    dva = dva + weights.reg * 2.0 * va / B
    dvb = dvb + weights.reg * 2.0 * vb / B

    # reconstruction, then both encoders through the shared stack;
    # per-pair gradients are summed onto the distinct users they came from
    for side, dv, ctx, recon in (("a", dva, fwd.ctx_a, fwd.recon_a),
                                 ("b", dvb, fwd.ctx_b, fwd.recon_b)):
        rows = fwd.cache[f"rows_{side}"]
        users = fwd.cache[f"users_{side}"]
        drecon = _scatter_rows(2.0 * (recon - ctx) / B, rows, len(users))
        du = _scatter_rows(dv, rows, len(users))
        du += _decode_backward(drecon, side, params, users, fwd.cache[f"dec_{side}"], grads)
        _encode_backward(du, side, params, fwd.cache[f"enc_{side}"], grads)
    return grads, loss


def _scatter_rows(values: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, rows, values)
    return out


# -- optimizer ---------------------------------------------------------------

class Adam:
    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def copy(self) -> "Adam":
        new = object.__new__(Adam)
        new.beta1, new.beta2, new.eps, new.t = self.beta1, self.beta2, self.eps, self.t
        new.m, new.v = self.m.copy(), self.v.copy()
        return new


def sgd_step(params: ModelParams, grads: ModelParams, opt: Adam, lr: float = 1e-3) -> ModelParams:
    """Adam update in place; returns ``params``."""
    if not grads.all_finite():
        raise FloatingPointError("non-finite gradient")
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for name, g in grads.items():
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name][...] -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"AUPCKPT\x00"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sIQ")


def save_checkpoint(path, params: ModelParams, opt: Adam | None = None, config_hash: str = "") -> None:
    blocks = [("param", params)]
    if opt is not None:
        blocks += [("adam_m", opt.m), ("adam_v", opt.v)]
    header = dict(
        config_hash=config_hash,
        arch=asdict(params.arch),
        arch_digest=params.arch.digest(),
        optimizer=None if opt is None else dict(t=opt.t, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps),
        tensors=[dict(group=g, name=n, shape=list(t.shape)) for g, p in blocks for n, t in p.items()],
    )
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(raw)))
        fh.write(raw)
        for _, p in blocks:
            for _, t in p.items():
                fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, Adam | None, dict]:
    data = Path(path).read_bytes()
    magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[_CKPT_HEAD.size:_CKPT_HEAD.size + hlen])
    arch = Architecture(**header["arch"])
    offset = _CKPT_HEAD.size + hlen
    groups: dict[str, dict] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        groups.setdefault(entry["group"], {})[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    params = ModelParams(arch, groups["param"])
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = Adam(params, o["beta1"], o["beta2"], o["eps"])
        opt.t = o["t"]
        opt.m = ModelParams(arch, groups["adam_m"])
        opt.v = ModelParams(arch, groups["adam_v"])
    return params, opt, header
