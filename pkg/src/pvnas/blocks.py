"""Selectable architecture blocks built on the autodiff core.

Every block consumes and produces batched tensors shaped (batch, time, features).
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CPS_KINDS = ("LSTM", "MLP", "CNN", "TCN")
LAYER_OPTIONS = (1, 2, 3)
HIDDEN_OPTIONS = (64, 128, 256, 512)
DECOMP_KERNEL = 25
MULTI_SCALE_KERNELS = (13, 17, 25)
GAUSSIAN_SIGMA_FRAC = 0.01
MIX_DROPOUT = 0.1
GATE_BIAS = 10.0


class InvalidOption(ValueError):
    pass


class Module:
    """Owns named parameter tensors and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, mod in self._children.items():
            out.update(mod.parameters(f"{prefix}{name}."))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    """Affine map over the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.param("weight", _uniform(rng, n_in, (n_in, n_out)))
        self.bias = self.param("bias", _uniform(rng, n_in, (n_out,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class TimeLinear(Linear):
    """Affine map over the time axis of a (B, T, D) tensor, shared across features."""

    def __call__(self, x: Tensor) -> Tensor:
        return ad.swapaxes(super().__call__(ad.swapaxes(x, 1, 2)), 1, 2)


# --- stage 2: data processing -------------------------------------------------------

def gaussian_augment(x: np.ndarray, sigma_frac: float = GAUSSIAN_SIGMA_FRAC, rng_seed=0,
                     train: bool = True, feature_std: np.ndarray | None = None) -> np.ndarray:
    """Training-time additive noise with per-feature std sigma_frac * feature_std."""
    if not train or sigma_frac == 0:
        return x
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if feature_std is None:
        feature_std = np.std(x.reshape(-1, x.shape[-1]), axis=0)
    return x + rng.standard_normal(x.shape) * (sigma_frac * np.asarray(feature_std))


class RevIN(Module):
    """Per-instance standardization with a learnable affine map and its inverse."""

    def __init__(self, n_features: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = self.param("weight", np.ones(n_features))
        self.bias = self.param("bias", np.zeros(n_features))

    def norm(self, x: Tensor, stat_len: int | None = None) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
        """Statistics come from the first ``stat_len`` steps (all steps by default) and are not differentiated."""
        ref = x.data if stat_len is None else x.data[:, :stat_len]
        mean = ref.mean(axis=1, keepdims=True)
        std = np.sqrt(ref.var(axis=1, keepdims=True) + self.eps)
        return (x - mean) / std * self.weight + self.bias, (mean, std)

    def denorm(self, y: Tensor, stats: tuple[np.ndarray, np.ndarray], feature: int) -> Tensor:
        mean, std = stats
        w = ad.getitem(self.weight, slice(feature, feature + 1))
        b = ad.getitem(self.bias, slice(feature, feature + 1))
        return (y - b) / (w + self.eps ** 2) * std[..., feature:feature + 1] + mean[..., feature:feature + 1]


def revin_norm(x, revin: RevIN | None = None, stat_len: int | None = None):
    x = ad.tensor(x) if not isinstance(x, Tensor) else x
    revin = revin or RevIN(x.shape[-1])
    return revin.norm(x, stat_len)


def revin_denorm(y, stats, feature: int, revin: RevIN | None = None) -> Tensor:
    y = ad.tensor(y) if not isinstance(y, Tensor) else y
    revin = revin or RevIN(stats[0].shape[-1])
    return revin.denorm(y, stats, feature)


class DAIN(Module):
    """Adaptive shift, scale and gating, initialized to plain standardization."""

    def __init__(self, n_features: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        eye = np.eye(n_features)
        self.shift = self.param("shift", eye.copy())
        self.scale = self.param("scale", eye.copy())
        self.gate_weight = self.param("gate_weight", eye.copy())
        self.gate_bias = self.param("gate_bias", np.full(n_features, GATE_BIAS))

    def __call__(self, x: Tensor) -> Tensor:
        B, _, D = x.shape
        avg = ad.mean(x, axis=1)
        x = x - ad.reshape(ad.matmul(avg, self.shift), (B, 1, D))
        sd = ad.sqrt(ad.mean(ad.square(x), axis=1) + self.eps)
        sd = ad.matmul(sd, self.scale)
        # smooth |sd| keeps the divisor away from zero if training flips its sign
        sd = ad.sqrt(ad.square(sd) + 1e-12)
        x = x / ad.reshape(sd, (B, 1, D))
        gate = ad.sigmoid(ad.matmul(ad.mean(x, axis=1), self.gate_weight) + self.gate_bias)
        return x * ad.reshape(gate, (B, 1, D))


def dain_transform(x, dain: DAIN | None = None) -> Tensor:
    x = ad.tensor(x) if not isinstance(x, Tensor) else x
    return (dain or DAIN(x.shape[-1]))(x)


def add_time_features(x, time_feats: np.ndarray) -> Tensor:
    """Append the four calendar channels; feature count grows by 4."""
    return ad.concat([x, ad.tensor(time_feats)], axis=-1)


# --- stage 2: feature extraction ------------------------------------------------------

def decompose(x, kernel: int = DECOMP_KERNEL) -> tuple[Tensor, Tensor]:
    """(seasonal, trend) with a replicate-padded moving-average trend along time."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"decomposition kernel must be odd and >= 3, got {kernel}")
    x = x if isinstance(x, Tensor) else ad.tensor(x)
    return ad.split_exact(x, ad.moving_average(x, kernel, axis=-2))


def multi_scale_decompose(x, kernels: Sequence[int] = MULTI_SCALE_KERNELS) -> tuple[Tensor, Tensor]:
    if len(kernels) < 2 or any(k < 3 or k % 2 == 0 for k in kernels):
        raise ValueError(f"need at least two odd kernels >= 3, got {kernels}")
    x = x if isinstance(x, Tensor) else ad.tensor(x)
    trend = None
    for k in kernels:
        ma = ad.moving_average(x, k, axis=-2)
        trend = ma if trend is None else trend + ma
    return ad.split_exact(x, trend / float(len(kernels)))


class LinearEmbed(Module):
    """Feature-axis embedding D -> hidden -> D."""

    def __init__(self, n_features: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.up = self.child("up", Linear(n_features, hidden, rng))
        self.down = self.child("down", Linear(hidden, n_features, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.up(x))


class TimeFeatureMix(Module):
    """Residual MLP along time (shared over features) followed by one along features."""

    def __init__(self, t_len: int, n_features: int, hidden: int, rng: np.random.Generator,
                 dropout: float = MIX_DROPOUT):
        super().__init__()
        self.dropout = dropout
        self.time_in = self.child("time_in", TimeLinear(t_len, hidden, rng))
        self.time_out = self.child("time_out", TimeLinear(hidden, t_len, rng))
        self.feat_in = self.child("feat_in", Linear(n_features, hidden, rng))
        self.feat_out = self.child("feat_out", Linear(hidden, n_features, rng))

    def __call__(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        h = self.time_out(ad.relu(self.time_in(x)))
        x = x + ad.dropout(h, self.dropout, train, rng)
        h = self.feat_out(ad.relu(self.feat_in(x)))
        return x + ad.dropout(h, self.dropout, train, rng)


def _complex_linear(re: Tensor, im: Tensor, w_re: Tensor, w_im: Tensor, b_re: Tensor, b_im: Tensor):
    out_re = ad.matmul(re, w_re) - ad.matmul(im, w_im) + b_re
    out_im = ad.matmul(re, w_im) + ad.matmul(im, w_re) + b_im
    return out_re, out_im


class FrequencyMix(Module):
    """Complex linear mixing of the rFFT spectrum across channels, then across frequency bins."""

    def __init__(self, t_len: int, n_features: int, rng: np.random.Generator | None = None,
                 identity: bool = False, init_scale: float = 0.02):
        super().__init__()
        self.t_len = t_len
        nb = t_len // 2 + 1
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = 0.0 if identity else init_scale

        def w(n):
            return self.param_pair(n, noise, rng)
        self.ch = w(n_features)
        self.fr = w(nb)

    def param_pair(self, n: int, noise: float, rng: np.random.Generator) -> tuple[Tensor, ...]:
        tag = "channel" if not self._params else "freq"
        return (
            self.param(f"{tag}_re", np.eye(n) + noise * rng.standard_normal((n, n))),
            self.param(f"{tag}_im", noise * rng.standard_normal((n, n))),
            self.param(f"{tag}_bias_re", np.zeros(n)),
            self.param(f"{tag}_bias_im", np.zeros(n)),
        )

    def __call__(self, x: Tensor) -> Tensor:
        spec = ad.rfft(x, axis=1)                                   # (B, F, D, 2)
        re, im = spec[..., 0], spec[..., 1]
        re, im = _complex_linear(re, im, *self.ch)
        re, im = _complex_linear(ad.swapaxes(re, 1, 2), ad.swapaxes(im, 1, 2), *self.fr)
        spec = ad.stack([ad.swapaxes(re, 1, 2), ad.swapaxes(im, 1, 2)], axis=-1)
        return ad.irfft(spec, self.t_len, axis=1)


def time_feature_mix(x, hidden: int, rng: np.random.Generator | None = None) -> Tensor:
    x = x if isinstance(x, Tensor) else ad.tensor(x)
    rng = rng if rng is not None else np.random.default_rng(0)
    return TimeFeatureMix(x.shape[1], x.shape[2], hidden, rng)(x)


def frequency_mix(x, rng: np.random.Generator | None = None, identity: bool = False) -> Tensor:
    x = x if isinstance(x, Tensor) else ad.tensor(x)
    return FrequencyMix(x.shape[1], x.shape[2], rng, identity=identity)(x)


# --- stage 3: core predictive structures ---------------------------------------------------

class MLPCore(Module):
    """Time-axis MLP shared over features; one layer is a single linear map."""

    def __init__(self, t_in: int, t_out: int, layers: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        dims = [t_in] + [hidden] * (layers - 1) + [t_out]
        self.layers = [self.child(f"layer{i}", TimeLinear(a, b, rng))
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class LSTMCore(Module):
    """Stacked LSTM over time; a linear head maps the last hidden state to T_out x D."""

    def __init__(self, d_in: int, t_out: int, layers: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.t_out, self.d_in = t_out, d_in
        self.cells = []
        for i in range(layers):
            n_in = d_in if i == 0 else hidden
            self.cells.append((
                self.param(f"lstm{i}.w_ih", _uniform(rng, hidden, (n_in, 4 * hidden))),
                self.param(f"lstm{i}.w_hh", _uniform(rng, hidden, (hidden, 4 * hidden))),
                self.param(f"lstm{i}.bias", _uniform(rng, hidden, (4 * hidden,))),
            ))
        self.head = self.child("head", Linear(hidden, t_out * d_in, rng))

    def __call__(self, x: Tensor) -> Tensor:
        for w_ih, w_hh, b in self.cells:
            x = ad.lstm(x, w_ih, w_hh, b)
        last = x[:, -1, :]
        return ad.reshape(self.head(last), (x.shape[0], self.t_out, self.d_in))


class ConvCore(Module):
    """Kernel-3 convolution stack (same-padded CNN or causal dilated TCN), then channel and time heads."""

    def __init__(self, kind: str, d_in: int, t_in: int, t_out: int, layers: int, hidden: int,
                 rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        self.causal = kind == "TCN"
        self.convs = []
        for i in range(layers):
            n_in = d_in if i == 0 else hidden
            self.convs.append((
                self.param(f"conv{i}.weight", _uniform(rng, n_in * kernel, (kernel, n_in, hidden))),
                self.param(f"conv{i}.bias", _uniform(rng, n_in * kernel, (hidden,))),
                2 ** i if self.causal else 1,
            ))
        self.proj = self.child("proj", Linear(hidden, d_in, rng))
        self.time_head = self.child("time_head", TimeLinear(t_in, t_out, rng))

    def receptive_field(self) -> int:
        k = self.convs[0][0].shape[0]
        return 1 + sum((k - 1) * d for _, _, d in self.convs)

    def __call__(self, x: Tensor) -> Tensor:
        pad = "causal" if self.causal else "same"
        for w, b, dil in self.convs:
            x = ad.relu(ad.conv1d(x, w, b, dilation=dil, padding=pad))
        return self.time_head(self.proj(x))


def build_cps(kind: str, layers: int, hidden: int, t_in: int, t_out: int, d_in: int,
              rng: np.random.Generator | None = None) -> Module:
    if kind not in CPS_KINDS:
        raise InvalidOption(f"CPS must be one of {CPS_KINDS}, got {kind!r}")
    if layers not in LAYER_OPTIONS:
        raise InvalidOption(f"LN must be one of {LAYER_OPTIONS}, got {layers!r}")
    if hidden not in HIDDEN_OPTIONS:
        raise InvalidOption(f"HS must be one of {HIDDEN_OPTIONS}, got {hidden!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == "MLP":
        return MLPCore(t_in, t_out, layers, hidden, rng)
    if kind == "LSTM":
        return LSTMCore(d_in, t_out, layers, hidden, rng)
    return ConvCore(kind, d_in, t_in, t_out, layers, hidden, rng)


class AggregateHead(Linear):
    """Fully connected map across features (D -> 1), shared over horizons."""

    def __init__(self, n_features: int, rng: np.random.Generator):
        super().__init__(n_features, 1, rng)


def aggregate_head(per_feature: Tensor, head: AggregateHead) -> Tensor:
    return head(per_feature)


def cps_param_count(kind: str, layers: int, hidden: int, t_in: int, t_out: int, d: int) -> int:
    """Shape arithmetic matching :func:`build_cps`."""
    if kind == "MLP":
        dims = [t_in] + [hidden] * (layers - 1) + [t_out]
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if kind == "LSTM":
        total = 0
        for i in range(layers):
            n_in = d if i == 0 else hidden
            total += n_in * 4 * hidden + hidden * 4 * hidden + 4 * hidden
        return total + hidden * t_out * d + t_out * d
    total = 0
    for i in range(layers):
        n_in = d if i == 0 else hidden
        total += 3 * n_in * hidden + hidden
    return total + hidden * d + d + t_in * t_out + t_out


def iter_param_arrays(modules: Iterable[Module]) -> Iterable[np.ndarray]:
    for m in modules:
        for p in m.parameters().values():
            yield p.data
