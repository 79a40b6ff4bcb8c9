"""The 12-gene architecture space: genotypes, one-hot encoding, sampling,
mutation and assembly into a trainable model."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from . import blocks as bl
from .autodiff import ShapeMismatch, Tensor
from .blocks import InvalidOption
from .dataset import TaskKind, TimeSeriesFrame
from .selection import FeatureMask, select_features

OPTIONS: dict[str, tuple] = {
    "fsm": ("NoFilter", "mRMR", "Pearson"),
    "fst": (0.3, 0.4, 0.5),
    "dgm": ("None", "Gaussian"),
    "sm": ("None", "RevIN", "DAIN"),
    "fam": ("None", "TimeFeatures"),
    "fem": ("None", "LinearEmbed", "Decomp", "MultiScaleDecomp", "TimeFeatureMix", "FreqMix"),
    "cps": ("LSTM", "MLP", "CNN", "TCN"),
    "ln": (1, 2, 3),
    "hs": (64, 128, 256, 512),
    "lr": (0.0005, 0.001),
    "of": ("Adam", "SGD"),
    "bs": (32, 64),
}
GENES: tuple[str, ...] = tuple(OPTIONS)
SEGMENTS: tuple[int, ...] = tuple(len(v) for v in OPTIONS.values())
ENCODING_LENGTH = sum(SEGMENTS)
N_TIME_FEATURES = 4


class MalformedEncoding(ValueError):
    pass


def _coerce(gene: str, value):
    """Map a JSON/config value onto the matching option, raising InvalidOption otherwise."""
    if gene not in OPTIONS:
        raise InvalidOption(f"unknown gene {gene!r}")
    for opt in OPTIONS[gene]:
        if isinstance(opt, str):
            if value == opt or (value is None and opt == "None"):
                return opt
        elif not isinstance(value, (bool, str)) and isinstance(value, (int, float, np.number)) \
                and float(value) == float(opt):
            return opt
        elif isinstance(value, str):
            try:
                if float(value) == float(opt):
                    return opt
            except ValueError:
                pass
    raise InvalidOption(f"gene {gene!r}: {value!r} is not one of {OPTIONS[gene]}")


@dataclass(frozen=True)
class Genotype:
    """One point of the space. Construction validates every gene and canonicalizes
    the inert threshold gene (reset to its first option when no filter is used)."""

    fsm: str = "NoFilter"
    fst: float = 0.3
    dgm: str = "None"
    sm: str = "None"
    fam: str = "None"
    fem: str = "None"
    cps: str = "MLP"
    ln: int = 1
    hs: int = 64
    lr: float = 0.001
    of: str = "Adam"
    bs: int = 32

    def __post_init__(self):
        for gene in GENES:
            object.__setattr__(self, gene, _coerce(gene, getattr(self, gene)))
        if self.fsm == "NoFilter":
            object.__setattr__(self, "fst", OPTIONS["fst"][0])

    def to_dict(self) -> dict:
        return {g: getattr(self, g) for g in GENES}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Genotype":
        unknown = set(d) - set(GENES)
        if unknown:
            raise InvalidOption(f"unknown gene(s): {', '.join(sorted(unknown))}")
        missing = [g for g in GENES if g not in d]
        if missing:
            raise InvalidOption(f"missing gene(s): {', '.join(missing)}")
        return cls(**{g: d[g] for g in GENES})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "Genotype":
        d = self.to_dict()
        d.update(changes)
        return Genotype.from_dict(d)

    @property
    def key(self) -> str:
        """Stable hash of the canonical encoding."""
        bits = "".join(map(str, encode(self)))
        return hashlib.sha1(bits.encode()).hexdigest()[:16]


def encode(g: Genotype) -> np.ndarray:
    bits = np.zeros(ENCODING_LENGTH, dtype=np.uint8)
    offset = 0
    for gene, n in zip(GENES, SEGMENTS):
        bits[offset + OPTIONS[gene].index(getattr(g, gene))] = 1
        offset += n
    return bits


def decode(bits) -> Genotype:
    bits = np.asarray(bits)
    if bits.shape != (ENCODING_LENGTH,):
        raise MalformedEncoding(f"encoding must have length {ENCODING_LENGTH}, got shape {bits.shape}")
    if not np.all((bits == 0) | (bits == 1)):
        raise MalformedEncoding("encoding must be 0/1")
    values, offset = {}, 0
    for gene, n in zip(GENES, SEGMENTS):
        seg = bits[offset:offset + n]
        if int(seg.sum()) != 1:
            raise MalformedEncoding(f"segment {gene!r} has {int(seg.sum())} ones, expected exactly 1")
        values[gene] = OPTIONS[gene][int(np.argmax(seg))]
        offset += n
    return Genotype(**values)


def encode_many(genotypes) -> np.ndarray:
    return np.stack([encode(g) for g in genotypes]).astype(np.float64) if genotypes else \
        np.zeros((0, ENCODING_LENGTH))


@dataclass(frozen=True)
class SearchSpace:
    """The full space, optionally with genes pinned to one option or a subset of options."""

    pins: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        norm = {}
        for gene, value in dict(self.pins).items():
            vals = value if isinstance(value, (list, tuple)) else (value,)
            if not vals:
                raise InvalidOption(f"gene {gene!r} pinned to an empty option set")
            norm[gene] = tuple(dict.fromkeys(_coerce(gene, v) for v in vals))
        object.__setattr__(self, "pins", norm)

    def options(self, gene: str) -> tuple:
        return self.pins.get(gene, OPTIONS[gene])

    def raw_size(self) -> int:
        return int(np.prod([len(self.options(g)) for g in GENES], dtype=np.int64))

    def __iter__(self) -> Iterator[Genotype]:
        """Distinct canonical genotypes in enumeration order."""
        seen = set()
        for combo in itertools.product(*(self.options(g) for g in GENES)):
            g = Genotype(*combo)
            if g not in seen:
                seen.add(g)
                yield g

    def canonical_size(self) -> int:
        n = self.raw_size()
        if "NoFilter" not in self.options("fsm"):
            return n
        n_fst = len(self.options("fst"))
        # every NoFilter combination collapses its fst copies into one
        return n - n // (len(self.options("fsm")) * n_fst) * (n_fst - 1)

    def contains(self, g: Genotype) -> bool:
        return all(getattr(g, gene) in self.options(gene) or (gene == "fst" and g.fsm == "NoFilter")
                   for gene in GENES)


FULL_SPACE = SearchSpace()


def space_size(space: SearchSpace = FULL_SPACE) -> int:
    return space.raw_size()


def random_genotype(rng: np.random.Generator, space: SearchSpace = FULL_SPACE) -> Genotype:
    values = []
    for gene in GENES:
        opts = space.options(gene)
        values.append(opts[int(rng.integers(len(opts)))])
    return Genotype(*values)


def mutate(g: Genotype, p_m: float, rng: np.random.Generator,
           space: SearchSpace = FULL_SPACE) -> Genotype:
    """Resample each gene with probability p_m to a different allowed option."""
    if not 0.0 <= p_m <= 1.0:
        raise ValueError(f"mutation rate must lie in [0, 1], got {p_m}")
    values = []
    for gene in GENES:
        cur = getattr(g, gene)
        others = [o for o in space.options(gene) if o != cur]
        if others and rng.random() < p_m:
            cur = others[int(rng.integers(len(others)))]
        values.append(cur)
    return Genotype(*values)


# --- assembly ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    t_s: int = 96
    t_p: int = 24
    kind: TaskKind = TaskKind.TASK1

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.t_s < 1 or self.t_p < 1:
            raise ValueError("t_s and t_p must be >= 1")

    @property
    def t_in(self) -> int:
        return self.t_s + (self.t_p if self.kind is TaskKind.TASK2 else 0)


def count_params(g: Genotype, t_in: int, t_out: int, n_features: int) -> int:
    """Exact trainable-parameter count from shape arithmetic alone."""
    dk = n_features
    total = 0
    if g.sm == "RevIN":
        total += 2 * dk
    elif g.sm == "DAIN":
        total += 3 * dk * dk + dk
    d = dk + (N_TIME_FEATURES if g.fam == "TimeFeatures" else 0)
    h = g.hs
    if g.fem == "LinearEmbed":
        total += d * h + h + h * d + d
    elif g.fem in ("Decomp", "MultiScaleDecomp"):
        total += t_in * t_out + t_out
    elif g.fem == "TimeFeatureMix":
        total += (t_in * h + h + h * t_in + t_in) + (d * h + h + h * d + d)
    elif g.fem == "FreqMix":
        nb = t_in // 2 + 1
        total += 2 * d * d + 2 * d + 2 * nb * nb + 2 * nb
    total += bl.cps_param_count(g.cps, g.ln, h, t_in, t_out, d)
    return total + d + 1


@dataclass(frozen=True)
class TrainSettings:
    lr: float
    optimizer: str
    batch_size: int


class ModelGraph:
    """A genotype wired into blocks; maps (B, T_in, D) inputs to (B, T_p, 1) forecasts."""

    def __init__(self, genotype: Genotype, task: TaskSpec, feature_mask: FeatureMask,
                 n_features: int, target_index: int, seed: int = 0,
                 feature_std: np.ndarray | None = None):
        g = self.genotype = genotype
        self.task = task
        self.feature_mask = feature_mask
        self.n_features = n_features
        if len(feature_mask.keep) != n_features:
            raise ShapeMismatch(f"feature mask covers {len(feature_mask.keep)} features, data has {n_features}")
        if not feature_mask.keep[target_index]:
            raise ValueError("feature mask must keep the target")
        self.kept = feature_mask.indices
        self.target_pos = int(np.searchsorted(self.kept, target_index))
        dk = len(self.kept)
        t_in, t_p = task.t_in, task.t_p
        d = dk + (N_TIME_FEATURES if g.fam == "TimeFeatures" else 0)
        self.io_shapes = (t_in, d, t_p)
        self.train_cfg = TrainSettings(g.lr, g.of, g.bs)
        self.noise_std = (np.ones(dk) if feature_std is None
                          else np.asarray(feature_std, np.float64)[self.kept])
        rng = np.random.default_rng(seed)
        self.root = bl.Module()
        add = self.root.child
        self.norm = None
        if g.sm == "RevIN":
            self.norm = add("revin", bl.RevIN(dk))
        elif g.sm == "DAIN":
            self.norm = add("dain", bl.DAIN(dk))
        self.fem = None
        self.trend_fc = None
        if g.fem == "LinearEmbed":
            self.fem = add("embed", bl.LinearEmbed(d, g.hs, rng))
        elif g.fem == "TimeFeatureMix":
            self.fem = add("mix", bl.TimeFeatureMix(t_in, d, g.hs, rng))
        elif g.fem == "FreqMix":
            self.fem = add("freq", bl.FrequencyMix(t_in, d, rng))
        elif g.fem in ("Decomp", "MultiScaleDecomp"):
            self.trend_fc = add("trend", bl.TimeLinear(t_in, t_p, rng))
        self.cps = add("cps", bl.build_cps(g.cps, g.ln, g.hs, t_in, t_p, d, rng))
        self.head = add("head", bl.AggregateHead(d, rng))
        self.graph = ad.Graph(self._graph_fn, self.parameters(), inputs=("x", "time"))

    def parameters(self) -> dict[str, Tensor]:
        return self.root.parameters()

    def param_count(self) -> int:
        return self.root.num_params()

    def _graph_fn(self, inputs: dict[str, Tensor]) -> Tensor:
        return self.forward(inputs["x"].data, inputs["time"].data)

    def forward(self, x: np.ndarray, time_feats: np.ndarray | None = None, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        g = self.genotype
        t_in, d_eff, t_p = self.io_shapes
        x = np.asarray(x, np.float64)
        if x.ndim != 3 or x.shape[1] != t_in or x.shape[2] != self.n_features:
            raise ShapeMismatch(f"expected input (B, {t_in}, {self.n_features}), got {x.shape}")
        x = x[:, :, self.kept]
        if g.dgm == "Gaussian" and train:
            x = bl.gaussian_augment(x, bl.GAUSSIAN_SIGMA_FRAC, rng, True, self.noise_std)
        h: Tensor = ad.tensor(x)
        stats = None
        if isinstance(self.norm, bl.RevIN):
            h, stats = self.norm.norm(h, stat_len=self.task.t_s)
        elif isinstance(self.norm, bl.DAIN):
            h = self.norm(h)
        if g.fam == "TimeFeatures":
            if time_feats is None:
                raise ShapeMismatch("time features required by this architecture")
            h = bl.add_time_features(h, time_feats)
        trend = None
        if g.fem == "Decomp":
            h, trend = bl.decompose(h, bl.DECOMP_KERNEL)
        elif g.fem == "MultiScaleDecomp":
            h, trend = bl.multi_scale_decompose(h, bl.MULTI_SCALE_KERNELS)
        elif g.fem == "TimeFeatureMix":
            h = self.fem(h, train=train, rng=rng)
        elif self.fem is not None:
            h = self.fem(h)
        out = self.cps(h)
        if trend is not None:
            out = out + self.trend_fc(trend)
        y = self.head(out)
        if stats is not None:
            y = self.norm.denorm(y, stats, self.target_pos)
        return y

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            raise ShapeMismatch(f"state keys differ from model parameters: {sorted(set(params) ^ set(state))}")
        for k, p in params.items():
            v = np.asarray(state[k], np.float64)
            if v.shape != p.data.shape:
                raise ShapeMismatch(f"parameter {k}: expected {p.data.shape}, got {v.shape}")
            p.data[...] = v


def fit_mask(g: Genotype, train_frame: TimeSeriesFrame) -> FeatureMask:
    return select_features(g.fsm, train_frame, g.fst)


def assemble(g: Genotype, task: TaskSpec, train_frame: TimeSeriesFrame, seed: int = 0,
             mask: FeatureMask | None = None) -> ModelGraph:
    if not isinstance(g, Genotype):
        g = Genotype.from_dict(g)
    mask = mask if mask is not None else fit_mask(g, train_frame)
    std = np.std(train_frame.values, axis=0)
    return ModelGraph(g, task, mask, train_frame.n_features, train_frame.target_index, seed,
                      feature_std=np.where(std > 0, std, 1.0))


def param_count(m: ModelGraph) -> int:
    return m.param_count()
