"""The feature-calibration module: stacked attention + feed-forward layers
with partitioned linear projections and feature shuffling.

Each layer applies, over a window of one client's feature vectors:

    x -> layer_norm(x + shuffle(proj_out(multi_head_attention(qkv(x)))))
      -> layer_norm(x + shuffle(ffn2(relu(shuffle(ffn1(x))))))

where every projection is block-diagonal with ``num_partitions`` square
blocks and is followed by a parameter-free shuffling permutation that
interleaves partition outputs across attention heads. Rows form an
unordered pool (no positional encoding), so a target row's output is
invariant to permutations of the other rows.

Projections are evaluated with ``np.einsum`` (not BLAS): einsum computes
each output element with a batch-size-independent reduction order, which
keeps masked windows bitwise identical to physically truncated ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .tensor_ops import MacCounter, Param, layer_norm, relu, scaled_dot_attention

ABLATION_TAGS = ("none", "no_attention", "no_partition", "no_shuffle")


@dataclass(frozen=True)
class IciiaConfig:
    """Dimensions and numeric options of the calibration module."""

    feature_dim: int
    num_heads: int = 4
    num_partitions: int = 1
    num_layers: int = 2
    train_window: int = 16
    max_history: int = 63
    ln_eps: float = 1e-5

    def __post_init__(self):
        d = self.feature_dim
        for name in ("feature_dim", "num_heads", "num_partitions", "train_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.num_layers < 0:  # zero layers = empty stack = identity
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.max_history < 0:
            raise ConfigError(f"max_history must be >= 0, got {self.max_history}")
        if d % self.num_partitions != 0:
            raise ConfigError(f"feature_dim {d} is not divisible by num_partitions "
                              f"{self.num_partitions}")
        if d % self.num_heads != 0:
            raise ConfigError(f"feature_dim {d} is not divisible by num_heads {self.num_heads}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be > 0, got {self.ln_eps}")

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.num_heads

    @property
    def partition_dim(self) -> int:
        return self.feature_dim // self.num_partitions

    def to_dict(self) -> dict:
        return {"feature_dim": self.feature_dim, "num_heads": self.num_heads,
                "num_partitions": self.num_partitions, "num_layers": self.num_layers,
                "train_window": self.train_window, "max_history": self.max_history,
                "ln_eps": self.ln_eps}

    @classmethod
    def from_dict(cls, d: dict) -> "IciiaConfig":
        return cls(**d)


class PartitionedProjection:
    """Block-diagonal projection: P independent (D/P, D/P) blocks plus a 1xD bias.

    Weight parameter count is exactly D^2/P; with the bias, D^2/P + D.
    """

    __slots__ = ("weight", "bias", "num_partitions")

    def __init__(self, weight: Param, bias: Param, num_partitions: int):
        dp = weight.value.shape[1]
        if weight.value.shape[0] != num_partitions * dp:
            raise ShapeError(f"projection weight {weight.value.shape} does not hold "
                             f"{num_partitions} square blocks")
        if bias.value.shape != (1, num_partitions * dp):
            raise ShapeError(f"projection bias {bias.value.shape} does not match "
                             f"feature width {num_partitions * dp}")
        self.weight = weight
        self.bias = bias
        self.num_partitions = num_partitions

    @property
    def blocks(self) -> np.ndarray:
        """(P, D/P, D/P) view of the stacked block weights."""
        dp = self.weight.value.shape[1]
        return self.weight.value.reshape(self.num_partitions, dp, dp)

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


def partitioned_project(x: np.ndarray, proj: PartitionedProjection,
                        counter: MacCounter | None = None):
    """Project each of the P feature blocks through its own square weight block."""
    n, d = x.shape
    p = proj.num_partitions
    dp = d // p
    if d % p != 0 or proj.weight.value.shape != (p * dp, dp):
        raise ConfigError(f"partitioned_project: width {d} not divisible into "
                          f"{p} blocks matching weight {proj.weight.value.shape}")
    xb = x.reshape(n, p, dp)
    wb = proj.weight.value.reshape(p, dp, dp)
    y = np.einsum("npi,pij->npj", xb, wb).reshape(n, d) + proj.bias.value
    if counter is not None:
        counter.add(n * p * dp * dp)

    def backward(upstream: np.ndarray) -> np.ndarray:
        ub = upstream.reshape(n, p, dp)
        proj.bias.grad += upstream.sum(axis=0, keepdims=True)
        proj.weight.grad.reshape(p, dp, dp)[...] += np.einsum("npi,npj->pij", xb, ub)
        return np.einsum("npj,pij->npi", ub, wb).reshape(n, d)

    return y, backward


def shuffle(x: np.ndarray, num_partitions: int) -> np.ndarray:
    """Interleave partition outputs: index p*(D/P)+o moves to o*P+p.

    Implemented as a view (P, D/P) -> transpose -> flatten per row; a pure
    permutation, so it is parameter-free and exactly invertible.
    """
    n, d = x.shape
    if d % num_partitions != 0:
        raise ConfigError(f"shuffle: width {d} not divisible by {num_partitions} partitions")
    dp = d // num_partitions
    return np.ascontiguousarray(x.reshape(n, num_partitions, dp).transpose(0, 2, 1)).reshape(n, d)


def inverse_shuffle(x: np.ndarray, num_partitions: int) -> np.ndarray:
    """Inverse permutation of :func:`shuffle` (index o*P+p moves back to p*(D/P)+o)."""
    n, d = x.shape
    if d % num_partitions != 0:
        raise ConfigError(f"inverse_shuffle: width {d} not divisible by {num_partitions}")
    dp = d // num_partitions
    return np.ascontiguousarray(x.reshape(n, dp, num_partitions).transpose(0, 2, 1)).reshape(n, d)


def shuffle_index_map(feature_dim: int, num_partitions: int) -> np.ndarray:
    """source index feeding each output slot: shuffle(x)[:, j] == x[:, map[j]]."""
    if feature_dim % num_partitions != 0:
        raise ConfigError(f"width {feature_dim} not divisible by {num_partitions}")
    dp = feature_dim // num_partitions
    return np.arange(feature_dim).reshape(num_partitions, dp).T.ravel()


@dataclass
class IciiaLayerParams:
    """All learnable tensors of one layer, in declaration order."""

    proj_q: PartitionedProjection
    proj_k: PartitionedProjection
    proj_v: PartitionedProjection
    proj_out: PartitionedProjection
    ffn1: PartitionedProjection
    ffn2: PartitionedProjection
    ln1_gain: Param
    ln1_bias: Param
    ln2_gain: Param
    ln2_bias: Param

    def projections(self) -> list[PartitionedProjection]:
        return [self.proj_q, self.proj_k, self.proj_v, self.proj_out, self.ffn1, self.ffn2]

    def params(self) -> list[Param]:
        out: list[Param] = []
        for proj in self.projections():
            out.extend(proj.params())
        out.extend([self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias])
        return out


@dataclass
class IciiaParams:
    """Parameters of the full stack of layers."""

    layers: list[IciiaLayerParams] = field(default_factory=list)

    def params(self) -> list[Param]:
        out: list[Param] = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def num_scalars(self) -> int:
        return sum(p.value.size for p in self.params())

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def copy(self) -> "IciiaParams":
        return _map_params(self, lambda p: p.copy())

    def astype(self, dtype) -> "IciiaParams":
        return _map_params(self, lambda p: p.astype(dtype))

    @property
    def dtype(self):
        return self.layers[0].ln1_gain.dtype if self.layers else np.float32


def _map_params(params: IciiaParams, fn) -> IciiaParams:
    layers = []
    for layer in params.layers:
        projs = [PartitionedProjection(fn(pr.weight), fn(pr.bias), pr.num_partitions)
                 for pr in layer.projections()]
        layers.append(IciiaLayerParams(*projs, fn(layer.ln1_gain), fn(layer.ln1_bias),
                                       fn(layer.ln2_gain), fn(layer.ln2_bias)))
    return IciiaParams(layers)


def init_params(config: IciiaConfig, seed: int, dtype=np.float32) -> IciiaParams:
    """Deterministic initialization: block weights uniform in +-sqrt(3/(D/P)),
    biases zero, layer-norm gains one."""
    rng = np.random.default_rng(seed)
    d, p = config.feature_dim, config.num_partitions
    dp = config.partition_dim
    bound = np.sqrt(6.0 / (dp + dp))
    layers = []
    for _ in range(config.num_layers):
        projs = []
        for _ in range(6):
            w = rng.uniform(-bound, bound, size=(p * dp, dp)).astype(dtype)
            projs.append(PartitionedProjection(Param(w), Param(np.zeros((1, d), dtype=dtype)), p))
        layers.append(IciiaLayerParams(
            *projs,
            ln1_gain=Param(np.ones((1, d), dtype=dtype)),
            ln1_bias=Param(np.zeros((1, d), dtype=dtype)),
            ln2_gain=Param(np.ones((1, d), dtype=dtype)),
            ln2_bias=Param(np.zeros((1, d), dtype=dtype)),
        ))
    return IciiaParams(layers)


@dataclass
class AttentionWindow:
    """A pool of feature rows fed jointly through the module.

    ``valid`` marks rows that participate in attention (None = all);
    ``target_rows`` marks rows whose outputs are consumed (None = all).
    """

    features: np.ndarray
    valid: np.ndarray | None = None
    target_rows: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"window features must be a non-empty 2-D array, "
                             f"got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != (n,):
                raise ShapeError(f"window mask shape {self.valid.shape} != ({n},)")
            if not self.valid.any():
                raise UsageError("window has no valid rows")
        if self.target_rows is not None:
            for r in self.target_rows:
                if not (0 <= r < n):
                    raise ShapeError(f"target row {r} out of range for window of {n}")
                if self.valid is not None and not self.valid[r]:
                    raise UsageError(f"target row {r} is masked out")

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum()) if self.valid is not None else self.features.shape[0]


def _check_ablation(ablation: str):
    if ablation not in ABLATION_TAGS:
        raise UsageError(f"unknown ablation tag {ablation!r}; expected one of {ABLATION_TAGS}")


def mhsa_block(x: np.ndarray, layer: IciiaLayerParams, config: IciiaConfig,
               valid: np.ndarray | None = None, counter: MacCounter | None = None,
               ablation: str = "none"):
    """Multi-head attention sub-layer with residual connection and post-norm.

    Returns (y, backward, probs) where probs is the (H, B, B) attention map.
    """
    n, d = x.shape
    h, dh = config.num_heads, config.head_dim
    p = config.num_partitions
    use_shuffle = ablation != "no_shuffle"

    def project(inp, proj):
        y, bwd = partitioned_project(inp, proj, counter)
        if use_shuffle:
            y = shuffle(y, p)

            def chained(up, bwd=bwd):
                return bwd(inverse_shuffle(up, p))

            return y, chained
        return y, bwd

    q, bq = project(x, layer.proj_q)
    k, bk = project(x, layer.proj_k)
    v, bv = project(x, layer.proj_v)

    probs = np.zeros((h, n, n), dtype=x.dtype)
    if ablation == "no_attention":
        # each row keeps its own value vector; no inter-image mixing
        attn = v
        rows = np.arange(n) if valid is None else np.flatnonzero(valid)
        probs[:, rows, rows] = 1.0

        def battn(up):
            return up
    else:
        head_bwds = []
        attn = np.zeros_like(v)
        for i in range(h):
            sl = slice(i * dh, (i + 1) * dh)
            out_i, bwd_i, probs_i = scaled_dot_attention(q[:, sl], k[:, sl], v[:, sl],
                                                         valid, counter)
            attn[:, sl] = out_i
            probs[i] = probs_i
            head_bwds.append(bwd_i)

        def battn(up):
            dq = np.zeros_like(q)
            dk = np.zeros_like(k)
            dv = np.zeros_like(v)
            for i, bwd_i in enumerate(head_bwds):
                sl = slice(i * dh, (i + 1) * dh)
                dq[:, sl], dk[:, sl], dv[:, sl] = bwd_i(up[:, sl])
            return dq, dk, dv

    o, bo = project(attn, layer.proj_out)
    y, bln = layer_norm(x + o, layer.ln1_gain, layer.ln1_bias, config.ln_eps)

    def backward(upstream: np.ndarray) -> np.ndarray:
        dres = bln(upstream)
        dattn = bo(dres)
        if ablation == "no_attention":
            dv = dattn
            dx = bv(dv)
        else:
            dq, dk, dv = battn(dattn)
            dx = bq(dq) + bk(dk) + bv(dv)
        return dres + dx

    return y, backward, probs


def ffn_block(x: np.ndarray, layer: IciiaLayerParams, config: IciiaConfig,
              counter: MacCounter | None = None, ablation: str = "none"):
    """Feed-forward sub-layer (width D -> D -> D) with residual and post-norm."""
    p = config.num_partitions
    use_shuffle = ablation != "no_shuffle"

    h1, b1 = partitioned_project(x, layer.ffn1, counter)
    if use_shuffle:
        h1 = shuffle(h1, p)
    r, br = relu(h1)
    h2, b2 = partitioned_project(r, layer.ffn2, counter)
    if use_shuffle:
        h2 = shuffle(h2, p)
    y, bln = layer_norm(x + h2, layer.ln2_gain, layer.ln2_bias, config.ln_eps)

    def backward(upstream: np.ndarray) -> np.ndarray:
        dres = bln(upstream)
        d2 = inverse_shuffle(dres, p) if use_shuffle else dres
        dr = b2(d2)
        d1 = br(dr)
        if use_shuffle:
            d1 = inverse_shuffle(d1, p)
        return dres + b1(d1)

    return y, backward


def iciia_forward(window: AttentionWindow, params: IciiaParams, config: IciiaConfig,
                  counter: MacCounter | None = None, ablation: str = "none"):
    """Run the full stack over a window.

    Returns (output, backward, scores): output has the window's shape,
    backward maps an upstream gradient to the input-feature gradient, and
    scores lists one (H, B, B) attention map per layer. Invalid rows never
    influence valid rows; their outputs are finite but unspecified.
    """
    _check_ablation(ablation)
    x = np.asarray(window.features)
    if x.shape[1] != config.feature_dim:
        raise ShapeError(f"window width {x.shape[1]} != feature_dim {config.feature_dim}")
    if len(params.layers) != config.num_layers:
        raise ConfigError(f"params hold {len(params.layers)} layers, config expects "
                          f"{config.num_layers}")
    if x.dtype != params.dtype:
        x = x.astype(params.dtype)
    valid = window.valid
    if valid is not None and not valid.any():
        raise UsageError("window has no valid rows")

    backwards = []
    scores = []
    for layer in params.layers:
        x, bwd_a, probs = mhsa_block(x, layer, config, valid, counter, ablation)
        backwards.append(bwd_a)
        x, bwd_f = ffn_block(x, layer, config, counter, ablation)
        backwards.append(bwd_f)
        scores.append(probs)

    def backward(upstream: np.ndarray) -> np.ndarray:
        d = upstream
        for bwd in reversed(backwards):
            d = bwd(d)
        return d

    return x, backward, scores


def export_attention_scores(window: AttentionWindow, params: IciiaParams,
                            config: IciiaConfig, ablation: str = "none"):
    """Run one forward pass and return its per-layer (H, B, B) attention maps."""
    _, _, scores = iciia_forward(window, params, config, ablation=ablation)
    return scores


class IciiaModel:
    """Stateful wrapper holding parameters and the last forward's attention maps."""

    def __init__(self, params: IciiaParams, config: IciiaConfig, ablation: str = "none"):
        _check_ablation(ablation)
        self.params = params
        self.config = config
        self.ablation = ablation
        self._last_scores = None

    def forward(self, window: AttentionWindow) -> np.ndarray:
        out, _, scores = iciia_forward(window, self.params, self.config,
                                       ablation=self.ablation)
        self._last_scores = scores
        return out

    def export_attention_scores(self):
        if self._last_scores is None:
            raise UsageError("export_attention_scores called before any forward pass")
        return self._last_scores
