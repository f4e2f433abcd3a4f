"""EcoPerceiver: windowed cross attention onto a temporal latent array.

The latent array holds one token per hour of the context window. Each WCA
block lets every latent token cross-attend to the observations of its own
hour only (the time axis is folded into the batch axis), then mixes tokens
over time with causal self attention. ``N`` such blocks share one set of
weights; ``M`` unshared self-attention blocks follow, and a linear head reads
the last hour's token.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import catalog
from .encoding import EncodingConfig, WindowBatch, build_input, observational_dropout
from .errors import ConfigError
from .tensor import (
    ContractError,
    Tensor,
    broadcast_to,
    gelu,
    get_default_dtype,
    layer_norm,
    linear,
    mask_rows,
    single_query_attention,
    softmax,
    swap_last,
)

logger = logging.getLogger(__name__)

REFERENCE_PARAMETER_COUNT = 988_633


@dataclass(frozen=True)
class ModelConfig:
    H_l: int = 128
    H_a: int = 128
    n_heads: int = 4
    N: int = 8
    M: int = 4
    T: int = 32
    K: int = 12
    l_emb: int = 16
    dropout_p: float = 0.3
    mlp_expansion: int = 2
    use_causal_mask: bool = True
    use_fourier: bool = True
    use_images: bool = True
    use_obs_dropout: bool = True
    tabular_codes: tuple = field(default=catalog.PREDICTOR_CODES)
    band_codes: tuple = field(default=catalog.BAND_CODES)
    ln_eps: float = 1e-5

    def __post_init__(self):
        if min(self.H_l, self.H_a, self.n_heads, self.mlp_expansion) < 1:
            raise ConfigError("H_l, H_a, n_heads and mlp_expansion must be positive")
        if self.H_a % self.n_heads:
            raise ConfigError(f"H_a={self.H_a} is not divisible by n_heads={self.n_heads}")
        if self.N < 1 or self.M < 0 or self.T < 1:
            raise ConfigError(f"need N >= 1, M >= 0, T >= 1 (got N={self.N}, M={self.M}, T={self.T})")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        object.__setattr__(self, "tabular_codes", tuple(self.tabular_codes))
        object.__setattr__(self, "band_codes", tuple(self.band_codes))
        for code in self.tabular_codes + self.band_codes:
            catalog.lookup(code)

    def variables(self) -> tuple:
        tab = tuple(catalog.lookup(c) for c in self.tabular_codes)
        bands = tuple(catalog.lookup(c) for c in self.band_codes) if self.use_images else ()
        return tab + bands

    def encoding(self) -> EncodingConfig:
        return EncodingConfig(K=self.K, l_emb=self.l_emb, T=self.T,
                              variable_catalog=self.variables(), use_fourier=self.use_fourier)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------
def _ln_shapes(prefix, width):
    return {f"{prefix}.gamma": (width,), f"{prefix}.beta": (width,)}


def _affine_shapes(prefix, fan_in, fan_out):
    return {f"{prefix}.weight": (fan_in, fan_out), f"{prefix}.bias": (fan_out,)}


def _feed_forward_shapes(prefix, cfg):
    hidden = cfg.mlp_expansion * cfg.H_l
    return {**_ln_shapes(f"{prefix}.ln_ff", cfg.H_l),
            **_affine_shapes(f"{prefix}.ff1", cfg.H_l, hidden),
            **_affine_shapes(f"{prefix}.ff2", hidden, cfg.H_l)}


def _cross_shapes(prefix, cfg, H_i):
    return {**_ln_shapes(f"{prefix}.ln_q", cfg.H_l),
            **_ln_shapes(f"{prefix}.ln_kv", H_i),
            **_affine_shapes(f"{prefix}.q", cfg.H_l, cfg.H_a),
            **_affine_shapes(f"{prefix}.k", H_i, cfg.H_a),
            **_affine_shapes(f"{prefix}.v", H_i, cfg.H_a),
            **_affine_shapes(f"{prefix}.o", cfg.H_a, cfg.H_l),
            **_feed_forward_shapes(prefix, cfg)}


def _self_shapes(prefix, cfg):
    return {**_ln_shapes(f"{prefix}.ln", cfg.H_l),
            **_affine_shapes(f"{prefix}.q", cfg.H_l, cfg.H_a),
            **_affine_shapes(f"{prefix}.k", cfg.H_l, cfg.H_a),
            **_affine_shapes(f"{prefix}.v", cfg.H_l, cfg.H_a),
            **_affine_shapes(f"{prefix}.o", cfg.H_a, cfg.H_l),
            **_feed_forward_shapes(prefix, cfg)}


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Name -> shape for every trainable array, in canonical order."""
    enc = cfg.encoding()
    shapes = {"embedding": (enc.n_variables, cfg.l_emb)}
    if enc.n_bands:
        shapes["band_projection"] = (catalog.PIXELS_PER_BAND, enc.value_width)
    shapes["latent"] = (cfg.H_l,)
    shapes.update(_cross_shapes("wca.cross", cfg, enc.H_i))
    shapes.update(_self_shapes("wca.self", cfg))
    for i in range(cfg.M):
        shapes.update(_self_shapes(f"csa.{i}", cfg))
    shapes.update(_affine_shapes("head", cfg.H_l, 1))
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Number of trainable scalars. Independent of ``T``."""
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _truncated_normal(rng, shape, std=0.02, bound=2.0):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_parameter(name: str, shape: tuple, seed: int) -> np.ndarray:
    """Initial value of one parameter; depends only on ``(seed, name)``."""
    leaf = name.rsplit(".", 1)[-1]
    if name in ("embedding", "latent"):
        return _truncated_normal(_rng_for(seed, name), shape)
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta", "bias"):
        return np.zeros(shape)
    bound = 1.0 / np.sqrt(shape[0])
    return _rng_for(seed, name).uniform(-bound, bound, size=shape)


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict:
    dtype = dtype or get_default_dtype()
    return {name: Tensor(init_parameter(name, shape, seed), requires_grad=True, dtype=dtype, name=name)
            for name, shape in parameter_shapes(cfg).items()}


def sinusoidal_positions(T: int, width: int) -> np.ndarray:
    """Fixed (T, width) position code: sin/cos pairs at geometric wavelengths."""
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(0, width, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / width)
    out = np.zeros((T, width))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)[:, : width // 2]
    return out


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------
def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., L, H_a) -> (..., heads, L, d)
    *lead, L, H = x.shape
    x = x.reshape(*lead, L, n_heads, H // n_heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., heads, L, d) -> (..., L, H_a)
    *lead, h, L, d = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes).reshape(*lead, L, h * d)


def _feed_forward(x: Tensor, params: dict, prefix: str, cfg: ModelConfig) -> Tensor:
    h = layer_norm(x, params[f"{prefix}.ln_ff.gamma"], params[f"{prefix}.ln_ff.beta"], cfg.ln_eps)
    h = gelu(linear(h, params[f"{prefix}.ff1.weight"], params[f"{prefix}.ff1.bias"]))
    return linear(h, params[f"{prefix}.ff2.weight"], params[f"{prefix}.ff2.bias"])


def cross_attention_kv(inputs: Tensor, mask, params: dict, cfg: ModelConfig, prefix: str = "wca.cross"):
    """Keys and values of the observation tokens, shaped ``(B*T, V_t, H_a)``."""
    B, T, V, _ = inputs.shape
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    h = layer_norm(inputs, p("ln_kv.gamma"), p("ln_kv.beta"), cfg.ln_eps)
    k = linear(h, p("k.weight"), p("k.bias"))
    v = linear(h, p("v.weight"), p("v.bias"))
    return k.reshape(B * T, V, cfg.H_a), v.reshape(B * T, V, cfg.H_a)


def windowed_cross_attention(latent: Tensor, inputs: Tensor, mask, params: dict, cfg: ModelConfig,
                             prefix: str = "wca.cross", kv=None) -> Tensor:
    """Each latent token attends to the ``V_t`` observations of its own hour.

    Folding ``T`` into the batch axis gives ``B*T`` independent attentions
    with one query each. An hour whose observations are all masked passes
    its latent token through unchanged.
    """
    B, T, H_l = latent.shape
    mask = np.asarray(mask, dtype=bool)
    if inputs.shape[:2] != (B, T) or mask.shape != inputs.shape[:3]:
        raise ContractError(f"latent {latent.shape}, inputs {inputs.shape}, mask {mask.shape} disagree")
    V = inputs.shape[2]
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    if kv is None:
        kv = cross_attention_kv(inputs, mask, params, cfg, prefix)
    k, v = kv
    d = cfg.H_a // cfg.n_heads
    q = linear(layer_norm(latent, p("ln_q.gamma"), p("ln_q.beta"), cfg.ln_eps), p("q.weight"), p("q.bias"))
    q = q.reshape(B * T, cfg.H_a) * (1.0 / np.sqrt(d))
    out = single_query_attention(q, k, v, mask.reshape(B * T, V), cfg.n_heads).reshape(B, T, cfg.H_a)
    out = linear(out, p("o.weight"), p("o.bias"))
    observed = mask.any(axis=-1)
    latent = latent + mask_rows(out, observed)
    return latent + mask_rows(_feed_forward(latent, params, prefix, cfg), observed)


def causal_self_attention(latent: Tensor, params: dict, cfg: ModelConfig, prefix: str,
                          use_causal_mask: bool | None = None, return_weights: bool = False):
    """Multi-head self attention over the time axis, lower-triangular when causal."""
    if use_causal_mask is None:
        use_causal_mask = cfg.use_causal_mask
    B, T, _ = latent.shape
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    d = cfg.H_a // cfg.n_heads
    h = layer_norm(latent, p("ln.gamma"), p("ln.beta"), cfg.ln_eps)
    q = _split_heads(linear(h, p("q.weight"), p("q.bias")), cfg.n_heads) * (1.0 / np.sqrt(d))
    k = _split_heads(linear(h, p("k.weight"), p("k.bias")), cfg.n_heads)
    v = _split_heads(linear(h, p("v.weight"), p("v.bias")), cfg.n_heads)
    allowed = np.tril(np.ones((T, T), dtype=bool)) if use_causal_mask else None
    attn = softmax(q @ swap_last(k), allowed)
    out = linear(_merge_heads(attn @ v), p("o.weight"), p("o.bias"))
    latent = latent + out
    latent = latent + _feed_forward(latent, params, prefix, cfg)
    return (latent, attn) if return_weights else latent


def forward(batch: WindowBatch, params: dict, cfg: ModelConfig, mode: str = "eval",
            rng: np.random.Generator | None = None, return_latent: bool = False) -> Tensor:
    """Predicted flux for every window in the batch, shape ``(B,)``.

    With ``return_latent`` the ``(B, T, H_l)`` latent array before the head is
    returned instead.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    enc = cfg.encoding()
    if enc.n_bands == 0 and batch.mask.shape[-1] > enc.n_tabular:
        # image ablation: drop band tokens a loader may still deliver
        batch = WindowBatch(batch.values, batch.bands[:, :, :0], batch.mask[..., :enc.n_tabular], batch.target)
    inputs, mask = build_input(batch, params, enc)
    if mode == "train" and cfg.use_obs_dropout and cfg.dropout_p > 0:
        if rng is None:
            raise ContractError("train mode needs an rng for observational dropout")
        mask = observational_dropout(mask, cfg.dropout_p, rng)
    B, T = mask.shape[:2]
    positions = Tensor(sinusoidal_positions(T, cfg.H_l), dtype=inputs.dtype)
    latent = broadcast_to(params["latent"], (B, T, cfg.H_l)) + positions
    # shared WCA weights and identical inputs: keys/values are the same in every block
    kv = cross_attention_kv(inputs, mask, params, cfg)
    for _ in range(cfg.N):
        latent = windowed_cross_attention(latent, inputs, mask, params, cfg, kv=kv)
        latent = causal_self_attention(latent, params, cfg, "wca.self")
    for i in range(cfg.M):
        latent = causal_self_attention(latent, params, cfg, f"csa.{i}")
    if return_latent:
        return latent
    out = linear(latent[:, T - 1, :], params["head.weight"], params["head.bias"])
    return out.reshape(B)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=pred.dtype)
    if pred.ndim != 1 or pred.shape != target.shape:
        raise ContractError(f"pred {pred.shape} and target {target.shape} must be equal-length vectors")
    if pred.shape[0] < 1:
        raise ContractError("mse_loss on an empty batch")
    diff = pred - target
    return (diff * diff).mean()


class EcoPerceiver:
    """Parameters plus config, with convenience wrappers around :func:`forward`."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None, params: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed, dtype)
        expected = parameter_shapes(cfg)
        got = {k: v.shape for k, v in self.params.items()}
        if got != {k: tuple(s) for k, s in expected.items()}:
            raise ConfigError("parameter set does not match the model config")

    def __call__(self, batch, mode="eval", rng=None, return_latent=False) -> Tensor:
        return forward(batch, self.params, self.cfg, mode=mode, rng=rng, return_latent=return_latent)

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict):
        for k, v in state.items():
            self.params[k].data[...] = v

    def predict(self, windows, batch_size: int = 512) -> np.ndarray:
        """Eval-mode predictions for a :class:`WindowBatch` or window set."""
        if isinstance(windows, WindowBatch):
            return self(windows).data.astype(np.float64)
        n = len(windows)
        out = np.empty(n, dtype=np.float64)
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            out[idx] = self(windows.gather(idx)).data
        return out


def log_parameter_count(cfg: ModelConfig) -> int:
    n = parameter_count(cfg)
    logger.info("EcoPerceiver parameter count: %d (reference architecture reports %d)", n, REFERENCE_PARAMETER_COUNT)
    return n
