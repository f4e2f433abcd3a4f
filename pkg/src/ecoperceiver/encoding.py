"""Turning normalised observations into the model's stacked input tokens.

Every observation becomes one token of width ``H_i``: a learned per-variable
embedding followed by a value encoding. Tabular values use a multi-frequency
sinusoidal encoding; each imagery band (64 pixels) goes through a shared
linear projection to the same width. A boolean modality mask marks which
tokens exist.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import catalog
from .catalog import CatalogError, Variable
from .errors import ConfigError
from .tensor import ContractError, Tensor, broadcast_to, concat, get_default_dtype, mask_rows, matmul


@dataclass(frozen=True)
class EncodingConfig:
    K: int = 12
    l_emb: int = 16
    T: int = 32
    variable_catalog: tuple[Variable, ...] = field(default=catalog.PREDICTORS + catalog.BANDS)
    use_fourier: bool = True

    def __post_init__(self):
        if self.K < 1 or self.l_emb < 1 or self.T < 1:
            raise ConfigError(f"K, l_emb and T must be positive (got {self.K}, {self.l_emb}, {self.T})")
        for v in self.variable_catalog:
            if v.is_band and v.pixels != catalog.PIXELS_PER_BAND:
                raise ConfigError(f"band {v.code} must carry {catalog.PIXELS_PER_BAND} pixels")
        kinds = [v.is_band for v in self.variable_catalog]
        if kinds != sorted(kinds):
            raise ConfigError("tabular variables must precede spectral bands in the catalog")

    @property
    def n_variables(self) -> int:
        return len(self.variable_catalog)

    @property
    def n_tabular(self) -> int:
        return sum(not v.is_band for v in self.variable_catalog)

    @property
    def n_bands(self) -> int:
        return sum(v.is_band for v in self.variable_catalog)

    @property
    def value_width(self) -> int:
        return 2 * self.K if self.use_fourier else 1

    @property
    def H_i(self) -> int:
        return self.l_emb + self.value_width


@dataclass
class ObservationWindow:
    """One training sample: ``T`` hours of observations ending at the target hour."""

    values: np.ndarray   # (T, V_tab), 0 where missing
    bands: np.ndarray    # (T, V_band, 64), missing pixels imputed to 0
    mask: np.ndarray     # (T, V_t), True = present
    target: float


@dataclass
class WindowBatch:
    values: np.ndarray   # (B, T, V_tab)
    bands: np.ndarray    # (B, T, V_band, 64)
    mask: np.ndarray     # (B, T, V_t)
    target: np.ndarray   # (B,)

    def __len__(self):
        return len(self.target)

    @classmethod
    def stack(cls, windows) -> "WindowBatch":
        windows = list(windows)
        return cls(
            values=np.stack([w.values for w in windows]),
            bands=np.stack([w.bands for w in windows]),
            mask=np.stack([w.mask for w in windows]),
            target=np.array([w.target for w in windows]),
        )


def fourier_encode(x, K: int) -> np.ndarray:
    """Encode ``x`` as ``[sin(2^k pi x), cos(2^k pi x)]`` for ``k = 0..K-1``.

    Pairs are interleaved with ascending frequency, so the result has a
    trailing axis of length ``2K``. The phase ``2^k x`` is reduced modulo 2
    in float64 before the trig call (scaling by a power of two and ``fmod``
    are both exact), which makes ``x`` and ``x + 2`` encode to the same
    vector even at high frequencies.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    x = np.asarray(x, dtype=np.float64)
    scales = np.exp2(np.arange(K, dtype=np.float64))
    dtype = get_default_dtype()
    phase = (np.mod(x[..., None] * scales, 2.0) * np.pi).astype(dtype)
    out = np.empty(x.shape + (2 * K,), dtype=dtype)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def value_features(x, cfg: EncodingConfig) -> np.ndarray:
    if cfg.use_fourier:
        return fourier_encode(x, cfg.K)
    return np.asarray(x, dtype=get_default_dtype())[..., None]


def _embedding_row(embeddings, index: int, cfg: EncodingConfig) -> np.ndarray:
    if not 0 <= index < cfg.n_variables:
        raise CatalogError(f"variable index {index} outside catalog of {cfg.n_variables}")
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    return emb[index]


def encode_tabular(value, variable_index: int, embeddings, cfg: EncodingConfig):
    """Token for one tabular observation; returns ``(vector, present)``.

    A missing value (``None`` or NaN) yields a zero vector and
    ``present=False``.
    """
    row = _embedding_row(embeddings, variable_index, cfg)
    if cfg.variable_catalog[variable_index].is_band:
        raise CatalogError(f"index {variable_index} is a spectral band, not a tabular variable")
    dtype = get_default_dtype()
    if value is None or not np.isfinite(value):
        return np.zeros(cfg.H_i, dtype=dtype), False
    return np.concatenate([row.astype(dtype), value_features(value, cfg)]), True


def encode_band(pixels, band_index: int, projection, embeddings, cfg: EncodingConfig, present=None):
    """Token for one imagery band; returns ``(vector, present)``.

    ``band_index`` is the band's position in the full catalog. Missing pixels
    (``present`` false, or NaN when ``present`` is omitted) are imputed to 0
    before the projection; a band with no pixel at all is reported absent.
    """
    row = _embedding_row(embeddings, band_index, cfg)
    if not cfg.variable_catalog[band_index].is_band:
        raise CatalogError(f"index {band_index} is not a spectral band")
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1)
    if present is None:
        present = np.isfinite(pixels)
    present = np.asarray(present, dtype=bool).reshape(-1)
    dtype = get_default_dtype()
    if not present.any():
        return np.zeros(cfg.H_i, dtype=dtype), False
    proj = projection.data if isinstance(projection, Tensor) else np.asarray(projection)
    filled = np.where(present, pixels, 0.0).astype(proj.dtype)
    return np.concatenate([row.astype(dtype), (filled @ proj).astype(dtype)]), True


def build_input(window, params: dict, cfg: EncodingConfig):
    """Stack every token of a window (or batch) into one tensor.

    Returns ``(inputs, mask)`` with ``inputs`` of shape ``(B, T, V_t, H_i)``
    (``(T, V_t, H_i)`` for a single :class:`ObservationWindow`). Rows follow
    the catalog order; masked tokens are all-zero.
    """
    single = isinstance(window, ObservationWindow)
    if single:
        window = WindowBatch.stack([window])
    values, bands, mask = window.values, window.bands, np.asarray(window.mask, dtype=bool)
    if values.ndim != 3 or mask.ndim != 3:
        raise ContractError(f"expected batched (B, T, V) arrays, got values {values.shape}, mask {mask.shape}")
    B, T = values.shape[:2]
    if T != cfg.T:
        raise ContractError(f"window length {T} does not match configured T={cfg.T}")
    if values.shape[2] != cfg.n_tabular or mask.shape != (B, T, cfg.n_variables):
        raise ContractError(
            f"values {values.shape} / mask {mask.shape} do not fit {cfg.n_tabular} tabular "
            f"of {cfg.n_variables} variables")
    parts = [Tensor(value_features(values, cfg))]
    if cfg.n_bands:
        expected = (B, T, cfg.n_bands, catalog.PIXELS_PER_BAND)
        if bands.shape != expected:
            raise ContractError(f"bands shape {bands.shape}, expected {expected}")
        parts.append(matmul(Tensor(bands), params["band_projection"]))
    tokens = concat(parts, axis=2) if len(parts) > 1 else parts[0]
    emb = broadcast_to(params["embedding"], (B, T, cfg.n_variables, cfg.l_emb))
    inputs = mask_rows(concat([emb, tokens], axis=-1), mask)
    if single:
        return inputs.reshape(inputs.shape[1:]), mask[0]
    return inputs, mask


def observational_dropout(mask, p: float, rng: np.random.Generator | None, training: bool = True) -> np.ndarray:
    """Randomly hide present observations with probability ``p``.

    Absent entries stay absent. Outside training the mask is returned as is.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"observational dropout probability must be in [0, 1), got {p}")
    mask = np.asarray(mask, dtype=bool)
    if not training or p == 0.0:
        return mask.copy()
    if rng is None:
        raise ContractError("observational dropout in training mode needs an rng")
    return mask & (rng.random(mask.shape) >= p)
