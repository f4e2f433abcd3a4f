"""Imagery container, synthetic sites and the sliding-window loader.

A processed site directory holds ``meta.txt``, ``releases/*.csv`` and
``imagery.csim``. :func:`make_windows` turns one or more normalised sites
into a :class:`WindowSet`, which stores per-hour arrays once and builds
``(B, T, ...)`` batches by fancy indexing.
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from . import catalog, pipeline
from .encoding import ObservationWindow, WindowBatch
from .errors import ConfigError, InputError

logger = logging.getLogger(__name__)

N_CHANNELS = len(catalog.BANDS)
SIDE = catalog.IMAGE_SIDE
CSIM_MAGIC = b"CSIM"
CSIM_VERSION = 1
_CSIM_HEADER = struct.Struct("<4sIIHHH")
_DAY = struct.Struct("<q")
_EPOCH = date(1970, 1, 1)


class ImageryFormatError(InputError):
    """Bad magic, version or geometry in an imagery file."""


class ImageryLengthError(InputError):
    """Imagery payload shorter or longer than its header announces."""


# ---------------------------------------------------------------------------
# imagery container
# ---------------------------------------------------------------------------
@dataclass
class ImageryStack:
    """Daily ``9 x 8 x 8`` images; ``present`` flags the pixels that exist.

    Missing pixels are stored as 0 in ``pixels``.
    """

    site_id: str
    epoch_days: np.ndarray                  # (n,) int64, strictly increasing
    pixels: np.ndarray                      # (n, 9, 8, 8) float32
    present: np.ndarray                     # (n, 9, 8, 8) bool

    def __post_init__(self):
        self.epoch_days = np.asarray(self.epoch_days, dtype=np.int64).reshape(-1)
        n = len(self.epoch_days)
        self.pixels = np.asarray(self.pixels, dtype=np.float32).reshape(n, N_CHANNELS, SIDE, SIDE)
        self.present = np.asarray(self.present, dtype=bool).reshape(n, N_CHANNELS, SIDE, SIDE)
        if n > 1 and (np.diff(self.epoch_days) <= 0).any():
            raise InputError(f"imagery for {self.site_id}: days must be unique and ascending")

    def __len__(self):
        return len(self.epoch_days)

    @classmethod
    def empty(cls, site_id: str) -> "ImageryStack":
        return cls(site_id, np.zeros(0, np.int64), np.zeros((0, N_CHANNELS, SIDE, SIDE)),
                   np.zeros((0, N_CHANNELS, SIDE, SIDE), bool))

    @classmethod
    def from_nan(cls, site_id: str, epoch_days, raw) -> "ImageryStack":
        raw = np.asarray(raw, dtype=np.float32)
        present = ~np.isnan(raw)
        return cls(site_id, epoch_days, np.where(present, raw, 0.0), present)

    def with_nan(self) -> np.ndarray:
        return np.where(self.present, self.pixels, np.float32(np.nan))

    def day_index(self, epoch_days) -> np.ndarray:
        """Position of each requested day in the stack, -1 where absent."""
        q = np.asarray(epoch_days, dtype=np.int64)
        if len(self.epoch_days) == 0:
            return np.full(q.shape, -1, np.int64)
        pos = np.clip(np.searchsorted(self.epoch_days, q), 0, len(self.epoch_days) - 1)
        return np.where(self.epoch_days[pos] == q, pos, -1)

    def __eq__(self, other):
        if not isinstance(other, ImageryStack):
            return NotImplemented
        return (self.site_id == other.site_id and np.array_equal(self.epoch_days, other.epoch_days)
                and np.array_equal(self.present, other.present)
                and np.array_equal(self.pixels[self.present], other.pixels[other.present]))


def imagery_to_bytes(stack: ImageryStack) -> bytes:
    raw = stack.with_nan().astype("<f4")
    chunks = [_CSIM_HEADER.pack(CSIM_MAGIC, CSIM_VERSION, len(stack), N_CHANNELS, SIDE, SIDE)]
    for day, image in zip(stack.epoch_days, raw):
        chunks.append(_DAY.pack(int(day)))
        chunks.append(image.tobytes())
    return b"".join(chunks)


def imagery_from_bytes(blob: bytes, site_id: str = "") -> ImageryStack:
    if len(blob) < _CSIM_HEADER.size:
        raise ImageryLengthError(f"imagery header needs {_CSIM_HEADER.size} bytes, got {len(blob)}")
    magic, version, n_days, ch, h, w = _CSIM_HEADER.unpack_from(blob)
    if magic != CSIM_MAGIC:
        raise ImageryFormatError(f"bad imagery magic {magic!r}")
    if version != CSIM_VERSION:
        raise ImageryFormatError(f"unsupported imagery version {version}")
    if (ch, h, w) != (N_CHANNELS, SIDE, SIDE):
        raise ImageryFormatError(f"imagery geometry {ch}x{h}x{w}, expected {N_CHANNELS}x{SIDE}x{SIDE}")
    per_day = _DAY.size + 4 * ch * h * w
    expected = _CSIM_HEADER.size + n_days * per_day
    if len(blob) != expected:
        raise ImageryLengthError(f"imagery payload is {len(blob)} bytes, header implies {expected}")
    days = np.empty(n_days, np.int64)
    raw = np.empty((n_days, ch, h, w), np.float32)
    offset = _CSIM_HEADER.size
    for i in range(n_days):
        days[i] = _DAY.unpack_from(blob, offset)[0]
        raw[i] = np.frombuffer(blob, "<f4", ch * h * w, offset + _DAY.size).reshape(ch, h, w)
        offset += per_day
    return ImageryStack.from_nan(site_id, days, raw)


def write_imagery(stack: ImageryStack, path) -> Path:
    path = Path(path)
    path.write_bytes(imagery_to_bytes(stack))
    return path


def read_imagery(path, site_id: str | None = None) -> ImageryStack:
    path = Path(path)
    if not path.exists():
        raise InputError(f"imagery file not found: {path}")
    return imagery_from_bytes(path.read_bytes(), site_id if site_id is not None else path.parent.name)


# ---------------------------------------------------------------------------
# synthetic sites
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SyntheticSiteSpec:
    """Parameters of one synthetic site; generation is a pure function of these."""

    site_id: str = "SY-000"
    igbp: str = "GRA"
    seed: int = 0
    n_days: int = 365
    start: str = "2019-01-01"
    latitude: float = 45.0
    longitude: float = 0.0
    season_amplitude: float = 12.0      # deg C, half peak-to-trough
    mean_temperature: float = 8.0
    noise: float = 0.8                   # NEE noise std, umol m-2 s-1
    missing_rate: float = 0.05           # per predictor cell
    pixel_missing_rate: float = 0.05
    image_missing_rate: float = 0.25     # whole days without imagery
    reco0: float = 2.0                   # respiration at 0 deg C
    gamma: float = 0.065                 # respiration temperature sensitivity
    alpha: float = 28.0                  # light-saturated uptake at full greenness
    beta: float = 350.0                  # half-saturation radiation, W m-2
    rain_memory_hours: float = 10.0      # e-folding time of the moisture memory
    green_peak_day: float = 190.0
    green_width: float = 45.0
    green_min: float = 0.15
    green_max: float = 0.95
    overlap_fraction: float = 0.15       # share of days covered by both releases
    water_fraction: float = 0.0          # share of pixels flagged as open water

    def __post_init__(self):
        if self.n_days < 1:
            raise ConfigError(f"n_days must be >= 1, got {self.n_days}")
        for name in ("missing_rate", "pixel_missing_rate", "image_missing_rate", "overlap_fraction",
                     "water_fraction"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    def law(self) -> dict:
        """Ground-truth flux law coefficients, for oracle checks."""
        return {"formula": "NEE = reco0*exp(gamma*TA_F) - alpha*green*moisture*SW_IN_F/(beta+SW_IN_F) + noise",
                "reco0": self.reco0, "gamma": self.gamma, "alpha": self.alpha, "beta": self.beta,
                "rain_memory_hours": self.rain_memory_hours, "noise": self.noise}


@dataclass
class SyntheticSite:
    spec: SyntheticSiteSpec
    table: pd.DataFrame          # fused half-hourly table with QC columns
    releases: list               # two overlapping RawRelease objects
    imagery: ImageryStack
    meta: dict
    truth: pd.DataFrame          # noise-free components: reco, gpp, green, moisture


def _ema(x: np.ndarray, tau_steps: float) -> np.ndarray:
    a = math.exp(-1.0 / tau_steps)
    out = np.empty_like(x)
    acc = 0.0
    for i, v in enumerate(x):
        acc = a * acc + (1 - a) * v
        out[i] = acc
    return out


def _ar1(rng, n, phi, sigma):
    eps = rng.normal(0.0, sigma, n)
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = phi * acc + eps[i]
        out[i] = acc
    return out


def _greenness(spec: SyntheticSiteSpec, doy: np.ndarray) -> np.ndarray:
    d = (doy - spec.green_peak_day + 182.5) % 365.0 - 182.5
    return spec.green_min + (spec.green_max - spec.green_min) * np.exp(-0.5 * (d / spec.green_width) ** 2)


def _sat_vapour_pressure_kpa(ta):
    return 0.6108 * np.exp(17.27 * ta / (ta + 237.3))


def generate_synthetic_site(spec: SyntheticSiteSpec) -> SyntheticSite:
    """Half-hourly EC table, daily imagery and metadata for one synthetic site.

    The target follows a respiration/photosynthesis law whose uptake term is
    scaled by canopy greenness (visible in the imagery) and by a decaying
    memory of recent rain (visible only through past precipitation).
    """
    rng = np.random.default_rng([spec.seed, 7919])
    steps_per_day = 48
    n = spec.n_days * steps_per_day
    start = pd.Timestamp(spec.start)
    index = pd.date_range(start, periods=n, freq="30min", name=pipeline.TIME_COLUMN)
    hour = (np.arange(n) % steps_per_day) / 2.0 + 0.25
    day = np.arange(n) // steps_per_day
    doy = ((start.dayofyear - 1 + day) % 365).astype(np.float64) + 1.0

    # radiation: clear-sky elevation model dimmed by day-to-day cloud
    lat = math.radians(spec.latitude)
    decl = np.radians(23.44) * np.sin(2 * np.pi * (doy - 81) / 365.0)
    ha = np.radians(15.0 * (hour - 12.0))
    sin_elev = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(ha)
    cloud_day = np.clip(0.45 + _ar1(rng, spec.n_days, 0.6, 0.25), 0.0, 1.0)
    cloud = cloud_day[day]
    sw_in = 1050.0 * np.clip(sin_elev, 0.0, None) ** 1.15 * (1.0 - 0.7 * cloud)
    sw_dif = sw_in * (0.15 + 0.7 * cloud)

    # temperature: seasonal cycle, lagged diurnal heating, synoptic weather
    season = -spec.season_amplitude * np.cos(2 * np.pi * (doy - 20) / 365.0)
    synoptic = np.repeat(_ar1(rng, spec.n_days, 0.8, 1.6), steps_per_day)
    heating = _ema(sw_in, 6.0) / 60.0
    ta = spec.mean_temperature + season + synoptic + heating - 2.5 + rng.normal(0, 0.3, n)

    # rain as a two-state Markov chain; moisture is its decaying memory
    raining = np.zeros(n, bool)
    wet = False
    u = rng.random(n)
    for i in range(n):
        wet = u[i] < (0.78 if wet else 0.018)
        raining[i] = wet
    p_f = np.where(raining, rng.exponential(0.6, n), 0.0)
    memory = _ema(p_f, spec.rain_memory_hours * 2.0) * spec.rain_memory_hours * 2.0
    moisture = 0.3 + 0.7 * (1.0 - np.exp(-memory / 1.5))

    green = _greenness(spec, doy)
    snow_day = np.repeat(ta.reshape(spec.n_days, steps_per_day).mean(axis=1) < -3.0, steps_per_day)
    reco = spec.reco0 * np.exp(spec.gamma * ta)
    gpp = spec.alpha * green * moisture * sw_in / (spec.beta + sw_in)
    nee = reco - gpp + (rng.normal(0.0, spec.noise, n) if spec.noise > 0 else 0.0)

    rh = np.clip(85.0 - 1.2 * (ta - spec.mean_temperature - season) - 25.0 * (1 - cloud)
                 + 10.0 * moisture + rng.normal(0, 3, n), 15.0, 100.0)
    vpd = 10.0 * _sat_vapour_pressure_kpa(ta) * (1.0 - rh / 100.0)
    ws = np.clip(2.5 + _ar1(rng, n, 0.97, 0.25) + 0.002 * sw_in, 0.1, None)
    wd = np.mod(220.0 + np.cumsum(rng.normal(0, 6.0, n)), 360.0)
    ustar = np.clip(0.08 * ws + rng.normal(0, 0.03, n), 0.01, None)
    albedo = np.where(snow_day, 0.6, 0.12 + 0.08 * green)
    sw_out = albedo * sw_in
    sigma = 5.670374419e-8
    lw_in = sigma * (ta + 273.15) ** 4 * (0.72 + 0.2 * cloud)
    t_surf = ta + heating * 0.5
    lw_out = 0.98 * sigma * (t_surf + 273.15) ** 4
    netrad = sw_in - sw_out + lw_in - lw_out
    le = np.clip(0.55 * netrad * green * moisture, -20.0, None) + rng.normal(0, 8, n)
    h = 0.35 * netrad * (1.1 - green * moisture) + rng.normal(0, 10, n)
    g = 0.08 * netrad + rng.normal(0, 3, n)
    co2 = 415.0 + 12.0 * np.exp(-sw_in / 80.0) * (1 + 0.5 * np.cos(2 * np.pi * hour / 24.0)) + rng.normal(0, 2, n)
    pa = 98.5 + _ar1(rng, n, 0.995, 0.05)
    ppfd_in = 2.11 * sw_in
    ppfd_out = ppfd_in * (0.03 + 0.05 * (1 - green))
    ppfd_dif = 2.11 * sw_dif

    columns = {
        "TA_F": ta, "PA_F": pa, "P_F": p_f, "RH": rh, "VPD_F": vpd, "WS_F": ws, "USTAR": ustar, "WD": wd,
        "NETRAD": netrad, "SW_IN_F": sw_in, "SW_OUT": sw_out, "SW_DIF": sw_dif, "LW_IN_F": lw_in,
        "LW_OUT": lw_out, "PPFD_IN": ppfd_in, "PPFD_OUT": ppfd_out, "PPFD_DIF": ppfd_dif,
        "CO2_F_MDS": co2, "G_F_MDS": g, "LE_F_MDS": le, "H_F_MDS": h,
    }
    table = pd.DataFrame(index=index)
    for var in catalog.PREDICTORS:
        values = columns[var.code].copy()
        values[rng.random(n) < spec.missing_rate] = np.nan
        table[var.code] = values
        if var.qc:
            flags = rng.choice(4, size=n, p=[0.75, 0.13, 0.08, 0.04]).astype(np.float64)
            table[var.qc] = np.where(np.isnan(values), np.nan, flags)
    targets = {"NEE_VUT_REF": nee, "GPP_DT_VUT_REF": gpp, "GPP_NT_VUT_REF": gpp,
               "RECO_DT_VUT_REF": reco, "RECO_NT_VUT_REF": reco}
    target_missing = rng.random(n) < spec.missing_rate
    for code, values in targets.items():
        table[code] = np.where(target_missing, np.nan, values)
    table["NEE_VUT_REF_QC"] = np.where(target_missing, np.nan,
                                       rng.choice(4, size=n, p=[0.6, 0.22, 0.13, 0.05]).astype(np.float64))
    truth = pd.DataFrame({"reco": reco, "gpp": gpp, "green": green, "moisture": moisture}, index=index)

    imagery = _synthetic_imagery(spec, rng, start, green, snow_day)
    releases = _split_releases(spec, table, rng)
    meta = {"site_id": spec.site_id, "latitude": spec.latitude, "longitude": spec.longitude,
            "igbp": spec.igbp}
    return SyntheticSite(spec, table, releases, imagery, meta, truth)


def _synthetic_imagery(spec, rng, start, green_halfhourly, snow_halfhourly) -> ImageryStack:
    green = green_halfhourly[::48]
    snow = snow_halfhourly[::48]
    n = spec.n_days
    # reflectance of each band as (intercept, greenness slope)
    coef = np.array([[0.12, -0.08], [0.15, 0.35], [0.08, -0.03], [0.10, 0.02],
                     [0.20, 0.15], [0.25, -0.05], [0.20, -0.08]])
    # no static per-site texture: with few training sites it acts as a site fingerprint
    water = rng.random((SIDE, SIDE)) < spec.water_fraction
    raw = np.empty((n, N_CHANNELS, SIDE, SIDE), np.float32)
    refl = coef[None, :, 0] + coef[None, :, 1] * green[:, None]                  # (n, 7)
    refl = refl[:, :, None, None] + rng.normal(0, 0.01, (n, 7, SIDE, SIDE))
    refl = np.where(snow[:, None, None, None], 0.6 + rng.normal(0, 0.02, refl.shape), refl)
    refl = np.where(water[None, None], 0.03, refl)
    raw[:, :7] = refl
    raw[:, 7] = water[None].astype(np.float32)
    raw[:, 8] = snow[:, None, None].astype(np.float32)
    raw[rng.random(raw.shape) < spec.pixel_missing_rate] = np.nan
    have = rng.random(n) >= spec.image_missing_rate
    first = (start.date() - _EPOCH).days
    days = first + np.arange(n)
    return ImageryStack.from_nan(spec.site_id, days[have], raw[have])


def _split_releases(spec, table, rng) -> list:
    """An older release over the first part and a newer one over the rest, overlapping.

    Inside the overlap the older release carries slightly different values
    (a previous calibration), so fusion precedence is observable.
    """
    n_days = spec.n_days
    overlap = int(round(spec.overlap_fraction * n_days))
    cut = max(1, min(n_days, int(round(0.7 * n_days))))
    old_end = min(n_days, cut + overlap)
    old = table.iloc[: old_end * 48].copy()
    new = table.iloc[cut * 48:].copy()
    lap = old.index >= table.index[cut * 48] if cut < n_days else np.zeros(len(old), bool)
    for var in catalog.PREDICTORS:
        if var.kind == catalog.CYCLIC:
            old.loc[lap, var.code] = np.mod(old.loc[lap, var.code] + 1.0, 360.0)
        else:
            old.loc[lap, var.code] = old.loc[lap, var.code] * 1.001 + 0.01
    # the newer release lost some cells the older one still has
    if len(new):
        holes = rng.random(len(new)) < 0.05
        holes[(overlap * 48):] = False
        for var in catalog.PREDICTORS:
            new.loc[holes, var.code] = np.nan
            if var.qc:
                new.loc[holes, var.qc] = np.nan
    units = {v.code: v.units for v in catalog.PREDICTORS}
    releases = [pipeline.RawRelease("R2021", date(2021, 6, 1), old, units)]
    if len(new):
        releases.append(pipeline.RawRelease("R2023", date(2023, 6, 1), new, units))
    return releases


@dataclass(frozen=True)
class CorpusSpec:
    """Synthetic corpus: ``sites_per_igbp`` sites for each label."""

    seed: int = 0
    n_days: int = 365
    igbp: tuple = ("ENF", "GRA")
    sites_per_igbp: int = 3
    noise: float = 0.8
    missing_rate: float = 0.05
    pixel_missing_rate: float = 0.05
    image_missing_rate: float = 0.25

    def __post_init__(self):
        if self.n_days < 1:
            raise ConfigError(f"n_days must be >= 1, got {self.n_days}")
        if self.sites_per_igbp < 1 or not self.igbp:
            raise ConfigError("a corpus needs at least one IGBP label and one site per label")
        object.__setattr__(self, "igbp", tuple(self.igbp))

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {', '.join(unknown)}")
        kw = {}
        for key, value in d.items():
            default = known[key].default
            if isinstance(default, tuple):
                parts = value if isinstance(value, (tuple, list)) else str(value).split(",")
                kw[key] = tuple(str(s).strip() for s in parts if str(s).strip())
            elif isinstance(value, str):
                try:
                    kw[key] = type(default)(value)
                except ValueError:
                    raise ConfigError(f"synthetic spec key {key}: cannot parse {value!r}") from None
            else:
                kw[key] = value
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


# per-IGBP character; each site jitters around these. Jitter in the
# coefficients no input reveals is kept small so held-out sites are learnable.
_IGBP_TRAITS = {
    "ENF": dict(green_min=0.6, green_max=0.85, alpha=24.0, reco0=1.6, latitude=55.0, mean_temperature=5.0),
    "GRA": dict(green_min=0.1, green_max=0.95, alpha=32.0, reco0=2.2, latitude=42.0, mean_temperature=11.0),
    "DBF": dict(green_min=0.05, green_max=0.9, alpha=30.0, reco0=2.0, latitude=47.0, mean_temperature=9.0),
    "CRO": dict(green_min=0.05, green_max=1.0, alpha=36.0, reco0=2.4, latitude=40.0, mean_temperature=13.0),
}


def corpus_site_specs(corpus: CorpusSpec) -> list:
    rng = np.random.default_rng([corpus.seed, 104729])
    specs = []
    for label in corpus.igbp:
        traits = _IGBP_TRAITS.get(label, _IGBP_TRAITS["GRA"])
        for i in range(corpus.sites_per_igbp):
            jitter = rng.uniform(-1.0, 1.0, 8)
            specs.append(SyntheticSiteSpec(
                site_id=f"SY-{label}{i + 1}",
                igbp=label,
                seed=int(rng.integers(0, 2**31 - 1)),
                n_days=corpus.n_days,
                latitude=traits["latitude"] + 4.0 * jitter[0],
                longitude=round(-100.0 + 30.0 * jitter[1], 3),
                mean_temperature=traits["mean_temperature"] + 2.0 * jitter[2],
                season_amplitude=11.0 + 2.0 * jitter[3],
                noise=corpus.noise,
                missing_rate=corpus.missing_rate,
                pixel_missing_rate=corpus.pixel_missing_rate,
                image_missing_rate=corpus.image_missing_rate,
                reco0=traits["reco0"] * (1.0 + 0.05 * jitter[4]),
                gamma=0.065 + 0.003 * jitter[5],
                alpha=traits["alpha"] * (1.0 + 0.05 * jitter[6]),
                green_peak_day=185.0 + 20.0 * jitter[7],
                green_min=traits["green_min"],
                green_max=traits["green_max"],
            ))
    return specs


def write_site(site: SyntheticSite, root) -> Path:
    """Write a site directory: meta.txt, releases/*.csv, imagery.csim, truth.txt."""
    site_dir = Path(root) / site.spec.site_id
    (site_dir / "releases").mkdir(parents=True, exist_ok=True)
    pipeline.write_metadata(site.meta, site_dir / "meta.txt")
    for rel in site.releases:
        pipeline.release_to_csv(rel, site_dir / "releases" / f"{rel.release_id}.csv")
    write_imagery(site.imagery, site_dir / "imagery.csim")
    law = site.spec.law()
    (site_dir / "truth.txt").write_text("".join(f"{k}={v}\n" for k, v in law.items()), encoding="utf-8")
    return site_dir


def generate_corpus(corpus: CorpusSpec, root) -> list:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for spec in corpus_site_specs(corpus):
        dirs.append(write_site(generate_synthetic_site(spec), root))
    return dirs


# ---------------------------------------------------------------------------
# site loading
# ---------------------------------------------------------------------------
@dataclass
class Site:
    """One site's hourly table (physical units unless stated) and imagery."""

    site_id: str
    meta: dict
    table: pd.DataFrame
    imagery: ImageryStack
    qc_report: pipeline.QCReport | None = None

    @property
    def igbp(self) -> str:
        return self.meta["igbp"]


def site_ids(corpus_dir) -> list:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise InputError(f"corpus directory not found: {root}")
    return sorted(p.name for p in root.iterdir() if (p / "meta.txt").is_file())


def process_releases(releases: list, max_qc: int = 1):
    """Fuse, downsample to hourly and apply QC leniency; returns ``(table, QCReport)``."""
    fused = pipeline.fuse_releases(releases)
    if len(fused) > 1 and pipeline.cadence_minutes(fused) == 30:
        fused = pipeline.downsample_hourly(fused)
    return pipeline.apply_qc_leniency(fused, max_qc)


def site_from_synthetic(synth: SyntheticSite, max_qc: int = 1) -> Site:
    """In-memory equivalent of writing a synthetic site and loading it back."""
    table, report = process_releases(synth.releases, max_qc)
    meta = dict(synth.meta)
    return Site(meta["site_id"], meta, table, synth.imagery, report)


def load_raw_site(site_dir, max_qc: int = 1) -> Site:
    """Read releases, fuse, downsample to hourly and apply QC leniency."""
    site_dir = Path(site_dir)
    meta = pipeline.read_metadata(site_dir / "meta.txt")
    files = sorted((site_dir / "releases").glob("*.csv"))
    if not files:
        raise InputError(f"{site_dir}: no release CSVs under releases/")
    filtered, report = process_releases([pipeline.read_release_csv(f) for f in files], max_qc)
    imagery_path = site_dir / "imagery.csim"
    imagery = read_imagery(imagery_path, meta["site_id"]) if imagery_path.exists() else ImageryStack.empty(meta["site_id"])
    return Site(meta["site_id"], meta, filtered, imagery, report)


def load_processed_site(site_dir) -> Site:
    """Read a site written by the pipeline command (hourly, QC-filtered)."""
    site_dir = Path(site_dir)
    meta = pipeline.read_metadata(site_dir / "meta.txt")
    table = pipeline.read_release_csv(site_dir / "fused.csv").table
    imagery_path = site_dir / "imagery.csim"
    imagery = read_imagery(imagery_path, meta["site_id"]) if imagery_path.exists() else ImageryStack.empty(meta["site_id"])
    return Site(meta["site_id"], meta, table, imagery)


def local_epoch_days(index: pd.DatetimeIndex, meta: dict) -> np.ndarray:
    """Calendar day of each timestamp in the site's local standard time.

    Timestamps are local standard time unless ``meta['time_reference']`` is
    ``UTC``, in which case the longitude rounded to whole 15-degree hours is
    added first.
    """
    offset = 0
    if str(meta.get("time_reference", "local")).upper() == "UTC":
        offset = int(round(float(meta["longitude"]) / 15.0))
    ns = index.asi8 + offset * 3_600_000_000_000
    return np.floor_divide(ns, 86_400_000_000_000)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------
@dataclass
class WindowSet:
    """All windows of one or more sites, stored as shared per-hour arrays.

    ``ends`` indexes the last hour of every window into the concatenated hour
    arrays; ``window_site`` names its site. Targets are in physical units.
    """

    T: int
    values: np.ndarray        # (H, V_tab) normalised, 0 where missing
    value_mask: np.ndarray    # (H, V_tab)
    day_index: np.ndarray     # (H,) row into ``images``, -1 without imagery
    images: np.ndarray        # (D, 9, 64) normalised, 0 where missing
    image_mask: np.ndarray    # (D, 9, 64)
    target: np.ndarray        # (H,) physical, NaN where missing
    ends: np.ndarray          # (W,)
    window_site: np.ndarray   # (W,) site ids
    site_igbp: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ends)

    @property
    def targets(self) -> np.ndarray:
        return self.target[self.ends]

    def gather(self, idx) -> WindowBatch:
        idx = np.asarray(idx, dtype=np.int64)
        hours = self.ends[idx][:, None] - np.arange(self.T - 1, -1, -1)[None, :]     # (B, T)
        days = self.day_index[hours]
        has_day = days >= 0
        if len(self.images) == 0:
            n_bands = self.images.shape[1]
            bands = np.zeros(hours.shape + self.images.shape[1:], np.float32)
            band_present = np.zeros(hours.shape + (n_bands,), bool)
        else:
            safe = np.where(has_day, days, 0)
            bands = np.where(has_day[..., None, None], self.images[safe], 0.0).astype(np.float32)
            band_present = has_day[..., None] & self.image_mask[safe].any(axis=-1)
        mask = np.concatenate([self.value_mask[hours], band_present], axis=-1)
        return WindowBatch(self.values[hours], bands, mask, self.target[self.ends[idx]])

    def window(self, i: int) -> ObservationWindow:
        b = self.gather([i])
        return ObservationWindow(b.values[0], b.bands[0], b.mask[0], float(b.target[0]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.window(i)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.T, self.values, self.value_mask, self.day_index, self.images, self.image_mask,
                         self.target, self.ends[idx], self.window_site[idx], dict(self.site_igbp))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.ends, self.values, self.value_mask, self.day_index, self.images, self.target):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    @classmethod
    def concat(cls, sets: list) -> "WindowSet":
        sets = [s for s in sets if s is not None]
        if not sets:
            raise ConfigError("no window sets to concatenate")
        T = sets[0].T
        if any(s.T != T for s in sets):
            raise ConfigError("window sets with different T cannot be concatenated")
        h_off = np.cumsum([0] + [len(s.target) for s in sets[:-1]])
        d_off = np.cumsum([0] + [len(s.images) for s in sets[:-1]])
        igbp = {}
        for s in sets:
            igbp.update(s.site_igbp)
        return cls(
            T,
            np.concatenate([s.values for s in sets]),
            np.concatenate([s.value_mask for s in sets]),
            np.concatenate([np.where(s.day_index >= 0, s.day_index + o, -1) for s, o in zip(sets, d_off)]),
            np.concatenate([s.images for s in sets]),
            np.concatenate([s.image_mask for s in sets]),
            np.concatenate([s.target for s in sets]),
            np.concatenate([s.ends + o for s, o in zip(sets, h_off)]),
            np.concatenate([s.window_site for s in sets]),
            igbp,
        )


def make_windows(site: Site, manifest: pipeline.NormalizationManifest, T: int,
                 target_code: str = "NEE_VUT_REF", stride: int = 1) -> WindowSet:
    """Every window of ``T`` consecutive hours whose last hour has a target.

    ``site.table`` is in physical units; normalisation happens here. Hours
    that fall on a day without imagery get all band tokens masked.
    """
    if target_code not in catalog.TARGET_CODES:
        raise ConfigError(f"target {target_code!r} is not one of {', '.join(catalog.TARGET_CODES)}")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    table = site.table
    n = len(table)
    codes = catalog.PREDICTOR_CODES
    values = np.zeros((n, len(codes)), np.float32)
    vmask = np.zeros((n, len(codes)), bool)
    for j, code in enumerate(codes):
        if code not in table:
            continue
        raw = table[code].to_numpy(dtype=np.float64)
        present = ~np.isnan(raw)
        values[:, j] = np.where(present, pipeline.normalize(np.where(present, raw, 0.0), code, manifest), 0.0)
        vmask[:, j] = present
    target = table[target_code].to_numpy(dtype=np.float64) if target_code in table else np.full(n, np.nan)

    imagery = site.imagery
    images = np.zeros((len(imagery), N_CHANNELS, catalog.PIXELS_PER_BAND), np.float32)
    image_mask = imagery.present.reshape(len(imagery), N_CHANNELS, catalog.PIXELS_PER_BAND).copy()
    for c, band in enumerate(catalog.BANDS):
        px = imagery.pixels[:, c].reshape(len(imagery), catalog.PIXELS_PER_BAND).astype(np.float64)
        if band.code in manifest.ranges:
            px = pipeline.normalize(px, band.code, manifest)
        images[:, c] = np.where(image_mask[:, c], px, 0.0)
    day_index = imagery.day_index(local_epoch_days(table.index, site.meta)) if n else np.zeros(0, np.int64)

    # window end i is valid when hours i-T+1..i are consecutive and the target exists
    if n:
        step_ok = np.diff(table.index.asi8) == 3_600_000_000_000
        run_start = np.zeros(n, np.int64)
        starts = np.flatnonzero(np.concatenate([[True], ~step_ok]))
        run_start[starts] = starts
        run_start = np.maximum.accumulate(run_start)
        ends = np.arange(n)
        ok = (ends - run_start >= T - 1) & ~np.isnan(target)
        ends = ends[ok][::stride]
    else:
        ends = np.zeros(0, np.int64)
    return WindowSet(T, values, vmask, day_index, images, image_mask, target, ends,
                     np.full(len(ends), site.site_id, dtype=object), {site.site_id: site.meta.get("igbp", "")})


def windows_for_sites(sites: list, manifest, T: int, target_code: str = "NEE_VUT_REF", stride: int = 1) -> WindowSet:
    return WindowSet.concat([make_windows(s, manifest, T, target_code, stride) for s in sites])


def batch_iterator(windows: WindowSet, batch_size: int, shuffle_seed: int | None = 0, epoch: int = 0,
                   worker_count: int = 1, limit: int | None = None):
    """Yield :class:`WindowBatch` objects in a seed-determined order.

    The permutation depends only on ``(shuffle_seed, epoch)``; ``None``
    keeps the stored order. ``limit`` keeps only the first ``limit`` windows
    of the permutation. Workers build batches concurrently but results are
    yielded in sequence order, so ``worker_count`` never changes the output.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if worker_count < 1:
        raise ConfigError(f"worker_count must be >= 1, got {worker_count}")
    n = len(windows)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    if limit is not None:
        order = order[:limit]
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if worker_count == 1:
        for chunk in chunks:
            yield windows.gather(chunk)
        return
    with ThreadPoolExecutor(max_workers=worker_count) as pool:
        # map() returns results in submission order: an implicit reorder buffer
        yield from pool.map(windows.gather, chunks)


def epoch_day(d: date) -> int:
    return (d - _EPOCH).days


def day_from_epoch(n: int) -> date:
    return _EPOCH + timedelta(days=int(n))
