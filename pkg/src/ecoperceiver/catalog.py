"""Variable inventory: meteorological predictors, imagery bands, flux targets.

Codes follow ONEFlux naming. The ordering of ``PREDICTORS`` and ``BANDS`` is
the embedding order used by the model and must stay fixed for a trained
checkpoint.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

CYCLIC = "cyclic"
ACYCLIC = "acyclic"
SPECTRAL_BAND = "spectral_band"

MEAN = "mean"
SUM = "sum"
CIRCULAR = "circular"

PIXELS_PER_BAND = 64
IMAGE_SIDE = 8


class CatalogError(LookupError):
    """Unknown variable code or index."""


@dataclass(frozen=True)
class Variable:
    code: str
    kind: str
    units: str
    description: str = ""
    qc: str | None = None          # column holding the QC flag, None if exempt
    aggregation: str = MEAN        # half-hourly -> hourly rule
    period: tuple | None = None    # physical domain for cyclic variables
    pixels: int = 0

    @property
    def is_band(self) -> bool:
        return self.kind == SPECTRAL_BAND


def _p(code, units, description, qc=True, **kw):
    return Variable(code, kw.pop("kind", ACYCLIC), units, description,
                    qc=f"{code}_QC" if qc else None, **kw)


PREDICTORS: tuple[Variable, ...] = (
    _p("TA_F", "deg C", "Air temperature"),
    _p("PA_F", "kPa", "Atmospheric pressure"),
    _p("P_F", "mm", "Precipitation", aggregation=SUM),
    _p("RH", "%", "Relative humidity", qc=False),
    _p("VPD_F", "hPa", "Vapor pressure deficit"),
    _p("WS_F", "m s-1", "Wind speed"),
    _p("USTAR", "m s-1", "Wind shear", qc=False),
    _p("WD", "decimal degrees", "Wind direction", qc=False, kind=CYCLIC,
       aggregation=CIRCULAR, period=(0.0, 360.0)),
    _p("NETRAD", "W m-2", "Net radiation", qc=False),
    _p("SW_IN_F", "W m-2", "Incoming shortwave radiation"),
    _p("SW_OUT", "W m-2", "Outgoing shortwave radiation", qc=False),
    _p("SW_DIF", "W m-2", "Incoming diffuse shortwave radiation", qc=False),
    _p("LW_IN_F", "W m-2", "Incoming longwave radiation"),
    _p("LW_OUT", "W m-2", "Outgoing longwave radiation", qc=False),
    _p("PPFD_IN", "umol m-2 s-1", "Incoming photosynthetic photon flux density", qc=False),
    _p("PPFD_OUT", "umol m-2 s-1", "Outgoing photosynthetic photon flux density", qc=False),
    _p("PPFD_DIF", "umol m-2 s-1", "Incoming diffuse photosynthetic photon flux density", qc=False),
    _p("CO2_F_MDS", "umol mol-1", "CO2 atmospheric concentration"),
    _p("G_F_MDS", "W m-2", "Soil heat flux"),
    _p("LE_F_MDS", "W m-2", "Latent heat flux"),
    _p("H_F_MDS", "W m-2", "Sensible heat flux"),
)

# 7 nadir-adjusted reflectance bands, then the water and snow flags
BANDS: tuple[Variable, ...] = tuple(
    Variable(f"REFL_B{i}", SPECTRAL_BAND, "reflectance", f"Reflectance band {i}", pixels=PIXELS_PER_BAND)
    for i in range(1, 8)
) + (
    Variable("WATER", SPECTRAL_BAND, "flag", "Water cover", pixels=PIXELS_PER_BAND),
    Variable("SNOW", SPECTRAL_BAND, "flag", "Snow cover", pixels=PIXELS_PER_BAND),
)

# GPP/RECO are partitions of NEE and inherit its quality flag
TARGETS: tuple[Variable, ...] = tuple(
    Variable(code, ACYCLIC, "umol CO2 m-2 s-1", desc, qc="NEE_VUT_REF_QC")
    for code, desc in (
        ("NEE_VUT_REF", "Net Ecosystem Exchange (variable USTAR)"),
        ("GPP_DT_VUT_REF", "Gross Primary Production (daytime partitioning)"),
        ("GPP_NT_VUT_REF", "Gross Primary Production (nighttime partitioning)"),
        ("RECO_DT_VUT_REF", "Ecosystem Respiration (daytime partitioning)"),
        ("RECO_NT_VUT_REF", "Ecosystem Respiration (nighttime partitioning)"),
    )
)

PREDICTOR_CODES = tuple(v.code for v in PREDICTORS)
BAND_CODES = tuple(v.code for v in BANDS)
TARGET_CODES = tuple(v.code for v in TARGETS)

_BY_CODE = {v.code: v for v in PREDICTORS + BANDS + TARGETS}


def lookup(code: str) -> Variable:
    try:
        return _BY_CODE[code]
    except KeyError:
        raise CatalogError(f"unknown variable code {code!r}") from None


def qc_columns() -> list[str]:
    """Every distinct QC column named by predictors and targets."""
    seen = []
    for v in PREDICTORS + TARGETS:
        if v.qc and v.qc not in seen:
            seen.append(v.qc)
    return seen


def check_target(code: str) -> str:
    if code not in TARGET_CODES:
        raise ConfigError(f"target {code!r} is not one of {', '.join(TARGET_CODES)}")
    return code
