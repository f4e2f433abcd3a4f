"""Small builders shared by the test modules."""
import numpy as np

import pandas as pd

from ecoperceiver import catalog, pipeline
from ecoperceiver.dataio import ImageryStack, Site
from ecoperceiver.encoding import WindowBatch
from ecoperceiver.model import ModelConfig


def tiny_config(**changes) -> ModelConfig:
    base = dict(H_l=8, H_a=8, n_heads=2, N=2, M=1, T=3, K=2, l_emb=4,
                tabular_codes=catalog.PREDICTOR_CODES[:3], band_codes=catalog.BAND_CODES[:1])
    base.update(changes)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, B: int, rng, p_present: float = 0.7) -> WindowBatch:
    enc = cfg.encoding()
    return WindowBatch(
        values=rng.uniform(-0.5, 0.5, (B, cfg.T, enc.n_tabular)),
        bands=rng.uniform(-0.5, 0.5, (B, cfg.T, enc.n_bands, catalog.PIXELS_PER_BAND)),
        mask=rng.random((B, cfg.T, enc.n_variables)) < p_present,
        target=rng.normal(size=B),
    )


def jitter_parameters(model, rng, scale=0.1):
    """Move every parameter off its structured initial value."""
    for p in model.parameters():
        p.data[...] = p.data + rng.normal(0.0, scale, p.shape)


def make_site(n_hours=100, start="2020-01-01", seed=0, drop_rows=(), target_nan=(), imagery=None, meta=None):
    """Hourly site with every predictor and a random NEE target."""
    rng = np.random.default_rng(seed)
    idx = pd.date_range(start, periods=n_hours, freq="60min", name=pipeline.TIME_COLUMN)
    table = pd.DataFrame({code: rng.normal(size=n_hours) for code in catalog.PREDICTOR_CODES}, index=idx)
    table["WD"] = rng.uniform(0, 360, n_hours)
    table["NEE_VUT_REF"] = rng.normal(size=n_hours)
    table.iloc[list(target_nan), table.columns.get_loc("NEE_VUT_REF")] = np.nan
    table = table.drop(table.index[list(drop_rows)])
    meta = meta or {"site_id": "S", "latitude": 0.0, "longitude": 0.0, "igbp": "GRA"}
    return Site(meta["site_id"], meta, table, imagery or ImageryStack.empty(meta["site_id"]))


def make_manifest(*sites):
    return pipeline.compute_manifest({s.site_id: s.table for s in sites})
