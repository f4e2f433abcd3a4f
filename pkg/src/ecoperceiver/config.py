"""Run configuration: one schema drives config files, CLI flags and help text.

Config files are UTF-8 ``key=value`` lines with ``#`` comments. Values are
resolved with precedence command-line flag > config file > default.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import catalog
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _str_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    help: str
    group: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")

    def render(self, value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        return "" if value is None else str(value)


_M = ModelConfig()
_T = TrainConfig()
DEFAULT_SEEDS = tuple(range(0, 100, 10))

SCHEMA = (
    # pipeline
    Key("max_qc", int, 1, "highest QC flag kept; worse values become missing", "pipeline"),
    Key("split_seed", int, 0, "seed of the IGBP-stratified site split", "pipeline"),
    # data
    Key("target_code", str, "NEE_VUT_REF", f"flux target, one of {', '.join(catalog.TARGET_CODES)}", "data"),
    Key("context_window", int, _M.T, "context window T in hours", "data"),
    Key("stride", int, 1, "keep every n-th training window", "data"),
    Key("val_fraction", float, 0.2, "share of training sites held out for validation", "data"),
    # model
    Key("H_l", int, _M.H_l, "latent width", "model"),
    Key("H_a", int, _M.H_a, "attention projection width", "model"),
    Key("n_heads", int, _M.n_heads, "attention heads", "model"),
    Key("N", int, _M.N, "weight-shared WCA blocks", "model"),
    Key("M", int, _M.M, "trailing causal self-attention blocks", "model"),
    Key("K", int, _M.K, "Fourier frequencies per value", "model"),
    Key("l_emb", int, _M.l_emb, "variable embedding width", "model"),
    Key("dropout_p", float, _M.dropout_p, "observational dropout probability", "model"),
    Key("mlp_expansion", int, _M.mlp_expansion, "feed-forward expansion factor", "model"),
    Key("use_causal_mask", _bool, _M.use_causal_mask, "causal mask in self attention", "model"),
    Key("use_fourier", _bool, _M.use_fourier, "Fourier value encoding (else raw value)", "model"),
    Key("use_images", _bool, _M.use_images, "feed imagery band tokens", "model"),
    Key("use_obs_dropout", _bool, _M.use_obs_dropout, "observational dropout during training", "model"),
    # training
    Key("lr", float, _T.lr, "peak learning rate", "train"),
    Key("batch_size", int, _T.batch_size, "windows per optimizer step", "train"),
    Key("warmup_epochs", int, _T.warmup_epochs, "linear warm-up epochs", "train"),
    Key("total_epochs", int, _T.total_epochs, "epochs of the cosine schedule", "train"),
    Key("weight_decay", float, _T.weight_decay, "decoupled weight decay", "train"),
    Key("beta1", float, _T.beta1, "first-moment decay", "train"),
    Key("beta2", float, _T.beta2, "second-moment decay", "train"),
    Key("eps", float, _T.eps, "optimizer epsilon", "train"),
    Key("patience", int, _T.patience, "early-stop patience in epochs", "train"),
    Key("windows_per_epoch", int, _T.windows_per_epoch, "windows sampled per epoch, 0 = all", "train"),
    Key("worker_count", int, _T.worker_count, "batch-assembly threads", "train"),
    # shared by every command that trains or evaluates
    Key("eval_batch_size", int, _T.eval_batch_size, "windows per evaluation batch", "run"),
    Key("threads", int, 1, "BLAS and evaluation threads (1 = reproducible mode)", "run"),
    Key("seeds", _int_list, DEFAULT_SEEDS, "comma-separated training seeds", "run"),
    # baseline
    Key("ridge_lambda", float, 1e-6, "ridge damping of the linear baseline", "baseline"),
    # ablation
    Key("switch", _str_list, ("no_causal", "no_obs_dropout", "no_fourier", "no_images"),
        "ablations: no_causal, no_obs_dropout, no_fourier, no_images, cw<N>", "ablate"),
)
KEYS = {k.name: k for k in SCHEMA}


def keys_for(groups) -> list:
    return [k for k in SCHEMA if k.group in groups]


def parse_value(key: str, raw):
    spec = KEYS.get(key)
    if spec is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return spec.parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key}: {exc}") from None


def read_config_file(path) -> dict:
    """Parse a key=value file. Unknown keys and conflicting repeats are errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values, conflicts = {}, []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        if key not in KEYS:
            raise ConfigError(f"{path}:{n}: unknown config key {key!r}")
        value = parse_value(key, raw.strip())
        if key in values and values[key] != value:
            conflicts.append(f"{key} ({KEYS[key].render(values[key])} vs {KEYS[key].render(value)})")
        values[key] = value
    if conflicts:
        raise ConfigError(f"{path}: conflicting values for " + ", ".join(conflicts))
    return values


def resolve(flags: dict, file_values: dict, groups) -> dict:
    """Merge with precedence flag > file > default over the keys of ``groups``."""
    out = {}
    for k in keys_for(groups):
        if flags.get(k.name) is not None:
            out[k.name] = flags[k.name]
        elif k.name in file_values:
            out[k.name] = file_values[k.name]
        else:
            out[k.name] = k.default
    return out


def render(values: dict) -> str:
    return "".join(f"{k}={KEYS[k].render(v)}\n" for k, v in sorted(values.items()))


def model_config(values: dict) -> ModelConfig:
    return ModelConfig(H_l=values["H_l"], H_a=values["H_a"], n_heads=values["n_heads"], N=values["N"],
                       M=values["M"], T=values["context_window"], K=values["K"], l_emb=values["l_emb"],
                       dropout_p=values["dropout_p"], mlp_expansion=values["mlp_expansion"],
                       use_causal_mask=values["use_causal_mask"], use_fourier=values["use_fourier"],
                       use_images=values["use_images"], use_obs_dropout=values["use_obs_dropout"])


def train_config(values: dict, seed: int) -> TrainConfig:
    names = ("lr", "batch_size", "warmup_epochs", "total_epochs", "weight_decay", "beta1", "beta2", "eps",
             "patience", "windows_per_epoch", "eval_batch_size", "worker_count")
    return TrainConfig(seed=seed, **{n: values[n] for n in names})


ABLATIONS = {
    "no_causal": {"use_causal_mask": False},
    "no_obs_dropout": {"use_obs_dropout": False},
    "no_fourier": {"use_fourier": False},
    "no_images": {"use_images": False},
}


def ablation_changes(switch: str) -> dict:
    """Config overrides for one ablation switch (``cw<N>`` sets the context window)."""
    if switch in ABLATIONS:
        return dict(ABLATIONS[switch])
    if switch.startswith("cw") and switch[2:].isdigit() and int(switch[2:]) >= 1:
        return {"context_window": int(switch[2:])}
    raise ConfigError(f"unknown ablation switch {switch!r}; expected one of "
                      f"{', '.join(ABLATIONS)} or cw<N>")
