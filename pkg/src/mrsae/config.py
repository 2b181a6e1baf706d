"""Flat TOML experiment configuration.

One table-free TOML file per experiment; keys map 1:1 onto
:class:`ExperimentConfig` fields. Paths may be left empty, in which case
commands read and write the default file names inside the output directory.
"""

from dataclasses import asdict, dataclass, fields, replace

import tomli
import tomli_w

from ._util import config_hash
from .data import DEFAULT_COMORBIDITIES, SyntheticSpec
from .evaluate import AblationGrid
from .sae import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "dump_config", "parse_override"]

CLINICAL_FACTORS = ("age", "disease", "sex", "apoe4", "cm_htn", "cm_dm2")
# keys that locate files or tune execution but never change results
NON_SEMANTIC = ("embeddings", "covariates", "graph", "checkpoint", "cohort_b_embeddings",
                "cohort_b_covariates", "out", "threads")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # paths
    out: str = "out"
    embeddings: str = ""
    covariates: str = ""
    graph: str = ""
    checkpoint: str = ""
    cohort_b_embeddings: str = ""
    cohort_b_covariates: str = ""
    embeddings_format: str = "csv"
    threads: int = 1
    seed: int = 0
    # training
    activation: str = "topk"
    k: int = 16
    expansion: int = 2
    lam: float = 0.1
    k_nn: int = 15
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    split_fraction: float = 0.9
    # annotation
    alpha: float = 0.05
    latest_scan_annotation: bool = False
    # evaluation
    n_folds: int = 5
    top_n: int = 16
    ablation: bool = False
    grid_lams: tuple = (0.0, 0.1, 1.0, 10.0)
    grid_expansions: tuple = ()
    grid_ks: tuple = ()
    grid_categories: tuple = ("AD-related", "comorbidity")
    random_control: bool = True
    # synthetic cohort
    synth_n_subjects: int = 2000
    synth_scans_min: int = 1
    synth_scans_max: int = 1
    synth_d: int = 64
    synth_factors: tuple = CLINICAL_FACTORS
    synth_n_nuisance: int = 26
    synth_nuisance_activity: float = 0.25
    synth_noise_sigma: float = 0.1
    synth_comorbidities: tuple = DEFAULT_COMORBIDITIES
    synth_secondary: tuple = ()
    synth_confounds: tuple = (
        "age->diagnosis:0.6",
        "disease->diagnosis:0.6",
        "apoe4->disease:0.3",
        "disease->converter:0.85",
    )
    synth_converter_rate: float = 0.37

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))

    # -- derived objects -------------------------------------------------
    def train_config(self):
        return TrainConfig(
            activation=self.activation, k=self.k, expansion=self.expansion, lam=float(self.lam),
            k_nn=self.k_nn, epochs=self.epochs, lr=float(self.lr), batch_size=self.batch_size,
            seed=self.seed, split_fraction=float(self.split_fraction),
        )

    def confounds(self):
        out = []
        for item in self.synth_confounds:
            try:
                edge, strength = item.rsplit(":", 1)
                src, dst = edge.split("->")
                out.append((src.strip(), dst.strip(), float(strength)))
            except ValueError:
                raise ConfigError(f"confound {item!r} is not of the form 'src->dst:strength'") from None
        return tuple(out)

    def synthetic_spec(self, seed=None):
        return SyntheticSpec(
            n_subjects=self.synth_n_subjects,
            scans_per_subject=(self.synth_scans_min, self.synth_scans_max),
            d=self.synth_d,
            factors=tuple(self.synth_factors) + ("nuisance",) * self.synth_n_nuisance,
            confound_graph=self.confounds(),
            noise_sigma=float(self.synth_noise_sigma),
            seed=self.seed if seed is None else seed,
            comorbidities=tuple(self.synth_comorbidities),
            secondary=tuple(self.synth_secondary),
            converter_rate=float(self.synth_converter_rate),
            nuisance_activity=float(self.synth_nuisance_activity),
        )

    def ablation_grid(self):
        return AblationGrid(
            lams=tuple(float(x) for x in self.grid_lams), expansions=tuple(self.grid_expansions),
            ks=tuple(self.grid_ks), categories=tuple(self.grid_categories),
            random_control=self.random_control, top_n=self.top_n,
        )

    # -- checks and identity ----------------------------------------------
    def validate(self):
        if self.embeddings_format not in ("csv", "raw-f32"):
            raise ConfigError("embeddings_format must be 'csv' or 'raw-f32'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.synth_scans_min > self.synth_scans_max:
            raise ConfigError("synth_scans_min exceeds synth_scans_max")
        try:
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.confounds()
        return self

    def semantic_dict(self):
        """Every result-affecting key (paths, output dir and thread count removed)."""
        d = self.to_dict()
        for key in NON_SEMANTIC:
            d.pop(key, None)
        return d

    def hash(self):
        return config_hash(self.semantic_dict())

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def with_overrides(self, overrides):
        return replace(self, **overrides)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()


def _coerce(key, value):
    default = getattr(_DEFAULTS, key)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer")
        try:
            iv = int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if isinstance(value, float) and value != iv:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return iv
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()] if value.strip() else []
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string")
    return value


def from_mapping(mapping, base=None):
    base = base or ExperimentConfig()
    unknown = sorted(set(mapping) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return replace(base, **{k: _coerce(k, v) for k, v in mapping.items()})


def load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat (found table {nested[0]!r})")
    return from_mapping(raw)


def dump_config(config, path=None):
    text = tomli_w.dumps(config.to_dict())
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def parse_override(item):
    """``key=value`` from the command line; the value is read as a TOML literal when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    key = key.strip()
    try:
        value = tomli.loads(f"v = {value}")["v"]
    except tomli.TOMLDecodeError:
        pass
    return key, value
