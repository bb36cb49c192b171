"""
Pipeline configuration: one YAML document with a section per module.

Missing keys take the defaults below, unknown keys are rejected, and every
section is turned into its module's config object (and validated) before any
track is generated.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from augment import (DEFAULT_PLAYABLE_RANGES, ENSEMBLES, AugmentError, InstrumentId, MicrotimingConfig,
                     TempoConfig)
from dataset_io import SPLITS, DatasetError, SplitPolicy
from expression import (DEFAULT_PRIOR_MEANS, PRIOR_CONCENTRATION, ExpressionError, ExpressionPrior,
                        IntonationConfig, RenderConfig)
from mixdown import PEAK_CEILING_DB, TARGET_LUFS
from score_core import (DEFAULT_FINAL_MASK_FRACTION, DEFAULT_GIBBS_STEPS, DEFAULT_MARGIN, DEFAULT_MAX_ATTEMPTS,
                        DEFAULT_RANGES, PARTS, GibbsConfig, PitchRangeTable, ScoreError, linear_anneal)
from synth import SynthConfig, SynthError

# ---------------- CONFIG ----------------
DEFAULT_NUM_TRACKS = 50
DEFAULT_OUTPUT_ROOT = "chorale_stems_data"
NOTE_MODELS = ("markov", "external")
PEAK_MODES = ("sample", "true")
RENDER_KEYS = tuple(f.name for f in fields(RenderConfig)
                    if f.name not in ("frame_rate", "num_harmonics", "num_noise_bands"))
# ---------------------------------------


class ConfigError(ValueError):
    """Raised for unreadable config files, unknown keys or invalid values."""


def default_config_dict() -> dict:
    render_defaults = RenderConfig()
    intonation = IntonationConfig()
    micro = MicrotimingConfig()
    tempo = TempoConfig()
    synth = SynthConfig()
    return {
        "generation": {
            "num_tracks": DEFAULT_NUM_TRACKS,
            "ensembles": list(ENSEMBLES),
            "seed": 0,
            "output_root": DEFAULT_OUTPUT_ROOT,
            "workers": 1,
            "overwrite": False,
        },
        "audio": {"sample_rate": synth.sample_rate, "frame_rate": synth.frame_rate},
        "gibbs": {"num_steps": DEFAULT_GIBBS_STEPS, "final_mask_fraction": DEFAULT_FINAL_MASK_FRACTION},
        "note_model": {"kind": "markov", "tonic": 0, "temperature": 1.0, "scores_dir": None},
        "ranges": {
            "parts": {part: list(DEFAULT_RANGES[part]) for part in PARTS},
            "margin": DEFAULT_MARGIN,
            "inclusive": True,
        },
        "rejection": {"max_attempts": DEFAULT_MAX_ATTEMPTS},
        "tempo": {"min_bpm": tempo.min_bpm, "max_bpm": tempo.max_bpm},
        "microtiming": {"mu": micro.mu, "sigma": micro.sigma, "bound": micro.bound},
        "instruments": {inst.value: list(r) for inst, r in DEFAULT_PLAYABLE_RANGES.items()},
        "expression": {
            "concentration": PRIOR_CONCENTRATION,
            "priors": {inst.value: list(m) for inst, m in DEFAULT_PRIOR_MEANS.items()},
        },
        "render": {key: getattr(render_defaults, key) for key in RENDER_KEYS},
        "intonation": {
            "bias_mean": intonation.bias_mean,
            "bias_std": intonation.bias_std,
            "walk_std": intonation.walk_std,
            "walk_time_s": intonation.walk_time_s,
        },
        "pitch_correction": {"alpha": None},
        "synth": {
            "num_harmonics": synth.num_harmonics,
            "num_noise_bands": synth.num_noise_bands,
            "fir_taps": synth.fir_taps,
            "window": synth.window,
        },
        "mixdown": {"target_lufs": TARGET_LUFS, "ceiling_db": PEAK_CEILING_DB, "peak_mode": "sample"},
        "splits": {"train": 0.8, "valid": 0.1, "test": 0.1},
        "stats": {"bin_width": 0.01, "max_deviation": 0.5},
    }


# sections whose keys are free-form names rather than fixed settings
OPEN_SECTIONS = {("ranges", "parts"), ("instruments",), ("expression", "priors")}


def merge_config(defaults: dict, overrides: dict, path: tuple = ()) -> dict:
    """Deep-merge `overrides` onto `defaults`, rejecting keys the defaults don't know."""
    merged = copy.deepcopy(defaults)
    for key, value in (overrides or {}).items():
        where = ".".join(path + (str(key),))
        if key not in defaults and path not in OPEN_SECTIONS:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults.get(key), dict) and (path + (key,)) not in OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            merged[key] = merge_config(defaults[key], value, path + (key,))
        elif isinstance(defaults.get(key), dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            merged[key] = {**defaults[key], **value}
        else:
            merged[key] = value
    return merged


@dataclass(frozen=True)
class PipelineConfig:
    num_tracks: int
    ensembles: tuple
    seed: int
    output_root: Path
    workers: int
    overwrite: bool
    sample_rate: int
    frame_rate: float
    gibbs_steps: int
    final_mask_fraction: float
    note_model: dict
    ranges: PitchRangeTable
    max_attempts: int
    tempo: TempoConfig
    microtiming: MicrotimingConfig
    playable_ranges: dict
    priors: dict
    render: RenderConfig
    intonation: IntonationConfig
    alpha: float | None
    synth: SynthConfig
    target_lufs: float
    ceiling_db: float
    peak_mode: str
    splits: SplitPolicy
    bin_width: float
    max_deviation: float
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def gibbs(self, seed: int) -> GibbsConfig:
        return GibbsConfig(self.gibbs_steps, seed, linear_anneal(self.gibbs_steps, self.final_mask_fraction))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _positive_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{where} must be a positive integer, got {value!r}")
    return value


def build_config(doc: dict) -> PipelineConfig:
    """Turn a merged config document into validated module configs."""
    gen, audio = doc["generation"], doc["audio"]
    ensembles = tuple(gen["ensembles"] or ())
    if not ensembles:
        raise ConfigError("generation.ensembles must name at least one ensemble")
    unknown = [e for e in ensembles if e not in ENSEMBLES]
    if unknown:
        raise ConfigError(f"unknown ensembles {unknown}; choose from {list(ENSEMBLES)}")
    if len(set(ensembles)) != len(ensembles):
        raise ConfigError("generation.ensembles lists an ensemble twice")
    seed = gen["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**63:
        raise ConfigError(f"generation.seed must be a non-negative integer, got {seed!r}")

    model = dict(doc["note_model"])
    if model["kind"] not in NOTE_MODELS:
        raise ConfigError(f"note_model.kind must be one of {NOTE_MODELS}, got {model['kind']!r}")
    if model["kind"] == "external":
        if not model["scores_dir"] or not Path(model["scores_dir"]).is_dir():
            raise ConfigError(f"note_model.scores_dir is not a directory: {model['scores_dir']!r}")

    fraction = doc["gibbs"]["final_mask_fraction"]
    if not 0.0 < float(fraction) <= 1.0:
        raise ConfigError(f"gibbs.final_mask_fraction must be in (0, 1], got {fraction}")

    alpha = doc["pitch_correction"]["alpha"]
    if alpha is not None and not 0.0 <= float(alpha) <= 1.0:
        raise ConfigError(f"pitch_correction.alpha must be null or in [0, 1], got {alpha}")

    mix = doc["mixdown"]
    if mix["peak_mode"] not in PEAK_MODES:
        raise ConfigError(f"mixdown.peak_mode must be one of {PEAK_MODES}, got {mix['peak_mode']!r}")
    if mix["ceiling_db"] > 0:
        raise ConfigError("mixdown.ceiling_db must be at most 0 dBFS")

    stats = doc["stats"]
    if stats["bin_width"] <= 0 or stats["max_deviation"] <= 0:
        raise ConfigError("stats.bin_width and stats.max_deviation must be positive")

    try:
        instruments = {InstrumentId(name): tuple(int(v) for v in r) for name, r in doc["instruments"].items()}
        for inst in InstrumentId:
            if inst not in instruments:
                raise ConfigError(f"instruments: no playable range for {inst.value}")
        priors = {InstrumentId(name): ExpressionPrior(tuple(float(v) for v in means),
                                                      float(doc["expression"]["concentration"]))
                  for name, means in doc["expression"]["priors"].items()}
        ranges = doc["ranges"]
        table = PitchRangeTable({p: tuple(int(v) for v in r) for p, r in ranges["parts"].items()},
                                int(ranges["margin"]), bool(ranges["inclusive"]))
        synth = SynthConfig(
            sample_rate=int(audio["sample_rate"]),
            frame_rate=float(audio["frame_rate"]),
            **doc["synth"],
        )
        render = RenderConfig(
            frame_rate=synth.frame_rate,
            num_harmonics=synth.num_harmonics,
            num_noise_bands=synth.num_noise_bands,
            **{k: float(v) for k, v in doc["render"].items()},
        )
        cfg = PipelineConfig(
            num_tracks=_positive_int(gen["num_tracks"], "generation.num_tracks"),
            ensembles=ensembles,
            seed=seed,
            output_root=Path(gen["output_root"]),
            workers=_positive_int(gen["workers"], "generation.workers"),
            overwrite=bool(gen["overwrite"]),
            sample_rate=synth.sample_rate,
            frame_rate=synth.frame_rate,
            gibbs_steps=_positive_int(doc["gibbs"]["num_steps"], "gibbs.num_steps"),
            final_mask_fraction=float(fraction),
            note_model=model,
            ranges=table,
            max_attempts=_positive_int(doc["rejection"]["max_attempts"], "rejection.max_attempts"),
            tempo=TempoConfig(**doc["tempo"]),
            microtiming=MicrotimingConfig(**{k: float(v) for k, v in doc["microtiming"].items()}),
            playable_ranges=instruments,
            priors=priors,
            render=render,
            intonation=IntonationConfig(**{k: float(v) for k, v in doc["intonation"].items()}),
            alpha=None if alpha is None else float(alpha),
            synth=synth,
            target_lufs=float(mix["target_lufs"]),
            ceiling_db=float(mix["ceiling_db"]),
            peak_mode=mix["peak_mode"],
            splits=SplitPolicy(tuple(float(doc["splits"][s]) for s in SPLITS)),
            bin_width=float(stats["bin_width"]),
            max_deviation=float(stats["max_deviation"]),
            raw=doc,
        )
    except (AugmentError, ExpressionError, ScoreError, SynthError, DatasetError) as e:
        raise ConfigError(str(e)) from e
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {e}") from e

    missing_priors = {i.value for e in ensembles for pool in ENSEMBLES[e].pools for i in pool} - {
        i.value for i in priors}
    if missing_priors:
        raise ConfigError(f"expression.priors: no prior for {sorted(missing_priors)}")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """
    Load a YAML config (or the defaults) and apply flag overrides.

    Args:
        path: YAML file, or None for the built-in defaults.
        overrides: nested mapping applied after the file, e.g. {"generation": {"seed": 3}}.

    Returns:
        PipelineConfig: validated configuration.
    """
    doc = default_config_dict()
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        doc = merge_config(doc, raw or {})
    if overrides:
        doc = merge_config(doc, overrides)
    return build_config(doc)


def default_config_yaml() -> str:
    return yaml.safe_dump(default_config_dict(), sort_keys=False)
