"""INI run configuration: one section per component, all defaults embedded."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from .estimator import ABLATIONS
from .gate import GateConfig
from .graph import EncoderConfig
from .interaction import InteractionConfig
from .metrics import EvalConfig
from .preprocess import PreprocessConfig, SyntheticSpec
from .trainer import TrainConfig

SEED_ENV = "ANCHORFUSE_SEED"


@dataclass
class PathsConfig:
    matrix: str = ""
    labels: str = ""
    genes: str = ""
    layer: str = "lognorm"
    output_dir: str = "anchorfuse_out"


@dataclass
class SelectorSection:
    tau_dom: float = 0.0
    tau_str: float = 0.0
    n_hvgs: int = 2000
    n_pcs: int = 50
    n_neighbors: int = 15
    leiden_resolution: float = 1.0
    epsilon: float = 1e-8

    def selector_params(self) -> dict:
        return {"n_pcs": self.n_pcs, "n_neighbors": self.n_neighbors,
                "leiden_resolution": self.leiden_resolution, "epsilon": self.epsilon}


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    simulate: SyntheticSpec = field(default_factory=SyntheticSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    selector: SelectorSection = field(default_factory=SelectorSection)
    gate: GateConfig = field(default_factory=GateConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    interaction: InteractionConfig = field(default_factory=InteractionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablations: tuple = ()
    seed: int = 0
    dump_gate: bool = False
    dump_graphs: bool = False

    def __post_init__(self):
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s): {sorted(unknown)}")

    def seeded(self) -> "RunConfig":
        """Copy with ``seed`` pushed into every seeded component."""
        s = self.seed
        return dataclasses.replace(
            self,
            simulate=dataclasses.replace(self.simulate, seed=s),
            gate=dataclasses.replace(self.gate, seed=s),
            train=dataclasses.replace(self.train, seed=s),
            eval=dataclasses.replace(self.eval, seed=s),
        )


SECTIONS = ("paths", "simulate", "preprocess", "selector", "gate", "encoder", "interaction", "train", "eval")


def _parse(raw: str, default, annotation):
    raw = raw.strip()
    if isinstance(default, bool) or annotation in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, (tuple, list)):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        elem = type(default[0]) if default else str
        return type(default)(elem(x) for x in items)
    if raw.lower() in ("", "none") and default is None:
        return None
    if isinstance(default, int) or annotation in (int, "int"):
        return int(raw)
    if isinstance(default, float) or annotation in (float, "float"):
        return float(raw)
    if default is None:
        try:
            return int(raw)
        except ValueError:
            return float(raw)
    return raw


def _update(obj, items: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in items.items():
        if key not in known:
            raise ValueError(f"unknown key [{section}] {key}")
        default = getattr(obj, key)
        changes[key] = _parse(raw, default, known[key].type)
    return dataclasses.replace(obj, **changes)


def load_config(path=None, overrides=None) -> RunConfig:
    """Read an INI file (missing or empty means all defaults) and apply ``overrides``.

    ``overrides`` maps ``"section.key"`` to a string value. The ``[run]`` section
    holds ``seed``, ``ablations`` (comma-separated), ``dump_gate`` and
    ``dump_graphs``. The ``ANCHORFUSE_SEED`` environment variable overrides
    the configured seed; explicit overrides win over both.
    """
    parser = configparser.ConfigParser()
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        parser.read(path)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))

    cfg = RunConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "run":
            run = {}
            for key, raw in items.items():
                if key == "seed":
                    run["seed"] = int(raw)
                elif key == "ablations":
                    run["ablations"] = tuple(a.strip().replace("-", "_") for a in raw.split(",") if a.strip())
                elif key in ("dump_gate", "dump_graphs"):
                    run[key] = _parse(raw, False, bool)
                else:
                    raise ValueError(f"unknown key [run] {key}")
            cfg = dataclasses.replace(cfg, **run)
        elif section in SECTIONS:
            cfg = dataclasses.replace(cfg, **{section: _update(getattr(cfg, section), items, section)})
        else:
            raise ValueError(f"unknown config section [{section}]")

    env = os.environ.get(SEED_ENV)
    if env is not None and "run.seed" not in (overrides or {}):
        cfg = dataclasses.replace(cfg, seed=int(env))
    return cfg


def dump_config(cfg: RunConfig, path):
    parser = configparser.ConfigParser()
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            parser[section][f.name] = ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
    parser["run"] = {"seed": str(cfg.seed), "ablations": ",".join(cfg.ablations),
                     "dump_gate": str(cfg.dump_gate), "dump_graphs": str(cfg.dump_graphs)}
    with open(path, "w") as fh:
        parser.write(fh)
