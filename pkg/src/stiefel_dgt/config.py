"""Experiment configuration: INI files with ``[problem]``, ``[network]``,
``[algorithm]`` and ``[output]`` sections, plus named presets.

Grammar (all keys optional unless noted)::

    [problem]
    type = planted | synthetic | dataset      ; required
    d, r, m, seed, sign (-1 maximise variance, +1 minimise)
    spectrum = comma list of d values          ; planted only
    condition_target = float                   ; synthetic only
    D = comma list of r strictly decreasing weights
    dataset = path, header = bool, center = bool, row_partition = contiguous | round_robin

    [network]
    topology = ring | complete | star | path, n, self_weight

    [algorithm]
    name = drfgt | centralized_landing | retraction_dgt
    alpha = float | auto-safe | auto-stable
    lambda = float | ratio:<c>                 ; ratio:c means c / alpha
    epsilon, max_iters, tol_grad, tol_consensus, consensus_rounds, init_seed

    [output]
    dir, format = csv | jsonl | both, record_every, audit = bool, audit_stride,
    audit_delta, audit_mu = auto | none | float
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .algorithms import ALGORITHMS, safe_step_size, stable_step_size
from .manifold import LandingParams, ParameterError, check_epsilon
from .merit import estimate_constants
from .network import MixingMatrix, build_topology
from .problems import (
    PcaProblem,
    generate_planted_pca,
    generate_synthetic_pca,
    load_dataset_matrix,
)


class ConfigError(ValueError):
    """Bad configuration; the message names the section and key."""


@dataclass
class ProblemSpec:
    type: str = "planted"
    d: int = 20
    r: int = 3
    m: int = 200
    seed: int = 0
    sign: int = -1
    spectrum: tuple[float, ...] | None = None
    condition_target: float = 10.0
    D: tuple[float, ...] | None = None
    dataset: str | None = None
    header: bool = False
    center: bool = False
    row_partition: str = "contiguous"


@dataclass
class NetworkSpec:
    topology: str = "ring"
    n: int = 5
    self_weight: float | None = None


@dataclass
class AlgorithmSpec:
    name: str = "drfgt"
    alpha: str = "auto-safe"
    lam: str = "100"
    epsilon: float = 0.5
    max_iters: int = 1000
    tol_grad: float = 1e-6
    tol_consensus: float = 1e-6
    consensus_rounds: int = 1
    init_seed: int | None = None


@dataclass
class OutputSpec:
    dir: str = "runs/out"
    format: str = "csv"
    record_every: int = 1
    audit: bool = False
    audit_stride: int = 100
    audit_delta: float = 0.5
    audit_mu: str = "auto"


@dataclass
class ExperimentConfig:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, problem=replace(self.problem, seed=seed), algorithm=replace(self.algorithm, init_seed=seed))


_SECTION_KEYS = {"problem": ProblemSpec, "network": NetworkSpec, "algorithm": AlgorithmSpec, "output": OutputSpec}
# INI key -> dataclass attribute where they differ
_ALIASES = {("algorithm", "lambda"): "lam"}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _convert(section: str, key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        if typ in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if "tuple" in str(typ):
            return _floats(raw) if raw.lower() not in ("", "none") else None
        if "int | None" in str(typ):
            return None if raw.lower() in ("", "none") else int(raw)
        if "float | None" in str(typ):
            return None if raw.lower() in ("", "none") else float(raw)
        if "str | None" in str(typ):
            return None if raw.lower() in ("", "none") else raw
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        spec = getattr(cfg, section)
        known = {f.name: f.type for f in fields(spec)}
        for key, raw in parser.items(section):
            attr = _ALIASES.get((section, key), key)
            if attr not in known:
                raise ConfigError(f"{source}: [{section}] unknown key {key!r}")
            setattr(spec, attr, _convert(section, key, raw, known[attr]))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), source=str(path))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialise to the INI grammar; ``parse_config(dump_config(c)) == c``."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section in _SECTION_KEYS:
        parser.add_section(section)
        for key, value in asdict(getattr(cfg, section)).items():
            if value is None:
                continue
            ini_key = next((k for (s, k), a in _ALIASES.items() if s == section and a == key), key)
            parser.set(section, ini_key, _fmt(value))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# -- presets -------------------------------------------------------------------------

DESK_SPECTRUM = (3.0, 2.0, 1.0) + tuple(float(v) for v in np.linspace(0.1, 0.05, 17))

PRESETS: dict[str, ExperimentConfig] = {
    # n=10 ring (0.8 / 0.1 weights), d=100, r=10, 1000 samples per agent,
    # alpha = 1e-4 and lambda = 0.1 / alpha
    "paper-synthetic": ExperimentConfig(
        ProblemSpec(type="synthetic", d=100, r=10, m=1000, seed=0, condition_target=10.0),
        NetworkSpec(topology="ring", n=10, self_weight=0.8),
        AlgorithmSpec(name="drfgt", alpha="1e-4", lam="ratio:0.1", epsilon=0.5, max_iters=5000),
        OutputSpec(dir="runs/paper-synthetic", record_every=10),
    ),
    # d=20, r=3, n=5 ring at the safe step size; the sparse trace keeps the
    # multi-million-iteration run cheap to record
    "desk-pca": ExperimentConfig(
        ProblemSpec(type="planted", d=20, r=3, m=200, seed=0, spectrum=DESK_SPECTRUM, D=(1.0, 0.7, 0.4)),
        NetworkSpec(topology="ring", n=5, self_weight=0.2),
        AlgorithmSpec(name="drfgt", alpha="auto-safe", lam="100", epsilon=0.5, max_iters=6_000_000),
        OutputSpec(dir="runs/desk-pca", record_every=10_000, audit_stride=250_000),
    ),
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    src = PRESETS[name]
    return parse_config(dump_config(src), source=f"preset:{name}")


# -- resolution ----------------------------------------------------------------------


@dataclass
class Resolved:
    """Everything a run needs, with every automatic choice made explicit."""

    config: ExperimentConfig
    problem: PcaProblem
    W: MixingMatrix
    x0: np.ndarray
    alpha: float
    lam: float
    consts: object
    safe_alpha: float
    stable_alpha: float

    def summary_constants(self) -> dict:
        c = self.consts
        return {
            "alpha": self.alpha,
            "lambda": self.lam,
            "gamma": c.gamma,
            "rho": c.rho,
            "C": c.C,
            "L_prime": c.L_prime,
            "L": c.L,
            "L_hat": c.L_hat,
            "s": c.s,
            "G": c.G,
            "epsilon": c.epsilon,
            "sigma_W": self.W.sigma_W,
            "safe_alpha": self.safe_alpha,
            "stable_alpha": self.stable_alpha,
            "seed": self.config.problem.seed,
            "init_seed": self.init_seed,
        }

    @property
    def init_seed(self) -> int:
        s = self.config.algorithm.init_seed
        return self.config.problem.seed if s is None else s


def validate(cfg: ExperimentConfig) -> None:
    """Domain checks that need no computation; raises :class:`ConfigError`."""
    p, net, a, o = cfg.problem, cfg.network, cfg.algorithm, cfg.output
    if p.type not in ("planted", "synthetic", "dataset"):
        raise ConfigError(f"[problem] type: unknown problem type {p.type!r}")
    if p.type == "dataset":
        if not p.dataset:
            raise ConfigError("[problem] dataset: path required for type=dataset")
        if not Path(p.dataset).is_file():
            raise ConfigError(f"[problem] dataset: file {p.dataset!r} not found")
    if p.sign not in (-1, 1):
        raise ConfigError("[problem] sign: must be -1 or +1")
    if not 1 <= p.r <= p.d:
        raise ConfigError(f"[problem] r: need 1 <= r <= d, got r={p.r}, d={p.d}")
    if p.spectrum is not None and len(p.spectrum) != p.d:
        raise ConfigError(f"[problem] spectrum: expected {p.d} values, got {len(p.spectrum)}")
    if p.D is not None and len(p.D) != p.r:
        raise ConfigError(f"[problem] D: expected {p.r} values, got {len(p.D)}")
    if p.m < 1:
        raise ConfigError("[problem] m: must be positive")
    if net.n < 1:
        raise ConfigError("[network] n: must be positive")
    if a.name not in ALGORITHMS:
        raise ConfigError(f"[algorithm] name: unknown algorithm {a.name!r}")
    if a.alpha not in ("auto-safe", "auto-stable"):
        try:
            if not float(a.alpha) > 0:
                raise ValueError
        except ValueError:
            raise ConfigError(f"[algorithm] alpha: expected a positive number or auto-safe/auto-stable, got {a.alpha!r}") from None
    lam = a.lam
    try:
        val = float(lam.split(":", 1)[1]) if lam.startswith("ratio:") else float(lam)
        if not val > 0:
            raise ValueError
    except (ValueError, IndexError):
        raise ConfigError(f"[algorithm] lambda: expected a positive number or ratio:<c>, got {lam!r}") from None
    try:
        check_epsilon(a.epsilon)
    except ParameterError as exc:
        raise ConfigError(f"[algorithm] epsilon: {exc}") from None
    for key in ("max_iters", "consensus_rounds"):
        if getattr(a, key) < 1:
            raise ConfigError(f"[algorithm] {key}: must be >= 1")
    for key in ("tol_grad", "tol_consensus"):
        if not getattr(a, key) >= 0:
            raise ConfigError(f"[algorithm] {key}: must be non-negative")
    if o.format not in ("csv", "jsonl", "both"):
        raise ConfigError(f"[output] format: expected csv, jsonl or both, got {o.format!r}")
    if o.record_every < 1 or o.audit_stride < 1:
        raise ConfigError("[output] record_every and audit_stride must be >= 1")
    if o.audit_mu not in ("auto", "none"):
        try:
            float(o.audit_mu)
        except ValueError:
            raise ConfigError(f"[output] audit_mu: expected auto, none or a number, got {o.audit_mu!r}") from None


def build_problem(cfg: ExperimentConfig) -> PcaProblem:
    p, n = cfg.problem, cfg.network.n
    D = None if p.D is None else np.array(p.D)
    if p.type == "planted":
        spectrum = np.array(p.spectrum) if p.spectrum is not None else None
        if spectrum is None:
            from .problems import default_spectrum

            spectrum = default_spectrum(p.d, p.r)
        return generate_planted_pca(n, p.d, p.r, p.m, spectrum, seed=p.seed, sign=p.sign, D=D)[1]
    if p.type == "synthetic":
        return generate_synthetic_pca(n, p.d, p.r, p.m, p.condition_target, seed=p.seed, sign=p.sign, D=D)[1]
    inst = load_dataset_matrix(p.dataset, n, p.r, p.row_partition, p.center, p.header, p.sign, D)
    if inst.covariances.shape[1] != p.d:
        raise ConfigError(f"[problem] d: dataset has {inst.covariances.shape[1]} features, config says {p.d}")
    return PcaProblem(inst)


def resolve(cfg: ExperimentConfig) -> Resolved:
    """Build the problem and network and pin down alpha and lambda.

    ``auto-safe`` needs lambda first; ``ratio:<c>`` needs alpha first, so the
    combination is rejected.
    """
    from .manifold import random_stiefel

    validate(cfg)
    a = cfg.algorithm
    problem = build_problem(cfg)
    W = build_topology(cfg.network.topology, cfg.network.n, cfg.network.self_weight)
    auto = a.alpha in ("auto-safe", "auto-stable")
    if auto and a.lam.startswith("ratio:"):
        raise ConfigError("[algorithm] lambda: ratio:<c> needs a numeric alpha")
    if auto:
        lam = float(a.lam)
    else:
        alpha = float(a.alpha)
        lam = float(a.lam[6:]) / alpha if a.lam.startswith("ratio:") else float(a.lam)
    params = LandingParams(lam, a.epsilon)
    consts = estimate_constants(problem, params)
    safe = safe_step_size(consts.G, consts.L_prime, lam, a.epsilon, W.sigma_W, W.n)
    stable = stable_step_size(consts.L_prime, W.sigma_W)
    if a.alpha == "auto-safe":
        alpha = safe
    elif a.alpha == "auto-stable":
        alpha = min(safe, stable)
    seed = a.init_seed if a.init_seed is not None else cfg.problem.seed
    x0 = random_stiefel(np.random.default_rng(seed), cfg.problem.d, cfg.problem.r)
    return Resolved(cfg, problem, W, x0, alpha, lam, consts, safe, stable)


def resolved_config(res: Resolved) -> ExperimentConfig:
    """Config with alpha and lambda pinned to the numbers actually used."""
    cfg = res.config
    algo = replace(cfg.algorithm, alpha=repr(res.alpha), lam=repr(res.lam), init_seed=res.init_seed)
    return replace(cfg, algorithm=algo)
