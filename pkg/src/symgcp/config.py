"""Run configuration files: flat ``key = value`` text with dotted block keys.

Example decompose config::

    input = data.tns
    format = sparse
    partition = [[1,2,3,4]]
    rank = 5
    loss = bernoulli-odds
    gamma = 0.1
    n_initializations = 10
    seed = 7
    optimizer = adam
    optimizer.alpha = 0.01
    sampler.kind = stratified
    sampler.p = 500
    sampler.q = 500

'#' starts a comment.  Mode numbers in ``partition`` are 1-based, matching
the tensor file formats.  Unknown keys are hard errors, so a misspelled
hyperparameter cannot silently fall back to a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .losses import LOSS_NAMES
from .optimize import AdamConfig, LbfgsbConfig
from .stochastic import SamplerConfig
from .tensors import ModePartition


class ConfigError(ValueError):
    """Invalid configuration; message carries file, line, and field."""


_REQUIRED = object()


def parse_kv_file(path):
    """Read ``key = value`` lines into {key: (raw_value, lineno)}."""
    path = Path(path)
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in text.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


class _Fields:
    def __init__(self, kv, path):
        self.kv = dict(kv)
        self.path = path

    def take(self, key, cast, default=_REQUIRED):
        if key not in self.kv:
            if default is _REQUIRED:
                raise ConfigError(f"{self.path}: missing required key {key!r}")
            return default
        raw, lineno = self.kv.pop(key)
        try:
            return cast(raw)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"{self.path}:{lineno}: bad value for {key!r}: {exc}") from None

    def finish(self):
        if self.kv:
            leftovers = ", ".join(
                f"{k!r} (line {lineno})" for k, (_, lineno) in sorted(self.kv.items())
            )
            raise ConfigError(f"{self.path}: unknown keys: {leftovers}")


def _bool(raw):
    low = raw.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _choice(*options):
    def cast(raw):
        if raw not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return raw

    return cast


def parse_partition(raw) -> ModePartition:
    """Parse a 1-based partition literal like [[1,2],[3]]."""
    try:
        cells = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"not a valid partition literal: {exc}") from None
    if not isinstance(cells, list) or not all(isinstance(c, list) for c in cells):
        raise ValueError("partition must be a list of lists of mode numbers")
    seen = set()
    flat = []
    for cell in cells:
        if not cell:
            raise ValueError("partition cells must be nonempty")
        for mode in cell:
            if not isinstance(mode, int) or mode < 1:
                raise ValueError(f"mode numbers are 1-based integers, got {mode!r}")
            if mode in seen:
                raise ValueError(f"mode {mode} appears in more than one cell")
            seen.add(mode)
            flat.append(mode)
    n = len(flat)
    missing = sorted(set(range(1, n + 1)) - seen)
    if missing:
        raise ValueError(f"partition must cover modes 1..{n}; missing {missing}")
    return ModePartition([[m - 1 for m in cell] for cell in cells])


def partition_to_text(partition: ModePartition) -> str:
    return json.dumps([[m + 1 for m in cell] for cell in partition.cells])


@dataclass
class RunConfig:
    input_path: str
    input_format: str
    partition: ModePartition
    rank: int
    loss_name: str
    gamma: float = 0.1
    optimize_lambda: bool = True
    fastpath: str = "auto"  # auto | on | off
    weights_path: Optional[str] = None
    dedup_weights: bool = False
    n_initializations: int = 1
    seed: int = 0
    output_dir: Optional[str] = None
    optimizer_kind: str = "lbfgsb"
    lbfgsb: LbfgsbConfig = field(default_factory=LbfgsbConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    estimate_size_factor: int = 10


def _positive_int(raw):
    v = int(raw)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def load_run_config(path) -> RunConfig:
    path = Path(path)
    f = _Fields(parse_kv_file(path), path)
    input_path = f.take("input", str)
    input_format = f.take("format", _choice("sparse", "dense"))
    partition = f.take("partition", parse_partition)
    rank = f.take("rank", _positive_int)
    loss_name = f.take("loss", _choice(*LOSS_NAMES))
    gamma = f.take("gamma", float, default=0.1)
    if gamma < 0:
        raise ConfigError(f"{path}: gamma must be nonnegative")
    optimize_lambda = f.take("optimize_lambda", _bool, default=True)
    fastpath = f.take("fastpath", _choice("auto", "on", "off"), default="auto")
    weights_path = f.take("weights", str, default=None)
    dedup = f.take("dedup_weights", _bool, default=False)
    n_inits = f.take("n_initializations", _positive_int, default=1)
    seed = f.take("seed", int, default=0)
    output_dir = f.take("output", str, default=None)
    optimizer_kind = f.take("optimizer", _choice("lbfgsb", "adam"), default="lbfgsb")

    lbfgsb = LbfgsbConfig(
        memory=f.take("optimizer.memory", _positive_int, default=10),
        max_iterations=f.take("optimizer.max_iterations", _positive_int, default=1000),
        gradient_tol=f.take("optimizer.gradient_tol", float, default=1e-8),
        rel_decrease_tol=f.take("optimizer.rel_decrease_tol", float, default=1e-12),
    )
    sampler = SamplerConfig(
        kind=f.take("sampler.kind", _choice("uniform", "stratified"), default="stratified"),
        s=f.take("sampler.s", _positive_int, default=1000),
        p=f.take("sampler.p", int, default=500),
        q=f.take("sampler.q", int, default=500),
        max_rejection_iters=f.take("sampler.max_rejection_iters", _positive_int, default=100),
    )
    adam = AdamConfig(
        alpha=f.take("optimizer.alpha", float, default=0.01),
        beta1=f.take("optimizer.beta1", float, default=0.9),
        beta2=f.take("optimizer.beta2", float, default=0.999),
        eps_hat=f.take("optimizer.epsilon", float, default=1e-8),
        iters_per_epoch=f.take("optimizer.iters_per_epoch", _positive_int, default=100),
        max_epochs=f.take("optimizer.max_epochs", _positive_int, default=100),
        kappa=f.take("optimizer.kappa", float, default=0.99),
        max_bad_epochs=f.take("optimizer.max_bad_epochs", _positive_int, default=3),
        decay_on_bad_epoch=f.take("optimizer.decay_on_bad_epoch", _bool, default=True),
        bound_projection=f.take("optimizer.bound_projection", _bool, default=True),
        sampler=sampler,
    )
    estimate_size_factor = f.take("sampler.estimate_size_factor", _positive_int, default=10)
    f.finish()
    return RunConfig(
        input_path=input_path,
        input_format=input_format,
        partition=partition,
        rank=rank,
        loss_name=loss_name,
        gamma=gamma,
        optimize_lambda=optimize_lambda,
        fastpath=fastpath,
        weights_path=weights_path,
        dedup_weights=dedup,
        n_initializations=n_inits,
        seed=seed,
        output_dir=output_dir,
        optimizer_kind=optimizer_kind,
        lbfgsb=lbfgsb,
        adam=adam,
        estimate_size_factor=estimate_size_factor,
    )


@dataclass
class GenerateConfig:
    n_modes: int
    n: int
    rank: int
    delta: float
    rho_high: float
    rho_low: float
    seed: int = 0
    output_dir: Optional[str] = None


def load_generate_config(path) -> GenerateConfig:
    path = Path(path)
    f = _Fields(parse_kv_file(path), path)
    cfg = GenerateConfig(
        n_modes=f.take("modes", _positive_int),
        n=f.take("size", _positive_int),
        rank=f.take("rank", _positive_int),
        delta=f.take("delta", float, default=0.15),
        rho_high=f.take("rho_high", float, default=0.9),
        rho_low=f.take("rho_low", float, default=0.002),
        seed=f.take("seed", int, default=0),
        output_dir=f.take("output", str, default=None),
    )
    f.finish()
    return cfg
