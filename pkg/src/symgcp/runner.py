"""Multi-start experiment driver shared by the CLI and the test suite.

Each initialization gets its own derived random stream and its own output
subdirectory; a summary file marks the initialization with the lowest final
objective.  Initializations can run in a process pool; the data tensor is
loaded once per worker.
"""

from __future__ import annotations

import csv
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from multiprocessing import get_context
from pathlib import Path
from typing import List

import numpy as np

from . import io as sio
from .config import RunConfig, partition_to_text
from .losses import WeightedLoss, get_loss
from .objective import Evaluator, ObjectiveConfig, regularizer_value
from .optimize import fit_adam, fit_lbfgsb, initialize_model
from .stochastic import LossEstimator, make_gradient_source
from .synth import GroundTruth, cosine_score, negate_fix
from .tensors import (
    DenseTensor,
    SparseTensor,
    SymKruskal,
    WeightTensor,
    densify,
    is_symmetric,
    sparsify,
)

# exact final-objective evaluation is skipped above this entry count
EXACT_EVAL_MAX_ENTRIES = 50_000_000

SUMMARY_COLUMNS = (
    "init",
    "final_objective",
    "objective_kind",
    "steps",
    "wall_seconds",
    "status",
    "message",
    "is_best",
)


def load_data(cfg: RunConfig):
    x = sio.read_tensor(cfg.input_path, cfg.input_format)
    if cfg.partition.n_modes != x.ndim:
        raise ValueError(
            f"partition covers {cfg.partition.n_modes} modes but tensor has {x.ndim}"
        )
    cfg.partition.cell_dims(x.dims)
    return x


def build_loss(cfg: RunConfig, x) -> WeightedLoss:
    base = get_loss(cfg.loss_name)
    weights = None
    if cfg.weights_path is not None:
        weights = WeightTensor(sio.read_dense(cfg.weights_path).data)
    if cfg.dedup_weights:
        from .losses import dedup_weights

        mask = dedup_weights(x.dims, cfg.partition)
        weights = mask if weights is None else WeightTensor(weights.data * mask.data)
    return WeightedLoss(base, weights)


def resolve_fastpath(cfg: RunConfig, x) -> bool:
    if cfg.fastpath == "off":
        return False
    if cfg.fastpath == "on":
        return True
    xd = x if isinstance(x, DenseTensor) else densify(x)
    return is_symmetric(xd, cfg.partition, tol=1e-8)


def _objective_config(cfg: RunConfig, loss, fastpath: bool) -> ObjectiveConfig:
    return ObjectiveConfig(
        loss,
        cfg.partition,
        cfg.rank,
        gamma=cfg.gamma,
        optimize_lambda=cfg.optimize_lambda,
        symmetric_data_fastpath=fastpath,
        # resolve_fastpath already checked symmetry in "auto" mode
        fastpath_symmetry_check=cfg.fastpath == "on",
    )


def fit_one(cfg: RunConfig, x, seed, snapshot_callback=None):
    """Run a single initialization; returns (model, trace, final, final_kind)."""
    loss = build_loss(cfg, x)
    init_ss, grad_ss, est_ss = np.random.SeedSequence(seed).spawn(3)
    m0 = initialize_model(x, cfg.partition, cfg.rank, init_ss)
    include_lambda = cfg.optimize_lambda
    if cfg.optimizer_kind == "lbfgsb":
        fastpath = resolve_fastpath(cfg, x)
        ev = Evaluator(_objective_config(cfg, loss, fastpath), x)
        lb = replace(cfg.lbfgsb, lower_bound=loss.lower_bound)
        model, trace = fit_lbfgsb(lb, ev.value_and_gradient, m0, include_lambda=include_lambda)
        return model, trace, trace.final_objective(), "exact"
    # adam: sampling wants coordinate data for the stratified strata
    xs = x
    if cfg.adam.sampler.kind == "stratified" and not isinstance(x, SparseTensor):
        xs = sparsify(x)
    source = make_gradient_source(
        cfg.adam.sampler,
        loss,
        xs,
        gamma=cfg.gamma,
        lambda_frozen=not cfg.optimize_lambda,
        rng=np.random.default_rng(grad_ss),
    )
    estimator = LossEstimator.sampled(
        cfg.adam.sampler, loss, xs,
        size_factor=cfg.estimate_size_factor,
        rng=np.random.default_rng(est_ss),
    )

    def estimate(model):
        return estimator.estimate(model) + regularizer_value(cfg.gamma, model.factors)

    adam = replace(cfg.adam, lower_bound=loss.lower_bound)
    model, trace = fit_adam(
        adam, source, estimate, m0, include_lambda=include_lambda,
        snapshot_callback=snapshot_callback,
    )
    if xs.size <= EXACT_EVAL_MAX_ENTRIES:
        ev = Evaluator(_objective_config(cfg, loss, False), xs)
        return model, trace, ev.value(model), "exact"
    return model, trace, trace.final_objective(), "estimated"


def write_init_outputs(out_dir: Path, model: SymKruskal, trace):
    out_dir.mkdir(parents=True, exist_ok=True)
    sio.write_vector_csv(out_dir / "lambda.csv", model.weights)
    for k, factor in enumerate(model.factors):
        sio.write_matrix_csv(out_dir / f"factor_{k}.csv", factor)
    sio.write_trace_csv(out_dir / "trace.csv", trace)


def _init_seed_ints(root_seed: int, n: int):
    children = np.random.SeedSequence(root_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


# -- worker-pool plumbing ------------------------------------------------

_POOL_DATA = {}


def _pool_init(input_path, input_format):
    _POOL_DATA["x"] = sio.read_tensor(input_path, input_format)


def _pool_task(cfg: RunConfig, index: int, seed: int, out_dir: str):
    return _run_one_init(cfg, _POOL_DATA["x"], index, seed, Path(out_dir))


def _run_one_init(cfg, x, index, seed, out_dir):
    start = time.perf_counter()
    row = {
        "init": index,
        "final_objective": float("nan"),
        "objective_kind": "",
        "steps": 0,
        "wall_seconds": 0.0,
        "status": "ok",
        "message": "",
        "is_best": 0,
    }
    try:
        model, trace, final, kind = fit_one(cfg, x, seed)
        write_init_outputs(out_dir / f"init_{index:03d}", model, trace)
        row.update(
            final_objective=final,
            objective_kind=kind,
            steps=len(trace) - 1,
            status="ok" if trace.success else "optimizer-warning",
            message=trace.message if not trace.success else "",
        )
    except Exception as exc:  # a failed init must not sink the other inits
        row.update(status="failed", message=f"{type(exc).__name__}: {exc}")
        (out_dir / f"init_{index:03d}").mkdir(parents=True, exist_ok=True)
        (out_dir / f"init_{index:03d}" / "error.txt").write_text(traceback.format_exc())
    row["wall_seconds"] = time.perf_counter() - start
    return row


def write_run_meta(out_dir: Path, cfg: RunConfig):
    lines = [
        f"partition = {partition_to_text(cfg.partition)}",
        f"rank = {cfg.rank}",
        f"loss = {cfg.loss_name}",
        f"gamma = {cfg.gamma}",
        f"optimizer = {cfg.optimizer_kind}",
        f"n_initializations = {cfg.n_initializations}",
        f"seed = {cfg.seed}",
    ]
    (out_dir / "run.meta").write_text("\n".join(lines) + "\n")


def write_summary(out_dir: Path, rows):
    ok = [r for r in rows if r["status"] != "failed" and np.isfinite(r["final_objective"])]
    if ok:
        best = min(ok, key=lambda r: r["final_objective"])
        for r in rows:
            r["is_best"] = int(r is best)
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for r in sorted(rows, key=lambda r: r["init"]):
            writer.writerow(r)


def read_summary(run_dir) -> List[dict]:
    rows = []
    with (Path(run_dir) / "summary.csv").open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rec["init"] = int(rec["init"])
            rec["final_objective"] = float(rec["final_objective"])
            rec["is_best"] = int(rec["is_best"])
            rows.append(rec)
    return rows


def decompose_run(cfg: RunConfig, output_dir, threads: int = 1, log=None) -> List[dict]:
    """Fit every initialization, write per-init outputs plus summary.csv."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_run_meta(out, cfg)
    seeds = _init_seed_ints(cfg.seed, cfg.n_initializations)
    rows = []
    if threads <= 1:
        x = load_data(cfg)
        for i, seed in enumerate(seeds):
            rows.append(_run_one_init(cfg, x, i, seed, out))
            if log:
                log(_describe(rows[-1]))
    else:
        # fork keeps worker startup independent of how __main__ was launched
        import multiprocessing as mp

        method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
        ctx = get_context(method)
        with ProcessPoolExecutor(
            max_workers=threads,
            mp_context=ctx,
            initializer=_pool_init,
            initargs=(cfg.input_path, cfg.input_format),
        ) as pool:
            futures = [
                pool.submit(_pool_task, cfg, i, seed, str(out))
                for i, seed in enumerate(seeds)
            ]
            for fut in futures:
                rows.append(fut.result())
                if log:
                    log(_describe(rows[-1]))
    write_summary(out, rows)
    return rows


def _describe(row):
    if row["status"] == "failed":
        return f"init {row['init']}: FAILED ({row['message']})"
    return (
        f"init {row['init']}: objective {row['final_objective']:.6e} "
        f"({row['steps']} steps, {row['wall_seconds']:.1f}s)"
    )


def load_init_model(run_dir, index, partition) -> SymKruskal:
    d = Path(run_dir) / f"init_{index:03d}"
    weights = sio.read_vector_csv(d / "lambda.csv")
    factors = [sio.read_matrix_csv(d / f"factor_{k}.csv") for k in range(partition.n_cells)]
    return SymKruskal(weights, factors, partition)


def evaluate_run(a_star_path, run_dir, output_path=None) -> List[dict]:
    """Score each initialization's first-cell factor against a reference matrix."""
    from .config import parse_kv_file, parse_partition

    run_dir = Path(run_dir)
    a_star = sio.read_matrix_csv(a_star_path)
    meta = {k: v for k, (v, _) in parse_kv_file(run_dir / "run.meta").items()}
    partition = parse_partition(meta["partition"])
    multiplicity = len(partition.cells[0])
    rows = []
    for rec in read_summary(run_dir):
        if rec["status"] == "failed":
            rows.append(
                {"init": rec["init"], "final_objective": rec["final_objective"],
                 "cosine_score": float("nan"), "is_best": rec["is_best"]}
            )
            continue
        model = load_init_model(run_dir, rec["init"], partition)
        a_hat = model.factors[0]
        if a_hat.shape != a_star.shape:
            raise ValueError(
                f"shape mismatch: reference matrix is {a_star.shape} "
                f"but recovered factor is {a_hat.shape}"
            )
        fixed, _ = negate_fix(a_hat, model.weights, a_star, multiplicity)
        rows.append(
            {
                "init": rec["init"],
                "final_objective": rec["final_objective"],
                "cosine_score": cosine_score(a_star, fixed),
                "is_best": rec["is_best"],
            }
        )
    out_path = Path(output_path) if output_path else run_dir / "scores.csv"
    with out_path.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=("init", "final_objective", "cosine_score", "is_best")
        )
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    return rows


def write_ground_truth(out_dir: Path, gt: GroundTruth):
    out_dir.mkdir(parents=True, exist_ok=True)
    sio.write_matrix_csv(out_dir / "a_star.csv", gt.a_star)
    sio.write_sparse(out_dir / "x.tns", gt.x)
    (out_dir / "generation.meta").write_text(
        f"n_clamped = {gt.n_clamped}\nnnz = {gt.x.nnz}\n"
        f"nnz_fraction = {gt.x.nnz / gt.x.size}\n"
    )
